"""Batch command-line interface.

Subcommands: generate, pretrain, train, evaluate, sweep, attribute, compare.
Every command funnels randomness through one --seed, writes a manifest
sidecar next to its primary output, and exits nonzero with a categorized
message on failure (2 config, 3 data format, 4 contract, 5 undefined metric,
6 numerics).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import cohort as ch
from . import configio
from . import embeddings as emb
from . import trainer as tr
from .errors import (BffError, ConfigError, DataFormatError, MetricUndefinedError,
                     NumericsError, UsageError)

_EXIT_CODES = [
    (ConfigError, 2, "config"),
    (DataFormatError, 3, "data"),
    (UsageError, 4, "contract"),
    (MetricUndefinedError, 5, "metric"),
    (NumericsError, 6, "numerics"),
]


def _load_train_config(args) -> tr.TrainConfig:
    values = configio.read_kv_file(args.config) if args.config else {}
    values = configio.apply_overrides(values, getattr(args, "set", None))
    config = tr.TrainConfig.from_mapping(values)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _split_cohort(cohort, config: tr.TrainConfig):
    return ch.split(cohort, config.train_fraction, config.split_seed)


def _write_rows(path, fieldnames, rows):
    path = configio.resolve_out(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    values = configio.read_kv_file(args.config) if args.config else {}
    values = configio.apply_overrides(values, args.set)
    config = ch.GeneratorConfig.from_mapping(values)
    cohort = ch.generate(config, args.seed)
    out = configio.resolve_out(args.out)
    ch.save(cohort, out)
    configio.write_manifest(out, "generate", args.seed, config.to_dict(),
                            [args.config] if args.config else [], [out])
    print(f"wrote cohort of {len(cohort)} records to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cohort = ch.load(args.cohort)
    config = _load_train_config(args)
    train_part, _ = _split_cohort(cohort, config)
    corpus = [seq.token_ids for rec in train_part.records
              for _, seq in sorted(rec.sequences.items())]
    table = emb.train_cbow(corpus, vocab_size=cohort.vocab_size, window=args.window,
                           dim=args.dim, epochs=args.epochs, negatives=args.negatives,
                           lr=args.lr, seed=args.seed)
    out = configio.resolve_out(args.out)
    emb.save_table(table, out)
    configio.write_manifest(out, "pretrain", args.seed,
                            {"window": args.window, "dim": args.dim,
                             "epochs": args.epochs, "negatives": args.negatives,
                             "lr": args.lr, "train_fraction": config.train_fraction,
                             "split_seed": config.split_seed},
                            [args.cohort] + ([args.config] if args.config else []),
                            [out])
    losses = ", ".join(f"{x:.4f}" for x in table.epoch_losses)
    print(f"wrote {table.vocab_size}x{table.dim} embedding table to {out} "
          f"(per-epoch loss: {losses})")
    return 0


def cmd_train(args) -> int:
    cohort = ch.load(args.cohort)
    config = _load_train_config(args)
    table = emb.load_table(args.embeddings)
    train_part, _ = _split_cohort(cohort, config)
    outputs = []
    out_prefix = str(configio.resolve_out(args.out))
    if config.regime == "forecasting":
        result = tr.train_forecasting(config, train_part, table)
        outputs.append(result.save(out_prefix))
        log_rows = result.pretrain_log + result.log
        best_rows = {config.eval_window: result.best}
    else:
        result = tr.train(config, train_part, table)
        for window in config.tracked_windows:
            outputs.append(result.save(out_prefix, window))
        log_rows = result.log
        best_rows = result.checkpoints
    if log_rows:
        fieldnames = sorted({k for row in log_rows for k in row}, key=str)
        outputs.append(_write_rows(f"{out_prefix}.log.csv", fieldnames,
                                   [{k: row.get(k, "") for k in fieldnames}
                                    for row in log_rows]))
    configio.write_manifest(out_prefix + ".train", "train", config.seed,
                            tr._config_to_jsonable(config),
                            [args.cohort, args.embeddings] +
                            ([args.config] if args.config else []), outputs)
    for window, ckpt in best_rows.items():
        print(f"best {window}: val metric {ckpt['metric']:.4f} at epoch {ckpt['epoch']}")
    return 0


def cmd_evaluate(args) -> int:
    kind, model, meta = tr.load_any_checkpoint(args.checkpoint)
    extra = meta["extra"]
    config = tr.TrainConfig.from_mapping({})
    for key, value in extra.get("train_config", {}).items():
        if key == "checkpoint_windows":
            value = tuple(value)
        setattr(config, key, value)
    if args.tau1 is not None:
        config.tau1 = args.tau1
    if args.tau2 is not None:
        config.tau2 = args.tau2
    if args.tie_policy:
        config.tie_policy = args.tie_policy
    window = args.window or extra.get("eval_window")
    if window not in ch.WINDOW_NAMES:
        raise ConfigError(f"unknown evaluation window {window!r}")
    if kind == "forecasting" and window == "developmental":
        raise UsageError("forecasting checkpoints are undefined at the "
                         "developmental window: the regime forecasts that window "
                         "from earlier ones")
    cohort = ch.load(args.cohort)
    if args.split == "test":
        _, part = _split_cohort(cohort, config)
    else:
        part = cohort
    table = emb.load_table(args.embeddings)
    pooled, observed = emb.pool_cohort(part, table)
    labels = part.outcome_arrays()
    censoring_sf = None
    if part.task == "survival":
        times = np.asarray(extra.get("censoring_km_times", []), dtype=np.float64)
        values = np.asarray(extra.get("censoring_km_values", []), dtype=np.float64)
        censoring_sf = tr.metrics.StepFunction(times=times, values=values)
    if kind == "forecasting":
        keep = tr.eval_population(observed, window, model.time_window_map)
        probs = model.predict(pooled[keep], observed[keep], window)
        if part.task == "survival":
            edges = config.bin_edges()
            value = tr.metrics.integrated_auc_from_scores(
                lambda t: tr.metrics.survival_risk_scores(probs, edges, t),
                labels[0][keep], labels[1][keep], censoring_sf,
                config.tau1, config.tau2, config.tie_policy)
        else:
            value = tr.metrics.roc_auc(probs, labels[0][keep])
    else:
        value = tr.evaluate_model(model, pooled, observed, labels, window,
                                  censoring_sf, config)
    metric = "integrated_auc_cd" if part.task == "survival" else "roc_auc"
    row = {"regime": extra.get("regime", ""), "fusion": getattr(
        getattr(model, "config", None), "fusion", "/"),
        "eval_window": window, "metric": metric, "value": f"{value:.6f}",
        "seed": extra.get("train_config", {}).get("seed", "")}
    out = _write_rows(args.out, list(row), [row])
    configio.write_manifest(out, "evaluate", row["seed"],
                            {"window": window, "tau1": config.tau1,
                             "tau2": config.tau2, "tie_policy": config.tie_policy},
                            [args.checkpoint, args.cohort, args.embeddings], [out])
    print(f"{metric} at {window}: {value:.4f} ({row['regime']}, {row['fusion']})")
    return 0


def cmd_sweep(args) -> int:
    cohort = ch.load(args.cohort)
    config = _load_train_config(args)
    table = emb.load_table(args.embeddings)
    train_part, test_part = _split_cohort(cohort, config)
    fractions = [float(x) for x in args.fractions.split(",") if x]
    seeds = [int(x) for x in args.seeds.split(",") if x]
    configs = []
    regimes = args.regimes.split(",") if args.regimes else [config.regime]
    for regime in regimes:
        c = tr.TrainConfig(**{**tr._config_to_jsonable(config), "regime": regime.strip(),
                              "checkpoint_windows": ()})
        configs.append(c)
    rows = tr.data_efficiency_sweep(configs, fractions, seeds, train_part,
                                    test_part, table)
    for row in rows:
        row["value"] = f"{row['value']:.6f}"
    out = _write_rows(args.out, ["fraction", "seed", "regime", "fusion",
                                 "eval_window", "value"], rows)
    summary = _aggregate(rows, ("fraction", "regime"), "value")
    sum_rows = [{"fraction": k[0], "regime": k[1], "mean": f"{m:.6f}",
                 "sd": f"{s:.6f}", "n": n} for k, (m, s, n) in sorted(summary.items())]
    sum_path = _write_rows(str(out) + ".summary.csv",
                           ["fraction", "regime", "mean", "sd", "n"], sum_rows)
    configio.write_manifest(out, "sweep", args.seed,
                            {"fractions": fractions, "seeds": seeds,
                             "regimes": regimes},
                            [args.cohort, args.embeddings] +
                            ([args.config] if args.config else []),
                            [out, sum_path])
    print(f"wrote {len(rows)} sweep rows to {out}")
    return 0


def _aggregate(rows, keys, value_key):
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = tuple(str(row[k]) for k in keys)
        groups.setdefault(key, []).append(float(row[value_key]))
    out = {}
    for key, values in groups.items():
        arr = np.asarray(values)
        sd = arr.std(ddof=1) if arr.size > 1 else 0.0
        out[key] = (float(arr.mean()), float(sd), arr.size)
    return out


def cmd_attribute(args) -> int:
    kind, model, meta = tr.load_any_checkpoint(args.checkpoint)
    if kind == "forecasting":
        raise UsageError("attribution requires a fusion checkpoint")
    extra = meta["extra"]
    config = tr.TrainConfig.from_mapping({})
    for key, value in extra.get("train_config", {}).items():
        if key == "checkpoint_windows":
            value = tuple(value)
        setattr(config, key, value)
    window = args.window or extra.get("eval_window")
    cohort = ch.load(args.cohort)
    if args.split == "test":
        _, part = _split_cohort(cohort, config)
    else:
        part = cohort
    table = emb.load_table(args.embeddings)
    out_prefix = str(configio.resolve_out(args.out))
    outputs = []
    if args.importance:
        full = [r for r in part.records if len(r.sequences) == part.modality_count]
        if not full:
            raise UsageError("no fully observed records available for importance")
        sample = full[:args.samples]
        imp = attr.modality_importance(model, sample, table, window, config,
                                       steps=args.steps)
        rows = [{"modality": ch.MODALITY_NAMES[j] if part.modality_count == 4 else str(j),
                 "percentage": f"{imp.percentages[j]:.6f}"}
                for j in range(part.modality_count)]
        outputs.append(_write_rows(f"{out_prefix}.importance.csv",
                                   ["modality", "percentage"], rows))
        print("modality importance: " +
              ", ".join(f"{r['modality']}={float(r['percentage']):.2f}%" for r in rows))
    else:
        ids = [int(x) for x in args.records.split(",") if x]
        by_id = {r.patient_id: r for r in part.records}
        pooled, observed = emb.pool_cohort(part, table)
        index_of = {r.patient_id: i for i, r in enumerate(part.records)}
        for rid in ids:
            if rid not in by_id:
                raise UsageError(f"record id {rid} not present in the cohort split")
            i = index_of[rid]
            if model.config.fusion == "softmax_self_gating":
                heat = attr.extract_gate_weights(model, pooled[i], observed[i],
                                                 window, record_id=rid)
                path = configio.resolve_out(f"{out_prefix}.record{rid}.gate.csv")
                np.savetxt(path, heat.weights, delimiter=",")
                sidecar = Path(str(path) + ".json")
                sidecar.write_text(json.dumps({
                    "record_id": rid, "rows": heat.row_labels,
                    "mask": heat.mask.astype(int).tolist(),
                    "eval_window": window}, indent=2) + "\n")
                outputs += [path, sidecar]
            elif model.config.fusion == "self_attention":
                scores = attr.extract_attention_scores(model, pooled[i], observed[i],
                                                       window)
                for stream, matrix in scores.items():
                    path = configio.resolve_out(
                        f"{out_prefix}.record{rid}.attention.{stream}.csv")
                    np.savetxt(path, matrix, delimiter=",")
                    outputs.append(path)
            else:
                raise UsageError("masked_mean fusion has no weights to extract")
        print(f"wrote attribution files for {len(ids)} record(s)")
    configio.write_manifest(out_prefix, "attribute", extra.get("train_config", {}).get("seed"),
                            {"window": window, "steps": args.steps},
                            [args.checkpoint, args.cohort, args.embeddings], outputs)
    return 0


def cmd_compare(args) -> int:
    run_dir = Path(args.runs)
    files = sorted(run_dir.rglob("*.csv"))
    rows = []
    for f in files:
        with open(f, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"regime", "fusion", "eval_window", "metric", "value", "seed"}
            if reader.fieldnames is None or not need.issubset(reader.fieldnames):
                continue
            rows.extend(reader)
    if not rows:
        raise DataFormatError(f"{run_dir}: no metric CSV rows found")
    windows = sorted({r["eval_window"] for r in rows},
                     key=lambda w: ch.WINDOW_NAMES.index(w) if w in ch.WINDOW_NAMES else 99)
    cells: dict[tuple, dict[str, list[float]]] = {}
    for r in rows:
        key = (r["regime"], r["fusion"], r["metric"])
        cells.setdefault(key, {}).setdefault(r["eval_window"], []).append(float(r["value"]))
    out_rows = []
    for (regime, fusion, metric), by_window in sorted(cells.items()):
        row = {"regime": regime, "fusion": fusion, "metric": metric}
        for w in windows:
            values = by_window.get(w)
            if values:
                arr = np.asarray(values)
                sd = arr.std(ddof=1) if arr.size > 1 else 0.0
                row[w] = f"{arr.mean():.3f} ({sd:.3f})"
            else:
                row[w] = "-"
        out_rows.append(row)
    out = _write_rows(args.out, ["regime", "fusion", "metric"] + windows, out_rows)
    configio.write_manifest(out, "compare", None, {"runs": str(run_dir)},
                            files, [out])
    print(f"wrote summary with {len(out_rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bff",
                                     description="multi-window risk model workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a cohort file")
    p.add_argument("--config", help="generator key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="train token embeddings on the training split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config", help="train config (for the split parameters)")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one regime and save checkpoints")
    p.add_argument("--config", help="train key=value file")
    p.add_argument("--cohort", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--window", choices=ch.WINDOW_NAMES)
    p.add_argument("--tau1", type=float, default=None)
    p.add_argument("--tau2", type=float, default=None)
    p.add_argument("--tie-policy", choices=("as_written", "half_ties"), default=None)
    p.add_argument("--split", choices=("test", "none"), default="test",
                   help="evaluate on the held-out split (default) or the whole file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="data-efficiency sweep over training fractions")
    p.add_argument("--config", help="train key=value file")
    p.add_argument("--cohort", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--fractions", required=True, help="comma list, e.g. 0.1,0.25,1.0")
    p.add_argument("--seeds", required=True, help="comma list of training seeds")
    p.add_argument("--regimes", help="comma list; default: the config's regime")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attribute", help="fusion-weight heatmaps or modality importance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--window", choices=ch.WINDOW_NAMES)
    p.add_argument("--records", help="comma list of record ids (heatmap mode)")
    p.add_argument("--importance", action="store_true")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--split", choices=("test", "none"), default="test")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("compare", help="summarize metric CSVs as mean (sd) cells")
    p.add_argument("--runs", required=True, help="directory of run outputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "attribute":
        if not args.importance and not args.records:
            print("error[config]: attribute needs --records or --importance",
                  file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except BffError as exc:
        for klass, code, label in _EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error[{label}]: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
