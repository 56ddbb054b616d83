"""Training regimes, losses, checkpoint selection, and evaluation.

Five regimes are supported:

* ``standard``        - train and evaluate on windows at or before the
                        evaluation time; prediction loss only.
* ``bff_no_cr``       - train on all observed windows, no contrastive terms,
                        evaluate causally masked.
* ``bff_zp``          - all windows plus both contrastive terms; the head
                        sees only fused patient-specific features.
* ``bff_zp_zt``       - as above but the head sees patient-specific and
                        window-specific features fused separately.
* ``forecasting``     - two stage: pretrain a recurrent encoder to predict
                        the developmental pooled representation from earlier
                        windows, then fine-tune encoder plus head on the
                        task. Only defined for prenatal/birth evaluation.

Checkpoints are selected per evaluation window on a held-out slice of the
training split; the same trained run can track several windows at once.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import contrastive as ct
from . import embeddings as emb
from . import metrics
from .autodiff import Tensor
from .cohort import Cohort, WINDOW_NAMES, split
from .errors import ConfigError, NumericsError, UsageError
from .model import (Model, ModelConfig, causal_mask, load_checkpoint,
                    save_checkpoint)

REGIMES = ("standard", "bff_no_cr", "bff_zp", "bff_zp_zt", "forecasting")
_HEAD_BY_REGIME = {"standard": "joint", "bff_no_cr": "joint",
                   "bff_zp": "zp", "bff_zp_zt": "zp_zt"}


@dataclass
class TrainConfig:
    regime: str = "bff_zp"
    eval_window: str = "birth"
    fusion: str = "softmax_self_gating"
    seed: int = 0
    # splits
    train_fraction: float = 0.8
    split_seed: int = 0
    val_fraction: float = 0.1
    # architecture
    latent_dim: int = 64
    encoder_hidden: int = 128
    head_hidden: int = 64
    n_bins: int = 8
    follow_up_months: int = 96
    gate_reduction: int = 4
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 128
    patience: int = 10
    # contrastive switches (active only for bff_zp / bff_zp_zt)
    snn_within_weight: float = 1.0
    snn_across_weight: float = 1.0
    include_self_pairs: bool = False
    tau_init: float = 0.5
    # embeddings
    finetune_embeddings: bool = False
    # evaluation
    tau1: float = 36.0
    tau2: float = 96.0
    tie_policy: str = "as_written"
    checkpoint_windows: tuple[str, ...] = ()
    # forecasting stage 1
    forecast_hidden: int = 64
    pretrain_epochs: int = 15

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.eval_window not in WINDOW_NAMES:
            raise ConfigError(f"unknown eval_window {self.eval_window!r}")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        for w in self.checkpoint_windows:
            if w not in WINDOW_NAMES:
                raise ConfigError(f"unknown checkpoint window {w!r}")
        if self.regime == "forecasting" and self.eval_window == "developmental":
            raise ConfigError("the forecasting regime has no future window left "
                              "to predict at developmental evaluation time")

    @property
    def tracked_windows(self) -> tuple[str, ...]:
        seen = [self.eval_window]
        for w in self.checkpoint_windows:
            if w not in seen:
                seen.append(w)
        return tuple(seen)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        fields_ = {f.name: f.type for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        for key, raw in values.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown train config key {key!r}")
            kind = fields_[key]
            try:
                if key == "checkpoint_windows":
                    kwargs[key] = tuple(x.strip() for x in raw.split(",") if x.strip())
                elif kind == "bool":
                    kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
                elif kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, float(self.follow_up_months), self.n_bins + 1)


class Adam:
    """Adaptive moment optimizer; hyperparameters from the config."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def assign_bins(y, bin_edges) -> np.ndarray:
    """Bin k covers (edges[k], edges[k+1]]; times beyond the last edge fall
    into the last event bin."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    idx = np.searchsorted(edges, np.asarray(y, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, edges.size - 2)


def dtnn_loss(probs: Tensor, y, s, bin_edges) -> Tensor:
    """Discrete-time likelihood: events pick their bin's probability, censored
    subjects pick the total mass of strictly later bins plus the never-event
    class."""
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    n_classes = probs.shape[1]
    n_bins = n_classes - 1
    bins = assign_bins(y, bin_edges)
    pick = np.zeros((y.size, n_classes))
    for i in range(y.size):
        if s[i] == 1:
            pick[i, bins[i]] = 1.0
        else:
            pick[i, bins[i] + 1:n_bins] = 1.0
            pick[i, n_bins] = 1.0  # never-event class counts as surviving
    picked = ad.tsum(ad.mul(probs, pick), axis=1)
    return ad.mul(ad.tmean(ad.log(picked)), -1.0)


def binary_loss(p: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    term = ad.add(ad.mul(ad.log(p), labels), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - labels))
    return ad.mul(ad.tmean(term), -1.0)


def prediction_loss(probs: Tensor, labels: tuple, task: str, bin_edges) -> Tensor:
    if task == "survival":
        return dtnn_loss(probs, labels[0], labels[1], bin_edges)
    return binary_loss(probs, labels[0])


def _present_slots(observed: np.ndarray):
    flat = np.flatnonzero(observed.reshape(-1))
    m = observed.shape[1]
    return flat, flat // m, flat % m


def total_loss(model: Model, cparams: ct.ContrastiveParams | None,
               pooled: np.ndarray, observed: np.ndarray, train_mask: np.ndarray,
               labels: tuple, config: TrainConfig, bin_edges) -> tuple[Tensor, dict]:
    """Composite objective for one batch. Returns the scalar and its parts."""
    out = model.forward(pooled, train_mask)
    pred = prediction_loss(out.probs, labels, model.config.task, bin_edges)
    parts = {"prediction": float(pred.data)}
    total = pred
    if config.regime in ("bff_zp", "bff_zp_zt") and cparams is not None:
        flat, pids, mids = _present_slots(observed)
        m = observed.shape[1]
        d = model.config.latent_dim
        zp_slots = ad.gather_rows(ad.reshape(out.z_p, (-1, d)), flat)
        zt_slots = ad.gather_rows(ad.reshape(out.z_t, (-1, d)), flat)
        if config.snn_across_weight != 0.0:
            across = ct.snn_across(zp_slots, pids, mids, cparams.log_tau_a,
                                   config.include_self_pairs)
            parts["snn_across"] = float(across.data)
            if config.snn_across_weight != 1.0:
                across = ad.mul(across, config.snn_across_weight)
            total = ad.add(total, across)
        if config.snn_within_weight != 0.0:
            within = ct.snn_within(zt_slots, pids, mids, cparams.log_tau_w,
                                   config.include_self_pairs)
            parts["snn_within"] = float(within.data)
            if config.snn_within_weight != 1.0:
                within = ad.mul(within, config.snn_within_weight)
            total = ad.add(total, within)
    parts["total"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# Evaluation helpers (shared by the trainer's validation and the CLI)
# ---------------------------------------------------------------------------


def required_modalities(eval_window: str, time_window_map) -> np.ndarray:
    """Modalities belonging to exactly the evaluation window; evaluation is
    restricted to subjects observing all of them."""
    w = WINDOW_NAMES.index(eval_window)
    return np.array([tw == w for tw in time_window_map], dtype=bool)


def eval_population(observed: np.ndarray, eval_window: str, time_window_map) -> np.ndarray:
    req = required_modalities(eval_window, time_window_map)
    return observed[:, req].all(axis=1)


def predict(model: Model, pooled: np.ndarray, observed: np.ndarray,
            eval_window: str) -> np.ndarray:
    """Causally masked forward pass; returns event-bin probabilities or
    binary probabilities as plain arrays."""
    allowed = causal_mask(eval_window, model.config.time_window_map)
    mask = observed & allowed[None, :]
    out = model.forward(pooled, mask)
    return out.probs.data


def evaluate_model(model: Model, pooled: np.ndarray, observed: np.ndarray,
                   labels: tuple, eval_window: str, censoring_sf,
                   config: TrainConfig) -> float:
    keep = eval_population(observed, eval_window, model.config.time_window_map)
    if not keep.any():
        raise UsageError(f"no evaluable records at {eval_window}")
    probs = predict(model, pooled[keep], observed[keep], eval_window)
    if model.config.task == "survival":
        y, s = labels[0][keep], labels[1][keep]
        edges = config.bin_edges()
        return metrics.integrated_auc_from_scores(
            lambda t: metrics.survival_risk_scores(probs, edges, t),
            y, s, censoring_sf, config.tau1, config.tau2, config.tie_policy)
    return metrics.roc_auc(probs, labels[0][keep])


# ---------------------------------------------------------------------------
# Main training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    model_config: ModelConfig | None
    checkpoints: dict[str, dict]  # window -> {params, epoch, metric}
    log: list[dict] = field(default_factory=list)
    censoring_sf: metrics.StepFunction | None = None

    def best_model(self, window: str | None = None) -> Model:
        window = window or self.config.eval_window
        if window not in self.checkpoints:
            raise UsageError(f"no checkpoint tracked for window {window!r}")
        model = Model(self.model_config, seed=0)
        for name, value in self.checkpoints[window]["params"].items():
            model.params[name].data = value.copy()
        return model

    def save(self, prefix, window: str | None = None):
        window = window or self.config.eval_window
        model = self.best_model(window)
        extra = {
            "kind": "fusion",
            "regime": self.config.regime,
            "eval_window": window,
            "train_config": _config_to_jsonable(self.config),
            "val_metric": self.checkpoints[window]["metric"],
            "epoch": self.checkpoints[window]["epoch"],
            "censoring_km_times": self.censoring_sf.times.tolist() if self.censoring_sf else [],
            "censoring_km_values": self.censoring_sf.values.tolist() if self.censoring_sf else [],
        }
        path = f"{prefix}.{window}.ckpt.npz"
        save_checkpoint(path, model, extra)
        return path


def _config_to_jsonable(config: TrainConfig) -> dict:
    raw = asdict(config)
    raw["checkpoint_windows"] = list(raw["checkpoint_windows"])
    return raw


def _snapshot(model_params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model_params.items()}


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.shape[0] < 2:
            continue
        yield idx


def _labels_subset(labels: tuple, idx) -> tuple:
    return tuple(arr[idx] for arr in labels)


def train(config: TrainConfig, train_cohort: Cohort, table: emb.EmbeddingTable,
          features: tuple[np.ndarray, np.ndarray] | None = None) -> TrainResult:
    """Optimize on a 90/10 fit/validation division of the training split and
    keep the best checkpoint per tracked evaluation window."""
    if config.regime == "forecasting":
        raise UsageError("use train_forecasting for the forecasting regime")
    task = train_cohort.task
    if features is None:
        features = emb.pool_cohort(train_cohort, table)
    pooled_all, observed_all = features
    labels_all = train_cohort.outcome_arrays()

    n = len(train_cohort)
    order = np.random.default_rng(config.seed).permutation(n)
    n_fit = int(round(n * (1.0 - config.val_fraction)))
    n_fit = min(max(n_fit, 1), n - 1)
    fit_idx, val_idx = order[:n_fit], order[n_fit:]

    censoring_sf = None
    if task == "survival":
        censoring_sf = metrics.km(labels_all[0], labels_all[1], target="censoring")

    mconfig = ModelConfig(
        task=task, modality_count=train_cohort.modality_count,
        emb_dim=table.dim, latent_dim=config.latent_dim,
        encoder_hidden=config.encoder_hidden, fusion=config.fusion,
        head_input=_HEAD_BY_REGIME[config.regime], head_hidden=config.head_hidden,
        n_bins=config.n_bins, gate_reduction=config.gate_reduction,
        time_window_map=train_cohort.time_window_map)
    model = Model(mconfig, seed=config.seed)

    snn_active = config.regime in ("bff_zp", "bff_zp_zt")
    cparams = ct.ContrastiveParams.create(config.tau_init) if snn_active else None

    trainable = model.parameters()
    if cparams is not None:
        trainable = trainable + cparams.tensors()
    emb_tensor = None
    if config.finetune_embeddings:
        emb_tensor = ad.parameter(table.table.copy(), "embedding_table")
        trainable = trainable + [emb_tensor]
    optimizer = Adam(trainable, config.lr, config.beta1, config.beta2, config.eps)

    if config.regime == "standard":
        train_allowed = causal_mask(config.eval_window, train_cohort.time_window_map)
    else:
        train_allowed = np.ones(train_cohort.modality_count, dtype=bool)

    bin_edges = config.bin_edges()
    tracked = config.tracked_windows
    best: dict[str, dict] = {}
    since_best = 0
    log: list[dict] = []
    batch_rng = np.random.default_rng(config.seed + 1)

    if config.finetune_embeddings:
        id_batches = _token_batches(train_cohort, fit_idx)

    for epoch in range(config.epochs):
        sums: dict[str, float] = {}
        count = 0
        for pos in _epoch_batches(fit_idx.size, config.batch_size, batch_rng):
            idx = fit_idx[pos]
            observed = observed_all[idx]
            if config.finetune_embeddings:
                pooled = _pool_from_tokens(emb_tensor, id_batches, idx)
            else:
                pooled = pooled_all[idx]
            train_mask = observed & train_allowed[None, :]
            try:
                loss, parts = total_loss(model, cparams, pooled, observed, train_mask,
                                         _labels_subset(labels_all, idx), config,
                                         bin_edges)
            except NumericsError as exc:
                raise NumericsError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise NumericsError(
                    f"training diverged at epoch {epoch}: loss={loss.data!r}, "
                    f"parts={parts}")
            optimizer.zero_grad()
            loss.backward()
            if emb_tensor is not None and emb_tensor.grad is not None:
                emb_tensor.grad[0] = 0.0  # padding row stays frozen
            optimizer.step()
            if cparams is not None:
                cparams.clamp()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1

        row = {"epoch": epoch}
        for k, v in sums.items():
            row[f"loss_{k}"] = v / max(count, 1)
        eval_table = table
        if emb_tensor is not None:
            eval_table = emb.EmbeddingTable(table=emb_tensor.data)
            pooled_val, _ = emb.pool_cohort(_subset_for_eval(train_cohort, val_idx), eval_table)
        else:
            pooled_val = pooled_all[val_idx]
        improved_primary = False
        for window in tracked:
            try:
                value = evaluate_model(model, pooled_val, observed_all[val_idx],
                                       _labels_subset(labels_all, val_idx), window,
                                       censoring_sf, config)
            except metrics.MetricUndefinedError:
                value = float("nan")
            row[f"val_{window}"] = value
            prior = best.get(window)
            if np.isfinite(value) and (prior is None or value > prior["metric"]):
                best[window] = {"params": _snapshot(model.params), "epoch": epoch,
                                "metric": value}
                if cparams is not None:
                    best[window]["log_tau_w"] = float(cparams.log_tau_w.data)
                    best[window]["log_tau_a"] = float(cparams.log_tau_a.data)
                if emb_tensor is not None:
                    best[window]["embedding_table"] = emb_tensor.data.copy()
                if window == config.eval_window:
                    improved_primary = True
        log.append(row)
        since_best = 0 if improved_primary else since_best + 1
        if since_best >= config.patience:
            break

    for window in tracked:
        if window not in best:
            # validation metric never defined; fall back to the final state
            best[window] = {"params": _snapshot(model.params),
                            "epoch": len(log) - 1, "metric": float("nan")}
    return TrainResult(config=config, model_config=mconfig, checkpoints=best,
                       log=log, censoring_sf=censoring_sf)


def _subset_for_eval(cohort: Cohort, idx) -> Cohort:
    return Cohort(records=[cohort.records[i] for i in idx],
                  modality_count=cohort.modality_count, vocab_size=cohort.vocab_size,
                  time_window_map=cohort.time_window_map, task=cohort.task,
                  seed=cohort.seed, config=cohort.config)


def _token_batches(cohort: Cohort, fit_idx) -> dict:
    """Padded token matrices for the whole cohort, for the fine-tuning path."""
    from .cohort import _build_batch

    batch = _build_batch(cohort, np.arange(len(cohort)))
    return {"ids": batch.token_ids, "mask": batch.token_mask}


def _pool_from_tokens(emb_tensor: Tensor, id_batches: dict, idx) -> Tensor:
    pooled = []
    for j, (ids, mask) in enumerate(zip(id_batches["ids"], id_batches["mask"])):
        sub_ids = ids[idx]
        sub_mask = mask[idx].astype(np.float64)
        flat = ad.gather_rows(emb_tensor, sub_ids.reshape(-1))
        stackd = ad.reshape(flat, (sub_ids.shape[0], sub_ids.shape[1], -1))
        weighted = ad.mul(stackd, sub_mask[:, :, None])
        counts = np.maximum(sub_mask.sum(axis=1), 1.0)
        pooled.append(ad.div(ad.tsum(weighted, axis=1), counts[:, None]))
    return ad.stack(pooled, axis=1)


# ---------------------------------------------------------------------------
# Forecasting regime
# ---------------------------------------------------------------------------


class ForecastModel:
    """Gated recurrence over early-window pooled vectors plus an MLP decoder
    that reconstructs the developmental pooled vector; after pretraining the
    recurrent state feeds the prediction head."""

    def __init__(self, task: str, emb_dim: int, hidden: int, head_hidden: int,
                 n_bins: int, time_window_map, seed: int = 0):
        self.task = task
        self.emb_dim = emb_dim
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.n_bins = n_bins
        self.time_window_map = tuple(time_window_map)
        self.early = [j for j, w in enumerate(self.time_window_map)
                      if w < max(self.time_window_map)]
        self.target = [j for j, w in enumerate(self.time_window_map)
                       if w == max(self.time_window_map)]
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for gate in ("r", "z", "h"):
            self._add(rng, f"W{gate}", (emb_dim, hidden))
            self._add(rng, f"U{gate}", (hidden, hidden))
            self.params[f"b{gate}"] = ad.parameter(np.zeros(hidden), f"b{gate}")
        self._add(rng, "dec1_w", (hidden, head_hidden))
        self.params["dec1_b"] = ad.parameter(np.zeros(head_hidden), "dec1_b")
        self._add(rng, "dec2_w", (head_hidden, emb_dim))
        self.params["dec2_b"] = ad.parameter(np.zeros(emb_dim), "dec2_b")
        self._add(rng, "head1_w", (hidden, head_hidden))
        self.params["head1_b"] = ad.parameter(np.zeros(head_hidden), "head1_b")
        out_dim = n_bins + 1 if task == "survival" else 1
        self.params["head2_w"] = ad.parameter(np.zeros((head_hidden, out_dim)), "head2_w")
        self.params["head2_b"] = ad.parameter(np.zeros(out_dim), "head2_b")

    def _add(self, rng, name: str, shape: tuple[int, int]):
        self.params[name] = ad.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape), name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_parameters(self) -> list[Tensor]:
        keys = [f"{k}{g}" for g in ("r", "z", "h") for k in ("W", "U", "b")]
        return [self.params[k] for k in keys]

    def head_parameters(self) -> list[Tensor]:
        return [self.params[k] for k in ("head1_w", "head1_b", "head2_w", "head2_b")]

    def decoder_parameters(self) -> list[Tensor]:
        return [self.params[k] for k in ("dec1_w", "dec1_b", "dec2_w", "dec2_b")]

    def encode(self, pooled: np.ndarray, step_mask: np.ndarray) -> Tensor:
        """Run the gated recurrence over early windows in clinical-time order;
        masked steps leave the state untouched."""
        b = pooled.shape[0]
        p = self.params
        h = ad.tensor(np.zeros((b, self.hidden)))
        for t, j in enumerate(self.early):
            x = ad.tensor(pooled[:, j, :] * step_mask[:, j, None])
            m = step_mask[:, j, None].astype(np.float64)
            r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["Wr"]), ad.matmul(h, p["Ur"])), p["br"]))
            u = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["Wz"]), ad.matmul(h, p["Uz"])), p["bz"]))
            cand = ad.tanh(ad.add(ad.add(ad.matmul(x, p["Wh"]),
                                         ad.matmul(ad.mul(r, h), p["Uh"])), p["bh"]))
            h_new = ad.add(ad.mul(ad.sub(1.0, u), h), ad.mul(u, cand))
            h = ad.add(ad.mul(h_new, m), ad.mul(h, 1.0 - m))
        return h

    def decode(self, h: Tensor) -> Tensor:
        p = self.params
        mid = ad.relu(ad.add(ad.matmul(h, p["dec1_w"]), p["dec1_b"]))
        return ad.add(ad.matmul(mid, p["dec2_w"]), p["dec2_b"])

    def head(self, h: Tensor) -> Tensor:
        p = self.params
        mid = ad.relu(ad.add(ad.matmul(h, p["head1_w"]), p["head1_b"]))
        logits = ad.add(ad.matmul(mid, p["head2_w"]), p["head2_b"])
        if self.task == "survival":
            return ad.softmax(logits, axis=1)
        return ad.reshape(ad.sigmoid(logits), (logits.shape[0],))

    def predict(self, pooled: np.ndarray, observed: np.ndarray,
                eval_window: str) -> np.ndarray:
        if eval_window == "developmental":
            raise UsageError("forecasting models cannot be evaluated at the "
                             "developmental window: no future window remains")
        allowed = causal_mask(eval_window, self.time_window_map)
        step_mask = (observed & allowed[None, :]).astype(np.float64)
        h = self.encode(pooled, step_mask)
        return self.head(h).data


def train_forecasting(config: TrainConfig, train_cohort: Cohort,
                      table: emb.EmbeddingTable,
                      features: tuple[np.ndarray, np.ndarray] | None = None):
    """Stage 1: reconstruct the developmental pooled vector from earlier
    windows. Stage 2: fine-tune encoder and head on the prediction task with
    inputs restricted to the evaluation window."""
    if config.regime != "forecasting":
        raise UsageError("train_forecasting requires regime=forecasting")
    task = train_cohort.task
    if features is None:
        features = emb.pool_cohort(train_cohort, table)
    pooled_all, observed_all = features
    labels_all = train_cohort.outcome_arrays()

    n = len(train_cohort)
    order = np.random.default_rng(config.seed).permutation(n)
    n_fit = min(max(int(round(n * (1.0 - config.val_fraction))), 1), n - 1)
    fit_idx, val_idx = order[:n_fit], order[n_fit:]

    censoring_sf = None
    if task == "survival":
        censoring_sf = metrics.km(labels_all[0], labels_all[1], target="censoring")

    fm = ForecastModel(task=task, emb_dim=table.dim, hidden=config.forecast_hidden,
                       head_hidden=config.head_hidden, n_bins=config.n_bins,
                       time_window_map=train_cohort.time_window_map, seed=config.seed)
    target_j = fm.target[0]
    bin_edges = config.bin_edges()

    # stage 1: forecasting pretraining on records with the target window
    pre_opt = Adam(fm.encoder_parameters() + fm.decoder_parameters(),
                   config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed + 1)
    pretrain_log = []
    has_target = observed_all[fit_idx][:, target_j]
    pre_idx = fit_idx[has_target]
    for epoch in range(config.pretrain_epochs):
        total, count = 0.0, 0
        for pos in _epoch_batches(pre_idx.size, config.batch_size, rng):
            idx = pre_idx[pos]
            step_mask = observed_all[idx].astype(np.float64)
            h = fm.encode(pooled_all[idx], step_mask)
            recon = fm.decode(h)
            err = ad.sub(recon, pooled_all[idx][:, target_j, :])
            loss = ad.tmean(ad.mul(err, err))
            if not np.isfinite(loss.data):
                raise NumericsError(f"forecast pretraining diverged at epoch {epoch}")
            pre_opt.zero_grad()
            loss.backward()
            pre_opt.step()
            total += float(loss.data)
            count += 1
        pretrain_log.append({"epoch": epoch, "loss_mse": total / max(count, 1)})

    # stage 2: task fine-tuning with inputs prior to the evaluation window
    allowed = causal_mask(config.eval_window, train_cohort.time_window_map)
    opt = Adam(fm.encoder_parameters() + fm.head_parameters(),
               config.lr, config.beta1, config.beta2, config.eps)
    best = None
    since_best = 0
    log = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for pos in _epoch_batches(fit_idx.size, config.batch_size, rng):
            idx = fit_idx[pos]
            step_mask = (observed_all[idx] & allowed[None, :]).astype(np.float64)
            h = fm.encode(pooled_all[idx], step_mask)
            probs = fm.head(h)
            loss = prediction_loss(probs, _labels_subset(labels_all, idx), task, bin_edges)
            if not np.isfinite(loss.data):
                raise NumericsError(f"forecast fine-tuning diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data)
            count += 1
        row = {"epoch": epoch, "loss_prediction": total / max(count, 1)}
        keep = eval_population(observed_all[val_idx], config.eval_window,
                               train_cohort.time_window_map)
        probs = fm.predict(pooled_all[val_idx][keep], observed_all[val_idx][keep],
                           config.eval_window)
        try:
            if task == "survival":
                y, s = labels_all[0][val_idx][keep], labels_all[1][val_idx][keep]
                value = metrics.integrated_auc_from_scores(
                    lambda t: metrics.survival_risk_scores(probs, bin_edges, t),
                    y, s, censoring_sf, config.tau1, config.tau2, config.tie_policy)
            else:
                value = metrics.roc_auc(probs, labels_all[0][val_idx][keep])
        except metrics.MetricUndefinedError:
            value = float("nan")
        row["val_" + config.eval_window] = value
        log.append(row)
        improved = np.isfinite(value) and (best is None or value > best["metric"])
        if improved:
            best = {"params": {k: t.data.copy() for k, t in fm.params.items()},
                    "epoch": epoch, "metric": value}
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
    if best is None:
        best = {"params": {k: t.data.copy() for k, t in fm.params.items()},
                "epoch": len(log) - 1, "metric": float("nan")}
    return ForecastResult(config=config, best=best, pretrain_log=pretrain_log,
                          log=log, censoring_sf=censoring_sf,
                          shape={"task": task, "emb_dim": table.dim,
                                 "hidden": config.forecast_hidden,
                                 "head_hidden": config.head_hidden,
                                 "n_bins": config.n_bins,
                                 "time_window_map": list(train_cohort.time_window_map)})


@dataclass
class ForecastResult:
    config: TrainConfig
    best: dict
    pretrain_log: list[dict]
    log: list[dict]
    censoring_sf: metrics.StepFunction | None
    shape: dict

    def best_model(self) -> ForecastModel:
        fm = ForecastModel(task=self.shape["task"], emb_dim=self.shape["emb_dim"],
                           hidden=self.shape["hidden"],
                           head_hidden=self.shape["head_hidden"],
                           n_bins=self.shape["n_bins"],
                           time_window_map=self.shape["time_window_map"], seed=0)
        for name, value in self.best["params"].items():
            fm.params[name].data = value.copy()
        return fm

    def save(self, prefix):
        from .model import save_param_archive

        extra = {
            "kind": "forecasting",
            "regime": "forecasting",
            "eval_window": self.config.eval_window,
            "train_config": _config_to_jsonable(self.config),
            "val_metric": self.best["metric"],
            "epoch": self.best["epoch"],
            "shape": self.shape,
            "censoring_km_times": self.censoring_sf.times.tolist() if self.censoring_sf else [],
            "censoring_km_values": self.censoring_sf.values.tolist() if self.censoring_sf else [],
        }
        path = f"{prefix}.{self.config.eval_window}.ckpt.npz"
        save_param_archive(path, {k: ad.tensor(v) for k, v in self.best["params"].items()},
                           extra)
        return path


# ---------------------------------------------------------------------------
# Data-efficiency sweep
# ---------------------------------------------------------------------------


def subsample(cohort: Cohort, fraction: float, seed: int) -> Cohort:
    """Seeded subsample of a training split; fraction 1.0 is the identity so
    full-data sweeps reproduce the headline run bitwise."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return cohort
    n = len(cohort)
    k = max(int(round(n * fraction)), 2)
    idx = np.random.default_rng(seed).permutation(n)[:k]
    return _subset_for_eval(cohort, idx)


def data_efficiency_sweep(configs: list[TrainConfig], fractions, seeds,
                          train_cohort: Cohort, test_cohort: Cohort,
                          table: emb.EmbeddingTable) -> list[dict]:
    """Train every (config, fraction, seed) combination on a subsample of the
    training split and evaluate on the fixed test split."""
    rows = []
    test_features = emb.pool_cohort(test_cohort, table)
    test_labels = test_cohort.outcome_arrays()
    for fraction in fractions:
        for seed in seeds:
            part = subsample(train_cohort, float(fraction), seed)
            if len(part) < 4:
                raise ConfigError(f"subsample at fraction {fraction} is too small")
            features = emb.pool_cohort(part, table)
            for base in configs:
                config = copy.deepcopy(base)
                config.seed = int(seed)
                if config.regime == "forecasting":
                    result = train_forecasting(config, part, table, features)
                    fm = result.best_model()
                    value = _evaluate_forecast(fm, test_features, test_labels,
                                               config, result.censoring_sf)
                else:
                    result = train(config, part, table, features)
                    model = result.best_model()
                    value = evaluate_model(model, test_features[0], test_features[1],
                                           test_labels, config.eval_window,
                                           result.censoring_sf, config)
                rows.append({"fraction": float(fraction), "seed": int(seed),
                             "regime": config.regime, "fusion": config.fusion,
                             "eval_window": config.eval_window, "value": value})
    return rows


def _evaluate_forecast(fm: ForecastModel, test_features, test_labels,
                       config: TrainConfig, censoring_sf) -> float:
    pooled, observed = test_features
    keep = eval_population(observed, config.eval_window, fm.time_window_map)
    probs = fm.predict(pooled[keep], observed[keep], config.eval_window)
    if fm.task == "survival":
        y, s = test_labels[0][keep], test_labels[1][keep]
        edges = config.bin_edges()
        return metrics.integrated_auc_from_scores(
            lambda t: metrics.survival_risk_scores(probs, edges, t),
            y, s, censoring_sf, config.tau1, config.tau2, config.tie_policy)
    return metrics.roc_auc(probs, test_labels[0][keep])


# ---------------------------------------------------------------------------
# Checkpoint loading for evaluation (fusion and forecasting kinds)
# ---------------------------------------------------------------------------


def load_any_checkpoint(path):
    """Returns ('fusion', Model, meta) or ('forecasting', ForecastModel, meta)."""
    from .model import load_param_archive

    arrays, meta = load_param_archive(path)
    kind = meta.get("extra", {}).get("kind", "fusion")
    if kind == "forecasting":
        shape = meta["extra"]["shape"]
        fm = ForecastModel(task=shape["task"], emb_dim=shape["emb_dim"],
                           hidden=shape["hidden"], head_hidden=shape["head_hidden"],
                           n_bins=shape["n_bins"],
                           time_window_map=shape["time_window_map"], seed=0)
        for name, tensor in fm.params.items():
            if f"param__{name}" not in arrays:
                raise UsageError(f"{path}: forecasting checkpoint missing {name}")
            tensor.data = arrays[f"param__{name}"].astype(np.float64)
        return kind, fm, meta
    model, meta = load_checkpoint(path)
    return "fusion", model, meta
