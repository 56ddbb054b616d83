"""Explainability: fusion-weight heatmaps, integrated gradients over token
embeddings, and per-modality attribution percentages.

Integrated gradients uses the all-padding record as the baseline (the padding
embedding row is frozen at zero, so the baseline input is the zero tensor)
and a midpoint Riemann approximation of the path integral. The attributed
scalar is the cumulative event probability through the horizon bin for
survival heads, or the positive-class probability for binary heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import MODALITY_NAMES, PatientRecord
from .embeddings import EmbeddingTable
from .errors import ConfigError, UsageError
from .model import Model, causal_mask
from .trainer import TrainConfig, assign_bins


@dataclass
class GateHeatmap:
    weights: np.ndarray  # (m, f) or (2m, f) when both streams are fused
    row_labels: list[str]
    record_id: int
    mask: np.ndarray


@dataclass
class ModalityImportance:
    percentages: np.ndarray  # (m,), sums to 100
    per_sample: np.ndarray  # (n_samples, m)
    record_ids: list[int]


def _record_fusion_mask(model: Model, observed_row: np.ndarray, eval_window: str) -> np.ndarray:
    return observed_row & causal_mask(eval_window, model.config.time_window_map)


def extract_gate_weights(model: Model, pooled_row: np.ndarray, observed_row: np.ndarray,
                         eval_window: str, record_id: int = -1) -> GateHeatmap:
    """The softmax self-gating weight matrix exactly as used in the forward
    pass; rows of masked modalities are exact zeros."""
    if model.config.fusion != "softmax_self_gating":
        raise UsageError(f"gate weights require softmax_self_gating fusion, "
                         f"model uses {model.config.fusion!r}")
    mask = _record_fusion_mask(model, observed_row, eval_window)
    out = model.forward(pooled_row[None, :, :], mask[None, :])
    blocks, labels = [], []
    for stream in model.config.streams:
        w = out.fusion_weights[stream].data[0]
        blocks.append(w)
        names = MODALITY_NAMES if len(w) == len(MODALITY_NAMES) else [
            f"modality_{j}" for j in range(len(w))]
        labels.extend(f"{n}:{stream}" if len(model.config.streams) > 1 else n
                      for n in names)
    return GateHeatmap(weights=np.concatenate(blocks, axis=0), row_labels=labels,
                       record_id=record_id, mask=mask)


def extract_attention_scores(model: Model, pooled_row: np.ndarray,
                             observed_row: np.ndarray, eval_window: str) -> dict[str, np.ndarray]:
    """Per-stream modality-by-modality attention; masked rows and columns are
    exact zeros, unmasked rows sum to 1 over unmasked columns."""
    if model.config.fusion != "self_attention":
        raise UsageError(f"attention scores require self_attention fusion, "
                         f"model uses {model.config.fusion!r}")
    mask = _record_fusion_mask(model, observed_row, eval_window)
    out = model.forward(pooled_row[None, :, :], mask[None, :])
    return {stream: a.data[0] for stream, a in out.attention.items()}


# ---------------------------------------------------------------------------
# Integrated gradients
# ---------------------------------------------------------------------------


def integrated_gradients(forward_fn, inputs: list[np.ndarray],
                         baselines: list[np.ndarray] | None = None,
                         steps: int = 64) -> list[np.ndarray]:
    """Midpoint-rule path integral of gradients from baseline to input.

    forward_fn takes a list of Tensors (same shapes as ``inputs``) and returns
    a scalar Tensor. Returns one attribution array per input.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if baselines is None:
        baselines = [np.zeros_like(x) for x in inputs]
    deltas = [np.asarray(x, dtype=np.float64) - b for x, b in zip(inputs, baselines)]
    grads = [np.zeros_like(x, dtype=np.float64) for x in inputs]
    for k in range(1, steps + 1):
        lam = (k - 0.5) / steps
        points = [ad.tensor(b + lam * dx, requires_grad=True)
                  for b, dx in zip(baselines, deltas)]
        out = forward_fn(points)
        if out.data.shape != ():
            raise UsageError("integrated_gradients: forward_fn must return a scalar")
        out.backward()
        for g, p in zip(grads, points):
            if p.grad is not None:
                g += p.grad
    return [dx * g / steps for dx, g in zip(deltas, grads)]


def _record_embedding_inputs(record: PatientRecord, table: EmbeddingTable,
                             modality_count: int):
    inputs, modality_order = [], []
    for j in range(modality_count):
        seq = record.sequences.get(j)
        if seq is None:
            continue
        ids = np.asarray(seq.token_ids, dtype=np.int64)
        inputs.append(table.table[ids])
        modality_order.append(j)
    return inputs, modality_order


def _target_scalar(model: Model, probs: Tensor, horizon: float, bin_edges) -> Tensor:
    if model.config.task == "survival":
        idx = assign_bins([horizon], bin_edges)[0]
        return ad.tsum(probs[0, :idx + 1])
    return probs[0]


def record_attributions(model: Model, record: PatientRecord, table: EmbeddingTable,
                        eval_window: str, config: TrainConfig,
                        steps: int = 64) -> dict[int, np.ndarray]:
    """Per-token, per-embedding-dimension attributions for one record's
    observed modalities, against the all-padding baseline."""
    m = model.config.modality_count
    observed_row = np.zeros(m, dtype=bool)
    for j in record.sequences:
        observed_row[j] = True
    mask = _record_fusion_mask(model, observed_row, eval_window)
    if not mask.any():
        raise UsageError("record has no usable modality at this window")
    inputs, order = _record_embedding_inputs(record, table, m)
    bin_edges = config.bin_edges()
    horizon = config.tau2

    def forward_fn(points: list[Tensor]) -> Tensor:
        pooled_rows = []
        by_modality = dict(zip(order, points))
        for j in range(m):
            if j in by_modality:
                pooled_rows.append(ad.tmean(by_modality[j], axis=0))
            else:
                pooled_rows.append(ad.tensor(np.zeros(table.dim)))
        pooled = ad.reshape(ad.concat(pooled_rows, axis=0), (1, m, table.dim))
        out = model.forward(pooled, mask[None, :])
        return _target_scalar(model, out.probs, horizon, bin_edges)

    attrs = integrated_gradients(forward_fn, inputs, steps=steps)
    return dict(zip(order, attrs))


def completeness_gap(model: Model, record: PatientRecord, table: EmbeddingTable,
                     eval_window: str, config: TrainConfig, steps: int = 256) -> tuple[float, float]:
    """(sum of attributions, F(record) - F(baseline)) for the IG axiom check."""
    m = model.config.modality_count
    attrs = record_attributions(model, record, table, eval_window, config, steps)
    total = float(sum(a.sum() for a in attrs.values()))
    observed_row = np.zeros(m, dtype=bool)
    for j in record.sequences:
        observed_row[j] = True
    mask = _record_fusion_mask(model, observed_row, eval_window)
    inputs, order = _record_embedding_inputs(record, table, m)
    bin_edges = config.bin_edges()

    def run(points):
        pooled_rows = []
        by_modality = dict(zip(order, points))
        for j in range(m):
            if j in by_modality:
                pooled_rows.append(ad.tmean(by_modality[j], axis=0))
            else:
                pooled_rows.append(ad.tensor(np.zeros(table.dim)))
        pooled = ad.reshape(ad.concat(pooled_rows, axis=0), (1, m, table.dim))
        out = model.forward(pooled, mask[None, :])
        return float(_target_scalar(model, out.probs, config.tau2, bin_edges).data)

    f_input = run([ad.tensor(x) for x in inputs])
    f_base = run([ad.tensor(np.zeros_like(x)) for x in inputs])
    return total, f_input - f_base


def modality_importance_from_attributions(sample_attrs: list[dict[int, np.ndarray]],
                                          modality_count: int,
                                          record_ids: list[int] | None = None
                                          ) -> ModalityImportance:
    """Aggregate per-sample attribution dicts into modality percentages:
    (1) token score = sum of |attribution| over the embedding axis,
    (2) min-max normalize token scores within each sample,
    (3) sum normalized scores per modality,
    (4) express as a percentage of the sample total, then average.

    A sample whose token scores are all equal (min == max) normalizes to all
    zeros and carries no percentage profile, so it is left out of the average.
    """
    record_ids = record_ids if record_ids is not None else list(range(len(sample_attrs)))
    per_sample, kept = [], []
    for rid, attrs in zip(record_ids, sample_attrs):
        token_scores = {j: np.abs(a).sum(axis=1) for j, a in attrs.items()}
        pooled_scores = np.concatenate([token_scores[j] for j in sorted(token_scores)])
        lo, hi = pooled_scores.min(), pooled_scores.max()
        shares = np.zeros(modality_count)
        if hi > lo:
            for j, scores in token_scores.items():
                shares[j] = ((scores - lo) / (hi - lo)).sum()
            total = shares.sum()
            if total > 0:
                per_sample.append(100.0 * shares / total)
                kept.append(rid)
    if not per_sample:
        raise UsageError("no sample produced a nonzero attribution profile")
    stacked = np.vstack(per_sample)
    return ModalityImportance(percentages=stacked.mean(axis=0), per_sample=stacked,
                              record_ids=kept)


def modality_importance(model: Model, records: list[PatientRecord],
                        table: EmbeddingTable, eval_window: str,
                        config: TrainConfig, steps: int = 32) -> ModalityImportance:
    """Modality percentages over a set of fully observed records."""
    m = model.config.modality_count
    sample_attrs, ids = [], []
    for record in records:
        if len(record.sequences) != m:
            raise UsageError(f"record {record.patient_id} is not fully observed; "
                             "modality importance requires complete records")
        sample_attrs.append(record_attributions(model, record, table, eval_window,
                                                config, steps))
        ids.append(record.patient_id)
    return modality_importance_from_attributions(sample_attrs, m, ids)
