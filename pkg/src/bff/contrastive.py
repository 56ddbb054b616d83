"""Dual soft-nearest-neighbor regularization over batch representation slots.

Each observed (record, modality) pair contributes one slot. The within-modal
term pulls together slots from the same modality; the across-modal term pulls
together slots from the same patient, which is what lets weakly informative
early windows learn from strongly informative later ones. Both terms use
temperature-scaled cosine similarity; temperatures are trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError

TAU_MIN = 0.01
TAU_MAX = 5.0


@dataclass
class ContrastiveParams:
    log_tau_w: Tensor
    log_tau_a: Tensor

    @classmethod
    def create(cls, tau_init: float = 0.5) -> "ContrastiveParams":
        return cls(log_tau_w=ad.parameter(np.log(tau_init), "log_tau_w"),
                   log_tau_a=ad.parameter(np.log(tau_init), "log_tau_a"))

    def tensors(self) -> list[Tensor]:
        return [self.log_tau_w, self.log_tau_a]

    def clamp(self):
        """Project temperatures back into [TAU_MIN, TAU_MAX] after a step."""
        for t in self.tensors():
            t.data = np.clip(t.data, np.log(TAU_MIN), np.log(TAU_MAX))

    @property
    def tau_w(self) -> float:
        return float(np.exp(self.log_tau_w.data))

    @property
    def tau_a(self) -> float:
        return float(np.exp(self.log_tau_a.data))


@dataclass
class PairIndex:
    """Masks over the slot-by-slot similarity matrix for one batch."""

    patient_ids: np.ndarray  # (P,)
    modality_ids: np.ndarray  # (P,)
    positive_mask: np.ndarray  # (P, P) bool
    candidate_mask: np.ndarray  # (P, P) bool
    contributors: np.ndarray  # anchor rows with at least one positive


def build_pair_index(patient_ids, modality_ids, mode: str,
                     include_self: bool = False) -> PairIndex:
    """Positive pairs: same modality (mode='within') or same patient
    (mode='across'). The anchor itself is excluded from both the positives
    and the candidates unless include_self is set (which reproduces the
    literal formula where the anchor pairs with itself)."""
    p = np.asarray(patient_ids, dtype=np.int64)
    q = np.asarray(modality_ids, dtype=np.int64)
    if p.shape != q.shape or p.ndim != 1:
        raise UsageError("patient_ids and modality_ids must be matching 1-D arrays")
    n = p.shape[0]
    eye = np.eye(n, dtype=bool)
    if mode == "within":
        positive = (q[:, None] == q[None, :]) & ~eye
    elif mode == "across":
        positive = (p[:, None] == p[None, :]) & ~eye
    else:
        raise UsageError(f"unknown pairing mode {mode!r}")
    candidate = ~eye
    if include_self:
        positive = positive | eye
        candidate = candidate | eye
    contributors = np.flatnonzero(positive.any(axis=1))
    return PairIndex(patient_ids=p, modality_ids=q, positive_mask=positive,
                     candidate_mask=candidate, contributors=contributors)


def cosine_sim(a, b) -> Tensor:
    return ad.cosine_similarity(a, b)


def _snn_from_masks(slots: Tensor, index: PairIndex, log_tau: Tensor) -> Tensor:
    if index.contributors.size == 0:
        raise UsageError("SNN loss has no contributing anchors in this batch")
    normed = ad.l2_normalize(slots, axis=1)
    sims = ad.matmul(normed, ad.swapaxes(normed, 0, 1))  # (P, P) cosine matrix
    tau = ad.exp(log_tau)
    scaled = ad.exp(ad.div(sims, tau))
    pos = ad.tsum(ad.mul(scaled, index.positive_mask.astype(np.float64)), axis=1)
    cand = ad.tsum(ad.mul(scaled, index.candidate_mask.astype(np.float64)), axis=1)
    # anchors without positives are skipped, so gather before taking logs
    pos_c = ad.gather_rows(pos, index.contributors)
    cand_c = ad.gather_rows(cand, index.contributors)
    return ad.tmean(ad.sub(ad.log(cand_c), ad.log(pos_c)))


def snn_within(z_t_slots: Tensor, patient_ids, modality_ids, log_tau_w: Tensor,
               include_self: bool = False) -> Tensor:
    """Mean over anchors of -log(same-modality mass / total candidate mass)."""
    index = build_pair_index(patient_ids, modality_ids, "within", include_self)
    return _snn_from_masks(z_t_slots, index, log_tau_w)


def snn_across(z_p_slots: Tensor, patient_ids, modality_ids, log_tau_a: Tensor,
               include_self: bool = False) -> Tensor:
    """Mean over anchors of -log(same-patient mass / total candidate mass)."""
    index = build_pair_index(patient_ids, modality_ids, "across", include_self)
    return _snn_from_masks(z_p_slots, index, log_tau_a)
