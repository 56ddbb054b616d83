"""Evaluation metrics: Kaplan-Meier curves, censoring-weighted time-dependent
AUC with its integrated summary, and plain ROC AUC for the binary task.

The time-dependent AUC discriminates subjects with an event by time t
(weighted by inverse probability of remaining uncensored) from subjects still
event-free at t. Its integrated form averages over an interval with weights
taken from the event-time survival curve's decrements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MetricUndefinedError

TIE_POLICIES = ("as_written", "half_ties")


@dataclass
class StepFunction:
    """Right-continuous step function equal to 1 before the first jump."""

    times: np.ndarray  # ascending jump times
    values: np.ndarray  # value on [times[k], times[k+1])

    def __call__(self, t) -> np.ndarray | float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.concatenate(([1.0], self.values))
        return vals[np.asarray(idx) + 1] if np.ndim(t) else float(vals[idx + 1])

    def left_limit(self, t) -> np.ndarray | float:
        idx = np.searchsorted(self.times, t, side="left") - 1
        vals = np.concatenate(([1.0], self.values))
        return vals[np.asarray(idx) + 1] if np.ndim(t) else float(vals[idx + 1])


def km(y, s, target: str = "event") -> StepFunction:
    """Product-limit survival estimate. target='censoring' swaps the roles of
    events and censorings to estimate the censoring distribution."""
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    if y.size == 0:
        raise MetricUndefinedError("Kaplan-Meier estimate of an empty sample")
    if target == "event":
        d = s
    elif target == "censoring":
        d = 1 - s
    else:
        raise ConfigError(f"unknown KM target {target!r}")
    order = np.argsort(y, kind="stable")
    y_sorted, d_sorted = y[order], d[order]
    times, starts = np.unique(y_sorted, return_index=True)
    counts = np.diff(np.append(starts, y_sorted.size))
    events_at = np.add.reduceat(d_sorted, starts)
    at_risk = y_sorted.size - np.concatenate(([0], np.cumsum(counts)[:-1]))
    keep = events_at > 0
    factors = 1.0 - events_at[keep] / at_risk[keep]
    return StepFunction(times=times[keep], values=np.cumprod(factors))


def ipcw_weights(y, s, censoring_sf: StepFunction) -> np.ndarray:
    """w_i = s_i / Sc(y_i-); censored subjects get weight zero."""
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    denom = np.asarray(censoring_sf.left_limit(y), dtype=np.float64)
    bad = (s == 1) & (denom <= 0.0)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise MetricUndefinedError(
            f"subject {i}: censoring survival is 0 just before its event time "
            f"{y[i]}; inverse weight undefined")
    out = np.zeros_like(y)
    out[s == 1] = 1.0 / denom[s == 1]
    return out


def auc_cd(t: float, scores, y, s, censoring_sf: StepFunction,
           tie_policy: str = "as_written") -> float:
    """Censoring-weighted cumulative/dynamic AUC at time t.

    Cases are subjects with y <= t weighted by 1/Sc(y-); controls are
    subjects with y > t. tie_policy='as_written' counts tied scores as
    concordant (the <= comparison taken literally); 'half_ties' gives them
    half credit.
    """
    if tie_policy not in TIE_POLICIES:
        raise ConfigError(f"unknown tie policy {tie_policy!r}")
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise MetricUndefinedError("risk scores must be finite")
    weights = ipcw_weights(y, s, censoring_sf)
    is_case = y <= t
    is_control = y > t
    w_case = weights[is_case]
    case_scores = scores[is_case][w_case > 0]
    w_case = w_case[w_case > 0]
    control_scores = scores[is_control]
    if case_scores.size == 0:
        raise MetricUndefinedError(f"no weighted cases at t={t}")
    if control_scores.size == 0:
        raise MetricUndefinedError(f"no controls at t={t}")
    cs = np.sort(control_scores)
    le = np.searchsorted(cs, case_scores, side="right")  # controls <= case score
    if tie_policy == "as_written":
        per_case = le.astype(np.float64)
    else:
        lt = np.searchsorted(cs, case_scores, side="left")
        per_case = lt + 0.5 * (le - lt)
    numer = float((w_case * per_case).sum())
    denom = float(w_case.sum()) * control_scores.size
    return numer / denom


def integrated_auc(tau1: float, tau2: float, times, aucs,
                   event_sf: StepFunction) -> float:
    """Weighted mean of AUC(t) over event times in (tau1, tau2], weighted by
    the event-time survival decrements and normalized by S(tau1) - S(tau2)."""
    if not tau1 < tau2:
        raise ConfigError(f"need tau1 < tau2, got ({tau1}, {tau2})")
    times = np.asarray(times, dtype=np.float64)
    aucs = np.asarray(aucs, dtype=np.float64)
    inside = (times > tau1) & (times <= tau2)
    if not inside.any():
        raise MetricUndefinedError(f"no event times inside ({tau1}, {tau2}]")
    denom = event_sf(tau1) - event_sf(tau2)
    if denom <= 0.0:
        raise MetricUndefinedError(
            f"event survival does not decrease over ({tau1}, {tau2}]")
    t_in = times[inside]
    drops = np.asarray(event_sf.left_limit(t_in)) - np.asarray(event_sf(t_in))
    return float((aucs[inside] * drops).sum() / denom)


def roc_auc(scores, labels) -> float:
    """Rank statistic with half credit for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average ranks across tied blocks
    uniq, starts = np.unique(sorted_scores, return_index=True)
    stops = np.append(starts[1:], scores.size)
    for a, b in zip(starts, stops):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def survival_risk_scores(probs: np.ndarray, bin_edges: np.ndarray, t: float) -> np.ndarray:
    """Risk at time t from event-bin probabilities: cumulative event
    probability through the bin containing t."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    n_bins = edges.size - 1
    idx = int(np.searchsorted(edges, t, side="left")) - 1
    idx = min(max(idx, 0), n_bins - 1)
    return probs[:, :idx + 1].sum(axis=1)


def integrated_auc_from_scores(score_fn, y, s, censoring_sf: StepFunction,
                               tau1: float, tau2: float,
                               tie_policy: str = "as_written") -> float:
    """Full pipeline: event-time KM on the evaluated sample, AUC at each of
    its jump times inside the window, then the weighted mean.

    Event times at or after the largest observed time have no dynamic
    controls, so the window effectively ends at the last evaluable event
    time; this leaves the value unchanged whenever the window is interior.
    """
    y = np.asarray(y, dtype=np.float64)
    event_sf = km(y, s, target="event")
    inside = (event_sf.times > tau1) & (event_sf.times <= tau2) & (event_sf.times < y.max())
    t_in = event_sf.times[inside]
    if t_in.size == 0:
        raise MetricUndefinedError(f"no evaluable event times inside ({tau1}, {tau2}]")
    aucs = np.array([auc_cd(t, score_fn(t), y, s, censoring_sf, tie_policy)
                     for t in t_in])
    return integrated_auc(tau1, float(t_in.max()), t_in, aucs, event_sf)
