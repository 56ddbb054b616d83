"""Synthetic multi-window patient cohorts: generation, persistence, batching.

Each record carries up to four tokenized event sequences (prenatal, maternal
birth, infant birth, developmental), an observed-modality set, and either a
right-censored time-to-event label or a binary label. A per-patient latent
risk drives both token emission and the outcome, with later time windows
loading on the risk more strongly than earlier ones, so cross-window signal
transfer is learnable by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataFormatError

PAD_TOKEN = 0
MODALITY_NAMES = ("prenatal", "birth_mom", "birth_baby", "developmental")
WINDOW_NAMES = ("prenatal", "birth", "developmental")
DEFAULT_TIME_WINDOW_MAP = (0, 1, 1, 2)


@dataclass
class ModalSequence:
    modality_index: int
    token_ids: list[int]

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise DataFormatError("empty token sequence")

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class SurvivalLabel:
    y: float  # observed time in months
    s: int  # 1 = event at y, 0 = right-censored at y

    def __post_init__(self):
        if self.y <= 0:
            raise DataFormatError(f"observed time must be positive, got {self.y}")
        if self.s not in (0, 1):
            raise DataFormatError(f"event indicator must be 0 or 1, got {self.s}")


@dataclass
class PatientRecord:
    patient_id: int
    sequences: dict[int, ModalSequence]
    label: SurvivalLabel | int

    @property
    def observed(self) -> frozenset[int]:
        return frozenset(self.sequences)


@dataclass
class Cohort:
    records: list[PatientRecord]
    modality_count: int = 4
    vocab_size: int = 128
    time_window_map: tuple[int, ...] = DEFAULT_TIME_WINDOW_MAP
    task: str = "survival"
    seed: int | None = None
    config: dict = field(default_factory=dict)
    # generator-side arrays (latent risk, censoring draws); never persisted
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def outcome_arrays(self):
        """(y, s) arrays for survival cohorts, (labels,) for binary ones."""
        if self.task == "survival":
            y = np.array([r.label.y for r in self.records], dtype=np.float64)
            s = np.array([r.label.s for r in self.records], dtype=np.int64)
            return y, s
        return (np.array([r.label for r in self.records], dtype=np.int64),)

    def observed_matrix(self) -> np.ndarray:
        obs = np.zeros((len(self.records), self.modality_count), dtype=bool)
        for i, rec in enumerate(self.records):
            for j in rec.sequences:
                obs[i, j] = True
        return obs


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    task: str = "survival"
    n_patients: int = 1000
    vocab_size: int = 128
    signal_strengths: tuple[float, ...] = (0.3, 0.5, 0.5, 1.5)
    missing_birth_prob: float = 0.15
    censoring_rate: float = 0.3
    target_rate: float = 0.0205
    risk_slope: float = 2.0
    dev_private_weight: float = 0.6
    min_len: int = 5
    max_len: int = 40
    follow_up_months: int = 96
    base_logit_scale: float = 1.0

    def __post_init__(self):
        if self.task not in ("survival", "binary"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_patients <= 0:
            raise ConfigError("n_patients must be positive")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be at least 3 (padding + 2 tokens)")
        if len(self.signal_strengths) != 4:
            raise ConfigError("signal_strengths must list exactly 4 values")
        for name in ("missing_birth_prob", "censoring_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.dev_private_weight < 0.0:
            raise ConfigError("dev_private_weight must be nonnegative")
        if not 0.0 < self.target_rate < 1.0:
            raise ConfigError(f"target_rate must be in (0, 1), got {self.target_rate}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.follow_up_months < 1:
            raise ConfigError("follow_up_months must be positive")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "GeneratorConfig":
        kwargs = {}
        casts = {
            "task": str,
            "n_patients": int,
            "vocab_size": int,
            "missing_birth_prob": float,
            "censoring_rate": float,
            "target_rate": float,
            "risk_slope": float,
            "dev_private_weight": float,
            "min_len": int,
            "max_len": int,
            "follow_up_months": int,
            "base_logit_scale": float,
        }
        for key, raw in values.items():
            if key == "signal_strengths":
                kwargs[key] = tuple(float(x) for x in raw.split(","))
            elif key in casts:
                try:
                    kwargs[key] = casts[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            else:
                raise ConfigError(f"unknown generator config key {key!r}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_patients": self.n_patients,
            "vocab_size": self.vocab_size,
            "signal_strengths": list(self.signal_strengths),
            "missing_birth_prob": self.missing_birth_prob,
            "censoring_rate": self.censoring_rate,
            "target_rate": self.target_rate,
            "risk_slope": self.risk_slope,
            "dev_private_weight": self.dev_private_weight,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "follow_up_months": self.follow_up_months,
            "base_logit_scale": self.base_logit_scale,
        }


def _gauss_hermite_nodes(n: int = 64):
    # E[g(U)] for U ~ N(0,1) as sum(w * g(sqrt(2) x)) / sqrt(pi)
    x, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _expected_observed_event_rate(alpha: float, beta: float, censor_rate: float,
                                  follow_up: int) -> float:
    """P(s = 1) under a month-constant hazard sigmoid(alpha + beta*u) with
    uniform censoring over the follow-up window."""
    u, w = _gauss_hermite_nodes()
    h = _sigmoid(alpha + beta * u)  # (K,)
    t = np.arange(1, follow_up + 1, dtype=np.float64)  # (F,)
    pmf = h[:, None] * np.power.outer(1.0 - h, t - 1.0)  # (K, F)
    p_event_by_end = pmf.sum(axis=1)
    # observed under uniform censoring: event at month t seen iff C >= t
    p_event_seen_censored = (pmf * ((follow_up - t) / follow_up)[None, :]).sum(axis=1)
    per_u = (1.0 - censor_rate) * p_event_by_end + censor_rate * p_event_seen_censored
    return float((w * per_u).sum())


def _expected_binary_rate(alpha: float, beta: float) -> float:
    u, w = _gauss_hermite_nodes()
    return float((w * _sigmoid(alpha + beta * u)).sum())


def _calibrate_intercept(rate_fn, target: float) -> float:
    lo, hi = -30.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate_fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _emit_tokens(rng: np.random.Generator, u: np.ndarray, present: np.ndarray,
                 strength: float, base_logits: np.ndarray, loadings: np.ndarray,
                 lengths: np.ndarray) -> list[list[int] | None]:
    """Sample token sequences for one modality; tokens are 1-based (0 = pad)."""
    n = u.shape[0]
    rows = np.flatnonzero(present)
    if rows.size == 0:
        return [None] * n
    logits = base_logits[None, :] + strength * u[rows, None] * loadings[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    lens = lengths[rows]
    row_of_draw = np.repeat(np.arange(rows.size), lens)
    uniforms = rng.random(row_of_draw.size)
    drawn = kernels.sample_categorical_rows(cdf, row_of_draw, uniforms) + 1
    out: list[list[int] | None] = [None] * n
    offsets = np.concatenate(([0], np.cumsum(lens)))
    for k, i in enumerate(rows):
        out[i] = drawn[offsets[k]:offsets[k + 1]].tolist()
    return out


def generate(config: GeneratorConfig, seed: int) -> Cohort:
    """Generate a cohort whose observed outcome rate matches the configured
    target and whose later-window tokens carry more outcome signal.

    A per-patient shared factor drives token emission in every window; the
    developmental window additionally sees a private factor. The outcome
    hazard follows the normalized mix of both, so the last window is the
    single best predictor while the earlier windows still share signal with
    the outcome through the common factor.
    """
    rng = np.random.default_rng(seed)
    n = config.n_patients
    m = len(config.signal_strengths)
    v_real = config.vocab_size - 1  # token id 0 is reserved for padding

    shared = rng.standard_normal(n)
    private = rng.standard_normal(n)
    w = config.dev_private_weight
    risk = (shared + w * private) / np.sqrt(1.0 + w * w)  # standard normal

    base_logits = [rng.normal(0.0, config.base_logit_scale, v_real) for _ in range(m)]
    loadings = [rng.normal(0.0, 1.0, v_real) for _ in range(m)]

    # birth modalities (indices 1, 2) go missing as a pair
    birth_missing = rng.random(n) < config.missing_birth_prob
    present = np.ones((n, m), dtype=bool)
    present[:, 1] = ~birth_missing
    present[:, 2] = ~birth_missing

    lengths = rng.integers(config.min_len, config.max_len + 1, size=(n, m))

    sequences_by_modality = []
    for j in range(m):
        driver = risk if j == m - 1 else shared
        sequences_by_modality.append(
            _emit_tokens(rng, driver, present[:, j], config.signal_strengths[j],
                         base_logits[j], loadings[j], lengths[:, j]))

    beta = config.risk_slope
    if config.task == "survival":
        follow_up = config.follow_up_months
        alpha = _calibrate_intercept(
            lambda a: _expected_observed_event_rate(a, beta, config.censoring_rate, follow_up),
            config.target_rate)
        hazard = _sigmoid(alpha + beta * risk)
        # geometric month-of-event via inverse transform
        ue = rng.random(n)
        with np.errstate(divide="ignore"):
            t_event = 1.0 + np.floor(np.log1p(-ue) / np.log1p(-hazard))
        censored_early = rng.random(n) < config.censoring_rate
        c_time = np.where(censored_early, (1.0 - rng.random(n)) * follow_up,
                          float(follow_up))
        event_seen = t_event <= c_time
        y = np.where(event_seen, t_event, c_time)
        s = event_seen.astype(np.int64)
        labels = [SurvivalLabel(float(y[i]), int(s[i])) for i in range(n)]
    else:
        alpha = _calibrate_intercept(lambda a: _expected_binary_rate(a, beta),
                                     config.target_rate)
        p = _sigmoid(alpha + beta * risk)
        labels = [int(x) for x in (rng.random(n) < p)]

    records = []
    for i in range(n):
        seqs = {}
        for j in range(m):
            if present[i, j]:
                seqs[j] = ModalSequence(j, sequences_by_modality[j][i])
        records.append(PatientRecord(patient_id=i, sequences=seqs, label=labels[i]))

    cohort = Cohort(records=records, modality_count=m, vocab_size=config.vocab_size,
                    time_window_map=DEFAULT_TIME_WINDOW_MAP, task=config.task,
                    seed=seed, config=config.to_dict())
    cohort.config["latent_risk_intercept"] = alpha
    cohort.diagnostics["latent_risk"] = risk
    cohort.diagnostics["shared_factor"] = shared
    if config.task == "survival":
        cohort.diagnostics["censored_early"] = censored_early
    return cohort


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------


def split(cohort: Cohort, train_fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(cohort)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 1), n - 1)

    def subset(idx):
        return Cohort(records=[cohort.records[i] for i in idx],
                      modality_count=cohort.modality_count,
                      vocab_size=cohort.vocab_size,
                      time_window_map=cohort.time_window_map,
                      task=cohort.task, seed=cohort.seed, config=dict(cohort.config))

    return subset(perm[:n_train]), subset(perm[n_train:])


@dataclass
class Batch:
    indices: np.ndarray  # (B,) positions within the source cohort
    token_ids: list[np.ndarray]  # per modality, (B, L_j) int64, padded with 0
    token_mask: list[np.ndarray]  # per modality, (B, L_j) bool
    observed: np.ndarray  # (B, m) bool
    labels: tuple  # (y, s) arrays or (binary,) array

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])


def _build_batch(cohort: Cohort, idx: np.ndarray) -> Batch:
    m = cohort.modality_count
    b = idx.shape[0]
    token_ids, token_mask = [], []
    for j in range(m):
        seqs = [cohort.records[i].sequences.get(j) for i in idx]
        max_len = max((s.length for s in seqs if s is not None), default=1)
        ids = np.zeros((b, max_len), dtype=np.int64)
        msk = np.zeros((b, max_len), dtype=bool)
        for r, s in enumerate(seqs):
            if s is None:
                continue
            ids[r, :s.length] = s.token_ids
            msk[r, :s.length] = True
        token_ids.append(ids)
        token_mask.append(msk)
    observed = np.zeros((b, m), dtype=bool)
    for r, i in enumerate(idx):
        for j in cohort.records[i].sequences:
            observed[r, j] = True
    if cohort.task == "survival":
        y = np.array([cohort.records[i].label.y for i in idx], dtype=np.float64)
        s = np.array([cohort.records[i].label.s for i in idx], dtype=np.int64)
        labels = (y, s)
    else:
        labels = (np.array([cohort.records[i].label for i in idx], dtype=np.int64),)
    return Batch(indices=idx, token_ids=token_ids, token_mask=token_mask,
                 observed=observed, labels=labels)


def batches(cohort: Cohort, batch_size: int, seed: int, epochs: int = 1):
    """Yield shuffled padded batches; order differs across epochs but is
    reproducible from the seed. Trailing batches of size 1 are dropped
    (in-batch contrastive terms need at least one negative)."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be at least 2, got {batch_size}")
    rng = np.random.default_rng(seed)
    n = len(cohort)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if idx.shape[0] < 2:
                continue
            yield _build_batch(cohort, idx)


# ---------------------------------------------------------------------------
# Persistence (JSON lines with a metadata header)
# ---------------------------------------------------------------------------


def save(cohort: Cohort, path):
    path = Path(path)
    header = {
        "format": "bff.cohort",
        "version": 1,
        "task": cohort.task,
        "modality_count": cohort.modality_count,
        "vocab_size": cohort.vocab_size,
        "time_window_map": list(cohort.time_window_map),
        "seed": cohort.seed,
        "n_records": len(cohort),
        "config": cohort.config,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in cohort.records:
            row: dict = {"id": rec.patient_id,
                         "seqs": {str(j): s.token_ids for j, s in sorted(rec.sequences.items())}}
            if cohort.task == "survival":
                row["y"] = rec.label.y
                row["s"] = rec.label.s
            else:
                row["label"] = int(rec.label)
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load(path) -> Cohort:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")

    def parse(lineno: int, text: str) -> dict:
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None

    header = parse(1, lines[0])
    if header.get("format") != "bff.cohort":
        raise DataFormatError(f"{path}: line 1: not a cohort file")
    m = int(header["modality_count"])
    vocab = int(header["vocab_size"])
    task = header["task"]
    n_expected = int(header["n_records"])
    records = []
    for lineno, text in enumerate(lines[1:], start=2):
        row = parse(lineno, text)
        seqs = {}
        for key, ids in row.get("seqs", {}).items():
            j = int(key)
            if not 0 <= j < m:
                raise DataFormatError(
                    f"{path}: line {lineno}: modality index {j} outside header "
                    f"modality_count {m}")
            if any(not 1 <= t < vocab for t in ids):
                raise DataFormatError(
                    f"{path}: line {lineno}: token id outside vocabulary range")
            seqs[j] = ModalSequence(j, list(ids))
        if not seqs:
            raise DataFormatError(f"{path}: line {lineno}: record with no observed modality")
        if task == "survival":
            label = SurvivalLabel(float(row["y"]), int(row["s"]))
        else:
            label = int(row["label"])
        records.append(PatientRecord(patient_id=int(row["id"]), sequences=seqs, label=label))
    if len(records) != n_expected:
        raise DataFormatError(
            f"{path}: line {len(lines)}: expected {n_expected} records, found "
            f"{len(records)} (file truncated?)")
    return Cohort(records=records, modality_count=m, vocab_size=vocab,
                  time_window_map=tuple(header["time_window_map"]), task=task,
                  seed=header.get("seed"), config=header.get("config", {}))
