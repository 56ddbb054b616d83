"""Per-window encoders, masked fusion mechanisms, and prediction heads.

Every record enters as pooled per-window embedding vectors. Each window has
its own encoder MLP whose output splits into a patient-specific half (z_p)
and a window-specific half (z_t). A fusion module aggregates the per-window
features under a boolean mask that combines which windows were observed with
which are allowed at the evaluation time; masked windows are zeroed before
any fusion computation, so their placeholder content can never leak into the
output. Heads map the fused vector to either discrete-time event-bin
probabilities (with a terminal never-event class) or a binary probability.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import DEFAULT_TIME_WINDOW_MAP, WINDOW_NAMES
from .errors import ConfigError, DataFormatError, UsageError

CHECKPOINT_VERSION = 1

FUSIONS = ("masked_mean", "self_attention", "softmax_self_gating")
HEAD_INPUTS = ("zp", "zp_zt", "joint")


@dataclass
class ModelConfig:
    task: str = "survival"  # survival | binary
    modality_count: int = 4
    emb_dim: int = 64
    latent_dim: int = 64  # size of z_p and of z_t
    encoder_hidden: int = 128
    fusion: str = "softmax_self_gating"
    head_input: str = "joint"
    head_hidden: int = 64
    n_bins: int = 8  # event-time bins; head emits n_bins + 1 classes
    gate_reduction: int = 4
    time_window_map: tuple[int, ...] = DEFAULT_TIME_WINDOW_MAP

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.head_input not in HEAD_INPUTS:
            raise ConfigError(f"unknown head_input {self.head_input!r}")
        if self.task not in ("survival", "binary"):
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.time_window_map) != self.modality_count:
            raise ConfigError("time_window_map must have one entry per modality")

    @property
    def streams(self) -> tuple[str, ...]:
        return {"zp": ("p",), "zp_zt": ("p", "t"), "joint": ("joint",)}[self.head_input]

    def stream_dim(self, stream: str) -> int:
        return 2 * self.latent_dim if stream == "joint" else self.latent_dim

    @property
    def head_in_dim(self) -> int:
        return sum(self.stream_dim(s) for s in self.streams)

    @property
    def head_out_dim(self) -> int:
        return self.n_bins + 1 if self.task == "survival" else 1


def causal_mask(eval_window: str, time_window_map=DEFAULT_TIME_WINDOW_MAP) -> np.ndarray:
    """Modalities whose time window is at or before the evaluation window."""
    if eval_window not in WINDOW_NAMES:
        raise ConfigError(f"unknown evaluation window {eval_window!r}; "
                          f"expected one of {WINDOW_NAMES}")
    w = WINDOW_NAMES.index(eval_window)
    return np.array([tw <= w for tw in time_window_map], dtype=bool)


def _mask3(mask: np.ndarray, feature_dim: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(mask, dtype=bool)[:, :, None],
                           mask.shape + (feature_dim,))


def _require_any_unmasked(mask: np.ndarray):
    if np.any(~np.asarray(mask, dtype=bool).any(axis=1)):
        raise UsageError("fusion received a record with every modality masked")


# ---------------------------------------------------------------------------
# Fusion mechanisms (free functions so tests can drive them directly)
# ---------------------------------------------------------------------------


def fuse_masked_mean(Z: Tensor, mask: np.ndarray) -> Tensor:
    """Arithmetic mean over unmasked modality rows."""
    _require_any_unmasked(mask)
    mask = np.asarray(mask, dtype=bool)
    zm = ad.mul(Z, mask[:, :, None].astype(np.float64))
    counts = mask.sum(axis=1).astype(np.float64)
    return ad.div(ad.tsum(zm, axis=1), counts[:, None])


def fuse_softmax_self_gating(Z: Tensor, gate: dict[str, Tensor],
                             mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Feature-wise softmax weights over modalities from a self-gating MLP.

    Returns the fused vector and the (B, m, f) weight matrix; masked rows of
    the weights are exact zeros and each feature column sums to 1 over the
    unmasked rows.
    """
    _require_any_unmasked(mask)
    mask = np.asarray(mask, dtype=bool)
    b, m, f = Z.shape
    zm = ad.mul(Z, mask[:, :, None].astype(np.float64))
    flat = ad.reshape(zm, (b, m * f))
    hidden = ad.relu(ad.add(ad.matmul(flat, gate["w1"]), gate["b1"]))
    logits = ad.reshape(ad.add(ad.matmul(hidden, gate["w2"]), gate["b2"]), (b, m, f))
    weights = ad.masked_softmax(logits, _mask3(mask, f), axis=1)
    fused = ad.tsum(ad.mul(zm, weights), axis=1)
    return fused, weights


def fuse_self_attention(Z: Tensor, attn: dict[str, Tensor],
                        mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Masked scaled dot-product attention over modalities, then a masked
    mean over the (unmasked) query rows."""
    _require_any_unmasked(mask)
    mask = np.asarray(mask, dtype=bool)
    b, m, f = Z.shape
    d_k = attn["wq"].shape[1]
    zm = ad.mul(Z, mask[:, :, None].astype(np.float64))
    q = ad.matmul(zm, attn["wq"])
    k = ad.matmul(zm, attn["wk"])
    v = ad.matmul(zm, attn["wv"])
    scores = ad.div(ad.matmul(q, ad.swapaxes(k, 1, 2)), np.sqrt(float(d_k)))
    key_mask = np.broadcast_to(mask[:, None, :], (b, m, m))
    weights = ad.masked_softmax(scores, key_mask, axis=2)
    weights = ad.mul(weights, mask[:, :, None].astype(np.float64))  # zero masked query rows
    ctx = ad.matmul(weights, v)
    counts = mask.sum(axis=1).astype(np.float64)
    fused = ad.div(ad.tsum(ctx, axis=1), counts[:, None])
    return fused, weights


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    probs: Tensor  # (B, n_bins+1) softmax rows, or (B,) binary probabilities
    z_p: Tensor  # (B, m, d)
    z_t: Tensor  # (B, m, d)
    fused: dict[str, Tensor]
    fusion_weights: dict[str, Tensor] = field(default_factory=dict)
    attention: dict[str, Tensor] = field(default_factory=dict)


class Model:
    """Holds parameters and wires pooled inputs through encode/fuse/head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        for j in range(c.modality_count):
            self._dense(rng, f"enc{j}_1", c.emb_dim, c.encoder_hidden)
            self._dense(rng, f"enc{j}_2", c.encoder_hidden, 2 * c.latent_dim)
        for stream in c.streams:
            f = c.stream_dim(stream)
            if c.fusion == "softmax_self_gating":
                width = c.modality_count * f
                bottleneck = max(width // c.gate_reduction, 1)
                self._dense(rng, f"gate_{stream}_1", width, bottleneck)
                self._dense(rng, f"gate_{stream}_2", bottleneck, width, zero=True)
            elif c.fusion == "self_attention":
                for name in ("wq", "wk", "wv"):
                    self.params[f"attn_{stream}_{name}"] = ad.parameter(
                        rng.normal(0.0, 1.0 / np.sqrt(f), size=(f, f)),
                        f"attn_{stream}_{name}")
        self._dense(rng, "head_1", c.head_in_dim, c.head_hidden)
        self._dense(rng, "head_2", c.head_hidden, c.head_out_dim, zero=True)

    def _dense(self, rng, name: str, fan_in: int, fan_out: int, zero: bool = False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        self.params[f"{name}_w"] = ad.parameter(w, f"{name}_w")
        self.params[f"{name}_b"] = ad.parameter(np.zeros(fan_out), f"{name}_b")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- stages ----------------------------------------------------------

    def encode(self, pooled) -> tuple[Tensor, Tensor]:
        """Per-modality MLPs mapping pooled vectors to (z_p, z_t) halves."""
        pooled = pooled if isinstance(pooled, Tensor) else ad.tensor(pooled)
        d = self.config.latent_dim
        zp_parts, zt_parts = [], []
        for j in range(self.config.modality_count):
            x = pooled[:, j, :]
            h = ad.relu(ad.add(ad.matmul(x, self.params[f"enc{j}_1_w"]),
                               self.params[f"enc{j}_1_b"]))
            out = ad.add(ad.matmul(h, self.params[f"enc{j}_2_w"]),
                         self.params[f"enc{j}_2_b"])
            zp_parts.append(out[:, :d])
            zt_parts.append(out[:, d:])
        return ad.stack(zp_parts, axis=1), ad.stack(zt_parts, axis=1)

    def _gate(self, stream: str) -> dict[str, Tensor]:
        return {"w1": self.params[f"gate_{stream}_1_w"],
                "b1": self.params[f"gate_{stream}_1_b"],
                "w2": self.params[f"gate_{stream}_2_w"],
                "b2": self.params[f"gate_{stream}_2_b"]}

    def _attn(self, stream: str) -> dict[str, Tensor]:
        return {name: self.params[f"attn_{stream}_{name}"] for name in ("wq", "wk", "wv")}

    def fuse(self, stream: str, Z: Tensor, mask: np.ndarray):
        """Returns (fused, weights-or-None) for one feature stream."""
        fusion = self.config.fusion
        if fusion == "masked_mean":
            return fuse_masked_mean(Z, mask), None
        if fusion == "softmax_self_gating":
            return fuse_softmax_self_gating(Z, self._gate(stream), mask)
        return fuse_self_attention(Z, self._attn(stream), mask)

    def head(self, fused: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(fused, self.params["head_1_w"]),
                           self.params["head_1_b"]))
        logits = ad.add(ad.matmul(h, self.params["head_2_w"]), self.params["head_2_b"])
        if self.config.task == "survival":
            return ad.softmax(logits, axis=1)
        return ad.reshape(ad.sigmoid(logits), (logits.shape[0],))

    def forward(self, pooled, fusion_mask: np.ndarray) -> ForwardResult:
        """Full pass: encode, fuse each configured stream, concatenate, head."""
        mask = np.asarray(fusion_mask, dtype=bool)
        z_p, z_t = self.encode(pooled)
        stream_features = {
            "p": lambda: z_p,
            "t": lambda: z_t,
            "joint": lambda: ad.concat([z_p, z_t], axis=2),
        }
        fused, weights, attention = {}, {}, {}
        for stream in self.config.streams:
            s, w = self.fuse(stream, stream_features[stream](), mask)
            fused[stream] = s
            if w is not None:
                if self.config.fusion == "softmax_self_gating":
                    weights[stream] = w
                else:
                    attention[stream] = w
        parts = [fused[s] for s in self.config.streams]
        head_in = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        probs = self.head(head_in)
        return ForwardResult(probs=probs, z_p=z_p, z_t=z_t, fused=fused,
                             fusion_weights=weights, attention=attention)


# ---------------------------------------------------------------------------
# Checkpoints: npz with a JSON meta entry, versioned
# ---------------------------------------------------------------------------


def save_param_archive(path, params: dict[str, "Tensor"], extra: dict,
                       config: dict | None = None):
    """npz archive: one entry per named parameter plus a JSON meta entry."""
    meta = {"version": CHECKPOINT_VERSION, "config": config or {}, "extra": extra}
    arrays = {f"param__{k}": t.data for k, t in params.items()}
    arrays["meta_json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                        dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_param_archive(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise DataFormatError(f"{path}: not a checkpoint file ({exc})") from None
    if "meta_json" not in arrays:
        raise DataFormatError(f"{path}: checkpoint missing metadata entry")
    meta = json.loads(io.BytesIO(arrays["meta_json"].tobytes()).read().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: incompatible checkpoint version "
                              f"{meta.get('version')!r} (expected {CHECKPOINT_VERSION})")
    return arrays, meta


def save_checkpoint(path, model: Model, extra: dict | None = None):
    save_param_archive(path, model.params, extra or {}, config=asdict(model.config))


def load_checkpoint(path) -> tuple[Model, dict]:
    arrays, meta = load_param_archive(path)
    cfg = dict(meta["config"])
    cfg["time_window_map"] = tuple(cfg["time_window_map"])
    model = Model(ModelConfig(**cfg), seed=0)
    for key, tensor in model.params.items():
        stored = arrays.get(f"param__{key}")
        if stored is None:
            raise DataFormatError(f"{path}: checkpoint missing parameter {key}")
        if stored.shape != tensor.data.shape:
            raise DataFormatError(f"{path}: parameter {key} has shape {stored.shape}, "
                                  f"expected {tensor.data.shape}")
        tensor.data = stored.astype(np.float64)
    return model, meta
