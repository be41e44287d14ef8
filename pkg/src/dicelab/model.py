"""HuBERT-style encoder: strided conv frontend, span masking, pre-norm transformer, K-way head.

The conv frontend uses kernel == stride at every layer, so each layer is a
reshape followed by a matmul. Total stride is 320 samples (20 ms at 16 kHz).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import HOP
from .errors import ConfigError, DimensionError, LengthError
from .fileio import write_features

PAD_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    D: int = 64
    H: int = 4
    F: int = 256
    conv_channels: tuple[int, ...] = (32, 32, 32, 32, 32)
    conv_strides: tuple[int, ...] = (5, 4, 4, 2, 2)
    K: int = 16
    mask_span: int = 10
    mask_start_prob: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_strides", tuple(int(s) for s in self.conv_strides))
        if self.L < 0 or self.D < 1 or self.H < 1 or self.F < 1 or self.K < 2:
            raise ConfigError(f"invalid model sizes in {self}")
        if self.D % self.H:
            raise ConfigError(f"D={self.D} is not divisible by H={self.H}")
        if len(self.conv_channels) != len(self.conv_strides) or not self.conv_strides:
            raise ConfigError("conv_channels and conv_strides must have equal, nonzero length")
        if math.prod(self.conv_strides) != HOP:
            raise ConfigError(f"conv strides must multiply to {HOP}, got {math.prod(self.conv_strides)}")
        if self.mask_span < 1 or not 0.0 <= self.mask_start_prob <= 1.0:
            raise ConfigError("mask_span must be >= 1 and mask_start_prob in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


BASE = ModelConfig()


def student_config(base: ModelConfig, *, L: int | None = None, D: int | None = None, K: int | None = None) -> ModelConfig:
    """Derive a student that changes exactly one of depth or width.

    Width changes scale the feed-forward size by the same ratio and keep the
    head count when it still divides the new width.
    """
    L = base.L if L is None else L
    D = base.D if D is None else D
    if L != base.L and D != base.D:
        raise ConfigError("a student variant may change depth or width, not both")
    F = base.F if D == base.D else max(1, base.F * D // base.D)
    H = base.H if D % base.H == 0 else math.gcd(D, base.H)
    return replace(base, L=L, D=D, F=F, H=H, K=base.K if K is None else K)


def narrow(base: ModelConfig, divisor: int, K: int | None = None) -> ModelConfig:
    if base.D % divisor:
        raise ConfigError(f"D={base.D} is not divisible by {divisor}")
    return student_config(base, D=base.D // divisor, K=K)


def shallow(base: ModelConfig, layers: int, K: int | None = None) -> ModelConfig:
    if not 0 <= layers < base.L:
        raise ConfigError(f"a shallow student needs fewer than {base.L} layers, got {layers}")
    return student_config(base, L=layers, K=K)


# masking -----------------------------------------------------------------------


@dataclass
class MaskSpec:
    masked: np.ndarray  # (T,) bool
    spans: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def none(cls, T: int) -> "MaskSpec":
        return cls(np.zeros(T, dtype=bool), [])

    @property
    def count(self) -> int:
        return int(self.masked.sum())


def sample_mask(T: int, cfg: ModelConfig, rng_seed) -> MaskSpec:
    """Span masking: each frame starts a span with ``mask_start_prob``; spans clip at ``T``.

    An empty draw is rescued with one span at a uniformly drawn start.
    """
    if T < 1:
        raise LengthError("cannot mask an empty sequence")
    rng = np.random.default_rng(rng_seed)
    starts = np.flatnonzero(rng.random(T) < cfg.mask_start_prob)
    if starts.size == 0:
        starts = np.array([rng.integers(T)])
    masked = np.zeros(T, dtype=bool)
    spans = []
    for s in starts.tolist():
        n = min(cfg.mask_span, T - s)
        masked[s : s + n] = True
        spans.append((s, n))
    return MaskSpec(masked, spans)


# parameters --------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x1417])

    def dense(fan_in, fan_out):
        return (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    p: dict[str, np.ndarray] = {}
    c_in = 1
    for i, (c, s) in enumerate(zip(cfg.conv_channels, cfg.conv_strides)):
        p[f"conv{i}.w"] = dense(s * c_in, c)
        p[f"conv{i}.b"] = zeros(c)
        c_in = c
    p["feat_ln.g"], p["feat_ln.b"] = ones(c_in), zeros(c_in)
    p["proj.w"], p["proj.b"] = dense(c_in, cfg.D), zeros(cfg.D)
    p["mask_emb"] = (0.02 * rng.standard_normal(cfg.D)).astype(np.float32)
    for l in range(cfg.L):
        pre = f"layer{l}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(cfg.D), zeros(cfg.D)
        p[pre + "q.w"], p[pre + "q.b"] = dense(cfg.D, cfg.D), zeros(cfg.D)
        # no key bias: it shifts every score in a row equally and gets an exactly-zero gradient
        p[pre + "k.w"] = dense(cfg.D, cfg.D)
        p[pre + "v.w"], p[pre + "v.b"] = dense(cfg.D, cfg.D), zeros(cfg.D)
        p[pre + "o.w"], p[pre + "o.b"] = dense(cfg.D, cfg.D), zeros(cfg.D)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(cfg.D), zeros(cfg.D)
        p[pre + "ff1.w"], p[pre + "ff1.b"] = dense(cfg.D, cfg.F), zeros(cfg.F)
        p[pre + "ff2.w"], p[pre + "ff2.b"] = dense(cfg.F, cfg.D), zeros(cfg.D)
    # small head so the untrained model predicts near-uniform classes
    p["head.w"] = (0.02 * rng.standard_normal((cfg.D, cfg.K))).astype(np.float32)
    p["head.b"] = zeros(cfg.K)
    return p


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def sinusoidal_positions(T: int, D: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


# batches -----------------------------------------------------------------------


@dataclass
class Batch:
    waves: np.ndarray  # (B, T * 320)
    frames: np.ndarray  # (B,) valid frame counts
    mask: np.ndarray  # (B, T) bool, never true on padding

    @property
    def T(self) -> int:
        return self.mask.shape[1]

    def valid(self) -> np.ndarray:
        return np.arange(self.T)[None, :] < self.frames[:, None]


def make_batch(waves: Sequence[np.ndarray], masks: Sequence[np.ndarray] | None = None, dtype=np.float32) -> Batch:
    frames = np.array([len(w) // HOP for w in waves], dtype=np.int64)
    if (frames < 1).any():
        raise LengthError(f"every waveform needs at least {HOP} samples")
    T = int(frames.max())
    arr = np.zeros((len(waves), T * HOP), dtype=dtype)
    mask = np.zeros((len(waves), T), dtype=bool)
    for b, w in enumerate(waves):
        n = frames[b] * HOP
        arr[b, :n] = w[:n]
        if masks is not None:
            m = np.asarray(masks[b], dtype=bool)
            if m.shape != (frames[b],):
                raise DimensionError(f"mask length {m.shape} does not match {frames[b]} frames")
            mask[b, : frames[b]] = m
    return Batch(arr, frames, mask)


# forward -----------------------------------------------------------------------


def _linear(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    out = ag.matmul(x, p[name + ".w"])
    b = p.get(name + ".b")
    return out if b is None else ag.add(out, b)


def conv_features(p: Mapping[str, Tensor], cfg: ModelConfig, waves: np.ndarray) -> Tensor:
    """``(B, T * 320)`` waveforms to ``(B, T, D)`` frame embeddings (before masking)."""
    B, N = waves.shape
    if N < HOP:
        raise LengthError(f"conv frontend needs at least {HOP} samples")
    dtype = p["proj.w"].dtype
    x = Tensor(waves.astype(dtype, copy=False))
    length, c_in = N, 1
    for i, (c, s) in enumerate(zip(cfg.conv_channels, cfg.conv_strides)):
        length //= s
        x = ag.reshape(x, (B, length, s * c_in))
        x = ag.gelu(_linear(x, p, f"conv{i}"))
        c_in = c
    x = ag.layer_norm(x, p["feat_ln.g"], p["feat_ln.b"])
    return _linear(x, p, "proj")


def _attention(x: Tensor, p: Mapping[str, Tensor], pre: str, cfg: ModelConfig, key_bias: np.ndarray) -> Tensor:
    B, T, D = x.shape
    H, dh = cfg.H, cfg.D // cfg.H

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, p, pre + "q"))
    k = heads(ag.matmul(x, p[pre + "k.w"]))
    v = heads(_linear(x, p, pre + "v"))
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = ag.add(scores, Tensor(key_bias.astype(x.dtype)))
    ctx = ag.matmul(ag.softmax(scores), v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return _linear(ctx, p, pre + "o")


def forward_batch(p: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch) -> tuple[Tensor, list[Tensor]]:
    """Logits ``(B, T, K)`` and the L+1 layer outputs ``(B, T, D)`` on the masked input."""
    emb = conv_features(p, cfg, batch.waves)
    if emb.shape[1] != batch.T:
        raise DimensionError(f"mask covers {batch.T} frames, frontend produced {emb.shape[1]}")
    if batch.mask.any():
        emb = ag.mask_fill(emb, batch.mask, p["mask_emb"])
    feats = [emb]
    x = ag.add(emb, Tensor(sinusoidal_positions(batch.T, cfg.D, emb.dtype)))
    key_bias = np.where(batch.valid(), 0.0, PAD_BIAS)[:, None, None, :]
    for l in range(cfg.L):
        pre = f"layer{l}."
        x = ag.add(x, _attention(ag.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, cfg, key_bias))
        h = ag.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        x = ag.add(x, _linear(ag.gelu(_linear(h, p, pre + "ff1")), p, pre + "ff2"))
        feats.append(x)
    return _linear(x, p, "head"), feats


class Encoder:
    """Config plus float32 parameter arrays, with single-utterance conveniences."""

    def __init__(self, cfg: ModelConfig, params: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = dict(params) if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        missing = set(expected) - set(self.params)
        if missing:
            raise DimensionError(f"missing parameters: {sorted(missing)[:5]}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return as_tensors({k: self.params[k] for k in param_shapes(self.cfg)}, requires_grad)

    def conv_frontend(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples)
        T = samples.shape[0] // HOP
        if T < 1:
            raise LengthError(f"conv frontend needs at least {HOP} samples")
        out = conv_features(self.tensors(), self.cfg, samples[None, : T * HOP].astype(np.float32))
        return out.data[0]

    def forward(self, samples: np.ndarray, mask: MaskSpec | np.ndarray | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
        T = np.asarray(samples).shape[0] // HOP
        m = mask.masked if isinstance(mask, MaskSpec) else mask
        m = np.zeros(T, dtype=bool) if m is None else np.asarray(m, dtype=bool)
        if m.shape != (T,):
            raise DimensionError(f"mask has {m.shape[0]} frames, waveform has {T}")
        logits, feats = forward_batch(self.tensors(), self.cfg, make_batch([samples], [m]))
        return logits.data[0], [f.data[0] for f in feats]

    def layer_features(self, samples: np.ndarray) -> np.ndarray:
        """Clean-input activations of every layer, ``(L+1, T, D)``."""
        _, feats = self.forward(samples)
        return np.stack(feats)


def extract_teacher_features(model: Encoder, waves: Sequence[np.ndarray], layer: int, out_path=None, threads: int = 1) -> list[np.ndarray]:
    """Clean-input (all-false mask) activations of ``layer`` for every utterance.

    Layer 0 is the frame embedding; layer ``l`` is the output of transformer
    block ``l``. Writes a feature dump when ``out_path`` is given.
    """
    if not 0 <= layer <= model.cfg.L:
        raise ConfigError(f"layer must lie in [0, {model.cfg.L}], got {layer}")

    def one(w):
        return model.forward(w)[1][layer]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(one, waves))
    else:
        feats = [one(w) for w in waves]
    if out_path is not None:
        write_features(out_path, feats)
    return feats
