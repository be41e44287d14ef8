"""Training objectives: masked hard-label CE, masked soft-label KL, projected feature MSE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, DimensionError

SOFT_ROW_TOL = 1e-4


def _masked_rows(logits: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    K = logits.shape[-1]
    flat = ag.reshape(logits, (-1, K)) if logits.ndim != 2 else logits
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != flat.shape[0]:
        raise DimensionError(f"mask covers {mask.shape[0]} frames, logits have {flat.shape[0]}")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DataError("masked loss needs at least one masked frame")
    return ag.take_rows(flat, idx), idx


def ssl_hard_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked frames of ``-log softmax(logits_t)[z_t]``."""
    rows, idx = _masked_rows(logits, mask)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] * rows.shape[-1] != int(np.prod(logits.shape)):
        raise DimensionError(f"{labels.shape[0]} labels for logits of shape {logits.shape}")
    logp = ag.log_softmax(rows)
    return ag.mul(ag.sum_all(ag.pick(logp, labels[idx])), -1.0 / idx.size)


def ssl_soft_loss(logits: Tensor, soft: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked frames of ``KL(teacher_t || softmax(logits_t))``, student temperature 1."""
    K = logits.shape[-1]
    soft = np.asarray(soft).reshape(-1, K)
    sums = soft.sum(axis=1, dtype=np.float64)
    if np.abs(sums - 1.0).max() > SOFT_ROW_TOL or (soft < 0).any():
        raise DataError("soft labels must be nonnegative rows summing to 1")
    rows, idx = _masked_rows(logits, mask)
    p = soft[idx].astype(logits.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = float(np.where(p > 0, p * np.log(p), 0.0).sum(dtype=np.float64))
    cross = ag.sum_all(ag.mul(ag.log_softmax(rows), Tensor(p)))
    return ag.mul(ag.sub(neg_entropy, cross), 1.0 / idx.size)


@dataclass
class ProjectionSet:
    """Per-layer student-to-teacher projections ``W_l`` (``D_s x D_t``) and weights ``alpha_l``."""

    pairs: list[tuple[int, int]]  # (student layer, teacher layer)
    weights: list  # Tensor or array per pair
    alpha: list[float]

    def __post_init__(self):
        if not (len(self.pairs) == len(self.weights) == len(self.alpha)) or not self.pairs:
            raise ConfigError("projection set needs one W and one alpha per distilled layer")
        if any(a < 0 for a in self.alpha) or not any(a > 0 for a in self.alpha):
            raise ConfigError("layer weights must be nonnegative and not all zero")
        self.weights = [w if isinstance(w, Tensor) else Tensor(w) for w in self.weights]


def default_layer_pairs(student_layers: int, teacher_layers: int) -> list[tuple[int, int]]:
    """Student layer l to teacher layer l * L_t / L_s over transformer layers 1..L_s."""
    if student_layers < 1 or teacher_layers < student_layers:
        raise ConfigError(f"cannot map {student_layers} student layers onto {teacher_layers} teacher layers")
    return [(l, l * teacher_layers // student_layers) for l in range(1, student_layers + 1)]


def init_projections(pairs: list[tuple[int, int]], d_student: int, d_teacher: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x9E0])
    return {
        f"distill{s}.w": (rng.standard_normal((d_student, d_teacher)) / math.sqrt(d_student)).astype(np.float32)
        for s, _ in pairs
    }


def feat_loss(
    student_feats: Sequence[Tensor],
    teacher_feats: Sequence,
    proj: ProjectionSet,
    rows: np.ndarray | None = None,
) -> Tensor:
    """``sum_l alpha_l * MSE(H_t[map(l)], H_s[l] @ W_l)`` over the selected frame rows."""
    total = None
    for (s, t), w, a in zip(proj.pairs, proj.weights, proj.alpha):
        if s >= len(student_feats) or t >= len(teacher_feats):
            raise ConfigError(f"layer pair ({s}, {t}) outside {len(student_feats)} student / {len(teacher_feats)} teacher layers")
        hs = student_feats[s]
        ht = teacher_feats[t]
        ht = ht.data if isinstance(ht, Tensor) else np.asarray(ht)
        hs = ag.reshape(hs, (-1, hs.shape[-1]))
        ht = ht.reshape(-1, ht.shape[-1])
        if hs.shape[0] != ht.shape[0]:
            raise DimensionError(f"student has {hs.shape[0]} frames, teacher {ht.shape[0]}")
        if rows is not None:
            hs = ag.take_rows(hs, rows)
            ht = ht[rows]
        diff = ag.sub(Tensor(ht.astype(hs.dtype)), ag.matmul(hs, w))
        term = ag.mul(ag.mean(ag.mul(diff, diff)), float(a))
        total = term if total is None else ag.add(total, term)
    return total


def mixed_loss(ssl, feat, lam: float):
    """``ssl + lam * feat``; ``lam = inf`` selects pure feature distillation."""
    if lam < 0 or math.isnan(lam):
        raise ConfigError(f"feature loss weight must be >= 0, got {lam}")
    if math.isinf(lam):
        return feat
    if lam == 0:
        return ssl
    if isinstance(ssl, Tensor) or isinstance(feat, Tensor):
        return ag.add(ssl, ag.mul(feat, lam))
    return ssl + lam * feat


@dataclass
class LossReport:
    total: float
    ssl: float
    feat: float
    masked_frames: int

    def line(self, step: int) -> str:
        return f"step={step} total={self.total!r} ssl={self.ssl!r} feat={self.feat!r} masked_frames={self.masked_frames}"

    @staticmethod
    def parse(line: str) -> tuple[int, "LossReport"]:
        kv = dict(tok.split("=", 1) for tok in line.split())
        return int(kv["step"]), LossReport(float(kv["total"]), float(kv["ssl"]), float(kv["feat"]), int(kv["masked_frames"]))
