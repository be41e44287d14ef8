"""Frozen-feature linear probes with a learned softmax weighting over layers.

Two tasks stand in for the content and speaker benchmarks: per-frame
pseudo-phoneme classification, and utterance-level speaker classification
from mean-pooled frames. The encoder is never updated; only the layer
weights and a linear classifier are trained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .corpus import CorpusManifest
from .errors import ConfigError, DataError
from .model import Encoder
from .optim import Adam

TASKS = ("phoneme", "speaker")


@dataclass
class ProbeConfig:
    task: str = "phoneme"
    seed: int = 0
    lr: float = 1e-3
    steps: int = 2000
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"probe task must be one of {TASKS}, got {self.task!r}")
        if not 0 < self.train_fraction < 1 or self.steps < 1:
            raise ConfigError("train_fraction must lie in (0, 1) and steps >= 1")


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    layer_weights: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def split(n: int, cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise DataError("probing needs at least two utterances")
    perm = np.random.default_rng([cfg.seed, 0x5B17]).permutation(n)
    n_train = min(n - 1, max(1, int(round(cfg.train_fraction * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _design(layer_feats: Sequence[np.ndarray], targets, ids: np.ndarray, task: str):
    if task == "phoneme":
        X = np.concatenate([layer_feats[i] for i in ids], axis=1)
        y = np.concatenate([np.asarray(targets[i]) for i in ids])
    else:
        X = np.stack([layer_feats[i].mean(axis=1) for i in ids], axis=1)
        y = np.asarray([targets[i] for i in ids])
    return X.astype(np.float64), y.astype(np.int64)


def probe_features(layer_feats: Sequence[np.ndarray], targets, n_classes: int, cfg: ProbeConfig) -> ProbeResult:
    """Train a probe on precomputed ``(layers, T, D)`` features per utterance.

    ``targets`` holds per-frame label arrays for the phoneme task and one
    integer per utterance for the speaker task. Features are standardized per
    layer and dimension with train-split statistics.
    """
    if len(layer_feats) != len(targets):
        raise DataError("one target entry per utterance is required")
    tr, ev = split(len(layer_feats), cfg)
    Xtr, ytr = _design(layer_feats, targets, tr, cfg.task)
    Xev, yev = _design(layer_feats, targets, ev, cfg.task)
    if Xtr.shape[1] != ytr.shape[0] or Xev.shape[1] != yev.shape[0]:
        raise DataError("feature frames and truth frames disagree")
    mu = Xtr.mean(axis=1, keepdims=True)
    sd = Xtr.std(axis=1, keepdims=True) + 1e-6
    Xtr = ((Xtr - mu) / sd).astype(np.float32)
    Xev = ((Xev - mu) / sd).astype(np.float32)
    n_layers, _, D = Xtr.shape

    rng = np.random.default_rng([cfg.seed, 0x9B0E])
    params = {
        "layer_logits": np.zeros((1, n_layers), dtype=np.float32),
        "w": (0.01 * rng.standard_normal((D, n_classes))).astype(np.float32),
        "b": np.zeros(n_classes, dtype=np.float32),
    }
    opt = Adam()
    m, v = opt.init_state(params)
    flat_tr = ag.Tensor(Xtr.reshape(n_layers, -1))

    def logits_of(p, flat, n):
        mix = ag.reshape(ag.matmul(ag.softmax(p["layer_logits"]), flat), (n, D))
        return ag.add(ag.matmul(mix, p["w"]), p["b"])

    for t in range(1, cfg.steps + 1):
        leaves = {k: ag.Tensor(a, requires_grad=True) for k, a in params.items()}
        with ag.GradTape() as tape:
            logp = ag.log_softmax(logits_of(leaves, flat_tr, len(ytr)))
            loss = ag.mul(ag.sum_all(ag.pick(logp, ytr)), -1.0 / len(ytr))
        grads = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
        opt.step(params, grads, m, v, t, cfg.lr)

    frozen = {k: ag.Tensor(a) for k, a in params.items()}
    pred = logits_of(frozen, ag.Tensor(Xev.reshape(n_layers, -1)), len(yev)).data.argmax(axis=1)
    weights = ag.softmax_array(params["layer_logits"].astype(np.float64))[0]
    return ProbeResult(cfg.task, float((pred == yev).mean()), [float(w) for w in weights])


def extract_layers(model: Encoder, waves: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [model.layer_features(w) for w in waves]


def probe_train(model: Encoder, cfg: ProbeConfig, corpus: CorpusManifest, waves: Sequence[np.ndarray] | None = None) -> ProbeResult:
    """Probe a frozen encoder on the corpus ground truth."""
    waves = corpus.load_all() if waves is None else waves
    feats = extract_layers(model, waves)
    if cfg.task == "phoneme":
        targets = [corpus.truth(i) for i in range(len(corpus))]
        n_classes = corpus.phonemes
    else:
        targets = [u.speaker_id for u in corpus.utterances]
        n_classes = corpus.speakers
    if len(targets) != len(feats):
        raise DataError("corpus truth does not cover every utterance")
    return probe_features(feats, targets, n_classes, cfg)


def compare(results: Sequence[tuple[str, ProbeResult]]) -> list[dict]:
    """Rank by accuracy (ties alphabetical) with deltas against the top row."""
    if len(results) < 2:
        raise ConfigError("compare needs at least two results")
    tasks = {r.task for _, r in results}
    if len(tasks) > 1:
        raise ConfigError(f"cannot compare results from different tasks: {sorted(tasks)}")
    ranked = sorted(results, key=lambda nr: (-nr[1].accuracy, nr[0]))
    top = ranked[0][1].accuracy
    return [{"name": n, "task": r.task, "accuracy": r.accuracy, "delta": r.accuracy - top} for n, r in ranked]


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Left-aligned plain-text table."""
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([_fmt(row.get(c, "")) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:+.4f}" if v < 0 else f"{v:.4f}"
    return str(v)
