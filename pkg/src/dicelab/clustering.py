"""k-means codebooks over frame features, and hard/soft label emission."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio
from .errors import ConfigError, DimensionError

MAX_FIT_FRAMES = 1_000_000
_CHUNK = 4096


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, dim)
    inertia: float
    seed: int = 0
    iterations: int = 0
    samples: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path: str | Path) -> None:
        fileio.write_codebook(path, self.centroids, self.inertia, self.seed, self.iterations, self.samples)

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        d = fileio.read_codebook(path)
        return cls(d["centroids"], d["inertia"], d["seed"], d["iterations"], d["samples"])


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return features.reshape(-1, features.shape[-1])
    return np.concatenate([np.asarray(f) for f in features], axis=0)


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared L2 distances ``(N, K)`` by explicit differences, float64.

    Direct differences (rather than the expanded dot-product form) keep exact
    ties exact, which the lowest-index tie-break relies on.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    out = np.empty((x.shape[0], c.shape[0]))
    for a in range(0, x.shape[0], _CHUNK):
        diff = x[a : a + _CHUNK, None, :] - c[None, :, :]
        out[a : a + _CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _fit_distances(x: np.ndarray, centroids: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    """Expanded-form squared distances for the fitting loops; fast, not tie-exact."""
    c = np.asarray(centroids, dtype=np.float64)
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("kd,kd->k", c, c)[None, :]
    return np.maximum(d, 0.0)


def _cluster_sums(x: np.ndarray, assign: np.ndarray, K: int) -> np.ndarray:
    onehot = np.zeros((K, x.shape[0]))
    onehot[assign, np.arange(x.shape[0])] = 1.0
    return onehot @ x


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = sq_distances(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers.append(x[idx])
        closest = np.minimum(closest, sq_distances(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    K = centroids.shape[0]
    x_sq = np.einsum("nd,nd->n", x, x)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _fit_distances(x, centroids, x_sq)
        assign = d.argmin(axis=1)
        point_cost = d[np.arange(x.shape[0]), assign]
        history.append(float(point_cost.sum()))

        sums = _cluster_sums(x, assign, K)
        counts = np.bincount(assign, minlength=K)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for k in np.flatnonzero(~filled):
            # split the costliest cluster at its farthest member
            cluster_cost = np.bincount(assign, weights=point_cost, minlength=K)
            donor = int(cluster_cost.argmax())
            members = np.flatnonzero(assign == donor)
            far = members[point_cost[members].argmax()]
            new[k] = x[far]
            assign[far] = k
            point_cost[far] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    return centroids, it, history


def _hartigan(x: np.ndarray, centroids: np.ndarray, max_passes: int = 50) -> tuple[np.ndarray, int]:
    """Single-point moves that strictly lower the inertia, until none is left.

    Moving ``x_i`` from cluster ``a`` to ``b`` changes the inertia by
    ``n_b/(n_b+1) d_b - n_a/(n_a-1) d_a`` (squared distances to the current
    means). Every Hartigan-stable partition is also Lloyd-stable, so this only
    ever escapes Lloyd's local optima.
    """
    K = centroids.shape[0]
    x_sq = np.einsum("nd,nd->n", x, x)
    assign = _fit_distances(x, centroids, x_sq).argmin(axis=1)
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    sums = _cluster_sums(x, assign, K)
    means = sums / np.maximum(counts, 1)[:, None]
    passes = 0
    for passes in range(1, max_passes + 1):
        # vectorized screen; candidates are then re-checked one at a time as means move
        d_all = _fit_distances(x, means, x_sq)
        own = d_all[np.arange(x.shape[0]), assign]
        shrink = np.where(counts > 1, counts / np.maximum(counts - 1, 1), 0.0)
        gain_all = d_all * (counts / (counts + 1))[None, :]
        gain_all[np.arange(x.shape[0]), assign] = np.inf
        candidates = np.flatnonzero(gain_all.min(axis=1) < shrink[assign] * own * (1 - 1e-12))
        if candidates.size == 0:
            break
        for i in candidates.tolist():
            a = assign[i]
            if counts[a] <= 1:
                continue
            diff = means - x[i]
            d = np.einsum("kd,kd->k", diff, diff)
            gain = counts / (counts + 1) * d
            gain[a] = np.inf
            b = int(gain.argmin())
            if gain[b] < counts[a] / (counts[a] - 1) * d[a] * (1 - 1e-12):
                sums[a] -= x[i]
                sums[b] += x[i]
                counts[a] -= 1
                counts[b] += 1
                means[a] = sums[a] / counts[a]
                means[b] = sums[b] / counts[b]
                assign[i] = b
    # exact means from the final partition, free of incremental drift
    sums = _cluster_sums(x, assign, K)
    filled = counts > 0
    out = centroids.copy()
    out[filled] = sums[filled] / counts[filled, None]
    return out, passes


def kmeans_fit(
    features,
    K: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
    n_init: int = 10,
    max_fit_frames: int = MAX_FIT_FRAMES,
) -> Codebook:
    """Best of ``n_init`` restarts: k-means++ seeding, Lloyd iterations, then Hartigan refinement."""
    x = _stack(features).astype(np.float64)
    if K < 2:
        raise ConfigError(f"K must be >= 2, got {K}")
    if x.shape[0] < K:
        raise ConfigError(f"k-means needs at least K={K} frames, got {x.shape[0]}")
    if x.shape[0] > max_fit_frames:
        sub = np.random.default_rng([seed, 1]).choice(x.shape[0], size=max_fit_frames, replace=False)
        x = x[np.sort(sub)]
    best = None
    for r in range(max(1, n_init)):
        rng = np.random.default_rng([seed, 0, r])
        init = _kmeans_pp(x, K, rng)
        centroids, iters, history = _lloyd(x, init, max_iters, tol)
        centroids, _ = _hartigan(x, centroids)
        inertia = float(sq_distances(x, centroids).min(axis=1).sum())
        history.append(inertia)
        run = (centroids, inertia, iters, history)
        if best is None or run[1] < best[1]:
            best = run
    centroids, inertia, iters, history = best
    return Codebook(centroids.astype(np.float32), inertia, seed, iters, x.shape[0], history)


def _check_dim(codebook: Codebook, feats: Sequence[np.ndarray]) -> None:
    for f in feats:
        if f.ndim != 2 or f.shape[1] != codebook.dim:
            raise DimensionError(f"feature dim {f.shape[-1]} does not match codebook dim {codebook.dim}")


def assign_hard(codebook: Codebook, features: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Nearest-centroid ids per frame; ties go to the lowest index."""
    _check_dim(codebook, features)
    return [sq_distances(f, codebook.centroids).argmin(axis=1) for f in features]


def soft_labels(codebook: Codebook, features: Sequence[np.ndarray], tau: float) -> list[np.ndarray]:
    """Per-frame cluster probabilities ``softmax(-||h - c_i|| / tau)`` in float64."""
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    _check_dim(codebook, features)
    out = []
    for f in features:
        z = -np.sqrt(sq_distances(f, codebook.centroids)) / tau
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return out
