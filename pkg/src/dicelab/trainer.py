"""Masked-prediction training loop with Adam, warmup/decay schedule, clipping and exact resume.

All randomness is counter-based: batch order depends on ``(seed, epoch)``,
crops and masks on ``(seed, step, utterance id)``. Resuming from a checkpoint
therefore replays exactly the trajectory of an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import fileio
from .corpus import HOP, CorpusManifest
from .errors import ConfigError, DataError, MissingArtifactError, NumericError
from .losses import (
    LossReport,
    ProjectionSet,
    default_layer_pairs,
    feat_loss,
    init_projections,
    mixed_loss,
    ssl_hard_loss,
    ssl_soft_loss,
)
from .optim import Adam, clip_by_global_norm
from .model import Encoder, ModelConfig, forward_batch, init_params, make_batch, sample_mask

log = logging.getLogger(__name__)

LOSS_MODES = ("hard", "soft", "feat", "mixed")
_BATCH_KEY = 0xBA7C
_CROP_KEY = 0xC409


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    max_frames_per_batch: int = 1600
    peak_lr: float = 5e-4
    warmup_steps: int | None = None  # default: 8% of steps
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    clip_norm: float = 1.0
    seed: int = 0
    loss_mode: str = "hard"
    feat_weight: float = 0.0  # lambda for "mixed"
    labels_path: str | None = None
    teacher_checkpoint: str | None = None
    log_every: int = 10
    ckpt_every: int = 1000

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = int(round(0.08 * self.steps))
        if not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError("warmup_steps must lie in [0, steps]")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.feat_weight < 0:
            raise ConfigError("feat_weight must be >= 0")
        if self.batch_size < 1 or self.max_frames_per_batch < 1:
            raise ConfigError("batch_size and max_frames_per_batch must be >= 1")
        if self.peak_lr < 0 or self.clip_norm <= 0:
            raise ConfigError("peak_lr must be >= 0 and clip_norm > 0")
        if self.loss_mode in ("hard", "soft", "mixed") and not self.labels_path:
            raise ConfigError(f"loss_mode {self.loss_mode!r} needs labels_path")
        if self.loss_mode in ("feat", "mixed") and not self.teacher_checkpoint:
            raise ConfigError(f"loss_mode {self.loss_mode!r} needs teacher_checkpoint")

    @property
    def lam(self) -> float:
        return {"hard": 0.0, "soft": 0.0, "feat": math.inf, "mixed": self.feat_weight}[self.loss_mode]

    def portable(self) -> dict:
        """Config as a dict with input files named by content digest, so it does not depend on where they live."""
        d = asdict(self)
        for k in ("labels_path", "teacher_checkpoint"):
            if d[k] and Path(d[k]).is_file():
                d[k] = "sha256:" + fileio.file_digest(d[k])
        return d

    def digest(self) -> str:
        d = self.portable()
        for k in ("log_every", "ckpt_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        unknown = set(d) - set(cls.__dataclass_fields__) - {"model", "corpus", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    return cfg.peak_lr * (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)


@dataclass
class TrainResult:
    checkpoint: Path | None
    params: dict[str, np.ndarray]
    history: list[LossReport] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)


# targets -----------------------------------------------------------------------


@dataclass
class _Targets:
    hard: list[np.ndarray] | None = None
    soft: list[np.ndarray] | None = None
    teacher: Encoder | None = None


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return fileio.read_checkpoint(path)


def load_encoder(path: str | Path) -> Encoder:
    header, tensors = load_checkpoint(path)
    return Encoder(ModelConfig.from_dict(header["model_config"]), {k: v for k, v in tensors.items() if "/" not in k})


def _read_labels(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"label file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"DHLB":
        return "hard", fileio.read_hard_labels(path)
    if magic == b"DSLB":
        ids, probs, _ = fileio.read_soft_labels(path)
        return "soft", (ids, probs)
    raise DataError(f"{path} is not a label file")


def _load_targets(cfg: TrainConfig, frames: Sequence[int], model_cfg: ModelConfig) -> _Targets:
    out = _Targets()
    if cfg.labels_path:
        kind, (ids, labels) = _read_labels(cfg.labels_path)
        want = "soft" if cfg.loss_mode == "soft" else "hard"
        if kind != want:
            raise DataError(f"loss_mode {cfg.loss_mode!r} needs {want} labels, {cfg.labels_path} holds {kind}")
        by_id = dict(zip(ids, labels))
        for uid, T in enumerate(frames):
            z = by_id.get(uid)
            if z is None:
                raise DataError(f"no target for utterance {uid}")
            if len(z) != T:
                raise DataError(f"target for utterance {uid} has {len(z)} frames, expected {T}")
        ordered = [by_id[u] for u in range(len(frames))]
        if kind == "hard":
            if max(int(z.max()) for z in ordered) >= model_cfg.K:
                raise DataError(f"label ids exceed the model's K={model_cfg.K}")
            out.hard = ordered
        else:
            if ordered[0].shape[1] != model_cfg.K:
                raise DataError(f"soft labels have K={ordered[0].shape[1]}, model has K={model_cfg.K}")
            out.soft = ordered
    if cfg.teacher_checkpoint:
        out.teacher = load_encoder(cfg.teacher_checkpoint)
    return out


# batching ----------------------------------------------------------------------


def batch_ids(cfg: TrainConfig, n_utts: int, step: int) -> np.ndarray:
    B = min(cfg.batch_size, n_utts)
    per_epoch = n_utts // B
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.seed, _BATCH_KEY, epoch]).permutation(n_utts)
    return perm[pos * B : (pos + 1) * B]


def _crop(cfg: TrainConfig, step: int, uid: int, T: int, limit: int) -> tuple[int, int]:
    if T <= limit:
        return 0, T
    start = int(np.random.default_rng([cfg.seed, _CROP_KEY, step, uid]).integers(T - limit + 1))
    return start, limit


def _pad(rows: list[np.ndarray], T: int, fill) -> np.ndarray:
    out = np.empty((len(rows), T) + rows[0].shape[1:], dtype=rows[0].dtype)
    out[...] = fill
    for b, r in enumerate(rows):
        out[b, : len(r)] = r
    return out


# checkpoints -------------------------------------------------------------------


def save_state(path, model_cfg: ModelConfig, cfg: TrainConfig, step: int, params, m, v, extra: dict | None = None) -> Path:
    tensors = dict(params)
    tensors.update({f"adam.m/{k}": a for k, a in m.items()})
    tensors.update({f"adam.v/{k}": a for k, a in v.items()})
    header = {
        "model_config": model_cfg.to_dict(),
        "train_digest": cfg.digest(),
        "train_config": cfg.portable(),
        "step": step,
        "rng": {"scheme": "counter", "seed": cfg.seed},
    }
    header.update(extra or {})
    fileio.write_checkpoint(path, header, tensors)
    return Path(path)


# loop --------------------------------------------------------------------------


def _waves(corpus) -> list[np.ndarray]:
    if isinstance(corpus, CorpusManifest):
        return corpus.load_all()
    return [np.asarray(w, dtype=np.float32) for w in corpus]


def _log_line(path: Path | None, step: int, rep: LossReport) -> None:
    if path is not None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(rep.line(step) + "\n")


def _loop(cfg, model_cfg, waves, params, m, v, start, out_dir, stop_at=None) -> TrainResult:
    frames = [len(w) // HOP for w in waves]
    targets = _load_targets(cfg, frames, model_cfg)
    names = sorted(params)
    feat_pairs = None
    if targets.teacher is not None:
        feat_pairs = default_layer_pairs(model_cfg.L, targets.teacher.cfg.L)
        alpha = [1.0 / len(feat_pairs)] * len(feat_pairs)
        teacher_tensors = targets.teacher.tensors()
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "train.log" if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _truncate_log(log_path, start)

    result = TrainResult(None, params)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    limit_total = cfg.max_frames_per_batch
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    for step in range(start, end):
        ids = batch_ids(cfg, len(waves), step)
        limit = max(1, limit_total // len(ids))
        crops = [_crop(cfg, step, int(u), frames[u], limit) for u in ids]
        segs = [waves[u][a * HOP : (a + n) * HOP] for u, (a, n) in zip(ids, crops)]
        masks = [sample_mask(n, model_cfg, [cfg.seed, step, int(u)]).masked for u, (a, n) in zip(ids, crops)]
        batch = make_batch(segs, masks)

        leaves = {k: ag.Tensor(params[k], requires_grad=True, name=k) for k in names}
        with ag.GradTape() as tape:
            logits, feats = forward_batch(leaves, model_cfg, batch)
            ssl = feat = None
            if targets.hard is not None:
                z = _pad([targets.hard[u][a : a + n] for u, (a, n) in zip(ids, crops)], batch.T, 0)
                ssl = ssl_hard_loss(logits, z, batch.mask)
            elif targets.soft is not None:
                q = _pad([targets.soft[u][a : a + n] for u, (a, n) in zip(ids, crops)], batch.T, 1.0 / model_cfg.K)
                ssl = ssl_soft_loss(logits, q, batch.mask)
            if feat_pairs is not None and cfg.lam > 0:
                _, tfeats = forward_batch(teacher_tensors, targets.teacher.cfg, batch)
                proj = ProjectionSet(feat_pairs, [leaves[f"distill{s}.w"] for s, _ in feat_pairs], alpha)
                feat = feat_loss(feats, [t.data for t in tfeats], proj, np.flatnonzero(batch.valid().reshape(-1)))
            total = mixed_loss(ssl, feat, cfg.lam)
        rep = LossReport(
            float(total.data),
            float(ssl.data) if ssl is not None else 0.0,
            float(feat.data) if feat is not None else 0.0,
            int(batch.mask.sum()),
        )
        if not math.isfinite(rep.total):
            if out_dir is not None:
                save_state(out_dir / "diagnostic.ckpt", model_cfg, cfg, step, params, m, v, {"error": "non-finite loss"})
            raise NumericError(f"non-finite loss at step {step}")
        result.history.append(rep)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            _log_line(log_path, step, rep)
            log.debug("step %d total %.4f", step, rep.total)

        grads = dict(zip(names, tape.gradient(total, [leaves[k] for k in names])))
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        result.grad_norms.append(min(norm, cfg.clip_norm))
        opt.step(params, grads, m, v, step + 1, lr_at(cfg, step))

        done = step + 1
        if out_dir is not None and done % cfg.ckpt_every == 0 and done < cfg.steps:
            save_state(out_dir / f"step{done:06d}.ckpt", model_cfg, cfg, done, params, m, v)

    if out_dir is not None:
        done = end
        name = "model.ckpt" if done == cfg.steps else f"step{done:06d}.ckpt"
        result.checkpoint = save_state(out_dir / name, model_cfg, cfg, done, params, m, v)
    return result


def _truncate_log(path: Path, start: int) -> None:
    if start == 0 or not path.exists():
        path.unlink(missing_ok=True)
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines() if LossReport.parse(ln)[0] < start]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


def initial_params(cfg: TrainConfig, model_cfg: ModelConfig) -> dict[str, np.ndarray]:
    params = init_params(model_cfg, cfg.seed)
    if cfg.teacher_checkpoint and cfg.lam > 0:
        header, _ = load_checkpoint(cfg.teacher_checkpoint)
        tcfg = ModelConfig.from_dict(header["model_config"])
        params.update(init_projections(default_layer_pairs(model_cfg.L, tcfg.L), model_cfg.D, tcfg.D, cfg.seed))
    return params


def train(cfg: TrainConfig, corpus, model_cfg: ModelConfig, out_dir=None, stop_at: int | None = None) -> TrainResult:
    """Train from fresh initialization. Writes ``train.log`` and checkpoints when ``out_dir`` is set."""
    waves = _waves(corpus)
    params = initial_params(cfg, model_cfg)
    m, v = Adam().init_state(params)
    return _loop(cfg, model_cfg, waves, params, m, v, 0, out_dir, stop_at)


def resume(ckpt: str | Path, cfg: TrainConfig, corpus, out_dir=None) -> TrainResult:
    """Continue training from ``ckpt``; the config must hash to the checkpoint's digest."""
    header, tensors = load_checkpoint(ckpt)
    if header["train_digest"] != cfg.digest():
        raise ConfigError("train config does not match the checkpoint's config digest")
    model_cfg = ModelConfig.from_dict(header["model_config"])
    step = int(header["step"])
    params = {k: a for k, a in tensors.items() if "/" not in k}
    if step >= cfg.steps:
        return TrainResult(Path(ckpt), params)
    m = {k[len("adam.m/") :]: a for k, a in tensors.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/") :]: a for k, a in tensors.items() if k.startswith("adam.v/")}
    out_dir = Path(ckpt).parent if out_dir is None else out_dir
    return _loop(cfg, model_cfg, _waves(corpus), params, m, v, step, out_dir)
