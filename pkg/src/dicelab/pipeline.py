"""Iterative self-distillation plans: MFCC targets first, then k-means targets from a teacher layer.

A plan is an ordered list of stages. Stage 1 clusters MFCCs; every later
stage clusters one layer of the previous stage's model and trains a fresh
student (possibly narrower or shallower) on the resulting labels. Every
artifact is recorded in a JSON manifest with its SHA-256 digest.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import fileio
from .clustering import assign_hard, kmeans_fit, soft_labels
from .corpus import CorpusManifest, generate_corpus
from .errors import ConfigError, DataError
from .mfcc import mfcc
from .model import BASE, ModelConfig, extract_teacher_features, narrow, shallow, student_config
from .probes import ProbeConfig, ProbeResult, compare, format_table, probe_train
from .trainer import TrainConfig, load_encoder, train

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def derive_seed(seed: int, name: str) -> int:
    """Stage seed from the global seed and a stage name."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:4], "little")


@dataclass
class StageSpec:
    model: str = "base"  # base | narrow:<divisor> | shallow:<layers> | wide:<factor>
    target: str = "mfcc"  # mfcc | prev
    layer: int | None = None  # teacher layer for target=prev; default L/2
    label_mode: str = "hard"  # hard | soft | none
    tau: float = 1.0
    loss_mode: str = "hard"  # hard | soft | feat | mixed
    feat_weight: float = 0.0
    K: int = 16

    def resolve_model(self, base: ModelConfig) -> ModelConfig:
        kind, _, arg = self.model.partition(":")
        if kind == "base":
            return replace(base, K=self.K)
        if kind == "narrow":
            return narrow(base, int(arg), K=self.K)
        if kind == "shallow":
            return shallow(base, int(arg), K=self.K)
        if kind == "wide":
            return student_config(base, D=base.D * int(arg), K=self.K)
        raise ConfigError(f"unknown model variant {self.model!r}")


@dataclass
class CorpusSpec:
    n_utts: int = 200
    phonemes: int = 4
    speakers: int = 4
    min_seconds: float = 2.0
    max_seconds: float = 2.0


_LABELS_FOR_LOSS = {"hard": "hard", "mixed": "hard", "soft": "soft", "feat": "none"}


@dataclass
class IterationPlan:
    name: str
    stages: list[StageSpec]
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    base_model: dict = field(default_factory=BASE.to_dict)
    train: dict = field(default_factory=lambda: {"steps": 2000})
    probe_steps: int = 2000
    probe: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        if self.stages[0].target != "mfcc":
            raise ConfigError("stage 1 must take its targets from MFCC features")
        for i, st in enumerate(self.stages[1:], start=2):
            if st.target != "prev":
                raise ConfigError(f"stage {i} must take its targets from stage {i - 1}")
        for i, st in enumerate(self.stages, start=1):
            if st.label_mode not in ("hard", "soft", "none"):
                raise ConfigError(f"stage {i}: unknown label mode {st.label_mode!r}")
            if st.label_mode == "soft" and not st.tau > 0:
                raise ConfigError(f"stage {i}: soft labels need tau > 0")
            if st.loss_mode in ("feat", "mixed") and i == 1:
                raise ConfigError("feature distillation needs a teacher stage")
            if _LABELS_FOR_LOSS.get(st.loss_mode) != st.label_mode:
                raise ConfigError(f"stage {i}: loss mode {st.loss_mode!r} does not fit label mode {st.label_mode!r}")

    def base(self) -> ModelConfig:
        return ModelConfig.from_dict(self.base_model)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "IterationPlan":
        d = dict(d)
        d["stages"] = [StageSpec(**s) for s in d["stages"]]
        d["corpus"] = CorpusSpec(**d.get("corpus", {}))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


# presets -----------------------------------------------------------------------

K_MFCC = 16
K_MODEL = 32


def _two_stage(name: str, first: str = "base", **second) -> IterationPlan:
    s2 = dict(model="narrow:2", target="prev", K=K_MODEL)
    s2.update(second)
    return IterationPlan(name, [StageSpec(model=first, K=K_MFCC), StageSpec(**s2)])


def _presets() -> dict[str, callable]:
    mid = BASE.L // 2
    return {
        "dice-narrow2": lambda: _two_stage("dice-narrow2", layer=mid),
        "dice-narrow4": lambda: _two_stage("dice-narrow4", model="narrow:4", layer=mid),
        # L/4 and L/6 both round to one layer at L=4, so keep their order with 2 and 1 layers
        "dice-shallow4": lambda: _two_stage("dice-shallow4", model="shallow:2", layer=mid),
        "dice-shallow6": lambda: _two_stage("dice-shallow6", model="shallow:1", layer=mid),
        "feat-baseline": lambda: _two_stage("feat-baseline", layer=mid, label_mode="none", loss_mode="feat"),
        "mixed-0.1": lambda: _two_stage("mixed-0.1", layer=mid, loss_mode="mixed", feat_weight=0.1),
        "mixed-1.0": lambda: _two_stage("mixed-1.0", layer=mid, loss_mode="mixed", feat_weight=1.0),
        "soft-tau1": lambda: _two_stage("soft-tau1", layer=mid, label_mode="soft", loss_mode="soft", tau=1.0),
        "soft-tau5": lambda: _two_stage("soft-tau5", layer=mid, label_mode="soft", loss_mode="soft", tau=5.0),
        "soft-tau10": lambda: _two_stage("soft-tau10", layer=mid, label_mode="soft", loss_mode="soft", tau=10.0),
        "scratch-lowerbound": lambda: _two_stage("scratch-lowerbound", first="narrow:2", layer=mid),
        "teacher-n2": lambda: IterationPlan(
            "teacher-n2",
            [
                StageSpec(model="base", K=K_MFCC),
                StageSpec(model="base", target="prev", layer=mid, K=K_MODEL),
                # three quarters of the way up the stage-2 model
                StageSpec(model="narrow:2", target="prev", layer=BASE.L * 3 // 4, K=K_MODEL),
            ],
        ),
        "teacher-wide": lambda: _two_stage("teacher-wide", first="wide:2", layer=mid),
    }


PRESETS = tuple(_presets())


def preset(name: str) -> IterationPlan:
    table = _presets()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return table[name]()


_TOP_LEVEL = {"seed", "probe_steps", "probe"}
_CORPUS_KEYS = set(CorpusSpec.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__) - {"loss_mode", "feat_weight", "labels_path", "teacher_checkpoint", "seed"}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(plan: IterationPlan, overrides: list[str] | dict) -> IterationPlan:
    """Apply ``key=value`` overrides; ``stageN.field=value`` targets one stage."""
    plan = copy.deepcopy(plan)
    items = overrides.items() if isinstance(overrides, dict) else [_split_override(o) for o in overrides]
    for key, value in items:
        value = _parse_value(value) if isinstance(value, str) else value
        if key.startswith("stage"):
            head, _, fld = key.partition(".")
            try:
                idx = int(head[len("stage") :]) - 1
                stage = plan.stages[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"override {key!r} names no stage of this plan") from None
            if fld not in StageSpec.__dataclass_fields__:
                raise ConfigError(f"unknown stage field {fld!r}")
            setattr(stage, fld, value)
        elif key in _TOP_LEVEL:
            setattr(plan, key, value)
        elif key in _CORPUS_KEYS:
            setattr(plan.corpus, key, value)
        elif key in _TRAIN_KEYS:
            plan.train[key] = value
        elif key.startswith("model."):
            plan.base_model[key[len("model.") :]] = value
        else:
            raise ConfigError(f"unknown override key {key!r}")
    return IterationPlan.from_json(plan.to_json())


def _split_override(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    return key.strip(), value.strip()


# execution ---------------------------------------------------------------------


@dataclass
class StageArtifacts:
    name: str
    dir: Path
    checkpoint: Path
    model_config: ModelConfig
    files: dict[str, Path] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    seed: int = 0


def _rel(path: Path, root: Path) -> str:
    return str(Path(path).resolve().relative_to(root.resolve()))


def run_iteration(
    stage: StageSpec,
    index: int,
    plan: IterationPlan,
    corpus: CorpusManifest,
    waves: list[np.ndarray],
    out_dir: Path,
    prev: StageArtifacts | None = None,
    threads: int = 1,
) -> StageArtifacts:
    """Features, codebook, labels, training and probes for one stage."""
    if (stage.target == "prev") != (prev is not None):
        raise ConfigError("a previous stage is required exactly when targets come from it")
    name = f"stage{index}"
    seed = derive_seed(plan.seed, name)
    sdir = out_dir / name
    sdir.mkdir(parents=True, exist_ok=True)
    model_cfg = stage.resolve_model(plan.base())
    files: dict[str, Path] = {}

    if stage.label_mode != "none":
        if stage.target == "mfcc":
            feats = [mfcc(w) for w in waves]
        else:
            teacher = load_encoder(prev.checkpoint)
            layer = teacher.cfg.L // 2 if stage.layer is None else stage.layer
            feats = extract_teacher_features(teacher, waves, layer, threads=threads)
        files["features"] = sdir / "features.bin"
        fileio.write_features(files["features"], feats)

        codebook = kmeans_fit(feats, stage.K, seed=seed)
        files["codebook"] = sdir / "codebook.bin"
        codebook.save(files["codebook"])
        ids = list(range(len(feats)))
        files["labels"] = sdir / "labels.bin"
        if stage.label_mode == "hard":
            fileio.write_hard_labels(files["labels"], assign_hard(codebook, feats), ids)
        else:
            fileio.write_soft_labels(files["labels"], soft_labels(codebook, feats, stage.tau), ids, stage.tau)

    tcfg = TrainConfig(
        **plan.train,
        seed=seed,
        loss_mode=stage.loss_mode,
        feat_weight=stage.feat_weight,
        labels_path=str(files["labels"]) if "labels" in files else None,
        teacher_checkpoint=str(prev.checkpoint) if stage.loss_mode in ("feat", "mixed") else None,
    )
    result = train(tcfg, waves, model_cfg, out_dir=sdir / "train")
    files["checkpoint"] = result.checkpoint
    files["train_log"] = sdir / "train" / "train.log"

    tail = result.history[-min(10, len(result.history)) :]
    metrics: dict[str, Any] = {
        "final_loss": float(np.mean([r.total for r in tail])),
        "first_loss": result.history[0].total,
        "params": int(sum(a.size for k, a in result.params.items() if not k.startswith("distill"))),
    }
    if stage.label_mode != "none":
        metrics["kmeans_inertia"] = codebook.inertia
    if plan.probe:
        model = load_encoder(result.checkpoint)
        for task in ("phoneme", "speaker"):
            pr = probe_train(model, ProbeConfig(task=task, seed=seed, steps=plan.probe_steps), corpus, waves)
            metrics[f"{task}_acc"] = pr.accuracy
            metrics[f"{task}_layer_weights"] = pr.layer_weights
    return StageArtifacts(name, sdir, result.checkpoint, model_cfg, files, metrics, seed)


def run_plan(plan: IterationPlan, out_dir: str | Path, threads: int = 1) -> dict:
    """Run every stage in order and write the experiment manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = plan.corpus
    corpus, waves = generate_corpus(
        c.n_utts, c.phonemes, c.speakers, derive_seed(plan.seed, "corpus"), out / "corpus", c.min_seconds, c.max_seconds, threads
    )
    manifest = {
        "preset": plan.name,
        "plan": plan.to_json(),
        "plan_digest": plan.digest(),
        "seed": plan.seed,
        "corpus": {
            "manifest": _rel(out / "corpus" / "corpus.json", out),
            "waveforms": _rel(out / "corpus" / corpus.waveform_file, out),
        },
        "stages": [],
    }
    for key in ("manifest", "waveforms"):
        p = out / manifest["corpus"][key]
        manifest["corpus"][key] = {"path": _rel(p, out), "sha256": fileio.file_digest(p)}

    prev = None
    for i, stage in enumerate(plan.stages, start=1):
        log.info("%s: stage %d (%s, target=%s)", plan.name, i, stage.model, stage.target)
        art = run_iteration(stage, i, plan, corpus, waves, out, prev, threads)
        manifest["stages"].append(
            {
                "name": art.name,
                "seed": art.seed,
                "spec": asdict(stage),
                "model_config": art.model_config.to_dict(),
                "artifacts": {k: {"path": _rel(p, out), "sha256": fileio.file_digest(p)} for k, p in art.files.items()},
                "metrics": art.metrics,
            }
        )
        _write_manifest(out, manifest)
        prev = art
    _write_manifest(out, manifest)
    return manifest


def _write_manifest(out: Path, manifest: dict) -> None:
    with fileio.atomic_write(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_manifest(path: str | Path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh), path.parent


def append_probe(path: str | Path, checkpoint: str, cfg: ProbeConfig, result: ProbeResult) -> None:
    """Record a standalone probe run in an existing manifest."""
    manifest, root = load_manifest(path)
    entry = {"checkpoint": checkpoint, "seed": cfg.seed, "steps": cfg.steps, **result.to_json()}
    manifest.setdefault("probes", []).append(entry)
    _write_manifest(root, manifest)


def verify_manifest(path: str | Path) -> list[str]:
    """Raise if any referenced file is missing or its digest changed; return checked paths."""
    manifest, root = load_manifest(path)
    refs = list(manifest["corpus"].values())
    for st in manifest["stages"]:
        refs.extend(st["artifacts"].values())
    checked = []
    for ref in refs:
        p = root / ref["path"]
        if not p.exists():
            raise DataError(f"manifest references a missing file: {ref['path']}")
        if fileio.file_digest(p) != ref["sha256"]:
            raise DataError(f"digest mismatch for {ref['path']}")
        checked.append(ref["path"])
    return checked


# reporting ---------------------------------------------------------------------

REPORT_COLUMNS = ("preset", "stage", "model", "target", "loss_mode", "params", "final_loss", "phoneme_acc", "speaker_acc")


def _stage_row(manifest: dict, st: dict) -> dict:
    mc, spec, m = st["model_config"], st["spec"], st["metrics"]
    target = "mfcc" if spec["target"] == "mfcc" else f"prev@L{spec['layer']}"
    if spec["label_mode"] == "soft":
        target += f" soft(tau={spec['tau']:g})"
    loss = spec["loss_mode"] + (f"({spec['feat_weight']:g})" if spec["loss_mode"] == "mixed" else "")
    row = {
        "preset": manifest["preset"],
        "stage": st["name"],
        "model": f"L{mc['L']}xD{mc['D']}",
        "target": target,
        "loss_mode": loss,
        "params": m["params"],
        "final_loss": m["final_loss"],
    }
    for task in ("phoneme", "speaker"):
        if f"{task}_acc" in m:
            row[f"{task}_acc"] = m[f"{task}_acc"]
    return row


def report(paths: list[str | Path], as_json: bool = False) -> str | dict:
    """Per-stage table for every manifest, then final-stage rankings when several are given."""
    manifests = [load_manifest(p)[0] for p in paths]
    rows = [_stage_row(m, st) for m in manifests for st in m["stages"]]
    rankings = {}
    finals = [(m["preset"], m["stages"][-1]["metrics"]) for m in manifests if m["stages"]]
    for task in ("phoneme", "speaker"):
        results = [(name, ProbeResult(task, met[f"{task}_acc"])) for name, met in finals if f"{task}_acc" in met]
        if len(results) >= 2:
            rankings[task] = compare(results)
    probes = [{"preset": m["preset"], **p} for m in manifests for p in m.get("probes", [])]
    if as_json:
        return {"stages": rows, "rankings": rankings, "probes": probes}
    parts = [format_table(rows, REPORT_COLUMNS)]
    if probes:
        parts.append("\nstandalone probes")
        parts.append(format_table(probes, ("preset", "checkpoint", "task", "seed", "accuracy")))
    for task, ranked in rankings.items():
        parts.append(f"\nfinal-stage {task} accuracy (delta vs best)")
        parts.append(format_table(ranked, ("name", "accuracy", "delta")))
    parts.append("\nspeaker accuracy stands in for both speaker identification and verification (no EER at this scale)")
    return "\n".join(parts)


def directional_comparison(dice_manifest: str | Path, scratch_manifest: str | Path, margin: float = 0.02) -> dict:
    """Stage-2 phoneme accuracy of a distilled student against the scratch-trained lower bound."""
    dice, _ = load_manifest(dice_manifest)
    scratch, _ = load_manifest(scratch_manifest)
    a = dice["stages"][1]["metrics"]["phoneme_acc"]
    b = scratch["stages"][1]["metrics"]["phoneme_acc"]
    return {"dice": a, "scratch": b, "delta": a - b, "holds": a >= b - margin}


__all__ = [
    "CorpusSpec",
    "IterationPlan",
    "PRESETS",
    "StageSpec",
    "append_probe",
    "apply_overrides",
    "derive_seed",
    "directional_comparison",
    "load_manifest",
    "preset",
    "report",
    "run_iteration",
    "run_plan",
    "verify_manifest",
]
