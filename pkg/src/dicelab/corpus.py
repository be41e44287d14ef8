"""Deterministic synthetic speech-like corpus with frame-level ground truth.

Each utterance is a chain of 100-400 ms segments. A segment's pseudo-phoneme
picks a formant-like template (a bank of 2-3 sinusoids); the speaker shifts
every template frequency by a fixed factor and adds a pitch tone and a
spectral tilt. White noise is added at 20 dB SNR. Frame ``t`` covers samples
``[320 t, 320 t + 320)`` and takes the pseudo-phoneme of the segment holding
its centre sample.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, MissingArtifactError
from .fileio import atomic_write

SAMPLE_RATE = 16000
HOP = 320
MAX_PHONEMES = 64
MAX_SPEAKERS = 64
SNR_DB = 20.0

# SeedSequence spawn keys; kept distinct from utterance ids
_TEMPLATE_KEY = 0xC0DE
_SPEAKER_KEY = 0x5EED


@dataclass
class Utterance:
    samples: np.ndarray
    frame_truth: np.ndarray
    speaker_id: int
    seed: int

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def num_frames(self) -> int:
        return self.num_samples // HOP


@dataclass
class UttRecord:
    utterance_id: int
    seed: int
    speaker_id: int
    num_samples: int
    offset: int
    frame_truth: list[int] = field(repr=False)

    @property
    def num_frames(self) -> int:
        return self.num_samples // HOP


@dataclass
class CorpusManifest:
    seed: int
    phonemes: int
    speakers: int
    utterances: list[UttRecord]
    min_seconds: float = 1.0
    max_seconds: float = 4.0
    waveform_file: str = "waveforms.f32"
    root: Path | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.utterances)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d

    @classmethod
    def from_json(cls, d: dict, root: Path | None = None) -> "CorpusManifest":
        utts = [UttRecord(**u) for u in d["utterances"]]
        ids = [u.utterance_id for u in utts]
        if ids != list(range(len(utts))):
            raise DataError("corpus manifest: utterance ids must be dense from 0")
        fields = {k: v for k, v in d.items() if k != "utterances"}
        return cls(utterances=utts, root=root, **fields)

    def waveform_path(self) -> Path:
        if self.root is None:
            raise DataError("corpus manifest has no root directory")
        return self.root / self.waveform_file

    def load(self, utt_id: int) -> np.ndarray:
        rec = self.utterances[utt_id]
        path = self.waveform_path()
        if not path.exists():
            raise MissingArtifactError(f"waveform store not found: {path}")
        return np.fromfile(path, dtype="<f4", count=rec.num_samples, offset=rec.offset)

    def load_all(self) -> list[np.ndarray]:
        path = self.waveform_path()
        if not path.exists():
            raise MissingArtifactError(f"waveform store not found: {path}")
        blob = np.fromfile(path, dtype="<f4")
        return [blob[r.offset // 4 : r.offset // 4 + r.num_samples] for r in self.utterances]

    def truth(self, utt_id: int) -> np.ndarray:
        return np.asarray(self.utterances[utt_id].frame_truth, dtype=np.int64)


@dataclass(frozen=True)
class Templates:
    freqs: np.ndarray  # (P, 3) Hz; unused partials carry amplitude 0
    amps: np.ndarray  # (P, 3)
    speaker_shift: np.ndarray  # (S,) multiplicative frequency factor
    speaker_pitch: np.ndarray  # (S,) Hz
    speaker_tilt: np.ndarray  # (S,) amplitude exponent per partial index


def make_templates(seed: int, phonemes: int, speakers: int) -> Templates:
    rng = np.random.default_rng([seed, _TEMPLATE_KEY])
    # formant centres on a jittered log grid so templates stay distinguishable
    grid = np.geomspace(250.0, 3600.0, 3 * phonemes)
    order = rng.permutation(3 * phonemes).reshape(phonemes, 3)
    freqs = np.sort(grid[order] * rng.uniform(0.97, 1.03, size=(phonemes, 3)), axis=1)
    amps = rng.uniform(0.5, 1.0, size=(phonemes, 3))
    n_partials = rng.integers(2, 4, size=phonemes)
    amps[n_partials == 2, 2] = 0.0
    srng = np.random.default_rng([seed, _SPEAKER_KEY])
    return Templates(
        freqs=freqs,
        amps=amps,
        speaker_shift=srng.uniform(0.9, 1.1, size=speakers),
        speaker_pitch=srng.uniform(90.0, 260.0, size=speakers),
        speaker_tilt=srng.uniform(-0.6, 0.6, size=speakers),
    )


def utterance_seed(corpus_seed: int, utt_id: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, utt_id]).generate_state(1, dtype=np.uint64)[0])


def frame_truth_from_segments(starts: np.ndarray, labels: np.ndarray, num_samples: int) -> np.ndarray:
    """Per-frame label of the segment containing each frame's centre sample."""
    centres = np.arange(num_samples // HOP) * HOP + HOP // 2
    idx = np.searchsorted(np.asarray(starts), centres, side="right") - 1
    return np.asarray(labels)[idx]


def synthesize(
    seed: int,
    speaker_id: int,
    templates: Templates,
    min_seconds: float = 1.0,
    max_seconds: float = 4.0,
) -> Utterance:
    """Render one utterance; bit-identical for identical ``(seed, speaker_id, templates)``."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(int(min_seconds * SAMPLE_RATE), int(max_seconds * SAMPLE_RATE) + 1))
    P = templates.freqs.shape[0]

    starts, labels = [], []
    pos = 0
    while pos < n:
        starts.append(pos)
        labels.append(int(rng.integers(P)))
        pos += int(rng.integers(int(0.1 * SAMPLE_RATE), int(0.4 * SAMPLE_RATE) + 1))
    starts.append(n)

    t = np.arange(n, dtype=np.float64) / SAMPLE_RATE
    shift = templates.speaker_shift[speaker_id]
    tilt = templates.speaker_tilt[speaker_id]
    pitch = templates.speaker_pitch[speaker_id]
    clean = 0.3 * np.sin(2 * np.pi * pitch * t + rng.uniform(0, 2 * np.pi))
    for k, lab in enumerate(labels):
        a, b = starts[k], starts[k + 1]
        seg_t = t[a:b]
        phases = rng.uniform(0, 2 * np.pi, size=3)
        for j in range(3):
            amp = templates.amps[lab, j] * (j + 1.0) ** tilt
            if amp == 0.0:
                continue
            clean[a:b] += amp * np.sin(2 * np.pi * templates.freqs[lab, j] * shift * seg_t + phases[j])

    clean /= np.max(np.abs(clean)) + 1e-12
    clean *= 0.8
    signal_power = np.mean(clean**2)
    noise = rng.standard_normal(n) * np.sqrt(signal_power / 10 ** (SNR_DB / 10))
    samples = np.clip(clean + noise, -1.0, 1.0).astype(np.float32)
    truth = frame_truth_from_segments(np.array(starts[:-1]), np.array(labels), n)
    return Utterance(samples=samples, frame_truth=truth.astype(np.int64), speaker_id=speaker_id, seed=seed)


def generate_corpus(
    n_utts: int,
    phonemes: int,
    speakers: int,
    seed: int,
    out_dir: str | Path | None = None,
    min_seconds: float = 1.0,
    max_seconds: float = 4.0,
    threads: int = 1,
) -> tuple[CorpusManifest, list[np.ndarray]]:
    """Generate ``n_utts`` utterances; write the waveform store and manifest if ``out_dir`` is given."""
    if n_utts < 1 or phonemes < 2 or speakers < 1:
        raise ConfigError("need n_utts >= 1, phonemes >= 2, speakers >= 1")
    if phonemes > MAX_PHONEMES or speakers > MAX_SPEAKERS:
        raise ConfigError(f"phonemes and speakers are capped at {MAX_PHONEMES}")
    if not 0.03 <= min_seconds <= max_seconds:
        raise ConfigError("need 0.03 <= min_seconds <= max_seconds")
    templates = make_templates(seed, phonemes, speakers)

    def one(i: int) -> Utterance:
        return synthesize(utterance_seed(seed, i), i % speakers, templates, min_seconds, max_seconds)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        utts = list(pool.map(one, range(n_utts)))

    records, offset = [], 0
    for i, u in enumerate(utts):
        records.append(UttRecord(i, u.seed, u.speaker_id, u.num_samples, offset, u.frame_truth.tolist()))
        offset += 4 * u.num_samples
    manifest = CorpusManifest(seed, phonemes, speakers, records, min_seconds, max_seconds)
    waves = [u.samples for u in utts]
    if out_dir is not None:
        save_corpus(manifest, waves, out_dir)
    return manifest, waves


def save_corpus(manifest: CorpusManifest, waves: list[np.ndarray], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / manifest.waveform_file) as fh:
        for w in waves:
            fh.write(np.asarray(w, dtype="<f4").tobytes())
    path = out / "corpus.json"
    with atomic_write(path, "w") as fh:
        json.dump(manifest.to_json(), fh)
    manifest.root = out
    return path


def load_corpus(path: str | Path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.json"
    if not path.exists():
        raise MissingArtifactError(f"corpus manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return CorpusManifest.from_json(json.load(fh), root=path.parent)
