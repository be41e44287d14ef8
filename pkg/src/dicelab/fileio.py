"""Binary artifact formats (little-endian) and atomic file writes.

Formats
-------
feature dump   b"DFEA" u32 dim u32 count, then per utterance: u32 id, u32 T, T*dim f32
codebook       b"DCBK" u32 K u32 dim, K*dim f32, f64 inertia, u64 seed, u32 iterations, u64 samples
hard labels    b"DHLB" u32 count, then per utterance: u32 id, u32 T, T u16
soft labels    b"DSLB" f32 tau u32 count, then per utterance: u32 id, u32 T, u32 K, T*K f32
checkpoint     b"DICE" u32 version, u32 len + JSON header (model config and metadata),
               u32 n_tensors, then per tensor: u32 name_len, name, u32 ndim, ndim*u32 shape, f32 data
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import DataError, MissingArtifactError

CHECKPOINT_VERSION = 1


@contextlib.contextmanager
def atomic_write(path: str | Path, mode: str = "wb") -> Iterator:
    """Write to a temp file beside ``path`` and rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, encoding="utf-8" if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _open(path: str | Path) -> BinaryIO:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"file not found: {path}")
    return open(path, "rb")


def _read(fh: BinaryIO, fmt: str):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise DataError(f"truncated file {getattr(fh, 'name', '')}")
    return struct.unpack(fmt, buf)


def _read_array(fh: BinaryIO, dtype: str, count: int) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    buf = fh.read(itemsize * count)
    if len(buf) != itemsize * count:
        raise DataError(f"truncated file {getattr(fh, 'name', '')}")
    return np.frombuffer(buf, dtype=dtype).copy()


def _check_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(4)
    if got != magic:
        raise DataError(f"{getattr(fh, 'name', 'file')}: bad magic {got!r}, expected {magic!r}")


# feature dumps -----------------------------------------------------------------


def write_features(path: str | Path, feats: list[np.ndarray], ids: list[int] | None = None) -> None:
    if not feats:
        raise DataError("empty feature dump")
    dim = feats[0].shape[1]
    ids = list(range(len(feats))) if ids is None else ids
    with atomic_write(path) as fh:
        fh.write(b"DFEA" + struct.pack("<II", dim, len(feats)))
        for uid, f in zip(ids, feats):
            if f.ndim != 2 or f.shape[1] != dim:
                raise DataError(f"feature dump: utterance {uid} has shape {f.shape}, dim {dim}")
            fh.write(struct.pack("<II", uid, f.shape[0]))
            fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_features(path: str | Path) -> tuple[list[int], list[np.ndarray]]:
    with _open(path) as fh:
        _check_magic(fh, b"DFEA")
        dim, count = _read(fh, "<II")
        ids, feats = [], []
        for _ in range(count):
            uid, T = _read(fh, "<II")
            ids.append(uid)
            feats.append(_read_array(fh, "<f4", T * dim).reshape(T, dim))
    return ids, feats


# labels ------------------------------------------------------------------------


def write_hard_labels(path: str | Path, labels: list[np.ndarray], ids: list[int]) -> None:
    with atomic_write(path) as fh:
        fh.write(b"DHLB" + struct.pack("<I", len(labels)))
        for uid, z in zip(ids, labels):
            fh.write(struct.pack("<II", uid, len(z)))
            fh.write(np.asarray(z, dtype="<u2").tobytes())


def read_hard_labels(path: str | Path) -> tuple[list[int], list[np.ndarray]]:
    with _open(path) as fh:
        _check_magic(fh, b"DHLB")
        (count,) = _read(fh, "<I")
        ids, labels = [], []
        for _ in range(count):
            uid, T = _read(fh, "<II")
            ids.append(uid)
            labels.append(_read_array(fh, "<u2", T).astype(np.int64))
    return ids, labels


def write_soft_labels(path: str | Path, probs: list[np.ndarray], ids: list[int], tau: float) -> None:
    with atomic_write(path) as fh:
        fh.write(b"DSLB" + struct.pack("<fI", tau, len(probs)))
        for uid, p in zip(ids, probs):
            fh.write(struct.pack("<III", uid, p.shape[0], p.shape[1]))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_soft_labels(path: str | Path) -> tuple[list[int], list[np.ndarray], float]:
    with _open(path) as fh:
        _check_magic(fh, b"DSLB")
        tau, count = _read(fh, "<fI")
        ids, probs = [], []
        for _ in range(count):
            uid, T, K = _read(fh, "<III")
            ids.append(uid)
            probs.append(_read_array(fh, "<f4", T * K).reshape(T, K))
    return ids, probs, tau


# codebooks ---------------------------------------------------------------------


def write_codebook(path: str | Path, centroids: np.ndarray, inertia: float, seed: int, iterations: int, samples: int) -> None:
    K, dim = centroids.shape
    with atomic_write(path) as fh:
        fh.write(b"DCBK" + struct.pack("<II", K, dim))
        fh.write(np.ascontiguousarray(centroids, dtype="<f4").tobytes())
        fh.write(struct.pack("<dQIQ", inertia, seed, iterations, samples))


def read_codebook(path: str | Path) -> dict:
    with _open(path) as fh:
        _check_magic(fh, b"DCBK")
        K, dim = _read(fh, "<II")
        centroids = _read_array(fh, "<f4", K * dim).reshape(K, dim)
        inertia, seed, iterations, samples = _read(fh, "<dQIQ")
    return dict(centroids=centroids, inertia=inertia, seed=seed, iterations=iterations, samples=samples)


# checkpoints -------------------------------------------------------------------


def write_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with atomic_write(path) as fh:
        fh.write(b"DICE" + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.array(tensors[name], dtype="<f4", order="C")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with _open(path) as fh:
        _check_magic(fh, b"DICE")
        version, hlen = _read(fh, "<II")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise DataError(f"truncated file {path}")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataError(f"{path}: corrupt checkpoint header") from None
        (n,) = _read(fh, "<I")
        tensors = {}
        for _ in range(n):
            (klen,) = _read(fh, "<I")
            name = _read_array(fh, "u1", klen).tobytes().decode("utf-8", errors="replace")
            (ndim,) = _read(fh, "<I")
            shape = _read(fh, f"<{ndim}I") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = _read_array(fh, "<f4", count).reshape(shape)
    return header, tensors
