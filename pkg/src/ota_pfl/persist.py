"""Atomic file output and the versioned binary model container.

Model files carry a magic string, a format version, the dimensions, the
global model, and every personal model, all little-endian float64, so
interrupted sweeps can be resumed and results re-read unambiguously.
"""

import os
import struct
import tempfile

import numpy as np

MODEL_MAGIC = b"OTAPFLM\x00"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")  # magic, version, d, K


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file plus rename so readers never see partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_models(path, w: np.ndarray, personal: np.ndarray | None = None) -> None:
    """Serialize the global model and the stacked personal models."""
    w = np.asarray(w, dtype="<f8")
    if w.ndim != 1:
        raise ValueError("global model must be a 1-D vector")
    if personal is None:
        personal = np.empty((0, w.shape[0]))
    personal = np.asarray(personal, dtype="<f8")
    if personal.ndim != 2 or personal.shape[1] != w.shape[0]:
        raise ValueError(f"personal models must be (K, {w.shape[0]}), got {personal.shape}")
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, w.shape[0], personal.shape[0])
    atomic_write_bytes(path, header + w.tobytes() + personal.tobytes())


def load_models(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a model container back as (global model, personal models)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated model file")
    magic, version, d, k = _HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {magic!r})")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    expected = _HEADER.size + 8 * d * (k + 1)
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    return flat[:d].copy(), flat[d:].reshape(k, d).copy()
