"""Flat binary formats: embedding matrices, projection-head checkpoints, PPM images."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"
HEAD_MAGIC = b"HEAD"


class FormatError(ValueError):
    pass


def _write_matrix(path: str | Path, magic: bytes, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def _read_matrix(path: str | Path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    rows, cols = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)


def write_embeddings(path: str | Path, embeddings: np.ndarray) -> None:
    """``EMB1`` header, u32 count, u32 dim, then count*dim little-endian f32."""
    _write_matrix(path, EMB_MAGIC, embeddings)


def read_embeddings(path: str | Path) -> np.ndarray:
    return _read_matrix(path, EMB_MAGIC)


def write_head(path: str | Path, weight: np.ndarray) -> None:
    """``HEAD`` header, u32 out_dim, u32 in_dim, then the weights as f32."""
    _write_matrix(path, HEAD_MAGIC, weight)


def read_head(path: str | Path) -> np.ndarray:
    return _read_matrix(path, HEAD_MAGIC)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an H x W x 3 uint8 image")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError(f"{path}: only binary 8-bit PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()
