"""File formats: Middlebury ``.flo``, PNG frames, and the D/G container."""

from __future__ import annotations

import csv
import os
import struct

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
CONTAINER_MAGIC = b"DSDOFv01"
MODES = ("l21", "l2", "l21clip")


class FormatError(ValueError):
    """Raised for malformed or truncated files."""


def write_flo(flow: np.ndarray, path) -> None:
    """Write a ``(n1, n2, 2)`` flow in ``(v1, v2)`` order as Middlebury ``.flo``.

    The file stores ``(u, v) = (v2, v1)`` as little-endian float32.
    """
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (n1, n2, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    n1, n2 = flow.shape[:2]
    uv = np.empty((n1, n2, 2), dtype="<f4")
    uv[..., 0] = flow[..., 1]
    uv[..., 1] = flow[..., 0]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, n2, n1))
        fh.write(uv.tobytes())


def read_flo(path) -> np.ndarray:
    """Read a Middlebury ``.flo`` file into a float64 ``(n1, n2, 2)`` array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    magic, width, height = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid size {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} < {expected} bytes)")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    uv = uv.reshape(height, width, 2)
    flow = np.empty((height, width, 2))
    flow[..., 0] = uv[..., 1]
    flow[..., 1] = uv[..., 0]
    return flow


def read_png(path) -> np.ndarray:
    """Load an 8- or 16-bit PNG as float64 in [0, 1]; gray stays 2-D."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            return np.clip(arr, 0.0, 1.0)
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def write_png(frame: np.ndarray, path) -> None:
    """Write a [0, 1] frame as 8-bit PNG."""
    Image.fromarray(to_uint8(frame)).save(path, format="PNG")


def write_png16(img: np.ndarray, path) -> None:
    """Write a [0, 1] 2-D array as 16-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(img) * 65535.0), 0, 65535).astype("<u2")
    Image.fromarray(arr).save(path, format="PNG")  # uint16 maps to mode I;16


def write_mask(mask: np.ndarray, path) -> None:
    """Write a boolean mask as 1-bit PNG."""
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, format="PNG")


def save_decomposition(path, D: np.ndarray, G: np.ndarray, n1: int, n2: int,
                       mode: str = "l21") -> None:
    """Write D (2T x K) and G (K x n1*n2) to the binary container."""
    D = np.asarray(D, dtype="<f8")
    G = np.asarray(G, dtype="<f8")
    two_t, K = D.shape
    if two_t % 2 or G.shape != (K, n1 * n2):
        raise ValueError(f"inconsistent shapes D{D.shape}, G{G.shape}, grid {n1}x{n2}")
    header = CONTAINER_MAGIC + struct.pack("<5I", two_t // 2, n1, n2, K, MODES.index(mode))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(D).tobytes())
        fh.write(np.ascontiguousarray(G).tobytes())


def load_decomposition(path):
    """Read the container; returns ``(D, G, n1, n2, mode)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 28 or raw[:8] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a decomposition container")
    T, n1, n2, K, mode = struct.unpack("<5I", raw[8:28])
    if mode >= len(MODES):
        raise FormatError(f"{path}: unknown mode {mode}")
    nd = 2 * T * K
    ng = K * n1 * n2
    if len(raw) != 28 + 8 * (nd + ng):
        raise FormatError(f"{path}: payload size mismatch")
    D = np.frombuffer(raw, dtype="<f8", count=nd, offset=28).reshape(2 * T, K).astype(np.float64)
    G = np.frombuffer(raw, dtype="<f8", count=ng, offset=28 + 8 * nd).reshape(K, n1 * n2)
    return D, G.astype(np.float64), n1, n2, MODES[mode]


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def list_files(directory, suffix):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(suffix))
    return [os.path.join(directory, n) for n in names]
