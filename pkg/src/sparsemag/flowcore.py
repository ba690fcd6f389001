"""Dense optical flow between frames.

Frames are float arrays in [0, 1] of shape ``(n1, n2)`` or ``(n1, n2, 3)``.
Flow fields are float arrays of shape ``(n1, n2, 2)`` holding ``(v1, v2)``
per pixel: ``v1`` is the vertical (row) displacement and ``v2`` the
horizontal (column) displacement, both in pixels. A flow volume stacks
``T`` fields into shape ``(T, n1, n2, 2)``.

The estimator is a coarse-to-fine Horn-Schunck solver: gray-value
constancy linearized around the current estimate, a quadratic smoothness
prior, a fixed number of Jacobi sweeps per level and a few backward-warp
updates per level to cope with displacements beyond one pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .io import read_flo, write_flo  # noqa: F401  (re-exported)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FlowParams:
    """Parameters of the variational flow solver.

    ``lam`` weights the smoothness term against the data term (intensities
    are in [0, 1]).
    """

    lam: float = 0.05
    pyramid_levels: int = 4
    scale_factor: float = 0.5
    iterations_per_level: int = 100
    warp_updates_per_level: int = 3

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if not 0.4 < self.scale_factor < 0.95:
            raise ValueError(f"scale_factor must lie in (0.4, 0.95), got {self.scale_factor}")
        for name in ("pyramid_levels", "iterations_per_level", "warp_updates_per_level"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Luminance of an RGB frame; gray frames pass through as float64."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        if frame.shape[2] == 1:
            return frame[..., 0]
        if frame.shape[2] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {frame.shape[2]}")
        return frame @ LUMA_WEIGHTS
    if frame.ndim != 2:
        raise ValueError(f"frame must be 2-D or 3-D, got shape {frame.shape}")
    return frame


def _check_pair(f_a, f_b):
    f_a = np.asarray(f_a)
    f_b = np.asarray(f_b)
    if f_a.size == 0 or f_b.size == 0:
        raise ValueError("empty frame")
    if f_a.shape != f_b.shape:
        raise ValueError(f"frame shapes differ: {f_a.shape} vs {f_b.shape}")


def _check_flow(frame, flow):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2 or flow.shape[:2] != np.shape(frame)[:2]:
        raise ValueError(
            f"flow of shape {flow.shape} does not match frame of shape {np.shape(frame)}"
        )


def backward_warp(f: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``f`` at ``x - flow(x)`` with bilinear interpolation.

    Sample positions outside the grid are clamped to the border.
    """
    f = np.asarray(f, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_flow(f, flow)
    if not flow.any():
        return f.copy()
    return _sample(f, -flow)


def _sample(f, disp):
    """Bilinear sample of ``f`` at ``x + disp(x)``, clamped to the grid."""
    n1, n2 = f.shape[:2]
    rows, cols = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    r = np.clip(rows + disp[..., 0], 0, n1 - 1)
    c = np.clip(cols + disp[..., 1], 0, n2 - 1)
    if f.ndim == 2:
        return ndimage.map_coordinates(f, [r, c], order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(f[..., ch], [r, c], order=1, mode="nearest")
         for ch in range(f.shape[2])],
        axis=-1,
    )


def _resize(img, shape):
    """Bilinear resize of a 2-D array to ``shape`` (pixel-center aligned)."""
    n1, n2 = img.shape
    m1, m2 = shape
    r = np.clip((np.arange(m1) + 0.5) * n1 / m1 - 0.5, 0, n1 - 1)
    c = np.clip((np.arange(m2) + 0.5) * n2 / m2 - 0.5, 0, n2 - 1)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def _pyramid_shapes(shape, levels, scale):
    shapes = [shape]
    for _ in range(levels - 1):
        n1, n2 = shapes[-1]
        m1 = max(int(round(n1 * scale)), 1)
        m2 = max(int(round(n2 * scale)), 1)
        if min(m1, m2) < 8:
            break
        shapes.append((m1, m2))
    return shapes


def _build_pyramid(img, shapes, scale):
    sigma = np.sqrt(1.0 / scale**2 - 1.0) / 2.0
    levels = [img]
    cur = img
    for shape in shapes[1:]:
        cur = _resize(ndimage.gaussian_filter(cur, sigma, mode="nearest"), shape)
        levels.append(cur)
    return levels


def _gradients(img):
    """Central differences with replicated borders; returns (d/dx1, d/dx2)."""
    p = np.pad(img, 1, mode="edge")
    g1 = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    g2 = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    return g1, g2


@numba.njit(cache=True)
def _jacobi(u1, u2, ix1, ix2, it, alpha2, iterations):
    """Horn-Schunck Jacobi sweeps around the linearization point (u1, u2).

    ``it`` already holds the temporal difference at the warped estimate, so
    the residual of the linearized constancy equation is
    ``it + ix1*(w1 - u1) + ix2*(w2 - u2)`` for the new flow (w1, w2).
    """
    n1, n2 = u1.shape
    w1 = u1.copy()
    w2 = u2.copy()
    nw1 = np.empty_like(w1)
    nw2 = np.empty_like(w2)
    # constant part of the residual: it - ix . u
    c = it - ix1 * u1 - ix2 * u2
    denom = alpha2 + ix1 * ix1 + ix2 * ix2
    for _ in range(iterations):
        for i in range(n1):
            im = i - 1 if i > 0 else 0
            ip = i + 1 if i < n1 - 1 else n1 - 1
            for j in range(n2):
                jm = j - 1 if j > 0 else 0
                jp = j + 1 if j < n2 - 1 else n2 - 1
                a1 = 0.25 * (w1[im, j] + w1[ip, j] + w1[i, jm] + w1[i, jp])
                a2 = 0.25 * (w2[im, j] + w2[ip, j] + w2[i, jm] + w2[i, jp])
                t = (ix1[i, j] * a1 + ix2[i, j] * a2 + c[i, j]) / denom[i, j]
                nw1[i, j] = a1 - ix1[i, j] * t
                nw2[i, j] = a2 - ix2[i, j] * t
        w1, nw1 = nw1, w1
        w2, nw2 = nw2, w2
    return w1, w2


def _solve_level(f_a, f_b, flow, params):
    alpha2 = 4.0 * params.lam
    u1 = np.ascontiguousarray(flow[..., 0])
    u2 = np.ascontiguousarray(flow[..., 1])
    ga1, ga2 = _gradients(f_a)
    for _ in range(params.warp_updates_per_level):
        # f_b pulled back onto f_a's grid: f_b(x + u)
        fbw = _sample(f_b, np.stack([u1, u2], axis=-1))
        gb1, gb2 = _gradients(fbw)
        ix1 = 0.5 * (ga1 + gb1)
        ix2 = 0.5 * (ga2 + gb2)
        it = fbw - f_a
        u1, u2 = _jacobi(u1, u2, ix1, ix2, it, alpha2, params.iterations_per_level)
    return np.stack([u1, u2], axis=-1)


def estimate_flow(f_a, f_b, params: FlowParams | None = None, init=None) -> np.ndarray:
    """Estimate the flow ``v`` with ``f_b(x + v(x)) ~ f_a(x)``.

    Parameters
    ----------
    f_a, f_b : ndarray
        Frames of identical shape; RGB input is converted to luminance.
    params : FlowParams, optional
        Solver settings; defaults to ``FlowParams()``.
    init : ndarray, optional
        Initial flow at full resolution, shape ``(n1, n2, 2)``.

    Returns
    -------
    ndarray of shape ``(n1, n2, 2)`` with ``(v1, v2)`` per pixel.
    """
    params = params or FlowParams()
    _check_pair(f_a, f_b)
    a = to_gray(f_a)
    b = to_gray(f_b)
    n1, n2 = a.shape
    shapes = _pyramid_shapes((n1, n2), params.pyramid_levels, params.scale_factor)
    pyr_a = _build_pyramid(a, shapes, params.scale_factor)
    pyr_b = _build_pyramid(b, shapes, params.scale_factor)

    coarse = shapes[-1]
    if init is None:
        flow = np.zeros(coarse + (2,))
    else:
        init = np.asarray(init, dtype=np.float64)
        _check_flow(a, init)
        flow = _resize_flow(init, coarse)

    for lvl in range(len(shapes) - 1, -1, -1):
        if flow.shape[:2] != shapes[lvl]:
            flow = _resize_flow(flow, shapes[lvl])
        flow = _solve_level(pyr_a[lvl], pyr_b[lvl], flow, params)
    return np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)


def _resize_flow(flow, shape):
    m1, m2 = shape
    n1, n2 = flow.shape[:2]
    out = np.empty((m1, m2, 2))
    out[..., 0] = _resize(flow[..., 0], shape) * (m1 / n1)
    out[..., 1] = _resize(flow[..., 1], shape) * (m2 / n2)
    return out


def estimate_flow_volume(frames, params: FlowParams | None = None,
                         mode: str = "consecutive") -> np.ndarray:
    """Flow fields for a frame sequence, shape ``(len(frames) - 1, n1, n2, 2)``.

    ``mode="consecutive"`` estimates frame t -> t+1; ``mode="reference"``
    estimates frame 1 -> t+1, seeding each solve with the previous field.
    """
    if mode not in ("consecutive", "reference"):
        raise ValueError(f"unknown flow mode {mode!r}")
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    shape = np.shape(frames[0])
    for i, f in enumerate(frames):
        if np.shape(f) != shape:
            raise ValueError(f"frame {i} has shape {np.shape(f)}, expected {shape}")
    params = params or FlowParams()
    fields = []
    prev = None
    for t in range(1, len(frames)):
        if mode == "consecutive":
            fields.append(estimate_flow(frames[t - 1], frames[t], params))
        else:
            prev = estimate_flow(frames[0], frames[t], params, init=prev)
            fields.append(prev)
    return np.stack(fields)
