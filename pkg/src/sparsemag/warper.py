"""Motion amplification and triangle-mesh forward warping.

The source frame is triangulated with one vertex per pixel center, every
vertex is moved by its flow vector, and each displaced triangle is
rasterized: pixels whose centers fall inside receive the barycentric blend
of the three vertex colors. Shared edges follow a top-left ownership rule
so that neighbouring triangles never both claim a pixel. As with any
half-open fill convention, the undisplaced mesh leaves its last row and
column to the ``fill`` policy. Overlaps are
resolved by an interpolated depth value (the local motion magnitude by
default), ties going to the higher triangle index, which makes the result
independent of the order in which triangles are drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

FLOW_MODES = ("reference", "consecutive")


@dataclass(frozen=True)
class TriangleMesh:
    """``vertices`` are ``(x1, x2)`` positions, ``triangles`` vertex index triples."""

    n1: int
    n2: int
    vertices: np.ndarray
    triangles: np.ndarray


@dataclass(frozen=True)
class MagnifyParams:
    mu: float = 4.0
    selection: tuple = ()
    flow_mode: str = "reference"

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow_mode must be one of {FLOW_MODES}")


def triangulate_grid(n1: int, n2: int) -> TriangleMesh:
    """Split each pixel cell along its ``(x1, x2)-(x1+1, x2+1)`` diagonal.

    Cells are visited row-major, the lower triangle ``(a, b, d)`` first and
    the upper ``(a, d, c)`` second, where ``a=(x1,x2)``, ``b=(x1+1,x2)``,
    ``c=(x1,x2+1)``, ``d=(x1+1,x2+1)``. Both have positive orientation in
    ``(x1, x2)`` coordinates.
    """
    if n1 < 2 or n2 < 2:
        raise ValueError(f"grid must be at least 2x2, got {n1}x{n2}")
    r, c = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    vertices = np.stack([r.ravel(), c.ravel()], axis=1).astype(np.float64)
    idx = np.arange(n1 * n2).reshape(n1, n2)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    cc = idx[:-1, 1:].ravel()
    d = idx[1:, 1:].ravel()
    tris = np.empty((a.size * 2, 3), dtype=np.int64)
    tris[0::2] = np.stack([a, b, d], axis=1)
    tris[1::2] = np.stack([a, d, cc], axis=1)
    return TriangleMesh(n1, n2, vertices, tris)


def depth_from_motion(flow) -> np.ndarray:
    """Per-pixel motion magnitude; stronger motion is drawn on top."""
    flow = np.asarray(flow, dtype=np.float64)
    return np.hypot(flow[..., 0], flow[..., 1])


def amplified_flow(v_t, D, G, selection, mu: float, t: int) -> np.ndarray:
    """``v_t + mu * sum_{k in selection} d^k(t) G^k`` at time ``t`` in ``1..T``.

    ``selection`` holds 0-based column indices of ``D``.
    """
    v_t = np.asarray(v_t, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    n1, n2 = v_t.shape[:2]
    K = D.shape[1]
    sel = [int(k) for k in selection]
    for k in sel:
        if not 0 <= k < K:
            raise IndexError(f"component {k} out of range for K={K}")
    if not 1 <= t <= D.shape[0] // 2:
        raise IndexError(f"time index {t} out of range")
    if G.shape != (K, n1 * n2):
        raise ValueError(f"G has shape {G.shape}, expected {(K, n1 * n2)}")
    if mu == 0 or not sel:
        return v_t.copy()
    extra = D[2 * t - 2:2 * t, sel] @ G[sel]  # (2, n)
    return v_t + mu * extra.T.reshape(n1, n2, 2)


# ---------------------------------------------------------------------------
# rasterizer
# ---------------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _edge(pos, i, j, qr, qc):
    """Edge function of the directed edge i->j at (qr, qc).

    Always evaluated from the lower to the higher vertex index and negated
    when needed, so two triangles sharing an edge see exactly opposite values.
    """
    if i < j:
        return (pos[j, 0] - pos[i, 0]) * (qc - pos[i, 1]) - (pos[j, 1] - pos[i, 1]) * (qr - pos[i, 0])
    return -((pos[i, 0] - pos[j, 0]) * (qc - pos[j, 1]) - (pos[i, 1] - pos[j, 1]) * (qr - pos[j, 0]))


@numba.njit(cache=True, inline="always")
def _owned(pos, i, j, orient):
    """Top-left rule: an on-edge pixel belongs to the triangle whose edge
    direction (after orientation fix-up) is in the half-plane dr > 0 or
    (dr == 0 and dc < 0)."""
    dr = (pos[j, 0] - pos[i, 0]) * orient
    dc = (pos[j, 1] - pos[i, 1]) * orient
    return dr > 0 or (dr == 0 and dc < 0)


@numba.njit(cache=True)
def _raster_band(pos, tris, colors, depth, row_lo, row_hi, out, zbuf, tbuf):
    n1, n2, nch = out.shape
    for t in range(tris.shape[0]):
        i0 = tris[t, 0]
        i1 = tris[t, 1]
        i2 = tris[t, 2]
        rmin = min(pos[i0, 0], pos[i1, 0], pos[i2, 0])
        rmax = max(pos[i0, 0], pos[i1, 0], pos[i2, 0])
        r0 = max(int(np.ceil(rmin)), row_lo)
        r1 = min(int(np.floor(rmax)), row_hi - 1)
        if r0 > r1:
            continue
        cmin = min(pos[i0, 1], pos[i1, 1], pos[i2, 1])
        cmax = max(pos[i0, 1], pos[i1, 1], pos[i2, 1])
        c0 = max(int(np.ceil(cmin)), 0)
        c1 = min(int(np.floor(cmax)), n2 - 1)
        if c0 > c1:
            continue
        area = ((pos[i1, 0] - pos[i0, 0]) * (pos[i2, 1] - pos[i0, 1])
                - (pos[i1, 1] - pos[i0, 1]) * (pos[i2, 0] - pos[i0, 0]))
        if area == 0.0:
            continue
        orient = 1.0 if area > 0 else -1.0
        own01 = _owned(pos, i0, i1, orient)
        own12 = _owned(pos, i1, i2, orient)
        own20 = _owned(pos, i2, i0, orient)
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                e01 = orient * _edge(pos, i0, i1, r, c)
                e12 = orient * _edge(pos, i1, i2, r, c)
                e20 = orient * _edge(pos, i2, i0, r, c)
                if e01 < 0 or e12 < 0 or e20 < 0:
                    continue
                if (e01 == 0 and not own01) or (e12 == 0 and not own12) or (e20 == 0 and not own20):
                    continue
                s = e01 + e12 + e20
                if s <= 0:
                    continue
                w0 = e12 / s
                w1 = e20 / s
                w2 = e01 / s
                z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
                if z > zbuf[r, c] or (z == zbuf[r, c] and t > tbuf[r, c]):
                    zbuf[r, c] = z
                    tbuf[r, c] = t
                    for ch in range(nch):
                        out[r, c, ch] = w0 * colors[i0, ch] + w1 * colors[i1, ch] + w2 * colors[i2, ch]


@numba.njit(cache=True, parallel=True)
def _raster_parallel(pos, tris, colors, depth, bounds, out, zbuf, tbuf):
    for b in numba.prange(bounds.shape[0] - 1):
        _raster_band(pos, tris, colors, depth, bounds[b], bounds[b + 1], out, zbuf, tbuf)


def rasterize(mesh: TriangleMesh, positions, colors, depth, parallel: bool = True):
    """Draw the mesh with displaced vertex ``positions``.

    Returns ``(image, covered, winner)`` where ``winner`` holds the index
    of the triangle that set each pixel (-1 where uncovered).
    """
    n1, n2 = mesh.n1, mesh.n2
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(n1 * n2, -1)
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64).ravel()
    out = np.zeros((n1, n2, colors.shape[1]))
    zbuf = np.full((n1, n2), -np.inf)
    tbuf = np.full((n1, n2), -1, dtype=np.int64)
    if parallel:
        bands = max(1, min(n1, 4 * numba.get_num_threads()))
        bounds = np.linspace(0, n1, bands + 1).astype(np.int64)
        _raster_parallel(pos, mesh.triangles, colors, depth, bounds, out, zbuf, tbuf)
    else:
        _raster_band(pos, mesh.triangles, colors, depth, 0, n1, out, zbuf, tbuf)
    return out, tbuf >= 0, tbuf


def forward_warp(f, flow, depth=None, fill: str = "source", return_mask: bool = False,
                 parallel: bool = True):
    """Push ``f`` along ``flow``: ``out(x + flow(x)) = f(x)``.

    ``depth`` defaults to :func:`depth_from_motion`. Pixels no displaced
    triangle reaches take ``f``'s own value (``fill="source"``) or stay 0
    and are flagged in the mask (``fill="hold"``).
    """
    f = np.asarray(f, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    n1, n2 = f.shape[:2]
    if flow.shape != (n1, n2, 2):
        raise ValueError(f"flow of shape {flow.shape} does not match frame {f.shape}")
    if fill not in ("source", "hold"):
        raise ValueError(f"unknown fill {fill!r}")
    if depth is None:
        depth = depth_from_motion(flow)
    elif np.shape(depth) != (n1, n2):
        raise ValueError(f"depth of shape {np.shape(depth)} does not match frame {f.shape}")
    mesh = _mesh_cache(n1, n2)
    positions = mesh.vertices + flow.reshape(-1, 2)
    out, covered, _ = rasterize(mesh, positions, f, depth, parallel=parallel)
    out = out.reshape(f.shape)
    if fill == "source":
        out[~covered] = f[~covered]
    if return_mask:
        return out, covered
    return out


_MESHES: dict = {}


def _mesh_cache(n1, n2):
    key = (n1, n2)
    if key not in _MESHES:
        _MESHES.clear()
        _MESHES[key] = triangulate_grid(n1, n2)
    return _MESHES[key]


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

def _check_sequence(frames, vol):
    vol = np.asarray(vol, dtype=np.float64)
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    if vol.ndim != 4 or vol.shape[0] != len(frames) - 1:
        raise ValueError(f"flow volume of shape {vol.shape} does not match {len(frames)} frames")
    shape = np.shape(frames[0])
    for i, fr in enumerate(frames):
        if np.shape(fr) != shape:
            raise ValueError(f"frame {i} has shape {np.shape(fr)}, expected {shape}")
    if vol.shape[1:3] != shape[:2]:
        raise ValueError(f"flow grid {vol.shape[1:3]} does not match frames {shape[:2]}")
    return vol


def magnify_sequence(frames, vol, D, G, params: MagnifyParams) -> list:
    """Render the sequence with the selected components amplified by ``mu``.

    Reference mode warps frame 1 by ``v~(t)`` for every output frame;
    consecutive mode warps frame ``t`` by ``v~(t)``. Frame 1 is copied.
    """
    vol = _check_sequence(frames, vol)
    T = vol.shape[0]
    if np.shape(D)[0] != 2 * T:
        raise ValueError(f"D has {np.shape(D)[0]} rows, expected {2 * T}")
    out = [np.asarray(frames[0], dtype=np.float64).copy()]
    for t in range(T):
        vt = amplified_flow(vol[t], D, G, params.selection, params.mu, t + 1)
        src = frames[0] if params.flow_mode == "reference" else frames[t]
        out.append(forward_warp(src, vt, depth_from_motion(vt), fill="source"))
    return out


def dewarped_sequence(frames, vol) -> list:
    """Frame 1 carried along reference-mode flows (shading held constant)."""
    vol = _check_sequence(frames, vol)
    out = [np.asarray(frames[0], dtype=np.float64).copy()]
    for t in range(vol.shape[0]):
        out.append(forward_warp(frames[0], vol[t], depth_from_motion(vol[t]), fill="source"))
    return out
