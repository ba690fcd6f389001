"""Synthetic flow volumes and frame sequences with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def gaussian_blob(n1, n2, center, sigma):
    r, c = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    return np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2.0 * sigma**2))


def bump(T, start, length, peak):
    """``sin^2`` activation of ``length`` steps starting at ``start`` with max ``peak``."""
    prof = np.zeros(T)
    k = np.arange(length)
    prof[start:start + length] = peak * np.sin(np.pi * (k + 0.5) / length) ** 2
    return prof / prof.max() * peak


@dataclass
class PlantedFlow:
    """Flow volume ``sum_k G_k(x) s_k(t) u_k`` plus noise.

    ``maps`` has shape ``(K, n1, n2)``, ``speeds`` shape ``(K, T)`` and
    ``directions`` shape ``(K, 2)`` (unit vectors in ``(v1, v2)`` order).
    """

    maps: np.ndarray
    speeds: np.ndarray
    directions: np.ndarray
    noise: float = 0.0
    seed: int = 0
    clean: np.ndarray = field(init=False, repr=False)
    volume: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K, n1, n2 = self.maps.shape
        T = self.speeds.shape[1]
        vol = np.zeros((T, n1, n2, 2))
        for k in range(K):
            for ax in range(2):
                vol[..., ax] += (self.speeds[k, :, None, None] * self.directions[k, ax]
                                 * self.maps[k][None])
        self.clean = vol
        rng = np.random.default_rng(self.seed)
        self.volume = vol + self.noise * rng.standard_normal(vol.shape) if self.noise else vol.copy()

    @property
    def temporal_profiles(self):
        """Planted ``|d^k(t)|`` profiles, shape ``(K, T)``."""
        return np.abs(self.speeds)


def planted_components(n=48, T=40, peaks=(0.3, 0.8, 2.0), sigma=4.0, noise=0.02,
                       seed=0) -> PlantedFlow:
    """Three spatially disjoint blobs, each active in its own 8-step window."""
    centers = [(12, 12), (12, 36), (36, 24)]
    angles = [0.3, 1.9, 4.0]
    maps = np.stack([gaussian_blob(n, n, c, sigma) for c in centers[:len(peaks)]])
    speeds = np.stack([bump(T, 4 + 12 * k, 8, p) for k, p in enumerate(peaks)])
    dirs = np.array([[np.cos(a), np.sin(a)] for a in angles[:len(peaks)]])
    return PlantedFlow(maps, speeds, dirs, noise=noise, seed=seed)


def planted_same_area(n=48, T=40, peaks=(0.8, 2.0), sigma=4.0, noise=0.02,
                      seed=0) -> PlantedFlow:
    """Two temporally disjoint motions on the same blob, plus a distractor blob."""
    maps = np.stack([gaussian_blob(n, n, (24, 24), sigma),
                     gaussian_blob(n, n, (24, 24), sigma),
                     gaussian_blob(n, n, (10, 10), sigma)])
    speeds = np.stack([bump(T, 4, 8, peaks[0]), bump(T, 24, 8, peaks[1]),
                       bump(T, 14, 8, 0.5)])
    dirs = np.array([[1.0, 0.0], [0.0, 1.0], [np.sqrt(0.5), np.sqrt(0.5)]])
    return PlantedFlow(maps, speeds, dirs, noise=noise, seed=seed)


def textured_frame(n1, n2, seed=0, smooth=2.0, rgb=False):
    """Smooth random texture normalized to [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    shape = (n1, n2, 3) if rgb else (n1, n2)
    sig = (smooth, smooth, 0) if rgb else smooth
    img = ndimage.gaussian_filter(rng.random(shape), sig, mode="wrap")
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return 0.1 + 0.8 * img


def sinusoid_pattern(n1=64, n2=64, shift=(0.0, 0.0)):
    """Sum of 2-D sinusoids sampled at ``x - shift``."""
    r, c = np.meshgrid(np.arange(n1) - shift[0], np.arange(n2) - shift[1], indexing="ij")
    return (0.5 + 0.2 * np.sin(2 * np.pi * r / 17 + 0.3) + 0.15 * np.sin(2 * np.pi * c / 13)
            + 0.1 * np.sin(2 * np.pi * (r + c) / 23 + 1.0))


def translate(img, shift):
    """``img(x - shift)`` via bilinear resampling with clamped borders."""
    n1, n2 = img.shape[:2]
    r, c = np.meshgrid(np.arange(n1) - shift[0], np.arange(n2) - shift[1], indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [r, c], order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., ch], [r, c], order=1, mode="nearest")
                     for ch in range(img.shape[2])], axis=-1)


def blob_sequence(n1, n2, center, sigma, displacement, amplitude=0.7, background=0.1):
    """Frames of a Gaussian blob moved by ``displacement[t]`` over a flat background.

    Returns ``(frames, flows)`` where ``flows[t]`` is the reference flow from
    frame 1 to frame ``t + 2``: ``displacement[t + 1] - displacement[0]`` on
    a disk of radius ``3.5 * sigma`` around the blob and zero elsewhere. The
    blob is negligible outside that disk, so forward-warping frame 1 by these
    flows reproduces the frames up to interpolation error.
    """
    r, c = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    disp = np.asarray(displacement, dtype=np.float64)
    frames = []
    for d in disp:
        ctr = (center[0] + d[0], center[1] + d[1])
        frames.append(background + amplitude * gaussian_blob(n1, n2, ctr, sigma))
    ctr0 = (center[0] + disp[0, 0], center[1] + disp[0, 1])
    support = np.hypot(r - ctr0[0], c - ctr0[1]) <= 3.5 * sigma
    flows = np.zeros((len(disp) - 1, n1, n2, 2))
    for t in range(1, len(disp)):
        flows[t - 1][support] = disp[t] - disp[0]
    return frames, flows


def moving_blobs_scene(n1=480, n2=640, T=80, seed=0, rgb=True):
    """Static texture with three soft blobs that move at different times and speeds.

    Each blob is displaced along a fixed direction by a ``sin^2`` bump whose
    peaks are 0.5, 1.5 and 4 px. Returns the list of frames.
    """
    rng = np.random.default_rng(seed)
    bg = 0.5 * textured_frame(n1, n2, seed=seed, smooth=3.0, rgb=rgb)
    sigma = min(n1, n2) / 24.0
    specs = []
    for k, peak in enumerate((0.5, 1.5, 4.0)):
        ctr = (n1 * rng.uniform(0.25, 0.75), n2 * (0.2 + 0.3 * k))
        ang = rng.uniform(0, 2 * np.pi)
        start = int(T * (0.1 + 0.25 * k))
        prof = bump(T, start, max(4, T // 5), peak)
        specs.append((ctr, np.array([np.cos(ang), np.sin(ang)]), prof))
    frames = []
    for t in range(T):
        img = bg.copy()
        for ctr, u, prof in specs:
            c = (ctr[0] + prof[t] * u[0], ctr[1] + prof[t] * u[1])
            blob = 0.45 * gaussian_blob(n1, n2, c, sigma)
            img += blob[..., None] if rgb else blob
        frames.append(np.clip(img, 0.0, 1.0))
    return frames
