"""Pick the decomposition components that count as micromovements.

Each component ``k`` gets a magnitude ``c_k = max|G^k| * max_t |d^k(t)|``,
the largest displacement (in pixels) it contributes anywhere in the
sequence. Components whose magnitude lies in ``[lambda1, lambda2]`` are
selected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomp import group_norms


@dataclass(frozen=True)
class SelectionParams:
    lambda1: float = 0.1
    lambda2: float = 0.3

    def __post_init__(self):
        if not 0 <= self.lambda1 < self.lambda2:
            raise ValueError(
                f"need 0 <= lambda1 < lambda2, got {self.lambda1}, {self.lambda2}"
            )


@dataclass(frozen=True)
class ComponentReport:
    k: int
    m_k: float
    peak_time: int
    c_k: float
    selected: bool


def component_magnitudes(D, G) -> np.ndarray:
    """``c_k`` for every component; absolute values make it sign-invariant."""
    D = np.asarray(D, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if D.shape[1] != G.shape[0]:
        raise ValueError(f"D has {D.shape[1]} columns but G has {G.shape[0]} rows")
    m = np.abs(G).max(axis=1) if G.shape[1] else np.zeros(G.shape[0])
    return m * group_norms(D).max(axis=0)


def select_components(c, params: SelectionParams) -> list[int]:
    """Indices (0-based) with ``lambda1 <= c_k <= lambda2``."""
    return [k for k, ck in enumerate(np.asarray(c, dtype=np.float64))
            if params.lambda1 <= ck <= params.lambda2]


def component_report(D, G, params: SelectionParams) -> list[ComponentReport]:
    c = component_magnitudes(D, G)
    m = np.abs(np.asarray(G)).max(axis=1)
    peaks = group_norms(D).argmax(axis=0)
    chosen = set(select_components(c, params))
    # peak_time is 1-based to match frame numbering
    return [ComponentReport(k, float(m[k]), int(peaks[k]) + 1, float(c[k]), k in chosen)
            for k in range(len(c))]
