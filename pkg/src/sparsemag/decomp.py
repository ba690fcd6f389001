"""Double sparse decomposition of a flow volume.

The flow volume is reshaped into a matrix ``V`` of shape ``(2T, n)`` whose
column ``p`` stacks ``(v1(1,p), v2(1,p), ..., v1(T,p), v2(T,p))``. It is
factorized as ``V ~ D @ G`` with ``D`` of shape ``(2T, K)`` (temporal
signatures) and ``G`` of shape ``(K, n)`` (spatial maps) by online
dictionary learning: every visited pixel is sparse-coded with LARS-lasso,
the sufficient statistics ``A = sum g g^T`` and ``B = sum v g^T`` are
accumulated, and ``D`` is refreshed one column at a time by a fixed-point
step followed by a projection.

Constraint sets for the columns of ``D``:

``"l21"``
    ``sum_t |d^k(t)| <= beta``, enforced by exact Euclidean projection
    (group soft-thresholding of the 2-vector groups ``d^k(t)``).
``"l21clip"``
    every group ``d^k(t)`` clipped to norm ``beta`` independently.
``"l2"``
    the whole column clipped to the unit ball (baseline model).
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

MODES = ("l21", "l2", "l21clip")
_MODE_L21 = 0
_MODE_L2 = 1
_MODE_L21_CLIP = 2


@dataclass(frozen=True)
class DecompParams:
    K: int = 9
    alpha: float = 0.1
    beta: float = 4.0
    epochs: int = 3
    seed: int = 0
    constraint_mode: str = "l21"
    # A starts at prior_weight * I and B at prior_weight * D0, which keeps the
    # first few updates from overwriting an atom with a single column
    prior_weight: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.constraint_mode not in MODES:
            raise ValueError(f"constraint_mode must be one of {MODES}")
        if self.constraint_mode == "l21" and not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.prior_weight >= 0:
            raise ValueError("prior_weight must be >= 0")

    @property
    def mode_code(self) -> int:
        return MODES.index(self.constraint_mode)


@dataclass(frozen=True)
class FlowMatrix:
    """``data`` is ``V`` of shape ``(2T, n1*n2)``."""

    data: np.ndarray
    n1: int
    n2: int

    @property
    def T(self) -> int:
        return self.data.shape[0] // 2

    @property
    def n(self) -> int:
        return self.n1 * self.n2


def build_flow_matrix(vol) -> FlowMatrix:
    """Reshape a ``(T, n1, n2, 2)`` flow volume into ``V`` of shape ``(2T, n)``."""
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 4 or vol.shape[3] != 2:
        raise ValueError(f"flow volume must have shape (T, n1, n2, 2), got {vol.shape}")
    T, n1, n2, _ = vol.shape
    if T == 0 or n1 == 0 or n2 == 0:
        raise ValueError("empty flow volume")
    V = vol.reshape(T, n1 * n2, 2).transpose(0, 2, 1).reshape(2 * T, n1 * n2)
    return FlowMatrix(np.ascontiguousarray(V), n1, n2)


def unbuild_flow_matrix(fm: FlowMatrix) -> np.ndarray:
    """Inverse of :func:`build_flow_matrix`."""
    T = fm.T
    return fm.data.reshape(T, 2, fm.n).transpose(0, 2, 1).reshape(T, fm.n1, fm.n2, 2)


def _as_matrix(V):
    return V.data if isinstance(V, FlowMatrix) else np.asarray(V, dtype=np.float64)


# ---------------------------------------------------------------------------
# LARS-lasso
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _solve_active(gram, active, na, rhs):
    M = np.empty((na, na))
    for a in range(na):
        for b in range(na):
            M[a, b] = gram[active[a], active[b]]
    return np.linalg.solve(M, rhs)


@numba.njit(cache=True)
def _lars(gram, corr, alpha):
    """Minimize ``0.5*||v - D g||^2 + alpha*||g||_1`` given ``gram = D^T D``
    and ``corr = D^T v``; homotopy in the penalty from ``max|corr|`` down
    to ``alpha`` with sign-change drops."""
    K = gram.shape[0]
    g = np.zeros(K)
    c = corr.copy()
    excluded = np.zeros(K, dtype=np.bool_)
    in_active = np.zeros(K, dtype=np.bool_)
    active = np.empty(K, dtype=np.int64)
    na = 0
    for j in range(K):
        if gram[j, j] <= 1e-300:
            excluded[j] = True

    lam = 0.0
    first = -1
    for j in range(K):
        if not excluded[j] and abs(c[j]) > lam:
            lam = abs(c[j])
            first = j
    if first < 0 or lam <= alpha:
        return g
    active[0] = first
    in_active[first] = True
    na = 1

    last_dropped = -1
    for _ in range(20 * K + 20):
        s = np.empty(na)
        for a in range(na):
            s[a] = 1.0 if c[active[a]] > 0 else -1.0
        w = _solve_active(gram, active, na, s)
        # a_j = d_j^T (D_A w)
        av = np.zeros(K)
        for j in range(K):
            acc = 0.0
            for a in range(na):
                acc += gram[j, active[a]] * w[a]
            av[j] = acc

        gamma = lam - alpha
        event = 0  # 0: reach alpha, 1: add, 2: drop
        idx = -1
        for j in range(K):
            if in_active[j] or excluded[j]:
                continue
            # a just-dropped index sits on the boundary; ignore that crossing
            floor = 1e-12 * lam if j == last_dropped else 0.0
            den = 1.0 - av[j]
            if den > 1e-12:
                cand = (lam - c[j]) / den
                if floor < cand < gamma:
                    gamma = cand
                    event = 1
                    idx = j
            den = 1.0 + av[j]
            if den > 1e-12:
                cand = (lam + c[j]) / den
                if floor < cand < gamma:
                    gamma = cand
                    event = 1
                    idx = j
        drop_pos = -1
        for a in range(na):
            j = active[a]
            if w[a] != 0.0:
                cand = -g[j] / w[a]
                if 0.0 < cand < gamma:
                    gamma = cand
                    event = 2
                    idx = j
                    drop_pos = a

        for a in range(na):
            g[active[a]] += gamma * w[a]
        for j in range(K):
            c[j] -= gamma * av[j]
        lam -= gamma
        last_dropped = -1

        if event == 0:
            break
        if event == 2:
            g[idx] = 0.0
            in_active[idx] = False
            for a in range(drop_pos, na - 1):
                active[a] = active[a + 1]
            na -= 1
            last_dropped = idx
            if na == 0:
                # path restarts from the current penalty level
                best = -1
                m = 0.0
                for j in range(K):
                    if not excluded[j] and j != idx and abs(c[j]) > m:
                        m = abs(c[j])
                        best = j
                if best < 0 or m <= alpha:
                    break
                lam = m
                active[0] = best
                in_active[best] = True
                na = 1
            continue
        # event == 1: admit idx unless it makes the active Gram singular
        if na > 0:
            rhs = np.empty(na)
            for a in range(na):
                rhs[a] = gram[active[a], idx]
            z = _solve_active(gram, active, na, rhs)
            schur = gram[idx, idx]
            for a in range(na):
                schur -= rhs[a] * z[a]
            if schur <= 1e-10 * gram[idx, idx]:
                excluded[idx] = True
                continue
        active[na] = idx
        in_active[idx] = True
        na += 1

    # polish on the final support: g_A = G_AA^{-1} (D_A^T v - alpha s_A)
    if na > 0:
        rhs = np.empty(na)
        for a in range(na):
            j = active[a]
            sg = 1.0 if g[j] > 0 else -1.0
            rhs[a] = corr[j] - alpha * sg
        x = _solve_active(gram, active, na, rhs)
        ok = True
        for a in range(na):
            if x[a] * g[active[a]] <= 0.0:
                ok = False
        if ok:
            for a in range(na):
                g[active[a]] = x[a]
    return g


def lasso_lars(v, D, alpha: float) -> np.ndarray:
    """Sparse code of ``v`` against ``D``: argmin ``0.5||v - Dg||^2 + alpha||g||_1``."""
    v = np.asarray(v, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if D.ndim != 2 or v.shape != (D.shape[0],):
        raise ValueError(f"shape mismatch: v{v.shape}, D{D.shape}")
    return _lars(D.T @ D, D.T @ v, float(alpha))


# ---------------------------------------------------------------------------
# Dictionary update
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _project_column(d, beta, mode):
    if mode == _MODE_L21_CLIP:
        for t in range(d.shape[0] // 2):
            a = d[2 * t]
            b = d[2 * t + 1]
            nrm = np.sqrt(a * a + b * b)
            if nrm > beta:
                d[2 * t] = beta * a / nrm
                d[2 * t + 1] = beta * b / nrm
    elif mode == _MODE_L21:
        T = d.shape[0] // 2
        norms = np.empty(T)
        for t in range(T):
            norms[t] = np.sqrt(d[2 * t] ** 2 + d[2 * t + 1] ** 2)
        if np.sum(norms) > beta:
            # l1-ball projection of the group norms (sort-based threshold)
            srt = np.sort(norms)[::-1]
            cum = 0.0
            theta = 0.0
            for i in range(T):
                cum += srt[i]
                th = (cum - beta) / (i + 1)
                if srt[i] > th:
                    theta = th
            for t in range(T):
                if norms[t] > theta:
                    f = (norms[t] - theta) / norms[t]
                    d[2 * t] *= f
                    d[2 * t + 1] *= f
                else:
                    d[2 * t] = 0.0
                    d[2 * t + 1] = 0.0
    else:
        nrm = np.sqrt(np.sum(d * d))
        if nrm > 1.0:
            for i in range(d.shape[0]):
                d[i] = d[i] / nrm


@numba.njit(cache=True)
def _update_dictionary_inplace(D, A, B, beta, mode):
    m, K = D.shape
    for k in range(K):
        akk = A[k, k]
        if akk <= 0.0:
            continue
        col = np.empty(m)
        for i in range(m):
            acc = 0.0
            for j in range(K):
                acc += D[i, j] * A[j, k]
            col[i] = D[i, k] + (B[i, k] - acc) / akk
        _project_column(col, beta, mode)
        for i in range(m):
            D[i, k] = col[i]


def project_group_clip(d, beta: float) -> np.ndarray:
    """Clip every 2-vector group of ``d`` to Euclidean norm ``beta``."""
    d = np.array(d, dtype=np.float64)
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if d.ndim != 1 or d.shape[0] % 2:
        raise ValueError("d must be a vector of even length")
    _project_column(d, float(beta), _MODE_L21_CLIP)
    return d


def project_l21_ball(d, beta: float) -> np.ndarray:
    """Euclidean projection onto ``{d : sum_t |d(t)| <= beta}``."""
    d = np.array(d, dtype=np.float64)
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if d.ndim != 1 or d.shape[0] % 2:
        raise ValueError("d must be a vector of even length")
    _project_column(d, float(beta), _MODE_L21)
    return d


def project_unit_ball(d) -> np.ndarray:
    d = np.array(d, dtype=np.float64)
    _project_column(d, 1.0, _MODE_L2)
    return d


def update_dictionary(D, A, B, params: DecompParams) -> np.ndarray:
    """One block-coordinate pass over the columns of ``D``.

    Column ``k`` moves to ``d_k + (b_k - D a_k) / A[k, k]`` (using the
    columns already refreshed in this pass) and is then projected onto the
    mode's feasible set. Columns with ``A[k, k] == 0`` are left untouched.
    """
    D = np.array(D, dtype=np.float64, order="C")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    K = D.shape[1]
    if A.shape != (K, K) or B.shape != D.shape:
        raise ValueError(f"shape mismatch: D{D.shape}, A{A.shape}, B{B.shape}")
    _update_dictionary_inplace(D, A, B, float(params.beta), params.mode_code)
    return D


def surrogate(D, A, B) -> float:
    """``0.5 tr(D^T D A) - tr(D^T B)``."""
    return 0.5 * float(np.sum((D.T @ D) * A)) - float(np.sum(D * B))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _surrogate(D, A, B):
    DtD = D.T @ D
    return 0.5 * np.sum(DtD * A) - np.sum(D * B)


@numba.njit(cache=True)
def _train(V, D, perms, alpha, beta, mode, trace, t0):
    m, n = V.shape
    K = D.shape[1]
    A = t0 * np.eye(K)
    B = t0 * D.copy()
    used = np.zeros(K, dtype=np.bool_)
    n_steps = perms.shape[0] * perms.shape[1]
    log = np.zeros((n_steps if trace else 0, 2))
    step = 0
    v = np.empty(m)
    for e in range(perms.shape[0]):
        resid = np.full(n, -1.0)
        for r in range(perms.shape[1]):
            p = perms[e, r]
            for i in range(m):
                v[i] = V[i, p]
            gram = D.T @ D
            g = _lars(gram, D.T @ v, alpha)
            err = v - D @ g
            resid[p] = np.sum(err * err)
            for a in range(K):
                if g[a] != 0.0:
                    used[a] = True
                    for b in range(K):
                        A[a, b] += g[a] * g[b]
                    for i in range(m):
                        B[i, a] += v[i] * g[a]
            if trace:
                log[step, 0] = _surrogate(D, A, B)
            _update_dictionary_inplace(D, A, B, beta, mode)
            if trace:
                log[step, 1] = _surrogate(D, A, B)
            step += 1
        # dead atoms: restart from the worst-represented visited columns
        order = np.argsort(-resid, kind="mergesort")
        pos = 0
        for k in range(K):
            if not used[k]:
                while pos < n and resid[order[pos]] <= 0.0:
                    pos += 1
                if pos >= n:
                    break
                col = V[:, order[pos]].copy()
                pos += 1
                _project_column(col, beta, mode)
                for i in range(m):
                    D[i, k] = col[i]
                    B[i, k] = t0 * col[i]
        used[:] = False
    return D, log


@numba.njit(parallel=True, cache=True)
def _code_all(V, D, alpha):
    m, n = V.shape
    K = D.shape[1]
    gram = D.T @ D
    G = np.zeros((K, n))
    for p in numba.prange(n):
        corr = np.empty(K)
        for k in range(K):
            acc = 0.0
            for i in range(m):
                acc += D[i, k] * V[i, p]
            corr[k] = acc
        g = _lars(gram, corr, alpha)
        for k in range(K):
            G[k, p] = g[k]
    return G


def sparse_code(V, D, alpha: float) -> np.ndarray:
    """Lasso code of every column of ``V`` against a fixed ``D``."""
    V = np.ascontiguousarray(_as_matrix(V))
    D = np.ascontiguousarray(D, dtype=np.float64)
    return _code_all(V, D, float(alpha))


def initial_dictionary(V, params: DecompParams, rng: np.random.Generator) -> np.ndarray:
    """Data columns picked by greedy residual pivoting, moved into the feasible set.

    Each pick is the column with the largest energy left after projecting
    out the columns picked before it. Unit-norm Gaussian columns (from
    ``rng``) fill in when fewer than ``K`` columns carry energy.
    """
    V = _as_matrix(V)
    m, n = V.shape
    K = params.K
    D = np.empty((m, K))
    energy = np.einsum("ij,ij->j", V, V)
    scale = energy.max() if n else 0.0
    basis = []
    take = 0
    while take < K and scale > 0:
        j = int(np.argmax(energy))
        if energy[j] <= 1e-20 * scale:
            break
        r = V[:, j].copy()
        for q in basis:
            r -= (q @ r) * q
        nrm = np.linalg.norm(r)
        if nrm <= 1e-10 * np.sqrt(scale):
            break
        q = r / nrm
        basis.append(q)
        energy = np.maximum(energy - (q @ V) ** 2, 0.0)
        energy[j] = 0.0
        D[:, take] = V[:, j]
        take += 1
    if take < K:
        extra = rng.standard_normal((m, K - take))
        D[:, take:] = extra / np.linalg.norm(extra, axis=0)
    for k in range(K):
        _project_column(D[:, k], float(params.beta), params.mode_code)
    return D


def decompose(V, params: DecompParams | None = None, surrogate_log: list | None = None):
    """Factorize ``V ~ D @ G`` with sparse ``G`` and constrained ``D``.

    Parameters
    ----------
    V : FlowMatrix or ndarray of shape (2T, n)
    params : DecompParams
    surrogate_log : list, optional
        When given, receives one ``(F_before, F_after)`` pair per
        dictionary update, where ``F`` is the quadratic surrogate
        :func:`surrogate` evaluated with the current statistics.

    Returns
    -------
    D : ndarray (2T, K)
    G : ndarray (K, n)
    """
    params = params or DecompParams()
    V = np.ascontiguousarray(_as_matrix(V), dtype=np.float64)
    m, n = V.shape
    if m % 2:
        raise ValueError("V must have an even number of rows")
    if params.K > min(m, n):
        raise ValueError(f"K={params.K} exceeds min(2T, n) = {min(m, n)}")
    if not np.all(np.isfinite(V)):
        raise ValueError("V contains non-finite values")
    rng = np.random.default_rng(params.seed)
    D = np.ascontiguousarray(initial_dictionary(V, params, rng))
    if not V.any():
        return D, np.zeros((params.K, n))
    perms = np.stack([rng.permutation(n) for _ in range(params.epochs)]).astype(np.int64)
    trace = surrogate_log is not None
    D, log = _train(V, D, perms, float(params.alpha), float(params.beta),
                    params.mode_code, trace, float(params.prior_weight))
    if trace:
        surrogate_log.extend(map(tuple, log))
    G = _code_all(V, D, float(params.alpha))
    return D, G


def reconstruction_error(V, D, G) -> float:
    """``||V - D G||_F / max(||V||_F, 1e-12)``."""
    V = _as_matrix(V)
    return float(np.linalg.norm(V - D @ G) / max(np.linalg.norm(V), 1e-12))


def group_norms(D) -> np.ndarray:
    """``|d^k(t)|`` as an array of shape ``(T, K)``."""
    D = np.asarray(D, dtype=np.float64)
    return np.hypot(D[0::2], D[1::2])


def temporal_sparsity(D) -> np.ndarray:
    """Per component, the fraction of time steps with ``|d^k(t)|`` below 1% of its peak."""
    norms = group_norms(D)
    peak = norms.max(axis=0)
    out = np.ones(norms.shape[1])
    live = peak > 0
    out[live] = np.mean(norms[:, live] < 0.01 * peak[live], axis=0)
    return out
