"""Least squares over the probability simplex.

Solves ``min_w ||b - A w||^2`` subject to ``w >= 0`` and ``sum(w) == 1``.
Two algorithms share the Gram-form kernels below:

``active_set`` (default)
    Primal active-set method: equality-constrained least squares on a
    growing support, stepping back to the feasible region whenever a
    weight would turn negative. Terminates at an exact KKT point; the
    Frank-Wolfe gap ``grad.w - min(grad)`` bounds the distance to the
    optimal objective and is the convergence test.

``pgd``
    Projected gradient descent with fixed step ``1/L`` from the uniform
    start, sort-based projection, stopping once successive objectives
    differ by less than ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

__all__ = [
    "WeightVector",
    "SolverError",
    "project_simplex",
    "solve_simplex_ls",
    "solve_simplex_gram",
    "brute_force_weights",
    "unconstrained_ls_weights",
    "frank_wolfe_gap",
    "DEFAULT_TOL",
    "DEFAULT_MAX_ITER",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
CLIP = 1e-12
POWER_ITERATIONS = 50
HISTORY_EVERY = 100
METHODS = ("active_set", "pgd")


class SolverError(ValueError):
    pass


@dataclass
class WeightVector:
    """Donor weights on the simplex plus solver diagnostics."""

    weights: np.ndarray
    objective: float
    iterations: int
    converged: bool
    method: str = "active_set"
    gap: float = float("nan")
    history: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def __len__(self) -> int:
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, nogil=True)
def _project(v):
    n = v.size
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for j in range(n):
        css += u[j]
        t = (css - 1.0) / (j + 1)
        if u[j] - t > 0.0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        x = v[i] - theta
        out[i] = x if x > 0.0 else 0.0
    return out


@numba.njit(cache=True, nogil=True)
def _objective(G, c, bb, w):
    return w @ (G @ w) - 2.0 * (c @ w) + bb


@numba.njit(cache=True, nogil=True)
def _power_lmax(G, n_iter):
    n = G.shape[0]
    v = np.empty(n)
    # distinct entries keep the start off symmetric eigenvectors
    for i in range(n):
        v[i] = 1.0 + i / n
    v /= np.sqrt(v @ v)
    est = 0.0
    for _ in range(n_iter):
        gv = G @ v
        nrm = np.sqrt(gv @ gv)
        if nrm == 0.0:
            return 0.0
        est = v @ gv
        v = gv / nrm
    return max(est, v @ (G @ v))


@numba.njit(cache=True, nogil=True)
def _pgd(G, c, bb, tol, max_iter, every):
    n = G.shape[0]
    w = np.full(n, 1.0 / n)
    # small margin: power iteration approaches the top eigenvalue from below
    lip = 2.0 * _power_lmax(G, POWER_ITERATIONS) * (1.0 + 1e-3)
    if lip <= 0.0:
        lip = 1.0
    f = _objective(G, c, bb, w)
    best_w = w.copy()
    best_f = f
    hist = np.empty(max_iter // every + 1)
    hist[0] = f
    nh = 1
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        grad = 2.0 * (G @ w - c)
        w_new = _project(w - grad / lip)
        f_new = _objective(G, c, bb, w_new)
        if f_new > f + 1e-12 * (1.0 + abs(f)):
            # step too long for the estimated curvature; halve it
            lip *= 2.0
            continue
        w = w_new
        if f_new < best_f:
            best_f = f_new
            best_w = w.copy()
        if it % every == 0:
            hist[nh] = f_new
            nh += 1
        done = f - f_new < tol
        f = f_new
        if done:
            converged = True
            break
    return best_w, it, converged, hist[:nh]


@numba.njit(cache=True, nogil=True)
def _kkt(G, c, support, m):
    # [G_SS 1; 1' 0] [z; nu] = [c_S; 1]; least squares when singular
    M = np.zeros((m + 1, m + 1))
    r = np.zeros(m + 1)
    for a in range(m):
        for b in range(m):
            M[a, b] = G[support[a], support[b]]
        M[a, m] = 1.0
        M[m, a] = 1.0
        r[a] = c[support[a]]
    r[m] = 1.0
    sol = np.linalg.lstsq(M, r)[0]
    return sol[:m]


@numba.njit(cache=True, nogil=True)
def _fw_gap(G, c, w):
    grad = 2.0 * (G @ w - c)
    return grad @ w - grad.min()


@numba.njit(cache=True, nogil=True)
def _active_set(G, c, bb, tol, max_iter):
    n = G.shape[0]
    scale = 0.0
    for i in range(n):
        scale += abs(G[i, i])
    floor = max(tol, 1e-13 * (scale + abs(bb)))
    # start from the best single donor
    best = 0
    best_v = G[0, 0] - 2.0 * c[0]
    for j in range(1, n):
        v = G[j, j] - 2.0 * c[j]
        if v < best_v:
            best_v = v
            best = j
    w = np.zeros(n)
    w[best] = 1.0
    free = np.zeros(n, dtype=np.bool_)
    free[best] = True
    it = 0
    converged = False
    while it < max_iter:
        grad = 2.0 * (G @ w - c)
        gap = grad @ w - grad.min()
        if gap <= floor:
            converged = True
            break
        enter = -1
        low = np.inf
        for j in range(n):
            if not free[j] and grad[j] < low:
                low = grad[j]
                enter = j
        if enter < 0:
            break
        free[enter] = True
        # inner loop: step back until the support solution is feasible
        while it < max_iter:
            it += 1
            support = np.nonzero(free)[0]
            m = support.size
            z = _kkt(G, c, support, m)
            feasible = True
            for a in range(m):
                if z[a] <= 0.0:
                    feasible = False
                    break
            if feasible:
                w[:] = 0.0
                for a in range(m):
                    w[support[a]] = z[a]
                break
            step = 1.0
            for a in range(m):
                if z[a] <= 0.0:
                    den = w[support[a]] - z[a]
                    if den > 0.0:
                        s = w[support[a]] / den
                        if s < step:
                            step = s
            for a in range(m):
                j = support[a]
                w[j] += step * (z[a] - w[j])
            for a in range(m):
                j = support[a]
                if w[j] <= CLIP:
                    w[j] = 0.0
                    free[j] = False
            total = w.sum()
            if total <= 0.0:
                break
            w /= total
        if not free[enter]:
            # the entering donor was stepped straight back out: no descent
            # direction is left beyond rounding noise
            break
    return w, it, converged


# ---------------------------------------------------------------------------
# public API


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex.

    >>> project_simplex([2.0, 0.0, 0.0])
    array([1., 0., 0.])
    """
    x = np.asarray(v, dtype=float).ravel()
    if x.size == 0:
        raise SolverError("cannot project an empty vector")
    if not np.isfinite(x).all():
        raise SolverError("non-finite entries in vector to project")
    return _project(np.ascontiguousarray(x))


def _finish(w: np.ndarray) -> np.ndarray:
    w = np.where(w < CLIP, 0.0, w)
    return w / w.sum()


def frank_wolfe_gap(G, c, w) -> float:
    """Upper bound on ``objective(w) - min objective`` over the simplex."""
    return float(_fw_gap(np.asarray(G, float), np.asarray(c, float), np.asarray(w, float)))


def solve_simplex_gram(
    G,
    c,
    bb: float,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    method: str = "active_set",
) -> WeightVector:
    """Solve the simplex problem given ``G = A'A``, ``c = A'b``, ``bb = b'b``.

    The reported objective is ``w'Gw - 2c'w + bb`` clipped at zero; use
    :func:`solve_simplex_ls` to get it from the residual directly.
    """
    G = np.ascontiguousarray(G, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    if method not in METHODS:
        raise SolverError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] != c.size:
        raise SolverError("Gram matrix and cross-product vector do not conform")
    if G.shape[0] < 1:
        raise SolverError("need at least one donor")
    if not (np.isfinite(G).all() and np.isfinite(c).all() and np.isfinite(bb)):
        raise SolverError("non-finite entries in A or b")
    if tol <= 0:
        raise SolverError("tol must be positive")
    history = np.empty(0)
    if method == "pgd":
        w, it, conv, history = _pgd(G, c, float(bb), float(tol), int(max_iter), HISTORY_EVERY)
    else:
        w, it, conv = _active_set(G, c, float(bb), float(tol), int(max_iter))
    w = _finish(w)
    obj = max(float(_objective(G, c, float(bb), w)), 0.0)
    return WeightVector(w, obj, int(it), bool(conv), method, float(_fw_gap(G, c, w)), history)


def solve_simplex_ls(
    A,
    b,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    method: str = "active_set",
) -> WeightVector:
    """Simplex-constrained least squares ``min ||b - A w||^2``.

    Parameters
    ----------
    A : (rows, J) array
        Donor columns, J >= 2.
    b : (rows,) array
        Target column.
    tol : float
        ``active_set``: bound on the Frank-Wolfe gap. ``pgd``: minimum
        decrease of the objective between iterations.
    max_iter : int
        Iteration cap. Hitting it returns the best iterate with
        ``converged=False`` rather than raising.
    method : {"active_set", "pgd"}

    Returns
    -------
    WeightVector
        ``weights >= 0`` exactly and summing to one.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 2:
        raise SolverError("A must have at least one row and two columns")
    if b.size != A.shape[0]:
        raise SolverError(f"b has length {b.size}, A has {A.shape[0]} rows")
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise SolverError("non-finite entries in A or b")
    out = solve_simplex_gram(A.T @ A, A.T @ b, float(b @ b), tol=tol, max_iter=max_iter, method=method)
    r = b - A @ out.weights
    out.objective = float(r @ r)
    return out


def _grid(n: int, J: int) -> np.ndarray:
    """All length-J compositions of n in lexicographic order."""
    if J == 1:
        return np.array([[n]])
    parts = []
    for first in range(n + 1):
        rest = _grid(n - first, J - 1)
        parts.append(np.column_stack([np.full(len(rest), first), rest]))
    return np.vstack(parts)


def brute_force_weights(A, b, grid_step: float) -> WeightVector:
    """Exhaustive search over simplex points on a grid (test oracle).

    Only for ``J <= 4``; ties go to the lexicographically smallest point.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    J = A.shape[1]
    if J > 4:
        raise SolverError("oracle restricted to small instances (J <= 4)")
    n = int(round(1.0 / grid_step))
    if n < 1 or abs(n * grid_step - 1.0) > 1e-9:
        raise SolverError("grid_step must divide 1")
    W = _grid(n, J) / n
    G, c, bb = A.T @ A, A.T @ b, float(b @ b)
    f = np.einsum("pi,ij,pj->p", W, G, W) - 2.0 * W @ c + bb
    i = int(np.argmin(f))
    w = W[i]
    r = b - A @ w
    return WeightVector(w, float(r @ r), len(W), True, "grid")


def unconstrained_ls_weights(A, b) -> np.ndarray:
    """Ordinary least squares ``(A'A)^-1 A'b`` without simplex constraints."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    G = A.T @ A
    if np.linalg.eigvalsh(G)[0] <= 1e-10:
        raise SolverError("A'A is singular; unconstrained weights are not identified")
    return np.linalg.solve(G, A.T @ b)
