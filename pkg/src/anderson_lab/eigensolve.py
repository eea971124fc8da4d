"""Lowest eigenpairs, continuum reference spectra and Ky Fan sums."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import NoConvergence
from .hamiltonian import SparseHamiltonian, assemble, dense_oracle
from .lattice import ContinuumDomain, discretize
from .profiles import as_profile

DIRECT_LIMIT = 2000
_START_SEED = 0x5EED
_SIGN_TIE = 1e-8


@dataclass(frozen=True, eq=False)
class SpectrumResult:
    """k lowest eigenpairs in ascending order.

    ``next_eigenvalue`` is lambda^(k+1) when it exists; it is kept so that
    gaps and simplicity of the top requested index are well defined.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    next_eigenvalue: float | None
    gap_tol: float
    method: str

    @property
    def k(self):
        return self.eigenvalues.size

    @property
    def extended(self):
        if self.next_eigenvalue is None:
            return self.eigenvalues
        return np.append(self.eigenvalues, self.next_eigenvalue)

    @property
    def gaps(self):
        return np.diff(self.extended)

    @property
    def simple_flags(self):
        ext = self.extended
        flags = np.ones(self.k, dtype=bool)
        for i in range(self.k):
            if i > 0 and ext[i] - ext[i - 1] <= self.gap_tol:
                flags[i] = False
            if i + 1 < ext.size and ext[i + 1] - ext[i] <= self.gap_tol:
                flags[i] = False
        return flags

    def record(self, eps):
        """JSON-ready summary."""
        return {
            "eps": float(eps),
            "k": int(self.k),
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "residuals": [float(x) for x in self.residuals],
            "gaps": [float(x) for x in self.gaps],
        }


def default_gap_tol(eigenvalues):
    ev = np.asarray(eigenvalues)
    return 1e-6 * (ev[-1] + abs(ev[0]))


def fix_signs(vectors):
    """Make the largest-magnitude entry of each column positive.

    Entries within a relative 1e-8 of the maximum count as ties and the
    lowest index wins, so symmetric eigenvectors get a solver-independent
    sign.
    """
    vectors = np.array(vectors, dtype=float, copy=True)
    if vectors.size == 0:
        return vectors
    mag = np.abs(vectors)
    pivots = np.argmax(mag >= mag.max(axis=0) * (1 - _SIGN_TIE), axis=0)
    signs = np.where(vectors[pivots, np.arange(vectors.shape[1])] < 0, -1.0, 1.0)
    return vectors * signs


def _direct(H: SparseHamiltonian, count):
    if H.is_tridiagonal:
        diag = H.csr.diagonal()
        off = H.csr.diagonal(1)
        if count == H.dim:
            return linalg.eigh_tridiagonal(diag, off)
        return linalg.eigh_tridiagonal(diag, off, select="i", select_range=(0, count - 1))
    return linalg.eigh(dense_oracle(H), subset_by_index=[0, count - 1])


def _shift_invert(H: SparseHamiltonian, count, tol):
    # -Laplacian >= 0, so min(xi) - 1 lies strictly below the spectrum and the
    # shifted operator is positive definite
    sigma = float(np.min(H.potential)) - 1.0
    try:
        vals, vecs = eigsh(H.csr.tocsc(), k=count, sigma=sigma, which="LM", tol=tol * 1e-2,
                           v0=np.random.default_rng(_START_SEED).standard_normal(H.dim))
    except ArpackNoConvergence as exc:
        raise NoConvergence(f"shift-invert did not converge: {exc}", None) from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _orthogonalize(V, r):
    for _ in range(2):
        r = r - V @ (V.T @ r)
    return r


def lanczos(H: SparseHamiltonian, count, tol=1e-10, krylov_dim=None, max_restarts=2000):
    """Thick-restart Lanczos with full reorthogonalization.

    Returns ``(eigenvalues, eigenvectors, residual_norms)`` for the
    ``count`` smallest eigenvalues.  Converged when every Ritz residual
    satisfies ``||Hx - theta x|| <= tol * (|theta| + ||H||_1)``.
    """
    n = H.dim
    m = min(n, krylov_dim or max(4 * count + 40, 80))
    if m <= count and m < n:
        raise ValueError("Krylov dimension must exceed the number of wanted pairs")
    hnorm = H.norm_estimate
    A = H.csr
    rng = np.random.default_rng(_START_SEED)
    V = np.zeros((n, m))
    W = np.zeros((n, m))
    v = rng.standard_normal(n)
    V[:, 0] = v / np.linalg.norm(v)
    filled = 0
    res = None
    for _ in range(max_restarts):
        for j in range(filled, m):
            W[:, j] = A @ V[:, j]
            if j + 1 < m:
                r = _orthogonalize(V[:, : j + 1], W[:, j])
                beta = np.linalg.norm(r)
                while beta <= 1e-10 * max(hnorm, 1e-300):
                    # invariant subspace reached: continue with a fresh direction
                    r = _orthogonalize(V[:, : j + 1], rng.standard_normal(n))
                    beta = np.linalg.norm(r)
                V[:, j + 1] = r / beta
        T = V.T @ W
        theta, S = np.linalg.eigh(0.5 * (T + T.T))
        Sk = S[:, :count]
        X = V @ Sk
        res = np.linalg.norm(W @ Sk - X * theta[:count], axis=0)
        if m == n or np.all(res <= tol * (np.abs(theta[:count]) + hnorm)):
            return theta[:count], X, res
        keep = min(m - 2, max(count + 1, count + (m - count) // 2))
        r = _orthogonalize(V, W[:, m - 1])
        beta = np.linalg.norm(r)
        if beta <= 1e-14 * hnorm:
            r = _orthogonalize(V, rng.standard_normal(n))
            beta = np.linalg.norm(r)
        V[:, :keep] = V @ S[:, :keep]
        W[:, :keep] = W @ S[:, :keep]
        V[:, keep] = r / beta
        filled = keep
    raise NoConvergence(f"Lanczos did not reach tol={tol} after {max_restarts} restarts", res)


def lowest_k(H: SparseHamiltonian, k: int, tol: float = 1e-10, method: str = "auto",
             gap_tol: float | None = None, krylov_dim: int | None = None) -> SpectrumResult:
    """The k smallest eigenpairs of H.

    ``method`` is ``"direct"`` (LAPACK; tridiagonal solver in one
    dimension), ``"lanczos"``, ``"shift-invert"`` (ARPACK on a sparse LU
    factorization, for large deterministic grids), or ``"auto"`` which goes
    direct up to ``DIRECT_LIMIT`` sites and to Lanczos above.
    """
    if not 1 <= k <= H.dim:
        raise ValueError(f"k={k} must lie in [1, {H.dim}]")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method == "auto":
        method = "direct" if H.dim <= DIRECT_LIMIT else "lanczos"
    count = min(k + 1, H.dim)
    if method == "direct":
        vals, vecs = _direct(H, count)
    elif method == "lanczos":
        vals, vecs, _ = lanczos(H, count, tol=tol, krylov_dim=krylov_dim)
    elif method == "shift-invert" and count < H.dim:
        vals, vecs = _shift_invert(H, count, tol)
    elif method == "shift-invert":
        vals, vecs = _direct(H, count)
    else:
        raise ValueError(f"unknown method {method!r}")
    vecs = fix_signs(vecs / np.linalg.norm(vecs, axis=0))
    residuals = np.linalg.norm(H.csr @ vecs[:, :k] - vecs[:, :k] * vals[:k], axis=0)
    bound = tol * (np.abs(vals[:k]) + H.norm_estimate)
    if np.any(residuals > bound):
        raise NoConvergence(f"{method} residuals {residuals} exceed target {bound}", residuals)
    nxt = float(vals[k]) if count > k else None
    if gap_tol is None:
        gap_tol = default_gap_tol(vals)
    return SpectrumResult(eigenvalues=np.asarray(vals[:k], dtype=float), eigenvectors=vecs[:, :k],
                          residuals=residuals, next_eigenvalue=nxt, gap_tol=float(gap_tol),
                          method=method)


def kyfan_sum(spectrum: SpectrumResult, k: int) -> float:
    """Lambda_k: the sum of the k smallest eigenvalues."""
    if not 1 <= k <= spectrum.k:
        raise ValueError(f"k={k} out of range 1..{spectrum.k}")
    return float(np.sum(spectrum.eigenvalues[:k]))


def rayleigh_sum(H: SparseHamiltonian, vectors, atol: float = 1e-8) -> float:
    """sum_i <h_i, H h_i> over the columns of an orthonormal frame."""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    gram = vectors.T @ vectors
    if np.max(np.abs(gram - np.eye(gram.shape[0]))) > atol:
        raise ValueError("vectors are not orthonormal")
    return float(np.sum(vectors * (H.csr @ vectors)))


def gap_report(spectrum: SpectrumResult, k: int, gap_tol: float | None = None):
    """delta = min(lower gap, upper gap) / 3 around the k-th eigenvalue (1-based)."""
    ext = spectrum.extended
    if not 1 <= k < ext.size:
        raise ValueError(f"gap around index {k} needs {k + 1} eigenvalues, have {ext.size}")
    gaps = [ext[k] - ext[k - 1]]
    if k >= 2:
        gaps.append(ext[k - 1] - ext[k - 2])
    delta = min(gaps) / 3.0
    tol = spectrum.gap_tol if gap_tol is None else gap_tol
    return float(delta), bool(delta > tol)


@dataclass(frozen=True, eq=False)
class ContinuumReference:
    """Low spectrum of -Laplacian + U on D with Dirichlet condition.

    ``nodes``/``weight``/``values`` form a midpoint-rule quadrature: the
    integral of F over D is approximately ``weight * sum F(nodes)`` and
    ``values[:, i]`` holds the i-th eigenfunction at the nodes.
    """

    eigenvalues: np.ndarray
    next_eigenvalue: float
    fine_eps: float
    method: str
    nodes: np.ndarray = field(repr=False)
    weight: float = 0.0
    values: np.ndarray = field(default=None, repr=False)
    error_estimate: np.ndarray | None = None
    gap_tol: float = 0.0
    _evaluators: tuple = field(default=(), repr=False)

    @property
    def k(self):
        return self.eigenvalues.size

    @property
    def simple_flags(self):
        ext = np.append(self.eigenvalues, self.next_eigenvalue)
        flags = np.ones(self.k, dtype=bool)
        for i in range(self.k):
            lower = ext[i] - ext[i - 1] if i > 0 else math.inf
            if min(lower, ext[i + 1] - ext[i]) <= self.gap_tol:
                flags[i] = False
        return flags

    def eigenfunction(self, index):
        """Callable evaluating the index-th (1-based) eigenfunction at ``(n, d)`` points."""
        return self._evaluators[index - 1]


def _analytic_box(domain, shift, k, fine_eps):
    lengths = np.array([hi - lo for lo, hi in domain.bounds])
    lows = np.array([lo for lo, _ in domain.bounds])
    top = k + 2
    modes = np.array(list(itertools.product(range(1, top + 1), repeat=domain.d)))
    lam = np.pi**2 * np.sum((modes / lengths) ** 2, axis=1) + shift
    order = np.lexsort(tuple(modes.T[::-1]) + (lam,))
    modes, lam = modes[order][: k + 1], lam[order][: k + 1]

    def make(mode):
        def phi(points):
            points = np.atleast_2d(np.asarray(points, dtype=float))
            rel = (points - lows) / lengths
            inside = np.all((rel > 0) & (rel < 1), axis=1)
            val = np.prod(np.sqrt(2 / lengths) * np.sin(mode * np.pi * rel), axis=1)
            return np.where(inside, val, 0.0)
        return phi

    evaluators = tuple(make(mode) for mode in modes[:k])
    counts = np.maximum(1, np.round(lengths / fine_eps).astype(int))
    steps = lengths / counts
    axes = [lo + (np.arange(c) + 0.5) * h for lo, c, h in zip(lows, counts, steps)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)
    values = np.column_stack([f(nodes) for f in evaluators])
    return lam, evaluators, nodes, float(np.prod(steps)), values


def _grid_solution(domain, U, k, fine_eps, tol):
    lattice = discretize(domain, fine_eps)
    xi = U(lattice.points) if U is not None else np.zeros(lattice.n)
    H = assemble(lattice, xi)
    method = "direct" if H.dim <= DIRECT_LIMIT else "shift-invert"
    return lattice, lowest_k(H, min(k, lattice.n), tol=tol, method=method)


def continuum_reference(domain: ContinuumDomain, U=None, k: int = 1, fine_eps: float = 1 / 512,
                        two_grid: bool = True, tol: float = 1e-10, analytic: bool | None = None,
                        gap_tol: float | None = None) -> ContinuumReference:
    """Reference spectrum of -Laplacian + U on D.

    Boxes with constant U use the exact Dirichlet spectrum
    pi^2 sum (n_i / l_i)^2 + U.  Everything else is solved as the
    deterministic lattice problem at spacing ``fine_eps``; with
    ``two_grid`` the change under halving ``fine_eps`` is reported as a
    (heuristic) error estimate.
    """
    U = as_profile(U)
    constant = U is None or U.is_constant
    if analytic is None:
        analytic = domain.kind == "box" and constant
    if analytic:
        if not (domain.kind == "box" and constant):
            raise ValueError("analytic reference needs a box and a constant mean profile")
        shift = 0.0 if U is None else U.constant
        lam, evaluators, nodes, weight, values = _analytic_box(domain, shift, k, fine_eps)
        tol_gap = default_gap_tol(lam) if gap_tol is None else gap_tol
        return ContinuumReference(eigenvalues=lam[:k], next_eigenvalue=float(lam[k]), fine_eps=fine_eps,
                                  method="analytic", nodes=nodes, weight=weight, values=values,
                                  error_estimate=np.zeros(k), gap_tol=tol_gap, _evaluators=evaluators)

    lattice, spec = _grid_solution(domain, U, k + 1, fine_eps, tol)
    if spec.k < k + 1:
        raise ValueError(f"fine lattice has only {lattice.n} sites; need {k + 1}")
    d = lattice.d
    phi = spec.eigenvectors / fine_eps ** (d / 2)
    err = None
    if two_grid:
        _, spec_half = _grid_solution(domain, U, k, fine_eps / 2, tol)
        err = np.abs(spec.eigenvalues[:k] - spec_half.eigenvalues[:k])
    origin = lattice.sites.min(axis=0) - 1
    shape = tuple(lattice.sites.max(axis=0) - origin + 2)
    axes = [fine_eps * (origin[i] + np.arange(shape[i])) for i in range(d)]
    evaluators = []
    for i in range(k):
        grid = np.zeros(shape)
        grid[tuple((lattice.sites - origin).T)] = phi[:, i]
        interp = RegularGridInterpolator(axes, grid, bounds_error=False, fill_value=0.0)

        def evaluate(points, _interp=interp):
            return _interp(np.atleast_2d(np.asarray(points, dtype=float)))
        evaluators.append(evaluate)
    lam = spec.eigenvalues
    tol_gap = default_gap_tol(lam) if gap_tol is None else gap_tol
    return ContinuumReference(eigenvalues=lam[:k].copy(), next_eigenvalue=float(lam[k]), fine_eps=fine_eps,
                              method="grid", nodes=lattice.points, weight=fine_eps**d, values=phi[:, :k],
                              error_estimate=err, gap_tol=tol_gap, _evaluators=tuple(evaluators))


def warn_if_degenerate(reference: ContinuumReference, indices):
    flags = reference.simple_flags
    bad = [k for k in indices if not flags[k - 1]]
    if bad:
        warnings.warn(f"continuum eigenvalues {bad} are (nearly) degenerate; excluded from CLT analysis",
                      stacklevel=2)
    return bad
