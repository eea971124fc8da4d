"""Checks of the first and second variation formulas on small dense systems.

Raising xi(x) by t moves a simple eigenvalue at rate g(x)^2 and changes
the eigenfunction amplitude at x by

    d/dt log|g(x)| = -G(x, x),   G(x, x) = sum_{i != k} g_i(x)^2 / (lambda_i - lambda_k),

so |g'(x)| = |g(x)| * exp(-integral of G along the segment).
"""

from __future__ import annotations

from dataclasses import dataclass

import gmpy2
import mpmath
import numpy as np
from scipy import linalg

from .eigensolve import DIRECT_LIMIT, fix_signs
from .errors import DegenerateEigenvalue, DegeneracyOnPath, TooLarge
from .hamiltonian import SparseHamiltonian, dense_oracle


@dataclass(frozen=True)
class GreenDiag:
    value: float
    k: int
    site: int
    method: str = "spectral-sum"


def full_spectrum(H: SparseHamiltonian):
    if H.dim > DIRECT_LIMIT:
        raise TooLarge(f"dense perturbation probes are limited to {DIRECT_LIMIT} sites")
    w, v = linalg.eigh(dense_oracle(H, limit=DIRECT_LIMIT))
    return w, fix_signs(v)


def _delta(w, k):
    """min gap around the k-th (1-based) eigenvalue over three; inf for a 1x1 system."""
    gaps = []
    if k >= 2:
        gaps.append(w[k - 1] - w[k - 2])
    if k < w.size:
        gaps.append(w[k] - w[k - 1])
    return min(gaps) / 3.0 if gaps else np.inf


def _gap_tol(w):
    return 1e-6 * (abs(w[-1]) + abs(w[0]))


def _check_k(H, k):
    if not 1 <= k <= H.dim:
        raise ValueError(f"k={k} outside 1..{H.dim}")


_EXTENDED_BITS = 140


class _ExtendedTridiagonal:
    """A symmetric tridiagonal matrix held in 140-bit arithmetic for single-entry edits.

    ``eigenvalue`` runs Newton's method on the characteristic polynomial
    through the LDL^T (Sturm) recurrence from a double-precision guess,
    then confirms with a Sturm count that the root has index k.  Exactly
    zero pivots are nudged to a tiny value.
    """

    def __init__(self, diag, off):
        with gmpy2.context(precision=_EXTENDED_BITS):
            self.diag = [gmpy2.mpfr(float(x)) for x in diag]
            self.off2 = [gmpy2.mpfr(float(b)) ** 2 for b in off]
            self.scale = max(abs(x) for x in self.diag) + 2 * max([abs(float(b)) for b in off] or [0])
            self.tiny = self.scale * gmpy2.mpfr(2) ** (-2 * _EXTENDED_BITS)
            # quadratic convergence: once a step is below sqrt(precision) the next one is negligible
            self.stop = self.scale * gmpy2.mpfr(2) ** (-_EXTENDED_BITS // 2 - 8)
            self.probe = self.scale * gmpy2.mpfr(2) ** (40 - _EXTENDED_BITS)

    def _negatives(self, diag, mu):
        off2, tiny = self.off2, self.tiny
        d = diag[0] - mu or tiny
        neg = int(d < 0)
        for i in range(1, len(diag)):
            d = diag[i] - mu - off2[i - 1] / d or tiny
            neg += int(d < 0)
        return neg

    def eigenvalue(self, k, guess, site=None, value=None):
        """k-th eigenvalue, optionally with the diagonal entry at ``site`` replaced by ``value``."""
        with gmpy2.context(precision=_EXTENDED_BITS):
            diag = self.diag
            if site is not None:
                diag = list(diag)
                diag[site] = value
            off2, tiny = self.off2, self.tiny
            mu = gmpy2.mpfr(guess)
            for _ in range(12):
                d = diag[0] - mu or tiny
                dp = gmpy2.mpfr(-1)
                ratio = dp / d
                for i in range(1, len(diag)):
                    dp = off2[i - 1] * dp / (d * d) - 1
                    d = diag[i] - mu - off2[i - 1] / d or tiny
                    ratio += dp / d
                step = 1 / ratio
                mu -= step
                if abs(step) <= self.stop:
                    break
            else:
                raise ArithmeticError("Newton-Sturm iteration did not converge")
            counts = [self._negatives(diag, mu - self.probe), self._negatives(diag, mu + self.probe)]
            if counts != [k - 1, k]:
                raise ArithmeticError(f"converged to the wrong eigenvalue (Sturm counts {counts})")
            return mu


class _Perturber:
    """lambda_k after adding an offset to one diagonal entry of a fixed H."""

    def __init__(self, H, precision):
        self.H, self.precision = H, precision
        self.dense = dense_oracle(H, limit=DIRECT_LIMIT)
        self.base = 2 * H.d / H.eps**2
        self.tri = None
        if precision == "extended" and H.is_tridiagonal and np.all(H.csr.diagonal(1) != 0):
            self.tri = _ExtendedTridiagonal(np.diag(self.dense), np.diag(self.dense, 1))

    def __call__(self, k, site, offset, guess):
        xi0 = float(self.H.potential[site])
        if self.precision == "double":
            A = self.dense.copy()
            A[site, site] += offset
            return np.linalg.eigvalsh(A)[k - 1]
        if self.tri is not None:
            with gmpy2.context(precision=_EXTENDED_BITS):
                value = gmpy2.mpfr(self.base) + gmpy2.mpfr(xi0) + gmpy2.mpfr(offset)
                return self.tri.eigenvalue(k, guess, site, value)
        with mpmath.workdps(40):
            A = mpmath.matrix(self.dense.tolist())
            A[site, site] = mpmath.mpf(self.base) + mpmath.mpf(xi0) + mpmath.mpf(offset)
            return sorted(mpmath.eigsy(A, eigvals_only=True))[k - 1]


def _check_precision(precision):
    if precision not in ("double", "extended"):
        raise ValueError(f"precision must be 'double' or 'extended', got {precision!r}")


def _derivative(perturb, w, v, k, site, h):
    g2 = v[site, k - 1] ** 2
    # first-order guesses leave Newton an O(h^2) error to remove
    up = perturb(k, site, h, w[k - 1] + h * g2)
    down = perturb(k, site, -h, w[k - 1] - h * g2)
    if perturb.precision == "extended":
        fd = float((up - down) / (2 * gmpy2.mpfr(h)))
    else:
        fd = float((up - down) / (2 * h))
    return fd, float(g2), float(abs(fd - g2) / max(abs(g2), 1e-14))


def _derivative_gap(w, k, h):
    delta = _delta(w, k)
    if delta <= _gap_tol(w):
        raise DegenerateEigenvalue(f"eigenvalue {k} is degenerate (delta={delta:.3g})")
    if h >= delta:
        raise ValueError(f"step h={h} is not small against the gap delta={delta:.3g}")


def hadamard_derivative_check(H: SparseHamiltonian, k: int, site: int, h: float = 1e-4,
                              precision: str = "extended"):
    """Central difference of lambda_k in xi(site) against g_k(site)^2.

    With ``precision="extended"`` the two perturbed eigenvalues are
    computed to about 40 digits, which removes the roundoff floor of about
    1e-16 * ||H|| / h that otherwise swamps sites where g_k is tiny.
    Returns ``(fd, analytic, rel_err)``.
    """
    _check_k(H, k)
    _check_precision(precision)
    w, v = full_spectrum(H)
    _derivative_gap(w, k, h)
    return _derivative(_Perturber(H, precision), w, v, k, site, h)


def hadamard_derivative_table(H: SparseHamiltonian, k_indices, h: float = 1e-4, precision: str = "extended"):
    """The derivative check at every site for each k, factoring H once.

    Returns rows ``(k, site, fd, analytic, rel_err, error)``; a k whose
    eigenvalue is degenerate, or too close to its neighbours for the step,
    gives NaN rows with the reason in ``error``.
    """
    _check_precision(precision)
    for k in k_indices:
        _check_k(H, k)
    w, v = full_spectrum(H)
    perturb = _Perturber(H, precision)
    rows = []
    for k in k_indices:
        try:
            _derivative_gap(w, k, h)
        except (DegenerateEigenvalue, ValueError) as exc:
            rows.extend((k, site, np.nan, np.nan, np.nan, str(exc)) for site in range(H.dim))
            continue
        rows.extend((k, site, *_derivative(perturb, w, v, k, site, h), None) for site in range(H.dim))
    return rows


def _green_from_spectrum(w, v, k, site):
    mask = np.arange(w.size) != k - 1
    return float(np.sum(v[site, mask] ** 2 / (w[mask] - w[k - 1])))


def spectral_green_diag(H: SparseHamiltonian, k: int, site: int) -> GreenDiag:
    """Reduced-resolvent diagonal from the complete eigendecomposition."""
    _check_k(H, k)
    w, v = full_spectrum(H)
    if _delta(w, k) <= _gap_tol(w):
        raise DegenerateEigenvalue(f"eigenvalue {k} is degenerate")
    return GreenDiag(value=_green_from_spectrum(w, v, k, site), k=k, site=site)


def green_diag_linear_solve(H: SparseHamiltonian, k: int, site: int) -> float:
    """Same quantity via (H - lambda_k) w = (1 - P_k) delta_site with w orthogonal to g_k.

    Solved as the bordered system [[H - lambda, g], [g^T, 0]].
    """
    w_all, v = full_spectrum(H)
    lam, g = w_all[k - 1], v[:, k - 1]
    n = H.dim
    rhs = -g[site] * g
    rhs[site] += 1.0
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = dense_oracle(H) - lam * np.eye(n)
    A[:n, n] = g
    A[n, :n] = g
    sol = linalg.solve(A, np.append(rhs, 0.0), assume_a="sym")
    return float(sol[site])


def green_log_multiplier(H: SparseHamiltonian, k: int, site: int, xi_from: float, xi_to: float,
                         n_quad: int = 64) -> float:
    """Trapezoid rule for the integral of G_k(site, site) as xi(site) runs over the segment.

    Raises ``DegeneracyOnPath`` when lambda_k loses simplicity at a node.
    """
    if n_quad < 2:
        raise ValueError("need at least two quadrature nodes")
    ts = np.linspace(xi_from, xi_to, n_quad)
    vals = np.empty(n_quad)
    A = dense_oracle(H, limit=DIRECT_LIMIT)
    base = A[site, site] - H.potential[site]
    for j, t in enumerate(ts):
        A[site, site] = base + t
        w, v = np.linalg.eigh(A)
        if H.dim > 1 and _delta(w, k) <= _gap_tol(w):
            raise DegeneracyOnPath(f"eigenvalue {k} degenerates at xi(site)={t:.6g}")
        vals[j] = _green_from_spectrum(w, v, k, site)
    return float(np.trapezoid(vals, ts))


def second_variation_check(H: SparseHamiltonian, k: int, site: int, xi_from: float, xi_to: float,
                           n_quad: int = 64):
    """Compare |g_k(site)| after moving xi(site) with the exponential transport formula.

    Returns ``(lhs, rhs, rel_err)``.
    """
    _check_k(H, k)
    log_mult = green_log_multiplier(H, k, site, xi_from, xi_to, n_quad)
    _, v_from = np.linalg.eigh(dense_oracle(H.with_diagonal_entry(site, xi_from), limit=DIRECT_LIMIT))
    _, v_to = np.linalg.eigh(dense_oracle(H.with_diagonal_entry(site, xi_to), limit=DIRECT_LIMIT))
    lhs = abs(v_to[site, k - 1])
    rhs = abs(v_from[site, k - 1]) * np.exp(-log_mult)
    return float(lhs), float(rhs), float(abs(lhs - rhs) / max(abs(lhs), 1e-300))
