"""Sparse assembly of H = -eps^-2 Laplacian + xi with zero exterior."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import LatticeMismatch, TooLarge
from .lattice import LatticeDomain
from .potential import PotentialSample

DENSE_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class SparseHamiltonian:
    """CSR storage of the lattice Anderson Hamiltonian.

    Columns inside a row are sorted, which fixes the per-row accumulation
    order of ``matvec``.
    """

    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    eps: float
    d: int
    diagonal: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.row_offsets.size - 1

    @cached_property
    def csr(self):
        return sparse.csr_matrix((self.values, self.col_indices, self.row_offsets),
                                 shape=(self.dim, self.dim))

    @cached_property
    def norm_estimate(self):
        """Max absolute row sum; equals the 1- and inf-norms for symmetric H."""
        rows = np.repeat(np.arange(self.dim), np.diff(self.row_offsets))
        return float(np.bincount(rows, weights=np.abs(self.values), minlength=self.dim).max())

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise ValueError(f"vector of length {v.shape[0]} does not match dim {self.dim}")
        return self.csr @ v

    @property
    def is_tridiagonal(self):
        return self.d == 1

    def with_diagonal_entry(self, index, value):
        """Copy of H with the potential at one site replaced (diagonal shifted)."""
        values = self.values.copy()
        diagonal = self.diagonal.copy()
        start, stop = self.row_offsets[index], self.row_offsets[index + 1]
        pos = start + int(np.searchsorted(self.col_indices[start:stop], index))
        shift = value - (diagonal[index] - 2 * self.d / self.eps**2)
        values[pos] += shift
        diagonal[index] += shift
        return SparseHamiltonian(self.row_offsets, self.col_indices, values, self.eps, self.d, diagonal)

    @property
    def potential(self):
        return self.diagonal - 2 * self.d / self.eps**2


def assemble(lattice: LatticeDomain, potential) -> SparseHamiltonian:
    """Row x: diagonal 2d/eps^2 + xi(x), and -1/eps^2 per lattice neighbour inside D_eps."""
    if isinstance(potential, PotentialSample):
        if potential.lattice_hash and potential.lattice_hash != lattice.fingerprint():
            raise LatticeMismatch("potential was sampled on a different lattice")
        xi = potential.values
    else:
        xi = np.asarray(potential, dtype=float)
    if xi.shape != (lattice.n,):
        raise LatticeMismatch(f"potential has shape {xi.shape}, lattice has {lattice.n} sites")
    n, d, eps = lattice.n, lattice.d, lattice.eps
    hop = -1.0 / eps**2
    diag = 2 * d / eps**2 + xi
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [diag]
    for axis in range(d):
        for step in (-1, 1):
            shifted = lattice.sites.copy()
            shifted[:, axis] += step
            nb = lattice.lookup(shifted)
            ok = nb >= 0
            rows.append(np.flatnonzero(ok))
            cols.append(nb[ok])
            vals.append(np.full(int(ok.sum()), hop))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=offsets[1:])
    return SparseHamiltonian(offsets, cols.astype(np.int64), vals.astype(float), float(eps), d,
                             diag.astype(float))


def matvec(H: SparseHamiltonian, v):
    return H.matvec(v)


def laplacian_apply(lattice: LatticeDomain, f):
    """(Delta f)(x) = sum over nearest neighbours y of f(y) - f(x), f = 0 off D_eps."""
    f = np.asarray(f, dtype=float)
    if f.shape != (lattice.n,):
        raise LatticeMismatch("vector does not live on this lattice")
    out = -2 * lattice.d * f
    for axis in range(lattice.d):
        for step in (-1, 1):
            shifted = lattice.sites.copy()
            shifted[:, axis] += step
            nb = lattice.lookup(shifted)
            ok = nb >= 0
            out[ok] += f[nb[ok]]
    return out


def gradient_energy(lattice: LatticeDomain, f):
    """||grad f||_2^2 summed over all bonds touching D_eps (f zero outside)."""
    f = np.asarray(f, dtype=float)
    total = 0.0
    for axis in range(lattice.d):
        fwd = lattice.sites.copy()
        fwd[:, axis] += 1
        nb = lattice.lookup(fwd)
        f_fwd = np.where(nb >= 0, f[np.maximum(nb, 0)], 0.0)
        total += np.sum((f_fwd - f) ** 2)
        # bonds entering D_eps from an exterior site on the backward side
        back = lattice.sites.copy()
        back[:, axis] -= 1
        total += np.sum(f[lattice.lookup(back) < 0] ** 2)
    return float(total)


def dense_oracle(H: SparseHamiltonian, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense copy of H built straight from the CSR arrays."""
    if H.dim > limit:
        raise TooLarge(f"dense expansion of dim {H.dim} exceeds the guard {limit}")
    out = np.zeros((H.dim, H.dim))
    rows = np.repeat(np.arange(H.dim), np.diff(H.row_offsets))
    out[rows, H.col_indices] = H.values
    return out


def write_coo(H: SparseHamiltonian, path) -> Path:
    """Plain-text coordinate dump: ``row col value`` per line, 17 significant digits."""
    path = Path(path)
    rows = np.repeat(np.arange(H.dim), np.diff(H.row_offsets))
    with path.open("w") as fh:
        for i, j, v in zip(rows, H.col_indices, H.values):
            fh.write(f"{i} {j} {v:.17g}\n")
    return path


def read_coo(path, dim=None) -> sparse.coo_matrix:
    data = np.loadtxt(path, ndmin=2)
    rows, cols = data[:, 0].astype(int), data[:, 1].astype(int)
    n = dim if dim is not None else int(max(rows.max(), cols.max())) + 1
    return sparse.coo_matrix((data[:, 2], (rows, cols)), shape=(n, n))
