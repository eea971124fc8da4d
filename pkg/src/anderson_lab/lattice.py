"""Continuum domains, their lattice discretizations and scaled norms."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLattice, LatticeMismatch, UnsupportedDomain

DOMAIN_KINDS = ("box", "ball")


@dataclass(frozen=True)
class ContinuumDomain:
    """A bounded open convex set: an axis-aligned box or a Euclidean ball."""

    kind: str
    d: int
    bounds: tuple = ()
    center: tuple = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise UnsupportedDomain(
                f"domain kind {self.kind!r} is not supported (use one of {DOMAIN_KINDS})")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.kind == "box":
            if len(self.bounds) != self.d:
                raise ValueError("box needs one (lo, hi) interval per axis")
            for lo, hi in self.bounds:
                if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                    raise ValueError(f"box interval ({lo}, {hi}) must be finite and nonempty")
        else:
            if len(self.center) != self.d:
                raise ValueError("ball center must have d coordinates")
            if not self.radius > 0:
                raise ValueError("ball radius must be positive")

    @classmethod
    def box(cls, bounds):
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        return cls("box", len(bounds), bounds=bounds)

    @classmethod
    def unit_box(cls, d):
        return cls.box([(0.0, 1.0)] * d)

    @classmethod
    def ball(cls, center, radius):
        center = tuple(float(c) for c in center)
        return cls("ball", len(center), center=center, radius=float(radius))

    @property
    def volume(self):
        if self.kind == "box":
            return math.prod(hi - lo for lo, hi in self.bounds)
        return math.pi ** (self.d / 2) / math.gamma(self.d / 2 + 1) * self.radius**self.d

    @property
    def bounding_box(self):
        if self.kind == "box":
            return self.bounds
        return tuple((c - self.radius, c + self.radius) for c in self.center)

    def contains(self, points):
        """Membership of ``points`` (shape ``(n, d)``) in the open set."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "box":
            lo = np.array([b[0] for b in self.bounds])
            hi = np.array([b[1] for b in self.bounds])
            return np.all((points > lo) & (points < hi), axis=1)
        c = np.asarray(self.center)
        return np.sum((points - c) ** 2, axis=1) < self.radius**2

    def describe(self):
        if self.kind == "box":
            return {"kind": "box", "bounds": [list(b) for b in self.bounds]}
        return {"kind": "ball", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class LatticeDomain:
    """The sites x in Z^d whose closed l-infinity eps-cube around eps*x lies in D.

    ``sites`` is an ``(n, d)`` integer array in lexicographic order; the row
    number of a site is its vector index everywhere downstream.
    """

    eps: float
    sites: np.ndarray
    domain: ContinuumDomain | None = None
    _origin: np.ndarray = field(init=False, repr=False)
    _grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sites = np.ascontiguousarray(np.atleast_2d(np.asarray(self.sites, dtype=np.int64)))
        if sites.shape[0] == 0:
            raise EmptyLattice("lattice has no sites")
        order = np.lexsort(sites.T[::-1])
        sites = sites[order]
        if np.any(np.all(np.diff(sites, axis=0) == 0, axis=1)):
            raise ValueError("sites must be unique")
        sites.setflags(write=False)
        origin = sites.min(axis=0)
        shape = tuple(sites.max(axis=0) - origin + 1)
        grid = np.full(shape, -1, dtype=np.int64)
        grid[tuple((sites - origin).T)] = np.arange(sites.shape[0])
        grid.setflags(write=False)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "_origin", origin)
        object.__setattr__(self, "_grid", grid)

    @property
    def d(self):
        return self.sites.shape[1]

    @property
    def n(self):
        return self.sites.shape[0]

    def __len__(self):
        return self.n

    @property
    def points(self):
        """Scaled site positions eps*x, shape ``(n, d)``."""
        return self.eps * self.sites

    def lookup(self, sites):
        """Vector indices of ``sites`` (shape ``(m, d)``); -1 where absent."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        rel = sites - self._origin
        inside = np.all((rel >= 0) & (rel < np.array(self._grid.shape)), axis=1)
        out = np.full(sites.shape[0], -1, dtype=np.int64)
        out[inside] = self._grid[tuple(rel[inside].T)]
        return out

    def index_of(self, site):
        idx = int(self.lookup([site])[0])
        if idx < 0:
            raise KeyError(tuple(site))
        return idx

    def fingerprint(self):
        """Stable hash of (eps, sites) used to tie dumped samples to a lattice."""
        h = hashlib.sha256()
        h.update(np.float64(self.eps).tobytes())
        h.update(np.int64(self.d).tobytes())
        h.update(self.sites.astype("<i8").tobytes())
        return h.hexdigest()

    def same_as(self, other):
        return self is other or (
            self.eps == other.eps and self.sites.shape == other.sites.shape
            and np.array_equal(self.sites, other.sites))


def discretize(domain: ContinuumDomain, eps: float) -> LatticeDomain:
    """Return D_eps = {x : dist_inf(eps*x, D^c) > eps}.

    For convex D the closed cube of half-width eps around eps*x lies in the
    open set D exactly when all of its 2^d corners do.
    """
    if not isinstance(domain, ContinuumDomain):
        raise UnsupportedDomain(f"cannot discretize {type(domain).__name__}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    axes = []
    for lo, hi in domain.bounding_box:
        axes.append(np.arange(math.floor(lo / eps), math.ceil(hi / eps) + 1, dtype=np.int64))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)
    keep = np.ones(mesh.shape[0], dtype=bool)
    for corner in itertools.product((-1, 1), repeat=domain.d):
        # (x +- 1) * eps rather than eps*x +- eps keeps lattice-aligned corners exact
        keep &= domain.contains((mesh + np.asarray(corner)) * eps)
    if not keep.any():
        raise EmptyLattice(f"no site of the {eps}-lattice fits inside {domain.describe()}")
    return LatticeDomain(eps=float(eps), sites=mesh[keep], domain=domain)


def scaled_norm(f, eps, p, d):
    """(eps^d sum |f|^p)^(1/p); ``p = inf`` gives max |f|."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    f = np.abs(np.asarray(f, dtype=float))
    if f.size == 0:
        return 0.0
    if math.isinf(p):
        return float(f.max())
    scale = f.max()
    if scale == 0:
        return 0.0
    return float(scale * (eps**d * np.sum((f / scale) ** p)) ** (1.0 / p))


def scaled_inner(f, g, eps, d):
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        raise LatticeMismatch(f"vectors of shapes {f.shape} and {g.shape} live on different lattices")
    return float(eps**d * np.dot(f, g))


def _block_groups(sites, L):
    blocks = np.floor_divide(sites, L)
    keys, inverse = np.unique(blocks, axis=0, return_inverse=True)
    return keys, inverse.reshape(-1)


def block_average(f, L, sites=None):
    """Average ``f`` over the blocks B_L(y) = L*y + {0..L-1}^d.

    ``f`` is zero outside ``sites`` (default: ``0..len(f)-1`` in one
    dimension).  Returns ``(out_sites, out_values)`` covering every site of
    every block that meets the support, so the total mass is preserved.
    """
    if not (isinstance(L, (int, np.integer)) and L > 0):
        raise ValueError(f"block side must be a positive integer, got {L}")
    f = np.asarray(f, dtype=float)
    if sites is None:
        sites = np.arange(f.size)[:, None]
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    d = sites.shape[1]
    keys, inverse = _block_groups(sites, L)
    means = np.bincount(inverse, weights=f, minlength=len(keys)) / L**d
    offsets = np.stack(np.meshgrid(*[np.arange(L)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    out_sites = (keys[:, None, :] * L + offsets[None, :, :]).reshape(-1, d)
    out_vals = np.repeat(means, L**d)
    order = np.lexsort(out_sites.T[::-1])
    return out_sites[order], out_vals[order]


def blocked_norm(f, sites, L, eps, p):
    """Scaled l^p norm of the block average of ``f`` without materializing it."""
    f = np.asarray(f, dtype=float)
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    d = sites.shape[1]
    keys, inverse = _block_groups(sites, L)
    means = np.bincount(inverse, weights=f, minlength=len(keys)) / L**d
    if math.isinf(p):
        return float(np.abs(means).max())
    return float((eps**d * L**d * np.sum(np.abs(means) ** p)) ** (1.0 / p))


def sample_profile(fn, lattice: LatticeDomain):
    """Entry fn(eps*x) at every site x."""
    return np.asarray(fn(lattice.points), dtype=float).reshape(lattice.n)
