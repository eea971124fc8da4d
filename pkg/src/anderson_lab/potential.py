"""Random potentials: sampling, truncation, parameter windows, event checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .errors import EmptyWindow, LatticeMismatch
from .lattice import LatticeDomain, blocked_norm, sample_profile, scaled_inner, scaled_norm
from .profiles import Profile, as_profile
from .seeding import uniforms

FAMILIES = ("uniform", "gaussian", "pareto", "pareto-negative")


@dataclass(frozen=True)
class PotentialModel:
    """Law of the i.i.d. field xi(x) = loc(eps*x) + scale(eps*x) * Z.

    ``Z`` is the native draw of ``family``: uniform on [-a, a], centered
    Gaussian with s.d. ``a``, symmetric Pareto with P(|Z| > t) = t^-K ^ 1,
    or one-sided negative Pareto with P(Z <= -t) = t^-K ^ 1.

    ``mean`` and ``variance`` are optional profiles.  When ``variance`` is
    set, Z is rescaled to that variance (the native variance must be
    finite); when ``mean`` is set, the field is recentered to that mean
    (the native mean must exist).  Leaving either unset keeps the native
    law, which is how the heavy-tailed counterexamples are run.
    """

    family: str
    a: float = 1.0
    K: float = math.inf
    mean: Profile | None = None
    variance: Profile | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "mean", as_profile(self.mean))
        object.__setattr__(self, "variance", as_profile(self.variance))
        if self.family in ("uniform", "gaussian"):
            if not self.a > 0:
                raise ValueError("family scale a must be positive")
            object.__setattr__(self, "K", math.inf)
        elif not (self.K > 0 and math.isfinite(self.K)):
            raise ValueError("Pareto families need a finite tail index K > 0")
        if self.variance is not None and not math.isfinite(self.native_variance):
            raise ValueError(
                f"{self.family} with K={self.K} has infinite variance; cannot rescale to a variance profile")
        if self.mean is not None and not math.isfinite(self.native_mean):
            raise ValueError(f"{self.family} with K={self.K} has no mean; cannot recenter")

    @property
    def bounded(self):
        return self.family == "uniform"

    @property
    def native_mean(self):
        if self.family in ("uniform", "gaussian"):
            return 0.0
        if self.K <= 1:
            return math.nan
        return 0.0 if self.family == "pareto" else -self.K / (self.K - 1)

    @property
    def native_variance(self):
        if self.family == "uniform":
            return self.a**2 / 3
        if self.family == "gaussian":
            return self.a**2
        if self.K <= 2:
            return math.inf
        second = self.K / (self.K - 2)
        return second - self.native_mean**2

    def native_abs_moment(self, r):
        """E|Z|^r in closed form."""
        if self.family == "uniform":
            return self.a**r / (r + 1)
        if self.family == "gaussian":
            return self.a**r * 2 ** (r / 2) * special.gamma((r + 1) / 2) / math.sqrt(math.pi)
        return self.K / (self.K - r) if r < self.K else math.inf

    def scale_at(self, points):
        n = np.atleast_2d(points).shape[0]
        if self.variance is None:
            return np.ones(n)
        v = self.variance(points)
        if np.any(v < 0):
            raise ValueError("variance profile must be nonnegative")
        return np.sqrt(v / self.native_variance)

    def loc_at(self, points):
        n = np.atleast_2d(points).shape[0]
        if self.mean is None:
            return np.zeros(n)
        return self.mean(points) - self.scale_at(points) * self.native_mean

    def mean_at(self, points):
        """E xi at the given continuum points; raises when the mean does not exist."""
        if self.mean is not None:
            return self.mean(points)
        if not math.isfinite(self.native_mean):
            raise ValueError(f"{self.family} with K={self.K} has no mean")
        return self.scale_at(points) * self.native_mean

    def variance_at(self, points):
        if self.variance is not None:
            return self.variance(points)
        return self.scale_at(points) ** 2 * self.native_variance

    def abs_moment_at(self, points, r):
        """E|xi|^r at each point, for xi = loc + scale*Z."""
        loc = self.loc_at(points)
        scale = self.scale_at(points)
        pairs, inverse = np.unique(np.stack([loc, scale], axis=1), axis=0, return_inverse=True)
        values = np.array([self._shifted_abs_moment(c, s, r) for c, s in pairs])
        return values[inverse.reshape(-1)]

    def _shifted_abs_moment(self, c, s, r):
        if s == 0:
            return abs(c) ** r
        if c == 0:
            return s**r * self.native_abs_moment(r)
        if self.family == "uniform":
            def F(t):
                return np.sign(t) * abs(t) ** (r + 1) / (r + 1)
            lo, hi = c - s * self.a, c + s * self.a
            return float((F(hi) - F(lo)) / (hi - lo))
        if self.family == "gaussian":
            sd = s * self.a
            return float(sd**r * 2 ** (r / 2) * special.gamma((r + 1) / 2) / math.sqrt(math.pi)
                         * special.hyp1f1(-r / 2, 0.5, -c**2 / (2 * sd**2)))
        if r >= self.K:
            return math.inf
        # Pareto tails: |t| >= 1 with density K t^(-K-1) (halved per side if symmetric)
        K = self.K

        def side(sign):
            val, _ = integrate.quad(lambda t: abs(c + sign * s * t) ** r * K * t ** (-K - 1), 1, np.inf)
            return val
        if self.family == "pareto":
            return 0.5 * (side(1.0) + side(-1.0))
        return side(-1.0)

    def describe(self):
        out = {"family": self.family}
        if self.family in ("uniform", "gaussian"):
            out["a"] = self.a
        else:
            out["K"] = self.K
        if self.mean is not None:
            out["mean"] = self.mean.describe()
        if self.variance is not None:
            out["variance"] = self.variance.describe()
        return out


@dataclass(frozen=True, eq=False)
class PotentialSample:
    values: np.ndarray
    seed: int
    eps: float
    truncated: bool = False
    kappa: float | None = None
    lattice_hash: str = field(default="", compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def native_draws(model: PotentialModel, n: int, seed: int) -> np.ndarray:
    """``n`` native draws Z; position i depends only on (seed, i)."""
    u = uniforms(seed, n, stream=0)
    if model.family == "uniform":
        return model.a * (2.0 * u - 1.0)
    if model.family == "gaussian":
        return model.a * special.ndtri(u)
    magnitude = u ** (-1.0 / model.K)
    if model.family == "pareto-negative":
        return -magnitude
    sign = np.where(uniforms(seed, n, stream=1) < 0.5, -1.0, 1.0)
    return sign * magnitude


def sample_potential(model: PotentialModel, lattice: LatticeDomain, seed: int) -> PotentialSample:
    points = lattice.points
    z = native_draws(model, lattice.n, seed)
    values = model.loc_at(points) + model.scale_at(points) * z
    return PotentialSample(values=values, seed=int(seed), eps=lattice.eps,
                           lattice_hash=lattice.fingerprint())


def tilted_tail_sample(model: PotentialModel, lattice: LatticeDomain, seed: int, kappa: float,
                       tail_index: float) -> tuple[PotentialSample, float]:
    """Importance-sampling draw for the native one-sided Pareto field.

    Below the truncation threshold t0 = eps^-kappa the draw is the plain
    one (same uniforms).  A site beyond it is redrawn from the heavier
    conditional tail P(Z <= -t | Z <= -t0) = (t0/t)^tail_index.  Returns the
    sample and the log likelihood ratio, sum over exceeding sites of
    log(K/tail_index) + (tail_index - K) log(t/t0), so that
    E[w f(xi)] = E f(xi) under the true law.
    """
    if model.family != "pareto-negative" or model.mean is not None or model.variance is not None:
        raise ValueError("tilted sampling is defined for the native one-sided Pareto family only")
    if not tail_index > 0:
        raise ValueError("tail_index must be positive")
    t0 = truncation_threshold(lattice.eps, kappa)
    if t0 < 1:
        raise ValueError("truncation threshold below the Pareto support; nothing to tilt")
    K = model.K
    u = uniforms(seed, lattice.n, stream=0)
    p = t0 ** (-K)
    hit = u < p
    values = -(u ** (-1.0 / K))
    t = t0 * (u[hit] / p) ** (-1.0 / tail_index)
    values[hit] = -t
    log_w = float(np.sum(math.log(K / tail_index) + (tail_index - K) * np.log(t / t0)))
    sample = PotentialSample(values=values, seed=int(seed), eps=lattice.eps, lattice_hash=lattice.fingerprint())
    return sample, log_w


def truncation_threshold(eps, kappa):
    return eps ** (-kappa)


def truncate(sample: PotentialSample, kappa: float):
    """Zero every entry with |xi| > eps^-kappa.

    Returns ``(truncated_sample, changed)``.
    """
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    threshold = truncation_threshold(sample.eps, kappa)
    hit = np.abs(sample.values) > threshold
    values = np.where(hit, 0.0, sample.values)
    out = PotentialSample(values=values, seed=sample.seed, eps=sample.eps, truncated=True,
                          kappa=float(kappa), lattice_hash=sample.lattice_hash)
    return out, bool(hit.any())


def _midpoint(lo, hi, what):
    if not lo < hi:
        raise EmptyWindow(f"{what} window ({lo:.6g}, {hi:.6g}) is empty", (lo, hi))
    return 0.5 * (lo + hi)


def kappa_window(K, d, mode):
    if mode == "homogenization":
        upper = min(d, 2)
    elif mode == "clt":
        upper = min(2, d / 2)
    else:
        raise ValueError(f"mode must be 'homogenization' or 'clt', got {mode!r}")
    return d / K, upper


def choose_kappa(K, d, mode):
    """Midpoint of (d/K, d ^ 2) for homogenization or (d/K, 2 ^ d/2) for the CLT."""
    lo, hi = kappa_window(K, d, mode)
    return _midpoint(lo, hi, f"kappa ({mode}, K={K}, d={d})")


def r_window(d, kappa):
    return max(1.0, d / 2), d / kappa


def choose_r(d, kappa):
    lo, hi = r_window(d, kappa)
    return _midpoint(lo, hi, f"r (d={d}, kappa={kappa})")


def rho_window(d, kappa, r):
    return 0.0, 1.0 - kappa * r / d


def choose_rho(d, kappa, r):
    lo, hi = rho_window(d, kappa, r)
    return _midpoint(lo, hi, f"rho (d={d}, kappa={kappa}, r={r})")


def block_side(eps, rho):
    return max(1, int(round(eps ** (-rho))))


@dataclass(frozen=True)
class EventReport:
    projection_stats: float
    xi_r_norm: float
    moment_bound: float
    blocked_norm: float
    L: int
    in_E: bool
    in_F: bool


def event_diagnostics(sample: PotentialSample, lattice: LatticeDomain, eigenfunctions, model: PotentialModel,
                      gamma: float, r: float, rho: float, kappa: float | None = None,
                      e_constant: float = 4.0, moment_bound: float | None = None) -> EventReport:
    """Evaluate the good events E_{k,eps,gamma} and F_{eps,gamma} on one sample.

    ``eigenfunctions`` are the L^2-normalized continuum eigenfunctions for
    indices 1..k, either as callables on ``(n, d)`` point arrays or as an
    ``(n_sites, k)`` array of their values at eps*x.
    """
    if sample.values.shape != (lattice.n,):
        raise LatticeMismatch("sample and lattice sizes differ")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    kappa = sample.kappa if kappa is None else kappa
    lo, hi = rho_window(lattice.d, kappa, r) if kappa is not None else (0.0, 1.0)
    if not lo < rho < hi:
        raise EmptyWindow(f"rho={rho} outside its window ({lo:.6g}, {hi:.6g})", (lo, hi))
    d, eps = lattice.d, lattice.eps
    points = lattice.points
    centered = sample.values - model.mean_at(points)
    if isinstance(eigenfunctions, np.ndarray):
        columns = eigenfunctions.reshape(lattice.n, -1).T
    else:
        columns = [sample_profile(phi, lattice) for phi in eigenfunctions]
    proj = 0.0
    for phi in columns:
        proj = max(proj, abs(scaled_inner(centered, phi**2, eps, d)))
    xi_norm = scaled_norm(sample.values, eps, r, d)
    bound = moment_bound
    if bound is None:
        bound = r_moment_bound(model, lattice, r, e_constant)
    L = block_side(eps, rho)
    bnorm = blocked_norm(-centered, lattice.sites, L, eps, r)
    in_E = bool(proj < gamma and xi_norm < bound)
    return EventReport(projection_stats=float(proj), xi_r_norm=xi_norm, moment_bound=bound,
                       blocked_norm=bnorm, L=L, in_E=in_E, in_F=bool(bnorm < gamma))


def r_moment_bound(model: PotentialModel, lattice: LatticeDomain, r: float, e_constant: float = 4.0):
    """The threshold e_constant * |D| * max_x E|xi(x)|^r used by the event E."""
    return e_constant * lattice.domain.volume * float(np.max(model.abs_moment_at(lattice.points, r)))


def dump_sample(sample: PotentialSample, lattice: LatticeDomain, path) -> tuple[Path, Path]:
    """Write ``<path>.f64`` (little-endian doubles) and a ``<path>.json`` sidecar."""
    path = Path(path)
    raw = path.with_suffix(".f64")
    side = path.with_suffix(".json")
    raw.write_bytes(sample.values.astype("<f8").tobytes())
    meta = {"seed": sample.seed, "eps": sample.eps, "n": lattice.n, "d": lattice.d,
            "lattice_hash": lattice.fingerprint(), "truncated": sample.truncated,
            "kappa": sample.kappa}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return raw, side


def load_sample(path, lattice: LatticeDomain | None = None) -> PotentialSample:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8")
    if values.size != meta["n"]:
        raise ValueError("sample payload length disagrees with its sidecar")
    if lattice is not None and lattice.fingerprint() != meta["lattice_hash"]:
        raise LatticeMismatch("sample was dumped on a different lattice")
    return PotentialSample(values=values.copy(), seed=meta["seed"], eps=meta["eps"],
                           truncated=meta["truncated"], kappa=meta["kappa"],
                           lattice_hash=meta["lattice_hash"])
