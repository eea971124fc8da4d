"""Monte Carlo ensembles over potential draws and their statistics.

Sample j at the i-th spacing of ``eps_list`` uses the seed
``derive_seed(base_seed, i, j)``; the raw and truncated spectra of a sample
come from the same draw.  Results are a pure function of the config.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as _replace

import numpy as np
from scipy import stats

from .eigensolve import ContinuumReference, continuum_reference, lowest_k, warn_if_degenerate
from .errors import AndersonLabError, DegenerateEigenvalue, DegenerateSample, EmptyWindow
from .hamiltonian import assemble
from .lattice import ContinuumDomain, LatticeDomain, discretize, sample_profile
from .potential import (PotentialModel, choose_kappa, choose_rho, event_diagnostics, kappa_window,
                        r_moment_bound, r_window, rho_window, sample_potential, tilted_tail_sample, truncate,
                        truncation_threshold)
from .profiles import as_profile
from .seeding import derive_seed

KAPPA_MODES = ("auto", "clt", "homogenization", "free")


@dataclass(frozen=True)
class EnsembleConfig:
    domain: ContinuumDomain
    model: PotentialModel
    eps_list: tuple
    k_indices: tuple = (1,)
    n_samples: int = 100
    base_seed: int = 0
    kappa: float | None = None
    r: float | None = None
    rho: float | None = None
    gamma: float = 0.5
    e_constant: float = 4.0
    kappa_mode: str = "auto"
    fine_eps: float | None = None
    eig_tol: float = 1e-10
    events: bool = True
    workers: int = 1
    tail_index: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "eps_list", tuple(float(e) for e in self.eps_list))
        object.__setattr__(self, "k_indices", tuple(int(k) for k in self.k_indices))
        if not self.eps_list or any(not e > 0 for e in self.eps_list):
            raise ValueError("eps_list must hold positive spacings")
        if len(set(self.k_indices)) != len(self.k_indices) or any(k < 1 for k in self.k_indices):
            raise ValueError("k_indices must be distinct positive integers")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.kappa_mode not in KAPPA_MODES:
            raise ValueError(f"kappa_mode must be one of {KAPPA_MODES}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.tail_index is not None and not self.tail_index > 0:
            raise ValueError("tail_index must be positive")

    @property
    def d(self):
        return self.domain.d

    @property
    def kmax(self):
        return max(self.k_indices)

    @property
    def reference_eps(self):
        return self.fine_eps if self.fine_eps is not None else min(self.eps_list) / 4


@dataclass(frozen=True)
class Parameters:
    kappa: float
    kappa_mode: str
    r: float | None
    rho: float | None


def resolve_parameters(config: EnsembleConfig) -> Parameters:
    """Pick kappa, r and rho (window midpoints unless overridden).

    Overrides outside their window raise ``EmptyWindow`` carrying the legal
    interval.  r and rho come back as None when their windows are empty, in
    which case event diagnostics are skipped.
    """
    d, K = config.d, config.model.K
    mode = config.kappa_mode
    if mode == "auto":
        lo, hi = kappa_window(K, d, "clt")
        mode = "clt" if lo < hi else "homogenization"
    if mode == "free":
        if config.kappa is None:
            raise ValueError("kappa_mode 'free' needs an explicit kappa")
        kappa = config.kappa
    else:
        lo, hi = kappa_window(K, d, mode)
        if config.kappa is None:
            kappa = choose_kappa(K, d, mode)
        elif not lo < config.kappa < hi:
            raise EmptyWindow(f"kappa={config.kappa} outside the {mode} window ({lo:.6g}, {hi:.6g})", (lo, hi))
        else:
            kappa = config.kappa
    lo, hi = r_window(d, kappa)
    if config.r is not None:
        if not lo < config.r < hi:
            raise EmptyWindow(f"r={config.r} outside its window ({lo:.6g}, {hi:.6g})", (lo, hi))
        r = config.r
    else:
        r = 0.5 * (lo + hi) if lo < hi else None
    rho = None
    if r is not None:
        lo, hi = rho_window(d, kappa, r)
        if config.rho is not None:
            if not lo < config.rho < hi:
                raise EmptyWindow(f"rho={config.rho} outside its window ({lo:.6g}, {hi:.6g})", (lo, hi))
            rho = config.rho
        elif lo < hi:
            rho = choose_rho(d, kappa, r)
    return Parameters(kappa=float(kappa), kappa_mode=mode, r=r, rho=rho)


@dataclass(frozen=True, eq=False)
class SampleRecord:
    eps: float
    eps_index: int
    sample_id: int
    seed: int
    lambda_raw: np.ndarray
    lambda_trunc: np.ndarray
    truncation_hit: bool
    xi_min: float
    in_E: bool | None = None
    in_F: bool | None = None
    error: str | None = None
    log_weight: float = 0.0


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    config: EnsembleConfig
    parameters: Parameters
    records: tuple
    lattice_sizes: tuple
    reference: ContinuumReference | None = None
    excluded: tuple = ()

    def at(self, eps):
        out = [rec for rec in self.records if math.isclose(rec.eps, eps, rel_tol=1e-12)]
        if not out:
            raise KeyError(f"no records at eps={eps}")
        return out

    def column(self, eps, k, which="raw"):
        pos = self.config.k_indices.index(k)
        attr = "lambda_raw" if which == "raw" else "lambda_trunc"
        return np.array([getattr(rec, attr)[pos] for rec in self.at(eps)])


class _Level:
    """Everything shared by the samples at one lattice spacing."""

    def __init__(self, config, params, eps_index, reference):
        self.eps_index = eps_index
        self.eps = config.eps_list[eps_index]
        self.lattice = discretize(config.domain, self.eps)
        self.events = None
        if config.events and reference is not None and params.rho is not None:
            phis = np.column_stack([sample_profile(reference.eigenfunction(j), self.lattice)
                                    for j in range(1, config.kmax + 1)])
            bound = r_moment_bound(config.model, self.lattice, params.r, config.e_constant)
            self.events = (phis, bound)


def _solve(lattice, xi, kmax, tol):
    count = min(kmax, lattice.n)
    spec = lowest_k(assemble(lattice, xi), count, tol=tol)
    vals = np.full(kmax, np.nan)
    vals[:count] = spec.eigenvalues
    return vals


def _run_sample(config: EnsembleConfig, params: Parameters, level: _Level, sample_id: int) -> SampleRecord:
    seed = derive_seed(config.base_seed, level.eps_index, sample_id)
    idx = np.array(config.k_indices) - 1
    lattice = level.lattice
    log_w = 0.0
    if config.tail_index is None:
        sample = sample_potential(config.model, lattice, seed)
    else:
        sample, log_w = tilted_tail_sample(config.model, lattice, seed, params.kappa, config.tail_index)
    trunc, hit = truncate(sample, params.kappa)
    nan = np.full(idx.size, np.nan)
    in_E = in_F = None
    if level.events is not None:
        phis, bound = level.events
        rep = event_diagnostics(trunc, lattice, phis, config.model, config.gamma, params.r, params.rho,
                                kappa=params.kappa, e_constant=config.e_constant, moment_bound=bound)
        in_E, in_F = rep.in_E, rep.in_F
    try:
        raw = _solve(lattice, sample.values, config.kmax, config.eig_tol)
        tr = _solve(lattice, trunc.values, config.kmax, config.eig_tol) if hit else raw
    except AndersonLabError as exc:
        return SampleRecord(level.eps, level.eps_index, sample_id, seed, nan, nan, hit,
                            float(sample.values.min()), in_E, in_F, error=str(exc), log_weight=log_w)
    return SampleRecord(level.eps, level.eps_index, sample_id, seed, raw[idx], tr[idx], hit,
                        float(sample.values.min()), in_E, in_F, log_weight=log_w)


def continuum_for(config: EnsembleConfig, kmax: int | None = None):
    """Continuum reference for the mean profile U = E xi, or None when the mean does not exist."""
    model = config.model
    if model.mean is not None:
        U = model.mean
    elif not math.isfinite(model.native_mean):
        return None
    elif model.variance is None or model.native_mean == 0:
        U = as_profile(model.native_mean)
    else:
        U = as_profile(model.mean_at)
    return continuum_reference(config.domain, U, kmax or config.kmax, config.reference_eps, two_grid=False)


def run_ensemble(config: EnsembleConfig, reference: ContinuumReference | None = None) -> EnsembleResult:
    params = resolve_parameters(config)
    if reference is None:
        reference = continuum_for(config)
    excluded = ()
    if reference is not None:
        excluded = tuple(warn_if_degenerate(reference, config.k_indices))
    levels = [_Level(config, params, i, reference) for i in range(len(config.eps_list))]
    jobs = [(level, j) for level in levels for j in range(config.n_samples)]
    if config.workers == 1:
        records = [_run_sample(config, params, level, j) for level, j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(lambda job: _run_sample(config, params, *job), jobs))
    return EnsembleResult(config=config, parameters=params, records=tuple(records),
                          lattice_sizes=tuple(level.lattice.n for level in levels),
                          reference=reference, excluded=excluded)


def rescaled_fluctuations(result: EnsembleResult, eps: float, k: int) -> np.ndarray:
    """(lambda_k(xi_j) - mean_j lambda_k(truncated xi_j)) / eps^(d/2)."""
    raw = result.column(eps, k, "raw")
    tr = result.column(eps, k, "trunc")
    good = np.isfinite(raw) & np.isfinite(tr)
    if good.sum() < 2:
        raise ValueError(f"fewer than two usable samples at eps={eps}")
    return (raw[good] - tr[good].mean()) / eps ** (result.config.d / 2)


def predicted_covariance(reference: ContinuumReference, V, k_indices) -> np.ndarray:
    """sigma^2_ij = integral over D of phi_ki^2 phi_kj^2 V by the reference's midpoint rule."""
    V = as_profile(V)
    flags = reference.simple_flags
    for k in k_indices:
        if k > reference.k:
            raise ValueError(f"reference holds {reference.k} eigenfunctions, index {k} requested")
        if not flags[k - 1]:
            raise DegenerateEigenvalue(f"continuum eigenvalue {k} is degenerate")
    sq = reference.values[:, np.array(k_indices) - 1] ** 2
    weighted = sq * V(reference.nodes)[:, None]
    return reference.weight * (sq.T @ weighted)


def discrete_covariance(lattice: LatticeDomain, eigenvectors, V, k_indices) -> np.ndarray:
    """Cross-check: eps^-d sum_x g_ki(x)^2 g_kj(x)^2 V(eps x) from one set of lattice eigenvectors."""
    V = as_profile(V)
    sq = np.asarray(eigenvectors)[:, np.array(k_indices) - 1] ** 2
    return lattice.eps ** (-lattice.d) * (sq.T @ (sq * V(lattice.points)[:, None]))


def empirical_covariance(fluct) -> np.ndarray:
    """Unbiased sample covariance of the rows of ``fluct`` (one row per index)."""
    rows = [np.asarray(f, dtype=float) for f in fluct]
    if len({r.size for r in rows}) != 1:
        raise ValueError("fluctuation vectors have different lengths")
    if rows[0].size < 2:
        raise ValueError("need at least two samples")
    return np.atleast_2d(np.cov(np.vstack(rows), ddof=1))


def normality_tests(fluct, sigma2: float):
    """KS test against Normal(0, sigma2) plus sample skewness and excess kurtosis.

    Returns ``(ks_stat, ks_p, skew, ex_kurtosis)``; the p-value is the
    asymptotic Kolmogorov one.
    """
    x = np.asarray(fluct, dtype=float)
    if x.size < 100:
        raise ValueError("normality tests need at least 100 samples")
    if not sigma2 > 0:
        raise ValueError("predicted variance must be positive")
    if np.ptp(x) == 0:
        raise DegenerateSample("fluctuations have zero spread")
    res = stats.kstest(x, "norm", args=(0.0, math.sqrt(sigma2)), method="asymp")
    return float(res.statistic), float(res.pvalue), float(stats.skew(x)), float(stats.kurtosis(x))


@dataclass(frozen=True, eq=False)
class CltReport:
    eps: float
    k_indices: tuple
    samples: np.ndarray
    empirical: np.ndarray
    predicted: np.ndarray
    ks_stat: np.ndarray
    ks_p: np.ndarray
    skew: np.ndarray
    ex_kurtosis: np.ndarray
    mean_se: np.ndarray = field(default=None)

    def summary(self):
        return {
            "eps": self.eps,
            "k_indices": list(self.k_indices),
            "n_samples": int(self.samples.shape[1]),
            "empirical_covariance": self.empirical.tolist(),
            "predicted_covariance": self.predicted.tolist(),
            "ks_stat": self.ks_stat.tolist(),
            "ks_p": self.ks_p.tolist(),
            "skew": self.skew.tolist(),
            "ex_kurtosis": self.ex_kurtosis.tolist(),
            "centering_se": self.mean_se.tolist(),
        }


def clt_report(result: EnsembleResult, eps: float, reference: ContinuumReference | None = None) -> CltReport:
    """Rescaled fluctuations at one spacing against the predicted Gaussian law.

    Degenerate continuum indices are dropped (with a warning from
    ``run_ensemble``).  ``centering_se`` is the standard error of the
    Monte Carlo centering, in rescaled units.
    """
    reference = reference or result.reference
    if reference is None:
        raise ValueError("CLT analysis needs a continuum reference (the mean must exist)")
    variance = result.config.model.variance
    if variance is None:
        variance = as_profile(result.config.model.native_variance)
    ks = [k for k in result.config.k_indices if k not in result.excluded]
    samples = np.vstack([rescaled_fluctuations(result, eps, k) for k in ks])
    emp = empirical_covariance(samples)
    pred = predicted_covariance(reference, variance, ks)
    tests = [normality_tests(samples[i], pred[i, i]) for i in range(len(ks))]
    tr_sd = np.array([np.std(result.column(eps, k, "trunc"), ddof=1) for k in ks])
    se = tr_sd / math.sqrt(samples.shape[1]) / eps ** (result.config.d / 2)
    cols = np.array(tests).T
    return CltReport(eps=eps, k_indices=tuple(ks), samples=samples, empirical=emp, predicted=pred,
                     ks_stat=cols[0], ks_p=cols[1], skew=cols[2], ex_kurtosis=cols[3], mean_se=se)


def _iqr(x):
    q75, q25 = np.percentile(x, [75, 25])
    return float(q75 - q25)


@dataclass(frozen=True, eq=False)
class ExperimentTable:
    rows: list
    result: EnsembleResult
    notes: dict = field(default_factory=dict)


def convergence_experiment(config: EnsembleConfig) -> ExperimentTable:
    """Median and spread of lambda_k down the eps ladder beside the continuum limit.

    ``notes["monotone"]`` records, per k, whether |median - limit| shrinks
    at every step; it is reported, not enforced.
    """
    result = run_ensemble(config)
    ref = result.reference
    rows = []
    for eps in config.eps_list:
        for k in config.k_indices:
            lam = result.column(eps, k)
            lam = lam[np.isfinite(lam)]
            limit = float(ref.eigenvalues[k - 1]) if ref is not None else math.nan
            med = float(np.median(lam))
            rows.append({"eps": eps, "k": k, "median": med, "continuum": limit,
                         "abs_error": abs(med - limit), "spread": _iqr(lam), "n": int(lam.size)})
    monotone = {}
    for k in config.k_indices:
        errs = [row["abs_error"] for row in rows if row["k"] == k]
        monotone[k] = bool(all(b < a for a, b in zip(errs, errs[1:])))
    return ExperimentTable(rows=rows, result=result, notes={"monotone": monotone})


def divergence_kappa(K: float, d: int, K_prime: float | None = None):
    """Window 2 < kappa < d/K' with K < K' < d/2; returns (kappa, K')."""
    if not (d >= 3 and K < d / 2):
        raise EmptyWindow(f"divergence regime needs d >= 3 and K < d/2 (got d={d}, K={K})", (K, d / 2))
    if K_prime is None:
        K_prime = 0.5 * (K + d / 2)
    if not K < K_prime < d / 2:
        raise EmptyWindow(f"K'={K_prime} outside ({K}, {d / 2})", (K, d / 2))
    lo, hi = 2.0, d / K_prime
    if not lo < hi:
        raise EmptyWindow(f"kappa window ({lo}, {hi:.6g}) is empty", (lo, hi))
    return 0.5 * (lo + hi), K_prime


def _require_negative_pareto(config):
    if config.model.family != "pareto-negative" or config.model.mean is not None \
            or config.model.variance is not None:
        raise ValueError("this experiment needs the native one-sided negative Pareto family")


def heavy_tail_divergence(config: EnsembleConfig, K_prime: float | None = None) -> ExperimentTable:
    """lambda_1 running off to -infinity when the negative part lacks d/2 moments.

    Per eps: median lambda_1, the fraction with lambda_1 <= -eps^-kappa/2,
    the fraction with min xi <= -eps^-kappa beside its exact value
    1 - (1 - eps^(kappa K))^|D_eps| and the lower bound with K', and
    whether the point-mass certificate lambda_1 <= 2d/eps^2 + min xi held on
    every sample.
    """
    _require_negative_pareto(config)
    K, d = config.model.K, config.d
    kappa, K_prime = divergence_kappa(K, d, K_prime)
    if config.kappa is not None and config.kappa != kappa:
        lo, hi = 2.0, d / K_prime
        if not lo < config.kappa < hi:
            raise EmptyWindow(f"kappa={config.kappa} outside ({lo}, {hi:.6g})", (lo, hi))
        kappa = config.kappa
    cfg = _replace(config, kappa=kappa, kappa_mode="free", events=False, k_indices=(1,))
    result = run_ensemble(cfg, reference=None)
    rows = []
    for eps, n_sites in zip(cfg.eps_list, result.lattice_sizes):
        recs = [rec for rec in result.at(eps) if rec.error is None]
        lam = np.array([rec.lambda_raw[0] for rec in recs])
        xmin = np.array([rec.xi_min for rec in recs])
        thr = truncation_threshold(eps, kappa)
        p_exact = 1 - (1 - eps ** (kappa * K)) ** n_sites
        frac_min = float(np.mean(xmin <= -thr))
        rows.append({
            "eps": eps, "n_sites": n_sites, "n": int(lam.size), "median_lambda1": float(np.median(lam)),
            "frac_lambda_below": float(np.mean(lam <= -thr / 2)),
            "frac_min_xi_below": frac_min,
            "p_min_xi_exact": p_exact,
            "p_min_xi_lower_bound": 1 - (1 - eps ** (kappa * K_prime)) ** n_sites,
            "binomial_se": math.sqrt(max(p_exact * (1 - p_exact), 1e-300) / max(lam.size, 1)),
            "certificate_holds": bool(np.all(lam <= 2 * d / eps**2 + xmin)),
        })
    meds = [row["median_lambda1"] for row in rows]
    notes = {"kappa": kappa, "K_prime": K_prime,
             "median_strictly_decreasing": bool(all(b < a for a, b in zip(meds, meds[1:])))}
    return ExperimentTable(rows=rows, result=result, notes=notes)


def truncation_mean_gap(config: EnsembleConfig, estimator: str = "importance") -> ExperimentTable:
    """mean lambda_1(xi) - mean lambda_1(truncated xi) down the eps ladder.

    Differences are paired (same draws), so the gap's standard error is
    that of the per-sample differences.  The per-sample gap has infinite
    variance when K <= d/2 + 1, which leaves the plain sample mean at the
    mercy of one or two deep wells.  ``estimator="importance"`` therefore
    redraws the sites beyond the truncation threshold from a heavier tail
    of index ``config.tail_index`` (default K - 1) and reweights by the
    likelihood ratio; the truncated field, and so lambda_1 of it, is the
    same under both laws.  ``estimator="plain"`` is the direct average.

    The log-log slope of |gap| against eps is fitted and reported beside
    -d + 2(K - 1).
    """
    _require_negative_pareto(config)
    K, d = config.model.K, config.d
    lo, hi = max(1.0, d / 2), d / 2 + 1
    if not (d >= 3 and lo < K < hi):
        raise EmptyWindow(f"truncation-gap regime needs d >= 3 and {lo} < K < {hi} (got K={K})", (lo, hi))
    if estimator not in ("importance", "plain"):
        raise ValueError("estimator must be 'importance' or 'plain'")
    changes = {"k_indices": (1,), "events": False}
    if config.kappa_mode == "auto":
        changes["kappa_mode"] = "homogenization"
    if estimator == "importance":
        changes["tail_index"] = config.tail_index if config.tail_index is not None else K - 1
    else:
        changes["tail_index"] = None
    cfg = _replace(config, **changes)
    result = run_ensemble(cfg)
    exponent = -d + 2 * (K - 1)
    rows = []
    for eps in cfg.eps_list:
        recs = result.at(eps)
        raw = result.column(eps, 1, "raw")
        tr = result.column(eps, 1, "trunc")
        w = np.exp([rec.log_weight for rec in recs])
        ok = np.isfinite(raw) & np.isfinite(tr)
        raw, tr, w = raw[ok], tr[ok], w[ok]
        diff = w * (raw - tr)
        full = tr + diff
        n = raw.size
        root = math.sqrt(n)
        rows.append({
            "eps": eps, "n": int(n), "estimator": estimator,
            "mean_raw": float(full.mean()), "se_raw": float(full.std(ddof=1) / root),
            "mean_trunc": float(tr.mean()), "se_trunc": float(tr.std(ddof=1) / root),
            "gap": float(diff.mean()), "se_gap": float(diff.std(ddof=1) / root),
            "truncation_rate": float(np.mean([rec.truncation_hit for rec in recs])),
            "predicted_exponent": exponent,
        })
    gaps = np.array([row["gap"] for row in rows])
    slope = math.nan
    if len(rows) >= 2 and np.all(gaps < 0):
        slope = float(np.polyfit(np.log(cfg.eps_list), np.log(-gaps), 1)[0])
    z_growth = [
        (a["gap"] - b["gap"]) / math.hypot(a["se_gap"], b["se_gap"]) if a["se_gap"] or b["se_gap"] else math.inf
        for a, b in zip(rows, rows[1:])
    ]
    notes = {"kappa": result.parameters.kappa, "fitted_slope": slope, "predicted_exponent": exponent,
             "growth_z": z_growth, "estimator": estimator, "tail_index": cfg.tail_index}
    return ExperimentTable(rows=rows, result=result, notes=notes)


