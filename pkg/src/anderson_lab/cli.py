"""``anderson-lab run CONFIG`` and ``anderson-lab report RUN_DIR``.

A run writes ``manifest.json``, ``records.csv`` and ``summary.json`` into a
fresh timestamped directory under the config's ``output_dir``.  Every float
is written with 17 significant digits, and records.csv depends only on the
config, so reruns reproduce it byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .config import RunConfig, load_config
from .errors import AndersonLabError, ConfigError
from .fluctuations import (clt_report, convergence_experiment, heavy_tail_divergence, run_ensemble,
                           truncation_mean_gap)
from .hamiltonian import assemble
from .lattice import discretize
from .perturbation import (green_diag_linear_solve, hadamard_derivative_table, second_variation_check,
                           spectral_green_diag)
from .potential import sample_potential
from .seeding import derive_seed

ENSEMBLE_COLUMNS = ("eps", "sample_id", "seed", "k", "lambda_raw", "lambda_trunc", "truncation_hit", "in_E",
                    "in_F", "xi_min", "log_weight", "error")


def fmt(value) -> str:
    """Text form used in CSV/TSV cells: 17 significant digits for floats."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def to_json(obj, indent=2, _level=0) -> str:
    """JSON text with floats at 17 significant digits; non-finite floats become null."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(inner + to_json(v, indent, _level + 1) for v in seq) + "\n" + pad + "]"
    if isinstance(obj, (float, np.floating)) and not isinstance(obj, bool):
        return format(float(obj), ".17g") if math.isfinite(obj) else "null"
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, Path):
        obj = str(obj)
    return json.dumps(obj)


def _csv_text(header, rows, delimiter=",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _ensemble_rows(result):
    ordered = sorted(result.records, key=lambda rec: (rec.eps_index, rec.sample_id))
    for rec in ordered:
        for pos, k in enumerate(result.config.k_indices):
            yield (rec.eps, rec.sample_id, rec.seed, k, rec.lambda_raw[pos], rec.lambda_trunc[pos],
                   rec.truncation_hit, rec.in_E, rec.in_F, rec.xi_min, rec.log_weight, rec.error)


def _reference_summary(ref):
    if ref is None:
        return None
    return {"method": ref.method, "fine_eps": ref.fine_eps, "eigenvalues": ref.eigenvalues.tolist(),
            "next_eigenvalue": ref.next_eigenvalue, "simple": ref.simple_flags.tolist()}


def _run_converge(cfg: RunConfig):
    table = convergence_experiment(cfg.ensemble)
    summary = {"rows": table.rows, "monotone_error": {str(k): v for k, v in table.notes["monotone"].items()},
               "continuum": _reference_summary(table.result.reference)}
    return ENSEMBLE_COLUMNS, list(_ensemble_rows(table.result)), summary, table.result


def _run_clt(cfg: RunConfig):
    result = run_ensemble(cfg.ensemble)
    reports = [clt_report(result, eps).summary() for eps in cfg.ensemble.eps_list]
    summary = {"reports": reports, "excluded_indices": list(result.excluded),
               "continuum": _reference_summary(result.reference),
               "event_rates": _event_rates(result)}
    return ENSEMBLE_COLUMNS, list(_ensemble_rows(result)), summary, result


def _event_rates(result):
    out = []
    for eps in result.config.eps_list:
        recs = result.at(eps)
        flags_E = [rec.in_E for rec in recs if rec.in_E is not None]
        flags_F = [rec.in_F for rec in recs if rec.in_F is not None]
        out.append({"eps": eps,
                    "fraction_in_E": float(np.mean(flags_E)) if flags_E else None,
                    "fraction_in_F": float(np.mean(flags_F)) if flags_F else None,
                    "truncation_rate": float(np.mean([rec.truncation_hit for rec in recs]))})
    return out


def _run_diagnostics(cfg: RunConfig):
    result = run_ensemble(cfg.ensemble)
    p = result.parameters
    summary = {"parameters": {"kappa": p.kappa, "kappa_mode": p.kappa_mode, "r": p.r, "rho": p.rho,
                              "gamma": cfg.ensemble.gamma, "e_constant": cfg.ensemble.e_constant},
               "lattice_sizes": list(result.lattice_sizes), "event_rates": _event_rates(result),
               "events_evaluated": p.rho is not None and result.reference is not None}
    return ENSEMBLE_COLUMNS, list(_ensemble_rows(result)), summary, result


def _run_tail(cfg: RunConfig):
    table = heavy_tail_divergence(cfg.ensemble, cfg.K_prime)
    return ENSEMBLE_COLUMNS, list(_ensemble_rows(table.result)), {"rows": table.rows, **table.notes}, table.result


def _run_gap(cfg: RunConfig):
    table = truncation_mean_gap(cfg.ensemble, cfg.estimator)
    return ENSEMBLE_COLUMNS, list(_ensemble_rows(table.result)), {"rows": table.rows, **table.notes}, table.result


def _check_instances(cfg: RunConfig):
    ens = cfg.ensemble
    lattice = discretize(ens.domain, ens.eps_list[0])
    for j in range(cfg.draws):
        seed = derive_seed(ens.base_seed, 0, j)
        yield j, seed, assemble(lattice, sample_potential(ens.model, lattice, seed).values)


def _run_derivative(cfg: RunConfig):
    rows, worst = [], {}
    for j, seed, H in _check_instances(cfg):
        for k, site, fd, analytic, err, error in hadamard_derivative_table(H, cfg.ensemble.k_indices, cfg.h,
                                                                           cfg.precision):
            rows.append((j, seed, k, site, fd, analytic, err, error))
            if error is None:
                worst[k] = max(worst.get(k, 0.0), err)
    header = ("draw", "seed", "k", "site", "fd", "analytic", "rel_err", "error")
    summary = {"h": cfg.h, "precision": cfg.precision, "max_rel_err": {str(k): v for k, v in worst.items()},
               "n_checks": len(rows)}
    return header, rows, summary, None


def _run_green(cfg: RunConfig):
    rows, worst_sv, worst_green = [], {}, {}
    for j, seed, H in _check_instances(cfg):
        xi = H.potential
        for k in cfg.ensemble.k_indices:
            for site in range(H.dim):
                try:
                    spectral = spectral_green_diag(H, k, site).value
                    linear = green_diag_linear_solve(H, k, site)
                    lhs, rhs, err = second_variation_check(H, k, site, xi[site], xi[site] + cfg.segment,
                                                           cfg.n_quad)
                except AndersonLabError as exc:
                    rows.append((j, seed, k, site, math.nan, math.nan, math.nan, math.nan, math.nan, str(exc)))
                    continue
                diff = abs(spectral - linear)
                rows.append((j, seed, k, site, spectral, linear, lhs, rhs, err, None))
                worst_sv[k] = max(worst_sv.get(k, 0.0), err)
                worst_green[k] = max(worst_green.get(k, 0.0), diff)
    header = ("draw", "seed", "k", "site", "green_spectral", "green_linear", "lhs", "rhs", "rel_err", "error")
    summary = {"segment": cfg.segment, "n_quad": cfg.n_quad,
               "max_second_variation_rel_err": {str(k): v for k, v in worst_sv.items()},
               "max_green_abs_diff": {str(k): v for k, v in worst_green.items()}, "n_checks": len(rows)}
    return header, rows, summary, None


RUNNERS = {
    "converge": _run_converge,
    "clt": _run_clt,
    "diagnostics": _run_diagnostics,
    "tail-divergence": _run_tail,
    "truncation-gap": _run_gap,
    "derivative-check": _run_derivative,
    "green-check": _run_green,
}


def _fresh_dir(base: Path, experiment: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base.mkdir(parents=True, exist_ok=True)
    for n in range(10_000):
        path = base / (f"{experiment}-{stamp}" + (f"-{n}" if n else ""))
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not create a run directory under {base}")


def execute(cfg: RunConfig) -> Path:
    """Run the configured experiment and write its three artifacts; returns the run directory."""
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    clock = time.perf_counter()
    header, rows, summary, result = RUNNERS[cfg.experiment](cfg)
    wall = time.perf_counter() - clock
    out = _fresh_dir(cfg.output_dir, cfg.experiment)
    manifest = {
        "experiment": cfg.experiment,
        "code_version": __version__,
        "config": cfg.raw,
        "config_text": cfg.source_text,
        "d": cfg.ensemble.d,
        "started_utc": started,
        "wall_time_s": wall,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if result is not None:
        p = result.parameters
        manifest["parameters"] = {"kappa": p.kappa, "kappa_mode": p.kappa_mode, "r": p.r, "rho": p.rho}
        manifest["lattice_sizes"] = list(result.lattice_sizes)
    (out / "manifest.json").write_text(to_json(manifest) + "\n")
    (out / "records.csv").write_text(_csv_text(header, rows))
    (out / "summary.json").write_text(to_json({"experiment": cfg.experiment, **summary}) + "\n")
    return out


def _error_record(exc) -> str:
    record = {"status": "error", "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["errors"] = exc.errors
    return json.dumps(record)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        out = execute(cfg)
    except ConfigError as exc:
        print(_error_record(exc), file=sys.stderr)
        return 2
    except (AndersonLabError, ValueError, OSError) as exc:
        print(_error_record(exc), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "run_dir": str(out)}))
    return 0


# ---------------------------------------------------------------- report


def _read_run(run_dir: Path):
    manifest_path = run_dir / "manifest.json"
    if not run_dir.is_dir():
        raise FileNotFoundError(f"{run_dir} is not a directory")
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{run_dir} holds no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
        summary = json.loads((run_dir / "summary.json").read_text())
        with open(run_dir / "records.csv", newline="") as fh:
            records = list(csv.DictReader(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt run directory {run_dir}: {exc}") from exc
    if "experiment" not in manifest:
        raise ValueError("manifest lacks an 'experiment' field")
    return manifest, summary, records


def _table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[fmt_short(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def fmt_short(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return fmt(value)


def qq_pairs(records, d, summary):
    """(eps, k, sorted X, Normal(0, predicted sigma^2) quantile) rows for each CLT index."""
    out = []
    for rep in summary["reports"]:
        eps = rep["eps"]
        for pos, k in enumerate(rep["k_indices"]):
            sel = [r for r in records if float(r["eps"]) == eps and int(r["k"]) == k and not r["error"]]
            raw = np.array([float(r["lambda_raw"]) for r in sel])
            tr = np.array([float(r["lambda_trunc"]) for r in sel])
            x = np.sort((raw - tr.mean()) / eps ** (d / 2))
            n = x.size
            sigma = math.sqrt(rep["predicted_covariance"][pos][pos])
            q = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n, scale=sigma)
            out.extend((eps, k, xi, qi) for xi, qi in zip(x, q))
    return out


def build_report(run_dir) -> tuple[str, str]:
    """Return (text table, TSV) for a run directory."""
    run_dir = Path(run_dir)
    manifest, summary, records = _read_run(run_dir)
    experiment = manifest["experiment"]
    if experiment == "clt":
        rows = []
        for rep in summary["reports"]:
            for pos, k in enumerate(rep["k_indices"]):
                rows.append((rep["eps"], k, rep["n_samples"], rep["empirical_covariance"][pos][pos],
                             rep["predicted_covariance"][pos][pos], rep["ks_p"][pos], rep["skew"][pos],
                             rep["ex_kurtosis"][pos]))
        text = _table(("eps", "k", "n", "var_emp", "var_pred", "ks_p", "skew", "ex_kurt"), rows)
        pairs = qq_pairs(records, manifest["d"], summary)
        tsv = _csv_text(("eps", "k", "x_sorted", "normal_quantile"), pairs, delimiter="\t")
        return text, tsv
    if experiment == "converge":
        cols = ("eps", "k", "median", "continuum", "abs_error", "spread", "n")
    elif experiment == "tail-divergence":
        cols = ("eps", "n_sites", "median_lambda1", "frac_lambda_below", "frac_min_xi_below", "p_min_xi_exact",
                "certificate_holds")
    elif experiment == "truncation-gap":
        cols = ("eps", "n", "mean_raw", "mean_trunc", "gap", "se_gap", "predicted_exponent")
    elif experiment == "diagnostics":
        cols = ("eps", "fraction_in_E", "fraction_in_F", "truncation_rate")
        summary = {**summary, "rows": summary["event_rates"]}
    else:
        key = "max_rel_err" if experiment == "derivative-check" else "max_second_variation_rel_err"
        rows = [(k, v) for k, v in summary[key].items()]
        return _table(("k", key), rows), _csv_text(("k", key), rows, delimiter="\t")
    rows = [tuple(row.get(c) for c in cols) for row in summary["rows"]]
    return _table(cols, rows), _csv_text(cols, rows, delimiter="\t")


def cmd_report(args) -> int:
    try:
        text, tsv = build_report(args.run_dir)
    except (OSError, ValueError, KeyError) as exc:
        print(_error_record(exc), file=sys.stderr)
        return 1
    target = Path(args.run_dir) / "report.tsv"
    target.write_text(tsv)
    print(text)
    print(f"\nTSV written to {target}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="anderson-lab", description="Lattice Anderson Hamiltonian experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a TOML config")
    p_run.add_argument("config", type=Path)
    p_run.set_defaults(func=cmd_run)
    p_rep = sub.add_parser("report", help="tabulate a finished run and write report.tsv")
    p_rep.add_argument("run_dir", type=Path)
    p_rep.set_defaults(func=cmd_report)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
