"""Command-line front end.

Subcommands
-----------
analyze    inference for one design on a CSV file
balance    joint test that covariates do not jump at the cutoff
simulate   seeded coverage study on a built-in design
constants  kernel constants, optionally with bandwidth diagnostics for data

Exit codes: 0 success, 2 input or data-support error, 3 numerical failure.
Reports go to stdout (or ``--output``); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys

import numpy as np

from . import __version__
from .bandwidth import coverage_optimal_bandwidth, estimate_curvature
from .designs import DESIGN_KINDS, DesignSpec
from .errors import DataSupportError, ELRDDError, InputError
from .inference import DEFAULT_LEVELS, analyze
from .kernel import KERNEL_NAMES, compute_kernel_constants
from .localfit import Sample
from .montecarlo import DGP_KINDS, MODES, DGPSpec, run_coverage_study

__all__ = ["main", "build_parser", "ingest_csv", "SCHEMA_VERSION"]

log = logging.getLogger("elrdd")

SCHEMA_VERSION = 1
NA_TOKENS = {"", "na", "nan", "null", "none", "."}


def ingest_csv(path, columns, binary=(), cutoff: float = 0.0, x: str = "x"):
    """Read the bound columns of a CSV file into a :class:`Sample`.

    Rows with a missing value in any bound column are dropped.

    Parameters
    ----------
    path : str or path-like
        UTF-8 CSV with a header row.
    columns : sequence of str
        Data columns to keep (besides the forcing variable ``x``).
    binary : sequence of str
        Columns that must take values in {0, 1}.

    Returns
    -------
    sample : Sample
    dropped : int
        Number of rows removed for missing values.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataSupportError(f"{path} is empty") from None
        wanted = [x] + [c for c in columns if c != x]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise InputError(f"columns not found in {path}: {', '.join(missing)}")
        pos = [header.index(c) for c in wanted]
        data = {c: [] for c in wanted}
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            vals = []
            for c, j in zip(wanted, pos):
                field = row[j].strip() if j < len(row) else ""
                if field.lower() in NA_TOKENS:
                    vals = None
                    break
                try:
                    v = float(field)
                except ValueError:
                    raise InputError(
                        f"row {lineno}, column {c!r}: cannot parse {field!r} "
                        "as a number") from None
                if not math.isfinite(v):
                    vals = None
                    break
                vals.append(v)
            if vals is None:
                dropped += 1
                continue
            for c, v in zip(wanted, vals):
                data[c].append(v)
    if not data[x]:
        raise DataSupportError("no complete rows after dropping missing values")
    for c in binary:
        arr = np.asarray(data[c])
        if not np.all((arr == 0) | (arr == 1)):
            raise InputError(f"column {c!r} must be binary (0/1)")
    cols = {c: data[c] for c in wanted if c != x}
    return Sample(np.asarray(data[x]), cols, cutoff), dropped


def _split(text):
    if text is None:
        return ()
    out = tuple(s.strip() for s in text.split(",") if s.strip())
    return out


def _floats(text, name):
    try:
        return tuple(float(s) for s in _split(text))
    except ValueError:
        raise InputError(f"--{name} must be a comma-separated list of numbers") from None


def _levels(text):
    levels = _floats(text, "levels") if text else DEFAULT_LEVELS
    for lv in levels:
        if not 0 < lv < 1:
            raise InputError(f"levels must lie in (0, 1), got {lv}")
    return levels


def _spec_from_args(args) -> DesignSpec:
    ys = _split(args.y)
    return DesignSpec(args.design, ys or ("y",), args.d, _split(args.z))


def _binary_columns(spec: DesignSpec):
    cols = [spec.treatment_column] if spec.treatment_column else []
    if spec.is_categorical:
        cols += list(spec.outcome_columns)
    return cols


# ---------------------------------------------------------------------------
# report emitters

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(u) for u in v) + "]"
    return str(v)


def _table(rows):
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in rows) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _analysis_text(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    rows = []
    if "ci" in report:
        for lv, iv in report["ci"].items():
            rows.append((report["parameters"][0], "estimate", report["estimate"][0],
                         lv, iv[0], iv[1], report["ci_bartlett"][lv][0],
                         report["ci_bartlett"][lv][1]))
    for comp in report.get("components", []):
        for lv, iv in comp["ci"].items():
            rows.append((comp["name"], "marginal", comp["estimate"], lv,
                         iv[0], iv[1], "", ""))
    if fmt == "csv":
        head = ["parameter", "kind", "estimate", "level", "lo", "hi",
                "lo_bartlett", "hi_bartlett"]
        summary = _csv(["key", "value"], [
            ("design", report["design"]), ("lr", report["lr"]),
            ("p_value", report["p_value"]), ("h", report["h"]),
            ("H_star", report["H_star"]),
            ("bartlett_factor", report["bartlett_factor"]),
            ("kernel", report["kernel"])])
        return summary + "\n" + _csv(head, rows)
    lines = [
        ("design", report["design"]),
        ("estimate", report["estimate"]),
        ("null", report["null"]),
        ("LR at null", report["lr"]),
        ("p-value", report["p_value"]),
        ("p-value (no Bartlett)", report["p_value_uncorrected"]),
        ("h", report["h"]),
        ("H*", report["H_star"]),
        ("Bartlett factor", report["bartlett_factor"]),
        ("kernel", report["kernel"]),
        ("window counts (-,+)", [report["window_counts"]["minus"],
                                 report["window_counts"]["plus"]]),
    ]
    for lv, iv in report.get("ci", {}).items():
        lines.append((f"CI {lv}", iv))
        lines.append((f"CI {lv} (Bartlett)", report["ci_bartlett"][lv]))
    for comp in report.get("components", []):
        lines.append((f"{comp['name']} estimate", comp["estimate"]))
        lines.append((f"{comp['name']} p-value", comp["p_value"]))
    for s in report.get("sensitivity", []):
        tag = f"h x {s['multiplier']:g}"
        if "error" in s:
            lines.append((tag, s["error"]))
            continue
        lines.append((f"{tag}: h", s["h"]))
        lines.append((f"{tag}: p-value", s["p_value"]))
        for lv, iv in s.get("ci", {}).items():
            lines.append((f"{tag}: CI {lv}", iv))
    pil = report["diagnostics"].get("pilot_bandwidths", {})
    for k, v in pil.items():
        lines.append((f"pilot {k}", v))
    return _table(lines)


def _simulation_text(report, fmt: str) -> str:
    if fmt == "json":
        return report.to_json() + "\n"
    if fmt == "csv":
        return _csv(["column", "level", "coverage", "std_error", "mean_ci_length"],
                    list(report.csv_rows()))
    rows = [("design", report.design), ("n", report.n),
            ("replications", report.replications), ("mode", report.mode),
            ("truth", report.truth), ("failures", report.failures)]
    for tag, v in report.mean_h.items():
        rows.append((f"mean h ({tag})", v))
        rows.append((f"mean Bartlett factor ({tag})", report.mean_factor[tag]))
    for col, lv, cov, se, _ in report.csv_rows():
        rows.append((f"{col} {lv:g}", f"{cov:.4f} ({se:.4f})"))
    return _table(rows)


def _emit(text: str, output):
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands

def _cmd_analyze(args, spec=None):
    spec = spec or _spec_from_args(args)
    sample, dropped = ingest_csv(args.input, spec.required_columns(),
                                 _binary_columns(spec), args.cutoff, args.x)
    if dropped:
        log.warning("dropped %d row(s) with missing values", dropped)
    null = _floats(args.null, "null") or None
    res = analyze(sample, spec, levels=_levels(args.levels), kernel=args.kernel,
                  h=args.h, bartlett=not args.no_bartlett, null=null,
                  h_multipliers=_floats(args.h_multipliers, "h-multipliers"))
    report = {"schema_version": SCHEMA_VERSION, "command": args.command,
              "rows_dropped": dropped}
    report.update(res.as_dict())
    _emit(_analysis_text(report, args.format), args.output)
    return 0


def _cmd_balance(args):
    covs = _split(args.z)
    if not covs:
        raise InputError("balance needs --z with at least one covariate")
    spec = DesignSpec("balance_test", covs)
    return _cmd_analyze(args, spec)


def _cmd_simulate(args):
    params = {"J": args.J} if args.dgp == "multi_outcome" else {}
    dgp = DGPSpec(args.dgp, args.n, args.seed, params)
    if args.reps < 100:
        log.warning("%d replications: binomial standard errors are large", args.reps)
    rep = run_coverage_study(dgp, args.reps, _levels(args.levels), args.mode,
                             kernel=args.kernel, workers=args.workers, h=args.h,
                             ci_length=args.ci_length, allow_small=True)
    _emit(_simulation_text(rep, args.format), args.output)
    return 0


def _cmd_constants(args):
    kc = compute_kernel_constants(args.kernel)
    report = {
        "schema_version": SCHEMA_VERSION, "command": "constants",
        "kernel": kc.kernel, "varpi": kc.varpi,
        "gamma2": kc.gamma[2], "gamma3": kc.gamma[3], "gamma4": kc.gamma[4],
        "m_plus": kc.m_plus[:4].tolist(), "m_minus": kc.m_minus[:4].tolist(),
        "int_K2": kc.roughness, "int_u2K": kc.second_moment,
        "int_dK2": kc.derivative_roughness,
    }
    if args.input:
        spec = _spec_from_args(args)
        sample, dropped = ingest_csv(args.input, spec.required_columns(),
                                     _binary_columns(spec), args.cutoff, args.x)
        est = estimate_curvature(spec, sample, args.kernel)
        plan = coverage_optimal_bandwidth(spec, est, kc, sample.n, sample)
        report["bandwidth"] = plan.as_dict()
        report["pilot_bandwidths"] = {k: float(v) for k, v in est.pilots.items()}
        report["phi"], report["phi1"] = est.phi, est.phi1
        report["rows_dropped"] = dropped
    if args.format == "json":
        text = json.dumps(report, indent=2, sort_keys=True, default=str) + "\n"
    else:
        flat = []
        for k, v in report.items():
            if isinstance(v, dict):
                flat += [(f"{k}.{kk}", vv) for kk, vv in v.items()]
            else:
                flat.append((k, v))
        text = _csv(["key", "value"], flat) if args.format == "csv" else _table(flat)
    _emit(text, args.output)
    return 0


def _add_data_args(p, design=True):
    p.add_argument("--input", "-i", required=design, help="CSV file with a header row")
    p.add_argument("--x", default="x", help="forcing variable column (default x)")
    p.add_argument("--cutoff", "-c", type=float, default=0.0)
    if design:
        p.add_argument("--design", choices=DESIGN_KINDS, default="sharp")
    p.add_argument("--y", help="outcome column(s), comma separated")
    p.add_argument("--d", help="binary treatment column (fuzzy designs)")
    p.add_argument("--z", help="covariate column(s), comma separated")


def _add_output_args(p):
    p.add_argument("--format", "-f", choices=("json", "table", "csv"), default="json")
    p.add_argument("--output", "-o", help="write the report here instead of stdout")
    p.add_argument("--kernel", "-k", choices=KERNEL_NAMES, default="triangular")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="elrdd", description="Empirical-likelihood inference for "
        "regression discontinuity designs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, helptext in (("analyze", "estimate, test and build intervals"),
                           ("balance", "joint covariate balance test")):
        p = sub.add_parser(name, help=helptext)
        _add_data_args(p, design=(name == "analyze"))
        if name == "balance":
            p.set_defaults(design="balance_test")
        _add_output_args(p)
        p.add_argument("--h", type=float, help="bandwidth override")
        p.add_argument("--h-multipliers", help="e.g. 0.5,1,2: sensitivity block")
        p.add_argument("--levels", help="comma-separated coverage levels")
        p.add_argument("--null", help="hypothesised value(s), default zero")
        p.add_argument("--no-bartlett", action="store_true",
                       help="report uncorrected p-values")

    p = sub.add_parser("simulate", help="seeded coverage study")
    p.add_argument("--dgp", choices=DGP_KINDS, default="sharp_model1")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--J", type=int, default=3, help="outcomes for multi_outcome")
    p.add_argument("--mode", choices=MODES, default="true_constants")
    p.add_argument("--levels", help="comma-separated coverage levels")
    p.add_argument("--h", type=float, help="fixed bandwidth instead of the selector")
    p.add_argument("--workers", type=int, help="processes (default EL_RDD_THREADS or CPUs)")
    p.add_argument("--ci-length", action="store_true", help="also report mean CI lengths")
    _add_output_args(p)

    p = sub.add_parser("constants", help="kernel constants and bandwidth diagnostics")
    _add_data_args(p, design=False)
    p.add_argument("--design", choices=DESIGN_KINDS, default="sharp")
    _add_output_args(p)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="elrdd: %(levelname)s: %(message)s", stream=sys.stderr)
    handler = {"analyze": _cmd_analyze, "balance": _cmd_balance,
               "simulate": _cmd_simulate, "constants": _cmd_constants}[args.command]
    try:
        with np.errstate(all="ignore"):
            return handler(args)
    except ELRDDError as exc:
        print(f"elrdd: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"elrdd: numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
