"""``qmed`` command line entry point.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every output is
buffered and written only after the command succeeds; files that were
already written are removed if a later write fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import DataFormatError, check_probability, dataset_to_csv, read_dataset, read_table, x_columns
from .diagnostics import DEFAULT_RHO_GRID, bh_fdr, cauchy_combination, gof_test, screen, sensitivity_curve
from .estimands import EstimandQuery, estimand_curve, parse_tau_grid
from .estimation import fit
from .gsem import DagParams, GsemModel
from .marginals import Family, MarginalModel
from .mediation_tests import ALL_METHODS, AbConfig, Method, gsem_bootstrap, ab_statistics, run_tests
from .plotting import power_svg, qq_svg
from .simulation import (NULL_CASES, SimScenario, resolve_jobs, run_mixture_null_study, run_mse_study,
                         run_null_study, run_power_study, sample_gsem)

log = logging.getLogger("qmed")

FAMILIES = [f.value for f in Family]
METHODS = [m.value for m in Method]
PRESETS = {
    # S ~ N(0,1), M ~ N(0,1), Y ~ Exp(1), dag (1, 1, 0)
    "example2": GsemModel(MarginalModel("normal", [0.0], 1.0), MarginalModel("normal", [0.0], 1.0),
                          MarginalModel("exponential", [0.0]), DagParams(1.0, 1.0, 0.0)),
    # all-normal, unit scales, dag (0.5, 0.5, 0.5)
    "example1": GsemModel(MarginalModel("normal", [0.0], 1.0), MarginalModel("normal", [0.0], 1.0),
                          MarginalModel("normal", [0.0], 1.0), DagParams(0.5, 0.5, 0.5)),
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# output buffering
# ---------------------------------------------------------------------------

class Outputs:
    """Collects named outputs and commits them atomically-ish at the end."""

    def __init__(self, target, directory):
        self.target = Path(target) if target else None
        self.directory = directory
        self.files = []

    def add(self, name, text):
        self.files.append((name, text))

    def path_for(self, name):
        if self.target is None:
            return None
        if self.directory:
            return self.target / name
        return self.target if name == self.files[0][0] else self.target.with_name(
            f"{self.target.stem}.{name}")

    def commit(self):
        if self.target is None:
            for _, text in self.files[:1]:
                sys.stdout.write(text)
            return []
        written = []
        try:
            if self.directory:
                self.target.mkdir(parents=True, exist_ok=True)
            for name, text in self.files:
                p = self.path_for(name)
                tmp = p.with_name(p.name + ".part")
                tmp.write_text(text, encoding="utf-8")
                written.append(tmp)
            final = []
            for tmp in written:
                dst = tmp.with_name(tmp.name[:-5])
                os.replace(tmp, dst)
                final.append(dst)
            return final
        except BaseException:
            for tmp in written:
                for p in (tmp, tmp.with_name(tmp.name[:-5])):
                    if p.exists():
                        p.unlink()
            raise


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_common(p, output_help="output file (default: stdout)"):
    p.add_argument("--output", help=output_help)
    p.add_argument("--manifest", action="store_true", help="also write the resolved run configuration")
    p.add_argument("--config", help="JSON file of option defaults (keys are option names)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--jobs", type=_pos_int, default=None,
                   help="worker processes (default: $QMED_JOBS or 1)")


def _add_families(p):
    p.add_argument("--family-s", choices=FAMILIES, default="normal", help="exposure family (default: normal)")
    p.add_argument("--family-m", choices=FAMILIES, default="normal", help="mediator family (default: normal)")
    p.add_argument("--family-y", choices=FAMILIES, default="exponential",
                   help="outcome family (default: exponential)")


def _add_query(p, grid=False):
    p.add_argument("--tau", type=float, default=0.5, help="quantile level (default: 0.5)")
    if grid:
        p.add_argument("--tau-grid", help="'lo:hi:step' (inclusive) or comma list; overrides --tau")
    p.add_argument("--s", type=float, default=0.0, help="baseline exposure (default: 0)")
    p.add_argument("--s-prime", type=float, default=1.0, help="comparison exposure (default: 1)")
    p.add_argument("--x", type=_floats, default=None,
                   help="confounder profile, comma list with leading 1 (default: 1,0,...,0)")


def _add_boot(p, B=500):
    p.add_argument("--B", type=int, default=B, help=f"bootstrap replicates (default: {B})")
    p.add_argument("--lambda-scale", type=float, default=2.0, help="pretest threshold scale (default: 2)")
    p.add_argument("--omega", type=float, default=0.05, help="nominal level (default: 0.05)")
    p.add_argument("--centered-z", action=argparse.BooleanOptionalAction, default=True,
                   help="center the bootstrap path statistics at the full-data estimates")


def _add_scenario(p, R=500, B=300):
    p.add_argument("--n", type=int, default=300, help="sample size (default: 300)")
    p.add_argument("--alpha", type=float, default=0.0, help="alpha_S (default: 0)")
    p.add_argument("--beta", type=float, default=0.0, help="beta_M (default: 0)")
    p.add_argument("--gamma", type=float, default=0.5, help="gamma_S (default: 0.5)")
    p.add_argument("--R", type=int, default=R, help=f"replications (default: {R})")
    p.add_argument("--B", type=int, default=B, help=f"bootstrap replicates (default: {B})")


def build_parser():
    parser = argparse.ArgumentParser(prog="qmed", description="Quantile mediation analysis under a "
                                     "Gaussian-copula structural equation model.")
    parser.add_argument("--version", action="version", version=f"qmed {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", help="two-stage maximum-likelihood fit; JSON out")
    p.add_argument("--input", required=True, help="dataset CSV (S, M, Y, X1..Xp)")
    _add_families(p)
    _add_common(p)

    p = sub.add_parser("estimate", help="closed-form qNDE/qNIE/qTE; CSV out")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="dataset CSV to fit first")
    src.add_argument("--model", help="model JSON (output of `fit` or a model dict)")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in worked example model")
    _add_families(p)
    _add_query(p, grid=True)
    _add_common(p)

    p = sub.add_parser("test", help="mediation test(s); JSON out")
    p.add_argument("--input", required=True, help="dataset CSV")
    p.add_argument("--method", default="qma-ab", choices=METHODS + ["all"], help="test (default: qma-ab)")
    _add_families(p)
    _add_query(p)
    _add_boot(p)
    p.add_argument("--ustar-csv", help="also write the bootstrap U* statistics (qma-ab only), saved next to "
                                       "--output as <output stem>.<NAME>")
    _add_common(p)

    p = sub.add_parser("simulate", help="draw one dataset from the simulation design; CSV out")
    _add_scenario(p)
    _add_common(p)

    p = sub.add_parser("study", help="simulation studies; writes a directory")
    p.add_argument("kind", choices=["null", "mixture", "power", "mse"])
    _add_scenario(p)
    p.add_argument("--case", default="all", choices=sorted(NULL_CASES) + ["all"],
                   help="null configuration for `null` (default: all)")
    p.add_argument("--probs", type=_floats, default=[0.05, 0.05, 0.9],
                   help="mixture probabilities of omega01,omega02,omega03 (default: 0.05,0.05,0.9)")
    p.add_argument("--grid", default="i", choices=["i", "ii"], help="power grid (default: i)")
    p.add_argument("--n-grid", type=_floats, default=[200, 400, 600, 800, 1000],
                   help="sample sizes for `mse` (default: 200,400,600,800,1000)")
    p.add_argument("--methods", default="all", help="comma list of tests (default: all)")
    p.add_argument("--lambda-scale", type=float, default=2.0, help="pretest threshold scale (default: 2)")
    p.add_argument("--omega", type=float, default=0.05, help="nominal level (default: 0.05)")
    p.add_argument("--centered-z", action=argparse.BooleanOptionalAction, default=True,
                   help="center the bootstrap path statistics at the full-data estimates")
    p.add_argument("--svg", action="store_true", help="also emit SVG QQ/power plots")
    _add_common(p, "output directory (required)")

    p = sub.add_parser("sensitivity", help="qNIE across error correlations; CSV out")
    p.add_argument("--input", required=True, help="dataset CSV")
    _add_families(p)
    _add_query(p)
    p.add_argument("--rho-grid", default="-0.9:0.9:0.01", help="'lo:hi:step' or comma list (default: -0.9:0.9:0.01)")
    _add_common(p)

    p = sub.add_parser("gof", help="copula goodness-of-fit test; JSON out")
    p.add_argument("--input", required=True, help="dataset CSV")
    _add_families(p)
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds (default: 5)")
    p.add_argument("--B", type=int, default=200, help="parametric bootstrap refits (default: 200)")
    _add_common(p)

    p = sub.add_parser("screen", help="test many mediators, Cauchy-combine, BH-select; CSV out")
    p.add_argument("--input", required=True,
                   help="CSV with S, Y, X1..Xp and one column per candidate mediator")
    p.add_argument("--method", default="qma-ab", choices=METHODS, help="test (default: qma-ab)")
    p.add_argument("--q", type=float, default=0.1, help="FDR level (default: 0.1)")
    _add_families(p)
    _add_query(p)
    _add_boot(p)
    _add_common(p)

    p = sub.add_parser("combine", help="combine p-values")
    p.add_argument("--method", default="cauchy", choices=["cauchy"], help="combination rule (default: cauchy)")
    _add_pvalue_source(p)
    _add_common(p)

    p = sub.add_parser("fdr", help="Benjamini-Hochberg selection")
    p.add_argument("--q", type=float, default=0.1, help="FDR level (default: 0.1)")
    _add_pvalue_source(p)
    _add_common(p)
    return parser


def _add_pvalue_source(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--p", type=_floats, help="comma list of p-values")
    g.add_argument("--input", help="CSV with a column named p_value or p")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _spec(a):
    return (a.family_s, a.family_m, a.family_y)


def _query(a, p):
    x = a.x if a.x is not None else [1.0] + [0.0] * (p - 1)
    if len(x) != p:
        raise UsageError(f"--x has {len(x)} entries but the model has {p} covariates")
    if x[0] != 1.0:
        raise UsageError("--x must start with the intercept 1")
    return EstimandQuery(a.tau, a.s, a.s_prime, x)


def _cfg(a):
    return AbConfig(B=a.B, lambda_scale=a.lambda_scale, omega=a.omega, seed=a.seed, centered_z=a.centered_z)


def _scenario(a):
    return SimScenario(n=a.n, dag=DagParams(a.alpha, a.beta, a.gamma), R=a.R, B=a.B, seed=a.seed)


def _methods(text):
    if text == "all":
        return list(ALL_METHODS)
    try:
        return [Method(m.strip()) for m in text.split(",")]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_pvalues(a):
    if a.p is not None:
        return a.p
    with open(a.input, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    for col in ("p_value", "p"):
        if col in header:
            return read_table(a.input, [col])[1][:, 0].tolist()
    raise DataFormatError(f"{a.input}: no column named p_value or p")


def _validate(a):
    """Check numeric preconditions before any work starts."""
    for name in ("tau", "omega", "q"):
        if hasattr(a, name) and getattr(a, name) is not None:
            try:
                check_probability(getattr(a, name), name)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
    if getattr(a, "B", None) is not None and a.command in ("test", "screen", "study") and a.B < 100:
        raise UsageError("--B must be at least 100")
    if getattr(a, "B", None) is not None and a.command == "gof" and a.B < 1:
        raise UsageError("--B must be positive")
    if getattr(a, "n", None) is not None and a.n < 10:
        raise UsageError("--n must be at least 10")
    if getattr(a, "R", None) is not None and a.R < 1:
        raise UsageError("--R must be positive")
    if a.command == "study":
        if not a.output:
            raise UsageError("study needs --output DIRECTORY")
        if a.kind == "null" and a.R < 100:
            raise UsageError("null studies need --R >= 100")
        if a.kind == "mixture" and (len(a.probs) != 3 or not math.isclose(sum(a.probs), 1.0, abs_tol=1e-9)
                                    or min(a.probs) < 0):
            raise UsageError("--probs needs three nonnegative numbers summing to 1")
    if getattr(a, "lambda_scale", None) is not None and a.lambda_scale < 0:
        raise UsageError("--lambda-scale must be nonnegative")
    if getattr(a, "p", None) is not None and any(not 0 <= v <= 1 for v in a.p):
        raise UsageError("p-values must lie in [0, 1]")
    if a.command == "gof" and a.folds < 2:
        raise UsageError("--folds must be at least 2")


def _load_config(parser, argv):
    """Apply ``--config`` JSON values as defaults of the chosen subcommand."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    known = set(vars(args))
    keys = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(keys) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    sub.set_defaults(**keys)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(a, out):
    data = read_dataset(a.input)
    res = fit(data, _spec(a))
    out.add("fit.json", _json({"n": data.n, **res.to_dict()}))


def _load_model(a):
    if a.preset:
        return PRESETS[a.preset]
    if a.model:
        d = json.loads(Path(a.model).read_text(encoding="utf-8"))
        return GsemModel.from_dict(d.get("model", d))
    return fit(read_dataset(a.input), _spec(a)).model


def cmd_estimate(a, out):
    model = _load_model(a)
    q = _query(a, model.marginal_S.p)
    grid = parse_tau_grid(a.tau_grid) if a.tau_grid else [a.tau]
    rows = estimand_curve(model, q.s, q.s_prime, q.x, grid)
    lines = ["tau,qnde,qnie,qte"] + [f"{t:.6g},{v.qnde:.12g},{v.qnie:.12g},{v.qte:.12g}"
                                     for t, v in zip(grid, rows)]
    out.add("estimates.csv", "\n".join(lines) + "\n")


def cmd_test(a, out):
    data = read_dataset(a.input)
    q = _query(a, data.p)
    cfg = _cfg(a)
    methods = list(ALL_METHODS) if a.method == "all" else [Method(a.method)]
    res = run_tests(data, _spec(a), q, cfg, methods)
    payload = {m.value: r.to_dict() for m, r in res.items()}
    out.add("test.json", _json(payload if len(methods) > 1 else payload[methods[0].value]))
    if a.ustar_csv:
        if Method.QMA_AB not in methods:
            raise UsageError("--ustar-csv needs --method qma-ab or all")
        if not a.output:
            raise UsageError("--ustar-csv needs --output")
        boot = gsem_bootstrap(data, _spec(a), q, cfg.B, (cfg.seed,))
        U, flags, _ = ab_statistics(boot, cfg)
        lines = ["replicate,u_star,flag"] + [f"{i},{u:.12g},{int(f)}" for i, (u, f) in enumerate(zip(U, flags))]
        out.add(Path(a.ustar_csv).name, "\n".join(lines) + "\n")


def cmd_simulate(a, out):
    sc = _scenario(a)
    data = sample_gsem(sc, np.random.default_rng([a.seed, 0, 0]))
    out.add("data.csv", dataset_to_csv(data))


def cmd_study(a, out):
    sc = _scenario(a)
    jobs = resolve_jobs(a.jobs)
    cfg = AbConfig(B=a.B, lambda_scale=a.lambda_scale, omega=a.omega, seed=a.seed, centered_z=a.centered_z)
    methods = _methods(a.methods)
    if a.kind == "null":
        cases = sorted(NULL_CASES) if a.case == "all" else [a.case]
        rep = run_null_study(sc, cases, methods, jobs=jobs, cfg=cfg)
    elif a.kind == "mixture":
        rep = run_mixture_null_study(a.probs, sc, methods, jobs=jobs, cfg=cfg)
    elif a.kind == "power":
        rep = run_power_study(sc, a.grid, methods, jobs=jobs, cfg=cfg)
    else:
        rep = run_mse_study(sc, tuple(int(n) for n in a.n_grid), jobs=jobs)
    out.add("report.json", rep.to_json())
    out.add("summary.csv", rep.summary_csv())
    if rep.pvalues:
        out.add("qq.csv", rep.qq_csv())
    if a.svg:
        if a.kind == "power":
            out.add("power.svg", power_svg(rep))
        labels = sorted({k.split("|")[0] for k in rep.pvalues})
        for lab in labels:
            safe = "".join(c if c.isalnum() else "_" for c in lab)
            out.add(f"qq_{safe}.svg", qq_svg(rep, lab))


def _grid(text):
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        k = int(np.floor((hi - lo) / step + 1e-9))
        return np.round(lo + step * np.arange(k + 1), 12)
    return np.asarray(_floats(text))


def cmd_sensitivity(a, out):
    data = read_dataset(a.input)
    try:
        grid = _grid(a.rho_grid) if a.rho_grid else np.asarray(DEFAULT_RHO_GRID)
    except ValueError as exc:
        raise UsageError(f"bad --rho-grid: {exc}") from None
    if np.any(np.abs(grid) >= 1) or not np.any(np.isclose(grid, 0.0, atol=1e-12)):
        raise UsageError("--rho-grid must lie in (-1, 1) and include 0")
    grid = np.where(np.isclose(grid, 0.0, atol=1e-12), 0.0, grid)
    curve = sensitivity_curve(data, _spec(a), _query(a, data.p), grid)
    out.add("sensitivity.csv", curve.to_csv())
    out.add("summary.json", _json(curve.to_dict()))


def cmd_gof(a, out):
    data = read_dataset(a.input)
    res = gof_test(data, _spec(a), folds=a.folds, B=a.B, seed=a.seed)
    out.add("gof.json", _json(res.to_dict()))


def cmd_screen(a, out):
    header, table = read_table(a.input)
    for col in ("S", "Y"):
        if col not in header:
            raise DataFormatError(f"{a.input}: missing column {col!r}")
    xcols = x_columns(header)
    mcols = [h for h in header if h not in ("S", "Y") and h not in xcols]
    if not mcols:
        raise DataFormatError(f"{a.input}: no mediator columns")
    col = lambda h: table[:, header.index(h)]  # noqa: E731
    X = table[:, [header.index(h) for h in xcols]]
    if np.any(X[:, 0] != 1.0):
        raise DataFormatError(f"{a.input}: column 'X1' must be the intercept")
    res = screen(col("S"), np.column_stack([col(h) for h in mcols]), col("Y"), X, _spec(a),
                 _query(a, X.shape[1]), _cfg(a), Method(a.method), a.q, names=mcols)
    out.add("screen.csv", res.to_csv())
    out.add("screen.json", _json(res.to_dict()))


def cmd_combine(a, out):
    p = _read_pvalues(a)
    out.add("combined.json", _json({"method": a.method, "n": len(p), "p_value": cauchy_combination(p)}))


def cmd_fdr(a, out):
    p = _read_pvalues(a)
    out.add("fdr.json", _json({"q": a.q, "selected": bh_fdr(p, a.q)}))


COMMANDS = {"fit": cmd_fit, "estimate": cmd_estimate, "test": cmd_test, "simulate": cmd_simulate,
            "study": cmd_study, "sensitivity": cmd_sensitivity, "gof": cmd_gof, "screen": cmd_screen,
            "combine": cmd_combine, "fdr": cmd_fdr}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        a = _load_config(parser, argv)
        _validate(a)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"qmed: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Outputs(a.output, directory=a.command in ("study",))
    try:
        COMMANDS[a.command](a, out)
        if a.manifest:
            manifest = {k: v for k, v in sorted(vars(a).items())}
            manifest["version"] = __version__
            out.add("manifest.json", _json(manifest))
        out.commit()
    except UsageError as exc:
        print(f"qmed: error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"qmed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
