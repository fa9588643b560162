"""Command-line interface: ``bpc simulate | fit-mle | fit-bayes | report | coverage-study``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 partial study.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from bpc import bayes, dataio, mle, sampling, study
from bpc.series import LambdaParams, SeriesError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4

PARAM_NAMES = ("lambda1", "lambda2", "lambda3")
# conjugate hyperparameters used for the real-data analysis
REPORT_HYPER = (1.41, 2.325, 3.25, 2.528)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _emit(args, text: str):
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_data(path):
    """Parse a CSV (or the bundled sample) and return it with a digest of its bytes."""
    if path is None:
        raw, source = dataio.bundled_sample_path().read_bytes(), "<bundled sample>"
    else:
        try:
            raw, source = Path(path).read_bytes(), str(path)
        except OSError as exc:
            raise dataio.InputError(f"{path}: {exc.strerror or exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise dataio.InputError(f"{source}: not valid UTF-8") from None
    return dataio.parse_csv(text, source), dataio.digest_bytes(raw)


def _params(args) -> LambdaParams:
    try:
        return LambdaParams(args.lambda1, args.lambda2, args.lambda3)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from None


def _interval_dict(arr):
    if arr is None:
        return None
    return {name: list(map(float, row)) for name, row in zip(PARAM_NAMES, arr)}


def _triple(arr):
    if arr is None:
        return None
    return {name: float(v) for name, v in zip(PARAM_NAMES, arr)}


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    params = _params(args)
    cfg = sampling.SampleConfig(n=args.n, seed=args.seed, method=args.method,
                                burn_in=args.burn_in, thin=args.thin)
    sample = sampling.sample(params, cfg)
    _emit(args, dataio.format_csv(sample))
    _log(args, f"wrote {len(sample)} pairs")
    return EXIT_OK


def cmd_fit_mle(args) -> int:
    sample, digest = _read_data(args.data)
    _log(args, f"read {len(sample)} rows")
    stats = mle.sufficient_stats(sample)
    init = LambdaParams(*args.init) if args.init else None
    control = mle.MleControl(init=init, epsilon=args.epsilon, max_iter=args.max_iter)
    fit = mle.mle_fixed_point(stats, control, tau=args.tau)
    results = {
        "n": stats.n,
        "sufficient_stats": {"t1": stats.t1, "t2": stats.t2, "t3": stats.t3},
        "estimate": _triple(fit.estimate.as_array()),
        "standard_errors": _triple(fit.standard_errors),
        "covariance": fit.covariance,
        "wald_intervals": _interval_dict(fit.wald_intervals),
        "wald_intervals_clipped": _interval_dict(fit.wald_clipped),
        "tau": args.tau,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "log_likelihood": fit.log_likelihood,
        "negative_variance_flag": fit.negative_variance_flag,
        "boundary_active": fit.boundary_active,
        "bootstrap": None,
    }
    if args.bootstrap:
        boot = mle.bootstrap_ci(fit.estimate, stats.n, B=args.bootstrap, tau=args.tau,
                                seed=args.seed, control=control)
        results["bootstrap"] = {
            "B": args.bootstrap,
            "intervals": _interval_dict(boot.intervals),
            "variances": _triple(boot.variances),
            "dropped": boot.n_dropped,
        }
    doc = dataio.envelope("fit-mle", digest, results, {"notes": fit.notes}, args.seed)
    _emit(args, dataio.dumps(doc))
    return EXIT_OK


def _hyper_from_args(args) -> bayes.PriorHyper:
    if args.flat:
        return bayes.FLAT_PRIOR
    if args.elicit:
        return bayes.elicit(bayes.Elicitation(*args.elicit))
    if args.hyper:
        return bayes.PriorHyper(*args.hyper)
    raise CliError("one of --flat, --elicit or --hyper is required", EXIT_INPUT)


def _qctrl(args) -> bayes.QuadratureControl:
    return bayes.QuadratureControl(nodes_per_dim=args.nodes, radius_sd=args.radius,
                                   mcmc_steps=args.mcmc_steps, burn_in=args.mcmc_burn_in,
                                   seed=args.seed)


def _summary_dict(s: bayes.PosteriorSummary) -> dict:
    z = s.agreement_z
    out = {
        "hyper": dict(zip(("eta0", "eta1", "eta2", "eta3"), s.hyper.as_tuple())),
        "mode": _triple(s.mode.as_array()),
        "mode_delta": dict(zip(("delta1", "delta2", "delta3"), s.mode_delta.as_array())),
        "boundary_active": s.boundary_active,
        "laplace_sd_delta": None if s.laplace_sd is None else
        dict(zip(("delta1", "delta2", "delta3"), s.laplace_sd)),
        "posterior_means": _triple(s.means),
        "hpd_level": s.level,
        "hpd": _interval_dict(s.hpd),
        "mcmc_means": _triple(s.mcmc_means),
        "mcmc_se": _triple(s.mcmc_se),
        "mcmc_acceptance_rate": s.acceptance_rate,
        "self_check": None if z is None else {
            "z": _triple(z),
            "within_3_se": bool(np.all(np.abs(z) <= 3.0)),
        },
        "method_tags": s.method_tags,
    }
    return out


def cmd_fit_bayes(args) -> int:
    sample, digest = _read_data(args.data)
    stats = mle.sufficient_stats(sample)
    hyper = _hyper_from_args(args)
    summary = bayes.summarize_posterior(hyper, stats, args.level, _qctrl(args),
                                        run_mcmc=not args.no_mcmc)
    if args.format == "table":
        label = "Locally uniform prior set-up" if hyper.is_flat else "Conjugate prior set-up"
        _emit(args, render_posterior_table([(label, summary)]))
        return EXIT_OK
    results = {"n": stats.n, **_summary_dict(summary)}
    doc = dataio.envelope("fit-bayes", digest, results, {"warnings": summary.warnings}, args.seed)
    _emit(args, dataio.dumps(doc))
    return EXIT_OK


def render_posterior_table(rows) -> str:
    """Posterior mean and HPD per parameter, one row per prior set-up."""
    level = rows[0][1].level
    pct = f"{100 * level:g}% HPD"
    head = f"{'Prior set-up':<30}"
    for name in ("lambda1", "lambda2", "lambda3"):
        head += f" | {name + ' mean':>13} {pct:>20}"
    lines = [head, "-" * len(head)]
    for label, s in rows:
        line = f"{label:<30}"
        for i in range(3):
            lo, hi = s.hpd[i]
            line += f" | {s.means[i]:>13.4f} {f'({lo:.4f}, {hi:.4f})':>20}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    """Posterior means and HPDs under the conjugate and the flat prior."""
    sample, digest = _read_data(args.data)
    stats = mle.sufficient_stats(sample)
    hyper = bayes.PriorHyper(*(args.hyper or REPORT_HYPER))
    qctrl = _qctrl(args)
    rows = [
        ("Conjugate prior set-up", bayes.summarize_posterior(hyper, stats, args.level, qctrl)),
        ("Locally uniform prior set-up",
         bayes.summarize_posterior(bayes.FLAT_PRIOR, stats, args.level, qctrl)),
    ]
    table = render_posterior_table(rows)
    doc = dataio.envelope(
        "report", digest,
        {"n": stats.n, "rows": [{"label": lab, **_summary_dict(s)} for lab, s in rows],
         "table": table},
        {"warnings": [w for _, s in rows for w in s.warnings]}, args.seed)
    if args.json:
        Path(args.json).write_text(dataio.dumps(doc), encoding="utf-8")
    _emit(args, table)
    return EXIT_OK


def cmd_coverage_study(args) -> int:
    choices = args.choices
    config = study.StudyConfig(
        parameter_choices=[study.DESIGN_CHOICES[c] for c in choices],
        inits=[study.DESIGN_INITS[c] for c in choices] if not args.default_init else None,
        sample_sizes=args.sizes,
        replications=args.replications,
        tau=args.tau,
        bootstrap_B=args.bootstrap,
        master_seed=args.seed,
        labels=choices,
    )
    result = study.run_study(config, workers=args.workers, progress=not args.quiet)
    table = study.render_table(result)
    if args.table:
        Path(args.table).write_text(table + "\n", encoding="utf-8")
    _log(args, table)
    digest = dataio.digest_params({"choices": choices, "sizes": list(config.sample_sizes),
                                   "replications": config.replications, "tau": config.tau,
                                   "B": config.bootstrap_B})
    doc = dataio.envelope("coverage-study", digest, result.to_dict(),
                          {"failure_fraction": result.failure_fraction}, args.seed)
    _emit(args, dataio.dumps(doc))
    if result.failure_fraction > study.MAX_FAILURE_FRACTION:
        _log(args, f"failure fraction {result.failure_fraction:.3f} exceeds "
                   f"{study.MAX_FAILURE_FRACTION}")
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")
    common.add_argument("--output", "-o", help="write the main output here instead of stdout")
    common.add_argument("--seed", type=_seed, default=0)

    parser = argparse.ArgumentParser(prog="bpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw pairs and print CSV")
    p.add_argument("--lambda1", type=float, required=True)
    p.add_argument("--lambda2", type=float, required=True)
    p.add_argument("--lambda3", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--method", choices=["exact", "gibbs"], default="exact")
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--thin", type=int, default=5)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-mle", parents=[common], help="maximum-likelihood fit of a CSV")
    p.add_argument("data", nargs="?", help="CSV with header x,y (default: bundled sample)")
    p.add_argument("--init", type=float, nargs=3, metavar=("L1", "L2", "L3"))
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.set_defaults(func=cmd_fit_mle)

    bayes_opts = argparse.ArgumentParser(add_help=False)
    bayes_opts.add_argument("--level", type=float, default=0.95)
    bayes_opts.add_argument("--nodes", type=int, default=41)
    bayes_opts.add_argument("--radius", type=float, default=8.0)
    bayes_opts.add_argument("--mcmc-steps", type=int, default=60_000)
    bayes_opts.add_argument("--mcmc-burn-in", type=int, default=5_000)

    p = sub.add_parser("fit-bayes", parents=[common, bayes_opts], help="posterior summary of a CSV")
    p.add_argument("data", nargs="?")
    prior = p.add_mutually_exclusive_group()
    prior.add_argument("--flat", action="store_true", help="locally uniform prior")
    prior.add_argument("--elicit", type=float, nargs=4, metavar=("NSTAR", "V1", "V2", "V3"))
    prior.add_argument("--hyper", type=float, nargs=4, metavar=("ETA0", "ETA1", "ETA2", "ETA3"))
    p.add_argument("--no-mcmc", action="store_true", help="skip the MCMC cross-check")
    p.add_argument("--format", choices=["json", "table"], default="json")
    p.set_defaults(func=cmd_fit_bayes)

    p = sub.add_parser("report", parents=[common, bayes_opts],
                       help="conjugate vs flat prior table for a CSV")
    p.add_argument("data", nargs="?")
    p.add_argument("--hyper", type=float, nargs=4, metavar=("ETA0", "ETA1", "ETA2", "ETA3"))
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("coverage-study", parents=[common], help="Wald/bootstrap coverage simulation")
    p.add_argument("--choices", type=int, nargs="+", default=[1, 2, 3, 4], choices=[1, 2, 3, 4])
    p.add_argument("--sizes", type=int, nargs="+", default=[50, 75, 100])
    p.add_argument("--replications", type=int, default=500)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--bootstrap", type=int, default=200, metavar="B", help="0 disables")
    p.add_argument("--workers", type=int, default=None, help="default: $BPC_THREADS or CPU count")
    p.add_argument("--default-init", action="store_true",
                   help="start from moment-style values instead of the design's starting values")
    p.add_argument("--table", help="write the rendered table here")
    p.set_defaults(func=cmd_coverage_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (dataio.InputError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_INPUT)
    except (mle.DegenerateDataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SeriesError, OverflowError, mle.BootstrapError, bayes.ConvergenceError,
            bayes.QuadratureError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
