"""Command-line front end.

Every subcommand writes its artifacts (CSV, JSON, optional SVG) into ``--out``
together with ``run_config.json``, which ``deeplinear --config`` replays.
Exit status: 0 on success, 1 on bad input or a violated precondition, 2 when
a check that should hold does not.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import data, experiments, theory
from .errors import ContractViolation, IngestionError, NumericalFailure
from .flow import FlowConfig, compare_flow_gd, default_step
from .initialization import DEFAULT_SEED, balanced_init, gaussian_layerwise, identity_residual, make_rng
from .network import Monitors, NetSpec, Problem, WeightStack, train
from .plotting import Series, emit_plot

EXIT_OK, EXIT_CONTRACT, EXIT_VERDICT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Usage errors share exit status 1 with other input errors; 2 is reserved
    # for failed checks.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(
        json.dumps(_clean(obj), sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def parse_list(text: str, kind=float) -> list:
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"malformed list {text!r}") from None


def parse_grid(text: str) -> np.ndarray:
    """``lo:hi:n`` for n log-spaced points, or a comma-separated list."""
    if ":" in text:
        try:
            lo, hi, n = text.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
        except ValueError:
            raise UsageError(f"malformed grid {text!r}; expected lo:hi:n") from None
        if lo <= 0 or hi <= 0 or n < 1:
            raise UsageError(f"grid {text!r} needs positive bounds and n >= 1")
        return np.logspace(math.log10(lo), math.log10(hi), n)
    return np.array(parse_list(text))


# ---------------------------------------------------------------- arguments


def _common(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default="out")
    p.add_argument("--plot", action="store_true", help="also write an SVG chart")


def _architecture(p):
    p.add_argument("--depth", type=int)
    p.add_argument("--dims", help="comma list d_0,...,d_N, or one width used with --depth")


def _target(p):
    g = p.add_argument_group("target")
    g.add_argument("--phi-scalar", type=float, help="target equal to this times the identity")
    g.add_argument("--problem", help="problem JSON (as written by 'whiten')")
    g.add_argument(
        "--target",
        choices=["random_gaussian_target", "near_identity", "scalar_regression"],
        help="synthetic target",
    )
    g.add_argument("--radius", type=float, default=0.3, help="perturbation size for near_identity")


def _init(p, default="identity"):
    p.add_argument("--init", choices=["layerwise", "balanced", "identity"], default=default)
    p.add_argument("--std", type=float)
    p.add_argument("--weights", help="initial weights JSON, overrides --init")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="deeplinear", description="Gradient descent on deep linear networks.")
    top.add_argument("--config", help="replay a saved run_config.json")
    top.add_argument("--out", dest="config_out", help="output directory when replaying")
    sub = top.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("whiten", help="whiten a CSV dataset and write its moments")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default="-1", help="comma list of label column indices")
    p.add_argument("--header", action="store_true")
    p.add_argument("--no-rescale", action="store_true")

    p = sub.add_parser("train", help="run gradient descent and write the loss trace")
    _common(p), _architecture(p), _target(p), _init(p)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=10**6)
    p.add_argument("--stride", type=int, default=1, help="monitor recording stride")

    p = sub.add_parser("certificate", help="evaluate the convergence guarantee at an initialization")
    _common(p), _architecture(p), _target(p), _init(p)
    p.add_argument("--eps", type=float, default=1e-5)

    p = sub.add_parser("verify", help="train and check the run against the guarantee")
    _common(p), _architecture(p), _target(p), _init(p)
    p.add_argument("--lr", type=float, help="defaults to the certified maximum")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=10**4)
    p.add_argument("--stride", type=int, default=1)

    p = sub.add_parser("sweep", help="convergence time versus initialization scale")
    _common(p), _architecture(p), _target(p)
    p.add_argument("--init", choices=["layerwise", "balanced"], default="balanced")
    p.add_argument("--std-grid", default="1e-3:1:12")
    p.add_argument("--lr-grid", default="1e-4:1:5")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-iters", type=int, default=10**6, help="iteration cap per run")

    p = sub.add_parser("mc-balance", help="Monte Carlo frequency of delta-balancedness")
    _common(p), _architecture(p)
    p.add_argument("--std", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("mc-margin", help="Monte Carlo frequency of an initial deficiency margin")
    _common(p), _architecture(p), _target(p)
    p.add_argument("--mode", choices=list(experiments.montecarlo.MODES), default="balanced_lemma6")
    p.add_argument("--std", type=float, required=True)
    p.add_argument("--trials", type=int, default=2000)

    p = sub.add_parser("fail-unbalanced", help="divergence from an unbalanced start with a margin")
    _common(p)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--dims", default="1", help="width d")
    p.add_argument("--margin", type=float, default=0.75)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=1000)

    p = sub.add_parser("fail-margin", help="loss floor from the identity without a margin")
    _common(p)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--dims", default="2", help="width d")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1000)

    p = sub.add_parser("flow-compare", help="gradient descent against the end-to-end flow")
    _common(p), _architecture(p), _target(p)
    p.add_argument("--init", choices=["balanced"], default="balanced")
    p.add_argument("--std", type=float, default=0.5)
    p.add_argument("--w0", type=float, help="scalar networks: initial end-to-end value")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=10**4)
    p.add_argument("--h", type=float, help="integrator step (default scales with the target)")
    p.add_argument("--integrator", choices=["rk4", "euler"], default="rk4")
    return top


# ---------------------------------------------------------------- helpers


def resolve_spec(args) -> NetSpec:
    if args.dims is None:
        raise UsageError("--dims is required")
    dims = parse_list(args.dims, int)
    if len(dims) == 1:
        if args.depth is None:
            raise UsageError("a single --dims width needs --depth")
        return NetSpec.uniform(args.depth, dims[0])
    spec = NetSpec(tuple(dims))
    if args.depth is not None and args.depth != spec.depth:
        raise UsageError(f"--depth {args.depth} disagrees with --dims ({spec.depth} layers)")
    return spec


def resolve_problem(args, spec: NetSpec) -> Problem:
    shape = (spec.dims[-1], spec.dims[0])
    given = [x is not None for x in (args.phi_scalar, args.problem, args.target)]
    if sum(given) != 1:
        raise UsageError("give exactly one of --phi-scalar, --problem, --target")
    if args.phi_scalar is not None:
        if shape[0] != shape[1]:
            raise UsageError("--phi-scalar needs d_0 = d_N")
        return Problem(args.phi_scalar * np.eye(shape[0]))
    if args.problem is not None:
        p = Problem.from_json(json.loads(Path(args.problem).read_text()))
    else:
        p = data.synth_problem(args.target, shape, args.seed, r=args.radius)
    if p.phi.shape != shape:
        raise ContractViolation(f"target has shape {p.phi.shape}, network maps to {shape}")
    return p


def resolve_init(args, spec: NetSpec) -> WeightStack:
    if args.weights:
        w = WeightStack.load(args.weights)
        if w.spec != spec:
            raise ContractViolation(f"weights have dims {w.spec.dims}, expected {spec.dims}")
        return w
    if args.init == "identity":
        return identity_residual(spec)
    if args.std is None:
        raise UsageError(f"--init {args.init} needs --std")
    rng = make_rng(args.seed)
    if args.init == "layerwise":
        return gaussian_layerwise(spec, args.std, rng)
    return balanced_init(spec, std=args.std, seed=rng)


def _loss_plot(trace, path, title):
    t = np.arange(trace.loss.size)
    ok = np.isfinite(trace.loss)
    positive = bool(np.all(trace.loss[ok] > 0))
    emit_plot(
        [Series("loss", t[ok], trace.loss[ok])],
        path,
        logy=positive,
        xlabel="iteration",
        ylabel="loss",
        title=title,
    )


# ---------------------------------------------------------------- commands


def cmd_whiten(args, out: Path) -> int:
    labels = tuple(parse_list(args.labels, int))
    raw = data.load_csv(args.data, data.CsvLayout(labels=labels, header=args.header))
    t, white = data.whiten(raw)
    if not args.no_rescale:
        white = data.rescale_labels(white)
    moments = data.empirical_moments(white)
    data.save_csv(white, out / "whitened.csv")
    write_json(out / "moments.json", moments.to_json())
    write_json(out / "problem.json", moments.problem().to_json())
    write_json(out / "transform.json", {"shape": list(t.shape), "data": t.ravel()})
    print(f"whitened {raw.m} examples, {raw.X.shape[0]} features, {raw.Y.shape[0]} labels")
    return EXIT_OK


def cmd_train(args, out: Path) -> int:
    spec = resolve_spec(args)
    p = resolve_problem(args, spec)
    w0 = resolve_init(args, spec)
    trace = train(w0, p, args.lr, args.eps, args.max_iters, Monitors.all(args.stride))
    trace.write_csv(out / "trace.csv")
    trace.final.save(out / "final_weights.json")
    summary = {
        "status": trace.status,
        "iterations": trace.iterations,
        "initial_loss": trace.loss[0],
        "final_loss": trace.loss[-1],
        "opt_const": p.opt_const,
    }
    write_json(out / "summary.json", summary)
    if args.plot:
        _loss_plot(trace, out / "loss.svg", f"depth {spec.depth}, lr {args.lr:g}")
    print(f"{trace.status} after {trace.iterations} steps, loss {trace.loss[-1]:.6g}")
    return EXIT_OK


def cmd_certificate(args, out: Path) -> int:
    spec = resolve_spec(args)
    p = resolve_problem(args, spec)
    w0 = resolve_init(args, spec)
    cert = theory.theorem1_certificate(w0, p.phi, args.eps)
    report = cert.to_json()
    if args.init == "balanced" and args.std is not None and spec.dims[-1] == 1 and not args.weights:
        report["balanced_init"] = theory.theorem2_certificate(spec, p.phi, args.std, args.eps).to_json()
    write_json(out / "certificate.json", report)
    print(f"satisfied={cert.satisfied} margin={cert.margin:.6g} eta_max={cert.eta_max:.6g}")
    return EXIT_OK


def cmd_verify(args, out: Path) -> int:
    spec = resolve_spec(args)
    p = resolve_problem(args, spec)
    w0 = resolve_init(args, spec)
    cert = theory.theorem1_certificate(w0, p.phi, args.eps)
    if not cert.satisfied:
        raise ContractViolation("initialization does not meet the guarantee's preconditions; see 'certificate'")
    eta = cert.eta_max if args.lr is None else args.lr
    trace = train(w0, p, eta, args.eps, args.max_iters, Monitors.all(args.stride))
    report = theory.verify_trajectory(trace, p.phi, eta, cert)
    trace.write_csv(out / "trace.csv")
    summary = report.summary()
    summary.update(eta=eta, status=trace.status, iterations=trace.iterations, certificate=cert.to_json())
    write_json(out / "verify.json", summary)
    if args.plot:
        _loss_plot(trace, out / "loss.svg", f"depth {spec.depth}, lr {eta:.3g}")
    print(f"checks {'passed' if report.passed else 'FAILED'} over {report.t.size} recorded points")
    return EXIT_OK if report.passed else EXIT_VERDICT


def cmd_sweep(args, out: Path) -> int:
    spec = resolve_spec(args)
    p = resolve_problem(args, spec)
    res = experiments.std_sweep(
        spec, p.phi, args.init, parse_grid(args.std_grid), parse_grid(args.lr_grid), args.eps, args.max_iters, args.seed
    )
    res.write_csv(out / "sweep.csv")
    res.write_json(out / "sweep.json")
    if args.plot:
        cens = [it is None for it in res.iterations]
        y = [res.cap if it is None else it for it in res.iterations]
        emit_plot(
            [Series(args.init, res.std_grid, y, cens)],
            out / "sweep.svg",
            logx=True,
            logy=True,
            xlabel="initialization std",
            ylabel="iterations to converge",
            title=f"depth {spec.depth}",
        )
    print(f"{res.n_converged}/{res.std_grid.size} scales converged")
    return EXIT_OK


def _mc_finish(rep, out: Path) -> int:
    rep.write_json(out / "report.json")
    rep.write_csv(out / "report.csv")
    bound = "n/a" if rep.bound is None else f"{rep.bound:.4f}"
    print(f"{rep.successes}/{rep.trials} = {rep.empirical_p:.4f} (bound {bound}, slack {rep.slack:.4f})")
    return EXIT_OK if rep.consistent else EXIT_VERDICT


def cmd_mc_balance(args, out: Path) -> int:
    spec = resolve_spec(args)
    return _mc_finish(experiments.mc_balance_probability(spec, args.std, args.delta, args.trials, args.seed), out)


def cmd_mc_margin(args, out: Path) -> int:
    spec = resolve_spec(args)
    p = resolve_problem(args, spec)
    rep = experiments.mc_margin_probability(spec, p.phi, args.mode, args.std, args.trials, args.seed)
    return _mc_finish(rep, out)


def _failure_finish(res, out: Path, plot: bool, title: str) -> int:
    res.trace.write_csv(out / "trace.csv")
    write_json(out / "verdict.json", {"verdict": res.verdict, "message": res.message, **res.details})
    if plot:
        _loss_plot(res.trace, out / "loss.svg", title)
    print(f"verdict: {res.message}")
    return EXIT_OK if res.verdict else EXIT_VERDICT


def cmd_fail_unbalanced(args, out: Path) -> int:
    d = parse_list(args.dims, int)
    if len(d) != 1:
        raise UsageError("--dims takes a single width here")
    res = experiments.failure_unbalanced(args.margin, args.lr, args.depth, d[0], args.max_iters)
    return _failure_finish(res, out, args.plot, "unbalanced start")


def cmd_fail_margin(args, out: Path) -> int:
    d = parse_list(args.dims, int)
    if len(d) != 1:
        raise UsageError("--dims takes a single width here")
    res = experiments.failure_no_margin(d[0], args.depth, args.lr, args.lam, args.steps)
    return _failure_finish(res, out, args.plot, "identity start, no margin")


def cmd_flow_compare(args, out: Path) -> int:
    spec = resolve_spec(args)
    p = resolve_problem(args, spec)
    if args.w0 is not None:
        if spec.dims[0] != 1 or spec.dims[-1] != 1:
            raise UsageError("--w0 needs a scalar network")
        w0 = balanced_init(spec, np.array([[args.w0]]))
    else:
        w0 = balanced_init(spec, std=args.std, seed=make_rng(args.seed))
    tau = args.lr * args.steps
    h = min(default_step(p.phi, spec.depth), tau) if args.h is None else args.h
    cmp = compare_flow_gd(w0, p.phi, args.lr, args.steps, FlowConfig(spec.depth, h, tau, args.integrator))
    cmp.trajectory.write_csv(out / "flow.csv", cmp.deviation)
    write_json(out / "summary.json", {"max_deviation": cmp.max_deviation, "h": h, "tau_max": tau})
    if args.plot:
        ok = cmp.deviation > 0
        emit_plot(
            [Series("deviation", cmp.tau[ok], cmp.deviation[ok])],
            out / "deviation.svg",
            logy=True,
            xlabel="tau",
            ylabel="||GD - flow||_F",
        )
    print(f"max deviation {cmp.max_deviation:.3e}")
    return EXIT_OK


COMMANDS = {
    "whiten": cmd_whiten,
    "train": cmd_train,
    "certificate": cmd_certificate,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "mc-balance": cmd_mc_balance,
    "mc-margin": cmd_mc_margin,
    "fail-unbalanced": cmd_fail_unbalanced,
    "fail-margin": cmd_fail_margin,
    "flow-compare": cmd_flow_compare,
}


def _resolve_args(parser, argv):
    args = parser.parse_args(argv)
    if args.config is None:
        if args.command is None:
            parser.error("a subcommand or --config is required")
        return args
    if args.command is not None:
        parser.error("--config replaces the subcommand")
    try:
        saved = json.loads(Path(args.config).read_text(encoding="utf-8"))
        command = saved["command"]
    except (OSError, ValueError, KeyError) as exc:
        raise IngestionError(f"cannot read run config {args.config}: {exc}") from None
    if command not in COMMANDS:
        raise IngestionError(f"run config names unknown command {command!r}")
    replay = parser.parse_args([command] + _required_stub(parser, command, saved))
    for key, value in saved.items():
        setattr(replay, key, value)
    if args.config_out is not None:
        replay.out = args.config_out
    replay.config = None
    return replay


def _required_stub(parser, command, saved):
    # Satisfy argparse's required flags; the saved values overwrite them.
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    stub = []
    for action in sub._actions:
        if action.required and action.option_strings:
            stub += [action.option_strings[0], str(saved.get(action.dest, "0"))]
    return stub


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = _resolve_args(parser, argv)
        except SystemExit as exc:  # argparse usage errors and --help
            return exc.code if isinstance(exc.code, int) else EXIT_CONTRACT
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config = {k: v for k, v in vars(args).items() if k not in ("config", "config_out")}
        write_json(out / "run_config.json", config)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deeplinear: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ContractViolation, IngestionError, NumericalFailure, OSError) as exc:
        print(f"deeplinear: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
