"""Command-line experiment runner.

Subcommands ``simulate``, ``converge``, ``stability-table`` and ``check``
read an optional JSON config (``--config``); command-line flags override
values from the file, which override the defaults of the chosen built-in
problem.  Exit codes: 0 success, 1 invariant violation, 2 configuration
error, 3 numerical overflow.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import sys
import warnings
from dataclasses import dataclass

import numpy as np

from . import analysis, brownian, core, problems, solver

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_OVERFLOW = 3

DEFAULTS = {
    "example1": {
        "solver": {"step": 2.0**-7, "horizon": 10.0, "n_paths": 1, "seed": 2024, "record_stride": 1},
        "converge": {
            "steps": [2.0**-k for k in range(7, 12)],
            "reference_step": 2.0**-14,
            "horizon": 10.0,
            "n_paths": 500,
        },
        "check": {"k_max": 100_000, "scan_range": 50.0, "scan_points": 200},
    },
    "example2": {
        "solver": {"step": 1e-4, "horizon": 10.0, "n_paths": 1, "seed": 2024, "record_stride": 1},
        "converge": {
            "steps": [0.1 / 2**k for k in range(4, 8)],
            "reference_step": 0.1 / 2**10,
            "horizon": 1.0,
            "n_paths": 200,
        },
        "stability": {"delta_list": [1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9]},
        "check": {"k_max": 100_000, "scan_range": 50.0, "scan_points": 200},
    },
    "zero": {
        "solver": {"step": 0.01, "horizon": 1.0, "n_paths": 1, "seed": 2024, "record_stride": 1},
        "converge": {"steps": [0.1, 0.01], "reference_step": 0.001, "horizon": 1.0, "n_paths": 1},
        "check": {"k_max": 1000, "scan_range": 50.0, "scan_points": 200},
    },
    "linear": {
        "solver": {"step": 1e-3, "horizon": 1.0, "n_paths": 1, "seed": 2024, "record_stride": 1},
        "converge": {"steps": [1e-2, 1e-3], "reference_step": 1e-5, "horizon": 1.0, "n_paths": 1},
        "check": {"k_max": 1000, "scan_range": 50.0, "scan_points": 200},
    },
}

GENERIC_DEFAULTS = {
    "solver": {"step": 1e-3, "horizon": 1.0, "n_paths": 1, "seed": 2024, "record_stride": 1},
    "check": {"k_max": 100_000, "scan_range": 50.0, "scan_points": 200},
}


class ConfigError(Exception):
    pass


# -- inline coefficient expressions -------------------------------------------

_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "sinh", "cosh", "arctan", "sign", "pi", "minimum", "maximum")
}


@dataclass(frozen=True)
class _Expr:
    """Scalar expression in ``x, y`` (coefficients) or ``t`` (delay, initial data)."""

    source: str
    kind: str = "drift"

    def __post_init__(self):
        try:
            compile(self.source, "<config>", "eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.source!r}: {exc.msg}") from None

    def _eval(self, **env):
        return eval(self.source, {"__builtins__": {}}, {**_NAMESPACE, **env})

    def __call__(self, *args):
        if self.kind in ("delay", "initial"):
            t = np.asarray(args[0], dtype=float)
            return np.broadcast_to(np.asarray(self._eval(t=t), dtype=float), t.shape).copy()
        x, y = args
        out = np.broadcast_to(np.asarray(self._eval(x=x, y=y), dtype=float), np.shape(x)).copy()
        return out[..., None] if self.kind == "diffusion" else out


def _inline_problem(desc: dict):
    try:
        tau = float(desc["tau"])
        delay_src = str(desc.get("delay", str(tau)))
        delta_hat = float(desc.get("delta_hat", 0.0))
        delay = core.DelayFunction(_Expr(delay_src, "delay"), tau, delta_hat)
        xi = desc.get("xi", 1.0)
        if isinstance(xi, str):
            initial = core.InitialPath(_Expr(xi, "initial"), float(desc.get("holder_K4", 0.0)), float(desc.get("holder_rho", 1.0)))
        else:
            initial = core.InitialPath.constant(float(xi), float(desc.get("holder_K4", 0.0)), float(desc.get("holder_rho", 1.0)))
        base = core.SddeProblem(1, 1, _Expr(str(desc["drift"])), _Expr(str(desc.get("diffusion", "0")), "diffusion"),
                                delay, initial, name="inline")
    except KeyError as exc:
        raise ConfigError(f"inline problem is missing field {exc.args[0]!r}") from None
    split = desc.get("split")
    if not split:
        return base
    return core.SplitSddeProblem(
        base,
        _Expr(str(split["drift_linear"])), _Expr(str(split["drift_super"])),
        _Expr(str(split.get("diff_linear", "0")), "diffusion"), _Expr(str(split.get("diff_super", "0")), "diffusion"),
        lbar=float(split.get("lbar", 0.0)), lbar1=float(split.get("lbar1", 0.0)),
    )


# -- configuration ----------------------------------------------------------------


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _flag_overrides(args) -> dict:
    over: dict = {}

    def put(section, key, value):
        if value is not None:
            over.setdefault(section, {})[key] = value

    if getattr(args, "problem", None) is not None:
        over["problem"] = args.problem
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    if getattr(args, "xi", None) is not None:
        over["xi"] = args.xi
    put("solver", "seed", args.seed)
    put("solver", "step", getattr(args, "step", None))
    put("solver", "horizon", getattr(args, "horizon", None))
    put("solver", "record_stride", getattr(args, "stride", None))
    if args.command == "simulate":
        put("solver", "n_paths", getattr(args, "n_paths", None))
    if args.command == "converge":
        put("converge", "steps", args.steps)
        put("converge", "reference_step", args.reference_step)
        put("converge", "n_paths", args.n_paths)
        put("converge", "horizon", args.horizon)
    if args.command == "stability-table":
        put("stability", "delta_list", args.delta_list)
    if args.command == "check":
        put("check", "k_max", args.k_max)
    return over


def build_config(args) -> dict:
    """Merge built-in defaults, the config file and command-line flags."""
    raw = _load_file(args.config)
    over = _flag_overrides(args)
    name = over.get("problem", raw.get("problem", "example1"))
    if isinstance(name, str):
        if name not in problems.BUILTINS:
            raise ConfigError(f"unknown built-in problem {name!r}; choose from {sorted(problems.BUILTINS)}")
        defaults = DEFAULTS[name]
    elif isinstance(name, dict):
        defaults = GENERIC_DEFAULTS
    else:
        raise ConfigError("'problem' must be a built-in name or an inline coefficient object")
    cfg = _merge(_merge(defaults, raw), over)
    cfg["problem"] = name
    return cfg


@dataclass
class Experiment:
    problem: object
    policy: core.TruncationPolicy
    mode: str
    cfg: dict


def build_experiment(cfg: dict) -> Experiment:
    """Instantiate problem and policy and validate every numeric field."""
    name = cfg["problem"]
    try:
        if isinstance(name, str):
            factory, policy_factory, mode = problems.BUILTINS[name]
            kwargs = {"xi": float(cfg["xi"])} if "xi" in cfg else {}
            problem = factory(**kwargs)
            policy = policy_factory()
        else:
            problem = _inline_problem(name)
            policy = None
            mode = "partial" if isinstance(problem, core.SplitSddeProblem) else "full"
        pol = cfg.get("policy")
        if pol:
            policy = core.power_policy(
                float(pol["mu_coeff"]), float(pol["mu_power"]), float(pol["phi_coeff"]),
                float(pol.get("phi_power", -0.25)), pol.get("h_hat"),
            )
        if policy is None:
            raise ConfigError("inline problems need a 'policy' block")
        mode = cfg.get("mode", mode)
        if mode not in ("full", "partial"):
            raise ConfigError(f"mode must be 'full' or 'partial', got {mode!r}")
        if mode == "partial" and not isinstance(problem, core.SplitSddeProblem):
            raise ConfigError("mode 'partial' needs a problem with a 'split' block")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid problem or policy: {exc}") from None
    return Experiment(problem, policy, mode, cfg)


def _solver_config(exp: Experiment) -> tuple[solver.SolverConfig, int, int]:
    s = exp.cfg["solver"]
    try:
        config = solver.SolverConfig(float(s["step"]), float(s["horizon"]), int(s.get("record_stride", 1)))
        config.lag_steps(exp.problem)
        core.truncation_radius(exp.policy, config.step)
        n_paths, seed = int(s.get("n_paths", 1)), int(s["seed"])
    except core.TruncEMError as exc:
        raise ConfigError(str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver block: {exc}") from None
    if n_paths < 1:
        raise ConfigError("n_paths must be at least 1")
    return config, n_paths, seed


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _stability_inputs(exp: Experiment):
    block = exp.cfg.get("stability", {})
    if exp.cfg["problem"] == "example2":
        params = problems.example2_stability()
    else:
        params = None
    keys = ("lambda1", "lambda2", "alpha1", "alpha2", "alpha3", "alpha4", "beta", "theta", "lbar", "lbar1")
    given = {k: float(block[k]) for k in keys if k in block}
    if params is None:
        missing = [k for k in keys[:7] if k not in given]
        if missing:
            raise ConfigError(f"stability block is missing {missing}")
        try:
            params = core.StabilityParams(**given)
        except core.DomainError as exc:
            raise ConfigError(str(exc)) from None
    elif given:
        fields = {k: getattr(params, k) for k in keys}
        fields.update(given)
        params = core.StabilityParams(**fields)
    if isinstance(exp.problem, core.SplitSddeProblem) and "lbar" not in given:
        fields = {k: getattr(params, k) for k in keys}
        fields.update(lbar=exp.problem.lbar, lbar1=exp.problem.lbar1)
        params = core.StabilityParams(**fields)
    tau = float(block.get("tau", exp.problem.tau))
    kappa = int(block["kappa"]) if "kappa" in block else core.kappa_bar(exp.problem.delay.delta_hat)
    deltas = [float(d) for d in block.get("delta_list", [1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9])]
    for d in deltas:
        if not 0 < d <= 1:
            raise ConfigError(f"step {d} in delta_list is outside (0, 1]")
    return params, kappa, tau, deltas


# -- commands -----------------------------------------------------------------------


def cmd_simulate(exp: Experiment, out, workers: int = 1) -> int:
    config, n_paths, seed = _solver_config(exp)
    if n_paths > 1:
        moments = solver.run_ensemble(exp.problem, exp.policy, config, n_paths, seed, exp.mode, workers)
        with _output(out) as fh:
            solver.write_moments_csv(moments, fh)
        if moments.overflowed:
            print(f"error: {moments.overflowed} of {n_paths} paths overflowed", file=sys.stderr)
            return EXIT_OVERFLOW
        return EXIT_OK
    grid = brownian.generate(seed, 0, config.step, config.horizon, exp.problem.dim_w)
    traj = solver.simulate(exp.problem, exp.policy, config, grid, exp.mode)
    with _output(out) as fh:
        solver.write_trajectory_csv(traj, fh)
    if traj.status != "ok":
        print(f"error: state overflowed at step {traj.overflow_step}", file=sys.stderr)
        return EXIT_OVERFLOW
    return EXIT_OK


def cmd_converge(exp: Experiment, out, workers: int = 1) -> int:
    c = exp.cfg.get("converge")
    if not c:
        raise ConfigError("no 'converge' block for this problem")
    seed = int(exp.cfg["solver"]["seed"])
    try:
        steps = [float(s) for s in c["steps"]]
        ref = float(c["reference_step"])
        horizon = float(c["horizon"])
        n_paths = int(c["n_paths"])
        # fail fast before any path is simulated
        for s in steps + [ref]:
            core.steps_per(exp.problem.tau, s, "delay bound tau")
            core.steps_per(horizon, s, "horizon")
            if s != ref:
                core.steps_per(s, ref, "step")
            core.truncation_radius(exp.policy, s)
    except core.TruncEMError as exc:
        raise ConfigError(str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid converge block: {exc}") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = analysis.strong_error(exp.problem, exp.policy, steps, ref, horizon, n_paths, seed, exp.mode, workers)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    with _output(out) as fh:
        analysis.write_convergence_csv(report, fh)
    if any(report.excluded):
        print(f"warning: overflowed coarse paths excluded per step: {report.excluded}", file=sys.stderr)
    return EXIT_OK


def cmd_stability_table(exp: Experiment, out, workers: int = 1) -> int:
    params, kappa, tau, deltas = _stability_inputs(exp)
    try:
        params.check(kappa)
        gamma = analysis.solve_gamma_star(params, kappa, tau)
        dstar = analysis.solve_delta_star(params, exp.policy, kappa)
    except core.InfeasibleParametersError as exc:
        print(f"error: infeasible stability parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = analysis.stability_table(params, exp.policy, kappa, tau, deltas)
    header = {
        "kappa_bar": kappa,
        "gamma_star": f"{gamma.gamma:.10g}",
        "delta_star": f"{dstar.value:.10g}",
        "delta_star_saturated": str(dstar.saturated).lower(),
        "decay_bound_continuous": f"{analysis.decay_rate_bound(gamma.gamma, params, kappa, tau):.10g}",
    }
    with _output(out) as fh:
        analysis.write_rate_table_csv(rows, fh, header)
    if any(r.above_delta_star for r in rows):
        print("warning: some steps are not below delta_star; no discrete rate exists there", file=sys.stderr)
    return EXIT_OK


def _khasminskii_constants(exp: Experiment):
    block = exp.cfg.get("khasminskii")
    if block:
        try:
            return core.KhasminskiiConstants(float(block["k1"]), float(block["k2"]), float(block["k3"]), float(block["beta"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid khasminskii block: {exc}") from None
    if exp.cfg["problem"] == "example1":
        return problems.EXAMPLE1_KHASMINSKII
    return None


def cmd_check(exp: Experiment, out, workers: int = 1) -> int:
    config, _, _ = _solver_config(exp)
    chk = exp.cfg.get("check", {})
    k_max = int(chk.get("k_max", 100_000))
    span = float(chk.get("scan_range", 50.0))
    npts = int(chk.get("scan_points", 200))
    problem = exp.problem
    if problem.dim_x == 1:
        g = np.linspace(-span, span, npts)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        samples = list(zip(xx.ravel()[:, None], yy.ravel()[:, None]))
    else:
        rng = np.random.default_rng(int(exp.cfg["solver"]["seed"]))
        pts = rng.uniform(-span, span, size=(npts * npts, 2, problem.dim_x))
        samples = [(p[0], p[1]) for p in pts]

    lines, failures = [], 0

    def report(name, violations, extra=""):
        nonlocal failures
        failures += len(violations)
        lines.append(f"{name}: {len(violations)} violation(s){extra}")

    report("policy", core.check_policy(exp.policy))
    report("delay", core.check_delay(problem.delay))
    report("initial_path", core.check_initial_path(problem.initial, problem.tau))
    if isinstance(problem, core.SplitSddeProblem):
        report("split", core.check_split(problem, samples[:: max(1, len(samples) // 2000)]))
    constants = _khasminskii_constants(exp)
    if constants is not None:
        report("khasminskii", core.check_khasminskii_preservation(problem, exp.policy, config.step, constants, samples),
               f" over {len(samples)} samples at step {config.step:g}")
    else:
        lines.append("khasminskii: skipped (no constants supplied)")
    mult, bound = core.check_multiplicity_bound(problem.delay, config.step, k_max)
    report("multiplicity", [] if mult <= bound else [core.Violation((k_max,), mult, bound, "multiplicity")],
           f"; max multiplicity {mult}, bound {bound}")
    with _output(out) as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_VIOLATION if failures else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "stability-table": cmd_stability_table,
    "check": cmd_check,
}


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="truncem", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--out", help="output CSV path (default stdout)")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--problem", help="built-in problem: " + ", ".join(problems.BUILTINS))
    common.add_argument("--mode", choices=("full", "partial"))
    common.add_argument("--xi", type=float, help="constant initial value")
    common.add_argument("--step", type=float)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="one trajectory, or ensemble moments with --n-paths > 1")
    p.add_argument("--horizon", type=float)
    p.add_argument("--stride", type=int, help="record every n-th grid point")
    p.add_argument("--n-paths", type=int)

    p = sub.add_parser("converge", parents=[common], help="strong error at the horizon versus step size")
    p.add_argument("--steps", type=_float_list)
    p.add_argument("--reference-step", type=float)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--horizon", type=float)

    p = sub.add_parser("stability-table", parents=[common], help="epsilon_delta and decay rates per step size")
    p.add_argument("--delta-list", type=_float_list)

    p = sub.add_parser("check", parents=[common], help="sampled assumption and invariant checks")
    p.add_argument("--k-max", type=int)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = build_config(args)
        exp = build_experiment(cfg)
        return COMMANDS[args.command](exp, args.out, args.workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except core.TruncEMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW if isinstance(exc, ArithmeticError) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
