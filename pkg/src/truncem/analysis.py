"""Strong-error estimation and mean-square stability rates."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import brownian
from .core import (
    ConfigurationError,
    DomainError,
    InfeasibleParametersError,
    PowerLaw,
    StabilityParams,
    TruncationPolicy,
    TruncEMError,
    epsilon_delta,
    steps_per,
)
from .solver import BLOCK_STEPS, EnsembleMoments, Integrator, _check_mode

__all__ = [
    "ReferenceOverflow",
    "ConvergenceReport",
    "RateSolution",
    "DeltaStar",
    "RateRow",
    "fit_order",
    "strong_error",
    "solve_gamma_star",
    "solve_gamma_star_delta",
    "solve_delta_star",
    "decay_rate_bound",
    "stability_table",
    "fit_decay_rate",
    "h_infinity_partial_sum",
    "write_convergence_csv",
    "write_rate_table_csv",
]


class ReferenceOverflow(TruncEMError, ArithmeticError):
    """A reference (finest-step) path blew up; its error is undefined."""


@dataclass(frozen=True)
class ConvergenceReport:
    steps: list
    rms_errors: list
    fitted_order: float
    n_paths: int
    reference_step: float | None
    stderr: list
    excluded: list

    def summary(self) -> str:
        return f"order={self.fitted_order:.6g}"


@dataclass(frozen=True)
class RateSolution:
    gamma: float
    residual: float
    iterations: int


@dataclass(frozen=True)
class DeltaStar:
    """Largest admissible step; ``saturated`` when the margin is not
    reached anywhere on ``(0, 1]`` and the value was capped at 1."""

    value: float
    saturated: bool
    target: float


# -- convergence --------------------------------------------------------------


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2:
        return math.nan
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def fit_order(steps: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(step)``."""
    return _slope(np.log(np.asarray(steps, dtype=float)), np.log(np.asarray(errors, dtype=float)))


def _lcm(values):
    out = 1
    for v in values:
        out = out * v // math.gcd(out, v)
    return out


def _final_states(problem, policy, steps, factors, reference_step, horizon, path_ids, seed, mode, with_reference):
    """Final states of every path at every level, plus overflow masks.

    All levels consume coarsenings of the same fine increments.
    """
    n_fine = steps_per(horizon, reference_step, "horizon")
    n = len(path_ids)
    levels = [Integrator(problem, policy, s, n, mode) for s in steps]
    ref = Integrator(problem, policy, reference_step, n, mode) if with_reference else None
    unit = _lcm(factors)
    block = unit * max(1, BLOCK_STEPS // unit)
    for start in range(0, n_fine, block):
        stop = min(start + block, n_fine)
        dW = brownian.increment_blocks(seed, path_ids, reference_step, start, stop, problem.dim_w)
        if ref is not None:
            ref.advance(dW)
        for integ, f in zip(levels, factors):
            integ.advance(brownian._coarsen_array(dW, f))
    finals = np.stack([lv.state for lv in levels])
    ref_final = ref.state if ref is not None else None
    ref_over = ref.overflow_step.copy() if ref is not None else np.full(n, -1)
    return finals, ref_final, ref_over


def strong_error(problem, policy, steps: Sequence[float], reference_step: float, horizon: float,
                 n_paths: int, seed: int, mode: str = "full", workers: int = 1,
                 exact: Callable | None = None) -> ConvergenceReport:
    """Root-mean-square error at ``horizon`` for each step size.

    Each path is simulated at ``reference_step`` and at every coarser step
    on the same Brownian path; the fine run stands in for the exact
    solution.  Passing ``exact`` (a callable of time returning the state)
    compares against it instead, which is meaningful for noise-free
    problems.
    """
    _check_mode(problem, mode)
    steps = sorted((float(s) for s in steps), reverse=True)
    if not steps:
        raise ConfigurationError("need at least one step size")
    if len(set(steps)) != len(steps):
        raise ConfigurationError("step sizes must be distinct")
    if n_paths < 1:
        raise ConfigurationError("n_paths must be at least 1")
    factors = [steps_per(s, reference_step, f"step {s}") for s in steps]
    for s in steps + [reference_step]:
        steps_per(problem.tau, s, "delay bound tau")
        steps_per(horizon, s, "horizon")

    ids = np.arange(n_paths)
    chunks = [c for c in np.array_split(ids, max(1, min(workers, n_paths))) if len(c)]
    args = [(problem, policy, steps, factors, reference_step, horizon, c, seed, mode, exact is None) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_final_states, *zip(*args)))
    else:
        parts = [_final_states(*a) for a in args]
    finals = np.concatenate([p[0] for p in parts], axis=1)
    ref_over = np.concatenate([p[2] for p in parts])
    if (ref_over >= 0).any():
        bad = int(np.nonzero(ref_over >= 0)[0][0])
        raise ReferenceOverflow(
            f"reference run at step {reference_step} overflowed on path {bad} at step {int(ref_over[bad])}"
        )
    if exact is None:
        target = np.concatenate([p[1] for p in parts], axis=0)
    else:
        target = np.broadcast_to(np.atleast_1d(np.asarray(exact(horizon), dtype=float)), finals.shape[1:])

    rms, se, excluded = [], [], []
    for level in finals:
        ok = np.isfinite(level).all(-1)
        sq = ((level[ok] - target[ok]) ** 2).sum(-1)
        excluded.append(int((~ok).sum()))
        if sq.size == 0:
            rms.append(math.nan)
            se.append(math.nan)
            continue
        ms = sq.mean()
        rms.append(float(math.sqrt(ms)))
        # delta method: se(sqrt(m)) = se(m) / (2 sqrt(m))
        se_ms = sq.std(ddof=1) / math.sqrt(sq.size) if sq.size > 1 else 0.0
        se.append(float(se_ms / (2 * math.sqrt(ms))) if ms > 0 else 0.0)
    if len(steps) < 2:
        warnings.warn("a single step size gives no convergence fit", stacklevel=2)
        order = math.nan
    elif not all(r > 0 for r in rms):
        warnings.warn("zero or undefined errors; convergence fit skipped", stacklevel=2)
        order = math.nan
    else:
        order = fit_order(steps, rms)
    return ConvergenceReport(steps, rms, order, n_paths, None if exact is not None else reference_step, se, excluded)


# -- stability rates ------------------------------------------------------------


def _bisect_increasing(h: Callable[[float], float], scale: float, max_iter: int = 400) -> RateSolution:
    """Root of a strictly increasing ``h`` with ``h(0) < 0`` on ``(0, inf)``."""
    tol = 1e-10 * (1.0 + abs(scale))
    lo, hi = 0.0, 1.0
    it = 0
    while h(hi) < 0:
        lo, hi = hi, 2.0 * hi
        it += 1
        if hi > 1e300:
            raise InfeasibleParametersError("no sign change found for the rate equation")
    mid, val = hi, h(hi)
    while it < max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        val = h(mid)
        if abs(val) <= tol or mid in (lo, hi):
            break
        if val < 0:
            lo = mid
        else:
            hi = mid
    return RateSolution(mid, val, it)


def solve_gamma_star(params: StabilityParams, kappa: int, tau: float) -> RateSolution:
    """Positive root of
    ``lambda1 = alpha1 + lambda2/4 + kappa (lambda2 + alpha2) e^{g tau} + g``."""
    if tau < 0:
        raise DomainError("tau must be nonnegative")
    if not params.margin(kappa) > 0:
        raise InfeasibleParametersError(
            "need lambda1 > alpha1 + lambda2/4 + kappa*(lambda2 + alpha2); "
            f"margin is {params.margin(kappa):.6g}"
        )
    base = params.alpha1 + 0.25 * params.lambda2
    lag = kappa * (params.lambda2 + params.alpha2)

    def h(g):
        return base + lag * math.exp(g * tau) + g - params.lambda1

    return _bisect_increasing(h, params.lambda1)


def solve_gamma_star_delta(params: StabilityParams, kappa: int, tau: float, step: float, eps: float) -> RateSolution:
    """Positive root of the discrete-time rate equation
    ``lambda1 = (alpha1 + lambda2/4 + eps) + kappa (lambda2 + alpha2 + eps) e^{g tau}
    + (1 - e^{-g step}) / step``."""
    if not step > 0:
        raise DomainError("step must be positive")
    if eps < 0:
        raise DomainError("eps must be nonnegative")
    base = params.alpha1 + 0.25 * params.lambda2 + eps
    lag = kappa * (params.lambda2 + params.alpha2 + eps)
    if not base + lag < params.lambda1:
        raise InfeasibleParametersError(
            "need lambda1 > (alpha1 + lambda2/4 + eps) + kappa*(lambda2 + alpha2 + eps); "
            f"margin is {params.lambda1 - base - lag:.6g} at step {step} (is step >= Delta*?)"
        )

    def h(g):
        return base + lag * math.exp(g * tau) - math.expm1(-g * step) / step - params.lambda1

    return _bisect_increasing(h, params.lambda1)


def solve_delta_star(params: StabilityParams, policy: TruncationPolicy, kappa: int) -> DeltaStar:
    """Step size at which ``epsilon_delta`` equals ``margin / (1 + kappa)``.

    For ``phi(D) = c D^{-1/4}`` the equation is quadratic in ``sqrt(D)``
    and solved in closed form; otherwise by bisection in ``log D``.
    """
    margin = params.margin(kappa)
    if not margin > 0:
        raise InfeasibleParametersError(
            "need lambda1 > alpha1 + lambda2/4 + kappa*(lambda2 + alpha2); "
            f"margin is {margin:.6g}"
        )
    target = margin / (1.0 + kappa)
    phi = policy.phi
    if isinstance(phi, PowerLaw) and phi.power == -0.25:
        a = 4.0 * params.lbar + 2.0 * params.lbar1
        b = 8.0 * phi.coeff**2
        # a s^2 + b s = target, s = sqrt(D); cancellation-free root
        s = 2.0 * target / (b + math.sqrt(b * b + 4.0 * a * target))
        value = s * s
        if value > 1.0:
            return DeltaStar(1.0, True, target)
        return DeltaStar(value, False, target)

    if epsilon_delta(params, policy, 1.0) <= target:
        return DeltaStar(1.0, True, target)
    hi = 1.0
    lo = 0.5
    while epsilon_delta(params, policy, lo) >= target:
        hi, lo = lo, lo * 0.5
        if lo < 1e-300:
            raise InfeasibleParametersError("epsilon_delta does not fall below the target")
    while hi - lo > 1e-12 * hi:
        mid = math.sqrt(lo * hi)
        if epsilon_delta(params, policy, mid) < target:
            lo = mid
        else:
            hi = mid
    return DeltaStar(0.5 * (lo + hi), False, target)


def decay_rate_bound(gamma: float, params: StabilityParams, kappa: int, tau: float) -> float:
    """``min(gamma, log(alpha3 / (kappa alpha4)) / tau)``; the second term is
    infinite when ``alpha4 = 0``."""
    if params.alpha4 == 0:
        return gamma
    return min(gamma, math.log(params.alpha3 / (kappa * params.alpha4)) / tau)


@dataclass(frozen=True)
class RateRow:
    delta: float
    epsilon: float
    gamma_star_delta: float
    above_delta_star: bool


def stability_table(params: StabilityParams, policy: TruncationPolicy, kappa: int, tau: float,
                    deltas: Sequence[float]) -> list[RateRow]:
    """``epsilon_delta`` and the discrete rate for each step size.

    Steps at or above the admissible bound give ``nan`` with the flag set.
    """
    rows = []
    for d in deltas:
        eps = epsilon_delta(params, policy, d)
        try:
            g = solve_gamma_star_delta(params, kappa, tau, d, eps).gamma
            rows.append(RateRow(d, eps, g, False))
        except InfeasibleParametersError:
            rows.append(RateRow(d, eps, math.nan, True))
    return rows


# -- moment decay ---------------------------------------------------------------


def fit_decay_rate(moments: EnsembleMoments, window: tuple[float, float] | None = None) -> float:
    """Least-squares slope of ``log E|y|^2`` against time inside ``window``.

    The default window ``[0.2 T, 0.8 T]`` skips the initial transient.
    """
    t = np.asarray(moments.times, dtype=float)
    m = np.asarray(moments.mean_sq, dtype=float)
    if window is None:
        window = (0.2 * t[-1], 0.8 * t[-1])
    lo, hi = window
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if sel.sum() < 2:
        raise DomainError(f"window {window} holds fewer than two recorded times")
    if not np.all(m[sel] > 0):
        raise DomainError(f"nonpositive second moment inside window {window}")
    return _slope(t[sel], np.log(m[sel]))


def h_infinity_partial_sum(moments: EnsembleMoments) -> float:
    """Left Riemann sum of ``E|y|^2`` over the recorded times."""
    t = np.asarray(moments.times, dtype=float)
    m = np.asarray(moments.mean_sq, dtype=float)
    return float((m[:-1] * np.diff(t)).sum())


# -- CSV ------------------------------------------------------------------------


def write_convergence_csv(report: ConvergenceReport, fh) -> None:
    """Rows ``delta, rms_error`` followed by the ``order=`` summary line."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["delta", "rms_error"])
    for s, e in zip(report.steps, report.rms_errors):
        w.writerow([repr(float(s)), repr(float(e))])
    fh.write(report.summary() + "\n")


def write_rate_table_csv(rows: Sequence[RateRow], fh, header: dict | None = None) -> None:
    """Comment lines for ``header`` entries, then ``delta, epsilon,
    gamma_star_delta, above_delta_star``."""
    for key, value in (header or {}).items():
        fh.write(f"# {key}={value}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["delta", "epsilon", "gamma_star_delta", "above_delta_star"])
    for r in rows:
        w.writerow([f"{r.delta:.6g}", f"{r.epsilon:.10g}", f"{r.gamma_star_delta:.10g}", str(r.above_delta_star).lower()])
