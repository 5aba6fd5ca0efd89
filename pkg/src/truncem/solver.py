"""Truncated Euler-Maruyama stepping for delay SDEs.

The recursion is

    y_{k+1} = y_k + f_D(y_k, y_{k-d_k}) D + g_D(y_k, y_{k-d_k}) dB_k,
    y_k = xi(k D)  for k = -M..0,

with ``d_k = floor(delta(k D) / D)`` and ``D = tau / M``.  Many paths are
advanced at once as rows of a ``(paths, d)`` array; each row only ever
touches its own data, so a path's values do not depend on which other
paths share its batch.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import brownian
from .core import (
    ConfigurationError,
    SplitSddeProblem,
    TruncEMError,
    delay_indices,
    evaluate_coefficients,
    steps_per,
    truncation_radius,
)

__all__ = [
    "PathOverflow",
    "SolverConfig",
    "Trajectory",
    "EnsembleMoments",
    "History",
    "step_once",
    "Integrator",
    "simulate",
    "run_ensemble",
    "write_trajectory_csv",
    "write_moments_csv",
]

BLOCK_STEPS = 4096


class PathOverflow(TruncEMError, ArithmeticError):
    """The state became non-finite while computing ``y_{step+1}``."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state produced at step {step}")
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    step: float
    horizon: float
    record_stride: int = 1

    def __post_init__(self):
        if not 0 < self.step <= 1:
            raise ConfigurationError(f"step must lie in (0, 1], got {self.step}")
        if self.record_stride < 1:
            raise ConfigurationError("record_stride must be a positive integer")
        steps_per(self.horizon, self.step, "horizon")

    @property
    def n_steps(self) -> int:
        return steps_per(self.horizon, self.step, "horizon")

    def lag_steps(self, problem) -> int:
        """``M = tau / step``; raises unless it is an integer."""
        return steps_per(problem.tau, self.step, "delay bound tau")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded grid values ``y_k`` (rows of ``values``) at ``times = k step``.

    ``status`` is ``"ok"`` or ``"overflow"``; on overflow, ``overflow_step``
    is the index ``k`` whose update produced a non-finite state and the
    recording stops at ``y_k``.
    """

    times: np.ndarray
    values: np.ndarray
    indices: np.ndarray
    status: str = "ok"
    overflow_step: int | None = None

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class EnsembleMoments:
    """Per-time estimates of ``E|y_k|^2`` over the completed paths."""

    times: np.ndarray
    mean_sq: np.ndarray
    count: int
    stderr: np.ndarray
    step: float
    overflowed: int = 0


class History:
    """Ring buffer holding ``y_j`` for the last ``M + 1`` indices ``j``.

    Indexed by absolute step number; starts out holding the initial segment
    ``xi(j step)`` for ``j = -M..0``.
    """

    def __init__(self, problem, step: float, n_paths: int | None = None):
        self.m = steps_per(problem.tau, step, "delay bound tau")
        self.size = self.m + 1
        shape = (self.size, problem.dim_x) if n_paths is None else (self.size, n_paths, problem.dim_x)
        self.buf = np.empty(shape)
        for j in range(-self.m, 1):
            self.buf[j % self.size] = problem.initial(j * step)
        self.last = 0

    def __getitem__(self, j: int) -> np.ndarray:
        if not self.last - self.m <= j <= self.last:
            raise IndexError(f"y_{j} is outside the window [{self.last - self.m}, {self.last}]")
        return self.buf[j % self.size]

    def push(self, value) -> None:
        self.last += 1
        self.buf[self.last % self.size] = value


def _euler_update(x, fx, gx, dw, step):
    return x + fx * step + (gx * dw[..., None, :]).sum(-1)


def step_once(problem, policy, config: SolverConfig, k: int, history, dW, mode: str = "full") -> np.ndarray:
    """One truncated EM step from ``y_k`` to ``y_{k+1}``.

    ``history[j]`` must return ``y_j`` for ``j`` in ``[k - M, k]``.
    """
    radius = truncation_radius(policy, config.step)
    lag = int(delay_indices(problem.delay, config.step, np.array([k]))[0])
    x = np.asarray(history[k], dtype=float)
    y = np.asarray(history[k - lag], dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        fx, gx = evaluate_coefficients(problem, radius, x, y, mode)
        new = _euler_update(x, fx, gx, np.asarray(dW, dtype=float).reshape(problem.dim_w), config.step)
    if not np.all(np.isfinite(new)):
        raise PathOverflow(k)
    return new


def _check_mode(problem, mode):
    if mode not in ("full", "partial"):
        raise ConfigurationError(f"unknown truncation mode {mode!r}; expected 'full' or 'partial'")
    if mode == "partial" and not isinstance(problem, SplitSddeProblem):
        raise ConfigurationError("partial truncation requires a SplitSddeProblem")


class Integrator:
    """Advance a batch of paths through consecutive blocks of increments.

    Rows that overflow are frozen at zero internally, flagged in
    ``overflow_step`` and reported as NaN in every later record.
    """

    def __init__(self, problem, policy, step: float, n_paths: int, mode: str = "full"):
        _check_mode(problem, mode)
        self.problem = problem
        self.step = float(step)
        self.mode = mode
        self.radius = truncation_radius(policy, step)
        self.history = History(problem, step, n_paths)
        self.k = 0
        self.n_paths = n_paths
        self.overflow_step = np.full(n_paths, -1, dtype=np.int64)

    @property
    def state(self) -> np.ndarray:
        out = self.history.buf[self.k % self.history.size].copy()
        out[self.overflow_step >= 0] = np.nan
        return out

    def advance(self, dW: np.ndarray, record_stride: int = 0):
        """Consume increments ``dW`` of shape ``(paths, n, m)``.

        With ``record_stride > 0`` returns ``(indices, states)`` for every new
        index ``k`` that is a multiple of the stride.
        """
        n = dW.shape[1]
        k0 = self.k
        lags = delay_indices(self.problem.delay, self.step, np.arange(k0, k0 + n))
        buf, size, step, radius = self.history.buf, self.history.size, self.step, self.radius
        problem, mode = self.problem, self.mode
        rec_idx, rec_val = [], []
        dead = self.overflow_step >= 0
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(n):
                k = k0 + i
                x = buf[k % size]
                y = buf[(k - lags[i]) % size]
                fx, gx = evaluate_coefficients(problem, radius, x, y, mode)
                new = _euler_update(x, fx, gx, dW[:, i], step)
                if not np.isfinite(new).all():
                    bad = ~np.isfinite(new).all(-1)
                    fresh = bad & ~dead
                    self.overflow_step[fresh] = k
                    dead = dead | bad
                    new[bad] = 0.0
                buf[(k + 1) % size] = new
                if record_stride and (k + 1) % record_stride == 0:
                    rec_idx.append(k + 1)
                    val = new.copy()
                    val[dead] = np.nan
                    rec_val.append(val)
        self.k = k0 + n
        self.history.last = self.k
        if record_stride:
            return rec_idx, rec_val
        return None


def simulate(problem, policy, config: SolverConfig, grid: brownian.BrownianGrid, mode: str = "full") -> Trajectory:
    """Run one path on the increments of ``grid``, coarsened to ``config.step``.

    Recorded indices are the multiples of ``record_stride`` in ``[-M, N]``
    plus ``N`` itself.
    """
    _check_mode(problem, mode)
    if grid.dim_w != problem.dim_w:
        raise ConfigurationError(f"grid has dim_w={grid.dim_w}, problem needs {problem.dim_w}")
    n_total = config.n_steps
    m = config.lag_steps(problem)
    factor = steps_per(config.step, grid.finest_step, "solver step")
    if abs(grid.horizon - config.horizon) > 1e-9 * config.horizon:
        raise ConfigurationError("grid horizon differs from the solver horizon")
    inc = brownian.coarsen(grid, factor).increments
    stride = config.record_stride

    integ = Integrator(problem, policy, config.step, 1, mode)
    idx = [j for j in range(-m, 1) if j % stride == 0]
    vals = [integ.history.buf[j % integ.history.size][0].copy() for j in idx]
    status, ov = "ok", None
    for start in range(0, n_total, BLOCK_STEPS):
        stop = min(start + BLOCK_STEPS, n_total)
        ri, rv = integ.advance(inc[None, start:stop], 1)
        if integ.overflow_step[0] >= 0:
            status, ov = "overflow", int(integ.overflow_step[0])
        for j, v in zip(ri, rv):
            if ov is not None and j > ov:
                break
            if j % stride == 0 or j == n_total or j == ov:
                idx.append(j)
                vals.append(v[0])
        if ov is not None:
            if idx[-1] != ov:
                # y_ov closed the previous block and was not on the stride
                idx.append(ov)
                vals.append(last)
            break
        last = rv[-1][0]
    indices = np.array(idx, dtype=np.int64)
    return Trajectory(indices * config.step, np.array(vals), indices, status, ov)


# -- ensembles ------------------------------------------------------------------


def _ensemble_chunk(problem, policy, config: SolverConfig, path_ids, seed: int, mode: str):
    n_total = config.n_steps
    integ = Integrator(problem, policy, config.step, len(path_ids), mode)
    idx, vals = [0], [integ.state]
    for start in range(0, n_total, BLOCK_STEPS):
        stop = min(start + BLOCK_STEPS, n_total)
        dW = brownian.increment_blocks(seed, path_ids, config.step, start, stop, problem.dim_w)
        ri, rv = integ.advance(dW, config.record_stride)
        idx += ri
        vals += rv
    if idx[-1] != n_total:
        idx.append(n_total)
        vals.append(integ.state)
    return np.array(idx), np.stack(vals), integ.overflow_step


def run_ensemble(problem, policy, config: SolverConfig, n_paths: int, seed: int, mode: str = "full",
                 workers: int = 1) -> EnsembleMoments:
    """Estimate ``E|y_k|^2`` from paths ``0..n_paths-1`` of stream ``seed``.

    Paths are split into one contiguous chunk per worker; per-path values do
    not depend on the split and the reduction runs over the reassembled
    ``(time, path)`` array in path order, so the result is bit-identical for
    any worker count.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be at least 1")
    _check_mode(problem, mode)
    config.lag_steps(problem)
    ids = np.arange(n_paths)
    chunks = [c for c in np.array_split(ids, max(1, min(workers, n_paths))) if len(c)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_ensemble_chunk, *zip(*[(problem, policy, config, c, seed, mode) for c in chunks])))
    else:
        parts = [_ensemble_chunk(problem, policy, config, c, seed, mode) for c in chunks]
    idx = parts[0][0]
    values = np.concatenate([p[1] for p in parts], axis=1)
    overflow = np.concatenate([p[2] for p in parts])
    done = overflow < 0
    count = int(done.sum())
    if count == 0:
        nan = np.full(len(idx), np.nan)
        return EnsembleMoments(idx * config.step, nan, 0, nan, config.step, n_paths)
    # finite but huge states may square to inf; that is the honest moment
    with np.errstate(over="ignore", invalid="ignore"):
        sq = (values[:, done, :] ** 2).sum(-1)
        mean_sq = sq.mean(axis=1)
        stderr = sq.std(axis=1, ddof=1) / math.sqrt(count) if count > 1 else np.zeros(len(idx))
    return EnsembleMoments(idx * config.step, mean_sq, count, stderr, config.step, n_paths - count)


# -- CSV export ------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(traj: Trajectory, fh) -> None:
    """Columns ``t, y_1..y_d``; floats use shortest round-trip formatting."""
    w = csv.writer(fh, lineterminator="\n")
    d = traj.values.shape[1]
    w.writerow(["t"] + [f"y_{i + 1}" for i in range(d)])
    for t, row in zip(traj.times, traj.values):
        w.writerow([_fmt(t)] + [_fmt(v) for v in row])


def write_moments_csv(moments: EnsembleMoments, fh) -> None:
    """Columns ``t, mean_sq, stderr, n``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "mean_sq", "stderr", "n"])
    for t, m, s in zip(moments.times, moments.mean_sq, moments.stderr):
        w.writerow([_fmt(t), _fmt(m), _fmt(s), moments.count])
