"""Problem definitions and truncation machinery for delay SDEs.

Coefficient functions are evaluated on batched arrays: a state argument has
shape ``(..., d)``, the drift returns ``(..., d)`` and the diffusion returns
``(..., d, m)``.  Every helper in this module accepts a single point as well
as a stack of points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TruncEMError",
    "ConfigurationError",
    "DomainError",
    "PolicyError",
    "InfeasibleParametersError",
    "DelayFunction",
    "InitialPath",
    "SddeProblem",
    "SplitSddeProblem",
    "PowerLaw",
    "TruncationPolicy",
    "power_policy",
    "KhasminskiiConstants",
    "StabilityParams",
    "Violation",
    "truncate_point",
    "truncation_radius",
    "truncated_drift",
    "truncated_diffusion",
    "partially_truncated_drift",
    "partially_truncated_diffusion",
    "evaluate_coefficients",
    "steps_per",
    "delay_index",
    "delay_indices",
    "kappa_bar",
    "epsilon_delta",
    "check_khasminskii_preservation",
    "check_multiplicity_bound",
    "check_delay",
    "check_initial_path",
    "check_policy",
    "check_split",
]


class TruncEMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TruncEMError, ValueError):
    """Step sizes, horizons or problem/mode combinations do not fit together."""


class DomainError(TruncEMError, ValueError):
    """An argument lies outside the domain of the operation."""


class PolicyError(TruncEMError, ValueError):
    """The truncation policy is inconsistent at the requested step size."""


class InfeasibleParametersError(TruncEMError, ValueError):
    """Stability constants violate the margin needed for a positive rate."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DelayFunction:
    """Time-varying delay ``delta(t)`` with ``0 <= delta <= tau`` and
    ``|delta'| <= delta_hat``.

    ``delta`` should accept a numpy array of times; scalar-only callables
    are tolerated and evaluated point by point.
    """

    delta: Callable
    tau: float
    delta_hat: float

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.delta_hat < 1.0:
            raise DomainError(f"delta_hat must lie in [0, 1), got {self.delta_hat}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.asarray(self.delta(t), dtype=float)
        if out.shape != t.shape:
            out = np.array([float(self.delta(s)) for s in t.ravel()]).reshape(t.shape)
        return out


@dataclass(frozen=True)
class InitialPath:
    """Initial segment ``xi`` on ``[-tau, 0]`` with its Hoelder constants."""

    xi: Callable
    holder_K4: float = 0.0
    holder_rho: float = 1.0

    def __post_init__(self):
        if self.holder_K4 < 0:
            raise DomainError("holder_K4 must be nonnegative")
        if not 0.0 < self.holder_rho <= 1.0:
            raise DomainError("holder_rho must lie in (0, 1]")

    def __call__(self, t) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.xi(float(t)), dtype=float))

    @classmethod
    def constant(cls, value, holder_K4: float = 0.0, holder_rho: float = 1.0):
        return cls(_Constant(np.atleast_1d(np.asarray(value, dtype=float))), holder_K4, holder_rho)


@dataclass(frozen=True)
class _Constant:
    value: np.ndarray

    def __call__(self, t):
        return self.value.copy()


@dataclass(frozen=True)
class SddeProblem:
    """``dX = f(X(t), X(t - delta(t))) dt + g(X(t), X(t - delta(t))) dB(t)``."""

    dim_x: int
    dim_w: int
    drift: Callable
    diffusion: Callable
    delay: DelayFunction
    initial: InitialPath
    name: str = "custom"

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_w < 1:
            raise DomainError("dimensions must be positive integers")

    @property
    def tau(self) -> float:
        return self.delay.tau


@dataclass(frozen=True)
class SplitSddeProblem:
    """A problem whose coefficients decompose as ``f = F1 + F`` and
    ``g = G1 + G``; ``F1``/``G1`` are the globally Lipschitz parts that are
    never truncated, ``F``/``G`` the super-linear parts."""

    base: SddeProblem
    drift_linear: Callable
    drift_super: Callable
    diff_linear: Callable
    diff_super: Callable
    lbar: float = 0.0
    lbar1: float = 0.0

    @property
    def dim_x(self) -> int:
        return self.base.dim_x

    @property
    def dim_w(self) -> int:
        return self.base.dim_w

    @property
    def delay(self) -> DelayFunction:
        return self.base.delay

    @property
    def initial(self) -> InitialPath:
        return self.base.initial

    @property
    def drift(self):
        return self.base.drift

    @property
    def diffusion(self):
        return self.base.diffusion

    @property
    def tau(self) -> float:
        return self.base.delay.tau

    @property
    def name(self) -> str:
        return self.base.name


@dataclass(frozen=True)
class PowerLaw:
    """``v = coeff * r**power``; picklable and analytically invertible."""

    coeff: float
    power: float

    def __call__(self, r):
        return self.coeff * np.power(r, self.power)

    def inverse(self, v):
        return np.power(np.asarray(v, dtype=float) / self.coeff, 1.0 / self.power)


@dataclass(frozen=True)
class _Inverse:
    law: PowerLaw

    def __call__(self, v):
        return self.law.inverse(v)


@dataclass(frozen=True)
class TruncationPolicy:
    """The pair ``(mu, phi)`` with bound ``h_hat``.

    ``mu`` is strictly increasing and dominates the growth of the
    coefficients on balls of radius ``r >= 1``; ``phi`` is strictly
    decreasing on ``(0, 1]`` with ``Delta**0.25 * phi(Delta) <= h_hat``.
    """

    mu: Callable
    mu_inv: Callable
    phi: Callable
    h_hat: float

    def __post_init__(self):
        floor = max(1.0, float(self.mu(1.0)))
        if self.h_hat < floor * (1 - 1e-12):
            raise PolicyError(f"h_hat={self.h_hat} must be >= max(1, mu(1)) = {floor}")


def power_policy(mu_coeff, mu_power, phi_coeff, phi_power=-0.25, h_hat=None) -> TruncationPolicy:
    """Build the policy ``mu(r) = mu_coeff r**mu_power``,
    ``phi(D) = phi_coeff D**phi_power``.

    ``h_hat`` defaults to the smallest admissible value,
    ``max(1, mu(1), phi_coeff)`` (``D**0.25 phi(D)`` peaks at ``D = 1``
    whenever ``phi_power >= -1/4``).
    """
    if mu_coeff <= 0 or mu_power <= 0:
        raise PolicyError("mu must be strictly increasing: need mu_coeff > 0 and mu_power > 0")
    if phi_coeff <= 0 or phi_power >= 0:
        raise PolicyError("phi must be strictly decreasing: need phi_coeff > 0 and phi_power < 0")
    if phi_power < -0.25:
        raise PolicyError("phi_power < -1/4 violates Delta**(1/4) phi(Delta) <= h_hat near 0")
    mu = PowerLaw(float(mu_coeff), float(mu_power))
    if h_hat is None:
        h_hat = max(1.0, float(mu_coeff), float(phi_coeff))
    return TruncationPolicy(mu, _Inverse(mu), PowerLaw(float(phi_coeff), float(phi_power)), float(h_hat))


@dataclass(frozen=True)
class KhasminskiiConstants:
    """Constants of ``2<x,f> + |g|^2 <= K1(1+|x|^2+|y|^2) - K2|x|^b + K3|y|^b``."""

    k1: float
    k2: float
    k3: float
    beta: float

    def __post_init__(self):
        if not self.k1 > 0:
            raise DomainError("k1 must be positive")
        if self.k2 < 0 or self.k3 < 0:
            raise DomainError("k2 and k3 must be nonnegative")
        if not self.beta > 2:
            raise DomainError("beta must exceed 2")

    def k1_hat(self, policy: TruncationPolicy) -> float:
        """Constant of the preserved condition for the truncated coefficients."""
        r1 = float(policy.mu_inv(policy.phi(1.0)))
        return 2.0 * self.k1 * max(1.0, 1.0 / r1)


@dataclass(frozen=True)
class StabilityParams:
    """Constants of the two-part dissipativity condition used for stability.

    ``theta`` is carried for completeness; no computed rate depends on it.
    """

    lambda1: float
    lambda2: float
    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float
    beta: float
    theta: float = math.inf
    lbar: float = 0.0
    lbar1: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha1", "alpha2", "alpha3", "alpha4", "theta", "lbar", "lbar1"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")
        if not self.beta > 2:
            raise DomainError("beta must exceed 2")

    def margin(self, kappa: int) -> float:
        """``lambda1 - alpha1 - lambda2/4 - kappa (lambda2 + alpha2)``."""
        return self.lambda1 - self.alpha1 - 0.25 * self.lambda2 - kappa * (self.lambda2 + self.alpha2)

    def check(self, kappa: int) -> None:
        if not self.margin(kappa) > 0:
            raise InfeasibleParametersError(
                "need lambda1 > alpha1 + lambda2/4 + kappa*(lambda2 + alpha2); "
                f"margin is {self.margin(kappa):.6g} with kappa={kappa}"
            )
        if not self.alpha3 > kappa * self.alpha4:
            raise InfeasibleParametersError(
                f"need alpha3 > kappa*alpha4; got alpha3={self.alpha3}, kappa*alpha4={kappa * self.alpha4}"
            )


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------


def _norm(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 1:
        return np.abs(x[..., 0])
    return np.linalg.norm(x, axis=-1)


def _project(x: np.ndarray, radius: float) -> np.ndarray:
    """Radial projection without input validation (hot path)."""
    norm = _norm(x)
    outside = norm > radius
    if not outside.any():
        return x
    out = x.copy()
    if x.ndim == 1:
        out = (x / norm) * radius
        while _norm(out) > radius:
            out = np.nextafter(out, 0.0)
        return out
    out[outside] = (x[outside] / norm[outside, None]) * radius
    if x.shape[-1] > 1:
        # rounding may leave |out| a few ulps above radius; shrink until it is not
        over = _norm(out) > radius
        while over.any():
            out[over] = np.nextafter(out[over], 0.0)
            over = _norm(out) > radius
    return out


def truncate_point(x, radius: float) -> np.ndarray:
    """Project ``x`` onto the closed ball of the given radius.

    Points inside the ball are returned unchanged and the origin maps to
    itself.  The result never has a computed norm above ``radius``, which
    makes the projection exactly idempotent.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if not radius > 0 or not math.isfinite(radius):
        raise DomainError(f"radius must be positive and finite, got {radius}")
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot truncate a non-finite point")
    return _project(x, float(radius))


def truncation_radius(policy: TruncationPolicy, step: float) -> float:
    """Radius ``mu^{-1}(phi(step))`` of the truncation ball."""
    if not 0 < step <= 1:
        raise DomainError(f"step must lie in (0, 1], got {step}")
    level = float(policy.phi(step))
    mu1 = float(policy.mu(1.0))
    if level < mu1 * (1 - 1e-12):
        raise PolicyError(f"phi({step}) = {level} is below mu(1) = {mu1}")
    return float(policy.mu_inv(level))


def _as_state(x, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if d is not None and x.shape[-1] != d:
        raise DomainError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


def truncated_drift(problem, policy, step, x, y) -> np.ndarray:
    """``f(pi(x), pi(y))`` with both arguments projected onto the ball."""
    r = truncation_radius(policy, step)
    return np.asarray(problem.drift(truncate_point(x, r), truncate_point(y, r)), dtype=float)


def truncated_diffusion(problem, policy, step, x, y) -> np.ndarray:
    """``g(pi(x), pi(y))``."""
    r = truncation_radius(policy, step)
    return np.asarray(problem.diffusion(truncate_point(x, r), truncate_point(y, r)), dtype=float)


def partially_truncated_drift(split: SplitSddeProblem, policy, step, x, y) -> np.ndarray:
    """``F1(x, y) + F(pi(x), pi(y))``: only the super-linear part is truncated."""
    r = truncation_radius(policy, step)
    x, y = _as_state(x), _as_state(y)
    return split.drift_linear(x, y) + split.drift_super(truncate_point(x, r), truncate_point(y, r))


def partially_truncated_diffusion(split: SplitSddeProblem, policy, step, x, y) -> np.ndarray:
    """``G1(x, y) + G(pi(x), pi(y))``."""
    r = truncation_radius(policy, step)
    x, y = _as_state(x), _as_state(y)
    return split.diff_linear(x, y) + split.diff_super(truncate_point(x, r), truncate_point(y, r))


def evaluate_coefficients(problem, radius: float, x: np.ndarray, y: np.ndarray, mode: str = "full"):
    """Return the truncated ``(drift, diffusion)`` at finite states ``x, y``.

    ``mode="full"`` truncates both arguments of ``f`` and ``g``;
    ``mode="partial"`` truncates only ``F`` and ``G`` of a split problem.
    """
    px = _project(x, radius)
    py = _project(y, radius)
    if mode == "full":
        return problem.drift(px, py), problem.diffusion(px, py)
    if mode == "partial":
        if not isinstance(problem, SplitSddeProblem):
            raise ConfigurationError("partial truncation requires a SplitSddeProblem")
        fx = problem.drift_linear(x, y) + problem.drift_super(px, py)
        gx = problem.diff_linear(x, y) + problem.diff_super(px, py)
        return fx, gx
    raise ConfigurationError(f"unknown truncation mode {mode!r}; expected 'full' or 'partial'")


# ---------------------------------------------------------------------------
# grids and delays
# ---------------------------------------------------------------------------


def steps_per(length: float, step: float, what: str = "length") -> int:
    """Integer ``n`` with ``length = n * step``, else ``ConfigurationError``."""
    if not step > 0:
        raise ConfigurationError(f"step must be positive, got {step}")
    ratio = length / step
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ConfigurationError(f"step {step} is not a fraction of the {what} {length} (ratio {ratio})")
    return int(n)


def delay_indices(delay: DelayFunction, step: float, k) -> np.ndarray:
    """Vectorised ``floor(delta(k step) / step)`` clipped to ``[0, M]``."""
    m = steps_per(delay.tau, step, "delay bound tau")
    k = np.asarray(k)
    raw = np.floor(delay(k * step) / step)
    return np.clip(raw, 0, m).astype(np.int64)


def delay_index(delay: DelayFunction, step: float, k: int) -> int:
    """Grid lag ``delta_k = floor(delta(k step) / step)`` at step ``k``."""
    if k < 0:
        raise DomainError("k must be nonnegative")
    return int(delay_indices(delay, step, np.array([k]))[0])


def kappa_bar(delta_hat: float) -> int:
    """Upper bound ``floor(1/(1 - delta_hat)) + 1`` on how many grid steps
    can share one delayed index."""
    if not 0.0 <= delta_hat < 1.0:
        raise DomainError(f"delta_hat must lie in [0, 1), got {delta_hat}")
    return math.floor(1.0 / (1.0 - delta_hat)) + 1


def epsilon_delta(params: StabilityParams, policy: TruncationPolicy, step: float) -> float:
    """``(4 lbar + 2 lbar1) step + 8 phi(step)^2 step``."""
    if not 0 < step <= 1:
        raise DomainError(f"step must lie in (0, 1], got {step}")
    phi = float(policy.phi(step))
    return (4.0 * params.lbar + 2.0 * params.lbar1) * step + 8.0 * phi * phi * step


# ---------------------------------------------------------------------------
# sampled assumption checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One sample at which a checked inequality fails."""

    where: tuple
    lhs: float
    rhs: float
    detail: str = ""


def _pairs(problem, samples) -> tuple[np.ndarray, np.ndarray]:
    d = problem.dim_x
    xs = np.array([_as_state(x, d) for x, _ in samples], dtype=float).reshape(-1, d)
    ys = np.array([_as_state(y, d) for _, y in samples], dtype=float).reshape(-1, d)
    return xs, ys


def check_khasminskii_preservation(problem, policy, step, constants: KhasminskiiConstants, samples) -> list[Violation]:
    """Test the preserved Khasminskii inequality for the truncated
    coefficients at every ``(x, y)`` in ``samples``.

    Violations are reported when ``LHS > RHS + 1e-9 (1 + |RHS|)``.
    """
    xs, ys = _pairs(problem, samples)
    if len(xs) == 0:
        return []
    r = truncation_radius(policy, step)
    px, py = _project(xs, r), _project(ys, r)
    fx = np.asarray(problem.drift(px, py), dtype=float)
    gx = np.asarray(problem.diffusion(px, py), dtype=float)
    lhs = 2.0 * np.einsum("ni,ni->n", xs, fx) + np.einsum("nij,nij->n", gx, gx)
    k1h = constants.k1_hat(policy)
    rhs = (
        k1h * (1.0 + np.einsum("ni,ni->n", xs, xs) + np.einsum("ni,ni->n", ys, ys))
        - constants.k2 * _norm(px) ** constants.beta
        + constants.k3 * _norm(py) ** constants.beta
    )
    bad = np.nonzero(lhs > rhs + 1e-9 * (1.0 + np.abs(rhs)))[0]
    return [
        Violation((tuple(xs[i]), tuple(ys[i])), float(lhs[i]), float(rhs[i]), "khasminskii")
        for i in bad
    ]


def check_multiplicity_bound(delay: DelayFunction, step: float, k_max: int) -> tuple[int, int]:
    """Largest number of indices ``k <= k_max`` sharing one value of
    ``k - delta_k``, together with the bound ``kappa_bar(delta_hat)``."""
    k = np.arange(k_max + 1)
    u = k - delay_indices(delay, step, k)
    _, counts = np.unique(u, return_counts=True)
    return int(counts.max()), kappa_bar(delay.delta_hat)


def check_delay(delay: DelayFunction, t_max: float = 100.0, n: int = 10_000, h: float = 1e-6, tol: float = 1e-4) -> list[Violation]:
    """Sampled check of ``0 <= delta <= tau`` and ``|delta(t+h)-delta(t)| <= delta_hat h``.

    The derivative bound is tested by forward differences at ``n`` points of
    ``[0, t_max]``; ``tol`` is relative to ``h``.
    """
    t = np.linspace(0.0, t_max, n)
    d0 = delay(t)
    out = []
    for i in np.nonzero((d0 < 0) | (d0 > delay.tau * (1 + 1e-12)))[0]:
        out.append(Violation((float(t[i]),), float(d0[i]), delay.tau, "range"))
    slope = np.abs(delay(t + h) - d0) / h
    for i in np.nonzero(slope > delay.delta_hat + tol)[0]:
        out.append(Violation((float(t[i]),), float(slope[i]), delay.delta_hat, "derivative"))
    return out


def check_initial_path(initial: InitialPath, tau: float, n: int = 200, tol: float = 1e-9) -> list[Violation]:
    """Hoelder check ``|xi(t)-xi(s)| <= K4 |t-s|^rho`` on all pairs of an
    ``n``-point grid of ``[-tau, 0]``."""
    t = np.linspace(-tau, 0.0, n)
    vals = np.array([initial(s) for s in t])
    diff = np.sqrt(((vals[:, None, :] - vals[None, :, :]) ** 2).sum(-1))
    bound = initial.holder_K4 * np.abs(t[:, None] - t[None, :]) ** initial.holder_rho
    i, j = np.nonzero(np.triu(diff > bound + tol, 1))
    return [Violation((float(t[a]), float(t[b])), float(diff[a, b]), float(bound[a, b]), "holder") for a, b in zip(i, j)]


def check_policy(policy: TruncationPolicy, n: int = 1000, tol: float = 1e-9) -> list[Violation]:
    """Sampled checks on ``(mu, phi, h_hat)``: the quarter-power bound,
    monotonicity of ``phi``, ``phi >= mu(1)`` and ``mu(mu^{-1}(v)) = v``."""
    steps = np.logspace(-12, 0, n)
    phi = np.asarray(policy.phi(steps), dtype=float)
    out = []
    q = steps**0.25 * phi
    for i in np.nonzero(q > policy.h_hat * (1 + tol))[0]:
        out.append(Violation((float(steps[i]),), float(q[i]), policy.h_hat, "quarter-power"))
    # steps ascending, so phi must not increase
    for i in np.nonzero(np.diff(phi) > tol * np.abs(phi[:-1]))[0]:
        out.append(Violation((float(steps[i]), float(steps[i + 1])), float(phi[i + 1]), float(phi[i]), "phi-monotone"))
    mu1 = float(policy.mu(1.0))
    for i in np.nonzero(phi < mu1 * (1 - tol))[0]:
        out.append(Violation((float(steps[i]),), float(phi[i]), mu1, "phi-range"))
    v = mu1 * np.logspace(0, 8, 50)
    back = np.asarray(policy.mu(policy.mu_inv(v)), dtype=float)
    for i in np.nonzero(np.abs(back - v) > 1e-9 * v)[0]:
        out.append(Violation((float(v[i]),), float(back[i]), float(v[i]), "mu-inverse"))
    return out


def check_split(split: SplitSddeProblem, samples, rtol: float = 1e-12) -> list[Violation]:
    """Check ``F1 + F = f``, ``G1 + G = g`` on samples and that all four
    parts vanish at the origin."""
    xs, ys = _pairs(split.base, samples)
    out = []
    f = np.asarray(split.base.drift(xs, ys))
    g = np.asarray(split.base.diffusion(xs, ys))
    fs = split.drift_linear(xs, ys) + split.drift_super(xs, ys)
    gs = split.diff_linear(xs, ys) + split.diff_super(xs, ys)
    ef = np.abs(fs - f).reshape(len(xs), -1).max(-1)
    eg = np.abs(gs - g).reshape(len(xs), -1).max(-1)
    sf = rtol * (1 + np.abs(f).reshape(len(xs), -1).max(-1))
    sg = rtol * (1 + np.abs(g).reshape(len(xs), -1).max(-1))
    for i in np.nonzero((ef > sf) | (eg > sg))[0]:
        out.append(Violation((tuple(xs[i]), tuple(ys[i])), float(max(ef[i], eg[i])), float(sf[i]), "split-sum"))
    zero = np.zeros((1, split.dim_x))
    for part in (split.drift_linear, split.drift_super, split.diff_linear, split.diff_super):
        v = np.abs(np.asarray(part(zero, zero))).max()
        if v != 0:
            out.append(Violation(((0.0,), (0.0,)), float(v), 0.0, "origin"))
    return out
