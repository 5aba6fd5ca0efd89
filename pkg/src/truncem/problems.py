"""Built-in test problems.

All coefficient functions are module-level (or frozen dataclasses) so that
problems pickle cleanly into worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DelayFunction,
    InitialPath,
    KhasminskiiConstants,
    SddeProblem,
    SplitSddeProblem,
    StabilityParams,
    TruncationPolicy,
    power_policy,
)

__all__ = [
    "SineDelay",
    "ConstantDelay",
    "example1",
    "example1_policy",
    "EXAMPLE1_KHASMINSKII",
    "example2",
    "example2_policy",
    "example2_stability",
    "zero_problem",
    "linear_problem",
    "BUILTINS",
]


@dataclass(frozen=True)
class SineDelay:
    """``delta(t) = amp - amp sin(t)``; ranges over ``[0, 2 amp]`` with slope ``<= amp``."""

    amp: float

    def __call__(self, t):
        return self.amp - self.amp * np.sin(t)


@dataclass(frozen=True)
class ConstantDelay:
    value: float

    def __call__(self, t):
        return np.full(np.shape(t), self.value, dtype=float)


# -- Example 1: dX = (-9 X^3 + |X(t-delta)|^{3/2}) dt + X^2 dB --------------


def _ex1_drift(x, y):
    return -9.0 * x**3 + np.abs(y) ** 1.5


def _ex1_diffusion(x, y):
    return (x**2)[..., None]


def example1(xi: float = 2.0) -> SddeProblem:
    """Highly nonlinear scalar SDDE with delay ``0.5 - 0.5 sin t`` (``tau = 1``)."""
    delay = DelayFunction(SineDelay(0.5), tau=1.0, delta_hat=0.5)
    return SddeProblem(1, 1, _ex1_drift, _ex1_diffusion, delay, InitialPath.constant(xi), name="example1")


def example1_policy() -> TruncationPolicy:
    """``mu(R) = 10 R^2``, ``phi(Delta) = 10 Delta^{-1/4}``."""
    return power_policy(10.0, 2.0, 10.0, -0.25, h_hat=10.0)


# 2x|y|^{3/2} <= x^4/2 + 3y^2/2 (Young, exponents 4 and 4/3), so
# 2x f + g^2 <= -16.5 x^4 + 1.5 y^2.
EXAMPLE1_KHASMINSKII = KhasminskiiConstants(k1=1.5, k2=16.5, k3=0.0, beta=4.0)


# -- Example 2: delay power logistic model ----------------------------------


@dataclass(frozen=True)
class _Logistic:
    a: float
    b: float
    c: float

    def drift(self, x, y):
        return x * (self.a + self.b * y - x**2)

    def diffusion(self, x, y):
        return (self.c * x * y)[..., None]

    def drift_linear(self, x, y):
        return self.a * x

    def drift_super(self, x, y):
        return self.b * x * y - x**3

    def diff_linear(self, x, y):
        return np.zeros(np.shape(x) + (1,))

    def diff_super(self, x, y):
        return (self.c * x * y)[..., None]


def example2(a: float = -3.0, b: float = 1.0, c: float = 0.5, xi: float = 1.0) -> SplitSddeProblem:
    """Stochastic delay power logistic model, split into ``a x`` plus the
    super-linear remainder; delay ``0.05 - 0.05 sin t`` (``tau = 0.1``)."""
    coeffs = _Logistic(a, b, c)
    delay = DelayFunction(SineDelay(0.05), tau=0.1, delta_hat=0.05)
    base = SddeProblem(
        1, 1, coeffs.drift, coeffs.diffusion, delay,
        InitialPath.constant(xi, holder_K4=2.0, holder_rho=0.5), name="example2",
    )
    return SplitSddeProblem(
        base, coeffs.drift_linear, coeffs.drift_super, coeffs.diff_linear, coeffs.diff_super,
        lbar=5.0, lbar1=0.0,
    )


def example2_policy(b: float = 1.0, c: float = 0.5) -> TruncationPolicy:
    k = max(abs(b) + 1.0, abs(c))
    return power_policy(k, 2.0, k, -0.25, h_hat=k)


def example2_stability(a: float = -3.0, b: float = 1.0, c: float = 0.5) -> StabilityParams:
    return StabilityParams(
        lambda1=-2.0 * a, lambda2=0.0, alpha1=0.0, alpha2=2.0 * b * b,
        alpha3=1.0, alpha4=0.5 * c**4, beta=4.0, lbar=5.0, lbar1=0.0,
    )


# -- diagnostic problems ----------------------------------------------------


def _zero_drift(x, y):
    return np.zeros_like(x)


def _zero_diffusion(x, y):
    return np.zeros(np.shape(x) + (1,))


def zero_problem(xi: float = 1.0, tau: float = 1.0) -> SddeProblem:
    """``f = g = 0``: every path stays at ``xi``."""
    return SddeProblem(1, 1, _zero_drift, _zero_diffusion, DelayFunction(ConstantDelay(tau), tau, 0.0),
                       InitialPath.constant(xi), name="zero")


def _decay(x, y):
    return -x


def linear_problem(xi: float = 1.0, tau: float = 0.01) -> SddeProblem:
    """Deterministic ``dX = -X dt``; the Euler iterate is ``(1 - Delta)^k xi``."""
    return SddeProblem(1, 1, _decay, _zero_diffusion, DelayFunction(ConstantDelay(tau), tau, 0.0),
                       InitialPath.constant(xi), name="linear")


def linear_policy() -> TruncationPolicy:
    return power_policy(1.0, 1.0, 1e6, -0.25)


BUILTINS = {
    "example1": (example1, example1_policy, "full"),
    "example2": (example2, example2_policy, "partial"),
    "zero": (zero_problem, linear_policy, "full"),
    "linear": (linear_problem, linear_policy, "full"),
}
