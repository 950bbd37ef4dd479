"""Safety functions and the complete-information barrier constraint builders.

A safe set is the superlevel region ``{x : h(x) >= 0}``.  Each builder turns
a system, a safety (or barrier / Lyapunov) function and a state into one
half-space constraint on the input, using the Ito drift of the function:

    drift(h; x, u) = dh/dx (f + g u) + 1/2 tr(sigma^T d2h/dx2 sigma)

The zero-barrier row keeps that drift >= -kappa*h, the reciprocal-barrier
row keeps the drift of B = 1/h below a class-K margin, and the Lyapunov row
bounds the drift of V by zero (with the trace term carrying no 1/2 factor).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .sde import Array, ControlAffineSystem


class BoundaryError(ValueError):
    """Raised when a reciprocal barrier is evaluated at h(x) <= 0."""


def fd_gradient(value: Callable[[Array], float], x: Array, rel_step: Optional[float] = None) -> Array:
    """Central finite-difference gradient, returned as a (1, n) row."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = rel_step or np.cbrt(np.finfo(float).eps) * max(1.0, float(np.linalg.norm(x)))
    g = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        g[i] = (value(x + e) - value(x - e)) / (2 * h)
    return g.reshape(1, n)


def fd_hessian(value: Callable[[Array], float], x: Array, rel_step: Optional[float] = None) -> Array:
    """Central finite-difference Hessian (symmetrized).

    Second differences divide by the step squared, so the step is
    eps**(1/4) rather than the eps**(1/3) used for gradients.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    h = rel_step or np.finfo(float).eps ** 0.25 * max(1.0, float(np.linalg.norm(x)))
    H = np.empty((n, n))
    f0 = value(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (value(x + ei) - 2 * f0 + value(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            H[i, j] = H[j, i] = (
                value(x + ei + ej) - value(x + ei - ej)
                - value(x - ei + ej) + value(x - ei - ej)
            ) / (4 * h**2)
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class SafetyFunction:
    """h with value/gradient/Hessian evaluators; grad is a (1, n) row."""

    value: Callable[[Array], float]
    grad: Callable[[Array], Array]
    hess: Callable[[Array], Array]

    @classmethod
    def from_value(cls, value: Callable[[Array], float]) -> "SafetyFunction":
        """Wrap a bare evaluator with finite-difference derivatives."""
        return cls(
            value=value,
            grad=lambda x: fd_gradient(value, x),
            hess=lambda x: fd_hessian(value, x),
        )

    @classmethod
    def affine(cls, a: Array, b: float) -> "SafetyFunction":
        """h(x) = a.x - b; the half-space safe set."""
        a = np.asarray(a, dtype=float).ravel()
        n = a.size
        return cls(
            value=lambda x, _a=a, _b=b: float(_a @ x - _b),
            grad=lambda x, _a=a: _a.reshape(1, -1).copy(),
            hess=lambda x, _n=n: np.zeros((_n, _n)),
        )

    @classmethod
    def quadratic(cls, P: Array) -> "SafetyFunction":
        """V(x) = x.P x with symmetric P; used for Lyapunov evaluators."""
        P = np.asarray(P, dtype=float)
        Ps = 0.5 * (P + P.T)
        return cls(
            value=lambda x, _P=Ps: float(x @ _P @ x),
            grad=lambda x, _P=Ps: (2 * _P @ x).reshape(1, -1),
            hess=lambda x, _P=Ps: 2 * _P,
        )


class ClassKFamily(enum.Enum):
    LINEAR = "linear"
    POWER = "power"


@dataclass(frozen=True)
class ClassKFunction:
    """Strictly increasing function with alpha(0) = 0.

    Supported families: linear c*s (c > 0) and power c*s**k (c > 0, k >= 1).
    """

    family: ClassKFamily = ClassKFamily.LINEAR
    c: float = 1.0
    k: float = 1.0

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("class-K coefficient c must be positive")
        if self.family is ClassKFamily.POWER and self.k < 1:
            raise ValueError("power family requires exponent k >= 1")

    def __call__(self, s: float) -> float:
        if self.family is ClassKFamily.LINEAR:
            return self.c * s
        return self.c * np.sign(s) * abs(s) ** self.k

    @staticmethod
    def identity() -> "ClassKFunction":
        return ClassKFunction(ClassKFamily.LINEAR, 1.0)


IDENTITY_K = ClassKFunction.identity()


@dataclass(frozen=True)
class ReciprocalBarrier:
    """B = 1/h with derivatives derived from h's.

    With the shipped alpha1 = alpha2 = identity the sandwich
    1/alpha1(h) <= B <= 1/alpha2(h) holds with equality on the safe
    interior.
    """

    h: SafetyFunction
    alpha1: ClassKFunction = IDENTITY_K
    alpha2: ClassKFunction = IDENTITY_K

    def value(self, x: Array) -> float:
        hx = self.h.value(x)
        if hx <= 0:
            raise BoundaryError(f"reciprocal barrier undefined at h(x) = {hx:g} <= 0")
        return 1.0 / hx

    def grad(self, x: Array) -> Array:
        hx = self.h.value(x)
        if hx <= 0:
            raise BoundaryError(f"reciprocal barrier undefined at h(x) = {hx:g} <= 0")
        return -self.h.grad(x) / hx**2

    def hess(self, x: Array) -> Array:
        hx = self.h.value(x)
        if hx <= 0:
            raise BoundaryError(f"reciprocal barrier undefined at h(x) = {hx:g} <= 0")
        g = self.h.grad(x)
        return 2.0 / hx**3 * (g.T @ g) - self.h.hess(x) / hx**2


class Sense(enum.Enum):
    GE = ">="
    LE = "<="


@dataclass(frozen=True)
class AffineInputConstraint:
    """Half-space a.u >= b or a.u <= b in control space."""

    a: Array
    b: float
    sense: Sense

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        if not (np.all(np.isfinite(a)) and np.isfinite(self.b)):
            raise ValueError("constraint coefficients must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    def to_ge(self) -> tuple[Array, float]:
        """Return (a, b) of the equivalent a.u >= b row."""
        if self.sense is Sense.GE:
            return self.a, self.b
        return -self.a, -self.b

    def satisfied_by(self, u: Array, tol: float = 1e-9) -> bool:
        a, b = self.to_ge()
        return bool(a @ u >= b - tol)


def ito_drift(sys: ControlAffineSystem, h: SafetyFunction, x: Array, u: Array,
              trace_factor: float = 0.5) -> float:
    """dt-coefficient of dh(x_t) along the controlled diffusion."""
    grad = h.grad(x)
    sig = sys.sigma(x)
    tr = float(np.trace(sig.T @ h.hess(x) @ sig))
    return float(grad @ (sys.f(x) + sys.g(x) @ u)) + trace_factor * tr


def zcbf_constraint(sys: ControlAffineSystem, h: SafetyFunction, x: Array,
                    kappa: float = 1.0) -> AffineInputConstraint:
    """Zero-barrier row: drift of h must stay >= -kappa*h(x).

    kappa = 1 recovers the plain -h right-hand side; larger kappa is less
    conservative away from the boundary.
    """
    grad = h.grad(x)
    sig = sys.sigma(x)
    a = (grad @ sys.g(x)).ravel()
    tr = float(np.trace(sig.T @ h.hess(x) @ sig))
    b = -float(grad @ sys.f(x)) - 0.5 * tr - kappa * h.value(x)
    return AffineInputConstraint(a=a, b=b, sense=Sense.GE)


def rcbf_constraint(sys: ControlAffineSystem, B: ReciprocalBarrier, x: Array,
                    alpha3: ClassKFunction = IDENTITY_K) -> AffineInputConstraint:
    """Reciprocal-barrier row: drift of B must stay <= alpha3(h(x))."""
    hx = B.h.value(x)
    if hx <= 0:
        raise BoundaryError(f"reciprocal row requires h(x) > 0, got {hx:g}")
    grad = B.grad(x)
    sig = sys.sigma(x)
    a = (grad @ sys.g(x)).ravel()
    tr = float(np.trace(sig.T @ B.hess(x) @ sig))
    b = alpha3(hx) - float(grad @ sys.f(x)) - 0.5 * tr
    return AffineInputConstraint(a=a, b=b, sense=Sense.LE)


def clf_constraint(sys: ControlAffineSystem, V: SafetyFunction, x: Array) -> AffineInputConstraint:
    """Lyapunov row: drift of V must stay <= 0 (trace term without 1/2)."""
    grad = V.grad(x)
    sig = sys.sigma(x)
    a = (grad @ sys.g(x)).ravel()
    tr = float(np.trace(sig.T @ V.hess(x) @ sig))
    b = -float(grad @ sys.f(x)) - tr
    return AffineInputConstraint(a=a, b=b, sense=Sense.LE)
