"""Extended Kalman filtering and the safe-set shrinkage it induces.

The filter propagates the covariance through the Riccati flow

    dP/dt = A P + P A^T + Q - P c^T R^{-1} c P

with gain K = P c^T R^{-1}, and drives the estimate with the measurement
innovation.  For a detectable LTI plant the estimation error stays inside a
ball of radius gamma = sqrt(n * lambda_star / eps) with probability at
least 1 - eps, where lambda_star bounds the largest eigenvalue of P over
the run.  Safety under estimation then reduces to enforcing the shrunk
function hhat = h - hbar_gamma on the estimate, hbar_gamma being the
worst-case increase of h over a gamma-ball centered on its zero level set.

Uniform detectability of the plant/output pair is an assumption the caller
owns; it is not checked algorithmically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from .sde import Array, ControlAffineSystem
from .barriers import SafetyFunction, fd_gradient


class EstimatorConfigError(ValueError):
    """Bad filter configuration (singular R, eps out of range, ...)."""


class UnsupportedSafetyError(ValueError):
    """No closed-form shrink for this safety function kind."""


@dataclass(frozen=True)
class ObservationModel:
    """Linear output dy = c x dt + nu dW with constant measurement diffusion."""

    c: Array
    nu: Array

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        nu = np.atleast_2d(np.asarray(self.nu, dtype=float))
        if nu.shape[0] != c.shape[0]:
            raise EstimatorConfigError("nu must have one row per output")
        R = nu @ nu.T
        # R = nu nu^T must be positive definite for the gain to exist.
        if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
            raise EstimatorConfigError("measurement covariance nu nu^T is not positive definite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "nu", nu)

    @property
    def p(self) -> int:
        return self.c.shape[0]

    @property
    def R(self) -> Array:
        return self.nu @ self.nu.T


@dataclass(frozen=True)
class EkfState:
    """Estimate, covariance and current gain; P is kept symmetric PSD."""

    xhat: Array
    P: Array
    K: Array

    @classmethod
    def initial(cls, x0: Array, obs: ObservationModel, p0: float = 1e-12) -> "EkfState":
        """Exactly known initial state, represented as P0 = p0*I for safety."""
        x0 = np.asarray(x0, dtype=float).ravel()
        n = x0.size
        P = p0 * np.eye(n)
        K = P @ obs.c.T @ np.linalg.inv(obs.R)
        return cls(xhat=x0.copy(), P=P, K=K)


def riccati_step(A: Array, c: Array, Q: Array, R: Array, P: Array, dt: float) -> Array:
    """Euler step of the covariance flow, symmetrized afterwards."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    try:
        Rinv = np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise EstimatorConfigError("measurement covariance R is singular") from exc
    Pc = P @ c.T
    P_new = P + dt * (A @ P + P @ A.T + Q - Pc @ Rinv @ Pc.T)
    return 0.5 * (P_new + P_new.T)


def ekf_step(ekf: EkfState, sys: ControlAffineSystem, obs: ObservationModel,
             u: Array, dy: Array, dt: float,
             jac: Optional[Callable[[Array, Array], Array]] = None) -> EkfState:
    """Advance estimate and covariance by one measurement increment dy.

    The drift Jacobian A = d(f + g u)/dx at the current estimate comes from
    ``jac`` when supplied, otherwise from central finite differences.  The
    gain is K = P c^T R^{-1}; the printed form without the transpose is
    dimensionally inconsistent for p != n.
    """
    xhat, P = ekf.xhat, ekf.P
    c, R = obs.c, obs.R
    u = np.asarray(u, dtype=float).ravel()
    dy = np.asarray(dy, dtype=float).ravel()

    if jac is not None:
        A = np.atleast_2d(np.asarray(jac(xhat, u), dtype=float))
    else:
        A = _drift_jacobian(sys, xhat, u)
    Q = sys.sigma(xhat) @ sys.sigma(xhat).T

    K = P @ c.T @ np.linalg.inv(R)
    drift = sys.f(xhat) + sys.g(xhat) @ u
    xhat_new = xhat + drift * dt + K @ (dy - c @ xhat * dt)
    P_new = riccati_step(A, c, Q, R, P, dt)
    K_new = P_new @ c.T @ np.linalg.inv(R)
    return EkfState(xhat=xhat_new, P=P_new, K=K_new)


def _drift_jacobian(sys: ControlAffineSystem, x: Array, u: Array) -> Array:
    """Central-difference Jacobian of x -> f(x) + g(x) u."""
    n = x.size
    h = np.cbrt(np.finfo(float).eps) * max(1.0, float(np.linalg.norm(x)))
    A = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        fp = sys.f(x + e) + sys.g(x + e) @ u
        fm = sys.f(x - e) + sys.g(x - e) @ u
        A[:, i] = (fp - fm) / (2 * h)
    return A


def gamma_lti(lambda_star: float, n: int, eps: float) -> float:
    """High-probability error radius sqrt(n * lambda_star / eps)."""
    if not 0 < eps < 1:
        raise EstimatorConfigError("eps must lie in (0, 1)")
    if lambda_star < 0:
        raise EstimatorConfigError("lambda_star must be nonnegative")
    return math.sqrt(n * lambda_star / eps)


def calibrate_lambda_star(A: Array, c: Array, Q: Array, R: Array, dt: float,
                          horizon: float, p0: float = 1e-12) -> float:
    """Running max of lambda_max(P_t) over a deterministic calibration run.

    The Riccati flow is autonomous for LTI plants, so the calibration is
    shared by every replicate.  ``horizon`` should cover a few filter time
    constants; the running max then freezes the sup over all t.
    """
    n = np.atleast_2d(A).shape[0]
    P = p0 * np.eye(n)
    steps = int(np.ceil(horizon / dt))
    lam = float(np.max(np.linalg.eigvalsh(P)))
    for _ in range(steps):
        P = riccati_step(A, c, Q, R, P, dt)
        lam = max(lam, float(np.max(np.linalg.eigvalsh(P))))
    return lam


@dataclass(frozen=True)
class AffineKind:
    """Shrink recipe for h(x) = a.x - b."""

    a: Array
    b: float


@dataclass(frozen=True)
class PairwiseDistanceKind:
    """Shrink recipe for h = |p_i - p_j| - D_s on a stacked multi-agent state.

    ``extractor_norm`` is the spectral norm of the matrix pulling the
    relative position out of the full state; sqrt(2) for two independently
    estimated positions.
    """

    d_s: float
    extractor_norm: float = math.sqrt(2.0)


@dataclass(frozen=True)
class ShrunkSafety:
    """hhat = h - hbar_gamma; safe for the true state whenever the estimate
    satisfies hhat >= 0 and the estimation error stays within gamma."""

    h: SafetyFunction
    gamma: float
    hbar_gamma: float
    hhat: SafetyFunction


def shrink(h: SafetyFunction, kind: Union[AffineKind, PairwiseDistanceKind, None],
           gamma: float, hbar_gamma: Optional[float] = None) -> ShrunkSafety:
    """Build the shrunk safety function for a known h kind.

    Closed forms: affine gives gamma*|a|; pairwise distance gives
    gamma * extractor_norm.  Any other kind must supply hbar_gamma
    explicitly, else the call is rejected.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if hbar_gamma is None:
        if isinstance(kind, AffineKind):
            hbar_gamma = gamma * float(np.linalg.norm(np.asarray(kind.a, dtype=float)))
        elif isinstance(kind, PairwiseDistanceKind):
            hbar_gamma = gamma * kind.extractor_norm
        else:
            raise UnsupportedSafetyError(
                "no closed-form shrink for this kind; pass hbar_gamma explicitly")
    if hbar_gamma < 0:
        raise ValueError("hbar_gamma must be nonnegative")
    shift = float(hbar_gamma)
    hhat = SafetyFunction(
        value=lambda x, _h=h.value, _s=shift: _h(x) - _s,
        grad=h.grad,
        hess=h.hess,
    )
    return ShrunkSafety(h=h, gamma=float(gamma), hbar_gamma=shift, hhat=hhat)
