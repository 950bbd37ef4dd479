"""Barrier chains for systems where the input does not reach h directly.

When dh/dx g(x) = 0 the plain zero-barrier row is vacuous.  The fix is the
lift

    h_{i+1}(x) = dh_i/dx f(x) + 1/2 tr(sigma^T d2h_i/dx2 sigma) + h_i(x)

iterated until the input appears.  For linear dynamics (f = Fx, g = G)
with an affine h(x) = a.x - b and constant sigma, every level stays affine:
c_{i+1} = (F^T + I) c_i with unchanged offset, and the input first appears
at the relative degree r' = min{l : a^T F^l G != 0}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde import Array, ControlAffineSystem, LinearSystem
from .barriers import (
    AffineInputConstraint,
    SafetyFunction,
    Sense,
    fd_gradient,
    fd_hessian,
)


class NoRelativeDegreeError(ValueError):
    """a^T F^l G vanished for every l up to n-1."""


def relative_degree(F: Array, G: Array, a: Array, tol_scale: float = 1e-9) -> int:
    """Smallest l with a^T F^l G != 0, searched over l = 0..n-1.

    The zero test uses a relative threshold tol_scale*|a|*|F|^l*|G| since
    floating point never produces exact zeros for generic data.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    a = np.asarray(a, dtype=float).ravel()
    n = F.shape[0]
    norm_F = max(np.linalg.norm(F, 2), 1.0)
    norm_aG = max(np.linalg.norm(a) * np.linalg.norm(G, 2), np.finfo(float).tiny)
    row = a.copy()
    for l in range(n):
        if np.max(np.abs(row @ G)) > tol_scale * norm_aG * norm_F**l:
            return l
        row = row @ F
    raise NoRelativeDegreeError("a^T F^l G = 0 for all l <= n-1; h is not reachable from u")


@dataclass(frozen=True)
class AffineChain:
    """Levels h_i(x) = c_i.x + d_i of the lift applied to h = a.x - b.

    With constant sigma the Hessian of every affine level is zero, so the
    trace term drops out and the offsets never change.
    """

    cs: Array  # (r+1, n)
    ds: Array  # (r+1,)

    def __post_init__(self):
        cs = np.atleast_2d(np.asarray(self.cs, dtype=float))
        ds = np.asarray(self.ds, dtype=float).ravel()
        if cs.shape[0] != ds.size:
            raise ValueError("coefficient and offset counts must match")
        object.__setattr__(self, "cs", cs)
        object.__setattr__(self, "ds", ds)

    @property
    def r(self) -> int:
        return self.cs.shape[0] - 1

    def level(self, i: int, x: Array) -> float:
        return float(self.cs[i] @ x + self.ds[i])

    def top(self, x: Array) -> float:
        return self.level(self.r, x)


def build_affine_chain(F: Array, sigma: Array, a: Array, b: float, r: int) -> AffineChain:
    """Chain of depth r: c_i = (F^T + I)^i a, d_i = -b for every level."""
    if r < 0:
        raise ValueError("chain depth must be nonnegative")
    F = np.atleast_2d(np.asarray(F, dtype=float))
    a = np.asarray(a, dtype=float).ravel()
    M = F.T + np.eye(F.shape[0])
    cs = np.empty((r + 1, a.size))
    cs[0] = a
    for i in range(r):
        cs[i + 1] = M @ cs[i]
    ds = np.full(r + 1, -float(b))
    return AffineChain(cs=cs, ds=ds)


def hrd_constraint(chain: AffineChain, sys: LinearSystem, x: Array,
                   kappa: float = 1.0) -> AffineInputConstraint:
    """Input row at the top of the chain: c_r.G u >= -c_r.F x - kappa*h_r(x).

    Levels below r contribute nothing because c_i.G = 0 for i < r'.
    """
    x = np.asarray(x, dtype=float).ravel()
    c_r = chain.cs[chain.r]
    a_u = (c_r @ sys.G).ravel()
    b_u = -float(c_r @ sys.F @ x) - kappa * chain.top(x)
    return AffineInputConstraint(a=a_u, b=b_u, sense=Sense.GE)


def membership_cbar(chain: AffineChain, x: Array) -> bool:
    """True iff h_i(x) >= 0 at every level (the intersection set)."""
    x = np.asarray(x, dtype=float).ravel()
    return bool(np.all(chain.cs @ x + chain.ds >= 0.0))


def ito_lift(sys: ControlAffineSystem, h: SafetyFunction) -> SafetyFunction:
    """One general lift step with finite-difference derivatives.

    The returned function's value is closed-form in h's evaluators; its
    gradient and Hessian are central differences, so nesting more than a
    few levels loses accuracy.  Only the linear/affine path is wired into
    shipped scenarios; when g depends on the state the sign condition on
    dh_i/dx g is a scenario-author obligation.
    """

    def value(x: Array) -> float:
        sig = sys.sigma(x)
        tr = float(np.trace(sig.T @ h.hess(x) @ sig))
        return float(h.grad(x) @ sys.f(x)) + 0.5 * tr + h.value(x)

    return SafetyFunction(
        value=value,
        grad=lambda x: fd_gradient(value, x),
        hess=lambda x: fd_hessian(value, x),
    )
