"""Per-step safety-filter quadratic program and its dense solver.

Each control step minimizes the deviation from a nominal input,
1/2 |u - u_nom|^2, over the half-space rows produced by the barrier
builders.  The solver is a primal active-set method on the strictly convex
objective, warm-started from the previous step's active set.  Feasibility
restoration uses least-squares projection first and falls back to a
Bland-rule phase-1 simplex, whose minimum-violation verdict decides the
Infeasible status.  The Relaxed fallback returns the input minimizing the
total squared constraint violation (with a tiny proximal tie-break toward
the nominal input).

Infeasibility is data, not an error: the closed-loop policy records it and
applies the configured fallback.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .sde import Array, ControlAffineSystem
from .barriers import (
    IDENTITY_K,
    AffineInputConstraint,
    BoundaryError,
    ClassKFunction,
    ReciprocalBarrier,
    SafetyFunction,
    Sense,
    clf_constraint,
    rcbf_constraint,
    zcbf_constraint,
)
from .estimator import ShrunkSafety

# Dense regime guard; row counts stay small enough for O(m^3) iterations.
MAX_INPUT_DIM = 64

FEAS_TOL = 1e-9        # feasibility slop inside the active-set iteration
PHASE1_TOL = 1e-8      # minimum-violation threshold for the Infeasible verdict
DUAL_TOL = 1e-9        # multiplier nonnegativity threshold
RELAX_PROX = 1e-6      # proximal weight tying the relaxed point to u_nom


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    RELAXED = "relaxed"


class Fallback(enum.Enum):
    HOLD = "hold"
    RELAX = "relax"


@dataclass(frozen=True)
class QpProblem:
    """Projection of u_nom onto the intersection of half-space rows."""

    u_nom: Array
    constraints: Sequence[AffineInputConstraint]

    def __post_init__(self):
        u = np.asarray(self.u_nom, dtype=float).ravel()
        if u.size > MAX_INPUT_DIM:
            raise ValueError(f"input dimension {u.size} exceeds the dense-solver cap")
        for con in self.constraints:
            if con.a.size != u.size:
                raise ValueError("constraint row dimension does not match u_nom")
        object.__setattr__(self, "u_nom", u)
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def ge_rows(self) -> tuple[Array, Array]:
        """All rows normalized to a.u >= b form."""
        m = self.u_nom.size
        if not self.constraints:
            return np.zeros((0, m)), np.zeros(0)
        rows = [con.to_ge() for con in self.constraints]
        A = np.vstack([r[0] for r in rows])
        b = np.array([r[1] for r in rows])
        return A, b


@dataclass(frozen=True)
class QpResult:
    status: QpStatus
    u: Array
    active_set: tuple[int, ...] = ()
    slack: float = 0.0
    kkt_residual: float = 0.0


def _kkt_solve(h_diag: Array, c: Array, A: Array, b: Array, W: list[int]):
    """Minimizer of 1/2 z'Hz + c'z subject to A_W z = b_W, H = diag(h_diag)."""
    h_inv = 1.0 / h_diag
    if not W:
        return -h_inv * c, np.zeros(0)
    Aw = A[W]
    S = (Aw * h_inv) @ Aw.T
    rhs = b[W] + (Aw * h_inv) @ c
    lam = np.linalg.solve(S, rhs)
    z = h_inv * (Aw.T @ lam - c)
    return z, lam


def _active_set(h_diag: Array, c: Array, A: Array, b: Array, z0: Array,
                warm: Sequence[int] = ()) -> tuple[Array, list[int], Array]:
    """Primal active-set loop from a feasible start z0.

    Ties in the ratio test and the multiplier drop both resolve to the
    lowest constraint index, which makes the iteration deterministic.
    """
    k = A.shape[0]
    scale = 1.0 + float(np.max(np.abs(b), initial=0.0))
    # Warm rows are only usable when active at the start point.
    res0 = A @ z0 - b
    W = sorted(i for i in set(warm) if 0 <= i < k and abs(res0[i]) <= 1e-7 * scale)
    z = z0.astype(float).copy()
    limit = 50 * (k + 2)
    for _ in range(limit):
        try:
            z_eq, lam = _kkt_solve(h_diag, c, A, b, W)
        except np.linalg.LinAlgError:
            if W:
                W = []       # dependent warm start; restart clean
                continue
            raise
        p = z_eq - z
        if np.max(np.abs(p), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(z), initial=0.0)):
            if lam.size == 0 or float(np.min(lam)) >= -DUAL_TOL:
                return z_eq, W, lam
            W.pop(int(np.argmin(lam)))
            continue
        Ap = A @ p
        res = A @ z - b
        alpha, blocker = 1.0, -1
        for i in range(k):
            if i in W or Ap[i] >= -1e-13:
                continue
            ratio = max(res[i] / (-Ap[i]), 0.0)
            if ratio < alpha - 1e-15:
                alpha, blocker = ratio, i
        z = z + alpha * p
        if blocker >= 0 and alpha < 1.0:
            W = sorted(W + [blocker])
    raise RuntimeError("active-set iteration limit exceeded")


def _phase1_simplex(A: Array, b: Array) -> tuple[Array, float]:
    """min sum(s) over {A u + s - w = b, s >= 0, w >= 0} via Bland's rule.

    Returns the u part of the optimum and its maximum row violation; a
    violation above PHASE1_TOL certifies the polyhedron empty.
    """
    k, m = A.shape
    n_cols = 2 * m + 2 * k
    T = np.hstack([A, -A, np.eye(k), -np.eye(k)])
    rhs = b.astype(float).copy()
    neg = rhs < 0
    T[neg] *= -1.0
    rhs[neg] *= -1.0
    cost = np.zeros(n_cols)
    cost[2 * m: 2 * m + k] = 1.0
    basis = np.where(neg, 2 * m + k + np.arange(k), 2 * m + np.arange(k)).astype(int)

    for _ in range(200 * (k + 1)):
        B = T[:, basis]
        xB = np.linalg.solve(B, rhs)
        y = np.linalg.solve(B.T, cost[basis])
        reduced = cost - y @ T
        in_basis = np.zeros(n_cols, dtype=bool)
        in_basis[basis] = True
        entering = -1
        for j in range(n_cols):
            if not in_basis[j] and reduced[j] < -1e-10:
                entering = j
                break
        if entering < 0:
            break
        d = np.linalg.solve(B, T[:, entering])
        theta, leave_pos, leave_var = np.inf, -1, n_cols
        for i in range(k):
            if d[i] > 1e-12:
                t = xB[i] / d[i]
                if t < theta - 1e-12 or (t <= theta + 1e-12 and basis[i] < leave_var):
                    theta, leave_pos, leave_var = min(t, theta), i, basis[i]
        if leave_pos < 0:
            break  # objective bounded below by 0, so this cannot trigger
        basis[leave_pos] = entering
    B = T[:, basis]
    xB = np.linalg.solve(B, rhs)
    x = np.zeros(n_cols)
    x[basis] = xB
    u = x[:m] - x[m: 2 * m]
    violation = float(np.max(np.maximum(b - A @ u, 0.0), initial=0.0))
    return u, violation


def _restore_feasibility(A: Array, b: Array, u: Array) -> Optional[Array]:
    """Cheap least-squares pushes onto violated rows; None if they fail."""
    u = u.astype(float).copy()
    for _ in range(8):
        res = A @ u - b
        violated = np.flatnonzero(res < -FEAS_TOL)
        if violated.size == 0:
            return u
        Av = A[violated]
        du, *_ = np.linalg.lstsq(Av, -res[violated], rcond=None)
        if not np.all(np.isfinite(du)) or np.max(np.abs(du)) < 1e-14:
            return None
        u += du
    res = A @ u - b
    return u if np.min(res, initial=0.0) >= -FEAS_TOL else None


def _relaxed_point(A: Array, b: Array, u_nom: Array) -> tuple[Array, float]:
    """Minimum total squared violation, tie-broken toward u_nom.

    Solved as a lifted strictly convex QP in (u, s) with rows
    A u + s >= b and s >= 0; the proximal weight RELAX_PROX keeps the
    solution unique without visibly moving the violation minimizer.
    """
    k, m = A.shape
    s0 = np.maximum(b - A @ u_nom, 0.0)
    z0 = np.concatenate([u_nom, s0])
    h_diag = np.concatenate([np.full(m, RELAX_PROX), np.ones(k)])
    c = np.concatenate([-RELAX_PROX * u_nom, np.zeros(k)])
    A_lift = np.vstack([
        np.hstack([A, np.eye(k)]),
        np.hstack([np.zeros((k, m)), np.eye(k)]),
    ])
    b_lift = np.concatenate([b, np.zeros(k)])
    z, _, _ = _active_set(h_diag, c, A_lift, b_lift, z0)
    u = z[:m]
    slack = float(np.sum(np.maximum(b - A @ u, 0.0)))
    return u, slack


def solve_qp_arrays(u_nom: Array, A: Array, b: Array,
                    fallback: Optional[Fallback] = None,
                    warm: Sequence[int] = ()) -> QpResult:
    """Solve min 1/2 |u - u_nom|^2 s.t. A u >= b (rows already normalized)."""
    u_nom = np.asarray(u_nom, dtype=float).ravel()
    m = u_nom.size
    if A.shape[0] == 0:
        return QpResult(status=QpStatus.OPTIMAL, u=u_nom.copy())
    if A.shape[1] != m:
        raise ValueError("constraint row dimension does not match u_nom")

    res_nom = A @ u_nom - b
    if np.min(res_nom) >= -FEAS_TOL:
        u_start = u_nom
    else:
        u_start = _restore_feasibility(A, b, u_nom)
        if u_start is None:
            u_p1, violation = _phase1_simplex(A, b)
            if violation > PHASE1_TOL:
                if fallback is Fallback.RELAX:
                    u_rel, slack = _relaxed_point(A, b, u_nom)
                    return QpResult(status=QpStatus.RELAXED, u=u_rel, slack=slack)
                u_rel, slack = _relaxed_point(A, b, u_nom)
                return QpResult(status=QpStatus.INFEASIBLE, u=u_rel, slack=slack)
            u_start = u_p1

    h_diag = np.ones(m)
    c = -u_nom
    u, W, lam = _active_set(h_diag, c, A, b, u_start, warm=warm)
    grad = u - u_nom
    if W:
        grad = grad - A[W].T @ lam
    kkt = float(np.max(np.abs(grad), initial=0.0))
    worst = float(np.min(A @ u - b))
    slack = float(max(0.0, -worst))
    return QpResult(status=QpStatus.OPTIMAL, u=u, active_set=tuple(W),
                    slack=slack, kkt_residual=kkt)


def solve_qp(problem: QpProblem, fallback: Optional[Fallback] = None,
             warm: Sequence[int] = ()) -> QpResult:
    """Solve a QpProblem; LE rows are negated into GE form first."""
    A, b = problem.ge_rows()
    return solve_qp_arrays(problem.u_nom, A, b, fallback=fallback, warm=warm)


class Table1Mode(enum.Enum):
    RCBF_COMPLETE = "rcbf-complete"
    ZCBF_COMPLETE = "zcbf-complete"
    RCBF_INCOMPLETE = "rcbf-incomplete"
    ZCBF_INCOMPLETE = "zcbf-incomplete"


class TraceVariant(enum.Enum):
    """Diffusion used in the incomplete-information trace term.

    The estimate SDE's diffusion is K nu, which is the default; the
    process variant uses sigma literally.
    """

    FILTER_GAIN = "filter-gain"
    PROCESS = "process"


@dataclass
class Table1Context:
    """Everything a Table-1 row needs; incomplete modes also require the
    filter gain, output matrix, measurement diffusion, error radius and the
    shrunk safety function."""

    sys: ControlAffineSystem
    x: Array
    h: Optional[SafetyFunction] = None
    barrier: Optional[ReciprocalBarrier] = None
    alpha3: ClassKFunction = IDENTITY_K
    kappa: float = 1.0
    K: Optional[Array] = None
    c: Optional[Array] = None
    nu: Optional[Array] = None
    gamma: Optional[float] = None
    shrunk: Optional[ShrunkSafety] = None
    trace_variant: TraceVariant = TraceVariant.FILTER_GAIN


def _require(ctx: Table1Context, names: Sequence[str]) -> None:
    missing = [n for n in names if getattr(ctx, n) is None]
    if missing:
        raise ValueError(f"table-1 context missing fields: {', '.join(missing)}")


def _incomplete_trace(ctx: Table1Context, hess: Array) -> float:
    if ctx.trace_variant is TraceVariant.FILTER_GAIN:
        D = np.atleast_2d(ctx.K) @ np.atleast_2d(ctx.nu)
    else:
        D = ctx.sys.sigma(np.asarray(ctx.x, dtype=float))
    return float(np.trace(D.T @ hess @ D))


def table1_constraint(mode: Table1Mode, ctx: Table1Context) -> AffineInputConstraint:
    """Build the half-space row of the requested policy variant.

    Complete modes evaluate at the true state; incomplete modes evaluate
    the shrunk function at the estimate and add the robustness margin
    gamma * |grad . K c| against estimation error.
    """
    x = np.asarray(ctx.x, dtype=float).ravel()
    if mode is Table1Mode.ZCBF_COMPLETE:
        _require(ctx, ["h"])
        return zcbf_constraint(ctx.sys, ctx.h, x, kappa=ctx.kappa)
    if mode is Table1Mode.RCBF_COMPLETE:
        _require(ctx, ["barrier"])
        return rcbf_constraint(ctx.sys, ctx.barrier, x, alpha3=ctx.alpha3)

    _require(ctx, ["K", "c", "nu", "gamma", "shrunk"])
    Kc = np.atleast_2d(ctx.K) @ np.atleast_2d(ctx.c)
    if mode is Table1Mode.ZCBF_INCOMPLETE:
        hhat = ctx.shrunk.hhat
        grad = hhat.grad(x)
        a = (grad @ ctx.sys.g(x)).ravel()
        robust = ctx.gamma * float(np.linalg.norm(grad @ Kc))
        tr = _incomplete_trace(ctx, hhat.hess(x))
        b = (-float(grad @ ctx.sys.f(x)) + robust - 0.5 * tr
             - ctx.kappa * hhat.value(x))
        return AffineInputConstraint(a=a, b=b, sense=Sense.GE)
    if mode is Table1Mode.RCBF_INCOMPLETE:
        B = ReciprocalBarrier(h=ctx.shrunk.hhat)
        hx = B.h.value(x)
        if hx <= 0:
            raise BoundaryError(f"reciprocal row requires hhat(x) > 0, got {hx:g}")
        grad = B.grad(x)
        a = (grad @ ctx.sys.g(x)).ravel()
        robust = ctx.gamma * float(np.linalg.norm(grad @ Kc))
        tr = _incomplete_trace(ctx, B.hess(x))
        b = ctx.alpha3(hx) - float(grad @ ctx.sys.f(x)) - robust - 0.5 * tr
        return AffineInputConstraint(a=a, b=b, sense=Sense.LE)
    raise ValueError(f"unknown table-1 mode: {mode}")


CLF_SLACK_WEIGHT = 1e3


class SafetyFilterPolicy:
    """Closed-loop policy: project the nominal input into the safe rows.

    Constraint builders are callables ``x -> AffineInputConstraint`` (or a
    list of them), queried at every step.  Lyapunov rows are soft by
    default: each gets a slack variable with quadratic penalty weight
    CLF_SLACK_WEIGHT so that safety rows dominate under conflict.  On
    infeasible safety rows the fallback applies: Hold reuses the last
    feasible input (zero at t = 0), Relax takes the minimum-violation
    input.  Infeasibility is recorded in the trajectory, never raised.
    """

    def __init__(self, nominal: Callable[[Array], Array],
                 constraint_builders: Sequence[Callable[[Array], object]],
                 fallback: Fallback = Fallback.RELAX,
                 clf_builders: Sequence[Callable[[Array], AffineInputConstraint]] = (),
                 strict_clf: bool = False):
        self.nominal = nominal
        self.builders = tuple(constraint_builders)
        self.clf_builders = tuple(clf_builders)
        self.fallback = fallback
        self.strict_clf = strict_clf
        self._last_u: Optional[Array] = None
        self._warm: tuple[int, ...] = ()

    def _collect(self, builders, x: Array) -> list[AffineInputConstraint]:
        rows: list[AffineInputConstraint] = []
        for build in builders:
            out = build(x)
            if isinstance(out, AffineInputConstraint):
                rows.append(out)
            else:
                rows.extend(out)
        return rows

    def __call__(self, x: Array, t: float) -> tuple[Array, bool]:
        u_nom = np.asarray(self.nominal(x), dtype=float).ravel()
        m = u_nom.size
        try:
            safety_rows = self._collect(self.builders, x)
            clf_rows = self._collect(self.clf_builders, x)
        except BoundaryError:
            return self._fallback_input(u_nom), False
        if self.strict_clf:
            safety_rows, clf_rows = safety_rows + clf_rows, []
        if not safety_rows and not clf_rows:
            self._last_u = u_nom
            return u_nom, True

        A, b = _stack_ge(safety_rows, m)
        if clf_rows:
            u, ok = self._solve_with_soft_clf(u_nom, A, b, clf_rows)
        else:
            res = solve_qp_arrays(u_nom, A, b, fallback=self.fallback, warm=self._warm)
            if res.status is QpStatus.OPTIMAL:
                self._warm = res.active_set
                u, ok = res.u, True
            elif res.status is QpStatus.RELAXED:
                u, ok = res.u, False
            else:
                u, ok = self._fallback_input(u_nom), False
        if ok:
            self._last_u = u
        return u, ok

    def _fallback_input(self, u_nom: Array) -> Array:
        if self.fallback is Fallback.HOLD:
            return self._last_u.copy() if self._last_u is not None else np.zeros_like(u_nom)
        return u_nom  # Relax path supplies its own input before reaching here

    def _solve_with_soft_clf(self, u_nom: Array, A: Array, b: Array,
                             clf_rows: list[AffineInputConstraint]) -> tuple[Array, bool]:
        m = u_nom.size
        Ac, bc = _stack_ge(clf_rows, m)
        kc = Ac.shape[0]
        k = A.shape[0]
        # Lift with one slack per Lyapunov row: [A 0; Ac I; 0 I] z >= (b, bc, 0).
        A_lift = np.vstack([
            np.hstack([A, np.zeros((k, kc))]),
            np.hstack([Ac, np.eye(kc)]),
            np.hstack([np.zeros((kc, m)), np.eye(kc)]),
        ])
        b_lift = np.concatenate([b, bc, np.zeros(kc)])
        h_diag = np.concatenate([np.ones(m), np.full(kc, CLF_SLACK_WEIGHT)])
        c = np.concatenate([-u_nom, np.zeros(kc)])

        res_safety = A @ u_nom - b
        s0 = np.maximum(bc - Ac @ u_nom, 0.0)
        if np.min(res_safety, initial=0.0) >= -FEAS_TOL:
            z0 = np.concatenate([u_nom, s0])
        else:
            u_start = _restore_feasibility(A, b, u_nom)
            if u_start is None:
                u_start, violation = _phase1_simplex(A, b)
                if violation > PHASE1_TOL:
                    if self.fallback is Fallback.RELAX:
                        u_rel, _ = _relaxed_point(A, b, u_nom)
                        return u_rel, False
                    return self._fallback_input(u_nom), False
            z0 = np.concatenate([u_start, np.maximum(bc - Ac @ u_start, 0.0)])
        z, _, _ = _active_set(h_diag, c, A_lift, b_lift, z0)
        return z[:m], True


def _stack_ge(rows: Sequence[AffineInputConstraint], m: int) -> tuple[Array, Array]:
    if not rows:
        return np.zeros((0, m)), np.zeros(0)
    pairs = [r.to_ge() for r in rows]
    return np.vstack([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def safety_filter_policy(nominal: Callable[[Array], Array],
                         constraint_builders: Sequence[Callable[[Array], object]],
                         fallback: Fallback = Fallback.RELAX,
                         clf_builders: Sequence[Callable[[Array], AffineInputConstraint]] = (),
                         strict_clf: bool = False) -> SafetyFilterPolicy:
    """Build the closed-loop QP filter policy (see SafetyFilterPolicy)."""
    return SafetyFilterPolicy(nominal, constraint_builders, fallback=fallback,
                              clf_builders=clf_builders, strict_clf=strict_clf)
