"""Self-contained oracle and property checks behind the `check` CLI command.

Each check re-derives expected behaviour by an independent route (exhaustive
enumeration, finite differences, closed-form fixed points, sample statistics)
and compares the library against it.  The QP enumeration oracle here is also
what the test suite uses, so the solver and its oracle never share code.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional

import numpy as np

from .sde import Array, LinearSystem, make_rng, brownian_increments
from .barriers import SafetyFunction, fd_gradient, fd_hessian
from .high_degree import build_affine_chain, ito_lift, relative_degree
from .estimator import riccati_step
from .qp import FEAS_TOL, PHASE1_TOL, Fallback, QpStatus, solve_qp_arrays


def qp_enumeration_oracle(u_nom: Array, A: Array, b: Array,
                          tol: float = PHASE1_TOL) -> Optional[Array]:
    """Exact minimizer of 1/2 |u-u_nom|^2 over {A u >= b} by enumerating
    every linearly independent candidate active set; None if the polyhedron
    is empty (no enumerated point is feasible)."""
    u_nom = np.asarray(u_nom, dtype=float).ravel()
    k, m = A.shape
    best_u, best_obj = None, np.inf
    for size in range(0, min(k, m) + 1):
        for subset in itertools.combinations(range(k), size):
            S = list(subset)
            if size == 0:
                u = u_nom.copy()
            else:
                As = A[S]
                M = As @ As.T
                rhs = b[S] - As @ u_nom
                try:
                    lam = np.linalg.solve(M, rhs)
                except np.linalg.LinAlgError:
                    continue
                if np.max(np.abs(M @ lam - rhs)) > 1e-9 * (1.0 + np.max(np.abs(rhs))):
                    continue  # numerically dependent subset
                if np.min(lam) < -tol:
                    continue  # not a supporting set
                u = u_nom + As.T @ lam
            if np.min(A @ u - b) < -tol:
                continue
            obj = 0.5 * float(np.sum((u - u_nom) ** 2))
            if obj < best_obj - 1e-12:
                best_u, best_obj = u, obj
    return best_u


def check_qp_against_oracle(n_instances: int = 200, seed: int = 20240,
                            max_m: int = 4, max_rows: int = 6,
                            atol: float = 1e-8) -> tuple[int, int]:
    """Random instances: solver must match the oracle point and verdict.

    Returns (feasible_count, infeasible_count) for reporting.
    """
    rng = make_rng(seed)
    n_feas = n_inf = 0
    for idx in range(n_instances):
        m = int(rng.integers(1, max_m + 1))
        k = int(rng.integers(1, max_rows + 1))
        A = rng.standard_normal((k, m))
        b = rng.standard_normal(k)
        u_nom = rng.standard_normal(m)
        res = solve_qp_arrays(u_nom, A, b, fallback=Fallback.RELAX)
        u_star = qp_enumeration_oracle(u_nom, A, b)
        if u_star is None:
            if res.status is not QpStatus.RELAXED:
                raise AssertionError(f"instance {idx}: oracle infeasible, solver {res.status}")
            n_inf += 1
        else:
            if res.status is not QpStatus.OPTIMAL:
                raise AssertionError(f"instance {idx}: oracle feasible, solver {res.status}")
            err = float(np.max(np.abs(res.u - u_star)))
            if err > atol:
                raise AssertionError(f"instance {idx}: |du|_inf = {err:.3e} > {atol}")
            if res.kkt_residual > atol:
                raise AssertionError(f"instance {idx}: KKT residual {res.kkt_residual:.3e}")
            n_feas += 1
    return n_feas, n_inf


def check_affine_chain_recursion(n_draws: int = 50, seed: int = 11, tol: float = 1e-6) -> None:
    """The generic lift applied to affine h must reproduce the closed-form
    coefficients c_i = (F'+I)^i a with unchanged offset."""
    rng = make_rng(seed)
    for _ in range(n_draws):
        n = int(rng.integers(2, 5))
        F = rng.standard_normal((n, n)) * 0.6
        sigma = rng.standard_normal((n, max(1, n - 1))) * 0.5
        a = rng.standard_normal(n)
        b = float(rng.standard_normal())
        depth = int(rng.integers(1, 4))
        chain = build_affine_chain(F, sigma, a, b, depth)
        sys = LinearSystem(F=F, G=np.zeros((n, 1)), sigma=sigma).to_control_affine()
        h = SafetyFunction.affine(a, b)
        for i in range(1, depth + 1):
            h = ito_lift(sys, h)
            x = rng.standard_normal(n)
            want = float(chain.cs[i] @ x + chain.ds[i])
            got = h.value(x)
            if abs(got - want) > tol * (1.0 + abs(want)):
                raise AssertionError(f"chain level {i}: {got} vs closed form {want}")


def check_relative_degree_zeros(n_draws: int = 50, seed: int = 7, rtol: float = 1e-9) -> None:
    """c_i' G must vanish below the relative degree and match a'F^r G at it."""
    rng = make_rng(seed)
    for _ in range(n_draws):
        n = int(rng.integers(2, 6))
        F = np.zeros((n, n))
        for i in range(n - 1):
            F[i, i + 1] = rng.uniform(0.5, 2.0)
            for j in range(i + 2, n):
                F[i, j] = rng.standard_normal()
        G = np.zeros((n, 1))
        G[n - 1, 0] = rng.uniform(0.5, 2.0)
        kidx = int(rng.integers(0, n))
        a = np.zeros(n)
        a[kidx] = rng.uniform(0.5, 2.0)
        r = relative_degree(F, G, a)
        if r != n - 1 - kidx:
            raise AssertionError(f"relative degree {r}, structure says {n - 1 - kidx}")
        chain = build_affine_chain(F, np.zeros((n, 1)), a, 0.0, r)
        scale = float(np.linalg.norm(a) * np.linalg.norm(G))
        for i in range(r):
            if np.max(np.abs(chain.cs[i] @ G)) > rtol * scale:
                raise AssertionError(f"c_{i}'G nonzero below relative degree")
        want = float(a @ np.linalg.matrix_power(F, r) @ G)
        got = float(chain.cs[r] @ G)
        if abs(got - want) > rtol * max(1.0, abs(want)):
            raise AssertionError("c_r'G does not equal a'F^r G")


def check_scalar_riccati_fixed_point(tol: float = 1e-6) -> None:
    """Scalar covariance flow must settle at sqrt(QR) by t = 20."""
    for Q, R, p0 in ((1.0, 1.0, 0.0), (4.0, 1.0, 0.0), (4.0, 1.0, 10.0)):
        P = np.array([[p0]])
        dt = 1e-3
        for _ in range(int(20 / dt)):
            P = riccati_step(np.zeros((1, 1)), np.ones((1, 1)), Q * np.eye(1),
                             R * np.eye(1), P, dt)
        want = np.sqrt(Q * R)
        if abs(P[0, 0] - want) > tol:
            raise AssertionError(f"Riccati fixed point {P[0, 0]} vs sqrt(QR) = {want}")


def check_derivatives(fns: list[tuple[str, SafetyFunction, int]], seed: int = 3,
                      n_probes: int = 20, rtol: float = 1e-4) -> None:
    """Gradients and Hessians must match central finite differences."""
    rng = make_rng(seed)
    for name, fn, dim in fns:
        for _ in range(n_probes):
            x = rng.standard_normal(dim)
            g_fd = fd_gradient(fn.value, x)
            g = fn.grad(x)
            scale = max(1.0, float(np.max(np.abs(g_fd))))
            if np.max(np.abs(g - g_fd)) > rtol * scale:
                raise AssertionError(f"{name}: gradient mismatch at {x}")
            H_fd = fd_hessian(fn.value, x)
            H = fn.hess(x)
            scale = max(1.0, float(np.max(np.abs(H_fd))))
            if np.max(np.abs(H - H_fd)) > 5 * rtol * scale:
                raise AssertionError(f"{name}: Hessian mismatch at {x}")


def check_brownian_moments(seed: int = 99) -> None:
    """Sample mean/variance of increments must match (0, dt)."""
    rng = make_rng(seed)
    n, dt = 200_000, 0.01
    draws = np.concatenate([brownian_increments(4, dt, rng) for _ in range(n // 4)])
    if abs(float(np.mean(draws))) > 4e-3 * np.sqrt(dt / 0.01):
        raise AssertionError("Brownian increment mean off")
    if abs(float(np.var(draws)) - dt) > 3e-4:
        raise AssertionError("Brownian increment variance off")


def run_all_checks(verbose: bool = True) -> bool:
    """Run every check; print one line per check; True when all pass."""
    from .scenario import shipped_safety_functions  # deferred: scenario imports qp

    checks: list[tuple[str, Callable[[], object]]] = [
        ("qp-vs-enumeration-oracle", lambda: check_qp_against_oracle()),
        ("affine-chain-recursion", check_affine_chain_recursion),
        ("relative-degree-zeros", check_relative_degree_zeros),
        ("scalar-riccati-fixed-point", check_scalar_riccati_fixed_point),
        ("shipped-derivatives", lambda: check_derivatives(shipped_safety_functions())),
        ("brownian-moments", check_brownian_moments),
    ]
    ok = True
    for name, fn in checks:
        try:
            fn()
            status = "pass"
        except AssertionError as exc:
            status = f"FAIL ({exc})"
            ok = False
        if verbose:
            print(f"[{status.split()[0]:>4}] {name}" + ("" if status == "pass" else f"  {status}"))
    return ok
