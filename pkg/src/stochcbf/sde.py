"""Controlled Ito SDEs and fixed-step Euler-Maruyama integration.

The system model is ``dx = (f(x) + g(x) u) dt + sigma(x) dW`` with state
dimension ``n``, input dimension ``m`` and Brownian dimension ``q``.
Randomness comes from counter-based Philox streams keyed by
``(seed, replicate)``, so replicates are reproducible and independent
regardless of execution order.  Gaussian draws use numpy's ziggurat
sampler, which is fixed for a given numpy build; reruns with the same
seed reproduce trajectories bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

#: Abort threshold for the sup-norm of the state (blow-up guard).
BLOWUP_LIMIT = 1e9

#: Hard cap on steps per run, to catch pathological (horizon, dt) pairs.
MAX_STEPS = 20_000_000


class IntegrationBlowupError(RuntimeError):
    """State became non-finite or left the blow-up guard region."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"integration blew up at step {step}{': ' + detail if detail else ''}")


def make_rng(seed: int, replicate: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, replicate)."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.Generator(np.random.Philox(key=np.array([seed, replicate], dtype=np.uint64)))


@dataclass(frozen=True)
class ControlAffineSystem:
    """Control-affine diffusion: drift f(x), input map g(x), diffusion sigma(x).

    Evaluators must be deterministic and return finite arrays of shapes
    (n,), (n, m) and (n, q) respectively.
    """

    n: int
    m: int
    q: int
    f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    sigma: Callable[[Array], Array]

    def check_shapes(self, x: Array) -> None:
        """Probe the evaluators at x and verify declared shapes and finiteness."""
        for name, val, shape in (
            ("f", np.asarray(self.f(x)), (self.n,)),
            ("g", np.asarray(self.g(x)), (self.n, self.m)),
            ("sigma", np.asarray(self.sigma(x)), (self.n, self.q)),
        ):
            if val.shape != shape:
                raise ValueError(f"{name}(x) has shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ValueError(f"{name}(x) returned non-finite values")


@dataclass(frozen=True)
class LinearSystem:
    """Linear dynamics dx = (F x + G u) dt + sigma dW with constant sigma."""

    F: Array
    G: Array
    sigma: Array

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        sig = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if F.shape[0] != F.shape[1]:
            raise ValueError("F must be square")
        if G.shape[0] != F.shape[0] or sig.shape[0] != F.shape[0]:
            raise ValueError("G and sigma must have n rows")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "sigma", sig)

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[1]

    @property
    def q(self) -> int:
        return self.sigma.shape[1]

    def to_control_affine(self) -> ControlAffineSystem:
        F, G, sig = self.F, self.G, self.sigma
        return ControlAffineSystem(
            n=self.n, m=self.m, q=self.q,
            f=lambda x, _F=F: _F @ x,
            g=lambda x, _G=G: _G,
            sigma=lambda x, _s=sig: _s,
        )


@dataclass
class Trajectory:
    """One seeded closed-loop run on a uniform time grid.

    ``states`` has one more row than ``inputs``; ``margins`` holds the value
    of each registered safety function at every state, and
    ``feasible_flags`` marks the per-step QP feasibility reported by the
    policy.
    """

    dt: float
    times: Array
    states: Array
    inputs: Array
    margins: Array
    feasible_flags: Array
    blown_up: bool = False

    def __post_init__(self):
        k = len(self.times)
        if self.states.shape[0] != k or self.margins.shape[0] != k:
            raise ValueError("states and margins must align with times")
        if self.inputs.shape[0] != k - 1 or self.feasible_flags.shape[0] != k - 1:
            raise ValueError("inputs/feasible_flags must be one shorter than states")
        d = np.diff(self.times)
        if k > 1 and not np.allclose(d, self.dt, rtol=0, atol=1e-12 * max(1.0, abs(self.dt))):
            raise ValueError("times must be uniformly spaced by dt")


def brownian_increments(q: int, dt: float, rng: np.random.Generator) -> Array:
    """q independent N(0, dt) increments; advances the generator state."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return rng.standard_normal(q) * np.sqrt(dt)


def em_step(sys: ControlAffineSystem, x: Array, u: Array, dt: float, dW: Array,
            step: int = 0) -> Array:
    """One Euler-Maruyama step: x + (f(x) + g(x) u) dt + sigma(x) dW."""
    x_new = x + (sys.f(x) + sys.g(x) @ u) * dt + sys.sigma(x) @ dW
    if not np.all(np.isfinite(x_new)):
        raise IntegrationBlowupError(step, "non-finite state")
    return x_new


def _policy_output(out, m: int):
    """Accept either u or (u, feasible) from a policy."""
    if isinstance(out, tuple):
        u, feasible = out
    else:
        u, feasible = out, True
    u = np.asarray(u, dtype=float).reshape(m)
    return u, bool(feasible)


def simulate(sys: ControlAffineSystem, policy, x0: Array, horizon: float, dt: float,
             seed: int, replicate: int = 0,
             safety_fns: Sequence = ()) -> Trajectory:
    """Integrate the closed loop from x0 for ceil(horizon/dt) steps.

    ``policy(x, t)`` is queried once per step and may return ``u`` or
    ``(u, feasible)``.  Infeasibility is recorded, not raised.  Identical
    arguments produce a bitwise-identical Trajectory.
    """
    if horizon <= 0 or dt <= 0:
        raise ValueError("horizon and dt must be positive")
    steps = int(np.ceil(horizon / dt - 1e-9))
    if steps > MAX_STEPS:
        raise ValueError(f"{steps} steps exceeds the per-run budget of {MAX_STEPS}")

    rng = make_rng(seed, replicate)
    x = np.asarray(x0, dtype=float).reshape(sys.n).copy()

    times = np.arange(steps + 1) * dt
    states = np.empty((steps + 1, sys.n))
    inputs = np.zeros((steps, sys.m))
    margins = np.empty((steps + 1, len(safety_fns)))
    feasible = np.ones(steps, dtype=bool)
    blown_up = False

    states[0] = x
    for j, h in enumerate(safety_fns):
        margins[0, j] = h.value(x)

    for k in range(steps):
        u, ok = _policy_output(policy(x, times[k]), sys.m)
        inputs[k] = u
        feasible[k] = ok
        dW = brownian_increments(sys.q, dt, rng)
        x = em_step(sys, x, u, dt, dW, step=k)
        if np.max(np.abs(x)) > BLOWUP_LIMIT:
            # Mark and truncate rather than propagate NaNs silently.
            states[k + 1:] = np.nan
            margins[k + 1:] = np.nan
            feasible[k + 1:] = False
            blown_up = True
            break
        states[k + 1] = x
        for j, h in enumerate(safety_fns):
            margins[k + 1, j] = h.value(x)

    return Trajectory(dt=dt, times=times, states=states, inputs=inputs,
                      margins=margins, feasible_flags=feasible, blown_up=blown_up)
