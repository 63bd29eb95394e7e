"""Controlled forward dynamics, spike perturbations, and first variations.

The controlled state follows dX = F(t, X, u) dt + G(t, X) dM with M a
martingale driver, discretized by Euler-Maruyama with left-point coefficient
evaluation.  A spike perturbation replaces the control by a fixed value v on
a grid-aligned window [t0, t0 + eps).  The first variation p of the state
with respect to the spike and the running-cost variation zeta follow linear
equations driven by the frozen optimal trajectory and the same noise.

Problem callables are vectorized over paths:

    F(t, X, U) -> (P, n)          F_x(t, X, U) -> (n, n) or (P, n, n)
    G(t, X)    -> (n, n) or (P, n, n)
    G_x(t, X, D) -> (n, n) or (P, n, n)   directional derivative along D
    ell(t, X, U) -> (P,)          ell_x -> (P, n), ell_u -> (P, m)
    h(X) -> (P,)                  h_x(X) -> (P, n)
    F_u(t, X, U) -> (n, m) or (P, n, m)

with X of shape (P, n), U of shape (P, m) and scalar t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .hilbert import SpaceConfig, apply_operator, as_vector
from .martingale import NoiseBundle, PathGrid


class BlowUpError(RuntimeError):
    """Forward integration produced a non-finite state."""

    def __init__(self, path, step, time):
        self.path = int(path)
        self.step = int(step)
        self.time = float(time)
        super().__init__(
            f"state blew up on path {self.path} at step {self.step} "
            f"(t={self.time:.6g})")


class ControlSet:
    """Admissible control region; see BoxSet, BallSet, FiniteSet."""

    is_convex = False

    def contains(self, v, tol=1e-9):
        raise NotImplementedError

    def probe_grid(self, points_per_dim=11, cap=10000):
        raise NotImplementedError


@dataclass(frozen=True)
class BoxSet(ControlSet):
    lower: np.ndarray
    upper: np.ndarray
    is_convex = True

    def __post_init__(self):
        lo = as_vector(self.lower, name="lower")
        hi = as_vector(self.upper, dim=lo.shape[0], name="upper")
        if np.any(hi < lo):
            raise ValueError("box upper bound below lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.shape[0]

    def contains(self, v, tol=1e-9):
        v = np.asarray(v, dtype=float)
        span = np.maximum(self.upper - self.lower, 1.0)
        return bool(np.all(v >= self.lower - tol * span)
                    and np.all(v <= self.upper + tol * span))

    def probe_grid(self, points_per_dim=11, cap=10000):
        m = self.dim
        pts = max(2, int(points_per_dim))
        while pts ** m > cap and pts > 2:
            pts -= 1
        axes = [np.linspace(self.lower[j], self.upper[j], pts)
                for j in range(m)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True)
class BallSet(ControlSet):
    center: np.ndarray
    radius: float
    is_convex = True

    def __post_init__(self):
        c = as_vector(self.center, name="center")
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", c)

    @property
    def dim(self):
        return self.center.shape[0]

    def contains(self, v, tol=1e-9):
        v = np.asarray(v, dtype=float)
        return bool(np.linalg.norm(v - self.center)
                    <= self.radius * (1.0 + tol))

    def probe_grid(self, points_per_dim=11, cap=10000):
        box = BoxSet(self.center - self.radius, self.center + self.radius)
        pts = box.probe_grid(points_per_dim, cap)
        keep = np.linalg.norm(pts - self.center, axis=1) <= self.radius + 1e-12
        pts = pts[keep]
        if not any(np.allclose(p, self.center) for p in pts):
            pts = np.vstack([self.center, pts])
        return pts


@dataclass(frozen=True)
class FiniteSet(ControlSet):
    points: np.ndarray
    is_convex = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a nonempty (N, m) array")
        object.__setattr__(self, "points", pts)

    @property
    def dim(self):
        return self.points.shape[1]

    def contains(self, v, tol=1e-9):
        v = np.asarray(v, dtype=float)
        return bool(np.min(np.linalg.norm(self.points - v, axis=1)) <= tol)

    def probe_grid(self, points_per_dim=11, cap=10000):
        return np.array(self.points, copy=True)


def sample_controls(control_set, count, rng):
    """Draw admissible controls uniformly-ish from a control set."""
    if isinstance(control_set, BoxSet):
        span = control_set.upper - control_set.lower
        return control_set.lower + rng.random((count, control_set.dim)) * span
    if isinstance(control_set, BallSet):
        raw = rng.standard_normal((count, control_set.dim))
        raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
        radii = control_set.radius * rng.random(count) ** (1.0 / control_set.dim)
        return control_set.center + raw * radii[:, None]
    if isinstance(control_set, FiniteSet):
        idx = rng.integers(0, control_set.points.shape[0], size=count)
        return control_set.points[idx]
    raise TypeError(f"unsupported control set {type(control_set).__name__}")


@dataclass
class ControlProblem:
    """Coefficients, costs, and analytic derivatives of one control problem.

    ``G_x(t, X, D)`` is the directional derivative of G at X along the state
    directions D (one per path): it returns the operator that multiplies the
    driver increment in the first-variation equation.
    """

    space: SpaceConfig
    F: Callable
    G: Callable
    ell: Callable
    h: Callable
    F_x: Callable
    F_u: Callable
    G_x: Callable
    ell_x: Callable
    ell_u: Callable
    h_x: Callable
    control_set: ControlSet
    name: str = ""


class ControlPolicy:
    """Control rule evaluated per grid step on the current batch of states."""

    def controls_at(self, k, t, states):
        raise NotImplementedError


@dataclass(frozen=True)
class OpenLoopPolicy(ControlPolicy):
    """Deterministic grid-indexed schedule, one control per step."""

    schedule: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.schedule, dtype=float)
        if s.ndim != 2:
            raise ValueError(f"schedule must be (steps, control_dim), got "
                             f"shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("schedule has non-finite entries")
        object.__setattr__(self, "schedule", s)

    @classmethod
    def constant(cls, u, steps):
        u = as_vector(u, name="control")
        return cls(np.tile(u, (steps, 1)))

    def controls_at(self, k, t, states):
        if k < 0 or k >= self.schedule.shape[0]:
            raise IndexError(f"step {k} outside schedule of length "
                             f"{self.schedule.shape[0]}")
        return np.broadcast_to(self.schedule[k],
                               (states.shape[0], self.schedule.shape[1]))


@dataclass(frozen=True)
class FeedbackPolicy(ControlPolicy):
    """State feedback u = fn(t, X) with X batched over paths."""

    fn: Callable

    def controls_at(self, k, t, states):
        u = np.asarray(self.fn(t, states), dtype=float)
        if u.ndim != 2 or u.shape[0] != states.shape[0]:
            raise ValueError(f"feedback returned shape {u.shape} for "
                             f"{states.shape[0]} paths")
        return u


@dataclass(frozen=True)
class SpikeSpec:
    """Needle perturbation: control value v on the window [t0, t0 + eps)."""

    t0: float
    eps: float
    v: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.t0) or self.t0 < 0.0:
            raise ValueError(f"t0 must be >= 0, got {self.t0}")
        if not np.isfinite(self.eps) or self.eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        object.__setattr__(self, "v", as_vector(self.v, name="spike control"))

    def window(self, grid):
        """Resolve (k0, k1) grid-step indices; validates alignment."""
        k0 = grid.index_of(self.t0, what="spike start t0")
        span = grid.span_of(self.eps, what="spike width eps")
        if span < 1:
            raise ValueError(f"spike width {self.eps} spans zero grid steps "
                             f"(dt={grid.dt})")
        if k0 + span > grid.steps:
            raise ValueError(
                f"spike window [{self.t0}, {self.t0 + self.eps}) extends "
                f"past the horizon {grid.horizon}")
        return k0, k0 + span


@dataclass(frozen=True)
class SpikedPolicy(ControlPolicy):
    base: ControlPolicy
    spec: SpikeSpec
    k0: int
    k1: int

    def controls_at(self, k, t, states):
        if self.k0 <= k < self.k1:
            return np.broadcast_to(self.spec.v,
                                   (states.shape[0], self.spec.v.shape[0]))
        return self.base.controls_at(k, t, states)


def apply_spike(policy, spec, grid):
    """Policy equal to spec.v on the spike window and to ``policy`` elsewhere."""
    k0, k1 = spec.window(grid)
    return SpikedPolicy(base=policy, spec=spec, k0=k0, k1=k1)


@dataclass
class TrajectoryBundle:
    """States on the full grid for every path of one noise bundle."""

    states: np.ndarray
    policy: ControlPolicy
    bundle: NoiseBundle = field(repr=False)
    spike: SpikeSpec | None = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 3:
            raise ValueError(f"states must be (paths, steps+1, dim), got "
                             f"shape {s.shape}")
        self.states = s

    @property
    def paths(self):
        return self.states.shape[0]

    @property
    def grid(self):
        return self.bundle.grid

    def controls(self):
        """Realized controls per step, shape (paths, steps, control_dim)."""
        grid = self.grid
        times = grid.times
        first = self.policy.controls_at(0, times[0], self.states[:, 0, :])
        out = np.empty((self.paths, grid.steps, first.shape[1]))
        out[:, 0, :] = first
        for k in range(1, grid.steps):
            out[:, k, :] = self.policy.controls_at(k, times[k],
                                                   self.states[:, k, :])
        return out


def _check_same_bundle(a, b, what):
    if a is b:
        return
    if a.identity() != b.identity():
        raise ValueError(f"{what} requires the same noise bundle "
                         f"(got identities {a.identity()} vs {b.identity()})")


def _integrate(problem, policy, bundle, states, start):
    grid = bundle.grid
    times = grid.times
    dt = grid.dt
    x = states[:, start, :].copy()
    for k in range(start, grid.steps):
        t = times[k]
        u = policy.controls_at(k, t, x)
        drift = problem.F(t, x, u)
        diffusion = apply_operator(problem.G(t, x), bundle.increments[:, k, :])
        x = x + drift * dt + diffusion
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x).all(axis=1))[0, 0]
            raise BlowUpError(path=bad, step=k + 1, time=times[k + 1])
        states[:, k + 1, :] = x
    return states


def integrate_forward(problem, policy, bundle, x0):
    """Euler-Maruyama forward run with left-point coefficients.

    X_{k+1} = X_k + F(t_k, X_k, u_k) dt + G(t_k, X_k) dM_k.  Raises
    BlowUpError naming the first offending path and step if the state
    leaves the finite range.
    """
    n = bundle.dim
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(as_vector(x0, dim=n, name="x0"),
                             (bundle.paths, n))
    elif x0.shape != (bundle.paths, n):
        raise ValueError(f"x0 must have shape ({n},) or ({bundle.paths}, {n})")
    states = np.empty((bundle.paths, bundle.steps + 1, n))
    states[:, 0, :] = x0
    _integrate(problem, policy, bundle, states, start=0)
    return TrajectoryBundle(states=states, policy=policy, bundle=bundle)


def integrate_spiked(problem, base, spec):
    """Re-run a base trajectory under a spiked policy, reusing the prefix.

    The spiked policy agrees with the base policy before the window, so the
    result is bit-identical to a full re-integration from t = 0.
    """
    grid = base.grid
    k0, _ = spec.window(grid)
    policy = apply_spike(base.policy, spec, grid)
    states = np.empty_like(base.states)
    states[:, :k0 + 1, :] = base.states[:, :k0 + 1, :]
    _integrate(problem, policy, base.bundle, states, start=k0)
    return TrajectoryBundle(states=states, policy=policy, bundle=base.bundle,
                            spike=spec)


def integrate_variational(problem, optimal, bundle, spec):
    """First variation p of the state along a spike, on the frozen trajectory.

    p(t0) = F(t0, X(t0), v) - F(t0, X(t0), u(t0)), then
    p_{k+1} = p_k + F_x(t_k, X_k, u_k) p_k dt + (G_x(t_k, X_k)[p_k]) dM_k.
    Stored as zeros before the window start.
    """
    _check_same_bundle(optimal.bundle, bundle, "variational run")
    grid = bundle.grid
    times = grid.times
    dt = grid.dt
    k0, _ = spec.window(grid)
    x_at = optimal.states
    t0 = times[k0]
    x0 = x_at[:, k0, :]
    u0 = optimal.policy.controls_at(k0, t0, x0)
    v = np.broadcast_to(spec.v, u0.shape)
    p = problem.F(t0, x0, v) - problem.F(t0, x0, u0)
    out = np.zeros_like(optimal.states)
    out[:, k0, :] = p
    for k in range(k0, grid.steps):
        t = times[k]
        xk = x_at[:, k, :]
        uk = optimal.policy.controls_at(k, t, xk)
        fx = problem.F_x(t, xk, uk)
        gx = problem.G_x(t, xk, p)
        p = p + apply_operator(fx, p) * dt \
            + apply_operator(gx, bundle.increments[:, k, :])
        out[:, k + 1, :] = p
    return TrajectoryBundle(states=out, policy=optimal.policy, bundle=bundle,
                            spike=spec)


def integrate_zeta(problem, optimal, p_paths, spec):
    """Scalar first variation of the running cost along the spike.

    zeta(t0) = ell(t0, X(t0), v) - ell(t0, X(t0), u(t0)), then
    zeta_{k+1} = zeta_k + <ell_x(t_k, X_k, u_k), p_k> dt.  Returns an array
    of shape (paths, steps + 1), zero before the window start.
    """
    _check_same_bundle(optimal.bundle, p_paths.bundle, "zeta run")
    grid = optimal.grid
    times = grid.times
    dt = grid.dt
    k0, _ = spec.window(grid)
    x0 = optimal.states[:, k0, :]
    u0 = optimal.policy.controls_at(k0, times[k0], x0)
    v = np.broadcast_to(spec.v, u0.shape)
    z = problem.ell(times[k0], x0, v) - problem.ell(times[k0], x0, u0)
    out = np.zeros((optimal.paths, grid.steps + 1))
    out[:, k0] = z
    for k in range(k0, grid.steps):
        xk = optimal.states[:, k, :]
        uk = optimal.policy.controls_at(k, times[k], xk)
        grad = problem.ell_x(times[k], xk, uk)
        z = z + np.einsum("pi,pi->p", grad, p_paths.states[:, k, :]) * dt
        out[:, k + 1] = z
    return out


@dataclass(frozen=True)
class CostReport:
    """Monte Carlo cost estimate with per-path values for paired comparisons."""

    mean: float
    stderr: float
    per_path: np.ndarray = field(repr=False)

    @property
    def paths(self):
        return self.per_path.shape[0]


def evaluate_cost(problem, trajectories, policy=None):
    """Left-Riemann running cost plus terminal cost, averaged over paths."""
    pol = policy if policy is not None else trajectories.policy
    grid = trajectories.grid
    times = grid.times
    dt = grid.dt
    run = np.zeros(trajectories.paths)
    for k in range(grid.steps):
        xk = trajectories.states[:, k, :]
        uk = pol.controls_at(k, times[k], xk)
        run += problem.ell(times[k], xk, uk) * dt
    total = run + problem.h(trajectories.states[:, -1, :])
    se = float(np.std(total, ddof=1) / np.sqrt(total.shape[0])) \
        if total.shape[0] > 1 else float("inf")
    return CostReport(mean=float(np.mean(total)), stderr=se, per_path=total)


@dataclass(frozen=True)
class DerivativeReport:
    """Central-difference audit of the problem's analytic derivatives."""

    max_rel_error: dict
    flagged: tuple
    tol: float
    probes: int

    @property
    def passed(self):
        return not self.flagged


def _rel_err(analytic, fd):
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(fd))),
                1e-8)
    return float(np.max(np.abs(analytic - fd))) / scale


def _single(problem_fn, *args):
    return np.asarray(problem_fn(*args), dtype=float)


def finite_diff_check(problem, probes, rel_step=1e-5, tol=1e-4):
    """Check every analytic derivative at the probe points.

    ``probes`` is a sequence of (t, x, u) with 1-d x and u.  Central
    differences use per-coordinate steps rel_step * max(1, |coord|).
    Derivatives whose max relative error exceeds ``tol`` are flagged.
    """
    n = problem.space.state_dim
    m = problem.space.control_dim
    names = ("F_x", "F_u", "G_x", "ell_x", "ell_u", "h_x")
    worst = {name: 0.0 for name in names}

    count = 0
    for t, x, u in probes:
        count += 1
        x = as_vector(x, dim=n, name="probe state")
        u = as_vector(u, dim=m, name="probe control")
        X = x[None, :]
        U = u[None, :]
        hx = rel_step * np.maximum(1.0, np.abs(x))
        hu = rel_step * np.maximum(1.0, np.abs(u))

        fx_an = np.asarray(problem.F_x(t, X, U), dtype=float)
        if fx_an.ndim == 3:
            fx_an = fx_an[0]
        fx_fd = np.empty((n, n))
        for j in range(n):
            dx = np.zeros(n)
            dx[j] = hx[j]
            hi = _single(problem.F, t, X + dx, U)[0]
            lo = _single(problem.F, t, X - dx, U)[0]
            fx_fd[:, j] = (hi - lo) / (2.0 * hx[j])
        worst["F_x"] = max(worst["F_x"], _rel_err(fx_an, fx_fd))

        fu_an = np.asarray(problem.F_u(t, X, U), dtype=float)
        if fu_an.ndim == 3:
            fu_an = fu_an[0]
        fu_fd = np.empty((n, m))
        for j in range(m):
            du = np.zeros(m)
            du[j] = hu[j]
            hi = _single(problem.F, t, X, U + du)[0]
            lo = _single(problem.F, t, X, U - du)[0]
            fu_fd[:, j] = (hi - lo) / (2.0 * hu[j])
        worst["F_u"] = max(worst["F_u"], _rel_err(fu_an, fu_fd))

        for j in range(n):
            dx = np.zeros(n)
            dx[j] = 1.0
            gx_an = np.asarray(problem.G_x(t, X, dx[None, :]), dtype=float)
            if gx_an.ndim == 3:
                gx_an = gx_an[0]
            hi = np.asarray(problem.G(t, X + hx[j] * dx), dtype=float)
            lo = np.asarray(problem.G(t, X - hx[j] * dx), dtype=float)
            if hi.ndim == 3:
                hi, lo = hi[0], lo[0]
            gx_fd = (hi - lo) / (2.0 * hx[j])
            worst["G_x"] = max(worst["G_x"], _rel_err(gx_an, gx_fd))

        lx_an = np.asarray(problem.ell_x(t, X, U), dtype=float)[0]
        lx_fd = np.empty(n)
        for j in range(n):
            dx = np.zeros(n)
            dx[j] = hx[j]
            lx_fd[j] = (float(problem.ell(t, X + dx, U)[0])
                        - float(problem.ell(t, X - dx, U)[0])) / (2.0 * hx[j])
        worst["ell_x"] = max(worst["ell_x"], _rel_err(lx_an, lx_fd))

        lu_an = np.asarray(problem.ell_u(t, X, U), dtype=float)[0]
        lu_fd = np.empty(m)
        for j in range(m):
            du = np.zeros(m)
            du[j] = hu[j]
            lu_fd[j] = (float(problem.ell(t, X, U + du)[0])
                        - float(problem.ell(t, X, U - du)[0])) / (2.0 * hu[j])
        worst["ell_u"] = max(worst["ell_u"], _rel_err(lu_an, lu_fd))

        hx_an = np.asarray(problem.h_x(X), dtype=float)[0]
        hx_fd = np.empty(n)
        for j in range(n):
            dx = np.zeros(n)
            dx[j] = hx[j]
            hx_fd[j] = (float(problem.h(X + dx)[0])
                        - float(problem.h(X - dx)[0])) / (2.0 * hx[j])
        worst["h_x"] = max(worst["h_x"], _rel_err(hx_an, hx_fd))

    flagged = tuple(name for name in names if worst[name] > tol)
    return DerivativeReport(max_rel_error=worst, flagged=flagged, tol=tol,
                            probes=count)
