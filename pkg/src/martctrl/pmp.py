"""Optimality checks built on spike variations and the adjoint pair.

necessary_check probes the Hamiltonian margin H(t, X, v, Y, ZQ^(1/2)) -
H(t, X, u, Y, ZQ^(1/2)) over a lattice of admissible controls: along an
optimal pair the margin is nonnegative for a.e. time, almost surely.
sufficient_check verifies the convexity package that upgrades a stationary
candidate to a minimizer: convex control set, midpoint-convex terminal cost,
joint midpoint convexity of (x, v) -> H at the candidate's adjoint pair, and
the minimum condition.  gateaux_check compares the common-random-number
difference quotient of the cost along a spike against the first-variation
representation E[<h_x(X_T), p(T)> + zeta(T)].  rate_experiments measures the
decay of E sup |X_eps - X|^2 and of the normalized remainder
E |(X_eps(T) - X(T))/eps - p(T)|^2 along an eps ladder.

run_example1 and run_example2 assemble the two packaged scenarios: a linear
drift / terminal-linear-cost problem whose optimal control and cost are in
closed form, and a linear-quadratic problem solved by the regression adjoint
with stationarity policy-improvement sweeps (the sweeps are a tooling
addition on top of the underlying theory; they are labeled as such in the
report).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (AdjointSolution, HamiltonianArgs, RegressionBasis,
                      duality_check, hamiltonian, solve_adjoint_explicit,
                      solve_adjoint_lsmc)
from .dynamics import (BoxSet, ControlProblem, ControlPolicy, FeedbackPolicy,
                       OpenLoopPolicy, SpikeSpec, TrajectoryBundle,
                       evaluate_cost, integrate_forward, integrate_spiked,
                       integrate_variational, integrate_zeta, sample_controls)
from .hilbert import SpaceConfig, psd_sqrt
from .martingale import (MartingaleDriver, PathGrid, ScalarIntensity,
                         sample_increments)


@dataclass
class CandidatePair:
    """A control policy with its trajectories and adjoint pair, all coupled."""

    policy: ControlPolicy
    trajectories: TrajectoryBundle
    adjoint: AdjointSolution

    def __post_init__(self):
        adj_traj = getattr(self.adjoint, "trajectories", None)
        if adj_traj is not None and adj_traj.bundle.identity() \
                != self.trajectories.bundle.identity():
            raise ValueError("adjoint pair was solved on a different noise "
                             "bundle than the candidate trajectories")


@dataclass(frozen=True)
class Assertion:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    scenario: str
    sections: dict
    assertions: list
    tables: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(a.passed for a in self.assertions)


@dataclass
class MarginReport:
    """Hamiltonian margins over sampled times, paths, and control probes."""

    time_indices: np.ndarray
    times: np.ndarray
    path_indices: np.ndarray
    probes: np.ndarray
    margins: np.ndarray          # (n_times, n_paths, n_probes)
    min_margin: float
    frac_negative: float
    tol: float
    stat_allowance: float
    disc_allowance: float
    witness: tuple               # (time, path index, probe control)

    @property
    def passed(self):
        return self.min_margin >= -self.tol


def _spread_indices(total, count):
    count = max(1, min(int(count), total))
    return np.unique(np.round(np.linspace(0, total - 1, count)).astype(int))


def necessary_check(problem, driver, candidate, probes=None, sample_times=20,
                    sample_paths=100, points_per_dim=11, tol_floor=1e-8,
                    stat_allowance=0.0, disc_allowance=0.0):
    """Minimum-condition margins of the Hamiltonian over a probe lattice.

    Passes when the smallest margin over all sampled (time, path, probe)
    triples is >= -tol with tol = max(tol_floor, 3 * (stat_allowance +
    disc_allowance)); the allowances are reported alongside the verdict.
    """
    traj = candidate.trajectories
    grid = traj.grid
    times = grid.times
    if probes is None:
        probes = problem.control_set.probe_grid(points_per_dim)
    probes = np.asarray(probes, dtype=float)
    for row in probes:
        if not problem.control_set.contains(row, tol=1e-9):
            raise ValueError(f"probe control {row} lies outside the declared "
                             f"control set")
    t_idx = _spread_indices(grid.steps, sample_times)   # steps index < steps
    p_idx = _spread_indices(traj.paths, sample_paths)
    n_v = probes.shape[0]

    margins = np.empty((t_idx.size, p_idx.size, n_v))
    for i, k in enumerate(t_idx):
        t = times[k]
        xs = traj.states[p_idx, k, :]
        y = candidate.adjoint.y_at(k)
        ys = np.broadcast_to(y, (traj.paths, y.shape[1]))[p_idx] \
            if y.shape[0] == 1 else y[p_idx]
        z = candidate.adjoint.z_at(k, states=xs)
        qhalf = psd_sqrt(driver.cov_rate(t))
        zq = z @ qhalf
        u_star = candidate.policy.controls_at(k, t, xs)
        h_star = hamiltonian(problem, driver,
                             HamiltonianArgs(t=t, x=xs, u=u_star, y=ys, zq=zq))
        xr = np.repeat(xs, n_v, axis=0)
        yr = np.repeat(ys, n_v, axis=0)
        zr = np.repeat(zq, n_v, axis=0)
        ur = np.tile(probes, (xs.shape[0], 1))
        h_probe = hamiltonian(problem, driver,
                              HamiltonianArgs(t=t, x=xr, u=ur, y=yr, zq=zr))
        margins[i] = h_probe.reshape(xs.shape[0], n_v) - h_star[:, None]

    tol = max(tol_floor, 3.0 * (stat_allowance + disc_allowance))
    flat_arg = int(np.argmin(margins))
    wi, wp, wv = np.unravel_index(flat_arg, margins.shape)
    witness = (float(times[t_idx[wi]]), int(p_idx[wp]), probes[wv].copy())
    return MarginReport(
        time_indices=t_idx, times=times[t_idx], path_indices=p_idx,
        probes=probes, margins=margins, min_margin=float(margins.min()),
        frac_negative=float(np.mean(margins < 0.0)), tol=tol,
        stat_allowance=stat_allowance, disc_allowance=disc_allowance,
        witness=witness)


@dataclass
class SufficiencyReport:
    """Convexity package verdicts for the sufficient optimality conditions."""

    applicable: bool
    set_convex: bool
    terminal_violation: float
    terminal_passed: bool
    joint_violation: float
    joint_passed: bool
    joint_witness: dict | None
    margin_report: MarginReport | None
    pairs: int
    tol: float
    note: str = ""

    @property
    def overall(self):
        if not self.applicable:
            return False
        return (self.terminal_passed and self.joint_passed
                and self.margin_report is not None
                and self.margin_report.passed)


def _state_box(trajectories, widen=0.5):
    states = trajectories.states
    lo = states.min(axis=(0, 1))
    hi = states.max(axis=(0, 1))
    pad = widen * np.maximum(hi - lo, 1.0)
    return lo - pad, hi + pad


def sufficient_check(problem, driver, candidate, pairs=1000, seed=77,
                     sample_times=8, tol=1e-10, margin_report=None,
                     margin_kwargs=None):
    """Midpoint-convexity and minimum-condition package.

    Aborts as inapplicable when the declared control set is not convex.
    Terminal and joint convexity run on ``pairs`` random midpoint probes;
    the joint check holds the candidate's (Y, Z Q^(1/2)) fixed at sampled
    (time, path) points while perturbing (x, v).
    """
    if not problem.control_set.is_convex:
        return SufficiencyReport(
            applicable=False, set_convex=False, terminal_violation=float("nan"),
            terminal_passed=False, joint_violation=float("nan"),
            joint_passed=False, joint_witness=None, margin_report=None,
            pairs=0, tol=tol,
            note="inapplicable: control set is not convex")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    traj = candidate.trajectories
    grid = traj.grid
    lo, hi = _state_box(traj)
    n = lo.shape[0]

    def draw_states(count):
        return lo + rng.random((count, n)) * (hi - lo)

    xa = draw_states(pairs)
    xb = draw_states(pairs)
    h_mid = np.asarray(problem.h(0.5 * (xa + xb)), dtype=float)
    h_avg = 0.5 * (np.asarray(problem.h(xa), dtype=float)
                   + np.asarray(problem.h(xb), dtype=float))
    terminal_violation = float(np.max(h_mid - h_avg))
    terminal_passed = terminal_violation <= tol

    t_idx = _spread_indices(grid.steps, sample_times)
    per_time = int(np.ceil(pairs / t_idx.size))
    joint_violation = -float("inf")
    joint_witness = None
    for k in t_idx:
        t = grid.times[k]
        p_sel = rng.integers(0, traj.paths, size=per_time)
        xs = traj.states[p_sel, k, :]
        y = candidate.adjoint.y_at(k)
        ys = np.broadcast_to(y, (traj.paths, y.shape[1]))[p_sel] \
            if y.shape[0] == 1 else y[p_sel]
        zq = candidate.adjoint.z_at(k, states=xs) \
            @ psd_sqrt(driver.cov_rate(t))
        x1 = draw_states(per_time)
        x2 = draw_states(per_time)
        v1 = sample_controls(problem.control_set, per_time, rng)
        v2 = sample_controls(problem.control_set, per_time, rng)
        h1 = hamiltonian(problem, driver,
                         HamiltonianArgs(t=t, x=x1, u=v1, y=ys, zq=zq))
        h2 = hamiltonian(problem, driver,
                         HamiltonianArgs(t=t, x=x2, u=v2, y=ys, zq=zq))
        hm = hamiltonian(problem, driver,
                         HamiltonianArgs(t=t, x=0.5 * (x1 + x2),
                                         u=0.5 * (v1 + v2), y=ys, zq=zq))
        viol = hm - 0.5 * (h1 + h2)
        worst = int(np.argmax(viol))
        if float(viol[worst]) > joint_violation:
            joint_violation = float(viol[worst])
            joint_witness = {"t": float(t), "x1": x1[worst].copy(),
                             "v1": v1[worst].copy(), "x2": x2[worst].copy(),
                             "v2": v2[worst].copy()}
    joint_passed = joint_violation <= tol

    if margin_report is None:
        kwargs = margin_kwargs or {}
        margin_report = necessary_check(problem, driver, candidate, **kwargs)

    return SufficiencyReport(
        applicable=True, set_convex=True,
        terminal_violation=terminal_violation,
        terminal_passed=terminal_passed, joint_violation=joint_violation,
        joint_passed=joint_passed,
        joint_witness=None if joint_passed else joint_witness,
        margin_report=margin_report, pairs=pairs, tol=tol)


@dataclass(frozen=True)
class GateauxEntry:
    eps: float
    fd_quotient: float
    se_fd: float
    mean_diff: float
    se_diff: float
    tol: float
    agree: bool


@dataclass
class GateauxReport:
    """CRN difference quotient of the cost vs the first-variation value."""

    adjoint_value: float
    se_adjoint: float
    entries: list

    @property
    def agree_all(self):
        return all(e.agree for e in self.entries)


def gateaux_check(problem, candidate, spec, bundle=None,
                  eps_list=(0.05, 0.025), bias_fraction=0.1, p_paths=None,
                  zeta=None):
    """Spike difference quotient of the cost vs E[<h_x(X_T), p(T)> + zeta(T)].

    All runs share the candidate's noise bundle (common random numbers);
    per eps, agreement requires |mean difference| <= 3 * SE(paired diff) +
    bias_fraction * eps * |first-variation value|.  ``p_paths`` and ``zeta``
    are injectable for fault-detection self-tests.
    """
    traj = candidate.trajectories
    if bundle is None:
        bundle = traj.bundle
    if bundle.identity() != traj.bundle.identity():
        raise ValueError("gateaux check requires the candidate's own bundle")
    if p_paths is None:
        p_paths = integrate_variational(problem, traj, bundle, spec)
    if zeta is None:
        zeta = integrate_zeta(problem, traj, p_paths, spec)
    grid = traj.grid
    hx = np.asarray(problem.h_x(traj.states[:, -1, :]), dtype=float)
    adj_pp = np.einsum("pi,pi->p", hx, p_paths.states[:, -1, :]) + zeta[:, -1]
    adj = float(np.mean(adj_pp))
    se_adj = float(np.std(adj_pp, ddof=1) / np.sqrt(adj_pp.shape[0]))

    base_cost = evaluate_cost(problem, traj)
    entries = []
    for eps in eps_list:
        spec_eps = SpikeSpec(t0=spec.t0, eps=float(eps), v=spec.v)
        traj_eps = integrate_spiked(problem, traj, spec_eps)
        cost_eps = evaluate_cost(problem, traj_eps)
        fd_pp = (cost_eps.per_path - base_cost.per_path) / float(eps)
        diff_pp = fd_pp - adj_pp
        mean_diff = float(np.mean(diff_pp))
        se_diff = float(np.std(diff_pp, ddof=1) / np.sqrt(diff_pp.shape[0]))
        tol = 3.0 * se_diff + bias_fraction * float(eps) * abs(adj)
        entries.append(GateauxEntry(
            eps=float(eps), fd_quotient=float(np.mean(fd_pp)),
            se_fd=float(np.std(fd_pp, ddof=1) / np.sqrt(fd_pp.shape[0])),
            mean_diff=mean_diff, se_diff=se_diff, tol=tol,
            agree=abs(mean_diff) <= tol))
        del traj_eps
    return GateauxReport(adjoint_value=adj, se_adjoint=se_adj,
                         entries=entries)


@dataclass
class RateReport:
    """Spike-remainder decay along an eps ladder (largest eps first)."""

    eps: np.ndarray
    esup: np.ndarray
    esup_se: np.ndarray
    exi: np.ndarray
    exi_se: np.ndarray
    slope: float
    slope_ok: bool
    xi_decreasing: bool
    xi_final_ok: bool

    @property
    def passed(self):
        return self.slope_ok and self.xi_decreasing and self.xi_final_ok


def rate_experiments(problem, candidate, t0, v,
                     eps_ladder=(0.2, 0.1, 0.05, 0.025), p_paths=None):
    """Measure E sup_t |X_eps - X|^2 and E |(X_eps(T)-X(T))/eps - p(T)|^2.

    All spiked runs reuse the candidate's noise bundle.  Passes when the
    log-log slope of the sup curve is >= 1.5 and the remainder sequence is
    strictly decreasing with final value < 1/4 of the initial one.
    """
    traj = candidate.trajectories
    grid = traj.grid
    ladder = np.sort(np.asarray(eps_ladder, dtype=float))[::-1]
    spec_max = SpikeSpec(t0=float(t0), eps=float(ladder[0]), v=v)
    k0, _ = spec_max.window(grid)
    if p_paths is None:
        p_paths = integrate_variational(problem, traj, traj.bundle, spec_max)
    p_term = p_paths.states[:, -1, :]

    esup = np.empty(ladder.size)
    esup_se = np.empty(ladder.size)
    exi = np.empty(ladder.size)
    exi_se = np.empty(ladder.size)
    paths = traj.paths
    for i, eps in enumerate(ladder):
        spec = SpikeSpec(t0=float(t0), eps=float(eps), v=v)
        traj_eps = integrate_spiked(problem, traj, spec)
        msq = np.zeros(paths)
        for k in range(k0, grid.steps + 1):
            diff = traj_eps.states[:, k, :] - traj.states[:, k, :]
            np.maximum(msq, np.einsum("pi,pi->p", diff, diff), out=msq)
        xi = (traj_eps.states[:, -1, :] - traj.states[:, -1, :]) / eps - p_term
        xi_sq = np.einsum("pi,pi->p", xi, xi)
        esup[i] = float(np.mean(msq))
        esup_se[i] = float(np.std(msq, ddof=1) / np.sqrt(paths))
        exi[i] = float(np.mean(xi_sq))
        exi_se[i] = float(np.std(xi_sq, ddof=1) / np.sqrt(paths))
        del traj_eps

    slope = float(np.polyfit(np.log(ladder), np.log(esup), 1)[0])
    decreasing = bool(np.all(np.diff(exi) < 0.0))
    final_ok = bool(exi[-1] < 0.25 * exi[0])
    return RateReport(eps=ladder, esup=esup, esup_se=esup_se, exi=exi,
                      exi_se=exi_se, slope=slope, slope_ok=slope >= 1.5,
                      xi_decreasing=decreasing, xi_final_ok=final_ok)


# ---------------------------------------------------------------------------
# Packaged scenario 1: linear drift, bilinear noise, terminal linear cost.
# ---------------------------------------------------------------------------

EXAMPLE1_BETA = (1.0, -0.5, 0.25, 0.0)
EXAMPLE1_C = (0.8, -0.3, 0.5, 0.2)
EXAMPLE1_F_TILDE = ((1.0, 0.2), (0.0, 0.7), (-0.4, 0.3), (0.5, 0.0))
EXAMPLE1_G_TILDE = ((0.3, 0.06, 0.0, 0.03), (0.0, 0.3, 0.09, 0.0),
                    (0.06, 0.0, 0.3, 0.0), (0.0, 0.03, 0.0, 0.3))
EXAMPLE1_X0 = (1.0, 0.5, -0.25, 0.75)


@dataclass
class Example1Config:
    """Scenario with closed-form optimal control -0.5 * F~^T c.

    With drift_gain > 0 the drift gains a bounded smooth nonlinearity
    (gain * tanh(x), componentwise).  That variant has no closed-form
    adjoint, so it is exercised through the difference-quotient and rate
    experiments rather than the full scenario pipeline.
    """

    state_dim: int = 4
    control_dim: int = 2
    beta: tuple = EXAMPLE1_BETA
    c: tuple = EXAMPLE1_C
    f_tilde: tuple = EXAMPLE1_F_TILDE
    g_tilde: tuple = EXAMPLE1_G_TILDE
    x0: tuple = EXAMPLE1_X0
    alpha0: float = 1.0
    alpha_slope: float = 0.5
    horizon: float = 1.0
    steps: int = 400
    paths: int = 20000
    seed: int = 12022
    control_box_radius: float = 2.0
    spike_count: int = 20
    probe_points_per_dim: int = 11
    sample_times: int = 20
    sample_paths: int = 100
    convexity_pairs: int = 1000
    drift_gain: float = 0.0
    schedule: tuple | None = None     # constant open-loop override
    feedback: str | None = None       # named feedback policy override


def build_example1_problem(cfg):
    """Problem, driver, grid, and the stationary control of scenario 1."""
    n, m = cfg.state_dim, cfg.control_dim
    space = SpaceConfig(state_dim=n, control_dim=m)
    beta = np.asarray(cfg.beta, dtype=float)
    c = np.asarray(cfg.c, dtype=float)
    f_tilde = np.asarray(cfg.f_tilde, dtype=float).reshape(n, m)
    g_tilde = np.asarray(cfg.g_tilde, dtype=float).reshape(n, n)
    gain = float(cfg.drift_gain)
    u_star = -0.5 * (f_tilde.T @ c)
    control_set = BoxSet(u_star - cfg.control_box_radius,
                         u_star + cfg.control_box_radius)

    def drift(t, x, u):
        base = u @ f_tilde.T
        if gain != 0.0:
            base = base + gain * np.tanh(x)
        return base

    def drift_x(t, x, u):
        if gain == 0.0:
            return np.zeros((n, n))
        out = np.zeros((x.shape[0], n, n))
        idx = np.arange(n)
        out[:, idx, idx] = gain * (1.0 - np.tanh(x) ** 2)
        return out

    def diffusion(t, x):
        return np.einsum("p,ij->pij", x @ beta, g_tilde)

    def diffusion_x(t, x, d):
        return np.einsum("p,ij->pij", np.asarray(d, dtype=float) @ beta,
                         g_tilde)

    problem = ControlProblem(
        space=space,
        F=drift,
        G=diffusion,
        ell=lambda t, x, u: np.einsum("pi,pi->p", u, u),
        h=lambda x: x @ c,
        F_x=drift_x,
        F_u=lambda t, x, u: f_tilde,
        G_x=diffusion_x,
        ell_x=lambda t, x, u: np.zeros_like(x),
        ell_u=lambda t, x, u: 2.0 * u,
        h_x=lambda x: np.broadcast_to(c, x.shape),
        control_set=control_set,
        name="example1" if gain == 0.0 else "example1-tanh")
    driver = MartingaleDriver(
        state_dim=n, horizon=cfg.horizon,
        components=((beta, ScalarIntensity.linear(cfg.alpha0, cfg.alpha_slope,
                                                  cfg.horizon)),))
    grid = PathGrid(horizon=cfg.horizon, steps=cfg.steps)
    return problem, driver, grid, u_star


def example1_analytic_cost(cfg):
    """Closed-form optimal cost <c, x0> - (T/4)|F~^T c|^2 (linear drift)."""
    c = np.asarray(cfg.c, dtype=float)
    x0 = np.asarray(cfg.x0, dtype=float)
    f_tilde = np.asarray(cfg.f_tilde, dtype=float).reshape(cfg.state_dim,
                                                           cfg.control_dim)
    return float(c @ x0 - cfg.horizon / 4.0 * np.sum((f_tilde.T @ c) ** 2))


def named_feedback(name, u_star, control_dim):
    """Feedback policies addressable by name from configuration files."""
    if name == "stationary":
        target = np.asarray(u_star, dtype=float)

        def stationary(t, states):
            return np.broadcast_to(target,
                                   (states.shape[0], target.shape[0])).copy()

        return FeedbackPolicy(fn=stationary)
    if name == "zero":
        def zero(t, states):
            return np.zeros((states.shape[0], control_dim))

        return FeedbackPolicy(fn=zero)
    raise ValueError(f"unknown feedback policy name {name!r}")


@dataclass(frozen=True)
class SpikeOutcome:
    spec: SpikeSpec
    gap: float
    se: float
    far: bool


def default_spike_family(grid, u_star, control_set, count=20, seed=0,
                         far_threshold=0.25):
    """Deterministic family of spike specs around the stationary control.

    Two specs spike with the stationary value itself (expected zero gap);
    the rest displace the control by magnitudes in [0.3, 0.9] of the box
    radius in random directions.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(1001,)))
    steps = grid.steps
    m = u_star.shape[0]
    eps_opts = [max(1, round(0.05 * steps)), max(1, round(0.1 * steps)),
                max(1, round(0.2 * steps))]
    t0_opts = [round(f * steps) for f in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)]
    radius = None
    if isinstance(control_set, BoxSet):
        radius = float(np.min(control_set.upper - control_set.lower)) / 2.0
    if radius is None or radius <= 0:
        radius = 1.0
    specs = []
    for i in range(count):
        k0 = t0_opts[int(rng.integers(0, len(t0_opts)))]
        span = eps_opts[int(rng.integers(0, len(eps_opts)))]
        while k0 + span > steps:
            span = max(1, span // 2)
        t0 = grid.times[k0]
        eps = span * grid.dt
        if i < 2:
            v = u_star.copy()
        else:
            direction = rng.standard_normal(m)
            direction /= max(np.linalg.norm(direction), 1e-12)
            mag = radius * (0.3 + 0.6 * rng.random())
            v = u_star + mag * direction
        if not control_set.contains(v):
            v = np.clip(v, getattr(control_set, "lower", v),
                        getattr(control_set, "upper", v))
        specs.append(SpikeSpec(t0=float(t0), eps=float(eps), v=v))
    return specs, far_threshold


@dataclass
class Example1Result:
    report: ScenarioReport
    problem: ControlProblem
    driver: MartingaleDriver
    grid: PathGrid
    bundle: object
    policy: ControlPolicy
    trajectories: TrajectoryBundle
    adjoint: AdjointSolution
    candidate: CandidatePair
    cost: object
    analytic_cost: float
    u_star: np.ndarray
    spikes: list
    margin_report: MarginReport
    sufficiency: SufficiencyReport
    core_seconds: float


def run_example1(cfg=None, threads=None):
    """Run packaged scenario 1 end to end and assemble its report."""
    cfg = cfg if cfg is not None else Example1Config()
    if cfg.drift_gain != 0.0:
        raise ValueError(
            "the packaged scenario-1 pipeline verifies the closed-form "
            "candidate and requires drift_gain = 0; exercise the nonlinear "
            "drift variant through the difference-quotient or rate "
            "experiments instead")
    problem, driver, grid, u_star = build_example1_problem(cfg)
    x0 = np.asarray(cfg.x0, dtype=float)

    tic = time.perf_counter()
    bundle = sample_increments(driver, grid, cfg.paths, cfg.seed,
                               threads=threads)
    if cfg.schedule is not None:
        policy = OpenLoopPolicy.constant(np.asarray(cfg.schedule, dtype=float),
                                         grid.steps)
    elif cfg.feedback is not None:
        policy = named_feedback(cfg.feedback, u_star, cfg.control_dim)
    else:
        policy = OpenLoopPolicy.constant(u_star, grid.steps)
    trajectories = integrate_forward(problem, policy, bundle, x0)
    cost = evaluate_cost(problem, trajectories)
    core_seconds = time.perf_counter() - tic

    analytic = example1_analytic_cost(cfg)

    adjoint = solve_adjoint_explicit(problem, driver, grid,
                                     probe_scale=max(1.0,
                                                     float(np.max(np.abs(x0)))))
    candidate = CandidatePair(policy=policy, trajectories=trajectories,
                              adjoint=adjoint)

    spikes = []
    specs, far_threshold = default_spike_family(
        grid, u_star, problem.control_set, count=cfg.spike_count,
        seed=cfg.seed)
    for spec in specs:
        traj_eps = integrate_spiked(problem, trajectories, spec)
        cost_eps = evaluate_cost(problem, traj_eps)
        gap_pp = cost_eps.per_path - cost.per_path
        gap = float(np.mean(gap_pp))
        se = float(np.std(gap_pp, ddof=1) / np.sqrt(gap_pp.shape[0]))
        far = float(np.linalg.norm(spec.v - u_star)) >= far_threshold
        spikes.append(SpikeOutcome(spec=spec, gap=gap, se=se, far=far))
        del traj_eps

    margin_report = necessary_check(
        problem, driver, candidate, sample_times=cfg.sample_times,
        sample_paths=cfg.sample_paths,
        points_per_dim=cfg.probe_points_per_dim)
    sufficiency = sufficient_check(
        problem, driver, candidate, pairs=cfg.convexity_pairs,
        seed=cfg.seed + 3, margin_report=margin_report)

    assertions = []
    delta = abs(cost.mean - analytic)
    assertions.append(Assertion(
        name="cost_matches_analytic",
        passed=delta <= 3.0 * cost.stderr,
        detail=f"|{cost.mean:.6f} - {analytic:.6f}| = {delta:.2e} "
               f"vs 3*SE = {3.0 * cost.stderr:.2e}"))
    worst_gap = min((s.gap + 3.0 * s.se for s in spikes), default=0.0)
    assertions.append(Assertion(
        name="spike_costs_dominate",
        passed=all(s.gap >= -3.0 * s.se for s in spikes),
        detail=f"min (gap + 3*SE) = {worst_gap:.3e} over {len(spikes)} spikes"))
    far_specs = [s for s in spikes if s.far]
    frac = float(np.mean([s.gap > s.se for s in far_specs])) if far_specs \
        else 1.0
    assertions.append(Assertion(
        name="spike_gaps_positive",
        passed=frac >= 0.9,
        detail=f"{frac:.2%} of {len(far_specs)} displaced spikes exceed 1 SE"))
    assertions.append(Assertion(
        name="necessary_margins",
        passed=margin_report.passed,
        detail=f"min margin {margin_report.min_margin:.3e} vs "
               f"tol {margin_report.tol:.1e}"))
    assertions.append(Assertion(
        name="sufficiency",
        passed=sufficiency.overall,
        detail=f"terminal viol {sufficiency.terminal_violation:.2e}, "
               f"joint viol {sufficiency.joint_violation:.2e}"))

    sections = {
        "cost": {
            "mc_mean": cost.mean,
            "mc_stderr": cost.stderr,
            "analytic": analytic,
            "paths": cfg.paths,
            "core_seconds": round(core_seconds, 3),
        },
        "stationary_control": {
            "u_star": np.array2string(u_star, precision=10),
        },
        "margins": {
            "min_margin": margin_report.min_margin,
            "frac_negative": margin_report.frac_negative,
            "tol": margin_report.tol,
        },
        "sufficiency": {
            "applicable": sufficiency.applicable,
            "terminal_violation": sufficiency.terminal_violation,
            "joint_violation": sufficiency.joint_violation,
            "overall": sufficiency.overall,
        },
    }
    spike_rows = [
        (s.spec.t0, s.spec.eps,
         *[float(x) for x in s.spec.v], s.gap, s.se, int(s.far))
        for s in spikes]
    m = u_star.shape[0]
    spike_header = (["t0", "eps"] + [f"v{j}" for j in range(m)]
                    + ["gap", "stderr", "far"])
    margin_rows = []
    for i, t in enumerate(margin_report.times):
        for j, probe in enumerate(margin_report.probes):
            col = margin_report.margins[i, :, j]
            margin_rows.append((float(t),
                                *[float(x) for x in probe],
                                float(col.min()), float(col.mean())))
    margin_header = (["t"] + [f"v{j}" for j in range(m)]
                     + ["min_margin", "mean_margin"])
    report = ScenarioReport(
        scenario="example1", sections=sections, assertions=assertions,
        tables={"spike_gaps": (spike_header, spike_rows),
                "hamiltonian_margins": (margin_header, margin_rows)})
    return Example1Result(
        report=report, problem=problem, driver=driver, grid=grid,
        bundle=bundle, policy=policy, trajectories=trajectories,
        adjoint=adjoint, candidate=candidate, cost=cost,
        analytic_cost=analytic, u_star=u_star, spikes=spikes,
        margin_report=margin_report, sufficiency=sufficiency,
        core_seconds=core_seconds)


# ---------------------------------------------------------------------------
# Packaged scenario 2: linear-quadratic problem with regression adjoint.
# ---------------------------------------------------------------------------

EXAMPLE2_A = ((-0.5, 0.2), (0.0, -0.3))
EXAMPLE2_C = ((1.0, 0.0), (0.0, 1.0))
EXAMPLE2_F = (0.1, 0.0)
EXAMPLE2_GAMMA = (0.2, 0.0)
EXAMPLE2_G_TILDE = ((0.3, 0.0), (0.0, 0.2))
EXAMPLE2_D = ((0.2, 0.0), (0.0, 0.15))
EXAMPLE2_P = ((0.5, 0.0), (0.0, 0.5))
EXAMPLE2_R = ((1.0, 0.0), (0.0, 1.0))
EXAMPLE2_P1 = ((0.6, 0.0), (0.0, 0.4))
EXAMPLE2_X0 = (1.0, 0.5)
EXAMPLE2_BETA = (1.0, 0.4)


@dataclass
class Example2Config:
    """Linear-quadratic scenario solved with the regression adjoint."""

    state_dim: int = 2
    control_dim: int = 2
    a: tuple = EXAMPLE2_A
    c_op: tuple = EXAMPLE2_C
    f: tuple = EXAMPLE2_F
    gamma: tuple = EXAMPLE2_GAMMA
    g_tilde: tuple = EXAMPLE2_G_TILDE
    d: tuple = EXAMPLE2_D
    p_weight: tuple = EXAMPLE2_P
    r_weight: tuple = EXAMPLE2_R
    p1: tuple = EXAMPLE2_P1
    x0: tuple = EXAMPLE2_X0
    beta: tuple = EXAMPLE2_BETA
    alpha0: float = 1.0
    alpha_slope: float = 0.5
    horizon: float = 1.0
    steps: int = 100
    paths: int = 4000
    seed: int = 30303
    basis_degree: int = 2
    sweeps: int = 3
    control_box_radius: float = 5.0
    schedule: tuple | None = None     # constant open-loop initial candidate
    feedback: str | None = None       # named feedback initial candidate
    run_duality: bool = True
    duality_t0: float = 0.25
    duality_eps: float = 0.1
    duality_v: tuple = (0.5, -0.25)


def build_example2_problem(cfg):
    """Linear-quadratic problem and driver for scenario 2."""
    n, m = cfg.state_dim, cfg.control_dim
    space = SpaceConfig(state_dim=n, control_dim=m)
    a = np.asarray(cfg.a, dtype=float).reshape(n, n)
    c_op = np.asarray(cfg.c_op, dtype=float).reshape(n, m)
    f = np.asarray(cfg.f, dtype=float).reshape(n)
    gamma = np.asarray(cfg.gamma, dtype=float).reshape(n)
    g_tilde = np.asarray(cfg.g_tilde, dtype=float).reshape(n, n)
    d = np.asarray(cfg.d, dtype=float).reshape(n, n)
    p_w = np.asarray(cfg.p_weight, dtype=float).reshape(n, n)
    r_w = np.asarray(cfg.r_weight, dtype=float).reshape(m, m)
    p1 = np.asarray(cfg.p1, dtype=float).reshape(n, n)
    for name, mat in (("p_weight", p_w), ("r_weight", r_w), ("p1", p1)):
        if not np.allclose(mat, mat.T, atol=1e-12):
            raise ValueError(f"{name} must be symmetric")
    beta = np.asarray(cfg.beta, dtype=float).reshape(n)

    def diffusion(t, x):
        return np.einsum("p,ij->pij", x @ gamma, g_tilde) + d

    problem = ControlProblem(
        space=space,
        F=lambda t, x, u: x @ a.T + u @ c_op.T + f,
        G=diffusion,
        ell=lambda t, x, u: 0.5 * np.einsum("pi,ij,pj->p", x, p_w, x)
            + 0.5 * np.einsum("pi,ij,pj->p", u, r_w, u),
        h=lambda x: 0.5 * np.einsum("pi,ij,pj->p", x, p1, x),
        F_x=lambda t, x, u: a,
        F_u=lambda t, x, u: c_op,
        G_x=lambda t, x, dirs: np.einsum(
            "p,ij->pij", np.asarray(dirs, dtype=float) @ gamma, g_tilde),
        ell_x=lambda t, x, u: x @ p_w,
        ell_u=lambda t, x, u: u @ r_w,
        h_x=lambda x: x @ p1,
        control_set=BoxSet(-cfg.control_box_radius * np.ones(m),
                           cfg.control_box_radius * np.ones(m)),
        name="example2")
    driver = MartingaleDriver(
        state_dim=n, horizon=cfg.horizon,
        components=((beta, ScalarIntensity.linear(cfg.alpha0, cfg.alpha_slope,
                                                  cfg.horizon)),))
    grid = PathGrid(horizon=cfg.horizon, steps=cfg.steps)
    return problem, driver, grid


def stationarity_residual(problem, trajectories, adjoint):
    """RMS of grad_u H = ell_u + F_u^T Y along the realized pair."""
    grid = trajectories.grid
    times = grid.times
    total = 0.0
    count = 0
    per_step = np.empty(grid.steps)
    for k in range(grid.steps):
        xk = trajectories.states[:, k, :]
        uk = trajectories.policy.controls_at(k, times[k], xk)
        y = adjoint.y_at(k)
        yk = np.broadcast_to(y, (xk.shape[0], y.shape[1])) \
            if y.shape[0] == 1 else y
        fu = np.asarray(problem.F_u(times[k], xk, uk), dtype=float)
        if fu.ndim == 2:
            futy = yk @ fu
        else:
            futy = np.einsum("pnm,pn->pm", fu, yk)
        resid = np.asarray(problem.ell_u(times[k], xk, uk), dtype=float) + futy
        sq = np.einsum("pi,pi->p", resid, resid)
        per_step[k] = float(np.mean(sq))
        total += float(np.sum(sq))
        count += sq.shape[0]
    return float(np.sqrt(total / count)), per_step


@dataclass
class SweepRecord:
    policy: ControlPolicy
    trajectories: TrajectoryBundle
    adjoint: AdjointSolution
    cost: object
    residual: float
    residual_per_step: np.ndarray


@dataclass
class Example2Result:
    report: ScenarioReport
    problem: ControlProblem
    driver: MartingaleDriver
    grid: PathGrid
    bundle: object
    sweeps: list
    duality: object | None


def _improvement_policy(adjoint, c_op, r_inv, grid):
    """Feedback u = -R^{-1} C^T E-hat[Y | X], from the fitted adjoint."""

    def fn(t, states):
        k = grid.index_of(t, what="policy time")
        k = min(k, grid.steps - 1)
        y = adjoint.y_eval(k, states)
        return -(y @ c_op) @ r_inv

    return FeedbackPolicy(fn=fn)


def run_example2(cfg=None, threads=None):
    """Run packaged scenario 2: regression adjoint plus stationarity sweeps.

    The policy-improvement sweeps (u <- -R^{-1} C^T E-hat[Y|X]) are a tooling
    addition layered on the stationarity condition C^T Y + R u = 0; they are
    reported as such and are not part of the underlying optimality theory.
    """
    cfg = cfg if cfg is not None else Example2Config()
    problem, driver, grid = build_example2_problem(cfg)
    n, m = cfg.state_dim, cfg.control_dim
    c_op = np.asarray(cfg.c_op, dtype=float).reshape(n, m)
    r_w = np.asarray(cfg.r_weight, dtype=float).reshape(m, m)
    r_inv = np.linalg.inv(r_w)
    x0 = np.asarray(cfg.x0, dtype=float)
    basis = RegressionBasis(degree=cfg.basis_degree)

    bundle = sample_increments(driver, grid, cfg.paths, cfg.seed,
                               threads=threads)
    if cfg.schedule is not None:
        policy = OpenLoopPolicy.constant(np.asarray(cfg.schedule, dtype=float),
                                         grid.steps)
    elif cfg.feedback is not None:
        policy = named_feedback(cfg.feedback, np.zeros(m), m)
    else:
        policy = OpenLoopPolicy.constant(np.zeros(m), grid.steps)

    sweeps = []
    for s in range(cfg.sweeps + 1):
        trajectories = integrate_forward(problem, policy, bundle, x0)
        adjoint = solve_adjoint_lsmc(problem, driver, trajectories,
                                     policy=policy, basis=basis)
        cost = evaluate_cost(problem, trajectories)
        residual, per_step = stationarity_residual(problem, trajectories,
                                                   adjoint)
        sweeps.append(SweepRecord(policy=policy, trajectories=trajectories,
                                  adjoint=adjoint, cost=cost,
                                  residual=residual,
                                  residual_per_step=per_step))
        if s < cfg.sweeps:
            policy = _improvement_policy(adjoint, c_op, r_inv, grid)

    duality = None
    if cfg.run_duality:
        spec = SpikeSpec(t0=cfg.duality_t0, eps=cfg.duality_eps,
                         v=np.asarray(cfg.duality_v, dtype=float))
        first = sweeps[0]
        p_paths = integrate_variational(problem, first.trajectories, bundle,
                                        spec)
        duality = duality_check(problem, driver, first.trajectories,
                                first.adjoint, spec, p_paths)

    assertions = []
    cost_ok = True
    details = []
    for s in range(1, len(sweeps)):
        diff_pp = sweeps[s].cost.per_path - sweeps[s - 1].cost.per_path
        mean_diff = float(np.mean(diff_pp))
        se_diff = float(np.std(diff_pp, ddof=1) / np.sqrt(diff_pp.shape[0]))
        ok = mean_diff <= 2.0 * se_diff
        cost_ok = cost_ok and ok
        details.append(f"sweep {s}: dJ = {mean_diff:.3e} (SE {se_diff:.1e})")
    assertions.append(Assertion(
        name="cost_nonincreasing", passed=cost_ok,
        detail="; ".join(details) if details else "no sweeps"))
    res_first = sweeps[0].residual
    res_last = sweeps[-1].residual
    assertions.append(Assertion(
        name="stationarity_residual_decreases",
        passed=(res_last < res_first) or res_first == 0.0,
        detail=f"residual {res_first:.4e} -> {res_last:.4e}"))
    if duality is not None:
        assertions.append(Assertion(
            name="duality_within_3se",
            passed=duality.within(3.0),
            detail=f"|{duality.lhs:.5f} - {duality.rhs:.5f}| = "
                   f"{abs(duality.difference):.2e} vs "
                   f"3*(SE_L+SE_R) = {3.0 * (duality.se_lhs + duality.se_rhs):.2e}"))

    sections = {
        "sweeps": {
            "count": cfg.sweeps,
            "note": "policy-improvement sweeps are a tooling addition "
                    "layered on the stationarity condition",
            "costs": [round(s.cost.mean, 8) for s in sweeps],
            "cost_stderr": [round(s.cost.stderr, 8) for s in sweeps],
            "residuals": [round(s.residual, 10) for s in sweeps],
        },
        "adjoint": {
            "method": "lsmc",
            "basis_degree": cfg.basis_degree,
            "n_residual_ratio": sweeps[-1].adjoint.n_residual_ratio,
        },
    }
    if duality is not None:
        sections["duality"] = {
            "lhs": duality.lhs, "rhs": duality.rhs,
            "difference": duality.difference,
            "se_lhs": duality.se_lhs, "se_rhs": duality.se_rhs,
        }
    sweep_rows = [(s, sweeps[s].cost.mean, sweeps[s].cost.stderr,
                   sweeps[s].residual) for s in range(len(sweeps))]
    report = ScenarioReport(
        scenario="example2", sections=sections, assertions=assertions,
        tables={"sweeps": (["sweep", "cost", "cost_stderr",
                            "stationarity_residual"], sweep_rows)})
    return Example2Result(report=report, problem=problem, driver=driver,
                          grid=grid, bundle=bundle, sweeps=sweeps,
                          duality=duality)
