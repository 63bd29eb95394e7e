"""Hamiltonian and adjoint backward equation solvers.

The Hamiltonian of the control problem is

    H(t, x, u, y, zq) = ell(t, x, u) + <F(t, x, u), y> + <G(t, x) Q^(1/2)(t), zq>_HS

where ``zq`` stands for the composite Z(t) Q^(1/2)(t) of the adjoint pair.
The adjoint backward equation

    -dY = grad_x H(t, X, u, Y, Z Q^(1/2)) dt - Z dM - dN,   Y(T) = h_x(X(T))

is solved either explicitly (terminal gradient constant and the Hamiltonian
state-gradient vanishing at Z = 0, verified by probing) or by least-squares
Monte Carlo backward induction over a basis of state polynomials:

    Y_T = h_x(X_T)
    Z_k from the cross-moment identity E[Y_{k+1} (x) dM_k | X_k] = Z_k C_k,
        with C_k the step-integrated covariance; the regression target is
        centered by E-hat[Y_{k+1} | X_k], which changes nothing in the
        identity (the centering term is X_k-measurable and increments are
        conditionally mean-zero) and suppresses the variance of the
        estimator; the off-range part of Z_k is set to zero through the
        covariance pseudo-inverse
    Y_k = E-hat[Y_{k+1} | X_k] + grad_x H(t_k, X_k, u_k, Y-hat_k, Z_k Q^(1/2)) dt
        with a two-iteration Picard pass for the implicit Y-hat_k.

Each per-step projection E-hat[. | X_k] fits an intercept plus centered,
unit-variance features, keeping only singular directions above a relative
cutoff.  The cutoff matters because the paths all start at one point and
the driving noise has low rank, so for the first steps the realized states
sit on a thin manifold: polynomial features are then collinear to near
machine precision, and the unidentified directions would otherwise pick up
noise-amplified coefficients that explode when the fit is evaluated away
from the fitted cloud (as policy-improvement sweeps do).  Dropped
directions get zero coefficient, i.e. the flattest least-squares fit that
is exact on the retained directions.

The orthogonal-martingale part N is never represented pathwise; its
increments show up as the regression residual, recorded per step as a
diagnostic and flagged when they dominate the explained martingale energy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import sample_controls
from .hilbert import apply_operator, batch_hs_inner, psd_sqrt
from .martingale import step_covariances

DEFAULT_CONDITION_LIMIT = 1e12
# Relative singular-value cutoff for the per-step feature regression.
# Directions below the cutoff carry under cutoff^2 of the design energy and
# are statistically unidentifiable at desk-scale path counts.
DEFAULT_FEATURE_RCOND = 1e-3
# Warn when the unexplained martingale energy exceeds this multiple of the
# energy explained by Z dM.
N_RESIDUAL_WARN_RATIO = 0.5


class RegressionRankError(RuntimeError):
    """The regression design matrix is numerically rank-deficient."""

    def __init__(self, step, cond, limit):
        self.step = int(step)
        self.cond = float(cond)
        super().__init__(
            f"regression design at step {self.step} has condition number "
            f"{cond:.3e} above the limit {limit:.1e}; enrich the paths or "
            f"shrink the basis")


@dataclass(frozen=True)
class HamiltonianArgs:
    """Point(s) at which to evaluate the Hamiltonian.

    ``x``, ``u``, ``y`` may be single vectors or (P, dim) batches; ``zq``
    is a single operator or a (P, n, n) batch, holding Z Q^(1/2).
    """

    t: float
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    zq: np.ndarray


def _normalize_args(args):
    x = np.asarray(args.x, dtype=float)
    u = np.asarray(args.u, dtype=float)
    y = np.asarray(args.y, dtype=float)
    zq = np.asarray(args.zq, dtype=float)
    squeeze = x.ndim == 1 and u.ndim == 1 and y.ndim == 1 and zq.ndim == 2
    if x.ndim == 1:
        x = x[None, :]
    batch = x.shape[0]
    if u.ndim == 1:
        u = np.broadcast_to(u, (batch, u.shape[0]))
    if y.ndim == 1:
        y = np.broadcast_to(y, (batch, y.shape[0]))
    if zq.ndim == 2:
        zq = np.broadcast_to(zq, (batch,) + zq.shape)
    if not (u.shape[0] == y.shape[0] == zq.shape[0] == batch):
        raise ValueError("mismatched batch sizes in HamiltonianArgs")
    return args.t, x, u, y, zq, squeeze


def hamiltonian(problem, driver, args):
    """Evaluate H; returns a scalar for single-point args, else shape (P,)."""
    t, x, u, y, zq, squeeze = _normalize_args(args)
    qhalf = psd_sqrt(driver.cov_rate(t))
    g = np.asarray(problem.G(t, x), dtype=float)
    gq = g @ qhalf
    value = np.asarray(problem.ell(t, x, u), dtype=float) \
        + np.einsum("pi,pi->p", np.asarray(problem.F(t, x, u), dtype=float), y) \
        + batch_hs_inner(gq, zq)
    return float(value[0]) if squeeze else value


def grad_x_hamiltonian(problem, driver, args):
    """State gradient of H.

    grad_x H = ell_x + F_x^T y + Gamma where Gamma is assembled against the
    basis directions: <Gamma, d> = <(G_x(x)[d]) Q^(1/2)(t), zq>_HS.
    Returns a vector for single-point args, else shape (P, n).
    """
    t, x, u, y, zq, squeeze = _normalize_args(args)
    n = x.shape[1]
    qhalf = psd_sqrt(driver.cov_rate(t))
    fx = np.asarray(problem.F_x(t, x, u), dtype=float)
    if fx.ndim == 2:
        fxty = y @ fx
    else:
        fxty = np.einsum("pij,pi->pj", fx, y)
    grad = np.asarray(problem.ell_x(t, x, u), dtype=float) + fxty
    gamma = np.empty((x.shape[0], n))
    for d in range(n):
        direction = np.zeros(n)
        direction[d] = 1.0
        gxd = np.asarray(
            problem.G_x(t, x, np.broadcast_to(direction, x.shape)),
            dtype=float)
        gamma[:, d] = batch_hs_inner(gxd @ qhalf, zq)
    grad = grad + gamma
    return grad[0] if squeeze else grad


@dataclass(frozen=True)
class RegressionBasis:
    """State polynomials up to the given degree (0, 1, or 2), with constant."""

    degree: int = 2

    def __post_init__(self):
        if self.degree not in (0, 1, 2):
            raise ValueError(f"supported degrees are 0, 1, 2; "
                             f"got {self.degree}")

    def feature_count(self, dim):
        count = 1
        if self.degree >= 1:
            count += dim
        if self.degree >= 2:
            count += dim * (dim + 1) // 2
        return count

    def features(self, states):
        x = np.asarray(states, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"states must be (paths, dim), got {x.shape}")
        cols = [np.ones((x.shape[0], 1))]
        if self.degree >= 1:
            cols.append(x)
        if self.degree >= 2:
            ii, jj = np.triu_indices(x.shape[1])
            cols.append(x[:, ii] * x[:, jj])
        return np.concatenate(cols, axis=1)


@dataclass(frozen=True)
class _StepFit:
    """One backward-induction step's regression state.

    Predictions are intercept + centered/scaled features times
    coefficients; features whose sample spread vanished keep scale 1 so
    their centered column is zero and they drop out.
    """

    mu: np.ndarray       # (nb - 1,) feature means, constant column excluded
    scale: np.ndarray    # (nb - 1,) feature scales, 1.0 where degenerate
    y_mean: np.ndarray   # (n,)
    y_coef: np.ndarray   # (nb - 1, n)
    w_mean: np.ndarray   # (n * n,)
    w_coef: np.ndarray   # (nb - 1, n * n)


@dataclass
class AdjointSolution:
    """Adjoint pair along a trajectory batch.

    ``Y`` has shape (paths, steps + 1, n); the explicit solver stores a
    single broadcastable row (1, steps + 1, n).  Z is exposed through
    :meth:`z_at` (per-step evaluation) rather than one dense array so the
    desk-scale memory stays bounded; ``n_residual_energy[k]`` records the
    mean squared unexplained martingale increment at step k, and
    ``n_is_zero`` marks solutions whose orthogonal part vanishes by
    construction.
    """

    grid: object
    Y: np.ndarray
    method: str
    n_residual_energy: np.ndarray
    explained_energy: np.ndarray
    n_is_zero: bool
    basis: RegressionBasis | None = None
    trajectories: object = field(default=None, repr=False)
    _problem: object = field(default=None, repr=False)
    _driver: object = field(default=None, repr=False)
    _policy: object = field(default=None, repr=False)
    _fits: list = field(default=None, repr=False)
    _c_pinv: np.ndarray = field(default=None, repr=False)
    _qhalf: np.ndarray = field(default=None, repr=False)
    picard_iters: int = 2

    @property
    def steps(self):
        return self.Y.shape[1] - 1

    @property
    def state_dim(self):
        return self.Y.shape[2]

    def y_at(self, k):
        """Y at grid index k, shape (paths, n) (or (1, n) when explicit)."""
        return self.Y[:, k, :]

    def _centered_features(self, k, states):
        fit = self._fits[k]
        phi = self.basis.features(np.asarray(states, dtype=float))
        return (phi[:, 1:] - fit.mu) / fit.scale

    def z_at(self, k, states=None):
        """Z at grid index k, shape matching the requested states.

        For the regression solution Z_k is a fitted function of the state;
        by default it is evaluated along the solution's own trajectories.
        """
        if self.method == "explicit":
            count = 1 if states is None else np.asarray(states).shape[0]
            return np.zeros((count, self.state_dim, self.state_dim))
        if k >= self.steps:
            count = self.Y.shape[0] if states is None \
                else np.asarray(states).shape[0]
            return np.zeros((count, self.state_dim, self.state_dim))
        if states is None:
            states = self.trajectories.states[:, k, :]
        fit = self._fits[k]
        xc = self._centered_features(k, states)
        w = (fit.w_mean + xc @ fit.w_coef).reshape(
            xc.shape[0], self.state_dim, self.state_dim)
        return w @ self._c_pinv[k]

    def y_eval(self, k, states):
        """Evaluate the fitted Y_k at arbitrary states (regression method).

        Reproduces the backward-induction formula: projection coefficients
        plus the Hamiltonian-gradient correction with the same Picard pass.
        """
        states = np.asarray(states, dtype=float)
        if self.method == "explicit":
            return np.broadcast_to(self.Y[0, k, :],
                                   (states.shape[0], self.state_dim))
        if k >= self.steps:
            return np.asarray(self._problem.h_x(states), dtype=float)
        t = self.grid.times[k]
        fit = self._fits[k]
        xc = self._centered_features(k, states)
        yhat0 = fit.y_mean + xc @ fit.y_coef
        z = (fit.w_mean + xc @ fit.w_coef).reshape(
            states.shape[0], self.state_dim,
            self.state_dim) @ self._c_pinv[k]
        zq = z @ self._qhalf[k]
        u = self._policy.controls_at(k, t, states)
        y = yhat0
        for _ in range(self.picard_iters):
            grad = grad_x_hamiltonian(
                self._problem, self._driver,
                HamiltonianArgs(t=t, x=states, u=u, y=y, zq=zq))
            y = yhat0 + grad * self.grid.dt
        return y

    @property
    def n_residual_ratio(self):
        resid = float(np.sum(self.n_residual_energy))
        # dead-band: residual energy at the roundoff scale of the terminal
        # gradient is a zero, not a diagnostic (Z = 0 solutions would
        # otherwise report a ratio of pure noise)
        yk = self.Y[:, -1, :]
        y_scale = 1.0 + float(np.mean(np.einsum("pi,pi->p", yk, yk)))
        floor = 1e-24 * y_scale * max(1, self.steps)
        if resid <= floor:
            return 0.0
        explained = float(np.sum(self.explained_energy))
        if explained <= 0.0:
            return float("inf")
        return resid / explained


def solve_adjoint_explicit(problem, driver, grid, probe_points=16,
                           probe_seed=2024, probe_scale=1.0, tol=1e-9):
    """Closed-form adjoint when probing confirms it applies.

    Preconditions, each checked by random probing: the terminal-cost
    gradient is state-independent, and grad_x H vanishes whenever the Z
    argument is zero.  Then Y is the constant terminal gradient, Z = 0 and
    N = 0 solve the backward equation exactly.
    """
    n = problem.space.state_dim
    rng = np.random.default_rng(np.random.SeedSequence(probe_seed))
    states = probe_scale * rng.standard_normal((probe_points, n))
    hx = np.asarray(problem.h_x(states), dtype=float)
    dev = float(np.max(np.abs(hx - hx[0])))
    scale = 1.0 + float(np.max(np.abs(hx)))
    if dev > tol * scale:
        raise ValueError(
            f"terminal cost gradient varies with the state (max deviation "
            f"{dev:.3e}); the explicit adjoint solution does not apply")
    y0 = hx[0].copy()
    controls = sample_controls(problem.control_set, probe_points, rng)
    zq0 = np.zeros((n, n))
    for t in np.linspace(0.0, grid.horizon, 5):
        grad = grad_x_hamiltonian(
            problem, driver,
            HamiltonianArgs(t=float(t), x=states, u=controls, y=y0, zq=zq0))
        if float(np.max(np.abs(grad))) > tol * (1.0 + float(np.max(np.abs(y0)))):
            raise ValueError(
                "the Hamiltonian state-gradient does not vanish at Z = 0; "
                "the explicit adjoint solution does not apply")
    y_path = np.broadcast_to(y0, (1, grid.steps + 1, n)).copy()
    zeros = np.zeros(grid.steps)
    return AdjointSolution(grid=grid, Y=y_path, method="explicit",
                           n_residual_energy=zeros.copy(),
                           explained_energy=zeros.copy(), n_is_zero=True,
                           _problem=problem, _driver=driver)


def solve_adjoint_lsmc(problem, driver, trajectories, policy=None, basis=None,
                       cond_limit=DEFAULT_CONDITION_LIMIT,
                       feature_rcond=DEFAULT_FEATURE_RCOND,
                       warn_ratio=N_RESIDUAL_WARN_RATIO, picard_iters=2):
    """Least-squares Monte Carlo backward induction for the adjoint pair.

    Per-step conditional expectations are least-squares fits of an
    intercept plus centered, unit-variance basis features, restricted to
    singular directions above ``feature_rcond`` relative to the largest
    (see the module docstring for why the early steps make this
    necessary).  A design whose retained directions are still conditioned
    worse than ``cond_limit`` raises :class:`RegressionRankError`.
    """
    pol = policy if policy is not None else trajectories.policy
    basis = basis if basis is not None else RegressionBasis(2)
    grid = trajectories.grid
    bundle = trajectories.bundle
    x = trajectories.states
    paths, _, n = x.shape
    nb = basis.feature_count(n)
    if nb * 10 >= paths:
        raise ValueError(
            f"basis has {nb} features for {paths} paths; need feature count "
            f"< paths / 10 for a stable regression")
    times = grid.times
    dt = grid.dt
    eps = np.finfo(float).eps

    qhalf = np.stack([psd_sqrt(driver.cov_rate(t)) for t in times[:-1]])
    c_steps = step_covariances(driver, grid)
    c_pinv = np.stack([np.linalg.pinv(c_steps[k], rcond=1e-12,
                                      hermitian=True)
                       for k in range(grid.steps)])

    y = np.empty((paths, grid.steps + 1, n))
    y[:, grid.steps, :] = np.asarray(problem.h_x(x[:, grid.steps, :]),
                                     dtype=float)
    fits = [None] * grid.steps
    n_energy = np.zeros(grid.steps)
    explained = np.zeros(grid.steps)

    for k in range(grid.steps - 1, -1, -1):
        phi = basis.features(x[:, k, :])
        xfeat = phi[:, 1:]
        mu = xfeat.mean(axis=0) if xfeat.shape[1] else np.zeros(0)
        sd = xfeat.std(axis=0) if xfeat.shape[1] else np.zeros(0)
        scale = np.where(sd > 0.0, sd, 1.0)
        xc = (xfeat - mu) / scale

        u_k = s_k = vt_k = None
        if xc.shape[1]:
            u_svd, s_svd, vt_svd = np.linalg.svd(xc, full_matrices=False)
            if s_svd.size and s_svd[0] > 0.0:
                # never solve along directions indistinguishable from roundoff
                machine = max(xc.shape) * eps * s_svd[0]
                keep = s_svd > max(feature_rcond * s_svd[0], machine)
                if np.any(keep):
                    u_k = u_svd[:, keep]
                    s_k = s_svd[keep]
                    vt_k = vt_svd[keep]
                    # condition number of the design actually solved
                    cond = float(s_k[0] / s_k[-1])
                    if cond > cond_limit:
                        raise RegressionRankError(step=k, cond=cond,
                                                  limit=cond_limit)

        def fit(target):
            """Intercept plus retained-direction least squares."""
            t_mean = target.mean(axis=0)
            if u_k is None:
                return t_mean, np.zeros((xc.shape[1], target.shape[1]))
            coef = vt_k.T @ ((u_k.T @ (target - t_mean)) / s_k[:, None])
            return t_mean, coef

        y_mean, y_coef = fit(y[:, k + 1, :])
        yhat0 = y_mean + xc @ y_coef
        centered = y[:, k + 1, :] - yhat0
        dm = bundle.increments[:, k, :]
        target = (centered[:, :, None] * dm[:, None, :]).reshape(paths, n * n)
        w_mean, w_coef = fit(target)
        w = (w_mean + xc @ w_coef).reshape(paths, n, n)
        z = w @ c_pinv[k]
        zq = z @ qhalf[k]

        uk = pol.controls_at(k, times[k], x[:, k, :])
        yk = yhat0
        for _ in range(picard_iters):
            grad = grad_x_hamiltonian(
                problem, driver,
                HamiltonianArgs(t=times[k], x=x[:, k, :], u=uk, y=yk, zq=zq))
            yk = yhat0 + grad * dt
        y[:, k, :] = yk

        zdm = apply_operator(z, dm)
        resid = centered - zdm
        n_energy[k] = float(np.mean(np.einsum("pi,pi->p", resid, resid)))
        explained[k] = float(np.mean(np.einsum("pi,pi->p", zdm, zdm)))
        fits[k] = _StepFit(mu=mu, scale=scale, y_mean=y_mean, y_coef=y_coef,
                           w_mean=w_mean, w_coef=w_coef)

    solution = AdjointSolution(
        grid=grid, Y=y, method="lsmc", n_residual_energy=n_energy,
        explained_energy=explained, n_is_zero=False, basis=basis,
        trajectories=trajectories, _problem=problem, _driver=driver,
        _policy=pol, _fits=fits, _c_pinv=c_pinv, _qhalf=qhalf,
        picard_iters=picard_iters)
    ratio = solution.n_residual_ratio
    if np.isfinite(ratio) and ratio > warn_ratio:
        warnings.warn(
            f"unexplained martingale residual energy is {ratio:.2f} of the "
            f"explained energy; the basis or path count may be too small",
            RuntimeWarning, stacklevel=2)
    return solution


@dataclass(frozen=True)
class DualityReport:
    """Both sides of the adjoint/first-variation duality identity."""

    lhs: float
    rhs: float
    difference: float
    se_lhs: float
    se_rhs: float
    paths: int

    def within(self, k=3.0):
        return abs(self.difference) <= k * (self.se_lhs + self.se_rhs)


def duality_check(problem, driver, optimal, adjoint, spec, p_paths):
    """Monte Carlo check of the duality identity

    E<Y(T), p(T)> = -E int_{t0}^{T} <ell_x(t, X, u), p> dt
                    + E<Y(t0), F(t0, X(t0), v) - F(t0, X(t0), u(t0))>

    along one coupled noise bundle.  Reports both sides with standard
    errors; the caller decides the acceptance multiple.
    """
    if optimal.bundle.identity() != p_paths.bundle.identity():
        raise ValueError("duality check requires the optimal and variational "
                         "runs to share one noise bundle")
    grid = optimal.grid
    times = grid.times
    dt = grid.dt
    k0, _ = spec.window(grid)
    paths = optimal.paths

    y_term = adjoint.y_at(grid.steps)
    lhs_pp = np.einsum("pi,pi->p",
                       np.broadcast_to(y_term, (paths, y_term.shape[1])),
                       p_paths.states[:, grid.steps, :])

    x0 = optimal.states[:, k0, :]
    u0 = optimal.policy.controls_at(k0, times[k0], x0)
    v = np.broadcast_to(spec.v, u0.shape)
    delta_f = np.asarray(problem.F(times[k0], x0, v), dtype=float) \
        - np.asarray(problem.F(times[k0], x0, u0), dtype=float)
    y0 = adjoint.y_at(k0)
    rhs_pp = np.einsum("pi,pi->p",
                       np.broadcast_to(y0, (paths, y0.shape[1])), delta_f)
    for k in range(k0, grid.steps):
        xk = optimal.states[:, k, :]
        uk = optimal.policy.controls_at(k, times[k], xk)
        grad = np.asarray(problem.ell_x(times[k], xk, uk), dtype=float)
        rhs_pp -= np.einsum("pi,pi->p", grad,
                            p_paths.states[:, k, :]) * dt

    lhs = float(np.mean(lhs_pp))
    rhs = float(np.mean(rhs_pp))
    se_lhs = float(np.std(lhs_pp, ddof=1) / np.sqrt(paths)) if paths > 1 \
        else float("inf")
    se_rhs = float(np.std(rhs_pp, ddof=1) / np.sqrt(paths)) if paths > 1 \
        else float("inf")
    return DualityReport(lhs=lhs, rhs=rhs, difference=lhs - rhs,
                         se_lhs=se_lhs, se_rhs=se_rhs, paths=paths)
