"""Experiment harness: config parsing, scenario dispatch, artifact emission.

Configs are flat ``key = value`` sections (INI style).  Every run emits a
manifest, a structured-text report, and CSV tables into the output
directory; the exit status encodes the outcome (0 pass, 1 assertion
failure, 2 config error, 3 numerical failure).  Given the same config and
seed, the numeric outputs are byte-identical regardless of thread count.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from ._parallel import get_threads, set_threads
from .adjoint import RegressionRankError, solve_adjoint_explicit
from .dynamics import (BlowUpError, OpenLoopPolicy, SpikeSpec,
                       finite_diff_check, integrate_forward,
                       integrate_variational, sample_controls)
from .martingale import PathGrid, sample_increments, verify_isometry
from .pmp import (Assertion, CandidatePair, Example1Config, Example2Config,
                  ScenarioReport, build_example1_problem,
                  build_example2_problem, gateaux_check, necessary_check,
                  rate_experiments, run_example1, run_example2,
                  sufficient_check)

TOOL_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SCENARIOS = ("example1", "example2", "rates", "gateaux", "pmp-check",
             "sufficiency", "isometry", "derivative-check")

PACKAGED_PROBLEMS = ("example1", "example1-tanh", "example2")


class ConfigError(Exception):
    """Raised with the complete list of validation problems, not just one."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n"
                         + "\n".join(f"  - {e}" for e in self.errors))


@dataclasses.dataclass
class ExperimentConfig:
    """A fully validated run description with every default filled in."""

    scenario: str
    run: dict
    space: dict
    options: dict
    source: str = ""

    def resolved(self):
        """Canonical dict of everything that determines the numbers."""
        run = {k: v for k, v in self.run.items()
               if k not in ("threads", "output_dir")}
        return {"scenario": self.scenario, "run": run, "space": self.space,
                "options": self.options}

    def config_hash(self):
        text = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Value parsers.  Each raises ValueError with a human-readable requirement.
# ---------------------------------------------------------------------------

def _parse_int(text, minimum=None, choices=None):
    try:
        value = int(text)
    except ValueError:
        raise ValueError("must be an integer") from None
    if minimum is not None and value < minimum:
        raise ValueError(f"must be an integer >= {minimum}")
    if choices is not None and value not in choices:
        raise ValueError(f"must be one of {sorted(choices)}")
    return value


def _parse_float(text, positive=False, nonnegative=False):
    try:
        value = float(text)
    except ValueError:
        raise ValueError("must be a number") from None
    if not np.isfinite(value):
        raise ValueError("must be finite")
    if positive and value <= 0.0:
        raise ValueError("must be > 0")
    if nonnegative and value < 0.0:
        raise ValueError("must be >= 0")
    return value


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _parse_bool(text):
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ValueError("must be a boolean (true/false)") from None


def _parse_floats(text, length=None, positive=False):
    tokens = [tok.strip() for tok in text.split(",") if tok.strip()]
    if not tokens:
        raise ValueError("must be a comma-separated list of numbers")
    values = tuple(_parse_float(tok, positive=positive) for tok in tokens)
    if length is not None and len(values) != length:
        raise ValueError(f"must list exactly {length} numbers")
    return values


def _parse_enum(text, choices):
    value = text.strip()
    if value not in choices:
        raise ValueError("must be one of " + ", ".join(choices))
    return value


def _take(raw, key, where, errors, conv, default=None, required=False):
    """Pop ``key`` from the raw section and convert it, collecting errors."""
    if key not in raw:
        if required:
            errors.append(f"[{where}] missing required key '{key}'")
        return default
    text = raw.pop(key).strip()
    try:
        return conv(text)
    except ValueError as exc:
        errors.append(f"[{where}] {key}: {exc} (got {text!r})")
        return default


def _reject_leftovers(raw, where, errors):
    for key in raw:
        errors.append(f"[{where}] unknown key '{key}'")


_RUN_DEFAULTS = {
    "example1": dict(seed=12022, steps=400, paths=20000, horizon=1.0),
    "example2": dict(seed=30303, steps=100, paths=4000, horizon=1.0),
    "rates": dict(seed=2718, steps=400, paths=4000, horizon=1.0),
    "gateaux": dict(seed=31415, steps=400, paths=20000, horizon=1.0),
    "pmp-check": dict(seed=12022, steps=400, paths=2000, horizon=1.0),
    "sufficiency": dict(seed=12022, steps=200, paths=2000, horizon=1.0),
    "isometry": dict(seed=7071, steps=400, paths=20000, horizon=1.0),
    "derivative-check": dict(seed=99, steps=100, paths=2, horizon=1.0),
}

# The packaged scenarios fix their operator sizes; [space] may restate them
# but cannot change them.
_SPACE_BY_SCENARIO = {"example2": (2, 2)}
_DEFAULT_SPACE = (4, 2)


def _parse_run_section(raw, scenario, errors):
    defaults = _RUN_DEFAULTS[scenario]
    run = {}
    run["seed"] = _take(raw, "seed", "run", errors,
                        lambda s: _parse_int(s, minimum=0),
                        default=defaults["seed"])
    run["steps"] = _take(raw, "steps", "run", errors,
                         lambda s: _parse_int(s, minimum=1),
                         default=defaults["steps"])
    run["paths"] = _take(raw, "paths", "run", errors,
                         lambda s: _parse_int(s, minimum=2),
                         default=defaults["paths"])
    run["horizon"] = _take(raw, "horizon", "run", errors,
                           lambda s: _parse_float(s, positive=True),
                           default=defaults["horizon"])
    run["threads"] = _take(raw, "threads", "run", errors,
                           lambda s: _parse_int(s, minimum=1), default=None)
    run["dump_trajectories"] = _take(raw, "dump_trajectories", "run", errors,
                                     lambda s: _parse_int(s, minimum=0),
                                     default=0)
    run["output_dir"] = raw.pop("output_dir", None)
    _reject_leftovers(raw, "run", errors)
    return run


def _parse_space_section(raw, scenario, errors):
    want_n, want_m = _SPACE_BY_SCENARIO.get(scenario, _DEFAULT_SPACE)
    n = _take(raw, "state_dim", "space", errors,
              lambda s: _parse_int(s, minimum=1), default=want_n)
    m = _take(raw, "control_dim", "space", errors,
              lambda s: _parse_int(s, minimum=1), default=want_m)
    if n is not None and n != want_n:
        errors.append(f"[space] state_dim must be {want_n} for scenario "
                      f"{scenario} (the packaged operators have that size)")
    if m is not None and m != want_m:
        errors.append(f"[space] control_dim must be {want_m} for scenario "
                      f"{scenario} (the packaged operators have that size)")
    _reject_leftovers(raw, "space", errors)
    return {"state_dim": want_n, "control_dim": want_m}


def _check_spike_window(run, t0, eps, where, errors, label="spike"):
    """Validate a spike window against the run grid, collecting errors."""
    if t0 is None or eps is None:
        return
    try:
        grid = PathGrid(horizon=run["horizon"], steps=run["steps"])
        spec = SpikeSpec(t0=t0, eps=eps, v=np.zeros(1))
        spec.window(grid)
    except ValueError as exc:
        errors.append(f"[{where}] {label} window (t0={t0}, eps={eps}) "
                      f"is not grid-aligned: {exc}")


def _parse_options(scenario, raw, run, space, errors):
    m = space["control_dim"]
    n = space["state_dim"]
    where = scenario
    opts = {}

    if scenario == "example1":
        opts["spike_count"] = _take(raw, "spike_count", where, errors,
                                    lambda s: _parse_int(s, minimum=1),
                                    default=20)
        opts["control_box_radius"] = _take(
            raw, "control_box_radius", where, errors,
            lambda s: _parse_float(s, positive=True), default=2.0)
        opts["probe_points_per_dim"] = _take(
            raw, "probe_points_per_dim", where, errors,
            lambda s: _parse_int(s, minimum=2), default=11)
        opts["sample_times"] = _take(raw, "sample_times", where, errors,
                                     lambda s: _parse_int(s, minimum=1),
                                     default=20)
        opts["sample_paths"] = _take(raw, "sample_paths", where, errors,
                                     lambda s: _parse_int(s, minimum=1),
                                     default=100)
        opts["convexity_pairs"] = _take(raw, "convexity_pairs", where, errors,
                                        lambda s: _parse_int(s, minimum=1),
                                        default=1000)
        opts["alpha0"] = _take(raw, "alpha0", where, errors,
                               lambda s: _parse_float(s, positive=True),
                               default=1.0)
        opts["alpha_slope"] = _take(raw, "alpha_slope", where, errors,
                                    lambda s: _parse_float(s,
                                                           nonnegative=True),
                                    default=0.5)
        opts["schedule"] = _take(raw, "schedule", where, errors,
                                 lambda s: _parse_floats(s, length=m))
        opts["feedback"] = _take(raw, "feedback", where, errors,
                                 lambda s: _parse_enum(s, ("stationary",
                                                           "zero")))
    elif scenario == "example2":
        opts["basis_degree"] = _take(raw, "basis_degree", where, errors,
                                     lambda s: _parse_int(s,
                                                          choices={0, 1, 2}),
                                     default=2)
        opts["sweeps"] = _take(raw, "sweeps", where, errors,
                               lambda s: _parse_int(s, minimum=0), default=3)
        opts["run_duality"] = _take(raw, "run_duality", where, errors,
                                    _parse_bool, default=True)
        opts["duality_t0"] = _take(raw, "duality_t0", where, errors,
                                   lambda s: _parse_float(s,
                                                          nonnegative=True),
                                   default=0.25)
        opts["duality_eps"] = _take(raw, "duality_eps", where, errors,
                                    lambda s: _parse_float(s, positive=True),
                                    default=0.1)
        opts["duality_v"] = _take(raw, "duality_v", where, errors,
                                  lambda s: _parse_floats(s, length=m),
                                  default=(0.5, -0.25))
        opts["gamma"] = _take(raw, "gamma", where, errors,
                              lambda s: _parse_floats(s, length=n),
                              default=(0.2, 0.0))
        opts["schedule"] = _take(raw, "schedule", where, errors,
                                 lambda s: _parse_floats(s, length=m))
        opts["feedback"] = _take(raw, "feedback", where, errors,
                                 lambda s: _parse_enum(s, ("zero",)))
        if opts["run_duality"]:
            _check_spike_window(run, opts["duality_t0"], opts["duality_eps"],
                                where, errors, label="duality spike")
    elif scenario == "rates":
        opts["t0"] = _take(raw, "t0", where, errors,
                           lambda s: _parse_float(s, nonnegative=True),
                           default=0.25)
        opts["v"] = _take(raw, "v", where, errors,
                          lambda s: _parse_floats(s, length=m),
                          default=(0.65, 0.45))
        opts["eps_ladder"] = _take(raw, "eps_ladder", where, errors,
                                   lambda s: _parse_floats(s, positive=True),
                                   default=(0.2, 0.1, 0.05, 0.025))
        opts["drift_gain"] = _take(raw, "drift_gain", where, errors,
                                   lambda s: _parse_float(s, nonnegative=True),
                                   default=0.0)
        opts["inject_fault"] = _take(raw, "inject_fault", where, errors,
                                     _parse_bool, default=False)
        ladder = opts["eps_ladder"]
        if ladder is not None:
            ordered = tuple(sorted(ladder, reverse=True))
            if len(set(ladder)) != len(ladder):
                errors.append(f"[{where}] eps_ladder entries must be "
                              f"distinct")
            opts["eps_ladder"] = ordered
            for eps in ordered:
                _check_spike_window(run, opts["t0"], eps, where, errors)
    elif scenario == "gateaux":
        opts["t0"] = _take(raw, "t0", where, errors,
                           lambda s: _parse_float(s, nonnegative=True),
                           default=0.3)
        opts["v"] = _take(raw, "v", where, errors,
                          lambda s: _parse_floats(s, length=m),
                          default=(0.65, 0.45))
        opts["eps_list"] = _take(raw, "eps_list", where, errors,
                                 lambda s: _parse_floats(s, positive=True),
                                 default=(0.05, 0.025))
        opts["bias_fraction"] = _take(raw, "bias_fraction", where, errors,
                                      lambda s: _parse_float(s,
                                                             positive=True),
                                      default=0.1)
        opts["drift_gain"] = _take(raw, "drift_gain", where, errors,
                                   lambda s: _parse_float(s, nonnegative=True),
                                   default=0.0)
        opts["inject_fault"] = _take(raw, "inject_fault", where, errors,
                                     _parse_bool, default=False)
        if opts["eps_list"] is not None:
            for eps in opts["eps_list"]:
                _check_spike_window(run, opts["t0"], eps, where, errors)
    elif scenario == "pmp-check":
        opts["sample_times"] = _take(raw, "sample_times", where, errors,
                                     lambda s: _parse_int(s, minimum=1),
                                     default=20)
        opts["sample_paths"] = _take(raw, "sample_paths", where, errors,
                                     lambda s: _parse_int(s, minimum=1),
                                     default=100)
        opts["points_per_dim"] = _take(raw, "points_per_dim", where, errors,
                                       lambda s: _parse_int(s, minimum=2),
                                       default=11)
        opts["schedule"] = _take(raw, "schedule", where, errors,
                                 lambda s: _parse_floats(s, length=m))
    elif scenario == "sufficiency":
        opts["pairs"] = _take(raw, "pairs", where, errors,
                              lambda s: _parse_int(s, minimum=1),
                              default=1000)
        opts["sample_times"] = _take(raw, "sample_times", where, errors,
                                     lambda s: _parse_int(s, minimum=1),
                                     default=8)
        opts["inject_fault"] = _take(raw, "inject_fault", where, errors,
                                     _parse_bool, default=False)
    elif scenario == "isometry":
        pass
    elif scenario == "derivative-check":
        opts["problem"] = _take(raw, "problem", where, errors,
                                lambda s: _parse_enum(
                                    s, PACKAGED_PROBLEMS + ("all",)),
                                default="all")
        opts["probes"] = _take(raw, "probes", where, errors,
                               lambda s: _parse_int(s, minimum=1), default=25)
        opts["rel_step"] = _take(raw, "rel_step", where, errors,
                                 lambda s: _parse_float(s, positive=True),
                                 default=1e-5)
        opts["tol"] = _take(raw, "tol", where, errors,
                            lambda s: _parse_float(s, positive=True),
                            default=1e-4)
        opts["inject_fault"] = _take(raw, "inject_fault", where, errors,
                                     _parse_bool, default=False)

    if opts.get("schedule") is not None and opts.get("feedback") is not None:
        errors.append(f"[{where}] specify either schedule or feedback, "
                      f"not both (ambiguous policy)")
    _reject_leftovers(raw, where, errors)
    return opts


def parse_config(path):
    """Read and validate a config file; raise ConfigError with every problem."""
    cp = configparser.ConfigParser(interpolation=None,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config file: {exc}"]) from None
    except configparser.Error as exc:
        raise ConfigError([f"malformed config file: {exc}"]) from None

    errors = []
    sections = {name: dict(cp.items(name)) for name in cp.sections()}
    run_raw = sections.pop("run", None)
    if run_raw is None:
        raise ConfigError(["missing [run] section (must name the scenario)"])
    scenario = run_raw.pop("scenario", "").strip()
    if scenario not in SCENARIOS:
        raise ConfigError(
            [f"[run] scenario must be one of {', '.join(SCENARIOS)} "
             f"(got {scenario!r})"])

    run = _parse_run_section(run_raw, scenario, errors)
    space_raw = sections.pop("space", {})
    space = _parse_space_section(space_raw, scenario, errors)
    opts_raw = sections.pop(scenario, {})
    options = _parse_options(scenario, opts_raw, run, space, errors)
    for name in sections:
        errors.append(f"unknown section [{name}]")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(scenario=scenario, run=run, space=space,
                            options=options, source=str(path))


# ---------------------------------------------------------------------------
# Scenario runners.  Each returns (ScenarioReport, tables) where tables maps
# file stem -> (header, rows).
# ---------------------------------------------------------------------------

def _margins_tables(margin_report):
    """Full per-path margins table plus the probe-index key."""
    rows = []
    for i, t in enumerate(margin_report.times):
        for j, path in enumerate(margin_report.path_indices):
            for k in range(margin_report.probes.shape[0]):
                rows.append((float(t), int(path), int(k),
                             float(margin_report.margins[i, j, k])))
    probe_rows = [(int(k), *[float(x) for x in v])
                  for k, v in enumerate(margin_report.probes)]
    probe_header = ["v_index"] + [f"v{j}"
                                  for j in range(margin_report.probes.shape[1])]
    return {"margins": (["t", "path", "v_index", "delta_h"], rows),
            "probes": (probe_header, probe_rows)}


def _trajectory_table(trajectories, count):
    count = min(count, trajectories.paths)
    grid = trajectories.grid
    n = trajectories.states.shape[2]
    rows = []
    for p in range(count):
        for k in range(grid.steps + 1):
            rows.append((p, k, float(grid.times[k]),
                         *[float(x) for x in trajectories.states[p, k, :]]))
    header = ["path", "step", "t"] + [f"x{i}" for i in range(n)]
    return header, rows


def _example1_cfg(config):
    opts = config.options
    return Example1Config(
        steps=config.run["steps"], paths=config.run["paths"],
        seed=config.run["seed"], horizon=config.run["horizon"],
        spike_count=opts["spike_count"],
        control_box_radius=opts["control_box_radius"],
        probe_points_per_dim=opts["probe_points_per_dim"],
        sample_times=opts["sample_times"], sample_paths=opts["sample_paths"],
        convexity_pairs=opts["convexity_pairs"], alpha0=opts["alpha0"],
        alpha_slope=opts["alpha_slope"], schedule=opts["schedule"],
        feedback=opts["feedback"])


def _run_example1(config):
    result = run_example1(_example1_cfg(config), threads=get_threads())
    tables = dict(result.report.tables)
    summary = tables.pop("hamiltonian_margins", None)
    if summary is not None:
        tables["margins_summary"] = summary
    tables.update(_margins_tables(result.margin_report))
    dump = config.run["dump_trajectories"]
    if dump > 0:
        tables["trajectories"] = _trajectory_table(result.trajectories, dump)
    return result.report, tables


def _run_example2(config):
    opts = config.options
    cfg = Example2Config(
        steps=config.run["steps"], paths=config.run["paths"],
        seed=config.run["seed"], horizon=config.run["horizon"],
        basis_degree=opts["basis_degree"], sweeps=opts["sweeps"],
        run_duality=opts["run_duality"], duality_t0=opts["duality_t0"],
        duality_eps=opts["duality_eps"], duality_v=opts["duality_v"],
        gamma=opts["gamma"], schedule=opts["schedule"],
        feedback=opts["feedback"])
    result = run_example2(cfg, threads=get_threads())
    tables = dict(result.report.tables)
    dump = config.run["dump_trajectories"]
    if dump > 0:
        tables["trajectories"] = _trajectory_table(
            result.sweeps[-1].trajectories, dump)
    return result.report, tables


def _stationary_candidate(config, drift_gain, with_adjoint=True):
    """Scenario-1 problem driven by the stationary open-loop control."""
    cfg = Example1Config(
        steps=config.run["steps"], paths=config.run["paths"],
        seed=config.run["seed"], horizon=config.run["horizon"],
        drift_gain=drift_gain)
    problem, driver, grid, u_star = build_example1_problem(cfg)
    bundle = sample_increments(driver, grid, cfg.paths, cfg.seed,
                               threads=get_threads())
    schedule = config.options.get("schedule")
    if schedule is not None:
        policy = OpenLoopPolicy.constant(np.asarray(schedule, dtype=float),
                                         grid.steps)
    else:
        policy = OpenLoopPolicy.constant(u_star, grid.steps)
    trajectories = integrate_forward(problem, policy, bundle,
                                     np.asarray(cfg.x0, dtype=float))
    adjoint = None
    if with_adjoint:
        adjoint = solve_adjoint_explicit(
            problem, driver, grid,
            probe_scale=max(1.0, float(np.max(np.abs(cfg.x0)))))
    candidate = CandidatePair(policy=policy, trajectories=trajectories,
                              adjoint=adjoint)
    return problem, driver, grid, u_star, candidate


def _run_rates(config):
    opts = config.options
    problem, driver, grid, u_star, candidate = _stationary_candidate(
        config, opts["drift_gain"], with_adjoint=False)
    v = np.asarray(opts["v"], dtype=float)
    p_paths = None
    if opts["inject_fault"]:
        spec_max = SpikeSpec(t0=opts["t0"], eps=max(opts["eps_ladder"]), v=v)
        p_true = integrate_variational(problem, candidate.trajectories,
                                       candidate.trajectories.bundle,
                                       spec_max)
        p_paths = dataclasses.replace(p_true, states=2.0 * p_true.states)
    report = rate_experiments(problem, candidate, opts["t0"], v,
                              eps_ladder=opts["eps_ladder"], p_paths=p_paths)
    assertions = [
        Assertion(name="sup_gap_slope", passed=report.slope_ok,
                  detail=f"log-log slope {report.slope:.3f} (need >= 1.5)"),
        Assertion(name="remainder_vanishes",
                  passed=report.xi_decreasing and report.xi_final_ok,
                  detail=f"E|xi(T)|^2 ladder "
                         f"{np.array2string(report.exi, precision=6)}"),
    ]
    sections = {
        "rates": {
            "eps_ladder": list(report.eps),
            "slope": report.slope,
            "xi_initial": report.exi[0],
            "xi_final": report.exi[-1],
            "fault_injected": opts["inject_fault"],
        },
    }
    rows = [(float(report.eps[i]), float(report.esup[i]),
             float(report.esup_se[i]), float(report.exi[i]),
             float(report.exi_se[i])) for i in range(report.eps.size)]
    tables = {"rates": (["eps", "e_sup_sq", "e_sup_sq_se", "e_xi_sq",
                         "e_xi_sq_se"], rows)}
    scen = ScenarioReport(scenario="rates", sections=sections,
                          assertions=assertions, tables=tables)
    return scen, tables


def _run_gateaux(config):
    opts = config.options
    problem, driver, grid, u_star, candidate = _stationary_candidate(
        config, opts["drift_gain"], with_adjoint=False)
    v = np.asarray(opts["v"], dtype=float)
    eps_list = tuple(sorted(opts["eps_list"], reverse=True))
    spec = SpikeSpec(t0=opts["t0"], eps=eps_list[0], v=v)
    p_paths = None
    if opts["inject_fault"]:
        p_true = integrate_variational(problem, candidate.trajectories,
                                       candidate.trajectories.bundle, spec)
        p_paths = dataclasses.replace(p_true, states=2.0 * p_true.states)
    report = gateaux_check(problem, candidate, spec, eps_list=eps_list,
                           bias_fraction=opts["bias_fraction"],
                           p_paths=p_paths)
    assertions = [Assertion(
        name=f"quotient_matches_eps_{entry.eps:g}", passed=entry.agree,
        detail=f"fd {entry.fd_quotient:.6f} vs adjoint "
               f"{report.adjoint_value:.6f}, |diff| "
               f"{abs(entry.mean_diff):.2e} vs tol {entry.tol:.2e}")
        for entry in report.entries]
    sections = {
        "gateaux": {
            "adjoint_value": report.adjoint_value,
            "adjoint_se": report.se_adjoint,
            "t0": opts["t0"],
            "v": list(opts["v"]),
            "drift_gain": opts["drift_gain"],
            "fault_injected": opts["inject_fault"],
        },
    }
    rows = [(e.eps, e.fd_quotient, e.se_fd, e.mean_diff, e.se_diff, e.tol,
             int(e.agree)) for e in report.entries]
    tables = {"gateaux": (["eps", "fd_quotient", "fd_se", "mean_diff",
                           "diff_se", "tol", "agree"], rows)}
    scen = ScenarioReport(scenario="gateaux", sections=sections,
                          assertions=assertions, tables=tables)
    return scen, tables


def _run_pmp_check(config):
    opts = config.options
    problem, driver, grid, u_star, candidate = _stationary_candidate(
        config, 0.0, with_adjoint=True)
    margin_report = necessary_check(
        problem, driver, candidate, sample_times=opts["sample_times"],
        sample_paths=opts["sample_paths"],
        points_per_dim=opts["points_per_dim"])
    assertions = [Assertion(
        name="hamiltonian_minimum", passed=margin_report.passed,
        detail=f"min margin {margin_report.min_margin:.3e} vs tol "
               f"{margin_report.tol:.1e}; witness t={margin_report.witness[0]:g}"
               f" v={np.array2string(margin_report.witness[2], precision=4)}")]
    sections = {
        "margins": {
            "min_margin": margin_report.min_margin,
            "frac_negative": margin_report.frac_negative,
            "tol": margin_report.tol,
            "stat_allowance": margin_report.stat_allowance,
            "disc_allowance": margin_report.disc_allowance,
        },
    }
    tables = _margins_tables(margin_report)
    scen = ScenarioReport(scenario="pmp-check", sections=sections,
                          assertions=assertions, tables=tables)
    return scen, tables


def _concave_running_cost_fault(problem):
    """Flip the sign of the running cost's quadratic term (fault injection)."""
    return dataclasses.replace(
        problem,
        ell=lambda t, x, u: -np.einsum("pi,pi->p", u, u),
        ell_u=lambda t, x, u: -2.0 * u,
        name=problem.name + "-concave-fault")


def _run_sufficiency(config):
    opts = config.options
    problem, driver, grid, u_star, candidate = _stationary_candidate(
        config, 0.0, with_adjoint=True)
    if opts["inject_fault"]:
        problem = _concave_running_cost_fault(problem)
    report = sufficient_check(problem, driver, candidate,
                              pairs=opts["pairs"],
                              seed=config.run["seed"] + 3,
                              sample_times=opts["sample_times"])
    assertions = [
        Assertion(name="control_set_convex", passed=report.set_convex,
                  detail="declared box set"),
        Assertion(name="terminal_cost_convex", passed=report.terminal_passed,
                  detail=f"max midpoint violation "
                         f"{report.terminal_violation:.2e}"),
        Assertion(name="hamiltonian_jointly_convex",
                  passed=report.joint_passed,
                  detail=f"max midpoint violation "
                         f"{report.joint_violation:.2e}"),
        Assertion(name="minimum_condition",
                  passed=report.margin_report is not None
                  and report.margin_report.passed,
                  detail="margins over the probe grid"),
    ]
    sections = {
        "sufficiency": {
            "applicable": report.applicable,
            "terminal_violation": report.terminal_violation,
            "joint_violation": report.joint_violation,
            "pairs": report.pairs,
            "overall": report.overall,
            "fault_injected": opts["inject_fault"],
        },
    }
    if report.joint_witness is not None:
        sections["joint_witness"] = {
            "t": report.joint_witness["t"],
            "x1": np.array2string(report.joint_witness["x1"], precision=6),
            "v1": np.array2string(report.joint_witness["v1"], precision=6),
            "x2": np.array2string(report.joint_witness["x2"], precision=6),
            "v2": np.array2string(report.joint_witness["v2"], precision=6),
        }
    rows = [("control_set", int(report.set_convex)),
            ("terminal", int(report.terminal_passed)),
            ("joint", int(report.joint_passed)),
            ("minimum", int(report.margin_report is not None
                            and report.margin_report.passed))]
    tables = {"sufficiency": (["check", "passed"], rows)}
    scen = ScenarioReport(scenario="sufficiency", sections=sections,
                          assertions=assertions, tables=tables)
    return scen, tables


def _run_isometry(config):
    cfg = Example1Config(steps=config.run["steps"],
                         paths=config.run["paths"],
                         seed=config.run["seed"],
                         horizon=config.run["horizon"])
    _, driver, grid, _ = build_example1_problem(cfg)
    bundle = sample_increments(driver, grid, cfg.paths, cfg.seed,
                               threads=get_threads())
    phi = np.eye(driver.state_dim)
    report = verify_isometry(phi, driver, bundle)
    beta_sq = float(np.sum(np.asarray(cfg.beta) ** 2))
    t_end = cfg.horizon
    analytic = beta_sq * (t_end + t_end ** 2 / 4.0)
    assertions = [Assertion(
        name="isometry_within_3se", passed=report.within(3.0),
        detail=f"MC {report.mc_estimate:.6f} vs quadrature "
               f"{report.quadrature_value:.6f} "
               f"(3*SE = {3.0 * report.mc_stderr:.2e})")]
    sections = {
        "isometry": {
            "mc_estimate": report.mc_estimate,
            "quadrature_value": report.quadrature_value,
            "analytic_linear_intensity": analytic,
            "difference": report.difference,
            "mc_stderr": report.mc_stderr,
            "paths": report.paths,
        },
    }
    rows = [(report.mc_estimate, report.quadrature_value, report.difference,
             report.mc_stderr, report.paths)]
    tables = {"isometry": (["mc_estimate", "quadrature_value", "difference",
                            "mc_stderr", "paths"], rows)}
    scen = ScenarioReport(scenario="isometry", sections=sections,
                          assertions=assertions, tables=tables)
    return scen, tables


def _packaged_problem(name, horizon):
    if name == "example1":
        cfg = Example1Config(horizon=horizon)
        problem, _, _, u_star = build_example1_problem(cfg)
        x0 = np.asarray(cfg.x0, dtype=float)
    elif name == "example1-tanh":
        cfg = Example1Config(horizon=horizon, drift_gain=0.25)
        problem, _, _, u_star = build_example1_problem(cfg)
        x0 = np.asarray(cfg.x0, dtype=float)
    elif name == "example2":
        cfg = Example2Config(horizon=horizon)
        problem, _, _ = build_example2_problem(cfg)
        x0 = np.asarray(cfg.x0, dtype=float)
    else:
        raise ValueError(f"unknown packaged problem {name!r}")
    return problem, x0


def _run_derivative_check(config):
    opts = config.options
    names = PACKAGED_PROBLEMS if opts["problem"] == "all" \
        else (opts["problem"],)
    horizon = config.run["horizon"]
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.run["seed"]))
    assertions = []
    rows = []
    sections = {}
    for idx, name in enumerate(names):
        problem, x0 = _packaged_problem(name, horizon)
        if opts["inject_fault"] and idx == 0:
            original = problem.ell_x
            problem = dataclasses.replace(
                problem,
                ell_x=lambda t, x, u, _f=original: 1.5 * np.asarray(
                    _f(t, x, u), dtype=float) + 0.01,
                name=problem.name + "-gradient-fault")
        times = np.linspace(0.0, horizon, opts["probes"])
        probes = []
        for t in times:
            x = x0 + rng.standard_normal(x0.shape[0])
            u = sample_controls(problem.control_set, 1, rng)[0]
            probes.append((float(t), x, u))
        report = finite_diff_check(problem, probes,
                                   rel_step=opts["rel_step"],
                                   tol=opts["tol"])
        assertions.append(Assertion(
            name=f"derivatives_{problem.name}", passed=report.passed,
            detail="flagged: " + ", ".join(report.flagged)
            if report.flagged else "all within tol"))
        for deriv, err in sorted(report.max_rel_error.items()):
            rows.append((problem.name, deriv, float(err), opts["tol"],
                         int(err > opts["tol"])))
        sections[problem.name] = {
            "max_rel_error": max(report.max_rel_error.values()),
            "flagged": ", ".join(report.flagged) if report.flagged
            else "none",
            "probes": report.probes,
        }
    tables = {"derivatives": (["problem", "derivative", "max_rel_error",
                               "tol", "flagged"], rows)}
    scen = ScenarioReport(scenario="derivative-check", sections=sections,
                          assertions=assertions, tables=tables)
    return scen, tables


_RUNNERS = {
    "example1": _run_example1,
    "example2": _run_example2,
    "rates": _run_rates,
    "gateaux": _run_gateaux,
    "pmp-check": _run_pmp_check,
    "sufficiency": _run_sufficiency,
    "isometry": _run_isometry,
    "derivative-check": _run_derivative_check,
}


# ---------------------------------------------------------------------------
# Artifact emission.
# ---------------------------------------------------------------------------

def _fmt_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.ndarray):
        return ", ".join(_fmt_value(v) for v in value.ravel())
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt_value(v) for v in value)
    return str(value)


def _render_report(report):
    lines = [f"scenario = {report.scenario}",
             f"passed = {_fmt_value(report.passed)}", ""]
    for name, body in report.sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {_fmt_value(value)}")
        lines.append("")
    lines.append("[assertions]")
    for a in report.assertions:
        lines.append(f"{a.name} = {'pass' if a.passed else 'FAIL'}")
    lines.append("")
    for a in report.assertions:
        lines.append(f"[assert:{a.name}]")
        lines.append(f"passed = {_fmt_value(a.passed)}")
        lines.append(f"detail = {a.detail}")
        lines.append("")
    return "\n".join(lines)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt_value(cell) for cell in row])


def _emit(config, report, tables, out_dir, wall_seconds, status):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    report_path = out_dir / "report.txt"
    report_path.write_text(_render_report(report), encoding="utf-8")
    outputs.append(report_path.name)
    for stem, (header, rows) in sorted(tables.items()):
        csv_path = out_dir / f"{stem}.csv"
        _write_csv(csv_path, header, rows)
        outputs.append(csv_path.name)
    manifest = [
        f"scenario = {config.scenario}",
        f"config_path = {config.source}",
        f"config_sha256 = {config.config_hash()}",
        f"tool_version = {TOOL_VERSION}",
        f"seed = {config.run['seed']}",
        f"steps = {config.run['steps']}",
        f"paths = {config.run['paths']}",
        f"horizon = {_fmt_value(config.run['horizon'])}",
        f"state_dim = {config.space['state_dim']}",
        f"control_dim = {config.space['control_dim']}",
        f"threads = {get_threads()}",
        f"status = {status}",
        f"wall_seconds = {wall_seconds:.3f}",
        f"outputs = {', '.join(outputs)}",
    ]
    (out_dir / "manifest.txt").write_text("\n".join(manifest) + "\n",
                                          encoding="utf-8")
    return outputs


def run(config, output_dir=None, seed=None, threads=None, verbosity=1,
        stream=None):
    """Execute a validated config; emit artifacts; return the exit code."""
    stream = stream if stream is not None else sys.stdout
    t_start = time.perf_counter()
    if seed is not None:
        config = dataclasses.replace(config,
                                     run={**config.run, "seed": int(seed)})
    effective_threads = threads if threads is not None \
        else config.run.get("threads")
    set_threads(effective_threads if effective_threads else 1)
    out_dir = Path(output_dir) if output_dir is not None \
        else Path(config.run.get("output_dir") or f"{config.scenario}-out")

    status = "ok"
    try:
        report, tables = _RUNNERS[config.scenario](config)
        if not report.passed:
            status = "assertion-failure"
    except (BlowUpError, RegressionRankError) as exc:
        report = ScenarioReport(
            scenario=config.scenario,
            sections={"error": {"type": type(exc).__name__,
                                "message": str(exc)}},
            assertions=[Assertion(name="completed", passed=False,
                                  detail=str(exc))])
        tables = {}
        status = "numerical-failure"

    wall = time.perf_counter() - t_start
    outputs = _emit(config, report, tables, out_dir, wall, status)
    if verbosity >= 1:
        print(f"{config.scenario}: {status} "
              f"({wall:.1f}s, outputs in {out_dir})", file=stream)
    if verbosity >= 2:
        for a in report.assertions:
            mark = "pass" if a.passed else "FAIL"
            print(f"  {a.name}: {mark} -- {a.detail}", file=stream)
    if status == "numerical-failure":
        return EXIT_NUMERICAL
    return EXIT_OK if status == "ok" else EXIT_ASSERTION


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="martctrl",
        description="Desk-scale experiments for controlled SDEs driven by "
                    "Hilbert-space-valued martingales: forward simulation, "
                    "spike variations, adjoint equations, and optimality "
                    "checks.")
    parser.add_argument("config", help="path to a key = value config file")
    parser.add_argument("--output-dir", default=None,
                        help="override the output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the seed in the config")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for path-parallel stages")
    parser.add_argument("--verbosity", type=int, default=1,
                        choices=(0, 1, 2))
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(config, output_dir=args.output_dir, seed=args.seed,
               threads=args.threads, verbosity=args.verbosity)


if __name__ == "__main__":
    sys.exit(main())
