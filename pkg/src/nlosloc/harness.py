"""Monte-Carlo harness: estimator trial runners, RMSE sweeps, the synthetic
4-node experiment replica, and CSV emission.

CSV outputs carry a ``# schema=1`` first line and are byte-identical for
identical (config, seed); wall-clock timing is kept out of the files for
that reason.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline, em_centralized, em_distributed
from .angles import bearing, wrap_2pi
from .errors import ConfigError
from .likelihood import ParamEstimate
from .model import (
    MeasurementSet,
    Node,
    Problem,
    ScattererSupport,
    Scenario,
    canonical_aoa,
    default_five_node_scenario,
    scenario_from_dict,
    substream,
    synthesize_measurements,
    _PURPOSE_TRIAL,
)

CSV_SCHEMA = "# schema=1"

ESTIMATORS = ("centralized", "distributed", "tdoa_only")


@dataclass(frozen=True)
class EstimatorSettings:
    """Harness-level estimator knobs (JSON-overridable)."""

    centralized_starts: int = 2
    centralized_max_iter: int = 200
    centralized_max_cycles: int = 2
    distributed_scale: float = 1.0
    distributed_exponent: float = 1.0
    distributed_max_iter: int = 2000
    distributed_consensus_tol: float = 1e-2
    tdoa_delta: float = 1e-4

    def em_opts(self) -> em_centralized.EMOptions:
        return em_centralized.EMOptions(
            max_iter=self.centralized_max_iter, max_cycles=self.centralized_max_cycles
        )

    def schedule(self) -> em_distributed.StepSchedule:
        return em_distributed.StepSchedule(self.distributed_scale, self.distributed_exponent)

    def dist_opts(self) -> em_distributed.DistEMOptions:
        return em_distributed.DistEMOptions(
            max_iter=self.distributed_max_iter,
            consensus_tol=self.distributed_consensus_tol,
        )

    def tdoa_config(self) -> baseline.TdoaOnlyConfig:
        return baseline.TdoaOnlyConfig(delta=self.tdoa_delta)


@dataclass(frozen=True)
class SweepSpec:
    varied: str                      # "eta0" | "sigma" | "none"
    values: tuple                    # radians for eta0, meters for sigma
    trials: int
    estimators: tuple = ESTIMATORS
    seed: int = 0
    settings: EstimatorSettings = EstimatorSettings()

    def __post_init__(self):
        if self.varied not in ("eta0", "sigma", "none"):
            raise ConfigError(f"unknown sweep parameter {self.varied!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        for est in self.estimators:
            if est not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {est!r}")
        if self.varied == "eta0" and any(not 0 <= v < math.pi for v in self.values):
            raise ConfigError("eta0 values must lie in [0, pi)")
        if self.varied == "sigma" and any(v <= 0 for v in self.values):
            raise ConfigError("sigma values must be positive")


@dataclass
class TrialRecord:
    seed: int
    estimator: str
    param_value: float
    q_hat: np.ndarray
    error_m: float
    converged: bool
    iterations: int
    wall_time_s: float


def trial_seed(base_seed: int, index: int) -> int:
    return int(substream(base_seed, index, _PURPOSE_TRIAL).integers(0, 2**62))


def with_noise_levels(scenario: Scenario, sigma: float | None = None,
                      eta0: float | None = None) -> Scenario:
    """Scenario copy with all node sigmas and/or the AOA half-width replaced."""
    nodes = scenario.nodes
    if sigma is not None:
        nodes = tuple(dataclasses.replace(nd, sigma=float(sigma)) for nd in nodes)
    return dataclasses.replace(
        scenario,
        nodes=nodes,
        eta0=scenario.eta0 if eta0 is None else float(eta0),
    )


def run_trial(scenario: Scenario, estimator: str, seed: int,
              settings: EstimatorSettings = EstimatorSettings()) -> TrialRecord:
    """Synthesize one measurement set and run one estimator on it."""
    meas = synthesize_measurements(scenario, seed=seed)
    problem = scenario.problem(meas)
    t0 = time.perf_counter()
    if estimator == "centralized":
        res = em_centralized.multi_start(
            problem, n_starts=settings.centralized_starts, seed=seed, opts=settings.em_opts()
        )
        q_hat, converged, iters = res.x_hat.q, res.converged, res.iterations
    elif estimator == "distributed":
        res = em_distributed.run_distributed(
            problem, schedule=settings.schedule(), opts=settings.dist_opts(), seed=seed
        )
        q_hat, converged, iters = res.consensus_q, res.converged, res.iterations
    elif estimator == "tdoa_only":
        res = baseline.solve_tdoa_only(problem, settings.tdoa_config())
        q_hat, converged, iters = res.q, True, 1
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")
    wall = time.perf_counter() - t0
    err = float(np.linalg.norm(q_hat - scenario.target))
    return TrialRecord(
        seed=seed, estimator=estimator, param_value=float("nan"), q_hat=np.asarray(q_hat),
        error_m=err, converged=bool(converged), iterations=int(iters), wall_time_s=wall,
    )


def _sweep_point(args):
    scenario, estimator, value, seeds, settings = args
    records = []
    for s in seeds:
        rec = run_trial(scenario, estimator, s, settings)
        rec.param_value = value
        records.append(rec)
    return records


def run_sweep(spec: SweepSpec, scenario_template: Scenario, parallel: int = 1):
    """Run the Monte-Carlo sweep; returns (aggregate rows, all trial records).

    RMSE is computed over converged trials only; the convergence rate is
    reported alongside.  Per-trial seeds are independent substreams so results
    do not depend on scheduling order.
    """
    values = spec.values if spec.varied != "none" else (float("nan"),)
    tasks = []
    for value in values:
        if spec.varied == "eta0":
            scenario = with_noise_levels(scenario_template, eta0=value)
        elif spec.varied == "sigma":
            scenario = with_noise_levels(scenario_template, sigma=value)
        else:
            scenario = scenario_template
        seeds = [trial_seed(spec.seed, k) for k in range(spec.trials)]
        for est in spec.estimators:
            tasks.append((scenario, est, value, seeds, spec.settings))

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            chunks = list(pool.map(_sweep_point, tasks))
    else:
        chunks = [_sweep_point(t) for t in tasks]

    records = [rec for chunk in chunks for rec in chunk]
    rows = []
    for (scenario, est, value, seeds, _), chunk in zip(tasks, chunks):
        errs = np.array([r.error_m for r in chunk])
        conv = np.array([r.converged for r in chunk])
        rmse = float(np.sqrt(np.mean(errs[conv] ** 2))) if conv.any() else float("nan")
        rows.append(
            dict(
                param=spec.varied,
                value=value,
                estimator=est,
                trials=len(chunk),
                converged=int(conv.sum()),
                convergence_rate=float(conv.mean()),
                rmse_m=rmse,
                mean_err_m=float(errs[conv].mean()) if conv.any() else float("nan"),
                median_err_m=float(np.median(errs[conv])) if conv.any() else float("nan"),
            )
        )
    return rows, records


def write_sweep_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["param", "value", "estimator", "trials", "converged",
            "convergence_rate", "rmse_m", "mean_err_m", "median_err_m"]
    with path.open("w", newline="") as f:
        f.write(CSV_SCHEMA + "\n")
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])


def write_trials_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(CSV_SCHEMA + "\n")
        w = csv.writer(f)
        w.writerow(["seed", "estimator", "param_value", "qx_m", "qy_m",
                    "error_m", "converged", "iterations"])
        for r in records:
            w.writerow([r.seed, r.estimator, _fmt(r.param_value), _fmt(r.q_hat[0]),
                        _fmt(r.q_hat[1]), _fmt(r.error_m), int(r.converged), r.iterations])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


# ---------------------------------------------------------------------------
# synthetic replica of the 4-node measurement campaign
# ---------------------------------------------------------------------------

REPLICA_WALL_Y = 38.0          # opposite-building wall (orientation 0)
REPLICA_CORNER_GAMMA = np.deg2rad(135.0)
REPLICA_LIST_ANGLES = np.deg2rad([0.0, 90.0, 135.0, 180.0, 270.0])
REPLICA_TDOA_BIAS = 1.0        # meters
REPLICA_TDOA_STD = 4.0         # meters
REPLICA_AOA_STD = np.deg2rad(3.0)
# box half-width handed to the estimators: the uniform window whose variance
# matches the measured Gaussian AOA deviation
REPLICA_ETA0 = np.sqrt(3.0) * REPLICA_AOA_STD


def replica_positions():
    """Node positions: reference wall reflector, LOS node, second wall
    reflector, and the around-the-corner node (virtual 135-degree scatterer).

    The wall reflectors sit outside the span of target locations so no target
    passes directly beneath them (grazing reflections are near-singular)."""
    return {
        "ref_wall": np.array([45.0, 0.0]),
        "los": np.array([0.0, 0.0]),
        "far_wall": np.array([95.0, 0.0]),
        "corner": np.array([105.0, -5.0]),
    }


def replica_target_locations(n: int = 13):
    xs = np.linspace(15.0, 93.0, n)
    return [np.array([x, 2.0]) for x in xs]


def _wall_aoa(target, node_pos):
    mirrored = np.array([target[0], 2.0 * REPLICA_WALL_Y - target[1]])
    return bearing(mirrored - node_pos)


def build_replica_scenario(target, support_mode: str) -> Scenario:
    """One target location of the synthetic campaign layout."""
    pos = replica_positions()
    order = ["ref_wall", "los", "far_wall", "corner"]
    p = [pos[k] for k in order]
    gamma = np.empty(4)
    theta = np.empty(4)
    gamma[0] = 0.0
    theta[0] = _wall_aoa(target, p[0])
    gamma[1] = bearing(target - p[1])   # LOS: orientation parallel to the path
    theta[1] = gamma[1]
    gamma[2] = 0.0
    theta[2] = _wall_aoa(target, p[2])
    gamma[3] = REPLICA_CORNER_GAMMA
    theta[3] = canonical_aoa(target, p[3], gamma[3], frac=0.35)
    nodes = tuple(
        Node(id=i + 1, position=p[i], sigma=REPLICA_TDOA_STD, is_reference=(i == 0))
        for i in range(4)
    )
    if support_mode == "band":
        supports = tuple(
            ScattererSupport.band(gamma[i], np.deg2rad(10.0), 9) for i in range(1, 4)
        )
    elif support_mode == "list":
        supports = tuple(ScattererSupport.listed(REPLICA_LIST_ANGLES) for _ in range(3))
    else:
        raise ConfigError(f"unknown support mode {support_mode!r}")
    return Scenario(
        nodes=nodes,
        target=np.asarray(target, dtype=float),
        gamma_true=gamma,
        theta_true=theta,
        eta0=0.0,  # noise injected separately with the measured statistics
        supports=supports,
    )


def replica_measurements(scenario: Scenario, seed: int) -> MeasurementSet:
    """Measurements with the campaign noise statistics: TDOA Gaussian with a
    +1 m mean and 4 m deviation, AOA Gaussian with 3-degree deviation."""
    d = scenario.true_path_lengths()
    tdoa = np.empty(3)
    aoa = np.empty(4)
    for i, nd in enumerate(scenario.nodes):
        if i > 0:
            g = substream(seed, nd.id, _PURPOSE_TRIAL).normal(0.0, 1.0)
            tdoa[i - 1] = d[i] - d[0] + REPLICA_TDOA_BIAS + REPLICA_TDOA_STD * g
        eta = substream(seed, 1000 + nd.id, _PURPOSE_TRIAL).normal(0.0, 1.0)
        aoa[i] = scenario.theta_true[i] + REPLICA_AOA_STD * eta
    return MeasurementSet(
        node_ids=tuple(nd.id for nd in scenario.nodes),
        tdoa=tdoa,
        aoa=aoa,
        ref_position=scenario.nodes[0].position,
        ref_gamma=scenario.gamma1,
        ref_aoa=wrap_2pi(aoa[0]),
    )


def replicate_experiment_synthetic(
    seed: int = 0,
    trials_per_location: int = 10,
    settings: EstimatorSettings | None = None,
):
    """Run the synthetic campaign: 13 locations x trials x 2 support modes.

    Returns a list of per-trial dict rows (mode, estimator, location, trial,
    error_m, converged) for both the centralized and distributed estimators.
    """
    if settings is None:
        settings = EstimatorSettings(
            centralized_starts=2,
            centralized_max_iter=120,
            distributed_max_iter=2000,
        )
    rows = []
    for mode in ("band", "list"):
        for loc_idx, target in enumerate(replica_target_locations()):
            scenario = build_replica_scenario(target, mode)
            for k in range(trials_per_location):
                s = trial_seed(seed, loc_idx * 1000 + k)
                meas = replica_measurements(scenario, s)
                problem = Problem(
                    nodes=scenario.nodes, meas=meas,
                    supports=scenario.supports, eta0=REPLICA_ETA0,
                )
                res_c = em_centralized.multi_start(
                    problem, n_starts=settings.centralized_starts,
                    seed=s, opts=settings.em_opts(),
                )
                res_d = em_distributed.run_distributed(
                    problem, schedule=settings.schedule(),
                    opts=settings.dist_opts(), seed=s,
                )
                for est, q, conv in (
                    ("centralized", res_c.x_hat.q, res_c.converged),
                    ("distributed", res_d.consensus_q, res_d.converged),
                ):
                    rows.append(
                        dict(
                            mode=mode, estimator=est, location=loc_idx, trial=k,
                            error_m=float(np.linalg.norm(q - scenario.target)),
                            converged=bool(conv),
                        )
                    )
    return rows


def replica_error_cdf(rows, mode: str, estimator: str, converged_only: bool = True):
    errs = sorted(
        r["error_m"] for r in rows
        if r["mode"] == mode and r["estimator"] == estimator
        and (r["converged"] or not converged_only)
    )
    n = len(errs)
    return [(e, (i + 1) / n) for i, e in enumerate(errs)]


def write_replica_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write(CSV_SCHEMA + "\n")
        w = csv.writer(f)
        w.writerow(["mode", "estimator", "location", "trial", "error_m", "converged"])
        for r in rows:
            w.writerow([r["mode"], r["estimator"], r["location"], r["trial"],
                        _fmt(r["error_m"]), int(r["converged"])])


def sweep_spec_from_dict(cfg: dict) -> tuple:
    """Parse a sweep JSON config; returns (SweepSpec, Scenario)."""
    try:
        varied = cfg.get("varied", "none")
        if varied == "eta0":
            values = tuple(np.deg2rad(float(v)) for v in cfg["values_deg"])
        elif varied == "sigma":
            values = tuple(float(v) for v in cfg["values_m"])
        else:
            values = ()
        trials = int(cfg.get("trials", 100))
        estimators = tuple(cfg.get("estimators", list(ESTIMATORS)))
        seed = int(cfg.get("seed", 0))
        settings = EstimatorSettings(**cfg.get("settings", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad sweep config: {exc}") from exc
    scen_cfg = cfg.get("scenario", "default5")
    if scen_cfg == "default5":
        scenario = default_five_node_scenario()
    elif isinstance(scen_cfg, dict):
        scenario = scenario_from_dict(scen_cfg)
    else:
        raise ConfigError("scenario must be 'default5' or an inline scenario object")
    spec = SweepSpec(varied=varied, values=values, trials=trials,
                     estimators=estimators, seed=seed, settings=settings)
    return spec, scenario
