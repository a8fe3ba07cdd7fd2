"""Single-bounce NLOS measurement model and synthetic scenario generation.

Geometry convention: a signal leaves the target at ``q``, bounces once off a
planar scatterer whose orientation angle is ``gamma`` (the scatterer position
is unknown and irrelevant to the path-length identity), and arrives at a node
at ``p`` with angle of arrival ``theta``.  All angles are measured w.r.t. the
horizontal axis and stored in radians; degrees are accepted only at the JSON
config boundary.  A LOS path is encoded as ``gamma == theta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .angles import bearing, unit, wrap_2pi, wrap_pi
from .errors import ConfigError, InconsistentScenario, NonPhysicalPath, SingularGeometry

EPS_SINGULAR = 1e-9      # |cos(theta - gamma)| threshold for the steering vector
WEDGE_RAY_TOL = 1e-6     # angular tolerance for membership in a collapsed (LOS) wedge


def steering_vector(theta: float, gamma: float, eps: float = EPS_SINGULAR) -> np.ndarray:
    """Map (AOA, scatterer orientation) to the path-length direction vector.

    Returns g = [cos(gamma), sin(gamma)] / cos(theta - gamma), the vector with
    g . (q - p) equal to the total single-bounce path length.
    """
    c = np.cos(theta - gamma)
    if abs(c) <= eps:
        raise SingularGeometry(
            f"scatterer plane parallel to arrival ray: |cos(theta-gamma)|={abs(c):.3e}"
        )
    return np.array([np.cos(gamma), np.sin(gamma)]) / c


def path_length(q, p, theta: float, gamma: float, *, check: bool = True) -> float:
    """Total single-bounce path length from target ``q`` to node ``p``.

    Raises NonPhysicalPath when the identity produces a non-positive length
    (no physical bounce with this orientation); pass ``check=False`` to get
    the raw signed value.
    """
    g = steering_vector(theta, gamma)
    d = float(g @ (np.asarray(q, dtype=float) - np.asarray(p, dtype=float)))
    if check and d <= 0.0:
        raise NonPhysicalPath(f"path length {d:.3f} m is not positive")
    return d


def wedge_contains(q, p, theta: float, gamma: float) -> bool:
    """Test whether ``q`` lies in the feasible wedge of node ``p``.

    The wedge is swept from the AOA ray (angle ``theta``) to the ray opposite
    the departure direction (angle ``phi = 2*gamma - theta``).  Membership:
    with ``delta = wrap(phi - theta)`` in (-pi, pi], the bearing offset
    ``wrap(psi - theta)`` must lie between 0 and ``delta`` (inclusive) on the
    side of delta's sign.  A collapsed wedge (LOS, delta == 0) degenerates to
    the ray itself, tested with a small angular tolerance.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    v = q - p
    if not np.any(v != 0.0):
        raise ValueError("q coincides with the node position")
    psi = bearing(v)
    phi = 2.0 * gamma - theta
    delta = wrap_pi(phi - theta)
    u = wrap_pi(psi - theta)
    if abs(delta) <= WEDGE_RAY_TOL:
        return abs(u) <= WEDGE_RAY_TOL
    if delta > 0.0:
        return -WEDGE_RAY_TOL <= u <= delta + WEDGE_RAY_TOL
    return delta - WEDGE_RAY_TOL <= u <= WEDGE_RAY_TOL


def canonical_aoa(q, p, gamma: float, frac: float = 0.5) -> float:
    """Derive a consistent true AOA for a node with scatterer orientation ``gamma``.

    The scatterer position is underdetermined by (q, p, gamma): any AOA with
    |theta - gamma| strictly between |psi - gamma| and pi/2 (psi the bearing
    of q - p) admits a single-bounce path.  ``frac`` selects the position in
    that open interval; orientation is reduced mod pi first (gamma and
    gamma + pi describe the same plane).  When gamma is aligned with the
    bearing the path is LOS and theta = psi.
    """
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must be in (0, 1)")
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    psi = bearing(q - p)
    dpsi = wrap_pi(psi - gamma)
    g_eff = gamma
    if abs(dpsi) > np.pi / 2.0:
        g_eff = wrap_2pi(gamma + np.pi)
        dpsi = wrap_pi(psi - g_eff)
    haw = abs(dpsi)
    if haw <= WEDGE_RAY_TOL:
        return psi  # LOS: scatterer plane contains the path
    if haw >= np.pi / 2.0 - EPS_SINGULAR:
        raise InconsistentScenario(
            "no single-bounce path: scatterer orientation perpendicular to bearing"
        )
    side = 1.0 if dpsi > 0 else -1.0
    half = haw + frac * (np.pi / 2.0 - haw)
    return float(wrap_2pi(g_eff + side * half))


def scatter_point(q, p, theta: float, gamma: float) -> np.ndarray:
    """Bounce point of the single-bounce path (diagnostic utility)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    phi = 2.0 * gamma - theta
    basis = np.column_stack([unit(theta), unit(phi)])
    r, rho = np.linalg.solve(basis, q - p)
    if r < 0 or rho < 0:
        raise NonPhysicalPath("bounce point solve gave a negative ray coefficient")
    return p + r * unit(theta)


# ---------------------------------------------------------------------------
# scenario containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    """A sensor node: position in meters, TDOA noise std deviation, reference flag."""

    id: int
    position: np.ndarray
    sigma: float
    is_reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        if self.sigma < 0:
            raise ValueError(f"node {self.id}: sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class ScattererSupport:
    """Finite support set for a node's latent scatterer orientation."""

    angles: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        prior = np.atleast_1d(np.asarray(self.prior, dtype=float))
        if angles.size == 0:
            raise ValueError("support must be nonempty")
        if angles.shape != prior.shape:
            raise ValueError("angles and prior must have equal length")
        if np.any(angles < 0) or np.any(angles >= 2 * np.pi):
            raise ValueError("support angles must lie in [0, 2*pi)")
        if np.any(prior < 0) or not np.isclose(prior.sum(), 1.0, atol=1e-9):
            raise ValueError("prior must be nonnegative and sum to 1")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "prior", prior / prior.sum())

    @classmethod
    def band(cls, center: float, halfwidth: float, n_points: int = 9) -> "ScattererSupport":
        """Uniformly discretized band [center - halfwidth, center + halfwidth]."""
        if n_points < 1:
            raise ValueError("n_points must be >= 1")
        if n_points == 1 or halfwidth == 0.0:
            angles = np.array([center])
        else:
            angles = center + np.linspace(-halfwidth, halfwidth, n_points)
        angles = wrap_2pi(angles)
        return cls(angles=angles, prior=np.full(len(angles), 1.0 / len(angles)))

    @classmethod
    def listed(cls, angles, prior=None) -> "ScattererSupport":
        angles = wrap_2pi(np.asarray(angles, dtype=float))
        if prior is None:
            prior = np.full(len(angles), 1.0 / len(angles))
        return cls(angles=angles, prior=np.asarray(prior, dtype=float))

    def __len__(self):
        return len(self.angles)


@dataclass(frozen=True)
class Scenario:
    """Ground-truth world: nodes, target, per-node true scatterer geometry, noise levels.

    ``nodes[0]`` must be the reference node (known scatterer orientation
    ``gamma1 == gamma_true[0]``).  ``theta_true`` holds the derived true AOAs.
    ``supports`` aligns with ``nodes[1:]`` (the reference has no latent angle).
    """

    nodes: tuple
    target: np.ndarray
    gamma_true: np.ndarray
    theta_true: np.ndarray
    eta0: float
    supports: tuple
    seed: int = 0
    adjacency: tuple | None = None  # gossip edges over non-reference node ids; None = complete

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float).reshape(2))
        object.__setattr__(self, "gamma_true", np.asarray(self.gamma_true, dtype=float))
        object.__setattr__(self, "theta_true", np.asarray(self.theta_true, dtype=float))
        object.__setattr__(self, "supports", tuple(self.supports))
        n = len(self.nodes)
        if n < 2:
            raise ValueError("need at least two nodes (reference + one measuring node)")
        if sum(1 for nd in self.nodes if nd.is_reference) != 1 or not self.nodes[0].is_reference:
            raise ValueError("exactly one reference node required and it must come first")
        ids = [nd.id for nd in self.nodes]
        if len(set(ids)) != n:
            raise ValueError("node ids must be unique")
        if self.gamma_true.shape != (n,) or self.theta_true.shape != (n,):
            raise ValueError("gamma_true/theta_true must have one entry per node")
        if len(self.supports) != n - 1:
            raise ValueError("one support set per non-reference node required")
        if not 0.0 <= self.eta0 < np.pi:
            raise ValueError("eta0 must lie in [0, pi)")
        for i, nd in enumerate(self.nodes):
            c = np.cos(self.theta_true[i] - self.gamma_true[i])
            if abs(c) <= EPS_SINGULAR:
                raise ValueError(f"node {nd.id}: true geometry is singular")

    @property
    def gamma1(self) -> float:
        return float(self.gamma_true[0])

    @property
    def positions(self) -> np.ndarray:
        return np.array([nd.position for nd in self.nodes])

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def network_diameter(self) -> float:
        pos = self.positions
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        return float(d.max())

    def true_path_lengths(self) -> np.ndarray:
        return np.array(
            [
                path_length(self.target, nd.position, self.theta_true[i], self.gamma_true[i])
                for i, nd in enumerate(self.nodes)
            ]
        )

    def problem(self, meas: "MeasurementSet") -> "Problem":
        return Problem(nodes=self.nodes, meas=meas, supports=self.supports, eta0=self.eta0)


@dataclass(frozen=True)
class MeasurementSet:
    """One synchronized snapshot of network measurements.

    ``tdoa[k]`` is the TDOA (meters) of ``node_ids[k+1]`` w.r.t. the reference;
    ``aoa[k]`` is the AOA measurement of ``node_ids[k]`` wrapped to [0, 2*pi).
    The reference broadcast (position, known scatterer orientation, measured
    AOA) is carried alongside so estimators need no other side channel.
    """

    node_ids: tuple
    tdoa: np.ndarray
    aoa: np.ndarray
    ref_position: np.ndarray
    ref_gamma: float
    ref_aoa: float

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "tdoa", np.asarray(self.tdoa, dtype=float))
        object.__setattr__(self, "aoa", wrap_2pi(np.asarray(self.aoa, dtype=float)))
        object.__setattr__(self, "ref_position", np.asarray(self.ref_position, dtype=float).reshape(2))
        n = len(self.node_ids)
        if self.tdoa.shape != (n - 1,):
            raise ValueError("expected one TDOA entry per non-reference node")
        if self.aoa.shape != (n,):
            raise ValueError("expected one AOA entry per node")


@dataclass(frozen=True)
class Problem:
    """Everything an estimator legitimately knows (no ground truth)."""

    nodes: tuple
    meas: MeasurementSet
    supports: tuple
    eta0: float

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def network_diameter(self) -> float:
        pos = np.array([nd.position for nd in self.nodes])
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        return float(d.max())


# ---------------------------------------------------------------------------
# randomness: counter-based per-node substreams
# ---------------------------------------------------------------------------

_PURPOSE_TDOA = 1
_PURPOSE_AOA = 2
_PURPOSE_SCENARIO = 3
_PURPOSE_TRIAL = 4
_PURPOSE_INIT = 5
_PURPOSE_GOSSIP = 6


def substream(seed: int, stream: int, purpose: int) -> np.random.Generator:
    """Philox generator keyed by (seed, stream, purpose).

    Counter-based keying makes substreams independent of each other, so e.g.
    adding a node to a scenario does not perturb the other nodes' noise.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(((stream & 0xFFFFFFFF) << 16) | (purpose & 0xFFFF))],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def synthesize_measurements(scenario: Scenario, seed: int | None = None) -> MeasurementSet:
    """Draw one noisy MeasurementSet from the scenario's ground truth.

    TDOA noise is zero-mean Gaussian with the per-node sigma; AOA noise is
    uniform on [-eta0, eta0].  Fully deterministic given the seed, with
    per-node substreams.
    """
    if seed is None:
        seed = scenario.seed
    for i, nd in enumerate(scenario.nodes):
        if not wedge_contains(scenario.target, nd.position, scenario.theta_true[i],
                              scenario.gamma_true[i]):
            raise InconsistentScenario(
                f"target outside the true wedge of node {nd.id}"
            )
    try:
        d = scenario.true_path_lengths()
    except NonPhysicalPath as exc:
        raise InconsistentScenario(str(exc)) from exc

    tdoa = np.empty(scenario.n_nodes - 1)
    aoa = np.empty(scenario.n_nodes)
    for i, nd in enumerate(scenario.nodes):
        if i > 0:
            noise = substream(seed, nd.id, _PURPOSE_TDOA).normal(0.0, 1.0)
            tdoa[i - 1] = d[i] - d[0] + nd.sigma * noise
        if scenario.eta0 > 0:
            eta = substream(seed, nd.id, _PURPOSE_AOA).uniform(-scenario.eta0, scenario.eta0)
        else:
            eta = 0.0
        aoa[i] = scenario.theta_true[i] + eta
    return MeasurementSet(
        node_ids=tuple(nd.id for nd in scenario.nodes),
        tdoa=tdoa,
        aoa=aoa,
        ref_position=scenario.nodes[0].position,
        ref_gamma=scenario.gamma1,
        ref_aoa=wrap_2pi(aoa[0]),
    )


# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------


def make_random_scenario(
    seed: int,
    n_nodes: int = 5,
    field: float = 400.0,
    sigma: float = 10.0,
    eta0: float = np.deg2rad(7.0),
    support_halfwidth: float = np.deg2rad(10.0),
    support_points: int = 9,
    min_conditioning: float = 0.15,
) -> Scenario:
    """Random well-conditioned scenario for tests and Monte-Carlo sweeps.

    Nodes sit on a jittered ring of scale ``field``; the target falls in the
    central region; scatterer orientations are drawn with margins that keep
    every true path non-singular and every wedge strictly feasible.  Draws are
    rejected until the aggregate steering-vector geometry is well conditioned.
    """
    rng = substream(seed, 0, _PURPOSE_SCENARIO)
    for _ in range(200):
        ring = 2 * np.pi * (np.arange(n_nodes) / n_nodes) + rng.uniform(-0.25, 0.25, n_nodes)
        ring += rng.uniform(0, 2 * np.pi)
        radius = field * rng.uniform(0.42, 0.58, n_nodes)
        pos = np.column_stack([radius * np.cos(ring), radius * np.sin(ring)])
        target = rng.uniform(-0.3 * field, 0.3 * field, 2)

        gamma = np.empty(n_nodes)
        theta = np.empty(n_nodes)
        ok = True
        for i in range(n_nodes):
            psi = bearing(target - pos[i])
            gamma[i] = wrap_2pi(psi + rng.uniform(-1.0, 1.0) * (np.pi / 2 - 0.35))
            theta[i] = canonical_aoa(target, pos[i], gamma[i], frac=rng.uniform(0.25, 0.6))
            if abs(np.cos(theta[i] - gamma[i])) < 0.15:
                ok = False
                break
        if not ok:
            continue

        g = np.array([unit(gamma[i]) / np.cos(theta[i] - gamma[i]) for i in range(n_nodes)])
        diffs = g[1:] - g[0]
        m = diffs.T @ diffs
        if np.linalg.eigvalsh(m)[0] < min_conditioning:
            continue

        nodes = tuple(
            Node(id=i + 1, position=pos[i], sigma=sigma, is_reference=(i == 0))
            for i in range(n_nodes)
        )
        supports = tuple(
            ScattererSupport.band(gamma[i], support_halfwidth, support_points)
            for i in range(1, n_nodes)
        )
        return Scenario(
            nodes=nodes,
            target=target,
            gamma_true=gamma,
            theta_true=theta,
            eta0=eta0,
            supports=supports,
            seed=seed,
        )
    raise InconsistentScenario(f"could not draw a well-conditioned scenario for seed {seed}")


def default_five_node_scenario(
    sigma: float = 10.0,
    eta0: float = np.deg2rad(7.0),
    support_halfwidth: float = np.deg2rad(10.0),
    support_points: int = 9,
    seed: int = 0,
) -> Scenario:
    """Documented fixed 5-node layout used by the RMSE sweeps.

    Scale is a few hundred meters with diverse scatterer orientations; see the
    README for a sketch.  The layout is a stand-in of comparable scale for the
    simulation-figure scenario, whose coordinates are not published.
    """
    pos = np.array(
        [
            [0.0, 0.0],       # node 1 (reference)
            [500.0, -60.0],   # node 2
            [560.0, 380.0],   # node 3
            [60.0, 430.0],    # node 4
            [280.0, -190.0],  # node 5
        ]
    )
    target = np.array([265.0, 190.0])
    # scatterer orientation offsets (rad) from each node->target bearing, and
    # per-node NLOS path extras (m); extras are deliberately diverse so the
    # bounce biases do not cancel in the TDOA differences
    offsets = np.array([-0.45, 0.5, -0.4, 0.55, -0.5])
    extras = np.array([200.0, 60.0, 250.0, 380.0, 150.0])
    gamma = np.empty(5)
    theta = np.empty(5)
    for i in range(5):
        psi = bearing(target - pos[i])
        gamma[i] = wrap_2pi(psi + offsets[i])
        rng_i = float(np.linalg.norm(target - pos[i]))
        half = np.arccos(np.cos(offsets[i]) / (1.0 + extras[i] / rng_i))
        dpsi = wrap_pi(psi - gamma[i])
        theta[i] = wrap_2pi(gamma[i] + np.sign(dpsi) * half)
    nodes = tuple(
        Node(id=i + 1, position=pos[i], sigma=sigma, is_reference=(i == 0)) for i in range(5)
    )
    supports = tuple(
        ScattererSupport.band(gamma[i], support_halfwidth, support_points) for i in range(1, 5)
    )
    return Scenario(
        nodes=nodes,
        target=target,
        gamma_true=gamma,
        theta_true=theta,
        eta0=eta0,
        supports=supports,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# JSON boundary
# ---------------------------------------------------------------------------


def _support_from_dict(d: dict, center: float) -> ScattererSupport:
    mode = d.get("mode", "band")
    if mode == "band":
        hw = np.deg2rad(float(d.get("band_halfwidth_deg", 10.0)))
        pts = int(d.get("band_points", 9))
        return ScattererSupport.band(center, hw, pts)
    if mode == "list":
        angles = np.deg2rad(np.asarray(d["angles_deg"], dtype=float))
        prior = d.get("prior")
        return ScattererSupport.listed(angles, prior)
    raise ConfigError(f"unknown support mode {mode!r}")


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a Scenario from the documented JSON schema (degrees at this boundary)."""
    try:
        raw_nodes = sorted(cfg["nodes"], key=lambda nd: int(nd["id"]))
        nodes = [
            Node(
                id=int(nd["id"]),
                position=np.array([float(nd["x_m"]), float(nd["y_m"])]),
                sigma=float(nd["sigma_m"]),
                is_reference=bool(nd.get("is_reference", False)),
            )
            for nd in raw_nodes
        ]
        target = np.array([float(cfg["target"]["x_m"]), float(cfg["target"]["y_m"])])
        gamma1 = np.deg2rad(float(cfg["gamma1_deg"]))
        eta0 = np.deg2rad(float(cfg["eta0_deg"]))
        gmap = {int(s["node_id"]): np.deg2rad(float(s["gamma_deg"])) for s in cfg.get("scatterers", [])}
        seed = int(cfg.get("seed", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario config: {exc}") from exc

    refs = [nd for nd in nodes if nd.is_reference]
    if len(refs) != 1 or not nodes[0].is_reference:
        raise ConfigError("scenario must mark exactly one reference node with the smallest id")
    if nodes[0].id in gmap and not np.isclose(gmap[nodes[0].id], gamma1):
        raise ConfigError("scatterers[] entry for the reference node conflicts with gamma1_deg")
    gmap.setdefault(nodes[0].id, gamma1)

    gamma = np.empty(len(nodes))
    theta = np.empty(len(nodes))
    frac = float(cfg.get("bounce_frac", 0.5))
    for i, nd in enumerate(nodes):
        if nd.id not in gmap:
            raise ConfigError(f"missing scatterer orientation for node {nd.id}")
        gamma[i] = wrap_2pi(gmap[nd.id])
        theta[i] = canonical_aoa(target, nd.position, gamma[i], frac=frac)

    sup_cfg = cfg.get("support", {"mode": "band", "band_halfwidth_deg": 10.0})
    per_node = cfg.get("node_supports", {})
    supports = []
    for i, nd in enumerate(nodes[1:], start=1):
        d = per_node.get(str(nd.id), sup_cfg)
        supports.append(_support_from_dict(d, center=gamma[i]))

    adjacency = None
    topo = cfg.get("topology")
    if topo and "adjacency" in topo:
        adjacency = tuple(tuple(int(v) for v in e) for e in topo["adjacency"])

    return Scenario(
        nodes=tuple(nodes),
        target=target,
        gamma_true=gamma,
        theta_true=theta,
        eta0=eta0,
        supports=tuple(supports),
        seed=seed,
        adjacency=adjacency,
    )


def load_scenario(path) -> Scenario:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    return scenario_from_dict(cfg)
