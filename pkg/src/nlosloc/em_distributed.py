"""Distributed EM: per-node Robbins-Monro statistic updates, randomized gossip
averaging of (s, t), three local M-steps, weight-matrix assumption validation,
and consensus diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .angles import wrap_pi
from .errors import DisconnectedTopology
from .likelihood import effective_sigma, scatterer_posterior, statistic_S, statistic_T
from .model import Problem, substream, _PURPOSE_GOSSIP, _PURPOSE_INIT


@dataclass(frozen=True)
class StepSchedule:
    """Robbins-Monro step sizes lambda_n = min(1, scale * n**-exponent).

    exponent in (0.5, 1] guarantees sum(lambda) = inf and sum(lambda^2) < inf;
    the clamp keeps every step a valid convex-combination weight.
    """

    scale: float = 1.0
    exponent: float = 0.7

    def __post_init__(self):
        if not 0.5 < self.exponent <= 1.0:
            raise ValueError("exponent must lie in (0.5, 1]")
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")

    def lambda_at(self, n: int) -> float:
        return min(1.0, self.scale * float(n) ** (-self.exponent))

    def lambdas(self, n_iter: int) -> np.ndarray:
        n = np.arange(1, n_iter + 1, dtype=float)
        return np.minimum(1.0, self.scale * n ** (-self.exponent))


@dataclass(frozen=True)
class Topology:
    """Gossip graph over the non-reference nodes (ids, undirected edges)."""

    node_ids: tuple
    edges: tuple

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        norm = set()
        for a, b in self.edges:
            if a == b or a not in self.node_ids or b not in self.node_ids:
                raise ValueError(f"bad edge ({a}, {b})")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", tuple(sorted(norm)))
        if not self.edges:
            raise ValueError("topology needs at least one edge")

    @classmethod
    def complete(cls, node_ids) -> "Topology":
        ids = tuple(node_ids)
        return cls(ids, tuple((a, b) for i, a in enumerate(ids) for b in ids[i + 1:]))

    @classmethod
    def ring(cls, node_ids) -> "Topology":
        ids = tuple(node_ids)
        return cls(ids, tuple((ids[i], ids[(i + 1) % len(ids)]) for i in range(len(ids))))

    @classmethod
    def star(cls, node_ids) -> "Topology":
        ids = tuple(node_ids)
        return cls(ids, tuple((ids[0], b) for b in ids[1:]))

    @classmethod
    def from_adjacency(cls, edges) -> "Topology":
        ids = sorted({v for e in edges for v in e})
        return cls(tuple(ids), tuple(tuple(e) for e in edges))

    def local_edges(self) -> np.ndarray:
        """Edges as index pairs into node_ids order."""
        index = {nid: i for i, nid in enumerate(self.node_ids)}
        return np.array([[index[a], index[b]] for a, b in self.edges], dtype=np.int64)

    def is_connected(self) -> bool:
        adj = {nid: set() for nid in self.node_ids}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        seen = {self.node_ids[0]}
        stack = [self.node_ids[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.node_ids)


@dataclass
class NodeState:
    """Per-node iterate: statistics (s, t) and local estimate (q, theta1, theta_i)."""

    node_id: int
    s: np.ndarray
    t: np.ndarray
    q: np.ndarray
    theta1: float
    theta_i: float
    iteration: int = 0

    def x_local(self) -> np.ndarray:
        return np.array([self.q[0], self.q[1], self.theta1, self.theta_i])


@dataclass(frozen=True)
class DistEMOptions:
    max_iter: int = 2000
    consensus_tol: float = 1e-2   # composite meters
    movement_tol: float = 1e-3    # meters of per-node q movement per iteration
    meters_per_radian: float | None = None  # angle weight in the disagreement norm
    divergence_factor: float = 10.0         # guard radius in network diameters
    gossip: str = "pairwise"                # "pairwise" | "matrix-file"
    gossip_matrix: np.ndarray | None = None


@dataclass
class DistEMResult:
    node_ids: tuple
    trajectories: np.ndarray      # (iterations+1, m, 4): qx, qy, theta1, theta_i
    disagreement_trace: np.ndarray
    movement_trace: np.ndarray
    iterations: int
    converged: bool
    singular_steps: int
    states: list

    @property
    def consensus_q(self) -> np.ndarray:
        return self.trajectories[self.iterations, :, :2].mean(axis=0)

    @property
    def final_disagreement(self) -> float:
        return float(self.disagreement_trace[self.iterations])


@dataclass(frozen=True)
class WeightReport:
    scheme: str
    row_ok: bool
    col_expect_ok: bool
    col_max_dev: float
    rho: float
    rho_ok: bool
    n_samples: int


# ---------------------------------------------------------------------------
# node-level operations (reference path; the kernel loop mirrors these)
# ---------------------------------------------------------------------------


def _node_view(problem: Problem, node_id: int):
    ids = [nd.id for nd in problem.nodes]
    i = ids.index(node_id)
    if i == 0:
        raise ValueError("reference node has no local EM state")
    nd = problem.nodes[i]
    return dict(
        d=float(problem.meas.tdoa[i - 1]),
        aoa=float(problem.meas.aoa[i]),
        p_i=nd.position,
        sigma_i=nd.sigma,
        p1=problem.nodes[0].position,
        gamma1=problem.meas.ref_gamma,
        support=problem.supports[i - 1],
    )


def posterior_at(state: NodeState, problem: Problem) -> np.ndarray:
    v = _node_view(problem, state.node_id)
    return scatterer_posterior(
        v["d"], state.q, state.theta1, state.theta_i, v["support"],
        p_i=v["p_i"], sigma_i=v["sigma_i"], p1=v["p1"], gamma1=v["gamma1"],
    )


def statistic_targets(state: NodeState, problem: Problem, weights=None):
    """Posterior-weighted statistic targets (s_bar, t_bar) at the node's estimate."""
    v = _node_view(problem, state.node_id)
    w = posterior_at(state, problem) if weights is None else weights
    sup = v["support"]
    sbar = np.zeros(6)
    tbar = np.zeros(2)
    for j, gam in enumerate(sup.angles):
        if w[j] <= 0.0:
            continue
        if abs(np.cos(state.theta_i - gam)) <= 1e-9:
            continue
        sbar += w[j] * statistic_S(
            v["d"], state.theta1, state.theta_i, gam,
            p_i=v["p_i"], sigma_i=v["sigma_i"], p1=v["p1"], gamma1=v["gamma1"],
        )
        tbar += w[j] * statistic_T(
            v["d"], state.q, state.theta_i, gam,
            p_i=v["p_i"], sigma_i=v["sigma_i"], p1=v["p1"], gamma1=v["gamma1"],
        )
    return sbar, tbar


def local_e_step(state: NodeState, problem: Problem, lambda_n: float):
    """Robbins-Monro statistic update s~ = s + lambda (s_bar - s), projected.

    Returns (new_state, posterior_weights); the weights are those evaluated at
    the pre-update estimate and feed the theta_i maximization of the same
    iteration.
    """
    if not 0.0 <= lambda_n <= 1.0:
        raise ValueError("lambda_n must lie in [0, 1]")
    w = posterior_at(state, problem)
    sbar, tbar = statistic_targets(state, problem, weights=w)
    s_tilde = state.s + lambda_n * (sbar - state.s)
    t_tilde = state.t + lambda_n * (tbar - state.t)
    K.project_s_inplace(s_tilde)
    K.clamp_t_inplace(t_tilde)
    return replace(state, s=s_tilde, t=t_tilde), w


def sample_pairwise_matrix(topology: Topology, rng) -> np.ndarray:
    """One pairwise-gossip mixing matrix: a random edge averages, others keep."""
    if not topology.is_connected():
        raise DisconnectedTopology("gossip topology must be connected")
    m = len(topology.node_ids)
    edges = topology.local_edges()
    a, b = edges[rng.integers(len(edges))]
    w = np.eye(m)
    w[a, a] = w[b, b] = 0.5
    w[a, b] = w[b, a] = 0.5
    return w


def gossip_round(states: list, w: np.ndarray) -> list:
    """Weighted averaging of the statistic pairs: s_i <- sum_j W[i,j] s_j."""
    m = len(states)
    if w.shape != (m, m):
        raise ValueError("mixing matrix shape mismatch")
    if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("mixing matrix must be row stochastic with nonnegative entries")
    s_all = np.array([st.s for st in states])
    t_all = np.array([st.t for st in states])
    s_new = w @ s_all
    t_new = w @ t_all
    return [replace(st, s=s_new[i], t=t_new[i]) for i, st in enumerate(states)]


def local_m_step(state: NodeState, problem: Problem, weights: np.ndarray) -> NodeState:
    """Maximize the three local objectives: q over the wedge union, theta1 and
    theta_i over their measurement boxes."""
    v = _node_view(problem, state.node_id)
    sup = v["support"]
    qx, qy, ok = K.q_from_s(state.s)
    if not ok:
        qx, qy = state.q
    elif not K.in_union(qx, qy, v["p_i"][0], v["p_i"][1], state.theta_i,
                        sup.angles, len(sup)):
        qx, qy = K.pga_union(state.s, qx, qy, v["p_i"][0], v["p_i"][1],
                             state.theta_i, sup.angles, len(sup), 200)
    lo1 = problem.meas.ref_aoa - problem.eta0
    hi1 = problem.meas.ref_aoa + problem.eta0
    theta1 = K.argmax_phi2(state.t[0], state.t[1], lo1, hi1, v["gamma1"])
    inv2 = 1.0 / (2.0 * effective_sigma(v["sigma_i"]) ** 2)
    lo = v["aoa"] - problem.eta0
    hi = v["aoa"] + problem.eta0
    theta_i = K.argmax_psibar(
        v["d"], qx, qy, theta1, v["p_i"][0], v["p_i"][1], v["p1"][0], v["p1"][1],
        v["gamma1"], inv2, sup.angles, len(sup), np.asarray(weights, dtype=float), lo, hi,
    )
    return replace(state, q=np.array([qx, qy]), theta1=float(theta1),
                   theta_i=float(theta_i), iteration=state.iteration + 1)


def disagreement(states: list, meters_per_radian: float = 1.0) -> float:
    """Max pairwise distance of the shared estimate components (q, theta1).

    Angle gaps are weighted by ``meters_per_radian`` (the driver uses the
    network diameter by default).  Per-node AOA components are excluded: they
    estimate different physical angles at different nodes.
    """
    worst = 0.0
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            dq = states[i].q - states[j].q
            dth = meters_per_radian * wrap_pi(states[i].theta1 - states[j].theta1)
            worst = max(worst, math.sqrt(float(dq @ dq) + dth * dth))
    return worst


# ---------------------------------------------------------------------------
# weight-matrix assumption validation
# ---------------------------------------------------------------------------


def validate_weight_assumptions(
    topology: Topology,
    scheme: str = "pairwise",
    n_samples: int = 10000,
    seed: int = 0,
) -> WeightReport:
    """Empirically check the mixing-weight assumptions for a gossip scheme.

    Row sums are checked exactly on every sampled matrix; column sums of the
    sampled mean are compared against 1 within 3 Monte-Carlo standard errors;
    the contraction coefficient rho (spectral norm of E[W' (I - 11'/m) W]) is
    computed exactly by edge enumeration for the pairwise scheme and from the
    sample mean otherwise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    m = len(topology.node_ids)
    centering = np.eye(m) - np.ones((m, m)) / m

    def matrices_exact():
        if scheme == "pairwise":
            edges = topology.local_edges()
            out = []
            for a, b in edges:
                w = np.eye(m)
                w[a, a] = w[b, b] = 0.5
                w[a, b] = w[b, a] = 0.5
                out.append(w)
            return out
        if scheme == "identity":
            return [np.eye(m)]
        raise ValueError(f"unknown scheme {scheme!r}")

    exact = matrices_exact()
    row_ok = all(np.array_equal(w.sum(axis=1), np.ones(m)) for w in exact)
    second_moment = sum(w.T @ centering @ w for w in exact) / len(exact)
    rho = float(np.linalg.norm(second_moment, 2))

    rng = substream(seed, 0, _PURPOSE_GOSSIP)
    col_sums = np.zeros((n_samples, m))
    for k in range(n_samples):
        if scheme == "pairwise":
            w = sample_pairwise_matrix(topology, rng)
        else:
            w = np.eye(m)
        col_sums[k] = w.sum(axis=0)
    mean_dev = col_sums.mean(axis=0) - 1.0
    se = col_sums.std(axis=0, ddof=1) / math.sqrt(n_samples) if n_samples > 1 else np.zeros(m)
    col_ok = bool(np.all(np.abs(mean_dev) <= 3.0 * se + 1e-12))
    return WeightReport(
        scheme=scheme,
        row_ok=bool(row_ok),
        col_expect_ok=col_ok,
        col_max_dev=float(np.abs(mean_dev).max()),
        rho=rho,
        rho_ok=rho < 1.0,
        n_samples=n_samples,
    )


# ---------------------------------------------------------------------------
# full driver
# ---------------------------------------------------------------------------


def initialize_states(problem: Problem, seed: int = 0) -> list:
    """Per-node initial states: jittered centroid, measured AOAs, statistics
    primed at their targets (equivalent to a first step with lambda = 1)."""
    pos = np.array([nd.position for nd in problem.nodes])
    centroid = pos.mean(axis=0)
    radius = 0.5 * problem.network_diameter()
    states = []
    for i, nd in enumerate(problem.nodes[1:], start=1):
        rng = substream(seed, nd.id, _PURPOSE_INIT)
        r = radius * math.sqrt(rng.uniform())
        ang = rng.uniform(0.0, 2.0 * math.pi)
        q0 = centroid + r * np.array([math.cos(ang), math.sin(ang)])
        st = NodeState(
            node_id=nd.id,
            s=np.zeros(6),
            t=np.zeros(2),
            q=q0,
            theta1=float(problem.meas.ref_aoa),
            theta_i=float(problem.meas.aoa[i]),
        )
        sbar, tbar = statistic_targets(st, problem)
        K.project_s_inplace(sbar)
        K.clamp_t_inplace(tbar)
        states.append(replace(st, s=sbar, t=tbar))
    return states


def run_distributed(
    problem: Problem,
    topology: Topology | None = None,
    schedule: StepSchedule = StepSchedule(),
    opts: DistEMOptions = DistEMOptions(),
    seed: int = 0,
) -> DistEMResult:
    """Run the full distributed EM loop (kernel-accelerated).

    Per iteration: local E-step at every node, one sampled gossip exchange,
    local M-step at every node.  Stops when the disagreement falls below
    ``consensus_tol`` and per-node movement below ``movement_tol``; flags
    ``converged=False`` at the iteration cap or when the divergence guard
    trips.  Fully deterministic given (problem, topology, schedule, seed).
    """
    ids = tuple(nd.id for nd in problem.nodes[1:])
    if topology is None:
        topology = Topology.complete(ids)
    if tuple(topology.node_ids) != ids:
        raise ValueError("topology node ids must match the non-reference nodes in order")
    if not topology.is_connected():
        raise DisconnectedTopology("gossip topology must be connected")

    packed = K.pack_problem(problem)
    p, sigma, d_tilde, aoa_i, p1, gamma1, aoa1, eta0, sup_ang, sup_logpri, sup_cnt = packed
    m = len(ids)
    n_iter = opts.max_iter
    lambdas = schedule.lambdas(n_iter)

    states = initialize_states(problem, seed=seed)
    x0 = np.array([st.x_local() for st in states])
    s0 = np.array([st.s for st in states])
    t0 = np.array([st.t for st in states])

    use_pairwise = opts.gossip == "pairwise"
    if use_pairwise:
        edges = topology.local_edges()
        rng = substream(seed, 0, _PURPOSE_GOSSIP)
        picks = rng.integers(0, len(edges), size=n_iter)
        edge_a = edges[picks, 0].astype(np.int64)
        edge_b = edges[picks, 1].astype(np.int64)
        w_fixed = np.eye(m)
    else:
        if opts.gossip_matrix is None:
            raise ValueError("matrix-file gossip requires opts.gossip_matrix")
        w_fixed = np.asarray(opts.gossip_matrix, dtype=float)
        if w_fixed.shape != (m, m) or np.any(w_fixed < 0) or not np.allclose(
            w_fixed.sum(axis=1), 1.0, atol=1e-12
        ):
            raise ValueError("gossip matrix must be row stochastic over the non-reference nodes")
        edge_a = np.zeros(n_iter, dtype=np.int64)
        edge_b = np.zeros(n_iter, dtype=np.int64)

    diam = problem.network_diameter()
    mpr = opts.meters_per_radian if opts.meters_per_radian is not None else diam
    pos = np.array([nd.position for nd in problem.nodes])
    centroid = pos.mean(axis=0)

    traj = np.zeros((n_iter + 1, m, 4))
    dis = np.zeros(n_iter + 1)
    mov = np.zeros(n_iter + 1)
    done, converged, n_sing, s_fin, t_fin = K.distributed_loop(
        p, sigma, d_tilde, aoa_i, p1, gamma1, aoa1, eta0,
        sup_ang, sup_logpri, sup_cnt,
        x0, s0, t0,
        lambdas, edge_a, edge_b, w_fixed, use_pairwise,
        opts.consensus_tol, opts.movement_tol, mpr,
        opts.divergence_factor * diam, centroid[0], centroid[1],
        traj, dis, mov,
    )
    final_states = [
        NodeState(
            node_id=ids[i],
            s=s_fin[i].copy(),
            t=t_fin[i].copy(),
            q=traj[done, i, :2].copy(),
            theta1=float(traj[done, i, 2]),
            theta_i=float(traj[done, i, 3]),
            iteration=int(done),
        )
        for i in range(m)
    ]
    return DistEMResult(
        node_ids=ids,
        trajectories=traj[: done + 1],
        disagreement_trace=dis[: done + 1],
        movement_trace=mov[: done + 1],
        iterations=int(done),
        converged=bool(converged),
        singular_steps=int(n_sing),
        states=final_states,
    )


def run_distributed_reference(
    problem: Problem,
    topology: Topology | None = None,
    schedule: StepSchedule = StepSchedule(),
    opts: DistEMOptions = DistEMOptions(),
    seed: int = 0,
) -> DistEMResult:
    """Pure-Python reference loop built from the public node-level operations.

    Slow; exists to pin the kernel driver's semantics in tests.  Uses the same
    seed-derived initialization and gossip edge sequence as run_distributed.
    """
    ids = tuple(nd.id for nd in problem.nodes[1:])
    if topology is None:
        topology = Topology.complete(ids)
    edges = topology.local_edges()
    rng = substream(seed, 0, _PURPOSE_GOSSIP)
    picks = rng.integers(0, len(edges), size=opts.max_iter)
    states = initialize_states(problem, seed=seed)
    m = len(states)
    diam = problem.network_diameter()
    mpr = opts.meters_per_radian if opts.meters_per_radian is not None else diam
    pos = np.array([nd.position for nd in problem.nodes])
    centroid = pos.mean(axis=0)
    traj = [np.array([st.x_local() for st in states])]
    dis = [disagreement(states, mpr)]
    mov = [0.0]
    converged = False
    done = 0
    for n in range(opts.max_iter):
        lam = schedule.lambda_at(n + 1)
        stepped = []
        weights = []
        for st in states:
            new_st, w = local_e_step(st, problem, lam)
            stepped.append(new_st)
            weights.append(w)
        a, b = edges[picks[n]]
        w_mat = np.eye(m)
        w_mat[a, a] = w_mat[b, b] = 0.5
        w_mat[a, b] = w_mat[b, a] = 0.5
        mixed = gossip_round(stepped, w_mat)
        new_states = [
            local_m_step(mixed[i], problem, weights[i]) for i in range(m)
        ]
        move = max(
            float(np.linalg.norm(new_states[i].q - states[i].q)) for i in range(m)
        )
        states = new_states
        traj.append(np.array([st.x_local() for st in states]))
        d = disagreement(states, mpr)
        dis.append(d)
        mov.append(move)
        done = n + 1
        if any(np.linalg.norm(st.q - centroid) > opts.divergence_factor * diam for st in states):
            converged = False
            break
        if d < opts.consensus_tol and move < opts.movement_tol:
            converged = True
            break
    return DistEMResult(
        node_ids=ids,
        trajectories=np.array(traj),
        disagreement_trace=np.array(dis),
        movement_trace=np.array(mov),
        iterations=done,
        converged=converged,
        singular_steps=0,
        states=states,
    )
