"""TDOA-only constrained estimator used as the comparison method.

Solves  min_{d, q}  sum_i ((d_i - d_1 - tdoa_i)/sigma_i)^2 + delta*d_1^2
subject to ||q - p_i|| <= d_i.  For fixed (q, d_1) the inner optimum is the
closed form d_i = max(||q - p_i||, d_1 + tdoa_i); the outer problem is
nonconvex and is attacked with a coarse grid followed by simplex refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import _kernels as K
from .errors import Underdetermined
from .model import Problem


@dataclass(frozen=True)
class TdoaOnlyConfig:
    delta: float = 1e-4          # regularizer weight on d_1^2
    grid_nx: int = 128
    grid_ny: int = 128
    grid_nd1: int = 64
    bbox_inflation: float = 0.5  # fraction added around the node bounding box
    refine_steps: int = 100      # Nelder-Mead iterations after the grid

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class TdoaOnlyResult:
    q: np.ndarray
    d1: float
    objective: float
    path_lengths: np.ndarray  # inner-optimal d_i, including d_1


def inner_path_lengths(q, d1: float, problem: Problem) -> np.ndarray:
    """Closed-form inner solution for the per-node path lengths."""
    pos = np.array([nd.position for nd in problem.nodes])
    q = np.asarray(q, dtype=float)
    ranges = np.linalg.norm(pos - q, axis=1)
    d1e = max(d1, ranges[0])
    d = np.maximum(ranges, np.concatenate([[d1e], d1e + problem.meas.tdoa]))
    d[0] = d1e
    return d


def solve_tdoa_only(problem: Problem, config: TdoaOnlyConfig = TdoaOnlyConfig()) -> TdoaOnlyResult:
    """Grid search over (q, d_1) plus Nelder-Mead refinement."""
    if problem.n_nodes < 3:
        raise Underdetermined("TDOA-only needs at least 3 nodes for a 2-D fix")
    pos = np.array([nd.position for nd in problem.nodes])
    from .likelihood import effective_sigma

    sigma = np.array([effective_sigma(nd.sigma) for nd in problem.nodes])
    tdoa = np.asarray(problem.meas.tdoa, dtype=float)

    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    span = hi - lo
    lo = lo - config.bbox_inflation * span
    hi = hi + config.bbox_inflation * span
    diameter = float(np.linalg.norm(span))
    d1_extra = max(diameter, 2.0 * float(np.abs(tdoa).max(initial=0.0))) + 10.0 * sigma.max()

    qx, qy, d1, best = K.tdoa_grid_search(
        pos, sigma, tdoa, config.delta,
        lo[0], hi[0], lo[1], hi[1],
        config.grid_nx, config.grid_ny, config.grid_nd1, d1_extra,
    )

    def objective(z):
        return K.tdoa_objective(z[0], z[1], z[2], pos, sigma, tdoa, config.delta)

    res = minimize(
        objective,
        x0=np.array([qx, qy, d1]),
        method="Nelder-Mead",
        options={"maxiter": config.refine_steps, "xatol": 1e-8, "fatol": 1e-12},
    )
    if res.fun <= best:
        qx, qy, d1 = res.x
        best = float(res.fun)
    q = np.array([qx, qy])
    d = inner_path_lengths(q, d1, problem)
    return TdoaOnlyResult(q=q, d1=float(d[0]), objective=float(best), path_lengths=d)
