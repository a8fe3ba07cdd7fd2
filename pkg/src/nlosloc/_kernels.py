"""Hot numeric kernels.

Everything here is written in numba-compatible scalar/loop style and compiled
with ``@maybe_njit`` (numba when available and enabled, plain Python/numpy
otherwise -- see ``_accel``).  Public modules delegate their inner loops to
these kernels; the readable numpy implementations in ``likelihood``/``model``
define the semantics and the test suite pins the two against each other.

Array packing convention (see ``pack_problem``): non-reference nodes are
indexed 0..m-1 in node order; support sets are padded to a common width with
counts alongside.  Per-node local estimates are rows [qx, qy, theta1, theta_i].
"""

import math

import numpy as np

from ._accel import maybe_njit

EPS_SING = 1e-9
WEDGE_TOL = 1e-6
ACTIVE_W = 1e-12
T_CLAMP = 1e12
SING_EIG_TOL = 1e-10
SING_REL_TOL = 1e-12
NEG_HUGE = -1e300
GRID_N = 256
GOLDEN_N = 40
INVPHI = 0.6180339887498949


def pack_problem(problem):
    """Flatten a Problem into plain float64 arrays for the kernels."""
    from .likelihood import effective_sigma

    nodes = problem.nodes[1:]
    m = len(nodes)
    p = np.array([nd.position for nd in nodes], dtype=np.float64).reshape(m, 2)
    sigma = np.array([effective_sigma(nd.sigma) for nd in nodes], dtype=np.float64)
    d_tilde = np.asarray(problem.meas.tdoa, dtype=np.float64).copy()
    aoa_i = np.asarray(problem.meas.aoa[1:], dtype=np.float64).copy()
    p1 = np.asarray(problem.nodes[0].position, dtype=np.float64).copy()
    gamma1 = float(problem.meas.ref_gamma)
    aoa1 = float(problem.meas.aoa[0])
    eta0 = float(problem.eta0)
    mx = max(len(s) for s in problem.supports)
    sup_ang = np.zeros((m, mx), dtype=np.float64)
    sup_logpri = np.full((m, mx), NEG_HUGE, dtype=np.float64)
    sup_cnt = np.zeros(m, dtype=np.int64)
    for i, s in enumerate(problem.supports):
        k = len(s)
        sup_cnt[i] = k
        sup_ang[i, :k] = s.angles
        pri = np.maximum(s.prior, 1e-300)
        sup_logpri[i, :k] = np.where(s.prior > 0, np.log(pri), NEG_HUGE)
    return p, sigma, d_tilde, aoa_i, p1, gamma1, aoa1, eta0, sup_ang, sup_logpri, sup_cnt


@maybe_njit(cache=True)
def wrap_pi_s(a):
    return a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))


@maybe_njit(cache=True)
def wedge_ok_s(qx, qy, px, py, theta, gamma):
    vx = qx - px
    vy = qy - py
    if vx == 0.0 and vy == 0.0:
        return False
    psi = math.atan2(vy, vx)
    delta = wrap_pi_s(2.0 * gamma - 2.0 * theta)
    u = wrap_pi_s(psi - theta)
    if abs(delta) <= WEDGE_TOL:
        return abs(u) <= WEDGE_TOL
    if delta > 0.0:
        return (u >= -WEDGE_TOL) and (u <= delta + WEDGE_TOL)
    return (u >= delta - WEDGE_TOL) and (u <= WEDGE_TOL)


@maybe_njit(cache=True)
def gauss_ll_s(d, qx, qy, th1, thi, gam, px, py, p1x, p1y, gamma1, inv2s2):
    ci = math.cos(thi - gam)
    c1 = math.cos(th1 - gamma1)
    if abs(ci) <= EPS_SING or abs(c1) <= EPS_SING:
        return NEG_HUGE
    gix = math.cos(gam) / ci
    giy = math.sin(gam) / ci
    g1x = math.cos(gamma1) / c1
    g1y = math.sin(gamma1) / c1
    resid = d - (gix * (qx - px) + giy * (qy - py)) + (g1x * (qx - p1x) + g1y * (qy - p1y))
    return -resid * resid * inv2s2


@maybe_njit(cache=True)
def posterior_node(d, qx, qy, th1, thi, px, py, p1x, p1y, gamma1, inv2s2,
                   angles, logpri, cnt, w_out):
    """Scatterer posterior for one node; mirrors likelihood.scatterer_posterior."""
    mx = w_out.shape[0]
    ll = np.empty(mx)
    best_feas = NEG_HUGE
    best_any = NEG_HUGE
    for j in range(mx):
        w_out[j] = 0.0
        ll[j] = NEG_HUGE
    for j in range(cnt):
        gam = angles[j]
        v = gauss_ll_s(d, qx, qy, th1, thi, gam, px, py, p1x, p1y, gamma1, inv2s2)
        if v <= NEG_HUGE or logpri[j] <= NEG_HUGE:
            continue
        lw = v + logpri[j]
        ll[j] = lw
        if lw > best_any:
            best_any = lw
        if wedge_ok_s(qx, qy, px, py, thi, gam):
            if lw > best_feas:
                best_feas = lw
    if best_feas > NEG_HUGE:
        tot = 0.0
        for j in range(cnt):
            if ll[j] > NEG_HUGE and wedge_ok_s(qx, qy, px, py, thi, angles[j]):
                w_out[j] = math.exp(ll[j] - best_feas)
                tot += w_out[j]
        for j in range(cnt):
            w_out[j] /= tot
        return
    if best_any > NEG_HUGE:
        tot = 0.0
        for j in range(cnt):
            if ll[j] > NEG_HUGE:
                w_out[j] = math.exp(ll[j] - best_any)
                tot += w_out[j]
        for j in range(cnt):
            w_out[j] /= tot
        return
    # prior fallback
    tot = 0.0
    for j in range(cnt):
        if logpri[j] > NEG_HUGE:
            w_out[j] = math.exp(logpri[j])
            tot += w_out[j]
    if tot > 0.0:
        for j in range(cnt):
            w_out[j] /= tot


@maybe_njit(cache=True)
def sbar_tbar_node(d, qx, qy, th1, thi, px, py, p1x, p1y, gamma1, inv2s2,
                   angles, cnt, w, s_out, t_out):
    """Posterior-weighted statistics s_bar (6,) and t_bar (2,) for one node."""
    for k in range(6):
        s_out[k] = 0.0
    t_out[0] = 0.0
    t_out[1] = 0.0
    c1 = math.cos(th1 - gamma1)
    if abs(c1) <= EPS_SING:
        return
    g1x = math.cos(gamma1) / c1
    g1y = math.sin(gamma1) / c1
    k1x = math.cos(gamma1)
    k1y = math.sin(gamma1)
    m1 = k1x * (qx - p1x) + k1y * (qy - p1y)
    for j in range(cnt):
        wj = w[j]
        if wj <= 0.0:
            continue
        gam = angles[j]
        ci = math.cos(thi - gam)
        if abs(ci) <= EPS_SING:
            continue
        gix = math.cos(gam) / ci
        giy = math.sin(gam) / ci
        gdx = gix - g1x
        gdy = giy - g1y
        a = d + (gix * px + giy * py) - (g1x * p1x + g1y * p1y)
        s_out[0] += wj * (-inv2s2) * gdx * gdx
        s_out[1] += wj * (-inv2s2) * gdy * gdx
        s_out[2] += wj * (-inv2s2) * gdx * gdy
        s_out[3] += wj * (-inv2s2) * gdy * gdy
        s_out[4] += wj * (-2.0) * (-inv2s2) * a * gdx
        s_out[5] += wj * (-2.0) * (-inv2s2) * a * gdy
        e_res = d - (gix * (qx - px) + giy * (qy - py))
        t_out[0] += wj * (-inv2s2) * m1 * m1
        t_out[1] += wj * (-inv2s2) * 2.0 * e_res * m1


@maybe_njit(cache=True)
def project_s_inplace(s):
    """Project s onto the statistic set: symmetrize U and clamp its eigenvalues to <= 0."""
    a = s[0]
    b = 0.5 * (s[1] + s[2])
    c = s[3]
    half_tr = 0.5 * (a + c)
    rad = math.sqrt(0.25 * (a - c) * (a - c) + b * b)
    lam_hi = half_tr + rad
    lam_lo = half_tr - rad
    if lam_hi <= 0.0:
        s[1] = b
        s[2] = b
        return
    # eigenvector for lam_hi
    if abs(b) > 1e-300:
        vx = lam_hi - c
        vy = b
    elif a >= c:
        vx = 1.0
        vy = 0.0
    else:
        vx = 0.0
        vy = 1.0
    nrm = math.sqrt(vx * vx + vy * vy)
    if nrm == 0.0:
        vx = 1.0
        vy = 0.0
        nrm = 1.0
    vx /= nrm
    vy /= nrm
    lam_lo = min(lam_lo, 0.0)
    # keep only the non-positive eigen-direction
    wx = -vy
    wy = vx
    s[0] = lam_lo * wx * wx
    s[1] = lam_lo * wx * wy
    s[2] = lam_lo * wx * wy
    s[3] = lam_lo * wy * wy


@maybe_njit(cache=True)
def clamp_t_inplace(t):
    for k in range(2):
        if t[k] > T_CLAMP:
            t[k] = T_CLAMP
        elif t[k] < -T_CLAMP:
            t[k] = -T_CLAMP


@maybe_njit(cache=True)
def q_from_s(s):
    """Solve U q = V from a packed statistic; returns (qx, qy, ok)."""
    u00 = s[0]
    u10 = 0.5 * (s[1] + s[2])
    u11 = s[3]
    vx = -0.5 * s[4]
    vy = -0.5 * s[5]
    half_tr = 0.5 * (u00 + u11)
    rad = math.sqrt(0.25 * (u00 - u11) * (u00 - u11) + u10 * u10)
    det = u00 * u11 - u10 * u10
    scale = abs(u00) + abs(u11) + 2.0 * abs(u10)
    # absolute eigenvalue floor per the diagnostic contract, plus a relative
    # determinant test that catches rank deficiency at any statistic scale
    if (
        min(abs(half_tr + rad), abs(half_tr - rad)) < SING_EIG_TOL
        or abs(det) <= SING_REL_TOL * scale * scale
    ):
        return 0.0, 0.0, False
    qx = (u11 * vx - u10 * vy) / det
    qy = (u00 * vy - u10 * vx) / det
    return qx, qy, True


@maybe_njit(cache=True)
def project_wedge(qx, qy, px, py, theta, gamma):
    """Euclidean projection onto one wedge cone (apex at the node)."""
    vx = qx - px
    vy = qy - py
    if wedge_ok_s(qx, qy, px, py, theta, gamma):
        return qx, qy
    phi = 2.0 * gamma - theta
    bestx = 0.0
    besty = 0.0
    bestd = vx * vx + vy * vy  # apex projection
    for edge in range(2):
        ang = theta if edge == 0 else phi
        ex = math.cos(ang)
        ey = math.sin(ang)
        dot = vx * ex + vy * ey
        if dot < 0.0:
            dot = 0.0
        cx = dot * ex
        cy = dot * ey
        dd = (vx - cx) * (vx - cx) + (vy - cy) * (vy - cy)
        if dd < bestd:
            bestd = dd
            bestx = cx
            besty = cy
    return px + bestx, py + besty


@maybe_njit(cache=True)
def project_wedge_union(qx, qy, px, py, theta, angles, cnt):
    """Projection onto the union of a node's wedges (nearest member wins)."""
    bestx = qx
    besty = qy
    bestd = 1e308
    for j in range(cnt):
        cx, cy = project_wedge(qx, qy, px, py, theta, angles[j])
        dd = (qx - cx) * (qx - cx) + (qy - cy) * (qy - cy)
        if dd < bestd:
            bestd = dd
            bestx = cx
            besty = cy
    return bestx, besty


@maybe_njit(cache=True)
def in_union(qx, qy, px, py, theta, angles, cnt):
    for j in range(cnt):
        if wedge_ok_s(qx, qy, px, py, theta, angles[j]):
            return True
    return False


@maybe_njit(cache=True)
def quad_value(s, qx, qy):
    u00 = s[0]
    u10 = 0.5 * (s[1] + s[2])
    u11 = s[3]
    vx = -0.5 * s[4]
    vy = -0.5 * s[5]
    return (u00 * qx * qx + 2.0 * u10 * qx * qy + u11 * qy * qy) - 2.0 * (vx * qx + vy * qy)


COORD_CLAMP = 1e9  # keeps ascent iterates finite; the divergence guard reports such runs


@maybe_njit(cache=True)
def _clamp_coord(v):
    if v > COORD_CLAMP:
        return COORD_CLAMP
    if v < -COORD_CLAMP:
        return -COORD_CLAMP
    return v


@maybe_njit(cache=True)
def pga_union(s, qx0, qy0, px, py, theta, angles, cnt, n_steps):
    """Projected gradient ascent of the quadratic s.phi1 over one node's wedge union."""
    u00 = s[0]
    u10 = 0.5 * (s[1] + s[2])
    u11 = s[3]
    vx = -0.5 * s[4]
    vy = -0.5 * s[5]
    lip = 2.0 * (abs(u00) + abs(u10) + abs(u11)) + 1e-30
    step = 1.0 / lip
    qx, qy = project_wedge_union(_clamp_coord(qx0), _clamp_coord(qy0), px, py, theta, angles, cnt)
    best = quad_value(s, qx, qy)
    bx = qx
    by = qy
    for _ in range(n_steps):
        gx = 2.0 * (u00 * qx + u10 * qy - vx)
        gy = 2.0 * (u10 * qx + u11 * qy - vy)
        eta = step
        improved = False
        for _ in range(25):
            cx, cy = project_wedge_union(
                _clamp_coord(qx + eta * gx), _clamp_coord(qy + eta * gy),
                px, py, theta, angles, cnt,
            )
            val = quad_value(s, cx, cy)
            if val > best:
                qx = cx
                qy = cy
                best = val
                bx = cx
                by = cy
                improved = True
                break
            eta *= 0.5
        if not improved:
            break
    return bx, by


@maybe_njit(cache=True)
def phi2_obj(t0, t1, th, gamma1):
    c = math.cos(th - gamma1)
    if abs(c) <= EPS_SING:
        return NEG_HUGE
    return t0 / (c * c) + t1 / c


@maybe_njit(cache=True)
def argmax_phi2(t0, t1, lo, hi, gamma1):
    """Grid + golden-section maximization of t.phi2 over [lo, hi]."""
    if hi <= lo:
        return lo
    best = NEG_HUGE
    besti = 0
    h = (hi - lo) / (GRID_N - 1)
    for k in range(GRID_N):
        th = lo + k * h
        v = phi2_obj(t0, t1, th, gamma1)
        if v > best:
            best = v
            besti = k
    a = lo + (besti - 1) * h
    b = lo + (besti + 1) * h
    if a < lo:
        a = lo
    if b > hi:
        b = hi
    c = b - (b - a) * INVPHI
    d = a + (b - a) * INVPHI
    fc = phi2_obj(t0, t1, c, gamma1)
    fd = phi2_obj(t0, t1, d, gamma1)
    for _ in range(GOLDEN_N):
        if fc > fd:
            b = d
            d = c
            fd = fc
            c = b - (b - a) * INVPHI
            fc = phi2_obj(t0, t1, c, gamma1)
        else:
            a = c
            c = d
            fc = fd
            d = a + (b - a) * INVPHI
            fd = phi2_obj(t0, t1, d, gamma1)
    th = 0.5 * (a + b)
    if phi2_obj(t0, t1, th, gamma1) >= best:
        return th
    return lo + besti * h


@maybe_njit(cache=True)
def psibar_obj(th, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w):
    tot = 0.0
    for j in range(cnt):
        if w[j] <= 0.0:
            continue
        v = gauss_ll_s(d, qx, qy, th1, th, angles[j], px, py, p1x, p1y, gamma1, inv2s2)
        if v <= NEG_HUGE:
            return NEG_HUGE
        tot += w[j] * v
    return tot


@maybe_njit(cache=True)
def argmax_psibar(d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2,
                  angles, cnt, w, lo, hi):
    """Grid + golden-section maximization of the posterior-weighted local log-likelihood in theta_i."""
    if hi <= lo:
        return lo
    best = NEG_HUGE
    besti = 0
    h = (hi - lo) / (GRID_N - 1)
    for k in range(GRID_N):
        th = lo + k * h
        v = psibar_obj(th, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w)
        if v > best:
            best = v
            besti = k
    a = lo + (besti - 1) * h
    b = lo + (besti + 1) * h
    if a < lo:
        a = lo
    if b > hi:
        b = hi
    c = b - (b - a) * INVPHI
    dd = a + (b - a) * INVPHI
    fc = psibar_obj(c, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w)
    fd = psibar_obj(dd, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w)
    for _ in range(GOLDEN_N):
        if fc > fd:
            b = dd
            dd = c
            fd = fc
            c = b - (b - a) * INVPHI
            fc = psibar_obj(c, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w)
        else:
            a = c
            c = dd
            fc = fd
            dd = a + (b - a) * INVPHI
            fd = psibar_obj(dd, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w)
    th = 0.5 * (a + b)
    if psibar_obj(th, d, qx, qy, th1, px, py, p1x, p1y, gamma1, inv2s2, angles, cnt, w) >= best:
        return th
    return lo + besti * h


# ---------------------------------------------------------------------------
# distributed EM driver
# ---------------------------------------------------------------------------


@maybe_njit(cache=True)
def distributed_loop(
    p, sigma, d_tilde, aoa_i, p1, gamma1, aoa1, eta0,
    sup_ang, sup_logpri, sup_cnt,
    x0, s0, t0,
    lambdas, edge_a, edge_b, w_fixed, use_pairwise,
    consensus_tol, move_tol, mpr, guard_radius, cx, cy,
    traj, disagree, movement,
):
    """Full distributed EM iteration loop.

    Per iteration: local E-step (posterior, statistics, Robbins-Monro update,
    projection), one gossip exchange, local M-step (q solve over the wedge
    union, two bounded 1-D searches).  Trajectories and the disagreement trace
    are written in place; returns (iterations_done, converged, singular_count).
    """
    m = p.shape[0]
    mx = sup_ang.shape[1]
    n_iter = lambdas.shape[0]
    inv2 = np.empty(m)
    for i in range(m):
        inv2[i] = 1.0 / (2.0 * sigma[i] * sigma[i])
    x = x0.copy()
    s = s0.copy()
    t = t0.copy()
    s_tilde = np.zeros((m, 6))
    t_tilde = np.zeros((m, 2))
    w_all = np.zeros((m, mx))
    sbar = np.zeros(6)
    tbar = np.zeros(2)
    lo1 = aoa1 - eta0
    hi1 = aoa1 + eta0
    n_sing = 0
    converged = False
    done = 0
    for i in range(m):
        for k in range(4):
            traj[0, i, k] = x[i, k]
    disagree[0] = _disagreement(x, mpr)
    movement[0] = 0.0

    for n in range(n_iter):
        lam = lambdas[n]
        # --- local E-step ---
        for i in range(m):
            posterior_node(
                d_tilde[i], x[i, 0], x[i, 1], x[i, 2], x[i, 3],
                p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2[i],
                sup_ang[i], sup_logpri[i], sup_cnt[i], w_all[i],
            )
            sbar_tbar_node(
                d_tilde[i], x[i, 0], x[i, 1], x[i, 2], x[i, 3],
                p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2[i],
                sup_ang[i], sup_cnt[i], w_all[i], sbar, tbar,
            )
            for k in range(6):
                s_tilde[i, k] = s[i, k] + lam * (sbar[k] - s[i, k])
            for k in range(2):
                t_tilde[i, k] = t[i, k] + lam * (tbar[k] - t[i, k])
            project_s_inplace(s_tilde[i])
            clamp_t_inplace(t_tilde[i])
        # --- gossip step ---
        if use_pairwise:
            a = edge_a[n]
            b = edge_b[n]
            for i in range(m):
                for k in range(6):
                    s[i, k] = s_tilde[i, k]
                for k in range(2):
                    t[i, k] = t_tilde[i, k]
            for k in range(6):
                avg = 0.5 * s_tilde[a, k] + 0.5 * s_tilde[b, k]
                s[a, k] = avg
                s[b, k] = avg
            for k in range(2):
                avg = 0.5 * t_tilde[a, k] + 0.5 * t_tilde[b, k]
                t[a, k] = avg
                t[b, k] = avg
        else:
            for i in range(m):
                for k in range(6):
                    acc = 0.0
                    for j in range(m):
                        acc += w_fixed[i, j] * s_tilde[j, k]
                    s[i, k] = acc
                for k in range(2):
                    acc = 0.0
                    for j in range(m):
                        acc += w_fixed[i, j] * t_tilde[j, k]
                    t[i, k] = acc
        # --- local M-step ---
        max_move = 0.0
        diverged = False
        for i in range(m):
            qx, qy, ok = q_from_s(s[i])
            if not ok:
                n_sing += 1
                qx = x[i, 0]
                qy = x[i, 1]
            elif not in_union(qx, qy, p[i, 0], p[i, 1], x[i, 3], sup_ang[i], sup_cnt[i]):
                qx, qy = pga_union(
                    s[i], qx, qy, p[i, 0], p[i, 1], x[i, 3], sup_ang[i], sup_cnt[i], 200
                )
            th1 = argmax_phi2(t[i, 0], t[i, 1], lo1, hi1, gamma1)
            loi = aoa_i[i] - eta0
            hii = aoa_i[i] + eta0
            thi = argmax_psibar(
                d_tilde[i], qx, qy, th1, p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2[i],
                sup_ang[i], sup_cnt[i], w_all[i], loi, hii,
            )
            mv = math.sqrt((qx - x[i, 0]) ** 2 + (qy - x[i, 1]) ** 2)
            if mv > max_move:
                max_move = mv
            x[i, 0] = qx
            x[i, 1] = qy
            x[i, 2] = th1
            x[i, 3] = thi
            if math.sqrt((qx - cx) ** 2 + (qy - cy) ** 2) > guard_radius:
                diverged = True
        for i in range(m):
            for k in range(4):
                traj[n + 1, i, k] = x[i, k]
        dis = _disagreement(x, mpr)
        disagree[n + 1] = dis
        movement[n + 1] = max_move
        done = n + 1
        if diverged:
            converged = False
            break
        if dis < consensus_tol and max_move < move_tol:
            converged = True
            break
    return done, converged, n_sing, s, t


@maybe_njit(cache=True)
def _disagreement(x, mpr):
    """Max pairwise distance over the shared components (q, theta1)."""
    m = x.shape[0]
    worst = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            dq = (x[i, 0] - x[j, 0]) ** 2 + (x[i, 1] - x[j, 1]) ** 2
            dth = mpr * wrap_pi_s(x[i, 2] - x[j, 2])
            v = math.sqrt(dq + dth * dth)
            if v > worst:
                worst = v
    return worst


# ---------------------------------------------------------------------------
# centralized EM kernels
# ---------------------------------------------------------------------------


@maybe_njit(cache=True)
def estep_all(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_logpri, sup_cnt,
              qx, qy, theta, w_out):
    """Posterior weights for every non-reference node at the shared estimate."""
    m = p.shape[0]
    for i in range(m):
        inv2 = 1.0 / (2.0 * sigma[i] * sigma[i])
        posterior_node(
            d_tilde[i], qx, qy, theta[0], theta[i + 1],
            p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2,
            sup_ang[i], sup_logpri[i], sup_cnt[i], w_out[i],
        )


@maybe_njit(cache=True)
def q_value(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_logpri, sup_cnt,
            qx, qy, theta, w):
    """Expected complete-data objective under fixed weights (indicators included)."""
    m = p.shape[0]
    tot = 0.0
    for i in range(m):
        inv2 = 1.0 / (2.0 * sigma[i] * sigma[i])
        for j in range(sup_cnt[i]):
            wj = w[i, j]
            if wj <= ACTIVE_W:
                continue
            gam = sup_ang[i, j]
            if not wedge_ok_s(qx, qy, p[i, 0], p[i, 1], theta[i + 1], gam):
                return NEG_HUGE
            v = gauss_ll_s(
                d_tilde[i], qx, qy, theta[0], theta[i + 1], gam,
                p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2,
            )
            if v <= NEG_HUGE:
                return NEG_HUGE
            tot += wj * (v + sup_logpri[i, j])
    return tot


@maybe_njit(cache=True)
def _aggregate_uv(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_cnt, theta, w):
    u00 = 0.0
    u10 = 0.0
    u11 = 0.0
    vx = 0.0
    vy = 0.0
    m = p.shape[0]
    c1 = math.cos(theta[0] - gamma1)
    if abs(c1) <= EPS_SING:
        return u00, u10, u11, vx, vy
    g1x = math.cos(gamma1) / c1
    g1y = math.sin(gamma1) / c1
    for i in range(m):
        inv2 = 1.0 / (2.0 * sigma[i] * sigma[i])
        for j in range(sup_cnt[i]):
            wj = w[i, j]
            if wj <= 0.0:
                continue
            gam = sup_ang[i, j]
            ci = math.cos(theta[i + 1] - gam)
            if abs(ci) <= EPS_SING:
                continue
            gix = math.cos(gam) / ci
            giy = math.sin(gam) / ci
            gdx = gix - g1x
            gdy = giy - g1y
            a = d_tilde[i] + (gix * p[i, 0] + giy * p[i, 1]) - (g1x * p1[0] + g1y * p1[1])
            u00 += wj * (-inv2) * gdx * gdx
            u10 += wj * (-inv2) * gdx * gdy
            u11 += wj * (-inv2) * gdy * gdy
            vx += wj * (-inv2) * a * gdx
            vy += wj * (-inv2) * a * gdy
    return u00, u10, u11, vx, vy


@maybe_njit(cache=True)
def _pocs_active(qx, qy, p, sup_ang, sup_cnt, theta, w, n_sweeps):
    """Cyclic projection onto the intersection of all active wedges."""
    m = p.shape[0]
    for _ in range(n_sweeps):
        moved = False
        for i in range(m):
            for j in range(sup_cnt[i]):
                if w[i, j] <= ACTIVE_W:
                    continue
                if not wedge_ok_s(qx, qy, p[i, 0], p[i, 1], theta[i + 1], sup_ang[i, j]):
                    qx, qy = project_wedge(qx, qy, p[i, 0], p[i, 1], theta[i + 1], sup_ang[i, j])
                    moved = True
        if not moved:
            return qx, qy, True
    ok = True
    for i in range(m):
        for j in range(sup_cnt[i]):
            if w[i, j] > ACTIVE_W and not wedge_ok_s(
                qx, qy, p[i, 0], p[i, 1], theta[i + 1], sup_ang[i, j]
            ):
                ok = False
    return qx, qy, ok


@maybe_njit(cache=True)
def _feasible_active(qx, qy, p, sup_ang, sup_cnt, theta, w):
    m = p.shape[0]
    for i in range(m):
        for j in range(sup_cnt[i]):
            if w[i, j] > ACTIVE_W and not wedge_ok_s(
                qx, qy, p[i, 0], p[i, 1], theta[i + 1], sup_ang[i, j]
            ):
                return False
    return True


@maybe_njit(cache=True)
def _quad_obj(u00, u10, u11, vx, vy, qx, qy):
    return u00 * qx * qx + 2.0 * u10 * qx * qy + u11 * qy * qy - 2.0 * (vx * qx + vy * qy)


@maybe_njit(cache=True)
def _theta1_obj_centralized(th1, p, sigma, d_tilde, p1, gamma1, sup_ang, sup_cnt,
                            qx, qy, theta, w):
    m = p.shape[0]
    tot = 0.0
    for i in range(m):
        inv2 = 1.0 / (2.0 * sigma[i] * sigma[i])
        for j in range(sup_cnt[i]):
            wj = w[i, j]
            if wj <= 0.0:
                continue
            v = gauss_ll_s(
                d_tilde[i], qx, qy, th1, theta[i + 1], sup_ang[i, j],
                p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2,
            )
            if v <= NEG_HUGE:
                return NEG_HUGE
            tot += wj * v
    return tot


@maybe_njit(cache=True)
def _thetai_obj_centralized(thi, i, p, sigma, d_tilde, p1, gamma1, sup_ang, sup_cnt,
                            qx, qy, th1, w):
    inv2 = 1.0 / (2.0 * sigma[i] * sigma[i])
    tot = 0.0
    for j in range(sup_cnt[i]):
        wj = w[i, j]
        if wj <= 0.0:
            continue
        gam = sup_ang[i, j]
        if wj > ACTIVE_W and not wedge_ok_s(qx, qy, p[i, 0], p[i, 1], thi, gam):
            return NEG_HUGE
        v = gauss_ll_s(d_tilde[i], qx, qy, th1, thi, gam,
                       p[i, 0], p[i, 1], p1[0], p1[1], gamma1, inv2)
        if v <= NEG_HUGE:
            return NEG_HUGE
        tot += wj * v
    return tot


@maybe_njit(cache=True)
def mstep_centralized(p, sigma, d_tilde, aoa_i, p1, gamma1, aoa1, eta0,
                      sup_ang, sup_logpri, sup_cnt, w,
                      qx0, qy0, theta0, max_cycles, q_tol):
    """Guarded cyclic coordinate ascent of the expected complete-data objective.

    Each coordinate update is kept only if the full objective (wedge and box
    indicators included) does not decrease, which makes the outer EM a
    generalized EM with a monotone observed-data objective.  Returns the new
    estimate plus a singular-quadratic flag.
    """
    n = theta0.shape[0]
    theta = theta0.copy()
    qx = qx0
    qy = qy0
    singular = False
    q_prev_val = q_value(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_logpri, sup_cnt,
                         qx, qy, theta, w)
    for _ in range(max_cycles):
        start_val = q_prev_val
        # ---- q update ----
        u00, u10, u11, vx, vy = _aggregate_uv(
            p, sigma, d_tilde, p1, gamma1, sup_ang, sup_cnt, theta, w
        )
        half_tr = 0.5 * (u00 + u11)
        rad = math.sqrt(0.25 * (u00 - u11) * (u00 - u11) + u10 * u10)
        det = u00 * u11 - u10 * u10
        scale = abs(u00) + abs(u11) + 2.0 * abs(u10)
        if (
            min(abs(half_tr + rad), abs(half_tr - rad)) < SING_EIG_TOL
            or abs(det) <= SING_REL_TOL * scale * scale
        ):
            singular = True
        else:
            cqx = (u11 * vx - u10 * vy) / det
            cqy = (u00 * vy - u10 * vx) / det
            if not _feasible_active(cqx, cqy, p, sup_ang, sup_cnt, theta, w):
                cqx, cqy, ok = _pocs_active(cqx, cqy, p, sup_ang, sup_cnt, theta, w, 30)
                if ok:
                    # projected gradient ascent with backtracking
                    lip = 2.0 * (abs(u00) + abs(u10) + abs(u11)) + 1e-30
                    best = _quad_obj(u00, u10, u11, vx, vy, cqx, cqy)
                    for _ in range(200):
                        gx = 2.0 * (u00 * cqx + u10 * cqy - vx)
                        gy = 2.0 * (u10 * cqx + u11 * cqy - vy)
                        eta = 1.0 / lip
                        improved = False
                        for _ in range(25):
                            nx, ny, pok = _pocs_active(
                                _clamp_coord(cqx + eta * gx), _clamp_coord(cqy + eta * gy),
                                p, sup_ang, sup_cnt, theta, w, 30,
                            )
                            if pok:
                                val = _quad_obj(u00, u10, u11, vx, vy, nx, ny)
                                if val > best:
                                    cqx = _clamp_coord(nx)
                                    cqy = _clamp_coord(ny)
                                    best = val
                                    improved = True
                                    break
                            eta *= 0.5
                        if not improved:
                            break
                else:
                    cqx = qx
                    cqy = qy
            cand = q_value(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_logpri, sup_cnt,
                           cqx, cqy, theta, w)
            if cand >= q_prev_val:
                qx = cqx
                qy = cqy
                q_prev_val = cand
        # ---- theta1 update ----
        lo1 = aoa1 - eta0
        hi1 = aoa1 + eta0
        if hi1 > lo1:
            best = NEG_HUGE
            besti = 0
            h = (hi1 - lo1) / (GRID_N - 1)
            for k in range(GRID_N):
                th = lo1 + k * h
                v = _theta1_obj_centralized(th, p, sigma, d_tilde, p1, gamma1,
                                            sup_ang, sup_cnt, qx, qy, theta, w)
                if v > best:
                    best = v
                    besti = k
            a = max(lo1, lo1 + (besti - 1) * h)
            b = min(hi1, lo1 + (besti + 1) * h)
            c = b - (b - a) * INVPHI
            dd = a + (b - a) * INVPHI
            fc = _theta1_obj_centralized(c, p, sigma, d_tilde, p1, gamma1,
                                         sup_ang, sup_cnt, qx, qy, theta, w)
            fd = _theta1_obj_centralized(dd, p, sigma, d_tilde, p1, gamma1,
                                         sup_ang, sup_cnt, qx, qy, theta, w)
            for _ in range(GOLDEN_N):
                if fc > fd:
                    b = dd
                    dd = c
                    fd = fc
                    c = b - (b - a) * INVPHI
                    fc = _theta1_obj_centralized(c, p, sigma, d_tilde, p1, gamma1,
                                                 sup_ang, sup_cnt, qx, qy, theta, w)
                else:
                    a = c
                    c = dd
                    fc = fd
                    dd = a + (b - a) * INVPHI
                    fd = _theta1_obj_centralized(dd, p, sigma, d_tilde, p1, gamma1,
                                                 sup_ang, sup_cnt, qx, qy, theta, w)
            cand_th = 0.5 * (a + b)
            if _theta1_obj_centralized(cand_th, p, sigma, d_tilde, p1, gamma1,
                                       sup_ang, sup_cnt, qx, qy, theta, w) < best:
                cand_th = lo1 + besti * h
            old = theta[0]
            theta[0] = cand_th
            cand = q_value(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_logpri, sup_cnt,
                           qx, qy, theta, w)
            if cand >= q_prev_val:
                q_prev_val = cand
            else:
                theta[0] = old
        # ---- theta_i updates ----
        m = p.shape[0]
        for i in range(m):
            lo = aoa_i[i] - eta0
            hi = aoa_i[i] + eta0
            if hi <= lo:
                continue
            best = NEG_HUGE
            besti = 0
            h = (hi - lo) / (GRID_N - 1)
            for k in range(GRID_N):
                th = lo + k * h
                v = _thetai_obj_centralized(th, i, p, sigma, d_tilde, p1, gamma1,
                                            sup_ang, sup_cnt, qx, qy, theta[0], w)
                if v > best:
                    best = v
                    besti = k
            a = max(lo, lo + (besti - 1) * h)
            b = min(hi, lo + (besti + 1) * h)
            c = b - (b - a) * INVPHI
            dd = a + (b - a) * INVPHI
            fc = _thetai_obj_centralized(c, i, p, sigma, d_tilde, p1, gamma1,
                                         sup_ang, sup_cnt, qx, qy, theta[0], w)
            fd = _thetai_obj_centralized(dd, i, p, sigma, d_tilde, p1, gamma1,
                                         sup_ang, sup_cnt, qx, qy, theta[0], w)
            for _ in range(GOLDEN_N):
                if fc > fd:
                    b = dd
                    dd = c
                    fd = fc
                    c = b - (b - a) * INVPHI
                    fc = _thetai_obj_centralized(c, i, p, sigma, d_tilde, p1, gamma1,
                                                 sup_ang, sup_cnt, qx, qy, theta[0], w)
                else:
                    a = c
                    c = dd
                    fc = fd
                    dd = a + (b - a) * INVPHI
                    fd = _thetai_obj_centralized(dd, i, p, sigma, d_tilde, p1, gamma1,
                                                 sup_ang, sup_cnt, qx, qy, theta[0], w)
            cand_th = 0.5 * (a + b)
            if _thetai_obj_centralized(cand_th, i, p, sigma, d_tilde, p1, gamma1,
                                       sup_ang, sup_cnt, qx, qy, theta[0], w) < best:
                cand_th = lo + besti * h
            old = theta[i + 1]
            theta[i + 1] = cand_th
            cand = q_value(p, sigma, d_tilde, p1, gamma1, sup_ang, sup_logpri, sup_cnt,
                           qx, qy, theta, w)
            if cand >= q_prev_val:
                q_prev_val = cand
            else:
                theta[i + 1] = old
        if q_prev_val - start_val < q_tol:
            break
    return qx, qy, theta, singular


# ---------------------------------------------------------------------------
# TDOA-only baseline kernels
# ---------------------------------------------------------------------------


@maybe_njit(cache=True)
def tdoa_objective(qx, qy, d1, pos, sigma, d_tilde, delta):
    """Nested objective: inner d_i solved in closed form, d1 clamped feasible."""
    n = pos.shape[0]
    r1 = math.sqrt((qx - pos[0, 0]) ** 2 + (qy - pos[0, 1]) ** 2)
    d1e = d1 if d1 > r1 else r1
    tot = delta * d1e * d1e
    for i in range(1, n):
        ri = math.sqrt((qx - pos[i, 0]) ** 2 + (qy - pos[i, 1]) ** 2)
        di = d1e + d_tilde[i - 1]
        if di < ri:
            di = ri
        resid = (di - d1e - d_tilde[i - 1]) / sigma[i]
        tot += resid * resid
    return tot


@maybe_njit(cache=True)
def tdoa_grid_search(pos, sigma, d_tilde, delta,
                     x_lo, x_hi, y_lo, y_hi, nx, ny, nd1, d1_extra):
    """Coarse grid over (q, d1); returns the best (qx, qy, d1, objective)."""
    best = 1e308
    bqx = 0.5 * (x_lo + x_hi)
    bqy = 0.5 * (y_lo + y_hi)
    bd1 = 0.0
    for ix in range(nx):
        qx = x_lo + (x_hi - x_lo) * ix / (nx - 1)
        for iy in range(ny):
            qy = y_lo + (y_hi - y_lo) * iy / (ny - 1)
            r1 = math.sqrt((qx - pos[0, 0]) ** 2 + (qy - pos[0, 1]) ** 2)
            for k in range(nd1):
                d1 = r1 + d1_extra * k / (nd1 - 1)
                v = tdoa_objective(qx, qy, d1, pos, sigma, d_tilde, delta)
                if v < best:
                    best = v
                    bqx = qx
                    bqy = qy
                    bd1 = d1
    return bqx, bqy, bd1, best


# ---------------------------------------------------------------------------
# relay-simulation kernels
# ---------------------------------------------------------------------------


@maybe_njit(cache=True)
def fractional_sample(src, rate, t0, times, half_taps, out):
    """Windowed-sinc evaluation of a sampled signal at arbitrary times.

    The source is treated as zero outside its support.  Kernel: sinc * Hann
    window of half-width ``half_taps`` samples.
    """
    n = src.shape[0]
    for k in range(times.shape[0]):
        pos = (times[k] - t0) * rate
        k0 = int(math.floor(pos))
        acc = 0.0
        for j in range(k0 - half_taps + 1, k0 + half_taps + 1):
            if j < 0 or j >= n:
                continue
            xd = pos - j
            if xd == 0.0:
                acc += src[j]
                continue
            wgt = 0.5 * (1.0 + math.cos(math.pi * xd / half_taps))
            acc += src[j] * wgt * math.sin(math.pi * xd) / (math.pi * xd)
        out[k] = acc


@maybe_njit(cache=True)
def bandlimited_peak_refine(c_win, center_idx, oversample, span):
    """Refine a correlation peak on a fine grid via band-limited interpolation.

    ``c_win`` holds correlation samples around the coarse peak at integer lags;
    evaluates 2*span*oversample+1 offsets of 1/oversample lag spacing around
    ``center_idx`` and returns the best fractional offset (in lag units).
    """
    h = c_win.shape[0]
    half = 24
    best = -1e308
    best_off = 0.0
    n_off = 2 * span * oversample + 1
    for k in range(n_off):
        off = -span + k / oversample
        pos = center_idx + off
        k0 = int(math.floor(pos))
        acc = 0.0
        for j in range(k0 - half + 1, k0 + half + 1):
            if j < 0 or j >= h:
                continue
            xd = pos - j
            if xd == 0.0:
                acc += c_win[j]
                continue
            wgt = 0.5 * (1.0 + math.cos(math.pi * xd / half))
            acc += c_win[j] * wgt * math.sin(math.pi * xd) / (math.pi * xd)
        if abs(acc) > best:
            best = abs(acc)
            best_off = off
    return best_off
