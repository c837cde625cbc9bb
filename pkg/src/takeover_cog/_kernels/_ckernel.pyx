# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop kernel.

Operation-for-operation transliteration of ``_pykernel``. Built without
fast-math and with FP contraction off so results match the pure-Python
backend bit for bit.
"""
import numpy as np

from libc.math cimport atan, cos, fabs, floor, log, pow, sin, sqrt, tan, tanh, M_PI
from libc.stdlib cimport free, malloc

BACKEND = "cython"

# must mirror layout.py (checked by the test-suite)
DEF X = 0
DEF Y = 1
DEF V = 2
DEF H = 3
DEF LEN = 4
DEF WID = 5
DEF VEH_COLS = 6

DEF DT_SUB = 0
DEF N_SUB = 1
DEF LANE_W = 2
DEF LANE_COUNT = 3
DEF MAX_STEER = 4
DEF MAX_ACCEL = 5
DEF MAX_DECEL = 6
DEF LF = 7
DEF LR = 8
DEF IDM_V0 = 9
DEF IDM_T = 10
DEF IDM_S0 = 11
DEF IDM_A = 12
DEF IDM_B = 13
DEF IDM_DELTA = 14
DEF IDM_MAX_DECEL = 15
DEF SUCCESS_X = 16
DEF DRAG = 17
DEF ROAD_LEN = 18

DEF V_TARGET = 0
DEF R_FAR = 1
DEF PROCESS_VAR = 2
DEF RATE_BETA = 3
DEF PERCEPT_RANGE = 4
DEF DT = 5
DEF GAP_CAUTION = 6
DEF GAP_VFLOOR = 7
DEF SETTLE_TOL = 8
DEF CTRL_LEN = 9

DEF KP_SPEED = 0
DEF KP_LANE = 1
DEF KD_LANE = 2
DEF GAP_ACCEPT = 3
DEF COMMIT_DIST = 4
DEF RISK_BRAKE = 5
DEF GAINS_LEN = 6

DEF MEAN = 0
DEF VAR = 1
DEF RATE = 2
DEF ACTIVE = 3
DEF TRACK_COLS = 4

DEF HEAD = 0
DEF COUNT = 1
DEF TLANE = 2
DEF META_LEN = 3
DEF HIST_LEN = 21

DEF RUNNING = 0
DEF SUCCESS = 1
DEF CRASH = 2
DEF OFF_ROAD = 3
DEF WORKZONE_PARTNER = -1
DEF NO_PARTNER = -2

DEF MIN_MEAS_VAR = 1e-9
DEF NO_GAP_LIMIT = 1e300
DEF MAX_DELAY = 20

LAYOUT = {
    "VEH_COLS": VEH_COLS, "ROAD_LEN": ROAD_LEN, "CTRL_LEN": CTRL_LEN,
    "GAINS_LEN": GAINS_LEN, "TRACK_COLS": TRACK_COLS, "META_LEN": META_LEN,
    "HIST_LEN": HIST_LEN, "SUCCESS_X": SUCCESS_X, "DRAG": DRAG,
    "GAP_VFLOOR": GAP_VFLOOR, "SETTLE_TOL": SETTLE_TOL, "RISK_BRAKE": RISK_BRAKE, "TLANE": TLANE,
}

ctypedef long long i64


cdef inline int _lane_of(double y, double lane_w, int lane_count) noexcept:
    cdef int lane = <int>floor(y / lane_w + 0.5)
    if lane < 0:
        return 0
    if lane > lane_count - 1:
        return lane_count - 1
    return lane


cdef inline int _delay_steps(double d) noexcept:
    cdef int di = <int>floor(d + 0.5)
    if di < 0:
        return 0
    if di > MAX_DELAY:
        return MAX_DELAY
    return di


cdef bint _obb(double x1, double y1, double h1, double l1, double w1,
               double x2, double y2, double h2, double l2, double w2) noexcept:
    cdef double dx = x2 - x1
    cdef double dy = y2 - y1
    cdef double c1 = cos(h1)
    cdef double s1 = sin(h1)
    cdef double c2 = cos(h2)
    cdef double s2 = sin(h2)
    cdef double axs[4]
    cdef double ays[4]
    cdef double ax, ay, r1, r2
    cdef int k
    axs[0] = c1
    ays[0] = s1
    axs[1] = -s1
    ays[1] = c1
    axs[2] = c2
    ays[2] = s2
    axs[3] = -s2
    ays[3] = c2
    for k in range(4):
        ax = axs[k]
        ay = ays[k]
        r1 = 0.5 * l1 * fabs(c1 * ax + s1 * ay) + 0.5 * w1 * fabs(-s1 * ax + c1 * ay)
        r2 = 0.5 * l2 * fabs(c2 * ax + s2 * ay) + 0.5 * w2 * fabs(-s2 * ax + c2 * ay)
        if fabs(dx * ax + dy * ay) > r1 + r2:
            return False
    return True


def obb_overlap(double x1, double y1, double h1, double l1, double w1,
                double x2, double y2, double h2, double l2, double w2):
    """Closed separating-axis test: touching boxes overlap."""
    return bool(_obb(x1, y1, h1, l1, w1, x2, y2, h2, l2, w2))


cdef int _nearest(double[:, ::1] tr, int* tgt_lane, int* tgt_ahead, int n1,
                  int lane, int ahead) noexcept:
    cdef int best = -1
    cdef double best_m = 0.0
    cdef double m
    cdef int j
    for j in range(n1):
        if tr[j, ACTIVE] == 0 or tgt_lane[j] != lane or tgt_ahead[j] != ahead:
            continue
        m = tr[j, MEAN]
        if best < 0 or m < best_m:
            best = j
            best_m = m
    return best


cdef double _gap_time(double[:, ::1] tr, int j, double[::1] ctrl) noexcept:
    cdef double gap, closing
    if j < 0:
        return NO_GAP_LIMIT
    gap = tr[j, MEAN] - ctrl[GAP_CAUTION] * sqrt(tr[j, VAR])
    if gap <= 0.0:
        return 0.0
    closing = -tr[j, RATE]
    if closing < ctrl[GAP_VFLOOR]:
        closing = ctrl[GAP_VFLOOR]
    return gap / closing


cdef void _policy(double[:, ::1] veh, i64[::1] lanes, double[::1] wz, double[::1] road,
                  double[::1] ctrl, double[::1] gains, double[::1] theta, double[::1] z,
                  double[:, ::1] tr, double[:, ::1] hist, i64[::1] meta,
                  int* tgt_lane, int* tgt_ahead, double* dec, double* exe) noexcept:
    cdef int n1 = veh.shape[0]
    cdef double lane_w = road[LANE_W]
    cdef int nl = <int>road[LANE_COUNT]
    cdef double xe = veh[0, X]
    cdef double ye = veh[0, Y]
    cdef double ve = veh[0, V]
    cdef double he = veh[0, H]
    cdef double le = veh[0, LEN]
    cdef int ego_lane = _lane_of(ye, lane_w, nl)
    cdef double s0 = theta[0]
    cdef double smax = theta[1]
    cdef double c = theta[2]
    cdef double d = theta[3]
    cdef double kk = smax * smax - s0 * s0
    cdef double k, q, beta, prange, dt
    cdef int j, lane, relevant, ahead, hazard, tl, target, cand, ci, front, rear, other
    cdef double r, dx, kr, sd, zobs, meas, old, m, var, gain
    cdef double inv_tau, closing, rng_m, vt, lon, e, vref, psi_ref, steer
    cdef int head, count, lag, idx
    if kk < 0.0:
        kk = 0.0
    k = sqrt(kk) / ctrl[R_FAR]
    q = ctrl[PROCESS_VAR]
    beta = ctrl[RATE_BETA]
    prange = ctrl[PERCEPT_RANGE]
    dt = ctrl[DT]

    for j in range(n1):
        # geometry of target j
        if j == 0:
            lane = <int>wz[0]
            ahead = 1
            if lane - ego_lane > 1 or ego_lane - lane > 1 or xe - 0.5 * le > wz[2]:
                relevant = 0
                r = 0.0
            else:
                r = wz[1] - (xe + 0.5 * le)
                if r < 0.0:
                    r = 0.0
                relevant = 0 if r > prange else 1
        else:
            lane = <int>lanes[j]
            if lane - ego_lane > 1 or ego_lane - lane > 1:
                relevant = 0
                ahead = 1
                r = 0.0
            else:
                dx = veh[j, X] - xe
                r = fabs(dx) - 0.5 * (veh[j, LEN] + le)
                if r < 0.0:
                    r = 0.0
                ahead = 1 if dx >= 0.0 else 0
                relevant = 0 if r > prange else 1
        tgt_lane[j] = lane
        tgt_ahead[j] = ahead
        if not relevant:
            tr[j, ACTIVE] = 0.0
            continue
        if r >= ctrl[R_FAR]:
            sd = smax
        else:
            kr = k * r
            sd = sqrt(s0 * s0 + kr * kr)
            if sd > smax:
                sd = smax
        zobs = r + sd * z[j]
        if zobs < 0.0:
            zobs = 0.0
        meas = sd * sd
        if meas < MIN_MEAS_VAR:
            meas = MIN_MEAS_VAR
        if tr[j, ACTIVE] == 0.0:
            tr[j, MEAN] = zobs
            tr[j, VAR] = meas
            tr[j, RATE] = 0.0
            tr[j, ACTIVE] = 1.0
        else:
            old = tr[j, MEAN]
            m = old + tr[j, RATE] * dt
            var = tr[j, VAR] + q
            gain = var / (var + meas)
            m = m + gain * (zobs - m)
            var = var * (1.0 - gain)
            tr[j, MEAN] = m
            tr[j, VAR] = var
            tr[j, RATE] = (1.0 - beta) * tr[j, RATE] + beta * ((m - old) / dt)

    hazard = _nearest(tr, tgt_lane, tgt_ahead, n1, ego_lane, 1)
    tl = <int>meta[TLANE]
    if tl >= 0 and (tl != ego_lane or fabs(ye - tl * lane_w) > ctrl[SETTLE_TOL]):
        target = tl
    else:
        tl = -1
        target = ego_lane
        if hazard >= 0 and tr[hazard, MEAN] < gains[COMMIT_DIST]:
            for ci in range(2):
                cand = ego_lane + 1 if ci == 0 else ego_lane - 1
                if cand < 0 or cand >= nl:
                    continue
                front = _nearest(tr, tgt_lane, tgt_ahead, n1, cand, 1)
                rear = _nearest(tr, tgt_lane, tgt_ahead, n1, cand, 0)
                if front == 0:
                    continue
                if _gap_time(tr, front, ctrl) >= gains[GAP_ACCEPT] \
                        and _gap_time(tr, rear, ctrl) >= gains[GAP_ACCEPT]:
                    target = cand
                    tl = cand
                    break
    meta[TLANE] = tl

    inv_tau = 0.0
    if target != ego_lane:
        other = _nearest(tr, tgt_lane, tgt_ahead, n1, target, 1)
        if other >= 0 and (hazard < 0 or tr[other, MEAN] < tr[hazard, MEAN]):
            hazard = other
    if hazard >= 0:
        closing = -tr[hazard, RATE]
        rng_m = tr[hazard, MEAN]
        if rng_m < 0.1:
            rng_m = 0.1
        if closing > 0.0:
            inv_tau = closing / rng_m
    vt = ctrl[V_TARGET]
    lon = gains[KP_SPEED] * (vt - ve) / vt - gains[RISK_BRAKE] * c * tanh(inv_tau)
    if lon > 1.0:
        lon = 1.0
    elif lon < -1.0:
        lon = -1.0

    e = ye - target * lane_w
    vref = ve if ve > 1.0 else 1.0
    psi_ref = -atan(gains[KP_LANE] * e / vref)
    steer = gains[KD_LANE] * (psi_ref - he) / road[MAX_STEER]
    if steer > 1.0:
        steer = 1.0
    elif steer < -1.0:
        steer = -1.0
    dec[0] = steer
    dec[1] = lon

    head = (<int>meta[HEAD] + 1) % HIST_LEN
    count = <int>meta[COUNT] + 1
    if count > HIST_LEN:
        count = HIST_LEN
    hist[head, 0] = steer
    hist[head, 1] = lon
    meta[HEAD] = head
    meta[COUNT] = count
    lag = _delay_steps(d)
    if lag >= count:
        exe[0] = 0.0
        exe[1] = 0.0
        return
    idx = (head - lag + HIST_LEN) % HIST_LEN
    exe[0] = hist[idx, 0]
    exe[1] = hist[idx, 1]


def policy_step(double[:, ::1] veh, i64[::1] lanes, double[::1] wz, double[::1] road,
                double[::1] ctrl, double[::1] gains, double[::1] theta, double[::1] z,
                double[:, ::1] tr, double[:, ::1] hist, i64[::1] meta, double[::1] out_dec):
    """Perceive, fuse, decide and delay for one decision step."""
    cdef int n1 = veh.shape[0]
    cdef int* buf = <int*>malloc(2 * n1 * sizeof(int))
    cdef double dec[2]
    cdef double exe[2]
    if buf == NULL:
        raise MemoryError()
    try:
        _policy(veh, lanes, wz, road, ctrl, gains, theta, z, tr, hist, meta,
                buf, buf + n1, dec, exe)
    finally:
        free(buf)
    out_dec[0] = dec[0]
    out_dec[1] = dec[1]
    return exe[0], exe[1]


cdef double _idm_acc(int j, double[:, ::1] veh, i64[::1] lanes, i64[::1] leaders,
                     double[::1] wz, double[::1] road) noexcept:
    cdef int lane = <int>lanes[j]
    cdef double xj = veh[j, X]
    cdef double vj = veh[j, V]
    cdef double lj = veh[j, LEN]
    cdef bint has_lead = False
    cdef double s = 0.0
    cdef double vl = 0.0
    cdef int lead = <int>leaders[j]
    cdef double half, se, sw, a, free_, dyn, ratio, acc
    if lead >= 0:
        has_lead = True
        s = veh[lead, X] - xj - 0.5 * (veh[lead, LEN] + lj)
        vl = veh[lead, V]
    half = 0.5 * (road[LANE_W] + veh[0, WID])
    if fabs(veh[0, Y] - lane * road[LANE_W]) < half and veh[0, X] > xj:
        se = veh[0, X] - xj - 0.5 * (veh[0, LEN] + lj)
        if not has_lead or se < s:
            has_lead = True
            s = se
            vl = veh[0, V] * cos(veh[0, H])
    if lane == <int>wz[0] and xj < wz[1]:
        sw = wz[1] - xj - 0.5 * lj
        if not has_lead or sw < s:
            has_lead = True
            s = sw
            vl = 0.0
    a = road[IDM_A]
    free_ = 1.0 - pow(vj / road[IDM_V0], road[IDM_DELTA])
    if has_lead:
        if s < 0.1:
            s = 0.1
        dyn = vj * road[IDM_T] + vj * (vj - vl) / (2.0 * sqrt(a * road[IDM_B]))
        if dyn < 0.0:
            dyn = 0.0
        ratio = (road[IDM_S0] + dyn) / s
        acc = a * (free_ - ratio * ratio)
    else:
        acc = a * free_
    if acc < -road[IDM_MAX_DECEL]:
        acc = -road[IDM_MAX_DECEL]
    if acc > a:
        acc = a
    return acc


cdef int _status(double[:, ::1] veh, double[::1] wz, double[::1] road, int* partner) noexcept:
    cdef double xe = veh[0, X]
    cdef double ye = veh[0, Y]
    cdef double he = veh[0, H]
    cdef double le = veh[0, LEN]
    cdef double we = veh[0, WID]
    cdef double lane_w = road[LANE_W]
    cdef double wl
    cdef int j
    for j in range(1, veh.shape[0]):
        if fabs(veh[j, X] - xe) > 0.5 * (veh[j, LEN] + le) + 0.5 * (veh[j, WID] + we):
            continue
        if _obb(xe, ye, he, le, we, veh[j, X], veh[j, Y], veh[j, H], veh[j, LEN], veh[j, WID]):
            partner[0] = j
            return CRASH
    wl = wz[2] - wz[1]
    if _obb(xe, ye, he, le, we, 0.5 * (wz[1] + wz[2]), wz[0] * lane_w, 0.0, wl, lane_w):
        partner[0] = WORKZONE_PARTNER
        return CRASH
    partner[0] = NO_PARTNER
    if ye < -0.5 * lane_w or ye > (road[LANE_COUNT] - 0.5) * lane_w:
        return OFF_ROAD
    if xe > road[SUCCESS_X]:
        return SUCCESS
    return RUNNING


cdef int _physics(double[:, ::1] veh, i64[::1] lanes, i64[::1] leaders, double[::1] wz,
                  double[::1] road, double steer, double lon, double* acc,
                  int* partner) noexcept:
    cdef int n1 = veh.shape[0]
    cdef double dt = road[DT_SUB]
    cdef double lf = road[LF]
    cdef double lr = road[LR]
    cdef double delta = steer * road[MAX_STEER]
    cdef double beta = atan(lr / (lf + lr) * tan(delta))
    cdef double a_cmd
    cdef double v, h, a, nv, vj
    cdef int sub, j
    if lon >= 0.0:
        a_cmd = lon * road[MAX_ACCEL]
    else:
        a_cmd = lon * road[MAX_DECEL]
    for sub in range(<int>road[N_SUB]):
        for j in range(1, n1):
            acc[j] = _idm_acc(j, veh, lanes, leaders, wz, road)
        v = veh[0, V]
        h = veh[0, H]
        a = a_cmd - road[DRAG] * v
        veh[0, X] = veh[0, X] + v * cos(h + beta) * dt
        veh[0, Y] = veh[0, Y] + v * sin(h + beta) * dt
        veh[0, H] = h + v / lr * sin(beta) * dt
        nv = v + a * dt
        veh[0, V] = nv if nv > 0.0 else 0.0
        for j in range(1, n1):
            vj = veh[j, V]
            veh[j, X] = veh[j, X] + vj * dt
            nv = vj + acc[j] * dt
            veh[j, V] = nv if nv > 0.0 else 0.0
    return _status(veh, wz, road, partner)


def physics_step(double[:, ::1] veh, i64[::1] lanes, i64[::1] leaders, double[::1] wz,
                 double[::1] road, double steer, double lon):
    """Advance one decision step (``N_SUB`` substeps); returns (status, partner)."""
    cdef int partner = NO_PARTNER
    cdef int status
    cdef double* acc = <double*>malloc(veh.shape[0] * sizeof(double))
    if acc == NULL:
        raise MemoryError()
    try:
        status = _physics(veh, lanes, leaders, wz, road, steer, lon, acc, &partner)
    finally:
        free(acc)
    return status, partner


def rollout(double[:, ::1] veh, i64[::1] lanes, i64[::1] leaders, double[::1] wz,
            double[::1] road, double[::1] ctrl, double[::1] gains, double[:, ::1] thetas,
            double[:, ::1] z, double[:, ::1] tr, double[:, ::1] hist, i64[::1] meta,
            double[::1] first, bint use_first, double[:, :, ::1] out_states,
            double[:, ::1] out_act):
    """Closed-loop simulation for ``len(thetas)`` steps, stopping at termination."""
    cdef int n1 = veh.shape[0]
    cdef int steps = thetas.shape[0]
    cdef int rows = out_states.shape[1]
    cdef int status = RUNNING
    cdef int partner = NO_PARTNER
    cdef int done = 0
    cdef int s, r
    cdef double dec[2]
    cdef double exe[2]
    cdef int* ibuf = <int*>malloc(2 * n1 * sizeof(int))
    cdef double* acc = <double*>malloc(n1 * sizeof(double))
    if ibuf == NULL or acc == NULL:
        free(ibuf)
        free(acc)
        raise MemoryError()
    try:
        for s in range(steps):
            if s == 0 and use_first:
                exe[0] = first[0]
                exe[1] = first[1]
            else:
                _policy(veh, lanes, wz, road, ctrl, gains, thetas[s], z[s], tr, hist, meta,
                        ibuf, ibuf + n1, dec, exe)
            out_act[s, 0] = exe[0]
            out_act[s, 1] = exe[1]
            status = _physics(veh, lanes, leaders, wz, road, exe[0], exe[1], acc, &partner)
            for r in range(rows):
                out_states[s, r, 0] = veh[r, X]
                out_states[s, r, 1] = veh[r, Y]
                out_states[s, r, 2] = veh[r, V]
                out_states[s, r, 3] = veh[r, H]
            done = s + 1
            if status != RUNNING:
                break
    finally:
        free(ibuf)
        free(acc)
    return done, status, partner


def window_batch(double[:, ::1] veh0, i64[::1] lanes, i64[::1] leaders, double[::1] wz,
                 double[::1] road, double[::1] ctrl, double[::1] gains,
                 double[:, ::1] thetas, double[:, :, ::1] z, double[:, :, ::1] tr,
                 double[:, :, ::1] hist, i64[:, ::1] meta, double[:, ::1] obs,
                 double[::1] sigma, double[::1] out_ll):
    """Window log-likelihood per particle (see ``_pykernel.window_batch``)."""
    cdef int n1 = veh0.shape[0]
    cdef int N = thetas.shape[0]
    cdef int L = obs.shape[0]
    cdef double[:, ::1] veh = np.empty((n1, VEH_COLS))
    cdef double[:, ::1] tr2 = np.empty((n1, TRACK_COLS))
    cdef double[:, ::1] hist2 = np.empty((HIST_LEN, 2))
    cdef i64[::1] meta2 = np.empty(META_LEN, dtype=np.int64)
    cdef double inv0 = 1.0 / sigma[0]
    cdef double inv1 = 1.0 / sigma[1]
    cdef double inv2 = 1.0 / sigma[2]
    cdef double inv3 = 1.0 / sigma[3]
    cdef double log_norm = -(log(sigma[0]) + log(sigma[1]) + log(sigma[2])
                             + log(sigma[3])) - 2.0 * log(2.0 * M_PI)
    cdef double dec[2]
    cdef double exe[2]
    cdef int i, s, status, partner
    cdef double ll, v, h, r0, r1, r2, r3
    cdef int* ibuf = <int*>malloc(2 * n1 * sizeof(int))
    cdef double* acc = <double*>malloc(n1 * sizeof(double))
    if ibuf == NULL or acc == NULL:
        free(ibuf)
        free(acc)
        raise MemoryError()
    try:
        for i in range(N):
            veh[:, :] = veh0
            _policy(veh, lanes, wz, road, ctrl, gains, thetas[i], z[i, 0], tr[i], hist[i],
                    meta[i], ibuf, ibuf + n1, dec, exe)
            tr2[:, :] = tr[i]
            hist2[:, :] = hist[i]
            meta2[:] = meta[i]
            status = _physics(veh, lanes, leaders, wz, road, exe[0], exe[1], acc, &partner)
            ll = 0.0
            for s in range(L):
                if s > 0 and status == RUNNING:
                    _policy(veh, lanes, wz, road, ctrl, gains, thetas[i], z[i, s], tr2,
                            hist2, meta2, ibuf, ibuf + n1, dec, exe)
                    status = _physics(veh, lanes, leaders, wz, road, exe[0], exe[1],
                                      acc, &partner)
                v = veh[0, V]
                h = veh[0, H]
                r0 = (obs[s, 0] - veh[0, X]) * inv0
                r1 = (obs[s, 1] - veh[0, Y]) * inv1
                r2 = (obs[s, 2] - v * cos(h)) * inv2
                r3 = (obs[s, 3] - v * sin(h)) * inv3
                ll += log_norm - 0.5 * (r0 * r0 + r1 * r1 + r2 * r2 + r3 * r3)
            out_ll[i] = ll
    finally:
        free(ibuf)
        free(acc)
