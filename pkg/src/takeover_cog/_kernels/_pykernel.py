"""Pure-Python closed-loop kernel.

Reference implementation of the hot loop; ``_ckernel.pyx`` mirrors it
operation for operation so both backends agree to the last bit on the same
platform. Keep the arithmetic order identical when editing either file.
"""
from __future__ import annotations

import math

import numpy as np

from .layout import (ACTIVE, COUNT, CRASH, DRAG, DT, DT_SUB, GAP_ACCEPT,
                     GAP_CAUTION, GAP_VFLOOR, H, HEAD, HIST_LEN, IDM_A, IDM_B,
                     IDM_DELTA, IDM_MAX_DECEL, IDM_S0, IDM_T, IDM_V0, KD_LANE,
                     KP_LANE, KP_SPEED, LANE_COUNT, LANE_W, LEN, LF, LR,
                     MAX_ACCEL, MAX_DECEL, MAX_STEER, MEAN, N_SUB, NO_PARTNER,
                     OFF_ROAD, PERCEPT_RANGE, PROCESS_VAR, R_FAR, RATE,
                     RATE_BETA, RISK_BRAKE, RUNNING, SETTLE_TOL, SUCCESS, SUCCESS_X,
                     TLANE,
                     V, V_TARGET, VAR, WID, WORKZONE_PARTNER, COMMIT_DIST, X, Y)

BACKEND = "python"
MIN_MEAS_VAR = 1e-9
NO_GAP_LIMIT = 1e300  # time gap reported for an empty lane slot
MAX_DELAY = HIST_LEN - 1


def lane_of(y, lane_w, lane_count):
    lane = int(math.floor(y / lane_w + 0.5))
    if lane < 0:
        return 0
    if lane > lane_count - 1:
        return lane_count - 1
    return lane


def delay_steps(d):
    di = int(math.floor(d + 0.5))
    if di < 0:
        return 0
    if di > MAX_DELAY:
        return MAX_DELAY
    return di


def obb_overlap(x1, y1, h1, l1, w1, x2, y2, h2, l2, w2):
    """Closed separating-axis test: touching boxes overlap."""
    dx = x2 - x1
    dy = y2 - y1
    c1 = math.cos(h1)
    s1 = math.sin(h1)
    c2 = math.cos(h2)
    s2 = math.sin(h2)
    axes = ((c1, s1), (-s1, c1), (c2, s2), (-s2, c2))
    for ax, ay in axes:
        r1 = 0.5 * l1 * abs(c1 * ax + s1 * ay) + 0.5 * w1 * abs(-s1 * ax + c1 * ay)
        r2 = 0.5 * l2 * abs(c2 * ax + s2 * ay) + 0.5 * w2 * abs(-s2 * ax + c2 * ay)
        if abs(dx * ax + dy * ay) > r1 + r2:
            return False
    return True


def _target_geometry(j, veh, lanes, wz, ego_lane, prange):
    """(relevant, range, ahead, lane) of target j as seen from the ego."""
    xe = veh[0, X]
    le = veh[0, LEN]
    if j == 0:
        lane = int(wz[0])
        if abs(lane - ego_lane) > 1 or xe - 0.5 * le > wz[2]:
            return False, 0.0, True, lane
        r = wz[1] - (xe + 0.5 * le)
        if r < 0.0:
            r = 0.0
        if r > prange:
            return False, r, True, lane
        return True, r, True, lane
    lane = int(lanes[j])
    if abs(lane - ego_lane) > 1:
        return False, 0.0, True, lane
    dx = veh[j, X] - xe
    r = abs(dx) - 0.5 * (veh[j, LEN] + le)
    if r < 0.0:
        r = 0.0
    if r > prange:
        return False, r, dx >= 0.0, lane
    return True, r, dx >= 0.0, lane


def _nearest(tr, tgt_lane, tgt_ahead, lane, ahead):
    best = -1
    best_m = 0.0
    for j in range(tr.shape[0]):
        if tr[j, ACTIVE] == 0 or tgt_lane[j] != lane or tgt_ahead[j] != ahead:
            continue
        m = tr[j, MEAN]
        if best < 0 or m < best_m:
            best = j
            best_m = m
    return best


def _gap_time(tr, j, ctrl):
    """Cautious time gap to target ``j`` (``NO_GAP_LIMIT`` when absent)."""
    if j < 0:
        return NO_GAP_LIMIT
    gap = tr[j, MEAN] - ctrl[GAP_CAUTION] * math.sqrt(tr[j, VAR])
    if gap <= 0.0:
        return 0.0
    closing = -tr[j, RATE]
    if closing < ctrl[GAP_VFLOOR]:
        closing = ctrl[GAP_VFLOOR]
    return gap / closing


def decide_core(tr, tgt_lane, tgt_ahead, ego_lane, ye, ve, he, c, tlane, road, ctrl, gains):
    """Lane intent, looming-modulated speed control and lane tracking.

    Returns (steer, longitudinal, lane_intent) before delay.
    """
    nl = int(road[LANE_COUNT])
    lane_w = road[LANE_W]
    # lane intent
    hazard = _nearest(tr, tgt_lane, tgt_ahead, ego_lane, True)
    tl = tlane
    if tl >= 0 and (tl != ego_lane or abs(ye - tl * lane_w) > ctrl[SETTLE_TOL]):
        target = tl
    else:
        tl = -1
        target = ego_lane
        if hazard >= 0 and tr[hazard, MEAN] < gains[COMMIT_DIST]:
            for cand in (ego_lane + 1, ego_lane - 1):
                if cand < 0 or cand >= nl:
                    continue
                front = _nearest(tr, tgt_lane, tgt_ahead, cand, True)
                rear = _nearest(tr, tgt_lane, tgt_ahead, cand, False)
                # a lane closed by the work zone is never a candidate
                if front == 0:
                    continue
                if _gap_time(tr, front, ctrl) >= gains[GAP_ACCEPT] \
                        and _gap_time(tr, rear, ctrl) >= gains[GAP_ACCEPT]:
                    target = cand
                    tl = cand
                    break

    # looming appraisal on the most constraining forward target
    inv_tau = 0.0
    if target != ego_lane:
        other = _nearest(tr, tgt_lane, tgt_ahead, target, True)
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
    lon = gains[KP_SPEED] * (vt - ve) / vt - gains[RISK_BRAKE] * c * math.tanh(inv_tau)
    if lon > 1.0:
        lon = 1.0
    elif lon < -1.0:
        lon = -1.0

    e = ye - target * lane_w
    vref = ve if ve > 1.0 else 1.0
    psi_ref = -math.atan(gains[KP_LANE] * e / vref)
    steer = gains[KD_LANE] * (psi_ref - he) / road[MAX_STEER]
    if steer > 1.0:
        steer = 1.0
    elif steer < -1.0:
        steer = -1.0
    return steer, lon, tl


def policy_step(veh, lanes, wz, road, ctrl, gains, theta, z, tr, hist, meta, out_dec):
    """Perceive, fuse, decide and delay for one decision step.

    Mutates the track array ``tr``, the history ring ``hist`` and ``meta``;
    writes the decided (pre-delay) action into ``out_dec`` and returns the
    executed action.
    """
    n1 = veh.shape[0]
    nl = int(road[LANE_COUNT])
    ye = veh[0, Y]
    ve = veh[0, V]
    he = veh[0, H]
    ego_lane = lane_of(ye, road[LANE_W], nl)
    s0 = theta[0]
    smax = theta[1]
    c = theta[2]
    d = theta[3]
    kk = smax * smax - s0 * s0
    if kk < 0.0:
        kk = 0.0
    k = math.sqrt(kk) / ctrl[R_FAR]
    q = ctrl[PROCESS_VAR]
    beta = ctrl[RATE_BETA]
    prange = ctrl[PERCEPT_RANGE]
    dt = ctrl[DT]

    tgt_lane = [0] * n1
    tgt_ahead = [True] * n1
    for j in range(n1):
        relevant, r, ahead, lane = _target_geometry(j, veh, lanes, wz, ego_lane, prange)
        tgt_lane[j] = lane
        tgt_ahead[j] = ahead
        if not relevant:
            tr[j, ACTIVE] = 0.0
            continue
        if r >= ctrl[R_FAR]:
            sd = smax
        else:
            kr = k * r
            sd = math.sqrt(s0 * s0 + kr * kr)
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

    steer, lon, tl = decide_core(tr, tgt_lane, tgt_ahead, ego_lane, ye, ve, he, c,
                                 int(meta[TLANE]), road, ctrl, gains)
    meta[TLANE] = tl
    out_dec[0] = steer
    out_dec[1] = lon

    # delay ring
    head = (int(meta[HEAD]) + 1) % HIST_LEN
    count = int(meta[COUNT]) + 1
    if count > HIST_LEN:
        count = HIST_LEN
    hist[head, 0] = steer
    hist[head, 1] = lon
    meta[HEAD] = head
    meta[COUNT] = count
    lag = delay_steps(d)
    if lag >= count:
        return 0.0, 0.0
    idx = (head - lag + HIST_LEN) % HIST_LEN
    return float(hist[idx, 0]), float(hist[idx, 1])


def _idm_acc(j, veh, lanes, leaders, wz, road):
    lane = int(lanes[j])
    xj = veh[j, X]
    vj = veh[j, V]
    lj = veh[j, LEN]
    has_lead = False
    s = 0.0
    vl = 0.0
    lead = int(leaders[j])
    if lead >= 0:
        has_lead = True
        s = veh[lead, X] - xj - 0.5 * (veh[lead, LEN] + lj)
        vl = veh[lead, V]
    # ego as leader when it overlaps this lane
    half = 0.5 * (road[LANE_W] + veh[0, WID])
    if abs(veh[0, Y] - lane * road[LANE_W]) < half and veh[0, X] > xj:
        se = veh[0, X] - xj - 0.5 * (veh[0, LEN] + lj)
        if not has_lead or se < s:
            has_lead = True
            s = se
            vl = veh[0, V] * math.cos(veh[0, H])
    if lane == int(wz[0]) and xj < wz[1]:
        sw = wz[1] - xj - 0.5 * lj
        if not has_lead or sw < s:
            has_lead = True
            s = sw
            vl = 0.0
    a = road[IDM_A]
    free = 1.0 - math.pow(vj / road[IDM_V0], road[IDM_DELTA])
    if has_lead:
        if s < 0.1:
            s = 0.1
        dyn = vj * road[IDM_T] + vj * (vj - vl) / (2.0 * math.sqrt(a * road[IDM_B]))
        if dyn < 0.0:
            dyn = 0.0
        ratio = (road[IDM_S0] + dyn) / s
        acc = a * (free - ratio * ratio)
    else:
        acc = a * free
    if acc < -road[IDM_MAX_DECEL]:
        acc = -road[IDM_MAX_DECEL]
    if acc > a:
        acc = a
    return acc


def _status(veh, lanes, wz, road):
    xe = veh[0, X]
    ye = veh[0, Y]
    he = veh[0, H]
    le = veh[0, LEN]
    we = veh[0, WID]
    lane_w = road[LANE_W]
    for j in range(1, veh.shape[0]):
        if abs(veh[j, X] - xe) > 0.5 * (veh[j, LEN] + le) + 0.5 * (veh[j, WID] + we):
            continue
        if obb_overlap(xe, ye, he, le, we, veh[j, X], veh[j, Y], veh[j, H],
                       veh[j, LEN], veh[j, WID]):
            return CRASH, j
    wl = wz[2] - wz[1]
    if obb_overlap(xe, ye, he, le, we, 0.5 * (wz[1] + wz[2]), wz[0] * lane_w, 0.0, wl, lane_w):
        return CRASH, WORKZONE_PARTNER
    if ye < -0.5 * lane_w or ye > (road[LANE_COUNT] - 0.5) * lane_w:
        return OFF_ROAD, NO_PARTNER
    if xe > road[SUCCESS_X]:
        return SUCCESS, NO_PARTNER
    return RUNNING, NO_PARTNER


def physics_step(veh, lanes, leaders, wz, road, steer, lon):
    """Advance one decision step (``N_SUB`` substeps); returns (status, partner)."""
    n1 = veh.shape[0]
    dt = road[DT_SUB]
    acc = [0.0] * n1
    lf = road[LF]
    lr = road[LR]
    delta = steer * road[MAX_STEER]
    beta = math.atan(lr / (lf + lr) * math.tan(delta))
    a_cmd = lon * road[MAX_ACCEL] if lon >= 0.0 else lon * road[MAX_DECEL]
    for _ in range(int(road[N_SUB])):
        for j in range(1, n1):
            acc[j] = _idm_acc(j, veh, lanes, leaders, wz, road)
        v = veh[0, V]
        h = veh[0, H]
        a = a_cmd - road[DRAG] * v
        veh[0, X] = veh[0, X] + v * math.cos(h + beta) * dt
        veh[0, Y] = veh[0, Y] + v * math.sin(h + beta) * dt
        veh[0, H] = h + v / lr * math.sin(beta) * dt
        nv = v + a * dt
        veh[0, V] = nv if nv > 0.0 else 0.0
        for j in range(1, n1):
            vj = veh[j, V]
            veh[j, X] = veh[j, X] + vj * dt
            nv = vj + acc[j] * dt
            veh[j, V] = nv if nv > 0.0 else 0.0
    return _status(veh, lanes, wz, road)


def _record(out_states, s, veh, rows):
    for r in range(rows):
        out_states[s, r, 0] = veh[r, X]
        out_states[s, r, 1] = veh[r, Y]
        out_states[s, r, 2] = veh[r, V]
        out_states[s, r, 3] = veh[r, H]


def rollout(veh, lanes, leaders, wz, road, ctrl, gains, thetas, z, tr, hist, meta,
            first, use_first, out_states, out_act):
    """Closed-loop simulation for ``len(thetas)`` steps, stopping at termination.

    Step ``s`` uses ``thetas[s]`` and noise row ``z[s]``; when ``use_first``
    is set the first executed action is ``first`` and no policy step runs for
    it. Records per-step states of the first ``out_states.shape[1]`` rows.
    Returns (steps_done, status, partner).
    """
    steps = thetas.shape[0]
    rows = out_states.shape[1]
    dec = np.zeros(2)
    status = RUNNING
    partner = NO_PARTNER
    done = 0
    for s in range(steps):
        if s == 0 and use_first:
            st = float(first[0])
            lo = float(first[1])
        else:
            st, lo = policy_step(veh, lanes, wz, road, ctrl, gains, thetas[s], z[s],
                                 tr, hist, meta, dec)
        out_act[s, 0] = st
        out_act[s, 1] = lo
        status, partner = physics_step(veh, lanes, leaders, wz, road, st, lo)
        _record(out_states, s, veh, rows)
        done = s + 1
        if status != RUNNING:
            break
    return done, status, partner


def _window_one(veh0, lanes, leaders, wz, road, ctrl, gains, theta, z, tr, hist, meta,
                obs, inv_sigma, log_norm):
    veh = veh0.copy()
    dec = np.zeros(2)
    st, lo = policy_step(veh, lanes, wz, road, ctrl, gains, theta, z[0], tr, hist, meta, dec)
    tr2 = tr.copy()
    hist2 = hist.copy()
    meta2 = meta.copy()
    status, _ = physics_step(veh, lanes, leaders, wz, road, st, lo)
    L = obs.shape[0]
    ll = 0.0
    for s in range(L):
        if s > 0 and status == RUNNING:
            st, lo = policy_step(veh, lanes, wz, road, ctrl, gains, theta, z[s],
                                 tr2, hist2, meta2, dec)
            status, _ = physics_step(veh, lanes, leaders, wz, road, st, lo)
        v = veh[0, V]
        h = veh[0, H]
        r0 = (obs[s, 0] - veh[0, X]) * inv_sigma[0]
        r1 = (obs[s, 1] - veh[0, Y]) * inv_sigma[1]
        r2 = (obs[s, 2] - v * math.cos(h)) * inv_sigma[2]
        r3 = (obs[s, 3] - v * math.sin(h)) * inv_sigma[3]
        ll += log_norm - 0.5 * (r0 * r0 + r1 * r1 + r2 * r2 + r3 * r3)
    return ll


def window_batch(veh0, lanes, leaders, wz, road, ctrl, gains, thetas, z, tr, hist, meta,
                 obs, sigma, out_ll):
    """Window log-likelihood per particle.

    Particle ``i`` first runs its policy on the anchor world with its own
    ``tr[i]``/``hist[i]``/``meta[i]``, which are updated in place (they carry
    the particle's belief state to the next window); the remainder of the
    rollout works on scratch copies.
    """
    inv_sigma = [1.0 / sigma[0], 1.0 / sigma[1], 1.0 / sigma[2], 1.0 / sigma[3]]
    log_norm = -(math.log(sigma[0]) + math.log(sigma[1]) + math.log(sigma[2])
                 + math.log(sigma[3])) - 2.0 * math.log(2.0 * math.pi)
    for i in range(thetas.shape[0]):
        out_ll[i] = _window_one(veh0, lanes, leaders, wz, road, ctrl, gains, thetas[i],
                                z[i], tr[i], hist[i], meta[i], obs, inv_sigma, log_norm)
