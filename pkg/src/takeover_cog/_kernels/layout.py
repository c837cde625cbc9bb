"""Column/slot indices of the packed arrays shared by both kernel backends.

The compiled kernel hard-codes the same numbers and exposes them as
``LAYOUT``; ``tests/test_kernels.py`` asserts the two agree.
"""

# vehicle rows (row 0 is the ego)
X, Y, V, H, LEN, WID = range(6)
VEH_COLS = 6

# road / physics constants
(DT_SUB, N_SUB, LANE_W, LANE_COUNT, MAX_STEER, MAX_ACCEL, MAX_DECEL, LF, LR,
 IDM_V0, IDM_T, IDM_S0, IDM_A, IDM_B, IDM_DELTA, IDM_MAX_DECEL, SUCCESS_X, DRAG) = range(18)
ROAD_LEN = 18

# controller / perception constants
(V_TARGET, R_FAR, PROCESS_VAR, RATE_BETA, PERCEPT_RANGE, DT, GAP_CAUTION,
 GAP_VFLOOR, SETTLE_TOL) = range(9)
CTRL_LEN = 9

# controller gains
KP_SPEED, KP_LANE, KD_LANE, GAP_ACCEPT, COMMIT_DIST, RISK_BRAKE = range(6)
GAINS_LEN = 6

# range tracks; target 0 is the work zone, target j >= 1 is vehicle row j
MEAN, VAR, RATE, ACTIVE = range(4)
TRACK_COLS = 4

# delay history ring + lane intent
HEAD, COUNT, TLANE = range(3)
META_LEN = 3
HIST_LEN = 21

RUNNING, SUCCESS, CRASH, OFF_ROAD = range(4)
WORKZONE_PARTNER = -1
NO_PARTNER = -2

LAYOUT = {
    "VEH_COLS": VEH_COLS, "ROAD_LEN": ROAD_LEN, "CTRL_LEN": CTRL_LEN,
    "GAINS_LEN": GAINS_LEN, "TRACK_COLS": TRACK_COLS, "META_LEN": META_LEN,
    "HIST_LEN": HIST_LEN, "SUCCESS_X": SUCCESS_X, "DRAG": DRAG,
    "GAP_VFLOOR": GAP_VFLOOR, "SETTLE_TOL": SETTLE_TOL, "RISK_BRAKE": RISK_BRAKE, "TLANE": TLANE,
}
