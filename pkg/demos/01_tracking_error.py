"""
How far behind does the tracker fall?
=====================================

The planner is a point that moves exactly as told.  The tracker is a lagged
point mass steered toward the planner by a clipped feedback law, so it trails
the plan by an amount that grows with speed and jitters with process noise.
That gap is the tracking error a tube has to cover.
"""
import numpy as np

from dyntube.sim import TrackerParams, TrackerState, planner_step, tracker_step, tracking_error

rng = np.random.default_rng(0)
P = TrackerParams()

# Cruise in a straight line at several speeds and record the settled error.
print("speed   mean error   90% error")
for speed in (0.0, 0.04, 0.08, 0.12, 0.16, 0.2):
    v = np.array([speed, 0.0])
    z, x = np.zeros(2), TrackerState.at_rest((0, 0))
    errs = []
    for k in range(300):
        x = tracker_step(x, z, v, P, rng)
        z = planner_step(z, v)
        if k >= 100:
            errs.append(tracking_error(x, z))
    print(f"{speed:5.2f}   {np.mean(errs):10.4f}   {np.quantile(errs, 0.9):9.4f}")

# The error is not a function of the current speed alone: after a sudden
# stop the tracker closes the gap, runs past the plan and takes a while to
# settle back.
z, x = np.zeros(2), TrackerState.at_rest((0, 0))
trace = []
for k in range(60):
    v = np.array([0.2, 0.0]) if k < 30 else np.zeros(2)
    x = tracker_step(x, z, v, P, rng)
    z = planner_step(z, v)
    trace.append(tracking_error(x, z))
print("\nerror around a stop at step 30:")
print(" ".join(f"{e:.3f}" for e in trace[26:60:2]))
# A tube that only looked at the current input would shrink to the rest-state
# width at once; the recent history of errors and inputs says otherwise.
