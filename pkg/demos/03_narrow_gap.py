"""
Threading a narrow gap
======================

Two discs leave a slit just wider than the tube of a slow, careful robot.
Three planners try to cross it:

* a fixed tube sized for full speed, which cannot fit through the slit;
* a fixed tube sized for one fifth of the speed bound, which fits but crawls
  the whole way;
* the learned dynamic tube, which runs at full speed in the open and slows
  only where the slit demands it.

Uses the model from ``demos/configs/fast.yaml`` when it has been trained
(``dyntube datagen/train --config demos/configs/fast.yaml``); otherwise a
smaller model is trained on the spot, which takes a few minutes.
"""
from pathlib import Path

import numpy as np

from dyntube.datagen import DatagenConfig, error_quantile, generate_dataset, split_dataset
from dyntube.neural import TrainConfig
from dyntube.planner import MpcConfig, Scenario, TubeSpec, closed_loop_run
from dyntube.scenarios import gap_width, narrow_gap
from dyntube.sim import TrackerParams
from dyntube.tube import TubeModelConfig, load_model, train_tube_model

root = Path(__file__).resolve().parent.parent / "runs"
fast = generate_dataset(128, 4, DatagenConfig(), master_seed=2)
slow_cfg = DatagenConfig()
slow_cfg.reference.v_bar = 0.04
slow = generate_dataset(128, 4, slow_cfg, master_seed=3)
w_fast, w_slow = error_quantile(fast, 0.9), error_quantile(slow, 0.9)
print(f"fixed tubes: full speed {w_fast:.4f} m, one fifth speed {w_slow:.4f} m")

if (root / "fast" / "model").exists():
    model = load_model(root / "fast" / "model")
else:
    train, _ = split_dataset(fast, 0.2, 0)
    model = train_tube_model(train, TubeModelConfig(H=25, mode="recursive"),
                             TrainConfig(epochs=8, learning_rate=3e-3))

gap = gap_width(w_slow)
sc = narrow_gap(gap=gap)
print(f"slit width {gap:.4f} m")
crawl = Scenario(sc.name, sc.obstacles, sc.start, sc.goal, sc.v_bar / 5, sc.goal_tolerance, sc.bounds)

runs = {
    "fixed, full-speed tube": (sc, TubeSpec.fixed(w_fast)),
    "fixed, slow tube": (crawl, TubeSpec.fixed(w_slow)),
    "dynamic tube": (sc, TubeSpec.dynamic(model)),
}
for name, (scenario, tube) in runs.items():
    log = closed_loop_run(scenario, MpcConfig(tube=tube), TrackerParams(), seed=0, max_steps=600)
    z, speed = log.array("z"), np.linalg.norm(log.array("v"), axis=1)
    in_slit = np.abs(z[:, 0] - sc.obstacles[0].center[0]) < 0.05
    slit_speed = f"{speed[in_slit].mean():.3f}" if in_slit.any() else "  -  "
    print(f"{name:24s} {log.outcome:8s}{' (stalled)' if log.stalled else '':10s} "
          f"steps {log.n_steps:4d}  speed in slit {slit_speed}  max speed {speed.max():.3f}  "
          f"tube valid {log.tube_validity():.2f}")
# The full-speed tube parks in front of the slit.  The slow tube gets through
# at 0.04 m/s everywhere.  The dynamic tube finishes in about a quarter of the
# steps: it cruises at the speed bound in the open and slows to roughly half
# of it inside the slit, where its predicted tube shrinks to the slit width.
