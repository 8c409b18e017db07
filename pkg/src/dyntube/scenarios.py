"""Builtin planning scenarios.

World sizes are calibrated to the surrogate plant: at the default speed bound
a straight cruise lags by about 0.05 m, the 90% error quantile of a v_bar=0.2
dataset is about 0.12 m and that of a v_bar=0.04 dataset about 0.035 m.
"""
from __future__ import annotations

import numpy as np

from .planner import Obstacle, Scenario, ScenarioError


def empty(length: float = 2.0, v_bar: float = 0.2) -> Scenario:
    return Scenario("empty", [], (0.0, 0.0), (length, 0.0), v_bar=v_bar,
                    bounds=[[-0.5, length + 0.5], [-1.0, 1.0]])


def gap_width(w_ref: float, scale: float = 1.03) -> float:
    """Slit width for a reference tube radius.

    With the conservative (slow dataset) quantile as ``w_ref`` the default
    leaves that tube a 3% margin, so anything faster must shrink its tube.
    """
    return 2.0 * w_ref * scale


def narrow_gap(gap: float = 0.071, radius: float = 0.5, length: float = 1.6,
               v_bar: float = 0.2) -> Scenario:
    """Two discs leaving a slit of width ``gap`` halfway along a straight run.

    The world is only as tall as the disc centres, so the slit is the only
    way through.
    """
    if not gap > 0:
        raise ScenarioError("gap must be > 0")
    cx, cy = length / 2, gap / 2 + radius
    obs = [Obstacle((cx, cy), radius), Obstacle((cx, -cy), radius)]
    return Scenario("narrow_gap", obs, (0.0, 0.0), (length, 0.0), v_bar=v_bar,
                    bounds=[[-0.2, length + 0.2], [-cy, cy]])


def corridor(gap: float = 0.12, radius: float = 0.2, pairs: int = 3, spacing: float = 0.6,
             offset: float = 0.15, v_bar: float = 0.2) -> Scenario:
    """Disc pairs whose slits alternate sideways, forcing a weaving path."""
    obs = []
    for i in range(pairs):
        x = 0.6 + i * spacing
        yc = offset * (1 if i % 2 == 0 else -1)
        for s in (1, -1):
            obs.append(Obstacle((x, yc + s * (gap / 2 + radius)), radius))
    length = 0.6 + (pairs - 1) * spacing + 0.6
    half = offset + gap / 2 + radius
    return Scenario("corridor", obs, (0.0, 0.0), (length, 0.0), v_bar=v_bar,
                    bounds=[[-0.2, length + 0.2], [-half, half]])


def clutter(seed: int = 0, n: int = 8, r_range=(0.08, 0.18), size: float = 2.0,
            v_bar: float = 0.2, keep_out: float = 0.25) -> Scenario:
    """Random discs between opposite corners; start and goal keep a free ring."""
    rng = np.random.default_rng(seed)
    start, goal = np.array([0.0, 0.0]), np.array([size, size])
    obs: list[Obstacle] = []
    tries = 0
    while len(obs) < n and tries < 1000:
        tries += 1
        c = rng.uniform(0.2, size - 0.2, size=2)
        r = rng.uniform(*r_range)
        if min(np.linalg.norm(c - start), np.linalg.norm(c - goal)) < r + keep_out:
            continue
        if any(np.linalg.norm(c - o.center) < r + o.radius + 0.05 for o in obs):
            continue
        obs.append(Obstacle(c, r))
    return Scenario("clutter", obs, start, goal, v_bar=v_bar,
                    bounds=[[-0.3, size + 0.3], [-0.3, size + 0.3]])


BUILTIN = {"empty": empty, "narrow_gap": narrow_gap, "corridor": corridor, "clutter": clutter}


def builtin(name: str, **kw) -> Scenario:
    try:
        fn = BUILTIN[name]
    except KeyError:
        raise ScenarioError(f"unknown builtin scenario {name!r}; choose from {sorted(BUILTIN)}") from None
    return fn(**kw).validate()
