import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyntube import planner
from dyntube.planner import (
    MpcConfig, Obstacle, Scenario, ScenarioError, SolverFailure, TubeSpec, closed_loop_run,
    load_scenario, recompute_errors, rollout_plan, save_scenario, solve_dynamic_tube,
    solve_nominal, tube_constraint_value,
)
from dyntube.scenarios import empty, gap_width, narrow_gap
from dyntube.sim import HistoryBuffer, TrackerParams
from dyntube.tube import TubeModel, TubeModelConfig


def direct_cost(z, v, goal, cfg):
    # the nominal objective written out term by term
    d = z - goal
    return (cfg.q * np.sum(d[:-1] ** 2) + cfg.q_f * np.sum(d[-1] ** 2) + cfg.r * np.sum(v ** 2))


def straight_line(z0, goal, v_bar, N, dt):
    """Saturated box-bounded motion toward the goal, stopping on arrival."""
    z, vs = np.array(z0, float), []
    for _ in range(N):
        rem = goal - z
        v = np.clip(rem / dt, -v_bar, v_bar)
        vs.append(v)
        z = z + dt * v
    v = np.array(vs)
    return rollout_plan(z0, v, dt), v


def toy_model(N=25, H=3, seed=0, scale=0.03):
    m = TubeModel.untrained(TubeModelConfig(H=H, N=N, mode="recursive", hidden=(16, 16)), seed=seed)
    m.out_scale = scale
    return m


def one_obstacle(center=(0.5, 0.03), r=0.15, goal=(1.2, 0.0)):
    return Scenario("one", [Obstacle(center, r)], (0, 0), goal,
                    bounds=[[-1, 2], [-1, 1]]).validate()


# ---------------------------------------------------------------- geometry

def test_tube_constraint_examples():
    assert tube_constraint_value((2, 0), 0.5, ((0, 0), 1.0)) == pytest.approx(1.75)
    assert tube_constraint_value((1.5, 0), 0.5, Obstacle((0, 0), 1.0)) == pytest.approx(0.0)


@settings(max_examples=200)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 2))
def test_zero_tube_is_point_in_disc(x, y, r):
    inside = math.hypot(x, y) < r
    assert (tube_constraint_value((x, y), 0.0, ((0, 0), r)) < 0) == inside


def test_scenario_validation(tmp_path):
    with pytest.raises(ScenarioError):
        Scenario("s", [((0, 0), 0.5)], (0, 0), (1, 0)).validate()
    with pytest.raises(ScenarioError):
        Scenario("s", [((1, 1), 0.0)], (0, 0), (1, 0)).validate()
    with pytest.raises(ScenarioError):
        Scenario("s", [], (0, 0), (5, 0)).validate()
    with pytest.raises(ScenarioError):
        Scenario.from_dict({"start": [0, 0]})
    sc = narrow_gap()
    save_scenario(sc, tmp_path / "s.yaml")
    back = load_scenario(tmp_path / "s.yaml")
    assert back.to_dict() == sc.to_dict()


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(r_r=0).validate()
    with pytest.raises(ValueError):
        MpcConfig(scp_max_iters=0).validate()
    with pytest.raises(ValueError):
        MpcConfig(N=10, tube=TubeSpec.dynamic(toy_model(N=25))).validate()
    with pytest.raises(ValueError):
        TubeSpec.fixed(-0.1)


# ---------------------------------------------------------------- nominal

def test_at_goal_fixed_point():
    sc = empty()
    sol = solve_nominal(sc, sc.goal, MpcConfig())
    assert sol.status == "converged"
    assert np.max(np.abs(sol.v)) < 1e-8
    assert sol.objective == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("goal", [(2.0, 0.0), (0.3, 0.0), (1.0, 1.0), (-0.4, 0.25)])
def test_straight_line_objective(goal):
    cfg = MpcConfig()
    sc = Scenario("line", [], (0, 0), goal, bounds=[[-2, 2], [-2, 2]]).validate()
    sol = solve_nominal(sc, sc.start, cfg)
    z_ref, v_ref = straight_line(sc.start, sc.goal, sc.v_bar, cfg.N, cfg.dt)
    j_ref = direct_cost(z_ref, v_ref, sc.goal, cfg)
    assert direct_cost(sol.z, sol.v, sc.goal, cfg) == pytest.approx(sol.objective, rel=1e-9)
    assert abs(sol.objective - j_ref) <= 0.01 * j_ref


def test_far_goal_saturates_along_direction():
    sc = empty()
    sol = solve_nominal(sc, sc.start, MpcConfig())
    assert np.allclose(sol.v[:, 0], sc.v_bar, atol=1e-6)
    assert np.allclose(sol.v[:, 1], 0.0, atol=1e-6)


def test_single_obstacle_is_cleared():
    sc = one_obstacle()
    sol = solve_nominal(sc, sc.start, MpcConfig())
    assert sol.status == "converged"
    c, r = sc.obstacles[0].center, sc.obstacles[0].radius
    margin = np.linalg.norm(sol.z - c, axis=1) - r
    assert margin.min() >= -1e-6
    # the obstacle actually shaped the plan
    assert np.abs(sol.z[:, 1]).max() > 0.05


def test_merit_non_increasing_and_warm_start():
    sc = one_obstacle()
    cfg = MpcConfig()
    sol = solve_nominal(sc, sc.start, cfg)
    assert np.all(np.diff(sol.merit_history) <= 1e-12 * (1 + abs(sol.merit_history[0])))
    again = solve_nominal(sc, sc.start, cfg, warm_start=sol.v)
    assert again.iterations == 1 and again.status == "converged"
    assert again.objective == pytest.approx(sol.objective, rel=1e-6)


def random_scenario(seed):
    rng = np.random.default_rng(seed)
    obs = []
    while len(obs) < rng.integers(0, 5):
        c = rng.uniform(-1, 1, 2)
        r = rng.uniform(0.05, 0.3)
        if np.linalg.norm(c) > r + 0.05 and np.linalg.norm(c - [1.5, 0.5]) > r:
            obs.append(Obstacle(c, r))
    return Scenario("rand", obs, (0, 0), (1.5, 0.5), v_bar=rng.uniform(0.05, 0.3)).validate()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["none", "fixed", "dynamic"]))
def test_solution_invariants(seed, kind):
    sc = random_scenario(seed)
    tube = {"none": TubeSpec.none(), "fixed": TubeSpec.fixed(0.03),
            "dynamic": TubeSpec.dynamic(toy_model(seed=seed % 7))}[kind]
    cfg = MpcConfig(tube=tube)
    hist = HistoryBuffer.filled(3, sc.start, 0.01)
    sol = solve_dynamic_tube(sc, sc.start, hist, cfg)
    steps = np.array([sol.z[j] + cfg.dt * sol.v[j] for j in range(cfg.N)])
    assert np.array_equal(sol.z[1:], steps)
    assert np.all(np.abs(sol.v) <= sc.v_bar)
    assert np.all(sol.w >= 0)
    assert np.all(np.diff(sol.merit_history) <= 1e-12 * (1 + abs(sol.merit_history[0])))
    if sol.status == "converged":
        for j in range(cfg.N + 1):
            for o in sc.obstacles:
                assert tube_constraint_value(sol.z[j], sol.w[j], o) >= -1e-6


def test_tube_inactive_without_obstacles():
    hist = HistoryBuffer.filled(3, (0, 0), 0.01)
    cfg = MpcConfig(tube=TubeSpec.dynamic(toy_model()))
    # a goal beyond the horizon gives a constant nominal input, which the
    # tracking stage reproduces exactly
    sc = Scenario("free", [], (0, 0), (2.0, 0.0)).validate()
    nom = solve_nominal(sc, sc.start, cfg)
    tub = solve_dynamic_tube(sc, sc.start, hist, cfg, reference=nom)
    assert np.allclose(tub.v, nom.v, atol=1e-6) and np.allclose(tub.z, nom.z, atol=1e-6)
    # a reachable goal: the rate penalty smooths the final braking step, but
    # the tube still has no effect on the solution
    sc = Scenario("free", [], (0, 0), (0.5, 0.5)).validate()
    nom = solve_nominal(sc, sc.start, cfg)
    tub = solve_dynamic_tube(sc, sc.start, hist, cfg, reference=nom)
    bare = solve_dynamic_tube(sc, sc.start, None, cfg.with_tube(TubeSpec.none()), reference=nom)
    assert np.allclose(tub.v, bare.v, atol=1e-6)
    assert np.abs(tub.v - nom.v).max() < 0.05


def test_fast_fixed_tube_cannot_fit_the_slit():
    sc = narrow_gap(gap=gap_width(0.0345))
    inside = np.array([sc.obstacles[0].center[0], 0.0])
    cfg = MpcConfig(tube=TubeSpec.fixed(0.118))
    sol = solve_dynamic_tube(sc, inside, None, cfg)
    assert sol.status == "infeasible"
    small = solve_dynamic_tube(sc, inside, None, MpcConfig(tube=TubeSpec.fixed(0.0345)))
    assert small.status != "infeasible"


def test_dynamic_tube_slows_inside_the_gap(tube_model, quantiles):
    sc = narrow_gap(gap=gap_width(quantiles["slow"]))
    cfg = MpcConfig(tube=TubeSpec.dynamic(tube_model), realtime_iters=4)
    log = closed_loop_run(sc, cfg, TrackerParams(), seed=0)
    assert log.outcome == "reached"
    z, v = log.array("z"), log.array("v")
    speed = np.linalg.norm(v, axis=1)
    cx, R = sc.obstacles[0].center[0], sc.obstacles[0].radius
    band = np.abs(z[:, 0] - cx) < 0.1 * R
    outside = (z[:, 0] < cx - R) | (z[:, 0] > cx + R)
    ratio = speed[band].mean() / speed[outside].mean()
    print(f"in-slit / outside speed ratio {ratio:.3f}")
    assert np.max(speed[outside]) > 0.95 * sc.v_bar
    assert ratio < 0.5


# ---------------------------------------------------------------- closed loop

@pytest.mark.parametrize("tube", [TubeSpec.none(), TubeSpec.fixed(0.03)])
def test_empty_world_reaches_goal_near_speed_limit(tube):
    sc = empty()
    log = closed_loop_run(sc, MpcConfig(tube=tube), TrackerParams(), seed=1)
    assert log.outcome == "reached"
    bound = math.ceil(np.linalg.norm(sc.goal - sc.start) / (sc.v_bar * 0.1))
    assert abs(log.n_steps - bound) <= 0.1 * bound


def test_logged_errors_recompute():
    sc = one_obstacle()
    log = closed_loop_run(sc, MpcConfig(tube=TubeSpec.fixed(0.02)), TrackerParams(), seed=3,
                          max_steps=60)
    text = log.to_csv()
    assert text.startswith("# format-version: 1\n")
    assert np.allclose(recompute_errors(text), log.array("e"), rtol=0, atol=1e-12)
    assert log.tube_validity() == np.mean(log.array("e") <= log.array("w")[:, 1])


def test_hold_last_input_on_solver_failure(monkeypatch):
    real = planner.solve_dynamic_tube
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] in (5, 6):
            raise SolverFailure("injected")
        return real(*a, **kw)

    monkeypatch.setattr(planner, "solve_dynamic_tube", flaky)
    log = closed_loop_run(empty(), MpcConfig(), TrackerParams(), seed=0, max_steps=12)
    status, v = log.array("status"), log.array("v")
    assert list(status[4:6]) == ["failed", "failed"]
    assert np.array_equal(v[4], v[3]) and np.array_equal(v[5], v[3])
    assert log.n_steps == 12 and status[6] != "failed"


def test_closed_loop_is_seed_deterministic():
    sc = one_obstacle()
    cfg = MpcConfig(tube=TubeSpec.dynamic(toy_model(H=3)))
    a = closed_loop_run(sc, cfg, TrackerParams(), seed=5, max_steps=30)
    b = closed_loop_run(sc, cfg, TrackerParams(), seed=5, max_steps=30)
    strip = lambda t: [ln.rsplit(",", 1)[0] for ln in t.splitlines()]
    assert strip(a.to_csv()) == strip(b.to_csv())
    assert a.warmup == 3


def test_stalled_run_stops_early():
    # a huge fixed tube blocks the slit, so the planner parks in front of it
    sc = narrow_gap()
    log = closed_loop_run(sc, MpcConfig(tube=TubeSpec.fixed(0.2)), TrackerParams(), seed=0)
    assert log.outcome == "timeout" and log.stalled
    assert log.n_steps < 400
