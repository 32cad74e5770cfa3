import numpy as np
import pytest

from cooptnav.metrics import (MetricReport, aggregate, diffacc,
                              episode_metrics, numcoll, pctspeed, spl)
from cooptnav.world import EpisodeLog, ObstacleLayout, Scenario


def make_scenario(n=2, v_max=1.5, dt=0.05):
    starts = np.stack([np.zeros(n), np.arange(n, dtype=float)], axis=1)
    goals = starts + np.array([4.0, 0.0])
    return Scenario("m", ((-10, 10), (-10, 10)), starts, goals,
                    v_max=v_max, dt=dt)


def build_log(scenario, pos, vel, collided=None, rewards=None):
    """Hand-constructed episode: pos/vel are (T+1, n, 2)."""
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    t_steps, n = pos.shape[0] - 1, pos.shape[1]
    arrived = (np.linalg.norm(pos - scenario.goals[None], axis=2)
               <= scenario.goal_tolerance)
    return EpisodeLog(
        scenario_id="m", starts=pos[0].copy(), goals=scenario.goals.copy(),
        pos=pos, vel=vel, arrived=arrived,
        actions=np.zeros((t_steps, n, 2)), logprobs=np.zeros((t_steps, n)),
        rewards=(np.zeros((t_steps, n)) if rewards is None
                 else np.asarray(rewards, float)),
        collided=(np.zeros((t_steps, n), dtype=bool) if collided is None
                  else np.asarray(collided, bool)),
        layout=ObstacleLayout([]), termination="timeout",
        dt=scenario.dt, v_max=scenario.v_max,
        goal_tolerance=scenario.goal_tolerance)


def straight_line_log(scenario, steps=4):
    """Every agent walks its straight line and lands on the goal."""
    n = scenario.n_agents
    pos = np.zeros((steps + 1, n, 2))
    vel = np.zeros((steps + 1, n, 2))
    for t in range(steps + 1):
        frac = t / steps
        pos[t] = scenario.starts + frac * (scenario.goals - scenario.starts)
        if t > 0:
            vel[t] = (scenario.goals - scenario.starts) / (steps * scenario.dt)
    return build_log(scenario, pos, vel)


class TestSpl:
    def test_straight_success_is_one(self):
        scenario = make_scenario()
        log = straight_line_log(scenario)
        assert spl(log, scenario) == 1.0

    def test_half_detour_one_failure(self):
        # agent 0 fails (stays put); agent 1 succeeds with p = 2 * l
        scenario = make_scenario(n=2)
        steps = 4
        n = 2
        pos = np.zeros((steps + 1, n, 2))
        vel = np.zeros((steps + 1, n, 2))
        pos[:, 0] = scenario.starts[0]
        straight = scenario.goals[1] - scenario.starts[1]   # length 4
        detour = np.array([
            scenario.starts[1],
            scenario.starts[1] + [0.0, 2.0],
            scenario.starts[1] + [4.0, 2.0],
            scenario.starts[1] + [4.0, 0.0],
            scenario.goals[1],
        ])
        # total traveled: 2 + 4 + 2 + 0 = 8 = 2 * straight-line 4
        pos[:, 1] = detour
        log = build_log(scenario, pos, vel)
        assert spl(log, scenario) == pytest.approx((0.0 + 0.5) / 2.0)

    def test_no_success_zero(self):
        scenario = make_scenario()
        log = build_log(scenario,
                        np.tile(scenario.starts, (3, 1, 1)),
                        np.zeros((3, 2, 2)))
        assert spl(log, scenario) == 0.0

    def test_monotone_in_traveled_distance(self):
        scenario = make_scenario(n=1)
        base = straight_line_log(scenario)
        wiggle = base.pos.copy()
        wiggle[1, 0] += np.array([0.0, 1.0])   # adds path length
        log2 = build_log(scenario, wiggle, base.vel)
        assert spl(log2, scenario) < spl(base, scenario)


class TestPctspeed:
    def test_constant_max_speed(self):
        scenario = make_scenario(n=1, v_max=1.5)
        steps = 5
        pos = np.zeros((steps + 1, 1, 2))
        vel = np.zeros((steps + 1, 1, 2))
        for t in range(1, steps + 1):
            vel[t, 0] = [1.5, 0.0]
            pos[t, 0] = pos[t - 1, 0] + vel[t, 0] * scenario.dt
        log = build_log(scenario, pos, vel)
        assert pctspeed(log, scenario) == 1.0

    def test_stationary_zero(self):
        scenario = make_scenario()
        log = build_log(scenario, np.tile(scenario.starts, (4, 1, 1)),
                        np.zeros((4, 2, 2)))
        assert pctspeed(log, scenario) == 0.0

    def test_half_and_half(self):
        scenario = make_scenario(n=1, v_max=1.0)
        steps = 4
        pos = np.zeros((steps + 1, 1, 2))
        vel = np.zeros((steps + 1, 1, 2))
        vel[1, 0] = [1.0, 0.0]
        vel[2, 0] = [1.0, 0.0]
        log = build_log(scenario, pos, vel)
        assert pctspeed(log, scenario) == 0.5

    def test_empty_episode_zero(self):
        scenario = make_scenario()
        log = build_log(scenario, scenario.starts[None],
                        np.zeros((1, 2, 2)))
        assert pctspeed(log, scenario) == 0.0


class TestNumcoll:
    def test_no_flags_zero(self):
        scenario = make_scenario()
        log = straight_line_log(scenario)
        assert numcoll(log) == 0.0

    def test_three_flag_steps_one_agent_of_three(self):
        scenario = make_scenario(n=3)
        log = straight_line_log(scenario, steps=5)
        collided = np.zeros((5, 3), dtype=bool)
        collided[0:3, 1] = True
        log.collided = collided
        assert numcoll(log) == 1.0

    def test_everyone_flagged_every_step(self):
        scenario = make_scenario(n=2)
        steps = 7
        log = straight_line_log(scenario, steps=steps)
        log.collided = np.ones((steps, 2), dtype=bool)
        assert numcoll(log) == steps


class TestDiffacc:
    def test_constant_velocity_zero(self):
        # velocity constant from t=0 means zero acceleration throughout
        scenario = make_scenario(n=1, dt=0.1)
        steps = 5
        pos = np.zeros((steps + 1, 1, 2))
        vel = np.tile(np.array([[0.5, 0.0]]), (steps + 1, 1, 1))
        for t in range(1, steps + 1):
            pos[t] = pos[t - 1] + vel[t] * scenario.dt
        log = build_log(scenario, pos, vel)
        assert diffacc(log, scenario) == 0.0

    def test_single_velocity_jump(self):
        # v: 0 -> dv at step 1, constant after; contributions
        # |a1 - a0| = |dv|/dt at t=1 and |a2 - a1| = |dv|/dt at t=2
        scenario = make_scenario(n=1, dt=0.1)
        steps = 5
        dv = np.array([0.3, -0.4])     # norm 0.5
        vel = np.zeros((steps + 1, 1, 2))
        vel[1:, 0] = dv
        pos = np.zeros((steps + 1, 1, 2))
        for t in range(1, steps + 1):
            pos[t] = pos[t - 1] + vel[t] * scenario.dt
        log = build_log(scenario, pos, vel)
        expected = 2.0 * (0.5 / 0.1) / steps
        assert diffacc(log, scenario) == pytest.approx(expected, rel=1e-12)

    def test_stationary_zero(self):
        scenario = make_scenario()
        log = build_log(scenario, np.tile(scenario.starts, (6, 1, 1)),
                        np.zeros((6, 2, 2)))
        assert diffacc(log, scenario) == 0.0


class TestInvariantsAndAggregation:
    def _random_log(self, scenario, seed):
        rng = np.random.default_rng(seed)
        steps = 6
        n = scenario.n_agents
        vel = rng.normal(0.0, 0.5, (steps + 1, n, 2))
        vel[0] = 0.0
        pos = np.zeros((steps + 1, n, 2))
        pos[0] = scenario.starts
        for t in range(1, steps + 1):
            pos[t] = pos[t - 1] + vel[t] * scenario.dt
        return build_log(scenario, pos, vel,
                         collided=rng.random((steps, n)) < 0.2)

    def test_permutation_invariance(self):
        scenario = make_scenario(n=4)
        log = self._random_log(scenario, 3)
        base = episode_metrics(log, scenario)
        perm = np.random.default_rng(1).permutation(4)
        permuted = build_log(
            Scenario("m", scenario.arena, scenario.starts[perm],
                     scenario.goals[perm], v_max=scenario.v_max,
                     dt=scenario.dt),
            log.pos[:, perm], log.vel[:, perm],
            collided=log.collided[:, perm])
        for key, val in base.items():
            assert episode_metrics(permuted, scenario)[key] == \
                pytest.approx(val, rel=1e-12)

    def test_csv_round_trip_metrics_exact(self):
        scenario = make_scenario(n=3)
        log = self._random_log(scenario, 9)
        again = EpisodeLog.from_csv(log.to_csv())
        for key, val in episode_metrics(log, scenario).items():
            assert episode_metrics(again, scenario)[key] == val

    def test_aggregate_means_and_stds(self):
        scenario = make_scenario(n=2)
        logs = [self._random_log(scenario, s) for s in range(5)]
        report = aggregate(logs, scenario)
        assert report.n_episodes == 5
        per = [episode_metrics(l, scenario) for l in logs]
        assert report.numcoll == pytest.approx(
            np.mean([p["numcoll"] for p in per]))
        assert report.std["spl"] == pytest.approx(
            np.std([p["spl"] for p in per]))
        blob = report.to_json()
        assert len(blob["episodes"]) == 5

    def test_report_bounds(self):
        scenario = make_scenario()
        # 60 steps keeps the straight-line speed below the 1.5 m/s cap
        logs = [straight_line_log(scenario, steps=60)]
        report = aggregate(logs, scenario)
        assert 0.0 <= report.spl <= 1.0
        assert 0.0 <= report.pctspeed <= 1.0
        assert report.numcoll >= 0.0 and report.diffacc >= 0.0
