import numpy as np
import pytest

from cooptnav.errors import ConfigurationError, NumericError
from cooptnav.world import (EpisodeLog, Obstacle, ObstacleLayout,
                            ObstacleTemplate, Scenario, WorldState,
                            collisions, comm_graph, initial_state, reward,
                            rollout, step)


def make_scenario(n=2, max_steps=500, obstacles=(), **kwargs):
    starts = np.stack([np.full(n, -3.0), np.linspace(-1.0, 1.0, n)], axis=1)
    goals = starts + np.array([6.0, 0.0])
    defaults = dict(scenario_id="test", arena=((-5.0, 5.0), (-5.0, 5.0)),
                    starts=starts, goals=goals,
                    obstacle_templates=list(obstacles), max_steps=max_steps)
    defaults.update(kwargs)
    return Scenario(**defaults)


def empty_layout():
    return ObstacleLayout([])


def zero_policy(state, rng):
    return np.zeros_like(state.pos), np.zeros(len(state.pos))


class TestCommGraph:
    def test_edge_within_radius(self):
        state = WorldState(0, np.array([[0.0, 0.0], [1.0, 0.0]]),
                           np.zeros((2, 2)), np.zeros(2, dtype=bool))
        neighbors, support = comm_graph(state, 2.0)
        assert neighbors == [[1], [0]]
        np.testing.assert_array_equal(support, np.ones((2, 2)))

    def test_no_edge_beyond_radius(self):
        state = WorldState(0, np.array([[0.0, 0.0], [3.0, 0.0]]),
                           np.zeros((2, 2)), np.zeros(2, dtype=bool))
        neighbors, support = comm_graph(state, 2.0)
        assert neighbors == [[], []]
        np.testing.assert_array_equal(support, np.eye(2))

    def test_single_agent(self):
        state = WorldState(0, np.zeros((1, 2)), np.zeros((1, 2)),
                           np.zeros(1, dtype=bool))
        neighbors, support = comm_graph(state, 2.0)
        assert neighbors == [[]]


class TestStep:
    def test_acceleration_cap_from_rest(self):
        scenario = make_scenario(n=1)
        state = initial_state(scenario)
        new = step(state, np.array([[1.5, 0.0]]), scenario)
        np.testing.assert_allclose(new.vel[0], [0.05, 0.0], atol=1e-15)

    def test_constant_velocity_fixed_point(self):
        scenario = make_scenario(n=1)
        state = WorldState(0, np.array([[0.0, 0.0]]), np.array([[0.5, 0.2]]),
                           np.zeros(1, dtype=bool))
        new = step(state, state.vel.copy(), scenario)
        np.testing.assert_array_equal(new.vel, state.vel)
        np.testing.assert_allclose(new.pos, state.pos + state.vel * 0.05)

    def test_speed_cap(self):
        scenario = make_scenario(n=1)
        state = WorldState(0, np.zeros((1, 2)), np.array([[1.49, 0.0]]),
                           np.zeros(1, dtype=bool))
        for _ in range(100):
            state = step(state, np.array([[10.0, 10.0]]), scenario)
            assert np.linalg.norm(state.vel[0]) <= 1.5 + 1e-12

    def test_arrived_agents_frozen(self):
        scenario = make_scenario(n=1, goal_tolerance=0.2)
        pos = scenario.goals - np.array([[0.1, 0.0]])
        state = WorldState(0, pos.copy(), np.zeros((1, 2)),
                           np.ones(1, dtype=bool))
        new = step(state, np.array([[1.0, 0.0]]), scenario)
        np.testing.assert_array_equal(new.pos, pos)
        np.testing.assert_array_equal(new.vel, np.zeros((1, 2)))

    def test_nonfinite_rejected(self):
        scenario = make_scenario(n=1)
        with pytest.raises(NumericError):
            step(initial_state(scenario), np.array([[np.nan, 0.0]]), scenario)

    def test_arena_clamp(self):
        scenario = make_scenario(n=1)
        state = WorldState(0, np.array([[4.99, 0.0]]), np.array([[1.5, 0.0]]),
                           np.zeros(1, dtype=bool))
        for _ in range(10):
            state = step(state, np.array([[1.5, 0.0]]), scenario)
        assert state.pos[0, 0] <= 5.0


class TestCollisions:
    def test_coincident_agents_both_flagged(self):
        scenario = make_scenario(n=2)
        state = WorldState(0, np.zeros((2, 2)), np.zeros((2, 2)),
                           np.zeros(2, dtype=bool))
        flags = collisions(state, empty_layout(), scenario)
        assert flags.tolist() == [True, True]

    def test_far_agent_unflagged(self):
        scenario = make_scenario(n=1)
        state = WorldState(0, np.array([[0.0, 0.0]]), np.zeros((1, 2)),
                           np.zeros(1, dtype=bool))
        layout = ObstacleLayout([Obstacle("circle", True, 3.0, 0.0, radius=0.5)])
        assert not collisions(state, layout, scenario)[0]

    def test_exact_clearance_not_flagged(self):
        # distance to boundary exactly agent_radius + safety_margin
        scenario = make_scenario(n=1, agent_radius=0.2, safety_margin=0.1)
        layout = ObstacleLayout([Obstacle("circle", True, 2.0, 0.0, radius=1.0)])
        state = WorldState(0, np.array([[2.0 - 1.0 - 0.3, 0.0]]),
                           np.zeros((1, 2)), np.zeros(1, dtype=bool))
        assert not collisions(state, layout, scenario)[0]
        state_in = WorldState(0, np.array([[2.0 - 1.0 - 0.2999, 0.0]]),
                              np.zeros((1, 2)), np.zeros(1, dtype=bool))
        assert collisions(state_in, layout, scenario)[0]

    def test_rect_distance_from_inside_and_corner(self):
        scenario = make_scenario(n=1)
        layout = ObstacleLayout([Obstacle("rect", True, 0.0, 0.0, w=2.0, h=2.0)])
        inside = WorldState(0, np.zeros((1, 2)), np.zeros((1, 2)),
                            np.zeros(1, dtype=bool))
        assert collisions(inside, layout, scenario)[0]
        # corner at (1, 1): closest point on the boundary
        corner = WorldState(0, np.array([[1.0 + 0.3, 1.0 + 0.4]]),
                            np.zeros((1, 2)), np.zeros(1, dtype=bool))
        # distance 0.5 > 0.3 clearance
        assert not collisions(corner, layout, scenario)[0]

    def test_absent_obstacle_ignored(self):
        scenario = make_scenario(n=1)
        layout = ObstacleLayout([Obstacle("circle", False, -3.0, 0.0,
                                          radius=3.0)])
        state = initial_state(scenario)
        assert not collisions(state, layout, scenario).any()


class TestReward:
    def test_straight_to_goal_speed(self):
        scenario = make_scenario(n=1)
        state = initial_state(scenario)
        new = step(state, np.array([[1.0, 0.0]]), scenario)
        per_agent, team = reward(state, new, empty_layout(), scenario)
        speed = np.linalg.norm(new.vel[0])
        assert per_agent[0] == pytest.approx(speed, rel=1e-12)
        assert team == pytest.approx(speed, rel=1e-12)

    def test_perpendicular_motion_zero(self):
        scenario = make_scenario(n=1)
        state = initial_state(scenario)  # goal straight +x
        new = step(state, np.array([[0.0, 1.0]]), scenario)
        per_agent, _ = reward(state, new, empty_layout(), scenario)
        assert per_agent[0] == pytest.approx(0.0, abs=1e-12)

    def test_stationary_collision_penalty(self):
        scenario = make_scenario(n=2, collision_penalty=1.0)
        pos = np.array([[0.0, 0.0], [0.1, 0.0]])
        state = WorldState(0, pos.copy(), np.zeros((2, 2)),
                           np.zeros(2, dtype=bool))
        new = step(state, np.zeros((2, 2)), scenario)
        per_agent, _ = reward(state, new, empty_layout(), scenario)
        np.testing.assert_allclose(per_agent, [-1.0, -1.0], atol=1e-12)

    def test_arrived_agent_zero_motion_term(self):
        scenario = make_scenario(n=1)
        state = WorldState(0, scenario.goals.copy(), np.zeros((1, 2)),
                           np.ones(1, dtype=bool))
        new = step(state, np.array([[1.0, 0.0]]), scenario)
        per_agent, _ = reward(state, new, empty_layout(), scenario)
        assert per_agent[0] == 0.0


class TestRollout:
    def test_all_arrived_immediately(self):
        # construction forbids starts inside the tolerance; emulate the
        # degenerate runtime condition by mutating the goals afterwards
        scenario = make_scenario(n=1, goal_tolerance=0.4)
        scenario.goals = scenario.starts + np.array([[0.1, 0.0]])
        log = rollout(scenario, empty_layout(), zero_policy,
                      np.random.default_rng(0))
        assert log.num_steps == 0
        assert log.termination == "all_arrived"

    def test_zero_policy_times_out(self):
        scenario = make_scenario(n=1, max_steps=500)
        log = rollout(scenario, empty_layout(), zero_policy,
                      np.random.default_rng(0))
        assert log.num_steps == 500
        assert log.termination == "timeout"

    def test_seeded_rollouts_bitwise_identical(self):
        scenario = make_scenario(n=3, max_steps=40)

        def noisy_policy(state, rng):
            return rng.normal(0.0, 1.0, state.pos.shape), np.zeros(3)

        a = rollout(scenario, empty_layout(), noisy_policy,
                    np.random.default_rng(42))
        b = rollout(scenario, empty_layout(), noisy_policy,
                    np.random.default_rng(42))
        assert np.array_equal(a.pos, b.pos)
        assert np.array_equal(a.vel, b.vel)
        assert np.array_equal(a.rewards, b.rewards)
        assert a.termination == b.termination

    def test_nonfinite_policy_aborts(self):
        scenario = make_scenario(n=1, max_steps=10)

        def bad_policy(state, rng):
            return np.full((1, 2), np.nan), np.zeros(1)

        log = rollout(scenario, empty_layout(), bad_policy,
                      np.random.default_rng(0))
        assert log.termination == "aborted_numeric"
        assert log.num_steps == 0

    def test_goal_seeking_policy_arrives(self):
        scenario = make_scenario(n=2, max_steps=400)

        def to_goal(state, rng):
            return scenario.goals - state.pos, np.zeros(2)

        log = rollout(scenario, empty_layout(), to_goal,
                      np.random.default_rng(0))
        assert log.termination == "all_arrived"
        assert log.arrived[-1].all()
        assert log.num_steps < 400

    def test_caps_hold_over_random_rollouts(self):
        scenario = make_scenario(n=3, max_steps=30)

        def wild(state, rng):
            return rng.normal(0.0, 5.0, state.pos.shape), np.zeros(3)

        for seed in range(20):
            log = rollout(scenario, empty_layout(), wild,
                          np.random.default_rng(seed))
            speeds = np.linalg.norm(log.vel, axis=2)
            assert np.all(speeds <= scenario.v_max + 1e-12)
            dv = np.linalg.norm(np.diff(log.vel, axis=0), axis=2)
            moving = ~log.arrived[1:]
            assert np.all(dv[moving] <= scenario.a_max * scenario.dt + 1e-12)

    def test_discounted_return_matches_numpy_oracle(self):
        scenario = make_scenario(n=2, max_steps=60)

        def drift(state, rng):
            return rng.normal(0.3, 0.5, state.pos.shape), np.zeros(2)

        log = rollout(scenario, empty_layout(), drift,
                      np.random.default_rng(3))
        gamma = 0.97
        expected = float(np.power(gamma, np.arange(log.num_steps))
                         @ log.team_rewards)
        assert log.discounted_return(gamma) == pytest.approx(expected,
                                                             rel=1e-12)


class TestEpisodeCsv:
    def _sample_log(self):
        scenario = make_scenario(n=2, max_steps=25)
        layout = ObstacleLayout([Obstacle("rect", True, 0.0, 2.0, w=1.0,
                                          h=1.0)])

        def drift(state, rng):
            return rng.normal(0.4, 0.6, state.pos.shape), np.zeros(2)

        return rollout(scenario, layout, drift, np.random.default_rng(5))

    def test_round_trip_exact(self):
        log = self._sample_log()
        text = log.to_csv()
        again = EpisodeLog.from_csv(text)
        np.testing.assert_array_equal(again.pos, log.pos)
        np.testing.assert_array_equal(again.vel, log.vel)
        np.testing.assert_array_equal(again.rewards, log.rewards)
        np.testing.assert_array_equal(again.collided, log.collided)
        np.testing.assert_array_equal(again.goals, log.goals)
        assert again.termination == log.termination
        assert again.layout.to_json() == log.layout.to_json()

    def test_malformed_row_reports_line(self):
        log = self._sample_log()
        lines = log.to_csv().splitlines()
        lines[5] = "not,a,valid,row"
        with pytest.raises(ValueError, match="line 6"):
            EpisodeLog.from_csv("\n".join(lines))

    def test_missing_meta_rejected(self):
        log = self._sample_log()
        lines = [l for l in log.to_csv().splitlines()
                 if not l.startswith("# {")]
        with pytest.raises(ValueError, match="meta"):
            EpisodeLog.from_csv("\n".join(lines))


class TestScenarioValidation:
    def test_start_goal_distance_enforced(self):
        with pytest.raises(ConfigurationError):
            Scenario("bad", ((-5, 5), (-5, 5)), np.array([[0.0, 0.0]]),
                     np.array([[0.05, 0.0]]), goal_tolerance=0.2)

    def test_template_outside_arena_rejected(self):
        template = ObstacleTemplate("rect", {"x": 4.9, "w": 1.0, "h": 1.0,
                                             "present": 1},
                                    {"y": (-1.0, 1.0)})
        with pytest.raises(ConfigurationError):
            make_scenario(obstacles=[template])

    def test_radius_only_free_for_circles(self):
        with pytest.raises(ConfigurationError):
            ObstacleTemplate("rect", {"x": 0, "y": 0, "w": 1, "h": 1},
                             {"radius": (0.0, 1.0)})
