import json

import numpy as np
import pytest

from cooptnav import envgen as eg
from cooptnav.errors import ConfigurationError, DomainError
from cooptnav.net import ParamBlock
from cooptnav.scenarios import load_builtin
from cooptnav.world import ObstacleTemplate, Scenario, layout_within_bounds
from oracles import finite_difference_grad, relative_error


def tiny_scenario(templates, n=2):
    starts = np.array([[-3.0, -3.0], [3.0, -3.0]])[:n]
    goals = np.array([[-3.0, 3.0], [3.0, 3.0]])[:n]
    return Scenario("tiny", ((-5.0, 5.0), (-5.0, 5.0)), starts, goals,
                    obstacle_templates=list(templates))


def track_template(x=0.0):
    return ObstacleTemplate("rect", {"x": x, "w": 1.0, "h": 1.0, "present": 1},
                            {"y": (-3.0, 3.0)})


def presence_template():
    return ObstacleTemplate("circle", {"x": 0.0, "y": 0.0, "radius": 1.0},
                            {"present": (0, 1)})


def build(scenario, seed=0, hidden=(8,), feature_width=6):
    rng = np.random.default_rng(seed)
    spec = eg.GenSpec.build(scenario, hidden=hidden,
                            feature_width=feature_width)
    return eg.init_gen_params(spec, rng), spec


class TestGenDist:
    def test_environment_one_has_four_y_distributions(self):
        scenario = load_builtin("warehouse_env1")
        params, spec = build(scenario, feature_width=8)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        assert len(dist.entries) == 4
        for entry in dist.entries:
            assert entry.presence is None
            assert list(entry.params) == ["y"]
            d = entry.params["y"]
            assert (d.lo, d.hi) == (-4.0, 4.0)
            assert d.lo <= d.mu <= d.hi

    def test_zero_head_params_mean_at_midpoint(self):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario)
        for head in params.heads:
            head.values[:] = 0.0
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        assert dist.entries[0].params["y"].mu == pytest.approx(0.0, abs=1e-12)

    def test_task_sensitivity(self, rng):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario, seed=5)
        d1, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        starts2 = scenario.starts + rng.normal(0, 1.0, scenario.starts.shape)
        goals2 = scenario.goals + rng.normal(0, 1.0, scenario.goals.shape)
        d2, _ = eg.gen_dist(params, spec, starts2, goals2)
        assert d1.entries[0].params["y"].mu != d2.entries[0].params["y"].mu

    def test_agent_count_mismatch(self):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario)
        with pytest.raises(ConfigurationError):
            eg.gen_dist(params, spec, np.zeros((3, 2)), np.zeros((3, 2)))


class TestSampleLogprob:
    def test_all_fixed_template_deterministic(self, rng):
        template = ObstacleTemplate(
            "circle", {"x": 1.0, "y": 1.0, "radius": 0.5, "present": 1}, {})
        scenario = tiny_scenario([template])
        params, spec = build(scenario)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        layout, logprob = eg.layout_sample_logprob(dist, spec, rng)
        assert logprob == 0.0
        ob = layout.obstacles[0]
        assert (ob.x, ob.y, ob.radius, ob.present) == (1.0, 1.0, 0.5, True)

    def test_presence_probability_one(self, rng):
        scenario = tiny_scenario([presence_template()])
        params, spec = build(scenario)
        # force the 'present' logit far above 'absent'
        params.heads[0].view("layer0.W")[:] = 0.0
        params.heads[0].view("layer0.b")[:] = np.array([-30.0, 30.0])
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        for _ in range(100):
            layout, _ = eg.layout_sample_logprob(dist, spec, rng)
            assert layout.obstacles[0].present

    def test_logprob_recompute_equals_sampled(self, rng):
        scenario = tiny_scenario([track_template(-2.0), presence_template()])
        params, spec = build(scenario, seed=3)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        for _ in range(50):
            layout, logprob = eg.layout_sample_logprob(dist, spec, rng)
            assert eg.layout_logprob(dist, spec, layout) == pytest.approx(
                logprob, rel=1e-12)

    def test_samples_respect_bounds(self, rng):
        scenario = load_builtin("random_case2")
        params, spec = build(scenario, seed=8)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        for _ in range(500):
            layout, _ = eg.layout_sample_logprob(dist, spec, rng)
            assert layout_within_bounds(layout, scenario.obstacle_templates)


class TestLogprobGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        scenario = tiny_scenario([track_template(-2.0), presence_template()])
        params, spec = build(scenario, seed=17)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        layout, _ = eg.layout_sample_logprob(dist, spec, rng)
        grad = eg.gen_logprob_grad(params, spec, scenario.starts,
                                   scenario.goals, layout)
        flat = params.flatten()

        def scalar(values):
            p = eg.GenParams(
                ParamBlock(values[:params.trunk.values.size],
                           params.trunk.layout),
                [ParamBlock(values[params.trunk.values.size
                                   + sum(h.values.size
                                         for h in params.heads[:k]):
                                   params.trunk.values.size
                                   + sum(h.values.size
                                         for h in params.heads[:k + 1])],
                            params.heads[k].layout)
                 for k in range(len(params.heads))])
            d, _ = eg.gen_dist(p, spec, scenario.starts, scenario.goals)
            return eg.layout_logprob(d, spec, layout)

        fd = finite_difference_grad(scalar, flat.values)
        assert relative_error(grad.values, fd) < 1e-4

    def test_symmetric_mu_head_component_zero(self):
        # mean centered in symmetric bounds and the value realized at the
        # mean: the mu-score vanishes, so the mu head rows get zero grad
        from cooptnav.world import ObstacleLayout, realize_obstacle
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario)
        for head in params.heads:
            head.values[:] = 0.0
        layout = ObstacleLayout([realize_obstacle(spec.templates[0],
                                                  {"y": 0.0})])
        grad = eg.gen_logprob_grad(params, spec, scenario.starts,
                                   scenario.goals, layout)
        mu_raw_rows = grad.view("head0.layer0.W")[0]
        np.testing.assert_allclose(mu_raw_rows, 0.0, atol=1e-12)

    def test_uniform_presence_expected_grad_zero(self):
        scenario = tiny_scenario([presence_template()])
        params, spec = build(scenario)
        for head in params.heads:
            head.values[:] = 0.0   # uniform presence probabilities
        from cooptnav.world import ObstacleLayout, realize_obstacle
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        probs = dist.entries[0].presence.probs
        expected = np.zeros(params.flatten().values.size)
        for k in (0, 1):
            layout = ObstacleLayout([realize_obstacle(spec.templates[0],
                                                      {"present": k})])
            g = eg.gen_logprob_grad(params, spec, scenario.starts,
                                    scenario.goals, layout)
            expected += probs[k] * g.values
        np.testing.assert_allclose(expected, 0.0, atol=1e-12)

    def test_deterministic(self, rng):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario, seed=2)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        layout, _ = eg.layout_sample_logprob(dist, spec, rng)
        g1 = eg.gen_logprob_grad(params, spec, scenario.starts,
                                 scenario.goals, layout)
        g2 = eg.gen_logprob_grad(params, spec, scenario.starts,
                                 scenario.goals, layout)
        np.testing.assert_array_equal(g1.values, g2.values)

    def test_out_of_bounds_layout_rejected(self):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario)
        from cooptnav.world import Obstacle, ObstacleLayout
        layout = ObstacleLayout([Obstacle("rect", True, 0.0, 7.5,
                                          w=1.0, h=1.0)])
        with pytest.raises(DomainError):
            eg.gen_logprob_grad(params, spec, scenario.starts,
                                scenario.goals, layout)

    def test_score_identity(self):
        rng = np.random.default_rng(23)
        scenario = tiny_scenario([track_template(), presence_template()])
        params, spec = build(scenario, seed=23)
        dist, _ = eg.gen_dist(params, spec, scenario.starts, scenario.goals)
        n = 4000
        acc = np.zeros(params.flatten().values.size)
        sq = np.zeros_like(acc)
        for _ in range(n):
            layout, _ = eg.layout_sample_logprob(dist, spec, rng)
            g = eg.gen_logprob_grad(params, spec, scenario.starts,
                                    scenario.goals, layout).values
            acc += g
            sq += g * g
        mean = acc / n
        se = np.sqrt(np.maximum(sq / n - mean ** 2, 1e-30) / n)
        assert np.all(np.abs(mean) <= 5.0 * se + 1e-12)


class TestCheckpoint:
    def test_round_trip(self, rng):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario, seed=1)
        blob = json.dumps(params.to_json(spec))
        again = eg.GenParams.from_json(json.loads(blob), spec)
        np.testing.assert_array_equal(again.trunk.values, params.trunk.values)

    def test_schema_hash_mismatch_refused(self, rng):
        scenario = tiny_scenario([track_template()])
        params, spec = build(scenario, seed=1)
        doc = params.to_json(spec)
        other = tiny_scenario([track_template(), presence_template()])
        _, other_spec = build(other, seed=1)
        with pytest.raises(ConfigurationError, match="schema"):
            eg.GenParams.from_json(doc, other_spec)
