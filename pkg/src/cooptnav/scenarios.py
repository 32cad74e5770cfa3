"""Scenario files: schema, JSON round trip, task sampling, baselines.

The shipped library lives in the package's scenarios/ directory: a
proof-of-concept warehouse, the three warehouse variants with 4/8/16
reconfigurable shelves, circular crossings with 8/12/16 agents around a
resizable central obstacle, and the two randomized 16-agent settings.
Every file pins its own task-sampling regions.
"""

from __future__ import annotations

import json
from importlib import resources

import jsonschema
import numpy as np

from .errors import ConfigurationError
from .world import Obstacle, ObstacleLayout, ObstacleTemplate, Scenario, realize_obstacle

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["id", "arena", "starts", "goals", "obstacles"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "arena": {
            "type": "array", "minItems": 2, "maxItems": 2,
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "items": {"type": "number"}},
        },
        "starts": {"type": "array", "minItems": 1,
                   "items": {"type": "array", "minItems": 2, "maxItems": 2,
                             "items": {"type": "number"}}},
        "goals": {"type": "array", "minItems": 1,
                  "items": {"type": "array", "minItems": 2, "maxItems": 2,
                            "items": {"type": "number"}}},
        "agent_radius": {"type": "number", "exclusiveMinimum": 0},
        "comm_radius": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "max_steps": {"type": "integer", "minimum": 1},
        "v_max": {"type": "number", "exclusiveMinimum": 0},
        "a_max": {"type": "number", "exclusiveMinimum": 0},
        "goal_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "safety_margin": {"type": "number", "minimum": 0},
        "collision_penalty": {"type": "number", "exclusiveMinimum": 0},
        "use_mpc_filter": {"type": "boolean"},
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["shape"],
                "properties": {
                    "shape": {"enum": ["rect", "circle"]},
                    "fixed": {"type": "object"},
                    "free": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "array", "minItems": 2, "maxItems": 2,
                            "items": {"type": "number"}},
                    },
                    "hand_designed": {"type": "object"},
                },
            },
        },
        "sampling": {"type": "object"},
    },
}


def scenario_to_json(scenario):
    return {
        "id": scenario.scenario_id,
        "arena": [list(scenario.arena[0]), list(scenario.arena[1])],
        "starts": scenario.starts.tolist(),
        "goals": scenario.goals.tolist(),
        "agent_radius": scenario.agent_radius,
        "comm_radius": scenario.comm_radius,
        "dt": scenario.dt,
        "max_steps": scenario.max_steps,
        "v_max": scenario.v_max,
        "a_max": scenario.a_max,
        "goal_tolerance": scenario.goal_tolerance,
        "safety_margin": scenario.safety_margin,
        "collision_penalty": scenario.collision_penalty,
        "use_mpc_filter": scenario.use_mpc_filter,
        "obstacles": [t.to_json() for t in scenario.obstacle_templates],
        "sampling": dict(scenario.sampling),
    }


def scenario_from_json(obj):
    try:
        jsonschema.validate(obj, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigurationError(
            f"scenario schema violation at "
            f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: "
            f"{err.message}")
    templates = [ObstacleTemplate.from_json(t) for t in obj["obstacles"]]
    kwargs = {k: obj[k] for k in (
        "agent_radius", "comm_radius", "dt", "max_steps", "v_max", "a_max",
        "goal_tolerance", "safety_margin", "collision_penalty",
        "use_mpc_filter") if k in obj}
    return Scenario(
        scenario_id=obj["id"],
        arena=(tuple(obj["arena"][0]), tuple(obj["arena"][1])),
        starts=np.asarray(obj["starts"], dtype=np.float64),
        goals=np.asarray(obj["goals"], dtype=np.float64),
        obstacle_templates=templates,
        sampling=dict(obj.get("sampling", {})),
        **kwargs)


def load_scenario(path):
    with open(path) as fh:
        return scenario_from_json(json.load(fh))


def save_scenario(scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario_to_json(scenario), fh, indent=2)
        fh.write("\n")


def builtin_names():
    root = resources.files("cooptnav") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_builtin(name):
    root = resources.files("cooptnav") / "scenarios"
    path = root / f"{name}.json"
    if not path.is_file():
        raise ConfigurationError(
            f"unknown scenario {name!r}; built-ins: {', '.join(builtin_names())}")
    return scenario_from_json(json.loads(path.read_text()))


def resolve_scenario(name_or_path):
    """Accept a built-in scenario name or a path to a JSON file."""
    if str(name_or_path).endswith(".json"):
        return load_scenario(name_or_path)
    return load_builtin(str(name_or_path))


# ---------------------------------------------------------------------------
# Task sampling
# ---------------------------------------------------------------------------

def _sample_points(rng, region, n, spacing, max_tries=2000):
    (xlo, xhi), (ylo, yhi) = region
    points = []
    for _ in range(max_tries):
        p = np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi)])
        if all(np.linalg.norm(p - q) >= spacing for q in points):
            points.append(p)
            if len(points) == n:
                return np.asarray(points)
    raise ConfigurationError(
        f"could not place {n} points with spacing {spacing} in {region}")


def sample_task(scenario, rng):
    """Random (starts, goals) for one evaluation task.

    Modes (pinned per scenario file): 'fixed' keeps the canonical task;
    'regions' draws starts/goals inside the file's rectangles with the
    stated minimum start-goal distance; 'rotate_circle' rotates the
    canonical circle by a random phase; 'permute' shuffles the goals of
    n_permute randomly chosen agents.
    """
    cfg = scenario.sampling
    mode = cfg.get("mode", "fixed")
    if mode == "fixed":
        return scenario.starts.copy(), scenario.goals.copy()
    if mode == "regions":
        spacing = cfg.get("min_agent_spacing",
                          2.0 * scenario.agent_radius
                          + scenario.safety_margin + 0.1)
        min_sg = cfg.get("min_start_goal_dist", 1.0)
        for _ in range(200):
            starts = _sample_points(rng, cfg["start_region"],
                                    scenario.n_agents, spacing)
            goals = _sample_points(rng, cfg["goal_region"],
                                   scenario.n_agents, spacing)
            if np.all(np.linalg.norm(starts - goals, axis=1) >= min_sg):
                return starts, goals
        raise ConfigurationError("could not satisfy min_start_goal_dist")
    if mode == "rotate_circle":
        n = scenario.n_agents
        radius = cfg.get("circle_radius", 3.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        angles = phase + 2.0 * np.pi * np.arange(n) / n
        starts = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return starts, -starts
    if mode == "permute":
        n_permute = int(cfg.get("n_permute", scenario.n_agents // 2))
        starts = scenario.starts.copy()
        goals = scenario.goals.copy()
        if n_permute >= 2:
            chosen = rng.choice(scenario.n_agents, size=n_permute,
                                replace=False)
            goals[np.sort(chosen)] = goals[rng.permutation(np.sort(chosen))]
        return starts, goals
    raise ConfigurationError(f"unknown sampling mode {mode!r}")


# ---------------------------------------------------------------------------
# Baseline layouts
# ---------------------------------------------------------------------------

def hand_designed_layout(scenario):
    """The file's regular layout: pinned values, midpoints where unset."""
    obstacles = []
    for template in scenario.obstacle_templates:
        values = {}
        for name, (lo, hi) in template.continuous_free().items():
            values[name] = 0.5 * (lo + hi)
        if template.presence_free:
            values["present"] = 1
        values.update(template.hand_designed)
        obstacles.append(realize_obstacle(template, values))
    return ObstacleLayout(obstacles)


def random_layout(scenario, rng):
    """Uniform over each template's feasible set."""
    obstacles = []
    for template in scenario.obstacle_templates:
        values = {}
        if template.presence_free:
            values["present"] = int(rng.random() < 0.5)
        for name, (lo, hi) in template.continuous_free().items():
            values[name] = rng.uniform(lo, hi)
        obstacles.append(realize_obstacle(template, values))
    return ObstacleLayout(obstacles)
