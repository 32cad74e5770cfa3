"""Deterministic 2D multi-agent simulator.

Velocity-command kinematics with acceleration/velocity caps, reconfigurable
obstacle layouts (axis-aligned rectangles and circles), collision detection
against agents and obstacles, the per-step navigation reward, and episode
rollout into a serializable log.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError, NumericError

CONTINUOUS_PARAMS = ("x", "y", "radius")
FREE_PARAMS = CONTINUOUS_PARAMS + ("present",)


# ---------------------------------------------------------------------------
# Scenario data model
# ---------------------------------------------------------------------------

@dataclass
class ObstacleTemplate:
    """One obstacle slot: fixed geometry plus bounded reconfigurable values.

    free holds {name: (lo, hi)} for any of x, y, radius (circles only) and
    present (bounds ignored, treated as {0, 1}); fixed holds the rest.
    hand_designed optionally pins the values of the regular baseline layout.
    """

    shape: str                      # "rect" | "circle"
    fixed: dict
    free: dict = field(default_factory=dict)
    hand_designed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shape not in ("rect", "circle"):
            raise ConfigurationError(f"unknown obstacle shape {self.shape!r}")
        for name in self.free:
            if name not in FREE_PARAMS:
                raise ConfigurationError(f"unknown free parameter {name!r}")
            if name == "radius" and self.shape != "circle":
                raise ConfigurationError("radius is only free for circles")
        for name, (lo, hi) in self.continuous_free().items():
            if not lo < hi:
                raise ConfigurationError(f"empty bounds for {name}: [{lo}, {hi}]")
            if name == "radius" and lo < 0:
                raise ConfigurationError("radius bounds must be nonnegative")
        needed = {"rect": ("x", "y", "w", "h"), "circle": ("x", "y", "radius")}
        for name in needed[self.shape]:
            if name not in self.fixed and name not in self.free:
                raise ConfigurationError(f"{self.shape} template missing {name!r}")

    def continuous_free(self):
        return {k: v for k, v in self.free.items() if k in CONTINUOUS_PARAMS}

    @property
    def presence_free(self):
        return "present" in self.free

    def value_bounds(self, name):
        """Realizable interval of a parameter (free bounds or fixed point)."""
        if name in self.free:
            return tuple(self.free[name])
        v = float(self.fixed[name])
        return (v, v)

    def extent_bounds(self):
        """Worst-case axis-aligned extent over all feasible realizations."""
        x0, x1 = self.value_bounds("x")
        y0, y1 = self.value_bounds("y")
        if self.shape == "circle":
            r1 = self.value_bounds("radius")[1]
            hw = hh = r1
        else:
            hw = float(self.fixed["w"]) / 2.0
            hh = float(self.fixed["h"]) / 2.0
        return (x0 - hw, x1 + hw), (y0 - hh, y1 + hh)

    def to_json(self):
        out = {"shape": self.shape, "fixed": dict(self.fixed),
               "free": {k: list(v) for k, v in self.free.items()}}
        if self.hand_designed:
            out["hand_designed"] = dict(self.hand_designed)
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(shape=obj["shape"], fixed=dict(obj.get("fixed", {})),
                   free={k: tuple(v) for k, v in obj.get("free", {}).items()},
                   hand_designed=dict(obj.get("hand_designed", {})))


@dataclass
class Obstacle:
    """Realized geometry of one template."""

    shape: str
    present: bool
    x: float
    y: float
    w: float = 0.0
    h: float = 0.0
    radius: float = 0.0

    def signed_distance(self, points):
        """Signed distance from points (m, 2) to the boundary (<0 inside)."""
        p = np.atleast_2d(points)
        if self.shape == "circle":
            return np.hypot(p[:, 0] - self.x, p[:, 1] - self.y) - self.radius
        dx = np.abs(p[:, 0] - self.x) - self.w / 2.0
        dy = np.abs(p[:, 1] - self.y) - self.h / 2.0
        outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
        inside = np.minimum(np.maximum(dx, dy), 0.0)
        return outside + inside

    def to_json(self):
        return {"shape": self.shape, "present": bool(self.present),
                "x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "radius": self.radius}

    @classmethod
    def from_json(cls, obj):
        return cls(shape=obj["shape"], present=bool(obj["present"]),
                   x=float(obj["x"]), y=float(obj["y"]), w=float(obj["w"]),
                   h=float(obj["h"]), radius=float(obj["radius"]))


@dataclass
class ObstacleLayout:
    """Per-template realized obstacles; absent ones carry no geometry."""

    obstacles: list

    def present(self):
        return [o for o in self.obstacles if o.present]

    def to_json(self):
        return {"obstacles": [o.to_json() for o in self.obstacles]}

    @classmethod
    def from_json(cls, obj):
        return cls([Obstacle.from_json(o) for o in obj["obstacles"]])


def realize_obstacle(template, values):
    """Build an Obstacle from a template plus realized free-param values."""
    merged = dict(template.fixed)
    merged.update(values)
    present = bool(merged.get("present", 1))
    for name, v in values.items():
        if name in CONTINUOUS_PARAMS and present:
            lo, hi = template.value_bounds(name)
            if not lo <= v <= hi:
                raise DomainError(f"{name}={v} outside bounds [{lo}, {hi}]")
    if template.shape == "circle":
        return Obstacle("circle", present, float(merged["x"]), float(merged["y"]),
                        radius=float(merged["radius"]))
    return Obstacle("rect", present, float(merged["x"]), float(merged["y"]),
                    w=float(merged["w"]), h=float(merged["h"]))


def layout_within_bounds(layout, templates):
    """True iff every present obstacle honors its template's bounds."""
    for obstacle, template in zip(layout.obstacles, templates):
        if not obstacle.present:
            continue
        for name in ("x", "y") + (("radius",) if template.shape == "circle" else ()):
            lo, hi = template.value_bounds(name)
            if not lo <= getattr(obstacle, name) <= hi:
                return False
    return True


@dataclass
class Scenario:
    """Immutable description of one navigation setting.

    Defaults follow the standard desk constants: 0.05 s steps, 1.5 m/s and
    1 m/s^2 caps, 2 m communication radius, at most 500 steps per episode.
    """

    scenario_id: str
    arena: tuple                    # ((xmin, xmax), (ymin, ymax))
    starts: np.ndarray              # (n, 2)
    goals: np.ndarray               # (n, 2)
    obstacle_templates: list = field(default_factory=list)
    agent_radius: float = 0.2
    comm_radius: float = 2.0
    dt: float = 0.05
    max_steps: int = 500
    v_max: float = 1.5
    a_max: float = 1.0
    goal_tolerance: float = 0.2
    safety_margin: float = 0.1
    collision_penalty: float = 1.0
    sampling: dict = field(default_factory=dict)
    use_mpc_filter: bool = False

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.float64).reshape(-1, 2)
        self.goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, 2)
        self.arena = (tuple(map(float, self.arena[0])),
                      tuple(map(float, self.arena[1])))
        if len(self.starts) != len(self.goals) or len(self.starts) < 1:
            raise ConfigurationError("need equal, nonzero start/goal counts")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        dists = np.linalg.norm(self.starts - self.goals, axis=1)
        if np.any(dists <= self.goal_tolerance):
            raise ConfigurationError(
                "every start must be farther than goal_tolerance from its goal")
        (xlo, xhi), (ylo, yhi) = self.arena
        for k, t in enumerate(self.obstacle_templates):
            (exlo, exhi), (eylo, eyhi) = t.extent_bounds()
            if exlo < xlo or exhi > xhi or eylo < ylo or eyhi > yhi:
                raise ConfigurationError(
                    f"obstacle template {k} can leave the arena")

    @property
    def n_agents(self):
        return len(self.starts)

    def with_task(self, starts, goals):
        return replace(self, starts=np.asarray(starts, dtype=np.float64),
                       goals=np.asarray(goals, dtype=np.float64))


# ---------------------------------------------------------------------------
# State, kinematics, collisions, reward
# ---------------------------------------------------------------------------

@dataclass
class WorldState:
    t: int
    pos: np.ndarray      # (n, 2)
    vel: np.ndarray      # (n, 2)
    arrived: np.ndarray  # (n,) bool


def initial_state(scenario):
    pos = scenario.starts.copy()
    vel = np.zeros_like(pos)
    arrived = (np.linalg.norm(pos - scenario.goals, axis=1)
               <= scenario.goal_tolerance)
    return WorldState(0, pos, vel, arrived)


def _clip_norm(vectors, limit):
    norms = np.linalg.norm(vectors, axis=1)
    scale = np.ones_like(norms)
    over = norms > limit
    scale[over] = limit / norms[over]
    return vectors * scale[:, None]


def comm_graph(state, comm_radius):
    """Symmetric adjacency within comm_radius plus binary support matrix.

    Returns (neighbors, support) where support has 1.0 on edges and on the
    diagonal (self), 0.0 elsewhere.
    """
    n = len(state.pos)
    diff = state.pos[:, None, :] - state.pos[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    adj = (dist <= comm_radius) & ~np.eye(n, dtype=bool)
    neighbors = [np.flatnonzero(adj[i]).tolist() for i in range(n)]
    support = adj.astype(np.float64) + np.eye(n)
    return neighbors, support


def step(state, desired_vel, scenario):
    """Advance one dt under acceleration and velocity caps.

    Arrived agents stay pinned with zero velocity; newly arrived agents
    (within goal_tolerance after moving) are pinned from the next step on.
    Positions are clamped to the arena.
    """
    desired = np.asarray(desired_vel, dtype=np.float64).reshape(state.pos.shape)
    if not np.all(np.isfinite(desired)):
        raise NumericError("non-finite desired velocity")
    dv = _clip_norm(desired - state.vel, scenario.a_max * scenario.dt)
    vel = _clip_norm(state.vel + dv, scenario.v_max)
    pos = state.pos + vel * scenario.dt
    (xlo, xhi), (ylo, yhi) = scenario.arena
    pos[:, 0] = np.clip(pos[:, 0], xlo, xhi)
    pos[:, 1] = np.clip(pos[:, 1], ylo, yhi)

    frozen = state.arrived
    pos[frozen] = state.pos[frozen]
    vel[frozen] = 0.0
    arrived = frozen | (np.linalg.norm(pos - scenario.goals, axis=1)
                        <= scenario.goal_tolerance)
    vel[arrived] = 0.0
    return WorldState(state.t + 1, pos, vel, arrived)


def collisions(state, layout, scenario):
    """Per-agent flags: within the safety range of an agent or obstacle."""
    n = len(state.pos)
    flags = np.zeros(n, dtype=bool)
    if n > 1:
        diff = state.pos[:, None, :] - state.pos[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(dist, np.inf)
        limit = 2.0 * scenario.agent_radius + scenario.safety_margin
        flags |= (dist < limit).any(axis=1)
    clearance = scenario.agent_radius + scenario.safety_margin
    for obstacle in layout.present():
        flags |= obstacle.signed_distance(state.pos) < clearance
    return flags


def reward(state, new_state, layout, scenario, flags=None):
    """Per-agent rewards for the transition state -> new_state.

    The motion term is the goal-direction component of the realized
    velocity (displacement / dt); collisions, evaluated on the new state,
    subtract the penalty. Agents already arrived earn exactly zero motion.
    Returns (per_agent (n,), team mean).
    """
    if flags is None:
        flags = collisions(new_state, layout, scenario)
    to_goal = scenario.goals - state.pos
    norm = np.linalg.norm(to_goal, axis=1)
    active = ~state.arrived
    motion = np.zeros(len(norm))
    realized = (new_state.pos - state.pos) / scenario.dt
    safe = active & (norm > 0.0)
    motion[safe] = np.einsum(
        "ij,ij->i", to_goal[safe] / norm[safe, None], realized[safe])
    per_agent = motion - scenario.collision_penalty * flags.astype(np.float64)
    return per_agent, float(per_agent.mean())


# ---------------------------------------------------------------------------
# Episode log
# ---------------------------------------------------------------------------

@dataclass
class EpisodeLog:
    """Full trajectory record used by training, metrics and replay."""

    scenario_id: str
    starts: np.ndarray       # (n, 2)
    goals: np.ndarray        # (n, 2)
    pos: np.ndarray          # (T+1, n, 2)
    vel: np.ndarray          # (T+1, n, 2)
    arrived: np.ndarray      # (T+1, n) bool
    actions: np.ndarray      # (T, n, 2)
    logprobs: np.ndarray     # (T, n)
    rewards: np.ndarray      # (T, n)
    collided: np.ndarray     # (T, n) bool
    layout: ObstacleLayout
    termination: str
    dt: float
    v_max: float
    goal_tolerance: float

    @property
    def num_steps(self):
        return self.actions.shape[0]

    @property
    def n_agents(self):
        return self.starts.shape[0]

    @property
    def team_rewards(self):
        return self.rewards.mean(axis=1) if self.num_steps else np.zeros(0)

    def discounted_return(self, gamma):
        """Sum of gamma^t * team reward, accumulated in step order."""
        total, weight = 0.0, 1.0
        for r in self.team_rewards:
            total += weight * r
            weight *= gamma
        return total

    # -- CSV round trip ----------------------------------------------------

    def meta(self):
        return {
            "scenario_id": self.scenario_id,
            "starts": self.starts.tolist(),
            "goals": self.goals.tolist(),
            "layout": self.layout.to_json(),
            "termination": self.termination,
            "dt": self.dt,
            "v_max": self.v_max,
            "goal_tolerance": self.goal_tolerance,
        }

    def to_csv(self):
        """One row per (step, agent); t=0 carries the initial state."""
        buf = io.StringIO()
        buf.write("# cooptnav-episode v1\n")
        buf.write("# " + json.dumps(self.meta()) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "agent", "x", "y", "vx", "vy", "reward", "collided"])
        n = self.n_agents
        for t in range(self.pos.shape[0]):
            for i in range(n):
                r = repr(float(self.rewards[t - 1, i])) if t > 0 else "0.0"
                c = int(self.collided[t - 1, i]) if t > 0 else 0
                writer.writerow([t, i,
                                 repr(float(self.pos[t, i, 0])),
                                 repr(float(self.pos[t, i, 1])),
                                 repr(float(self.vel[t, i, 0])),
                                 repr(float(self.vel[t, i, 1])),
                                 r, c])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        meta = None
        rows = []
        header_seen = False
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("{"):
                    try:
                        meta = json.loads(body)
                    except json.JSONDecodeError as e:
                        raise ValueError(f"line {lineno}: bad meta JSON: {e}")
                continue
            if not header_seen:
                if line.split(",") != ["t", "agent", "x", "y", "vx", "vy",
                                       "reward", "collided"]:
                    raise ValueError(f"line {lineno}: unexpected header {line!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"line {lineno}: expected 8 columns, got {len(parts)}")
            try:
                rows.append((int(parts[0]), int(parts[1]),
                             *(float(v) for v in parts[2:7]), int(parts[7])))
            except ValueError:
                raise ValueError(f"line {lineno}: malformed value in {line!r}")
        if meta is None:
            raise ValueError("missing '# {...}' meta line")
        if not header_seen:
            raise ValueError("missing CSV header")
        starts = np.asarray(meta["starts"], dtype=np.float64)
        goals = np.asarray(meta["goals"], dtype=np.float64)
        n = len(starts)
        if not rows or len(rows) % n != 0:
            raise ValueError("row count is not a multiple of the agent count")
        t_total = len(rows) // n
        pos = np.zeros((t_total, n, 2))
        vel = np.zeros((t_total, n, 2))
        rew = np.zeros((t_total, n))
        col = np.zeros((t_total, n), dtype=bool)
        for t, i, x, y, vx, vy, r, c in rows:
            pos[t, i] = (x, y)
            vel[t, i] = (vx, vy)
            rew[t, i] = r
            col[t, i] = bool(c)
        tol = float(meta["goal_tolerance"])
        arrived = np.linalg.norm(pos - goals[None], axis=2) <= tol
        t_steps = t_total - 1
        return cls(
            scenario_id=meta.get("scenario_id", ""),
            starts=starts, goals=goals, pos=pos, vel=vel, arrived=arrived,
            actions=np.zeros((t_steps, n, 2)),
            logprobs=np.zeros((t_steps, n)),
            rewards=rew[1:], collided=col[1:],
            layout=ObstacleLayout.from_json(meta["layout"]),
            termination=meta["termination"], dt=float(meta["dt"]),
            v_max=float(meta["v_max"]), goal_tolerance=tol)

    @classmethod
    def load_csv(cls, path):
        with open(path) as fh:
            return cls.from_csv(fh.read())


def rollout(scenario, layout, policy, rng):
    """Run one episode; pure function of (scenario, layout, policy, seed).

    policy(state, rng) must return (desired_vel (n, 2), per_agent_logprob
    (n,)) using only local observations. A non-finite action aborts the
    episode with termination 'aborted_numeric'. With use_mpc_filter the
    policy's command is post-processed by the low-level MPC before the
    kinematic step; the log keeps the policy's own action.
    """
    action_filter = None
    if scenario.use_mpc_filter:
        from .lowlevel import make_mpc_filter
        action_filter = make_mpc_filter(scenario)
    state = initial_state(scenario)
    pos = [state.pos.copy()]
    vel = [state.vel.copy()]
    arr = [state.arrived.copy()]
    actions, logprobs, rewards, collided = [], [], [], []
    termination = "timeout"
    for _ in range(scenario.max_steps):
        if state.arrived.all():
            termination = "all_arrived"
            break
        desired, logp = policy(state, rng)
        desired = np.asarray(desired, dtype=np.float64)
        if not np.all(np.isfinite(desired)):
            termination = "aborted_numeric"
            break
        executed = (action_filter(state, desired) if action_filter
                    else desired)
        new_state = step(state, executed, scenario)
        flags = collisions(new_state, layout, scenario)
        per_agent, _ = reward(state, new_state, layout, scenario, flags)
        actions.append(desired)
        logprobs.append(np.asarray(logp, dtype=np.float64).reshape(-1))
        rewards.append(per_agent)
        collided.append(flags)
        pos.append(new_state.pos.copy())
        vel.append(new_state.vel.copy())
        arr.append(new_state.arrived.copy())
        state = new_state
    else:
        termination = "timeout"
    if state.arrived.all() and termination == "timeout":
        termination = "all_arrived"
    n = scenario.n_agents
    t_steps = len(actions)
    return EpisodeLog(
        scenario_id=scenario.scenario_id,
        starts=scenario.starts.copy(), goals=scenario.goals.copy(),
        pos=np.asarray(pos), vel=np.asarray(vel), arrived=np.asarray(arr),
        actions=(np.asarray(actions) if t_steps else np.zeros((0, n, 2))),
        logprobs=(np.asarray(logprobs) if t_steps else np.zeros((0, n))),
        rewards=(np.asarray(rewards) if t_steps else np.zeros((0, n))),
        collided=(np.asarray(collided) if t_steps else np.zeros((0, n), dtype=bool)),
        layout=layout, termination=termination, dt=scenario.dt,
        v_max=scenario.v_max, goal_tolerance=scenario.goal_tolerance)
