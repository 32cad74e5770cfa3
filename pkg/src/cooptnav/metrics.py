"""Navigation performance metrics over episode logs.

Four measures: success weighted by path length (SPL), fraction of the
maximal speed (PCTSpeed), mean collision-flagged steps per agent
(NumCOLL), and mean finite difference of acceleration (DiffACC), plus
batch aggregation over many episodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def spl(log, scenario):
    """(1/n) sum_i s_i * l_i / max(p_i, l_i).

    s_i is arrival within goal tolerance before the step limit, p_i the
    summed step displacements and l_i the straight-line start-goal
    distance (a lower bound on any obstacle-aware shortest path, which
    makes the score conservative and layout independent).
    """
    straight = np.linalg.norm(log.goals - log.starts, axis=1)
    if log.num_steps:
        traveled = np.linalg.norm(np.diff(log.pos, axis=0), axis=2).sum(axis=0)
    else:
        traveled = np.zeros(log.n_agents)
    success = log.arrived[-1].astype(np.float64)
    return float(np.mean(success * straight / np.maximum(traveled, straight)))


def pctspeed(log, scenario):
    """Mean over agents and steps of |v| / v_max; 0 for empty episodes."""
    t = log.num_steps
    if t == 0:
        return 0.0
    speeds = np.linalg.norm(log.vel[1:], axis=2)
    return float(speeds.mean() / scenario.v_max)


def numcoll(log):
    """Mean over agents of the number of collision-flagged steps."""
    if log.num_steps == 0:
        return 0.0
    return float(log.collided.sum(axis=0).mean())


def diffacc(log, scenario):
    """Mean over agents and steps of |a_t - a_(t-1)| with a_0 = 0."""
    t = log.num_steps
    if t == 0:
        return 0.0
    acc = np.diff(log.vel, axis=0) / log.dt          # a_1 .. a_T
    acc = np.concatenate([np.zeros((1,) + acc.shape[1:]), acc])  # a_0 = 0
    jerk = np.linalg.norm(np.diff(acc, axis=0), axis=2)
    return float(jerk.sum() / (log.n_agents * t))


def episode_metrics(log, scenario):
    return {
        "spl": spl(log, scenario),
        "pctspeed": pctspeed(log, scenario),
        "numcoll": numcoll(log),
        "diffacc": diffacc(log, scenario),
    }


@dataclass
class MetricReport:
    """Aggregate over a batch of episodes, with per-episode breakdown."""

    spl: float
    pctspeed: float
    numcoll: float
    diffacc: float
    n_episodes: int
    std: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)

    def to_json(self):
        return {
            "spl": self.spl, "pctspeed": self.pctspeed,
            "numcoll": self.numcoll, "diffacc": self.diffacc,
            "n_episodes": self.n_episodes, "std": dict(self.std),
            "episodes": list(self.episodes),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def from_episodes(cls, rows):
        if not rows:
            return cls(0.0, 0.0, 0.0, 0.0, 0, {}, [])
        keys = ("spl", "pctspeed", "numcoll", "diffacc")
        arrays = {k: np.array([r[k] for r in rows]) for k in keys}
        means = {k: float(a.mean()) for k, a in arrays.items()}
        stds = {k: float(a.std()) for k, a in arrays.items()}
        return cls(means["spl"], means["pctspeed"], means["numcoll"],
                   means["diffacc"], len(rows), stds, list(rows))


def aggregate(logs, scenario):
    """Batch MetricReport over (tasks x trials) episode logs."""
    rows = [episode_metrics(log, scenario) for log in logs]
    return MetricReport.from_episodes(rows)
