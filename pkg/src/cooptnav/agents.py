"""Decentralized navigation policy and centralized critic.

The policy is a single message-passing layer over the communication graph
followed by a shared head that emits per-agent truncated-Gaussian velocity
commands. Observations are egocentric (relative goal, relative neighbor
position/velocity), which makes the policy translation invariant; an
"absolute" switch feeds raw neighbor states instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dist import (TruncGauss, tg_grad_logpdf_arr, tg_logpdf_arr,
                   tg_sample_arr)
from .errors import ConfigurationError
from .net import (GnnSpec, MlpSpec, ParamBlock, gnn_backward, gnn_forward,
                  init_gnn_params, init_mlp_params, mlp_backward, mlp_forward)
from .world import comm_graph

NODE_WIDTH = 4  # (goal - pos, vel)
SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class PolicySpec:
    """Architecture and observation encoding of the navigation policy."""

    v_max: float
    gnn: GnnSpec
    head: MlpSpec
    relative: bool = True

    def __post_init__(self):
        if self.gnn.node_width != NODE_WIDTH:
            raise ConfigurationError(f"policy GNN node width must be {NODE_WIDTH}")
        if self.head.n_in != self.gnn.n_out or self.head.n_out != 4:
            raise ConfigurationError(
                "head must map GNN output width to 4 (mu_raw, sigma_raw per axis)")

    @classmethod
    def build(cls, v_max, feature_width=64, mlp_hidden=(64, 64, 64),
              head_hidden=(), relative=True):
        gnn = GnnSpec.build(NODE_WIDTH, feature_width, msg_hidden=mlp_hidden,
                            msg_out=feature_width, upd_hidden=mlp_hidden)
        head = MlpSpec.build(feature_width, head_hidden, 4)
        return cls(v_max, gnn, head, relative)

    def to_json(self):
        return {
            "v_max": self.v_max,
            "relative": self.relative,
            "feature_width": self.gnn.n_out,
            "message": {"widths": list(self.gnn.message.widths),
                        "acts": list(self.gnn.message.acts)},
            "update": {"widths": list(self.gnn.update.widths),
                       "acts": list(self.gnn.update.acts)},
            "head": {"widths": list(self.head.widths),
                     "acts": list(self.head.acts)},
        }

    @classmethod
    def from_json(cls, obj):
        gnn = GnnSpec(NODE_WIDTH,
                      MlpSpec(tuple(obj["message"]["widths"]),
                              tuple(obj["message"]["acts"])),
                      MlpSpec(tuple(obj["update"]["widths"]),
                              tuple(obj["update"]["acts"])))
        head = MlpSpec(tuple(obj["head"]["widths"]), tuple(obj["head"]["acts"]))
        return cls(float(obj["v_max"]), gnn, head, bool(obj["relative"]))


@dataclass
class PolicyParams:
    gnn: ParamBlock
    head: ParamBlock

    def copy(self):
        return PolicyParams(self.gnn.copy(), self.head.copy())

    def to_json(self, spec):
        return {"kind": "policy", "version": 1, "spec": spec.to_json(),
                "gnn": self.gnn.to_json(), "head": self.head.to_json()}

    @classmethod
    def from_json(cls, obj):
        if obj.get("kind") != "policy" or obj.get("version") != 1:
            raise ConfigurationError("not a version-1 policy checkpoint")
        spec = PolicySpec.from_json(obj["spec"])
        return cls(ParamBlock.from_json(obj["gnn"]),
                   ParamBlock.from_json(obj["head"])), spec


def init_policy_params(spec, rng):
    return PolicyParams(init_gnn_params(spec.gnn, rng),
                        init_mlp_params(spec.head, rng))


def observe(state, goals):
    """Per-agent egocentric node features: (goal - pos, vel)."""
    return np.concatenate([goals - state.pos, state.vel], axis=1)


def edge_observations(state, neighbors, relative):
    """Neighbor states as presented to the message MLP per directed edge."""
    if not relative:
        return None
    edge_states = {}
    for i, nbrs in enumerate(neighbors):
        for j in nbrs:
            edge_states[(i, j)] = np.concatenate(
                [state.pos[j] - state.pos[i], state.vel[j] - state.vel[i]])
    return edge_states


@dataclass
class PolicyTape:
    gnn_tape: object
    head_tape: object
    raw: np.ndarray        # (n, 4) head outputs
    mus: np.ndarray        # (n, 2)
    sigmas: np.ndarray     # (n, 2)


def _head_transform(raw, v_max):
    # mu in (-v_max, v_max) via sigmoid, sigma via softplus with a floor
    mus = -v_max + 2.0 * v_max * expit(raw[:, [0, 2]])
    sigmas = np.logaddexp(0.0, raw[:, [1, 3]]) + SIGMA_FLOOR
    return mus, sigmas


def policy_dist(params, spec, state, goals, comm_radius):
    """Per-agent (vx, vy) truncated-Gaussian pairs plus a backward tape."""
    neighbors, support = comm_graph(state, comm_radius)
    feats = observe(state, goals)
    edge_states = edge_observations(state, neighbors, spec.relative)
    gnn_out, gnn_tape = gnn_forward(params.gnn, spec.gnn, feats, neighbors,
                                    support, edge_states)
    raw, head_tape = mlp_forward(params.head, spec.head, gnn_out)
    mus, sigmas = _head_transform(raw, spec.v_max)
    dists = [(TruncGauss(mus[i, 0], sigmas[i, 0], -spec.v_max, spec.v_max),
              TruncGauss(mus[i, 1], sigmas[i, 1], -spec.v_max, spec.v_max))
             for i in range(len(mus))]
    return dists, PolicyTape(gnn_tape, head_tape, raw, mus, sigmas)


def policy_sample_logprob(dists, rng):
    """Sample per-agent actions; returns (actions, total logprob, per-agent).

    Draws one uniform block per call so replays are reproducible from the
    rng state alone.
    """
    mus = np.array([[d.mu for d in pair] for pair in dists])
    sigmas = np.array([[d.sigma for d in pair] for pair in dists])
    lo, hi = dists[0][0].lo, dists[0][0].hi
    u = rng.random(mus.shape)
    actions = tg_sample_arr(mus, sigmas, lo, hi, u)
    per_agent = tg_logpdf_arr(mus, sigmas, lo, hi, actions).sum(axis=1)
    return actions, float(per_agent.sum()), per_agent


def policy_logprob(dists, actions):
    """Per-agent log probability of given actions."""
    mus = np.array([[d.mu for d in pair] for pair in dists])
    sigmas = np.array([[d.sigma for d in pair] for pair in dists])
    lo, hi = dists[0][0].lo, dists[0][0].hi
    return tg_logpdf_arr(mus, sigmas, lo, hi,
                         np.asarray(actions)).sum(axis=1)


def _raw_score(tape, actions, weights, v_max):
    """Gradient of sum_i w_i log pi_i(a_i) w.r.t. the raw head outputs."""
    d_mu, d_sigma = tg_grad_logpdf_arr(tape.mus, tape.sigmas, -v_max, v_max,
                                       np.asarray(actions, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)[:, None]
    s_mu = expit(tape.raw[:, [0, 2]])
    raw_grad = np.zeros_like(tape.raw)
    raw_grad[:, [0, 2]] = w * d_mu * 2.0 * v_max * s_mu * (1.0 - s_mu)
    raw_grad[:, [1, 3]] = w * d_sigma * expit(tape.raw[:, [1, 3]])
    return raw_grad


def policy_logprob_backward(params, spec, tape, actions, weights):
    """Gradient of sum_i weights[i] * log pi_i(action_i) w.r.t. parameters.

    Returns (gnn_grad, head_grad) ParamBlocks. Chains the analytic
    truncated-Gaussian score through the head transform, the head MLP and
    the message-passing layer.
    """
    raw_grad = _raw_score(tape, actions, weights, spec.v_max)
    head_grad, gnn_upstream = mlp_backward(params.head, spec.head,
                                           tape.head_tape, raw_grad)
    gnn_grad = gnn_backward(params.gnn, spec.gnn, tape.gnn_tape, gnn_upstream)
    return gnn_grad, head_grad


def make_policy_sampler(params, spec, scenario):
    """Adapter for world.rollout: state -> (desired velocities, logprobs)."""
    def sampler(state, rng):
        dists, _ = policy_dist(params, spec, state, scenario.goals,
                               scenario.comm_radius)
        actions, _, per_agent = policy_sample_logprob(dists, rng)
        return actions, per_agent
    return sampler


# ---------------------------------------------------------------------------
# Batched evaluation over many logged steps (training hot path)
# ---------------------------------------------------------------------------

@dataclass
class StepBatch:
    """Union graph of several world states (block-diagonal adjacency)."""

    feats: np.ndarray        # (N, 4), N = sum of agent counts
    neighbors: list
    support: dict
    edge_states: dict | None
    offsets: np.ndarray      # start index of each step's nodes

    @property
    def n_nodes(self):
        return self.feats.shape[0]


def batch_steps(states, goals_list, comm_radius, relative):
    """Stack per-step graphs into one disconnected union graph."""
    feats, neighbors, support, edge_states = [], [], {}, {}
    offsets = []
    offset = 0
    for state, goals in zip(states, goals_list):
        offsets.append(offset)
        nbrs, _ = comm_graph(state, comm_radius)
        feats.append(observe(state, goals))
        for i, row in enumerate(nbrs):
            neighbors.append([j + offset for j in row])
            support[(i + offset, i + offset)] = 1.0
            for j in row:
                support[(i + offset, j + offset)] = 1.0
                if relative:
                    edge_states[(i + offset, j + offset)] = np.concatenate(
                        [state.pos[j] - state.pos[i],
                         state.vel[j] - state.vel[i]])
        offset += len(state.pos)
    return StepBatch(np.concatenate(feats, axis=0), neighbors, support,
                     edge_states if relative else None,
                     np.asarray(offsets, dtype=np.intp))


def policy_forward_batch(params, spec, batch):
    """Distribution parameters for every agent-step in the batch."""
    gnn_out, gnn_tape = gnn_forward(params.gnn, spec.gnn, batch.feats,
                                    batch.neighbors, batch.support,
                                    batch.edge_states)
    raw, head_tape = mlp_forward(params.head, spec.head, gnn_out)
    mus, sigmas = _head_transform(raw, spec.v_max)
    return PolicyTape(gnn_tape, head_tape, raw, mus, sigmas)


def policy_logprob_batch(tape, actions, v_max):
    """Per-agent-step log probabilities for logged actions (N, 2)."""
    return tg_logpdf_arr(tape.mus, tape.sigmas, -v_max, v_max,
                         np.asarray(actions, dtype=np.float64)).sum(axis=1)


def policy_backward_batch(params, spec, tape, actions, weights):
    """Parameter gradient of sum over agent-steps of w * log pi."""
    return policy_logprob_backward(params, spec, tape, actions, weights)


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

VALUE_FEATURES = 6  # mean over agents of (goal - pos, vel, |goal - pos|, |vel|)


@dataclass(frozen=True)
class ValueSpec:
    n_agents: int
    mlp: MlpSpec

    @classmethod
    def build(cls, n_agents, hidden=(64, 64)):
        return cls(n_agents, MlpSpec.build(VALUE_FEATURES, hidden, 1, "tanh"))

    def to_json(self):
        return {"n_agents": self.n_agents,
                "mlp": {"widths": list(self.mlp.widths),
                        "acts": list(self.mlp.acts)}}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["n_agents"]),
                   MlpSpec(tuple(obj["mlp"]["widths"]), tuple(obj["mlp"]["acts"])))


@dataclass
class ValueParams:
    mlp: ParamBlock

    def copy(self):
        return ValueParams(self.mlp.copy())

    def to_json(self, spec):
        return {"kind": "value", "version": 1, "spec": spec.to_json(),
                "mlp": self.mlp.to_json()}

    @classmethod
    def from_json(cls, obj):
        if obj.get("kind") != "value" or obj.get("version") != 1:
            raise ConfigurationError("not a version-1 value checkpoint")
        return cls(ParamBlock.from_json(obj["mlp"])), ValueSpec.from_json(obj["spec"])


def init_value_params(spec, rng):
    return ValueParams(init_mlp_params(spec.mlp, rng))


def value_features(pos, vel, goals):
    """Permutation-invariant pooled features for a batch of states.

    pos/vel may be (n, 2) or (T, n, 2); returns (VALUE_FEATURES,) or
    (T, VALUE_FEATURES).
    """
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    g = goals - pos
    per_agent = np.concatenate(
        [g, vel, np.linalg.norm(g, axis=-1, keepdims=True),
         np.linalg.norm(vel, axis=-1, keepdims=True)], axis=-1)
    return per_agent.mean(axis=-2)


def value(params, spec, state, goals):
    """Scalar state-value estimate for one world state."""
    if len(state.pos) != spec.n_agents:
        raise ConfigurationError(
            f"value head built for {spec.n_agents} agents, got {len(state.pos)}")
    feats = value_features(state.pos, state.vel, goals)
    out, _ = mlp_forward(params.mlp, spec.mlp, feats)
    return float(out[0])


def value_batch(params, spec, feats):
    """Values for a (T, VALUE_FEATURES) feature batch; returns (vals, tape)."""
    out, tape = mlp_forward(params.mlp, spec.mlp, feats)
    return out[:, 0], tape


def value_backward(params, spec, tape, upstream):
    """Parameter gradient of sum_t upstream[t] * V_t."""
    grad, _ = mlp_backward(params.mlp, spec.mlp, tape,
                           np.asarray(upstream, dtype=np.float64)[:, None])
    return grad


def policy_checkpoint_hash(obj):
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode()).hexdigest()
