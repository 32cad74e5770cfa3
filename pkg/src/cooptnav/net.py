"""Minimal differentiable function approximators with exact analytic gradients.

Provides a multilayer perceptron, a single-layer message-passing network
built from MLP message/update functions, and a first-order (Adam) optimizer.
Forward passes return a tape that supports exactly one backward call; all
parameter gradients are exact Jacobian-transpose products, verified against
finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

ACTIVATIONS = ("relu", "tanh", "identity")


# ---------------------------------------------------------------------------
# Parameter container
# ---------------------------------------------------------------------------

@dataclass
class ParamBlock:
    """Flat float64 parameter vector plus a (name, shape) layout."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.layout = tuple((name, tuple(shape)) for name, shape in self.layout)
        index = {}
        offset = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            index[name] = (offset, size, shape)
            offset += size
        if offset != self.values.size:
            raise ConfigurationError(
                f"layout describes {offset} values, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("ParamBlock contains non-finite values")
        self._index = index

    def view(self, name):
        """Return a reshaped view of one named entry (writes affect values)."""
        try:
            offset, size, shape = self._index[name]
        except KeyError:
            raise ConfigurationError(f"no layout entry named {name!r}")
        return self.values[offset:offset + size].reshape(shape)

    def copy(self):
        return ParamBlock(self.values.copy(), self.layout)

    def zeros_like(self):
        return ParamBlock(np.zeros_like(self.values), self.layout)

    def to_json(self):
        return {
            "version": 1,
            "layout": [[name, list(shape)] for name, shape in self.layout],
            "values": self.values.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("version") != 1:
            raise ConfigurationError(
                f"unsupported ParamBlock version {obj.get('version')!r}")
        layout = tuple((name, tuple(shape)) for name, shape in obj["layout"])
        return cls(np.asarray(obj["values"], dtype=np.float64), layout)

    def dumps(self):
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) and one activation per layer.

    The output layer is always 'identity': distribution heads apply their
    own transforms.
    """

    widths: tuple
    acts: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "acts", tuple(self.acts))
        if len(self.widths) < 2:
            raise ConfigurationError("MlpSpec needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ConfigurationError("layer widths must be positive")
        if len(self.acts) != len(self.widths) - 1:
            raise ConfigurationError("need one activation per layer")
        if any(a not in ACTIVATIONS for a in self.acts):
            raise ConfigurationError(f"activations must be in {ACTIVATIONS}")
        if self.acts[-1] != "identity":
            raise ConfigurationError("output layer activation must be identity")

    @classmethod
    def build(cls, n_in, hidden, n_out, act="relu"):
        """Hidden layers share one activation; output layer is identity."""
        widths = (n_in, *hidden, n_out)
        acts = (act,) * len(hidden) + ("identity",)
        return cls(widths, acts)

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def layout(self, prefix=""):
        entries = []
        for l in range(self.n_layers):
            entries.append((f"{prefix}layer{l}.W", (self.widths[l + 1], self.widths[l])))
            entries.append((f"{prefix}layer{l}.b", (self.widths[l + 1],)))
        return tuple(entries)


def init_mlp_params(spec, rng, prefix=""):
    """Uniform(-s, s) with s = 1/sqrt(fan_in) for weights and biases."""
    chunks = []
    for l in range(spec.n_layers):
        fan_in = spec.widths[l]
        s = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-s, s, size=spec.widths[l + 1] * fan_in))
        chunks.append(rng.uniform(-s, s, size=spec.widths[l + 1]))
    return ParamBlock(np.concatenate(chunks), spec.layout(prefix))


def _apply_act(z, act):
    if act == "relu":
        # subgradient 0 at exactly 0: strict inequality on the mask
        return np.where(z > 0.0, z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _act_deriv(z, act):
    if act == "relu":
        return (z > 0.0).astype(np.float64)
    if act == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass
class GradTape:
    """Per-layer activations cached by a forward pass; single use."""

    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    batched: bool = False
    used: bool = False

    def consume(self):
        if self.used:
            raise UsageError("GradTape already consumed by a backward pass")
        self.used = True


def mlp_forward(params, spec, x, prefix=""):
    """Forward pass; accepts a vector or a (batch, n_in) matrix.

    Returns (output, tape); the tape is valid for one mlp_backward call.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    a = np.atleast_2d(x)
    if a.shape[1] != spec.n_in:
        raise ConfigurationError(
            f"input width {a.shape[1]} != spec input width {spec.n_in}")
    tape = GradTape(batched=batched)
    for l in range(spec.n_layers):
        w = params.view(f"{prefix}layer{l}.W")
        b = params.view(f"{prefix}layer{l}.b")
        tape.inputs.append(a)
        z = a @ w.T + b
        tape.preacts.append(z)
        a = _apply_act(z, spec.acts[l])
    if not np.all(np.isfinite(a)):
        raise NumericError("MLP forward produced non-finite output")
    out = a if batched else a[0]
    return out, tape


def mlp_backward(params, spec, tape, upstream, prefix=""):
    """Exact reverse-mode pass; returns (param_grad, input_grad)."""
    tape.consume()
    upstream = np.asarray(upstream, dtype=np.float64)
    g = np.atleast_2d(upstream)
    if g.shape[1] != spec.n_out:
        raise ConfigurationError(
            f"upstream width {g.shape[1]} != spec output width {spec.n_out}")
    grad = {}
    for l in range(spec.n_layers - 1, -1, -1):
        gz = g * _act_deriv(tape.preacts[l], spec.acts[l])
        grad[f"{prefix}layer{l}.W"] = gz.T @ tape.inputs[l]
        grad[f"{prefix}layer{l}.b"] = gz.sum(axis=0)
        g = gz @ params.view(f"{prefix}layer{l}.W")
    flat = np.concatenate([grad[name].ravel() for name, _ in spec.layout(prefix)])
    input_grad = g if tape.batched else g[0]
    return ParamBlock(flat, spec.layout(prefix)), input_grad


# ---------------------------------------------------------------------------
# Single-layer message-passing network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GnnSpec:
    """Message and update MLPs around a sum aggregation.

    node_width is the per-node state width d; the message MLP consumes
    (own state, neighbor state, support entry) = 2d + 1 inputs and the
    update MLP consumes (own state, aggregated message).
    """

    node_width: int
    message: MlpSpec
    update: MlpSpec

    def __post_init__(self):
        d = self.node_width
        if self.message.n_in != 2 * d + 1:
            raise ConfigurationError(
                f"message MLP input width {self.message.n_in} != 2*{d}+1")
        if self.update.n_in != d + self.message.n_out:
            raise ConfigurationError(
                f"update MLP input width {self.update.n_in} != "
                f"{d} + {self.message.n_out}")

    @classmethod
    def build(cls, node_width, n_out, msg_hidden=(64, 64, 64), msg_out=64,
              upd_hidden=(64, 64, 64), act="relu"):
        message = MlpSpec.build(2 * node_width + 1, msg_hidden, msg_out, act)
        update = MlpSpec.build(node_width + msg_out, upd_hidden, n_out, act)
        return cls(node_width, message, update)

    @property
    def n_out(self):
        return self.update.n_out

    def layout(self):
        return self.message.layout("msg.") + self.update.layout("upd.")


def init_gnn_params(spec, rng):
    msg = init_mlp_params(spec.message, rng, "msg.")
    upd = init_mlp_params(spec.update, rng, "upd.")
    return ParamBlock(np.concatenate([msg.values, upd.values]), spec.layout())


@dataclass
class GnnTape:
    msg_tape: GradTape
    upd_tape: GradTape
    edge_src: np.ndarray   # canonical order
    group_starts: np.ndarray
    group_nodes: np.ndarray
    rank: np.ndarray       # rank[label] = canonical position
    order: np.ndarray      # order[pos] = label
    n_nodes: int
    used: bool = False

    def consume(self):
        if self.used:
            raise UsageError("GnnTape already consumed by a backward pass")
        self.used = True


def _canonical_order(node_states):
    # Content-based node order so that summation order (and hence every
    # floating-point result) is invariant under relabeling of the nodes.
    order = np.lexsort(node_states.T[::-1])
    rank = np.empty(len(order), dtype=np.intp)
    rank[order] = np.arange(len(order), dtype=np.intp)
    return order, rank


def gnn_forward(params, spec, node_states, neighbors, support, edge_states=None):
    """One message-passing layer with sum aggregation.

    Args:
        params: ParamBlock over spec.layout().
        spec: GnnSpec.
        node_states: (n, d) per-node states.
        neighbors: adjacency lists (symmetric, no self entries).
        support: (n, n) edge-weight matrix (nonzero on edges and diagonal)
            or a {(i, j): weight} dict covering every edge.
        edge_states: optional {(i, j): (d,) vector} presenting neighbor j to
            node i (e.g. in node i's frame); defaults to node_states[j].

    Returns:
        (outputs (n, n_out), tape) where outputs[i] depends only on node i
        and its 1-hop neighbors.
    """
    x = np.asarray(node_states, dtype=np.float64)
    n, d = x.shape
    if d != spec.node_width:
        raise ConfigurationError(f"node width {d} != spec node width {spec.node_width}")
    if len(neighbors) != n:
        raise ConfigurationError("neighbors list length != node count")
    if not isinstance(support, dict):
        support = np.asarray(support, dtype=np.float64)

    order, rank = _canonical_order(x)
    src, nbr = [], []
    for i, nbrs in enumerate(neighbors):
        for j in nbrs:
            if not 0 <= j < n:
                raise ConfigurationError(f"neighbor index {j} out of range")
            src.append(i)
            nbr.append(j)
    src = np.asarray(src, dtype=np.intp)
    nbr = np.asarray(nbr, dtype=np.intp)
    if src.size:
        edge_order = np.lexsort((rank[nbr], rank[src]))
        src, nbr = src[edge_order], nbr[edge_order]

    if edge_states is None:
        nbr_feats = x[nbr] if src.size else np.zeros((0, d))
    else:
        nbr_feats = (np.array([edge_states[(i, j)] for i, j in zip(src, nbr)],
                              dtype=np.float64).reshape(len(src), d)
                     if src.size else np.zeros((0, d)))

    if src.size:
        if isinstance(support, dict):
            sup = np.array([support[(i, j)] for i, j in zip(src, nbr)],
                           dtype=np.float64)
        else:
            sup = support[src, nbr]
        msg_in = np.concatenate([x[src], nbr_feats, sup[:, None]], axis=1)
    else:
        msg_in = np.zeros((0, 2 * d + 1))
    msg_out, msg_tape = mlp_forward(params, spec.message, msg_in, "msg.")

    agg = np.zeros((n, spec.message.n_out))
    if src.size:
        # src is sorted by rank, so each node's edges form a contiguous run
        group_starts = np.flatnonzero(np.r_[True, src[1:] != src[:-1]])
        group_nodes = src[group_starts]
        agg[group_nodes] = np.add.reduceat(msg_out, group_starts, axis=0)
    else:
        group_nodes = np.zeros(0, dtype=np.intp)
        group_starts = np.zeros(0, dtype=np.intp)

    upd_in = np.concatenate([x[order], agg[order]], axis=1)
    out_ranked, upd_tape = mlp_forward(params, spec.update, upd_in, "upd.")
    out = np.empty_like(out_ranked)
    out[order] = out_ranked

    tape = GnnTape(msg_tape, upd_tape, src, group_starts, group_nodes,
                   rank, order, n)
    return out, tape


def gnn_backward(params, spec, tape, upstream):
    """Accumulate parameter gradients over all nodes and edges."""
    tape.consume()
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (tape.n_nodes, spec.n_out):
        raise ConfigurationError(
            f"upstream shape {upstream.shape} != ({tape.n_nodes}, {spec.n_out})")
    upd_grad, upd_in_grad = mlp_backward(
        params, spec.update, tape.upd_tape, upstream[tape.order], "upd.")
    d = spec.node_width
    agg_grad_ranked = upd_in_grad[:, d:]
    agg_grad = np.empty_like(agg_grad_ranked)
    agg_grad[tape.order] = agg_grad_ranked
    if tape.edge_src.size:
        msg_upstream = agg_grad[tape.edge_src]
    else:
        msg_upstream = np.zeros((0, spec.message.n_out))
    msg_grad, _ = mlp_backward(params, spec.message, tape.msg_tape,
                               msg_upstream, "msg.")
    return ParamBlock(np.concatenate([msg_grad.values, upd_grad.values]),
                      spec.layout())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grad, state, hyper):
    """One bias-corrected Adam step; pure function of its inputs."""
    if params.values.shape != grad.values.shape:
        raise ConfigurationError("params / grad shape mismatch")
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * g * g
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    new_values = params.values - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return ParamBlock(new_values, params.layout), AdamState(m, v, t)
