"""Generative model over obstacle layouts, conditioned on the task.

A trunk network maps the flattened start/goal positions to a shared
feature; per-template affine heads emit truncated-Gaussian parameters for
each free continuous value (position, radius) and presence logits where an
obstacle may be absent. Feasibility holds by construction: means are
squashed into the template bounds and samples live on the truncated
support.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dist import (Categorical, TruncGauss, cat_grad_logits, cat_logpmf,
                   cat_sample, tg_grad_logpdf, tg_logpdf, tg_sample)
from .errors import ConfigurationError, DomainError
from .net import (MlpSpec, ParamBlock, init_mlp_params, mlp_backward,
                  mlp_forward)
from .world import CONTINUOUS_PARAMS, ObstacleLayout, realize_obstacle

SIGMA_FLOOR = 1e-3
PARAM_ORDER = ("present",) + CONTINUOUS_PARAMS


def template_head_params(template):
    """Ordered list of (name, arity) head outputs for one template."""
    heads = []
    if template.presence_free:
        heads.append(("present", 2))     # absent / present logits
    for name in CONTINUOUS_PARAMS:
        if name in template.continuous_free():
            heads.append((name, 2))      # mu_raw, sigma_raw
    return heads


def template_schema_hash(templates, n_agents):
    doc = {"n_agents": n_agents,
           "templates": [t.to_json() for t in templates]}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class GenSpec:
    """Trunk + per-template head architecture bound to scenario templates."""

    n_agents: int
    templates: tuple
    trunk: MlpSpec
    heads: tuple                 # MlpSpec per template (affine)

    @classmethod
    def build(cls, scenario, hidden=(32, 64), feature_width=32):
        templates = tuple(scenario.obstacle_templates)
        trunk = MlpSpec.build(4 * scenario.n_agents, hidden, feature_width)
        heads = []
        for t in templates:
            arity = sum(a for _, a in template_head_params(t))
            heads.append(MlpSpec.build(feature_width, (), max(arity, 1)))
        return cls(scenario.n_agents, templates, trunk, tuple(heads))

    @property
    def schema_hash(self):
        return template_schema_hash(self.templates, self.n_agents)


@dataclass
class GenParams:
    trunk: ParamBlock
    heads: list

    def copy(self):
        return GenParams(self.trunk.copy(), [h.copy() for h in self.heads])

    def flatten(self):
        layout = tuple((f"trunk.{n}", s) for n, s in self.trunk.layout)
        values = [self.trunk.values]
        for k, head in enumerate(self.heads):
            layout += tuple((f"head{k}.{n}", s) for n, s in head.layout)
            values.append(head.values)
        return ParamBlock(np.concatenate(values), layout)

    def apply_flat_delta(self, delta):
        """Return new params with the flat vector shifted by delta."""
        sizes = [self.trunk.values.size] + [h.values.size for h in self.heads]
        bounds = np.cumsum([0] + sizes)
        trunk = ParamBlock(self.trunk.values + delta[bounds[0]:bounds[1]],
                           self.trunk.layout)
        heads = [ParamBlock(h.values + delta[bounds[k + 1]:bounds[k + 2]],
                            h.layout)
                 for k, h in enumerate(self.heads)]
        return GenParams(trunk, heads)

    def to_json(self, spec):
        return {"kind": "envgen", "version": 1,
                "n_agents": spec.n_agents,
                "template_hash": spec.schema_hash,
                "trunk": self.trunk.to_json(),
                "heads": [h.to_json() for h in self.heads]}

    @classmethod
    def from_json(cls, obj, spec):
        if obj.get("kind") != "envgen" or obj.get("version") != 1:
            raise ConfigurationError("not a version-1 generator checkpoint")
        if obj.get("template_hash") != spec.schema_hash:
            raise ConfigurationError(
                "generator checkpoint was trained against a different "
                "scenario (template schema hash mismatch)")
        return cls(ParamBlock.from_json(obj["trunk"]),
                   [ParamBlock.from_json(h) for h in obj["heads"]])


def init_gen_params(spec, rng):
    return GenParams(init_mlp_params(spec.trunk, rng),
                     [init_mlp_params(h, rng) for h in spec.heads])


@dataclass
class TemplateDist:
    presence: Categorical | None
    params: dict                  # name -> TruncGauss
    raw: np.ndarray = None        # head outputs behind the transforms


@dataclass
class LayoutDistribution:
    """Per-template distributions over the free layout parameters."""

    entries: list

    def to_json(self):
        out = []
        for e in self.entries:
            rec = {}
            if e.presence is not None:
                rec["present_probs"] = e.presence.probs.tolist()
            for name, d in e.params.items():
                rec[name] = {"mu": d.mu, "sigma": d.sigma,
                             "lo": d.lo, "hi": d.hi}
            out.append(rec)
        return out


@dataclass
class GenTape:
    trunk_tape: object
    head_tapes: list
    head_raw: list               # raw outputs per template
    feature: np.ndarray


def _task_input(spec, starts, goals):
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 2)
    goals = np.asarray(goals, dtype=np.float64).reshape(-1, 2)
    if len(starts) != spec.n_agents or len(goals) != spec.n_agents:
        raise ConfigurationError(
            f"generator built for {spec.n_agents} agents, "
            f"got {len(starts)} starts / {len(goals)} goals")
    return np.concatenate([starts.ravel(), goals.ravel()])


def gen_dist(params, spec, starts, goals):
    """Distribution over layouts for one task; returns (dist, tape)."""
    x = _task_input(spec, starts, goals)
    feature, trunk_tape = mlp_forward(params.trunk, spec.trunk, x)
    entries, head_tapes, head_raw = [], [], []
    for k, template in enumerate(spec.templates):
        raw, tape = mlp_forward(params.heads[k], spec.heads[k], feature)
        head_tapes.append(tape)
        head_raw.append(raw)
        presence = None
        tg_params = {}
        pos = 0
        for name, arity in template_head_params(template):
            chunk = raw[pos:pos + arity]
            pos += arity
            if name == "present":
                presence = Categorical(tuple(chunk))
            else:
                lo, hi = template.value_bounds(name)
                mu = lo + (hi - lo) * expit(chunk[0])
                sigma = float(np.logaddexp(0.0, chunk[1])) + SIGMA_FLOOR
                tg_params[name] = TruncGauss(float(mu), sigma, lo, hi)
        entries.append(TemplateDist(presence, tg_params, raw))
    return (LayoutDistribution(entries),
            GenTape(trunk_tape, head_tapes, head_raw, feature))


def _placeholder_values(template):
    """Midpoint geometry recorded for absent obstacles (never simulated)."""
    values = {}
    for name in template.continuous_free():
        lo, hi = template.value_bounds(name)
        values[name] = 0.5 * (lo + hi)
    return values


def layout_sample_logprob(dist, spec, rng):
    """Sample a feasible layout; returns (ObstacleLayout, logprob)."""
    obstacles = []
    logprob = 0.0
    for entry, template in zip(dist.entries, spec.templates):
        values = {}
        present = True
        if entry.presence is not None:
            k = cat_sample(entry.presence, rng)
            logprob += cat_logpmf(entry.presence, k)
            present = bool(k)
            values["present"] = k
        if present:
            for name, d in entry.params.items():
                x = tg_sample(d, rng)
                logprob += tg_logpdf(d, x)
                values[name] = x
        else:
            values.update(_placeholder_values(template))
        obstacles.append(realize_obstacle(template, values))
    return ObstacleLayout(obstacles), float(logprob)


def layout_logprob(dist, spec, layout):
    """Log probability of an existing layout under the distribution."""
    logprob = 0.0
    for entry, template, obstacle in zip(dist.entries, spec.templates,
                                         layout.obstacles):
        if entry.presence is not None:
            logprob += cat_logpmf(entry.presence, int(obstacle.present))
        if obstacle.present:
            for name, d in entry.params.items():
                logprob += tg_logpdf(d, getattr(obstacle, name))
    return float(logprob)


def gen_score_upstream(dist, spec, layout):
    """Per-template d log pi / d raw-head-outputs for one realized layout.

    The network backward is linear in this upstream, so score-function
    estimators can average weighted upstreams over many sampled layouts and
    run a single backward pass afterwards.
    """
    upstreams = []
    for entry, template, obstacle in zip(dist.entries, spec.templates,
                                         layout.obstacles):
        raw_grad = np.zeros(max(sum(a for _, a in
                                    template_head_params(template)), 1))
        pos = 0
        for name, arity in template_head_params(template):
            if name == "present":
                raw_grad[pos:pos + arity] = cat_grad_logits(
                    entry.presence, int(obstacle.present))
            elif obstacle.present:
                d = entry.params[name]
                x = getattr(obstacle, name)
                if not d.lo <= x <= d.hi:
                    raise DomainError(
                        f"layout value {name}={x} outside template bounds "
                        f"[{d.lo}, {d.hi}]")
                d_mu, d_sigma = tg_grad_logpdf(d, x)
                mu_raw, sigma_raw = entry.raw[pos], entry.raw[pos + 1]
                s = expit(mu_raw)
                raw_grad[pos] = d_mu * (d.hi - d.lo) * s * (1.0 - s)
                raw_grad[pos + 1] = d_sigma * expit(sigma_raw)
            pos += arity
        upstreams.append(raw_grad)
    return upstreams


def gen_grad_from_upstream(params, spec, starts, goals, upstreams):
    """Backward pass mapping per-template head upstreams to a flat gradient."""
    _, tape = gen_dist(params, spec, starts, goals)
    feature_grad = None
    head_grads = []
    for k, upstream in enumerate(upstreams):
        head_grad, in_grad = mlp_backward(params.heads[k], spec.heads[k],
                                          tape.head_tapes[k], upstream)
        head_grads.append(head_grad)
        feature_grad = in_grad if feature_grad is None \
            else feature_grad + in_grad
    trunk_grad, _ = mlp_backward(params.trunk, spec.trunk, tape.trunk_tape,
                                 feature_grad)
    layout_desc = tuple((f"trunk.{n}", s) for n, s in params.trunk.layout)
    values = [trunk_grad.values]
    for k, hg in enumerate(head_grads):
        layout_desc += tuple((f"head{k}.{n}", s) for n, s in hg.layout)
        values.append(hg.values)
    return ParamBlock(np.concatenate(values), layout_desc)


def gen_logprob_grad(params, spec, starts, goals, layout):
    """Exact gradient of layout_logprob w.r.t. all generator parameters.

    Returns a flat ParamBlock matching GenParams.flatten(). The layout must
    have been sampled from gen_dist(params, starts, goals) (values within
    template bounds), otherwise a DomainError is raised.
    """
    dist, _ = gen_dist(params, spec, starts, goals)
    upstreams = gen_score_upstream(dist, spec, layout)
    return gen_grad_from_upstream(params, spec, starts, goals, upstreams)
