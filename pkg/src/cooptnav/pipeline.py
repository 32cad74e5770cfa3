"""End-to-end helpers shared by the CLI and the acceptance suite.

Builds default models for a scenario, trains them with the coordinated
loop, and evaluates checkpoints over sampled tasks under the co-optimized,
hand-designed and random layout modes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import agents as ag
from . import envgen as eg
from .coopt import TrainConfig, coordinate
from .errors import ConfigurationError
from .metrics import MetricReport, aggregate
from .scenarios import hand_designed_layout, random_layout, sample_task
from .world import rollout

log = logging.getLogger("cooptnav.pipeline")

EVAL_MODES = ("co_opt", "hand_designed", "random_layout")


@dataclass
class Models:
    policy_spec: ag.PolicySpec
    policy: ag.PolicyParams
    value_spec: ag.ValueSpec
    value: ag.ValueParams
    gen_spec: eg.GenSpec
    gen: eg.GenParams


def build_models(scenario, seed, feature_width=64, mlp_hidden=(64, 64, 64),
                 trunk_hidden=(32, 64), trunk_features=32, relative=True):
    """Default architectures: 4-layer/64-unit message and update MLPs
    around one message-passing layer, and a (32, 64, 32)-unit generator
    trunk, all seeded from one stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    policy_spec = ag.PolicySpec.build(scenario.v_max, feature_width,
                                      mlp_hidden, relative=relative)
    value_spec = ag.ValueSpec.build(scenario.n_agents)
    gen_spec = eg.GenSpec.build(scenario, hidden=trunk_hidden,
                                feature_width=trunk_features)
    return Models(
        policy_spec=policy_spec,
        policy=ag.init_policy_params(policy_spec, rng),
        value_spec=value_spec,
        value=ag.init_value_params(value_spec, rng),
        gen_spec=gen_spec,
        gen=eg.init_gen_params(gen_spec, rng))


def train(scenario, cfg, models=None, checkpoint_cb=None):
    """Run the coordinated loop; returns (record, trained Models)."""
    if models is None:
        models = build_models(scenario, cfg.seed)
    record, policy, value, gen = coordinate(
        scenario, models.policy, models.policy_spec, models.value,
        models.value_spec, models.gen, models.gen_spec, cfg,
        checkpoint_cb=checkpoint_cb)
    trained = Models(models.policy_spec, policy, models.value_spec, value,
                     models.gen_spec, gen)
    return record, trained


def save_checkpoints(models, out_dir):
    paths = {}
    docs = {
        "policy.json": models.policy.to_json(models.policy_spec),
        "value.json": models.value.to_json(models.value_spec),
        "envgen.json": models.gen.to_json(models.gen_spec),
    }
    for name, doc in docs.items():
        path = out_dir / name
        with open(path, "w") as fh:
            json.dump(doc, fh)
        paths[name] = str(path)
    return paths


def load_checkpoints(scenario, policy_path, envgen_path=None):
    with open(policy_path) as fh:
        policy, policy_spec = ag.PolicyParams.from_json(json.load(fh))
    gen_spec = eg.GenSpec.build(scenario)
    gen = None
    if envgen_path is not None:
        with open(envgen_path) as fh:
            gen = eg.GenParams.from_json(json.load(fh), gen_spec)
    return policy, policy_spec, gen_spec, gen


def _episode_layout(mode, scenario_task, gen, gen_spec, rng):
    if mode == "co_opt":
        dist, _ = eg.gen_dist(gen, gen_spec, scenario_task.starts,
                              scenario_task.goals)
        layout, _ = eg.layout_sample_logprob(dist, gen_spec, rng)
        return layout
    if mode == "hand_designed":
        return hand_designed_layout(scenario_task)
    if mode == "random_layout":
        return random_layout(scenario_task, rng)
    raise ConfigurationError(f"unknown eval mode {mode!r}")


def evaluate(scenario, policy, policy_spec, mode, tasks, trials, seed,
             gen=None, gen_spec=None, threads=1, keep_logs=False):
    """MetricReport over tasks x trials episodes for one layout mode.

    Task draws depend only on (seed, task index), so different modes
    evaluated with the same seed face identical navigation tasks.
    """
    if mode == "co_opt" and gen is None:
        raise ConfigurationError("co_opt evaluation needs a generator checkpoint")
    root = np.random.SeedSequence(seed)
    jobs = []
    for t_idx in range(tasks):
        task_seq = np.random.SeedSequence(entropy=root.entropy,
                                          spawn_key=(t_idx,))
        task_rng = np.random.default_rng(task_seq)
        starts, goals = sample_task(scenario, task_rng)
        scenario_task = scenario.with_task(starts, goals)
        for trial in range(trials):
            trial_seq = np.random.SeedSequence(
                entropy=root.entropy, spawn_key=(t_idx, trial + 1))
            jobs.append((scenario_task, trial_seq))

    def run(job):
        scenario_task, seq = job
        rng = np.random.default_rng(seq)
        layout = _episode_layout(mode, scenario_task, gen, gen_spec, rng)
        sampler = ag.make_policy_sampler(policy, policy_spec, scenario_task)
        return rollout(scenario_task, layout, sampler, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logs = list(pool.map(run, jobs))
    else:
        logs = [run(job) for job in jobs]
    report = aggregate(logs, scenario)
    return (report, logs) if keep_logs else (report, None)


def config_hash(obj):
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode()).hexdigest()


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def write_manifest(path, command, argv, cfg_obj, seed, outputs):
    """Run manifest: enough to reproduce the run bit-exactly."""
    doc = {
        "command": command,
        "argv": list(argv),
        "config_hash": config_hash(cfg_obj),
        "seed": seed,
        "outputs": {name: file_hash(p) for name, p in outputs.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
    return doc
