"""Alternating co-optimization of the navigation policy and the generator.

Phase (i) of each outer iteration samples one obstacle layout from the
generator and improves the policy/critic pair in that environment
(PPO-clip by default, or the plain score-function actor-critic update via
algo='vanilla_pg'). Phase (ii) freezes the policy and performs
likelihood-ratio gradient ascent on the generator parameters, estimating
the objective gradient as mean over rollouts of (return - baseline) times
the layout score.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import agents as ag
from . import envgen as eg
from .errors import ConfigurationError, NumericError
from .net import AdamHyper, AdamState, ParamBlock, adam_step
from .scenarios import hand_designed_layout
from .world import WorldState, rollout

log = logging.getLogger("cooptnav.coopt")


def replace_values(block, values):
    return ParamBlock(values, block.layout)


# ---------------------------------------------------------------------------
# Configuration and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 16          # graph steps per minibatch
    gae_lambda: float = 0.95


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    delta_alpha: float = 3e-4    # actor step size
    delta_beta: float = 0.1      # generator ascent step size
    critic_lr: float = 1e-3
    rho_a: int = 1               # policy-update passes per outer iteration
    rho_o: int = 1               # generator ascent steps per outer iteration
    n_env_rollouts: int = 4      # rollouts per env-gradient estimate
    outer_iters: int = 200
    episodes_per_update: int = 4
    ppo: PpoConfig = field(default_factory=PpoConfig)
    baseline_decay: float = 0.9
    baseline_on: bool = True
    algo: str = "ppo"            # "ppo" | "vanilla_pg"
    layout_mode: str = "generator"   # "generator" | "hand_designed"
    env_grad_clip: float = 0.0   # max flat-gradient norm; 0 disables
    seed: int = 0
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        for name in ("rho_a", "rho_o", "n_env_rollouts", "outer_iters",
                     "episodes_per_update"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.algo not in ("ppo", "vanilla_pg"):
            raise ConfigurationError(f"unknown algo {self.algo!r}")
        if self.layout_mode not in ("generator", "hand_designed"):
            raise ConfigurationError(
                f"unknown layout_mode {self.layout_mode!r}")
        if self.layout_mode == "hand_designed" and self.rho_o > 0:
            raise ConfigurationError(
                "hand_designed training pins the layout; set rho_o=0")

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        ppo = PpoConfig(**obj.pop("ppo", {}))
        return cls(ppo=ppo, **obj)

    def to_json(self):
        out = {k: getattr(self, k) for k in (
            "gamma", "delta_alpha", "delta_beta", "critic_lr", "rho_a",
            "rho_o", "n_env_rollouts", "outer_iters", "episodes_per_update",
            "baseline_decay", "baseline_on", "algo", "seed",
            "checkpoint_every", "threads", "env_grad_clip")}
        out["layout_mode"] = self.layout_mode
        out["ppo"] = {"clip_eps": self.ppo.clip_eps, "epochs": self.ppo.epochs,
                      "minibatch": self.ppo.minibatch,
                      "gae_lambda": self.ppo.gae_lambda}
        return out


@dataclass
class TrainRecord:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def objective_curve(self):
        return np.array([r["R_a"] for r in self.rows if "R_a" in r])

    def to_jsonl(self):
        return "\n".join(json.dumps(r) for r in self.rows) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path):
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
        return cls(rows)


# ---------------------------------------------------------------------------
# Temporal-difference machinery
# ---------------------------------------------------------------------------

def td_error(r, v_t, v_next, gamma):
    """Standard TD(0) residual r + gamma * v_next - v_t."""
    return r + gamma * v_next - v_t


def discounted_returns(rewards, gamma):
    """Returns-to-go G_t = r_t + gamma * G_(t+1)."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(deltas, gamma, lam):
    """Generalized advantage estimates from TD residuals."""
    out = np.zeros(len(deltas))
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        out[t] = acc
    return out


# ---------------------------------------------------------------------------
# Policy update (actor-critic)
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    """Adam moments for the actor (gnn + head) and the critic."""

    gnn: AdamState
    head: AdamState
    value: AdamState

    @classmethod
    def fresh(cls, policy_params, value_params):
        return cls(AdamState.zeros(policy_params.gnn.values.size),
                   AdamState.zeros(policy_params.head.values.size),
                   AdamState.zeros(value_params.mlp.values.size))


@dataclass
class _Prepared:
    states: list
    goals: list              # per-step (n, 2)
    actions: np.ndarray      # (S, n, 2)
    old_logp: np.ndarray     # (S, n)
    active: np.ndarray       # (S, n) agents not yet arrived at step start
    advantages: np.ndarray   # (S,) team advantage
    returns: np.ndarray      # (S,) team discounted returns-to-go
    deltas: np.ndarray       # (S,) TD residuals
    vfeats: np.ndarray       # (S, 6)
    comm_radius: float = 0.0


def _prepare(logs, value_params, value_spec, cfg):
    states, goals, actions, old_logp, active = [], [], [], [], []
    advantages, returns, deltas, vfeats = [], [], [], []
    for ep in logs:
        t_steps = ep.num_steps
        if t_steps == 0:
            continue
        feats = ag.value_features(ep.pos, ep.vel, ep.goals)
        vals, _ = ag.value_batch(value_params, value_spec, feats)
        team_r = ep.team_rewards
        v_t = vals[:t_steps]
        v_next = np.concatenate([vals[1:t_steps], [0.0]])  # 0 at last step
        d = td_error(team_r, v_t, v_next, cfg.gamma)
        adv = gae(d, cfg.gamma, cfg.ppo.gae_lambda)
        ret = discounted_returns(team_r, cfg.gamma)
        for t in range(t_steps):
            states.append(WorldState(t, ep.pos[t], ep.vel[t], ep.arrived[t]))
            goals.append(ep.goals)
            actions.append(ep.actions[t])
            old_logp.append(ep.logprobs[t])
            active.append(~ep.arrived[t])
        advantages.append(adv)
        returns.append(ret)
        deltas.append(d)
        vfeats.append(feats[:t_steps])
    if not states:
        return None
    return _Prepared(states, goals, np.asarray(actions),
                     np.asarray(old_logp), np.asarray(active),
                     np.concatenate(advantages), np.concatenate(returns),
                     np.concatenate(deltas), np.concatenate(vfeats))


def _batch_for(prep, idx, spec):
    batch = ag.batch_steps([prep.states[i] for i in idx],
                           [prep.goals[i] for i in idx],
                           comm_radius=prep.comm_radius,
                           relative=spec.relative)
    return batch


def policy_update(policy_params, policy_spec, value_params, value_spec,
                  logs, cfg, scenario, rng, opt=None):
    """rho_a actor-critic passes over one batch of episode logs.

    PPO mode clips the per-agent importance ratios; vanilla_pg performs the
    plain score-function ascent weighted by the TD residual. Returns
    (policy_params, value_params, opt, stats).
    """
    if opt is None:
        opt = OptState.fresh(policy_params, value_params)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "n_steps": 0}
    prep = _prepare(logs, value_params, value_spec, cfg)
    if prep is None or cfg.rho_a == 0:
        return policy_params, value_params, opt, stats
    prep.comm_radius = scenario.comm_radius
    if not np.all(np.isfinite(prep.advantages)):
        raise NumericError("non-finite advantage; policy update skipped")
    stats["n_steps"] = len(prep.states)

    adv = prep.advantages
    if cfg.algo == "ppo":
        std = adv.std()
        if std > 1e-12:
            adv = (adv - adv.mean()) / std

    actor_hyper = AdamHyper(cfg.delta_alpha)
    critic_hyper = AdamHyper(cfg.critic_lr)
    n_total = len(prep.states)

    for _ in range(cfg.rho_a):
        if cfg.algo == "vanilla_pg":
            idx = np.arange(n_total)
            batch = _batch_for(prep, idx, policy_spec)
            tape = ag.policy_forward_batch(policy_params, policy_spec, batch)
            weights = (prep.deltas[:, None] * prep.active).ravel() / n_total
            gnn_g, head_g = ag.policy_backward_batch(
                policy_params, policy_spec, tape,
                prep.actions.reshape(-1, 2), weights)
            # plain ascent with step delta_alpha, exactly the printed update
            policy_params = ag.PolicyParams(
                gnn=replace_values(policy_params.gnn,
                                   policy_params.gnn.values
                                   + cfg.delta_alpha * gnn_g.values),
                head=replace_values(policy_params.head,
                                    policy_params.head.values
                                    + cfg.delta_alpha * head_g.values))
            # semi-gradient TD(0) critic step
            vals, vtape = ag.value_batch(value_params, value_spec, prep.vfeats)
            value_params = ag.ValueParams(replace_values(
                value_params.mlp,
                value_params.mlp.values + cfg.critic_lr * ag.value_backward(
                    value_params, value_spec, vtape,
                    prep.deltas / n_total).values))
            stats["policy_loss"] = float(-(prep.deltas ** 2).mean())
            stats["value_loss"] = float((prep.deltas ** 2).mean())
            continue

        for _ in range(cfg.ppo.epochs):
            perm = rng.permutation(n_total)
            for lo in range(0, n_total, cfg.ppo.minibatch):
                idx = perm[lo:lo + cfg.ppo.minibatch]
                batch = _batch_for(prep, idx, policy_spec)
                tape = ag.policy_forward_batch(policy_params, policy_spec,
                                               batch)
                acts = prep.actions[idx].reshape(-1, 2)
                new_logp = ag.policy_logprob_batch(tape, acts,
                                                   policy_spec.v_max)
                old = prep.old_logp[idx].ravel()
                a = np.repeat(adv[idx], prep.actions.shape[1])
                act_mask = prep.active[idx].ravel().astype(np.float64)
                ratio = np.exp(np.clip(new_logp - old, -30.0, 30.0))
                clipped = ((ratio > 1.0 + cfg.ppo.clip_eps) & (a > 0)) | \
                          ((ratio < 1.0 - cfg.ppo.clip_eps) & (a < 0))
                n_act = max(act_mask.sum(), 1.0)
                # d surrogate / d logpi; ascent direction
                w = a * ratio * (~clipped) * act_mask / n_act
                gnn_g, head_g = ag.policy_backward_batch(
                    policy_params, policy_spec, tape, acts, w)
                surr = np.minimum(
                    ratio * a,
                    np.clip(ratio, 1.0 - cfg.ppo.clip_eps,
                            1.0 + cfg.ppo.clip_eps) * a)
                stats["policy_loss"] = float(-(surr * act_mask).sum() / n_act)
                neg_gnn = replace_values(gnn_g, -gnn_g.values)
                neg_head = replace_values(head_g, -head_g.values)
                new_gnn, opt.gnn = adam_step(policy_params.gnn, neg_gnn,
                                             opt.gnn, actor_hyper)
                new_head, opt.head = adam_step(policy_params.head, neg_head,
                                               opt.head, actor_hyper)
                policy_params = ag.PolicyParams(new_gnn, new_head)

                vals, vtape = ag.value_batch(value_params, value_spec,
                                             prep.vfeats[idx])
                err = vals - prep.returns[idx]
                stats["value_loss"] = float((err ** 2).mean())
                vgrad = ag.value_backward(value_params, value_spec, vtape,
                                          2.0 * err / len(idx))
                new_v, opt.value = adam_step(value_params.mlp, vgrad,
                                             opt.value, critic_hyper)
                value_params = ag.ValueParams(new_v)
    return policy_params, value_params, opt, stats


# ---------------------------------------------------------------------------
# Environment gradient (likelihood-ratio estimator)
# ---------------------------------------------------------------------------

@dataclass
class EmaBaseline:
    decay: float
    value: float = 0.0
    initialized: bool = False

    def current(self):
        return self.value if self.initialized else 0.0

    def update(self, x):
        if self.initialized:
            self.value = self.decay * self.value + (1.0 - self.decay) * x
        else:
            self.value = x
            self.initialized = True


def env_gradient(gen_params, gen_spec, starts, goals, return_fn, cfg, rng,
                 baseline=None):
    """Monte-Carlo estimate of grad of E[return] w.r.t. generator params.

    grad = (1/T) sum_tau (R_tau - b) * grad log pi_o(layout_tau | S, D)
    with b an EMA baseline over past mean returns (0 when disabled or
    uninitialized, which recovers the raw estimator). return_fn(layout,
    rng) evaluates one rollout's discounted return in that layout.

    The layout distribution is fixed across the T draws (S, D and the
    parameters do not change), and the network backward is linear in its
    upstream, so the weighted per-sample score upstreams are averaged
    first and sent through a single backward pass.

    Returns (flat gradient ParamBlock, mean return).
    """
    if cfg.n_env_rollouts <= 0:
        raise ConfigurationError("n_env_rollouts must be >= 1")
    b = baseline.current() if (baseline is not None and cfg.baseline_on) else 0.0

    dist, _ = eg.gen_dist(gen_params, gen_spec, starts, goals)
    streams = rng.spawn(cfg.n_env_rollouts)

    def one(child):
        layout, _ = eg.layout_sample_logprob(dist, gen_spec, child)
        ret = return_fn(layout, child)
        return ret, eg.gen_score_upstream(dist, gen_spec, layout)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, streams))
    else:
        results = [one(child) for child in streams]

    returns = []
    acc = None
    for ret, upstreams in results:      # fixed order: bit-reproducible
        returns.append(ret)
        weighted = [(ret - b) * u for u in upstreams]
        if acc is None:
            acc = weighted
        else:
            acc = [a + w for a, w in zip(acc, weighted)]
    mean_ret = float(np.mean(returns))
    mean_upstreams = [a / cfg.n_env_rollouts for a in acc]
    grad = eg.gen_grad_from_upstream(gen_params, gen_spec, starts, goals,
                                     mean_upstreams)
    if baseline is not None:
        baseline.update(mean_ret)
    return grad, mean_ret


def env_update(gen_params, gen_spec, starts, goals, return_fn, cfg, rng,
               baseline=None):
    """rho_o gradient-ascent steps, each with a fresh gradient estimate.

    Returns (gen_params, mean return of the first estimate or None, norm
    of the first raw gradient estimate).
    """
    first_ret = None
    grad_norm = 0.0
    for step_idx in range(cfg.rho_o):
        grad, mean_ret = env_gradient(gen_params, gen_spec, starts, goals,
                                      return_fn, cfg, rng, baseline)
        if first_ret is None:
            first_ret = mean_ret
            grad_norm = float(np.linalg.norm(grad.values))
        step = grad.values
        if cfg.env_grad_clip > 0.0:
            norm = float(np.linalg.norm(step))
            if norm > cfg.env_grad_clip:
                step = step * (cfg.env_grad_clip / norm)
        gen_params = gen_params.apply_flat_delta(cfg.delta_beta * step)
    return gen_params, first_ret, grad_norm


def measure_return(gen_params, gen_spec, starts, goals, return_fn, cfg, rng):
    """Mean discounted return over n_env_rollouts sampled layouts."""
    streams = rng.spawn(max(cfg.n_env_rollouts, 1))
    rets = []
    for child in streams:
        dist, _ = eg.gen_dist(gen_params, gen_spec, starts, goals)
        layout, _ = eg.layout_sample_logprob(dist, gen_spec, child)
        rets.append(return_fn(layout, child))
    return float(np.mean(rets))


# ---------------------------------------------------------------------------
# Outer loop (coordinated optimization)
# ---------------------------------------------------------------------------

def coordinate(scenario, policy_params, policy_spec, value_params, value_spec,
               gen_params, gen_spec, cfg, checkpoint_cb=None):
    """Alternate policy updates and generator ascent for outer_iters rounds.

    Within each iteration all policy updates run first (against one layout
    sampled from the current generator), then the generator is updated with
    the policy frozen. A NumericError inside an iteration rolls the
    iteration back to the last good snapshot and continues.
    """
    record = TrainRecord()
    baseline = EmaBaseline(cfg.baseline_decay)
    opt = OptState.fresh(policy_params, value_params)
    root = np.random.SeedSequence(cfg.seed)
    for k in range(cfg.outer_iters):
        t0 = time.perf_counter()
        seq = np.random.SeedSequence(entropy=root.entropy, spawn_key=(k,))
        rng_layout, rng_ep, rng_ppo, rng_env = [
            np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(4)]
        snapshot = (policy_params.copy(), value_params.copy(),
                    gen_params.copy(), baseline.value, baseline.initialized)
        try:
            # phase (i): one layout per iteration, then the policy updates;
            # hand_designed mode pins the file's regular layout instead
            if cfg.layout_mode == "hand_designed":
                layout = hand_designed_layout(scenario)
            else:
                dist, _ = eg.gen_dist(gen_params, gen_spec, scenario.starts,
                                      scenario.goals)
                layout, _ = eg.layout_sample_logprob(dist, gen_spec,
                                                     rng_layout)
            sampler = ag.make_policy_sampler(policy_params, policy_spec,
                                             scenario)
            logs = [rollout(scenario, layout, sampler, r)
                    for r in rng_ep.spawn(cfg.episodes_per_update)]
            policy_params, value_params, opt, stats = policy_update(
                policy_params, policy_spec, value_params, value_spec, logs,
                cfg, scenario, rng_ppo, opt)

            # phase (ii): generator ascent with the policy frozen
            frozen = ag.make_policy_sampler(policy_params, policy_spec,
                                            scenario)

            def return_fn(layout_tau, rng_tau):
                ep = rollout(scenario, layout_tau, frozen, rng_tau)
                return ep.discounted_return(cfg.gamma)

            env_grad_norm = 0.0
            if cfg.rho_o > 0:
                gen_params, r_a, env_grad_norm = env_update(
                    gen_params, gen_spec, scenario.starts, scenario.goals,
                    return_fn, cfg, rng_env, baseline)
            elif cfg.layout_mode == "hand_designed":
                rets = [return_fn(layout, r)
                        for r in rng_env.spawn(max(cfg.n_env_rollouts, 1))]
                r_a = float(np.mean(rets))
            else:
                r_a = measure_return(gen_params, gen_spec, scenario.starts,
                                     scenario.goals, return_fn, cfg, rng_env)
            record.append(k=k, R_a=r_a, policy_loss=stats["policy_loss"],
                          value_loss=stats["value_loss"],
                          env_grad_norm=env_grad_norm,
                          batch_return=float(np.mean(
                              [ep.discounted_return(cfg.gamma)
                               for ep in logs])),
                          wallclock=time.perf_counter() - t0)
        except NumericError as err:
            policy_params, value_params, gen_params = (
                snapshot[0], snapshot[1], snapshot[2])
            baseline.value, baseline.initialized = snapshot[3], snapshot[4]
            log.warning("iteration %d failed (%s); rolled back", k, err)
            record.append(k=k, failed=True, error=str(err),
                          wallclock=time.perf_counter() - t0)
        if checkpoint_cb and cfg.checkpoint_every and \
                (k + 1) % cfg.checkpoint_every == 0:
            checkpoint_cb(k, policy_params, value_params, gen_params)
    if checkpoint_cb:
        checkpoint_cb(cfg.outer_iters - 1, policy_params, value_params,
                      gen_params)
    return record, policy_params, value_params, gen_params
