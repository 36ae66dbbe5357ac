"""Outer training loop: exploration, PSR initialization, then alternating
collection and updates for a fixed number of iterations."""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import gradcore
from .baselines import FMAgent, RPSPAgent, parse_agent
from .checkpoint import save_checkpoint
from .envs import collect_batch, collect_blind, make_env
from .errors import RPSPError
from .features import fit_pipeline
from .init2sr import PSRConfig, initialize_psr, random_psr
from .optim import Batch, OptimizerState, alternating_update, vrpg_update
from .policy import init_policy, standardizer

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "env_steps", "avg_return", "pred_loss", "mean_kl",
                  "grad_norm_l1", "grad_norm_l2", "cap_events", "wall_ms")


class TrainingError(RPSPError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message if checkpoint is None else f"{message} (checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    psr: object
    policy: object
    metrics: list = field(default_factory=list)
    state: object = None
    init_mean_length: float = 0.0


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    explore, policy, collect = ss.spawn(3)
    return np.random.default_rng(explore), int(policy.generate_state(1)[0]), np.random.default_rng(collect)


def psr_config(cfg, seed):
    return PSRConfig(k=cfg.k, d=cfg.d, d_future=cfg.d_future, d_immediate=cfg.d_immediate, lam=cfg.kbr_lambda, seed=seed)


def build_agent(cfg, seed, env_fn, rng_explore, policy_seed):
    """Exploration plus initialization; returns the untrained agent."""
    spec = env_fn(0).spec
    kind = parse_agent(cfg.agent)
    if kind["kind"] == "fm":
        policy = init_policy(kind["window"] * spec.obs_dim, spec.act_dim, seed=policy_seed)
        return FMAgent(policy, kind["window"], spec.obs_dim)
    explore = collect_blind(env_fn, cfg.m_init, rng_explore)
    pcfg = psr_config(cfg, seed)
    if cfg.psr_init == "2sr":
        psr = initialize_psr(explore, pcfg, action_low=spec.action_low, action_high=spec.action_high)
    else:
        pipeline = fit_pipeline(explore, k=pcfg.k, d=pcfg.d, d_future=pcfg.d_future, d_immediate=pcfg.d_immediate,
                                action_low=spec.action_low, action_high=spec.action_high, seed=seed)
        psr = random_psr(pipeline, pcfg, seed=seed)
    policy = init_policy(psr.d_q + kind["window"] * spec.obs_dim, spec.act_dim, seed=policy_seed)
    agent = RPSPAgent(psr, policy, kind["window"], spec.obs_dim)
    # Filtered states are small and unevenly scaled; standardize them once on the exploration data.
    tape = gradcore.forward(psr, policy, explore, aug=agent.aug(explore))
    agent.policy = policy.standardized(*standardizer(tape.stacked(tape.policy_inputs)))
    if cfg.cap_scale > 0:
        # Beyond the exploration horizon the filter can diverge; keep states near the range it was fit on.
        seen = max(float(np.linalg.norm(s.reshape(len(s), -1), axis=1).max()) for s in tape.trajectory_states())
        agent.psr = psr.replace(cap=cfg.cap_scale * seen)
    return agent


def rpspo_train(cfg, seed, on_metrics=None, checkpoint_dir=None):
    """Train one seed; ``on_metrics(row)`` is called after every iteration."""
    env_fn = lambda s: make_env(cfg.env, seed=s, horizon=cfg.horizon, noise=cfg.noise)
    spec = env_fn(0).spec
    rng_explore, policy_seed, rng_collect = _streams(seed)
    agent = build_agent(cfg, seed, env_fn, rng_explore, policy_seed)
    update = vrpg_update if parse_agent(cfg.agent)["update"] == "vrpg" else alternating_update
    state = OptimizerState(eta=cfg.eta, eta_psr=cfg.eta_psr, gamma=cfg.gamma, beta=cfg.beta, a2=cfg.a2, epsilon=cfg.epsilon)
    result = TrainResult(agent.psr, agent.policy, [], state)
    env_steps = 0
    for it in range(cfg.iters):
        t0 = time.perf_counter()
        try:
            rollouts = collect_batch(env_fn, agent, cfg.batch_size, spec.horizon, rng_collect)
            batch = Batch(rollouts.trajectories, agent.aug(rollouts.trajectories))
            psr, policy, info = update(agent.psr, agent.policy, batch, state)
        except Exception as exc:
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = os.path.join(checkpoint_dir, f"seed{seed}_failed_iter{it}.npz")
                save_checkpoint(ckpt, agent.psr, agent.policy, {"seed": seed, "iteration": it, "error": repr(exc)})
            raise TrainingError(f"iteration {it} failed: {exc}", ckpt) from exc
        env_steps += batch.n_steps
        lengths = [len(t) for t in batch.trajectories]
        if it == 0:
            result.init_mean_length = float(np.mean(lengths))
        row = dict(
            iteration=it, env_steps=env_steps,
            avg_return=float(np.mean([t.total_reward for t in batch.trajectories])),
            pred_loss=info.pred_loss, mean_kl=info.mean_kl,
            grad_norm_l1=info.grad_norm_l1, grad_norm_l2=info.grad_norm_l2,
            cap_events=int(rollouts.cap_events + info.cap_events),
            wall_ms=int(round(1000 * (time.perf_counter() - t0))) if cfg.record_wall_time else 0,
            mean_length=float(np.mean(lengths)),
        )
        agent.psr, agent.policy = psr, policy
        result.metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)
        if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"seed{seed}_iter{it + 1}.npz"), agent.psr, agent.policy,
                            {"seed": seed, "iteration": it + 1})
    result.psr, result.policy = agent.psr, agent.policy
    return result
