"""Finite-difference checks for every hand-written backward pass.

Each check returns the largest relative error between the analytic gradient
and central differences. ``run_suite`` collects them all.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .algos import AttentionCritic, MaacLearner, MaddpgLearner, TrainConfig
from .nn import (
    MlpNet,
    ce_loss,
    grad_check,
    kd_loss,
    max_relative_error,
    mse_loss,
    numeric_gradients,
)
from .replay import Batch

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _logit_check(loss, rng, shape=(5, 6)):
    """Gradient of a logit loss w.r.t. the student logits."""
    s = rng.normal(size=shape)
    t = rng.normal(size=shape)
    _, g = loss(s, t)
    num = numeric_gradients(lambda: loss(s, t)[0], [s], STEP)
    return max_relative_error([g], num)


def check_losses(rng) -> list:
    out = [CheckResult("mse_loss", _logit_check(mse_loss, rng))]
    for temp in (1.0, 2.5):
        out.append(CheckResult(f"kd_loss T={temp:g}", _logit_check(lambda s, t: kd_loss(s, t, temp), rng)))
        out.append(CheckResult(f"ce_loss T={temp:g}", _logit_check(lambda s, t: ce_loss(s, t, temp), rng)))
    return out


def check_mlp(rng) -> list:
    out = []
    for act in ("relu", "tanh"):
        net = MlpNet.init([6, 8, 7, 5], rng, act)
        for b in net.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        target = rng.normal(size=(5, 4))
        x = rng.normal(size=(6, 4))
        err = grad_check(net, lambda y: mse_loss(y, target), x, STEP, rng)
        out.append(CheckResult(f"mlp params ({act})", err))
        if act == "tanh":
            # input gradient; tanh has no kinks to dodge
            net.forward(x)
            d_in = net.backward(mse_loss(net.forward(x), target)[1]).d_input
            num = numeric_gradients(lambda: mse_loss(net.forward(x), target)[0], [x], STEP)
            out.append(CheckResult("mlp input (tanh)", max_relative_error([d_in], num)))
    return out


def _batch(obs_dims, rng, size=4) -> Batch:
    obs = [rng.normal(size=(d, size)) for d in obs_dims]
    nxt = [rng.normal(size=(d, size)) for d in obs_dims]
    acts = [rng.normal(size=(5, size)) for _ in obs_dims]
    rewards = rng.normal(size=(len(obs_dims), size))
    return Batch(obs, acts, rewards, nxt, np.zeros(size))


def _actor_path_error(learner, i, batch) -> float:
    """``-mean Q_i`` differentiated through the critic into agent i's actor."""
    actor = learner.actors[i]
    logits = actor.forward(batch.obs[i])
    _, d_logits = learner.actor_q_loss(i, batch, logits)
    analytic = actor.backward(d_logits).arrays()

    def value():
        return learner.actor_q_loss(i, batch)[0]

    return max_relative_error(analytic, numeric_gradients(value, actor.params(), STEP))


def _small_config(**kw) -> TrainConfig:
    return TrainConfig(hidden=(8, 8), embed_dim=6, attend_dim=4, **kw)


def check_maddpg_actor(rng) -> list:
    obs_dims = [4, 3]
    learner = MaddpgLearner(obs_dims, _small_config(), rng)
    batch = _batch(obs_dims, rng)
    return [CheckResult(f"maddpg actor {i} via critic", _actor_path_error(learner, i, batch)) for i in range(2)]


def check_attention(rng) -> list:
    dims = [5, 7, 6]
    critic = AttentionCritic.init(dims, rng, embed_dim=6, attend_dim=4, hidden=8)
    for p in critic.params():
        p += rng.normal(scale=0.05, size=p.shape)
    inputs = [rng.normal(size=(d, 3)) for d in dims]
    # a random linear read-out of all agents' Q values exercises every path
    weights = rng.normal(size=(len(dims), 3))

    def value():
        return float(np.sum(weights * critic.forward(inputs)))

    critic.forward(inputs)
    grads, d_inputs = critic.backward(weights)
    out = [
        CheckResult("attention critic params", max_relative_error(grads, numeric_gradients(value, critic.params(), STEP))),
        CheckResult("attention critic inputs", max_relative_error(d_inputs, numeric_gradients(value, inputs, STEP))),
    ]
    obs_dims = [4, 3, 5]
    learner = MaacLearner(obs_dims, _small_config(), rng)
    batch = _batch(obs_dims, rng)
    out.append(CheckResult("maac actor 1 via attention critic", _actor_path_error(learner, 1, batch)))
    return out


def run_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for check in (check_losses, check_mlp, check_maddpg_actor, check_attention):
        results.extend(check(rng))
    return results


def report(results, elapsed=None) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.error:.3e}  {r.name}" for r in results]
    worst = max(r.error for r in results)
    tail = f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})"
    if elapsed is not None:
        tail += f", {elapsed:.1f}s"
    return "\n".join(lines + [tail])


def main(seed: int = 0) -> bool:
    t0 = time.perf_counter()
    results = run_suite(seed)
    print(report(results, time.perf_counter() - t0))
    return all(r.passed for r in results)
