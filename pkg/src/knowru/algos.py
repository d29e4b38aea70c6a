"""Deterministic-policy actor-critic trainers for particle worlds.

``MaddpgLearner`` gives every agent its own centralized critic over all
observations and action logits. ``MaacLearner`` shares one attention critic
in which each agent attends over the embeddings of the others.

Both expose the same actor update, which optionally blends a knowledge
reuse term into the critic-driven actor loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import env as world
from .nn import (
    AdamState,
    DimensionError,
    MlpNet,
    adam_update,
    as_column,
    clip_by_global_norm,
)
from .replay import Batch, ReplayBuffer, Transition
from .reuse import blend

CRITIC_LOSSES = ("td", "reward_l1")


@dataclass
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.01
    batch_size: int = 1024
    minibatch_size: int = 1024
    update_every: int = 4
    updates_per_cadence: int = 1
    noise_scale: float = 0.3
    noise_decay: float = 0.999
    noise_floor: float = 0.05
    episodes: int = 5000
    steps_per_episode: int = 25
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden: tuple = (64, 64, 64)
    grad_clip: float = 0.5
    critic_loss: str = "td"
    buffer_capacity: int = 1_000_000
    logit_l2: float = 1e-3
    # time-limit ends are truncations, not terminal states, unless set
    timeout_is_terminal: bool = False
    embed_dim: int = 32
    attend_dim: int = 32

    def validate(self) -> "TrainConfig":
        checks = [
            (0.0 < self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (0.0 < self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (1 <= self.minibatch_size, "minibatch_size must be >= 1"),
            (self.update_every >= 1, "update_every must be >= 1"),
            (self.updates_per_cadence >= 1, "updates_per_cadence must be >= 1"),
            (self.noise_scale >= 0 and self.noise_floor >= 0, "noise scales must be >= 0"),
            (0.0 < self.noise_decay <= 1.0, "noise_decay must lie in (0, 1]"),
            (self.episodes >= 1, "episodes must be >= 1"),
            (self.steps_per_episode >= 1, "steps_per_episode must be >= 1"),
            (self.actor_lr > 0 and self.critic_lr > 0, "learning rates must be positive"),
            (len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden), "hidden sizes must be >= 1"),
            (self.grad_clip > 0, "grad_clip must be positive"),
            (self.critic_loss in CRITIC_LOSSES, f"critic_loss must be one of {CRITIC_LOSSES}"),
            (self.buffer_capacity >= self.batch_size, "buffer_capacity must be >= batch_size"),
            (self.logit_l2 >= 0, "logit_l2 must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def select_action(actor: MlpNet, observation, noise_scale, rng) -> np.ndarray:
    """Actor logits plus Gaussian noise; ``noise_scale == 0`` is greedy."""
    obs = np.asarray(observation, dtype=np.float64)
    if obs.shape != (actor.input_dim,):
        raise ValueError(f"observation shape {obs.shape}, actor expects ({actor.input_dim},)")
    logits = actor.forward(obs[:, None])[:, 0]
    if noise_scale > 0:
        logits = logits + rng.normal(0.0, noise_scale, size=logits.shape)
    return logits


def soft_update(live, target, tau: float) -> None:
    """``target <- (1 - tau) * target + tau * live`` in place."""
    lp, tp = live.params(), target.params()
    if len(lp) != len(tp) or any(a.shape != b.shape for a, b in zip(lp, tp)):
        raise DimensionError("live and target networks are not shape congruent")
    for a, b in zip(lp, tp):
        b *= 1.0 - tau
        b += tau * a


def _leaky(u, slope=0.01):
    return np.where(u > 0, u, slope * u)


def _leaky_grad(u, slope=0.01):
    return np.where(u > 0, 1.0, slope)


def _softmax_rows(s):
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=0, keepdims=True)


class AttentionCritic:
    """Single-head attention critic shared by all agents.

    ``Q_i = f_i([e_i ; x_i])`` with ``e_j = g_j(o_j, a_j)`` and
    ``x_i = sum_{j != i} alpha_j * leaky(V e_j)``.
    """

    def __init__(self, embed_nets, head_nets, query, key, value):
        self.embed_nets = embed_nets
        self.head_nets = head_nets
        self.query = query
        self.key = key
        self.value = value
        self._cache = None

    @classmethod
    def init(cls, input_dims, rng, embed_dim=32, attend_dim=32, hidden=64):
        embed = [MlpNet.init([d, hidden, embed_dim], rng) for d in input_dims]
        head = [MlpNet.init([embed_dim + attend_dim, hidden, 1], rng) for _ in input_dims]
        lim = np.sqrt(6.0 / (embed_dim + attend_dim))
        mats = [rng.uniform(-lim, lim, size=(attend_dim, embed_dim)) for _ in range(3)]
        return cls(embed, head, *mats)

    @property
    def n_agents(self) -> int:
        return len(self.embed_nets)

    @property
    def input_dims(self) -> list:
        return [g.input_dim for g in self.embed_nets]

    def params(self) -> list:
        out = []
        for g in self.embed_nets:
            out.extend(g.params())
        for f in self.head_nets:
            out.extend(f.params())
        return out + [self.query, self.key, self.value]

    def copy(self) -> "AttentionCritic":
        return AttentionCritic(
            [g.copy() for g in self.embed_nets],
            [f.copy() for f in self.head_nets],
            self.query.copy(),
            self.key.copy(),
            self.value.copy(),
        )

    def forward(self, inputs) -> np.ndarray:
        """``inputs[j]`` stacks agent j's observation and logits, shape ``(d_j, B)``."""
        n = self.n_agents
        if n < 2:
            raise ValueError("attention needs at least two agents")
        if len(inputs) != n:
            raise DimensionError(f"expected inputs for {n} agents")
        emb = [g.forward(z) for g, z in zip(self.embed_nets, inputs)]
        keys = [self.key @ e for e in emb]
        queries = [self.query @ e for e in emb]
        pre_v = [self.value @ e for e in emb]
        vals = [_leaky(u) for u in pre_v]
        q_out = np.zeros((n, emb[0].shape[1]))
        per_agent = []
        for i in range(n):
            x, weights, others = _attend(queries[i], keys, vals, i)
            q_out[i] = self.head_nets[i].forward(np.vstack([emb[i], x]))[0]
            per_agent.append((weights, others))
        self._cache = (emb, keys, queries, pre_v, vals, per_agent)
        return q_out

    def backward(self, d_q):
        """Gradients in ``params()`` order and per-agent input gradients."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        emb, keys, queries, pre_v, vals, per_agent = self._cache
        n = self.n_agents
        d_q = np.asarray(d_q, dtype=np.float64)
        embed_dim = emb[0].shape[0]
        scale = 1.0 / np.sqrt(self.key.shape[0])
        d_emb = [np.zeros_like(e) for e in emb]
        d_query = np.zeros_like(self.query)
        d_key = np.zeros_like(self.key)
        d_value = np.zeros_like(self.value)
        head_grads = []
        for i in range(n):
            f = self.head_nets[i]
            if not np.any(d_q[i]):
                head_grads.append([np.zeros_like(p) for p in f.params()])
                continue
            gf = f.backward(d_q[i][None, :])
            head_grads.append(gf.arrays())
            d_emb[i] += gf.d_input[:embed_dim]
            d_x = gf.d_input[embed_dim:]
            weights, others = per_agent[i]
            d_w = np.stack([np.sum(d_x * vals[j], axis=0) for j in others])
            d_s = weights * (d_w - np.sum(weights * d_w, axis=0, keepdims=True)) * scale
            d_qi = np.zeros_like(queries[i])
            for k, j in enumerate(others):
                d_u = weights[k] * d_x * _leaky_grad(pre_v[j])
                d_value += d_u @ emb[j].T
                d_emb[j] += self.value.T @ d_u
                d_qi += d_s[k] * keys[j]
                d_kj = d_s[k] * queries[i]
                d_key += d_kj @ emb[j].T
                d_emb[j] += self.key.T @ d_kj
            d_query += d_qi @ emb[i].T
            d_emb[i] += self.query.T @ d_qi
        grads, d_inputs = [], []
        for g, de in zip(self.embed_nets, d_emb):
            gg = g.backward(de)
            grads.extend(gg.arrays())
            d_inputs.append(gg.d_input)
        for hg in head_grads:
            grads.extend(hg)
        grads += [d_query, d_key, d_value]
        return grads, d_inputs


def _attend(query_i, keys, vals, i):
    others = [j for j in range(len(keys)) if j != i]
    scale = 1.0 / np.sqrt(query_i.shape[0])
    scores = np.stack([np.sum(query_i * keys[j], axis=0) for j in others]) * scale
    weights = _softmax_rows(scores)
    x = sum(weights[k] * vals[j] for k, j in enumerate(others))
    return x, weights, others


def attention_context(critic: AttentionCritic, embeddings, agent_index: int):
    """Attended context ``x_i`` and the weights over the other agents."""
    if len(embeddings) < 2:
        raise ValueError("attention context needs at least two agents")
    embeddings = [as_column(e) for e in embeddings]
    keys = [critic.key @ e for e in embeddings]
    vals = [_leaky(critic.value @ e) for e in embeddings]
    x, weights, _ = _attend(critic.query @ embeddings[agent_index], keys, vals, agent_index)
    return x, weights


def attention_q(critic: AttentionCritic, observations, actions, agent_index: int) -> np.ndarray:
    inputs = [np.vstack([as_column(o), as_column(a)]) for o, a in zip(observations, actions)]
    for z, d in zip(inputs, critic.input_dims):
        if z.shape[0] != d:
            raise DimensionError(f"critic input has {z.shape[0]} rows, expected {d}")
    return critic.forward(inputs)[agent_index]


# ----------------------------------------------------------------- learners


class Learner:
    """Shared actor machinery; subclasses supply the critic."""

    def __init__(self, obs_dims, config: TrainConfig, rng):
        self.obs_dims = list(obs_dims)
        self.config = config
        sizes = lambda d: [d, *config.hidden, world.N_ACTIONS]  # noqa: E731
        self.actors = [MlpNet.init(sizes(d), rng) for d in self.obs_dims]
        self.target_actors = [a.copy() for a in self.actors]
        self.actor_opts = [AdamState.for_params(a.params(), config.actor_lr) for a in self.actors]

    @property
    def n_agents(self) -> int:
        return len(self.actors)

    def act(self, observations, noise_scale, rng) -> np.ndarray:
        return np.stack([select_action(a, o, noise_scale, rng) for a, o in zip(self.actors, observations)])

    def _target_logits(self, batch: Batch) -> list:
        return [t.forward(o) for t, o in zip(self.target_actors, batch.next_obs)]

    def _targets(self, rewards, done, q_next):
        if self.config.critic_loss == "reward_l1":
            return rewards
        return rewards + self.config.gamma * (1.0 - done) * q_next

    def _value_loss(self, q, y):
        """Mean loss and its gradient w.r.t. ``q`` over the batch."""
        b = q.shape[-1]
        if self.config.critic_loss == "reward_l1":
            return float(np.mean(np.abs(q - y))), np.sign(q - y) / b
        diff = q - y
        return float(np.mean(diff * diff)), 2.0 * diff / b

    def q_values_and_grad(self, i, batch: Batch, logits_i):
        raise NotImplementedError

    def actor_q_loss(self, i: int, batch: Batch, logits_i=None):
        """``L_Q = -mean Q_i`` with agent i's action slot set to its actor output.

        Returns the loss and its gradient w.r.t. agent i's logits.
        """
        if logits_i is None:
            logits_i = self.actors[i].forward(batch.obs[i])
        q, d_logits = self.q_values_and_grad(i, batch, logits_i)
        return -float(np.mean(q)), d_logits

    def actor_update(self, i: int, batch: Batch, transfer=None) -> dict:
        actor = self.actors[i]
        logits = actor.forward(batch.obs[i])
        l_q, g_q = self.actor_q_loss(i, batch, logits)
        stats = {"l_q": l_q, "l_reuse": 0.0, "l_reuse_scaled": 0.0}
        alpha = transfer.alpha if transfer is not None else 0.0
        term = None
        if alpha > 0.0:
            term = transfer.reuse_term(i, actor, batch.obs[i], logits, l_q)
        if term is None:
            l_all, grad = l_q, g_q
        else:
            l_all, grad = blend(alpha, term.scaled_value, term.scaled_grad, l_q, g_q)
            stats["l_reuse"] = term.raw_value
            stats["l_reuse_scaled"] = term.scaled_value
        if self.config.logit_l2 > 0:
            grad = grad + (2.0 * self.config.logit_l2 / logits.size) * logits
        stats["l_all"] = l_all
        grads, _ = clip_by_global_norm(actor.backward(grad).arrays(), self.config.grad_clip)
        adam_update(actor.params(), grads, self.actor_opts[i])
        return stats

    def soft_update_targets(self) -> None:
        for a, t in zip(self.actors, self.target_actors):
            soft_update(a, t, self.config.tau)


class MaddpgLearner(Learner):
    def __init__(self, obs_dims, config: TrainConfig, rng):
        super().__init__(obs_dims, config, rng)
        joint = sum(self.obs_dims) + world.N_ACTIONS * len(self.obs_dims)
        self.critics = [MlpNet.init([joint, *config.hidden, 1], rng) for _ in self.obs_dims]
        self.target_critics = [c.copy() for c in self.critics]
        self.critic_opts = [AdamState.for_params(c.params(), config.critic_lr) for c in self.critics]

    @staticmethod
    def joint_input(observations, actions) -> np.ndarray:
        return np.vstack([as_column(o) for o in observations] + [as_column(a) for a in actions])

    def critic_update(self, batch: Batch) -> float:
        x = self.joint_input(batch.obs, batch.actions)
        x_next = self.joint_input(batch.next_obs, self._target_logits(batch))
        losses = []
        for i, critic in enumerate(self.critics):
            q_next = self.target_critics[i].forward(x_next)[0]
            y = self._targets(batch.rewards[i], batch.done, q_next)
            q = critic.forward(x)[0]
            loss, d_q = self._value_loss(q, y)
            grads, _ = clip_by_global_norm(critic.backward(d_q[None, :]).arrays(), self.config.grad_clip)
            adam_update(critic.params(), grads, self.critic_opts[i])
            losses.append(loss)
        return float(np.mean(losses))

    def q_values_and_grad(self, i, batch: Batch, logits_i):
        actions = list(batch.actions)
        actions[i] = logits_i
        x = self.joint_input(batch.obs, actions)
        critic = self.critics[i]
        q = critic.forward(x)[0]
        b = q.shape[0]
        d_x = critic.backward(np.full((1, b), -1.0 / b)).d_input
        start = sum(self.obs_dims) + world.N_ACTIONS * i
        return q, d_x[start : start + world.N_ACTIONS]

    def soft_update_targets(self) -> None:
        super().soft_update_targets()
        for c, t in zip(self.critics, self.target_critics):
            soft_update(c, t, self.config.tau)


class MaacLearner(Learner):
    def __init__(self, obs_dims, config: TrainConfig, rng):
        super().__init__(obs_dims, config, rng)
        dims = [d + world.N_ACTIONS for d in self.obs_dims]
        self.critic = AttentionCritic.init(dims, rng, config.embed_dim, config.attend_dim, config.hidden[0])
        self.target_critic = self.critic.copy()
        self.critic_opt = AdamState.for_params(self.critic.params(), config.critic_lr)

    @staticmethod
    def inputs(observations, actions) -> list:
        return [np.vstack([as_column(o), as_column(a)]) for o, a in zip(observations, actions)]

    def critic_update(self, batch: Batch) -> float:
        q_next = self.target_critic.forward(self.inputs(batch.next_obs, self._target_logits(batch)))
        y = self._targets(batch.rewards, batch.done[None, :], q_next)
        q = self.critic.forward(self.inputs(batch.obs, batch.actions))
        loss, d_q = self._value_loss(q, y)
        grads, _ = self.critic.backward(d_q)
        grads, _ = clip_by_global_norm(grads, self.config.grad_clip)
        adam_update(self.critic.params(), grads, self.critic_opt)
        # the gradient is of the sum over agents, the reported loss their mean
        return loss

    def q_values_and_grad(self, i, batch: Batch, logits_i):
        actions = list(batch.actions)
        actions[i] = logits_i
        q = self.critic.forward(self.inputs(batch.obs, actions))
        b = q.shape[1]
        d_q = np.zeros_like(q)
        d_q[i] = -1.0 / b
        _, d_inputs = self.critic.backward(d_q)
        return q[i], d_inputs[i][self.obs_dims[i] :]

    def soft_update_targets(self) -> None:
        super().soft_update_targets()
        soft_update(self.critic, self.target_critic, self.config.tau)


LEARNERS = {"maddpg": MaddpgLearner, "maac_lite": MaacLearner}


def critic_update(learner: Learner, batch: Batch, config: TrainConfig | None = None) -> float:
    return learner.critic_update(batch)


def actor_q_loss(learner: Learner, agent_index: int, batch: Batch):
    return learner.actor_q_loss(agent_index, batch)


# ------------------------------------------------------------------ episodes


@dataclass
class EpisodeStats:
    episode: int
    rewards: np.ndarray  # mean per-step reward per agent
    l_q: float = 0.0
    l_reuse: float = 0.0
    l_reuse_scaled: float = 0.0
    critic_loss: float = 0.0
    alpha: float = 0.0
    noise: float = 0.0
    updated: bool = False

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


def run_updates(learner: Learner, buffer: ReplayBuffer, rng, transfer=None):
    """One cadence of learning: sample, then walk the sample in minibatches."""
    cfg = learner.config
    actor_stats, critic_losses = [], []
    for _ in range(cfg.updates_per_cadence):
        batch = buffer.sample_batch(cfg.batch_size, rng)
        for start in range(0, batch.size, cfg.minibatch_size):
            mb = batch.slice(start, start + cfg.minibatch_size)
            critic_losses.append(learner.critic_update(mb))
            for i in range(learner.n_agents):
                actor_stats.append(learner.actor_update(i, mb, transfer))
            learner.soft_update_targets()
    return actor_stats, critic_losses


def train_episode(spec, learner: Learner, buffer: ReplayBuffer, episode: int, env_seed: int,
                  noise_scale: float, action_rng, sample_rng, transfer=None) -> EpisodeStats:
    """Roll out one noisy episode, store it, and learn on the configured cadence.

    ``episode`` is zero-based; updates happen after episodes
    ``update_every - 1, 2 * update_every - 1, ...`` once the buffer holds a
    full batch.
    """
    cfg = learner.config
    state = world.reset(spec, env_seed)
    obs = world.observe_all(state)
    total = np.zeros(learner.n_agents)
    steps = cfg.steps_per_episode
    for _ in range(steps):
        actions = learner.act(obs, noise_scale, action_rng)
        state, rewards, done = world.step(state, actions)
        next_obs = world.observe_all(state)
        terminal = done and cfg.timeout_is_terminal
        buffer.push(Transition(obs, list(actions), rewards, next_obs, terminal))
        total += rewards
        obs = next_obs
    stats = EpisodeStats(episode, total / steps, noise=noise_scale)
    stats.alpha = transfer.alpha if transfer is not None else 0.0
    if (episode + 1) % cfg.update_every == 0 and len(buffer) >= cfg.batch_size:
        actor_stats, critic_losses = run_updates(learner, buffer, sample_rng, transfer)
        stats.updated = True
        stats.critic_loss = float(np.mean(critic_losses))
        stats.l_q = float(np.mean([s["l_q"] for s in actor_stats]))
        stats.l_reuse = float(np.mean([s["l_reuse"] for s in actor_stats]))
        stats.l_reuse_scaled = float(np.mean([s["l_reuse_scaled"] for s in actor_stats]))
    return stats


def evaluate_actors(spec, actors, episodes: int, seed: int = 10_000, steps=None) -> float:
    """Mean per-step reward (averaged over agents) of noise-free rollouts."""
    steps = steps or spec.episode_length
    totals = []
    for k in range(episodes):
        state = world.reset(spec, seed + k)
        obs = world.observe_all(state)
        acc = 0.0
        for _ in range(steps):
            actions = np.stack([select_action(a, o, 0.0, None) for a, o in zip(actors, obs)])
            state, rewards, _ = world.step(state, actions)
            obs = world.observe_all(state)
            acc += float(np.mean(rewards))
        totals.append(acc / steps)
    return float(np.mean(totals))
