"""Deterministic 2-D particle worlds: spread, adversary and treasure collection.

Every agent acts with 5 logits (no-op, +x, -x, +y, -y). The softmax of the
logits becomes a net force, so the environment is smooth in the logits.

Observation layouts are made of groups of equally sized entity blocks. The
first two entries of every non-self block are the entity position relative
to the observer, and entities inside a group are ordered nearest first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DT = 0.1
DAMPING = 0.25
FORCE_GAIN = 5.0
MAX_SPEED = 1.0
AGENT_RADIUS = 0.1
LANDMARK_RADIUS = 0.05

COLLECT_BONUS = 5.0
DEPOSIT_BONUS = 10.0

N_ACTIONS = 5
KINDS = ("spread", "adversary", "treasure")
DEFAULT_EPISODE_LENGTH = {"spread": 25, "adversary": 25, "treasure": 100}


class ConfigurationError(ValueError):
    pass


class ScenarioStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n_agents: int = 0
    n_adversaries: int = 0
    n_landmarks: int = 0
    n_collectors: int = 0
    n_banks: int = 0
    episode_length: int | None = None
    world_half_width: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.episode_length is None and self.kind in DEFAULT_EPISODE_LENGTH:
            object.__setattr__(self, "episode_length", DEFAULT_EPISODE_LENGTH[self.kind])
        if self.kind == "treasure" and self.n_agents == 0:
            object.__setattr__(self, "n_agents", self.n_collectors + self.n_banks)

    def validate(self) -> "ScenarioSpec":
        if self.kind not in KINDS:
            raise ConfigurationError(f"scenario kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "spread":
            if self.n_agents < 1 or self.n_agents != self.n_landmarks:
                raise ConfigurationError("spread needs n_agents == n_landmarks >= 1")
        elif self.kind == "adversary":
            if self.n_agents < 1 or self.n_agents != self.n_landmarks:
                raise ConfigurationError("adversary needs n_agents == n_landmarks >= 1")
            if self.n_adversaries < 1:
                raise ConfigurationError("adversary needs n_adversaries >= 1")
        else:
            if not self.n_collectors >= self.n_banks >= 1:
                raise ConfigurationError("treasure needs n_collectors >= n_banks >= 1")
            if self.n_agents != self.n_collectors + self.n_banks:
                raise ConfigurationError("treasure n_agents must equal n_collectors + n_banks")
        if self.episode_length is None or self.episode_length < 1:
            raise ConfigurationError("episode_length must be >= 1")
        if not self.world_half_width > 0:
            raise ConfigurationError("world_half_width must be positive")
        return self

    @property
    def total_agents(self) -> int:
        if self.kind == "adversary":
            return self.n_adversaries + self.n_agents
        return self.n_agents

    @property
    def n_static(self) -> int:
        """Landmarks, or treasures in the treasure scenario."""
        return self.n_collectors if self.kind == "treasure" else self.n_landmarks

    def roles(self) -> list:
        if self.kind == "spread":
            return ["agent"] * self.n_agents
        if self.kind == "adversary":
            return ["adversary"] * self.n_adversaries + ["good"] * self.n_agents
        return ["collector"] * self.n_collectors + ["bank"] * self.n_banks


@dataclass
class WorldState:
    spec: ScenarioSpec
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    landmark_pos: np.ndarray
    seed: int = 0
    t: int = 0
    target: int = -1
    carrier: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    treasure_color: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bank_color: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # treasure events during the most recent step
    picked: int = 0
    deposited: int = 0

    def copy(self) -> "WorldState":
        return replace(
            self,
            agent_pos=self.agent_pos.copy(),
            agent_vel=self.agent_vel.copy(),
            landmark_pos=self.landmark_pos.copy(),
            carrier=self.carrier.copy(),
            treasure_color=self.treasure_color.copy(),
            bank_color=self.bank_color.copy(),
        )


def reset(spec: ScenarioSpec, rng_seed: int) -> WorldState:
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    hw = spec.world_half_width
    n = spec.total_agents
    agent_pos = rng.uniform(-hw, hw, size=(n, 2))
    landmark_pos = rng.uniform(-hw, hw, size=(spec.n_static, 2))
    state = WorldState(spec, agent_pos, np.zeros((n, 2)), landmark_pos, seed=int(rng_seed))
    if spec.kind == "adversary":
        state.target = int(rng.integers(spec.n_landmarks))
    elif spec.kind == "treasure":
        state.carrier = np.full(spec.n_collectors, -1, dtype=np.int64)
        state.treasure_color = np.arange(spec.n_collectors, dtype=np.int64) % spec.n_banks
        state.bank_color = np.arange(spec.n_banks, dtype=np.int64)
    return state


def action_forces(actions) -> np.ndarray:
    logits = np.asarray(actions, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return FORCE_GAIN * np.stack([p[:, 1] - p[:, 2], p[:, 3] - p[:, 4]], axis=1)


def step(state: WorldState, actions):
    """Advance one time step. Returns ``(next_state, rewards, done)``."""
    spec = state.spec
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (spec.total_agents, N_ACTIONS):
        raise ValueError(
            f"expected {spec.total_agents} actions of {N_ACTIONS} logits, got shape {actions.shape}"
        )
    nxt = state.copy()
    vel = nxt.agent_vel * (1.0 - DAMPING) + action_forces(actions) * DT
    speed = np.sqrt(np.sum(vel * vel, axis=1, keepdims=True))
    too_fast = speed > MAX_SPEED
    vel = np.where(too_fast, vel / np.where(too_fast, speed, 1.0) * MAX_SPEED, vel)
    hw = spec.world_half_width
    nxt.agent_vel = vel
    nxt.agent_pos = np.clip(nxt.agent_pos + vel * DT, -hw, hw)
    nxt.t = state.t + 1
    if spec.kind == "treasure":
        _resolve_treasure_events(nxt)
    rewards = REWARDS[spec.kind](nxt)
    return nxt, rewards, nxt.t >= spec.episode_length


def _respawn(state: WorldState, k: int) -> np.ndarray:
    rng = np.random.default_rng([state.seed, state.t, k])
    hw = state.spec.world_half_width
    return rng.uniform(-hw, hw, size=2)


def _resolve_treasure_events(state: WorldState) -> None:
    spec = state.spec
    n_col = spec.n_collectors
    state.picked = 0
    state.deposited = 0
    carried = state.carrier >= 0
    state.landmark_pos[carried] = state.agent_pos[state.carrier[carried]]
    bank_pos = state.agent_pos[n_col:]
    for k in range(len(state.carrier)):
        c = state.carrier[k]
        if c < 0:
            continue
        for b in range(spec.n_banks):
            if state.bank_color[b] != state.treasure_color[k]:
                continue
            if np.linalg.norm(state.agent_pos[c] - bank_pos[b]) < 2 * AGENT_RADIUS:
                state.deposited += 1
                state.carrier[k] = -1
                state.landmark_pos[k] = _respawn(state, k)
                break
    for k in range(len(state.carrier)):
        if state.carrier[k] >= 0:
            continue
        busy = set(int(c) for c in state.carrier if c >= 0)
        for c in range(n_col):
            if c in busy:
                continue
            if np.linalg.norm(state.agent_pos[c] - state.landmark_pos[k]) < AGENT_RADIUS + LANDMARK_RADIUS:
                state.carrier[k] = c
                state.landmark_pos[k] = state.agent_pos[c]
                state.picked += 1
                break


def _pairwise(a, b) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(d * d, axis=2))


def _collision_penalty(pos) -> np.ndarray:
    n = len(pos)
    if n < 2:
        return np.zeros(n)
    d = _pairwise(pos, pos)
    hit = d < 2 * AGENT_RADIUS
    np.fill_diagonal(hit, False)
    return -hit.sum(axis=1).astype(np.float64)


def _require(state, kind):
    if state.spec.kind != kind:
        raise ScenarioStateError(f"{kind} reward called on a {state.spec.kind} world")


def reward_spread(state: WorldState) -> np.ndarray:
    _require(state, "spread")
    d = _pairwise(state.landmark_pos, state.agent_pos)
    shared = -float(d.min(axis=1).sum())
    return shared + _collision_penalty(state.agent_pos)


def reward_adversary(state: WorldState) -> np.ndarray:
    """Adversaries first, then good agents, matching the agent order."""
    _require(state, "adversary")
    n_adv = state.spec.n_adversaries
    goal = state.landmark_pos[state.target]
    d = np.sqrt(np.sum((state.agent_pos - goal) ** 2, axis=1))
    adv_d, good_d = d[:n_adv], d[n_adv:]
    good = -good_d.min() + adv_d.min()
    return np.concatenate([-adv_d, np.full(len(good_d), good)])


def treasure_shaping(state: WorldState) -> float:
    spec = state.spec
    n_col = spec.n_collectors
    collectors = state.agent_pos[:n_col]
    banks = state.agent_pos[n_col:]
    total = 0.0
    free = state.carrier < 0
    if free.any():
        total -= float(_pairwise(state.landmark_pos[free], collectors).min(axis=1).sum())
    for k in np.flatnonzero(~free):
        match = banks[state.bank_color == state.treasure_color[k]]
        pos = state.agent_pos[state.carrier[k]]
        total -= float(np.sqrt(np.sum((match - pos) ** 2, axis=1)).min())
    return total


def reward_treasure(state: WorldState) -> np.ndarray:
    _require(state, "treasure")
    spec = state.spec
    shared = (
        COLLECT_BONUS * state.picked + DEPOSIT_BONUS * state.deposited + treasure_shaping(state)
    )
    rewards = np.full(spec.total_agents, shared)
    rewards[: spec.n_collectors] += _collision_penalty(state.agent_pos[: spec.n_collectors])
    return rewards


REWARDS = {"spread": reward_spread, "adversary": reward_adversary, "treasure": reward_treasure}


# ----------------------------------------------------------- observations


def observation_layout(spec: ScenarioSpec, agent: int) -> list:
    """``[(group, count, block_width), ...]`` for one agent's observation."""
    if not 0 <= agent < spec.total_agents:
        raise ValueError(f"agent index {agent} out of range")
    if spec.kind == "spread":
        return [("self", 1, 4), ("landmarks", spec.n_landmarks, 2), ("agents", spec.n_agents - 1, 2)]
    if spec.kind == "adversary":
        n_adv = spec.n_adversaries
        if agent < n_adv:
            return [
                ("self", 1, 4),
                ("landmarks", spec.n_landmarks, 2),
                ("adversaries", n_adv - 1, 2),
                ("good", spec.n_agents, 2),
            ]
        return [
            ("self", 1, 4),
            ("target", 1, 2),
            ("landmarks", spec.n_landmarks, 2),
            ("adversaries", n_adv, 2),
            ("good", spec.n_agents - 1, 2),
        ]
    nb = spec.n_banks
    is_collector = agent < spec.n_collectors
    return [
        ("self", 1, 5 + nb if is_collector else 4 + nb),
        ("treasures", spec.n_collectors, 3 + nb),
        ("banks", nb if is_collector else nb - 1, 2 + nb),
        ("collectors", spec.n_collectors - 1 if is_collector else spec.n_collectors, 3),
    ]


def observation_dim(spec: ScenarioSpec, agent: int) -> int:
    return sum(count * width for _, count, width in observation_layout(spec, agent))


def _nearest_blocks(rel, extra=None) -> np.ndarray:
    if len(rel) == 0:
        return np.zeros(0)
    order = np.argsort(np.sum(rel * rel, axis=1), kind="stable")
    blocks = rel[order] if extra is None else np.hstack([rel, extra])[order]
    return blocks.reshape(-1)


def observe(state: WorldState, agent: int) -> np.ndarray:
    spec = state.spec
    if not 0 <= agent < spec.total_agents:
        raise ValueError(f"agent index {agent} out of range")
    pos = state.agent_pos[agent]
    own = [state.agent_vel[agent], pos]
    others = np.delete(np.arange(spec.total_agents), agent)
    if spec.kind == "spread":
        parts = own + [
            _nearest_blocks(state.landmark_pos - pos),
            _nearest_blocks(state.agent_pos[others] - pos),
        ]
    elif spec.kind == "adversary":
        n_adv = spec.n_adversaries
        adv = [j for j in others if j < n_adv]
        good = [j for j in others if j >= n_adv]
        parts = list(own)
        if agent >= n_adv:
            parts.append(state.landmark_pos[state.target] - pos)
        parts += [
            _nearest_blocks(state.landmark_pos - pos),
            _nearest_blocks(state.agent_pos[adv] - pos),
            _nearest_blocks(state.agent_pos[good] - pos),
        ]
    else:
        parts = _treasure_observation(state, agent, own, others)
    return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])


def _treasure_observation(state, agent, own, others):
    spec = state.spec
    nb = spec.n_banks
    n_col = spec.n_collectors
    pos = state.agent_pos[agent]
    eye = np.eye(nb)
    parts = list(own)
    if agent < n_col:
        held = np.flatnonzero(state.carrier == agent)
        parts.append([1.0 if len(held) else 0.0])
        parts.append(eye[state.treasure_color[held[0]]] if len(held) else np.zeros(nb))
    else:
        parts.append(eye[state.bank_color[agent - n_col]])
    t_extra = np.hstack([(state.carrier >= 0).astype(np.float64)[:, None], eye[state.treasure_color]])
    parts.append(_nearest_blocks(state.landmark_pos - pos, t_extra))
    banks = [j for j in others if j >= n_col]
    b_extra = eye[state.bank_color[np.asarray(banks, dtype=np.int64) - n_col]] if banks else None
    parts.append(_nearest_blocks(state.agent_pos[banks] - pos, b_extra))
    cols = [j for j in others if j < n_col]
    c_extra = np.array([[1.0 if (state.carrier == j).any() else 0.0] for j in cols]).reshape(-1, 1)
    parts.append(_nearest_blocks(state.agent_pos[cols] - pos, c_extra if cols else None))
    return parts


def observe_all(state: WorldState) -> list:
    return [observe(state, i) for i in range(state.spec.total_agents)]


# ----------------------------------------------------------- trajectories

TRAJECTORY_COLUMNS = ["step", "entity_id", "x", "y", "vx", "vy", "reward"]


def trajectory_rows(states, rewards) -> list:
    """Rows for a trajectory dump; ``rewards[k]`` belongs to ``states[k]``.

    Agents come first, then landmarks/treasures, whose reward cell is empty.
    """
    rows = []
    for k, (s, r) in enumerate(zip(states, rewards)):
        n = s.spec.total_agents
        for i in range(n):
            x, y = s.agent_pos[i]
            vx, vy = s.agent_vel[i]
            rew = "" if r is None else format(float(r[i]), ".17g")
            rows.append([s.t, i] + [format(float(v), ".17g") for v in (x, y, vx, vy)] + [rew])
        for j, (x, y) in enumerate(s.landmark_pos):
            rows.append([s.t, n + j, format(float(x), ".17g"), format(float(y), ".17g"), "0", "0", ""])
    return rows


def dump_trajectory(states, rewards, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        w.writerows(trajectory_rows(states, rewards))
    return path
