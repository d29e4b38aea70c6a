"""Knowledge reuse by logit mimicking.

A frozen teacher actor from an earlier task supplies target logits for the
student's own observations. The mimicking loss is rescaled to the size of
the critic term and blended with it under a linearly annealed weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .env import ConfigurationError, ScenarioSpec, observation_layout
from .nn import MlpNet, as_column, ce_loss, kd_loss, load_snapshot, mse_loss

LOSS_KINDS = ("mse", "kd_kl", "ce")
SCALER_MODES = ("none", "static", "dynamic")


def spec_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "kind": spec.kind,
        "n_agents": spec.n_agents,
        "n_adversaries": spec.n_adversaries,
        "n_landmarks": spec.n_landmarks,
        "n_collectors": spec.n_collectors,
        "n_banks": spec.n_banks,
        "episode_length": spec.episode_length,
        "world_half_width": float(spec.world_half_width),
        "seed": spec.seed,
    }


def same_task(a: ScenarioSpec, b: ScenarioSpec) -> bool:
    """Equal entity counts and kind; episode length and seed are ignored."""
    keys = ("kind", "n_agents", "n_adversaries", "n_landmarks", "n_collectors", "n_banks")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


def metadata_path(snapshot_path) -> Path:
    p = Path(snapshot_path)
    return p.with_name(p.name + ".meta")


def write_teacher_metadata(snapshot_path, spec, agent_index, seed, episodes) -> Path:
    meta = {
        "scenario": spec_to_dict(spec),
        "agent_index": int(agent_index),
        "role": spec.roles()[agent_index],
        "seed": int(seed),
        "episodes": int(episodes),
    }
    path = metadata_path(snapshot_path)
    path.write_text(yaml.safe_dump(meta, sort_keys=False))
    return path


class TeacherSnapshot:
    """Frozen actor from a source task; parameters are made read-only."""

    def __init__(self, net: MlpNet, spec: ScenarioSpec, agent_index: int, metadata=None, path=None):
        self.net = net.copy()
        for p in self.net.params():
            p.flags.writeable = False
        self.spec = spec
        self.agent_index = agent_index
        self.role = spec.roles()[agent_index]
        self.metadata = dict(metadata or {})
        self.path = path

    @classmethod
    def load(cls, path) -> "TeacherSnapshot":
        path = Path(path)
        meta_file = metadata_path(path)
        if not meta_file.exists():
            raise ConfigurationError(f"teacher snapshot {path} has no metadata sidecar {meta_file.name}")
        meta = yaml.safe_load(meta_file.read_text())
        spec = ScenarioSpec(**meta["scenario"])
        return cls(load_snapshot(path), spec, int(meta["agent_index"]), meta, path)

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def logits(self, observations) -> np.ndarray:
        return self.net.forward(observations)


def pair(students: int, teachers: int) -> list:
    """Round-robin assignment ``student i -> teacher i mod teachers``."""
    if teachers < 1:
        raise ConfigurationError("at least one teacher is required")
    return [i % teachers for i in range(students)]


def pair_by_role(student_roles, teacher_roles) -> list:
    """Round-robin pairing restricted to teachers of the same role.

    Students whose role has no teacher map to ``None``.
    """
    plan = []
    seen = {}
    for role in student_roles:
        pool = [j for j, r in enumerate(teacher_roles) if r == role]
        if not pool:
            plan.append(None)
            continue
        k = seen.get(role, 0)
        plan.append(pool[k % len(pool)])
        seen[role] = k + 1
    return plan


class ObservationAdapter:
    """Maps a student observation onto a teacher's input layout.

    Both layouts list entity groups nearest first, so keeping the first
    ``min(count)`` blocks of each group keeps the nearest entities. Blocks
    are copied up to the shorter block width and missing slots stay zero.
    """

    def __init__(self, source: ScenarioSpec, source_agent: int, target: ScenarioSpec, target_agent: int):
        if source.kind != target.kind:
            raise ConfigurationError(f"no observation adapter from {source.kind} to {target.kind}")
        t_layout = observation_layout(source, source_agent)
        s_layout = observation_layout(target, target_agent)
        s_groups = {}
        off = 0
        for name, count, width in s_layout:
            s_groups[name] = (off, count, width)
            off += count * width
        self.student_dim = off
        index = []
        for name, count, width in t_layout:
            if name not in s_groups:
                raise ConfigurationError(
                    f"no observation adapter: student layout lacks group {name!r} "
                    f"(roles {source.roles()[source_agent]} / {target.roles()[target_agent]})"
                )
            s_off, s_count, s_width = s_groups[name]
            for k in range(count):
                for c in range(width):
                    if k < s_count and c < s_width:
                        index.append(s_off + k * s_width + c)
                    else:
                        index.append(-1)
        self.index = np.array(index, dtype=np.int64)
        self.teacher_dim = len(index)
        self.identity = self.student_dim == self.teacher_dim and bool(
            np.array_equal(self.index, np.arange(self.teacher_dim))
        )

    def __call__(self, student_observation) -> np.ndarray:
        obs = np.asarray(student_observation, dtype=np.float64)
        if obs.shape[0] != self.student_dim:
            raise ValueError(f"student observation has {obs.shape[0]} entries, expected {self.student_dim}")
        if self.identity:
            return obs
        out = np.zeros((self.teacher_dim,) + obs.shape[1:])
        keep = self.index >= 0
        out[keep] = obs[self.index[keep]]
        return out


def observation_adapt(teacher: TeacherSnapshot, student_observation, adapter: ObservationAdapter):
    out = adapter(student_observation)
    if out.shape[0] != teacher.input_dim:
        raise ConfigurationError("adapter output does not match the teacher input dimension")
    return out


def reuse_loss(
    teacher: TeacherSnapshot,
    student_actor: MlpNet,
    observations,
    loss_kind="mse",
    temperature=1.0,
    adapter: ObservationAdapter | None = None,
    student_logits=None,
):
    """Batch-mean mimicking loss and its gradient w.r.t. the student logits.

    ``student_logits`` may be passed when the student forward pass has
    already been run on ``observations``.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    obs = as_column(observations)
    if obs.shape[1] < 1:
        raise ValueError("empty observation batch")
    teacher_in = adapter(obs) if adapter is not None else obs
    target = teacher.logits(teacher_in)
    student = student_actor.forward(obs) if student_logits is None else student_logits
    if loss_kind == "mse":
        return mse_loss(student, target)
    if loss_kind == "kd_kl":
        return kd_loss(student, target, temperature)
    return ce_loss(student, target, temperature)


class ReuseScaler:
    """Brings the reuse loss to the magnitude of the critic term."""

    def __init__(self, mode="dynamic", k=1.0, decay=0.99, eps=1e-8, lo=1e-3, hi=1e3):
        if mode not in SCALER_MODES:
            raise ConfigurationError(f"scaler mode must be one of {SCALER_MODES}, got {mode!r}")
        if mode == "static" and not (k > 0 and math.isfinite(k)):
            raise ConfigurationError("static scale factor must be positive and finite")
        self.mode = mode
        self.k = float(k)
        self.decay = decay
        self.eps = eps
        self.lo, self.hi = lo, hi
        self.mean_reuse = 0.0
        self.mean_q = 0.0

    def factor(self, reuse_value: float, q_value: float) -> float:
        if self.mode == "none":
            return 1.0
        if self.mode == "static":
            return self.k
        d = self.decay
        self.mean_reuse = d * self.mean_reuse + (1.0 - d) * abs(reuse_value)
        self.mean_q = d * self.mean_q + (1.0 - d) * abs(q_value)
        s = self.mean_q / (self.mean_reuse + self.eps)
        return float(min(max(s, self.lo), self.hi))


def scale(scaler: ReuseScaler, reuse_value: float, q_value: float) -> float:
    return scaler.factor(reuse_value, q_value) * reuse_value


def blend(alpha, reuse_value, reuse_grad, q_value, q_grad):
    """``alpha * reuse + (1 - alpha) * q`` for values and gradients alike."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    value = alpha * reuse_value + (1.0 - alpha) * q_value
    grad = alpha * reuse_grad + (1.0 - alpha) * q_grad
    return value, grad


def default_beta(alpha0: float, floor: float, episodes: int) -> float:
    """Decrement that reaches the floor after 80% of the episodes."""
    return max(alpha0 - floor, 0.0) / (0.8 * episodes)


@dataclass
class AlphaSchedule:
    """Linear decay ``alpha0 - k * beta`` clamped at ``floor``.

    Alpha is evaluated from the episode counter rather than by repeated
    subtraction so that the sequence is exact.
    """

    alpha0: float = 0.5
    beta: float = 0.001
    floor: float = 0.02
    episodes_done: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigurationError("alpha0 must lie in [0, 1]")
        if self.beta < 0 or self.floor < 0:
            raise ConfigurationError("beta and floor must be nonnegative")

    @property
    def alpha(self) -> float:
        # a start below the floor stays put
        floor = min(self.floor, self.alpha0)
        return max(self.alpha0 - self.episodes_done * self.beta, floor)

    def step(self) -> float:
        self.episodes_done += 1
        return self.alpha


def schedule_step(schedule: AlphaSchedule) -> float:
    return schedule.step()


def alpha_performance(times: dict) -> dict:
    """``ln(T_max / T_alpha)`` for each alpha; the slowest alpha scores 0."""
    if not times:
        return {}
    for a, t in times.items():
        if not t > 0:
            raise ValueError(f"time for alpha={a} must be positive, got {t}")
    t_max = max(times.values())
    return {a: math.log(t_max / t) for a, t in times.items()}


@dataclass
class ReuseTerm:
    scaled_value: float
    scaled_grad: np.ndarray
    raw_value: float


class TransferContext:
    """Per-student teachers, adapters and scalers plus the shared schedule."""

    def __init__(self, teachers, adapters, schedule: AlphaSchedule, loss_kind="mse",
                 temperature=1.0, scaler_mode="dynamic", scaler_k=1.0):
        if len(teachers) != len(adapters):
            raise ValueError("one adapter per student is required")
        if loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
        self.teachers = list(teachers)
        self.adapters = list(adapters)
        self.schedule = schedule
        self.loss_kind = loss_kind
        self.temperature = temperature
        self.scalers = [ReuseScaler(scaler_mode, scaler_k) for _ in teachers]

    @classmethod
    def build(cls, teachers, student_spec: ScenarioSpec, schedule, **kw) -> "TransferContext":
        plan = pair_by_role(student_spec.roles(), [t.role for t in teachers])
        chosen, adapters = [], []
        for i, j in enumerate(plan):
            if j is None:
                chosen.append(None)
                adapters.append(None)
                continue
            t = teachers[j]
            chosen.append(t)
            adapters.append(ObservationAdapter(t.spec, t.agent_index, student_spec, i))
        return cls(chosen, adapters, schedule, **kw)

    @property
    def alpha(self) -> float:
        return self.schedule.alpha

    def reuse_term(self, i: int, student: MlpNet, obs, logits, q_value: float) -> ReuseTerm | None:
        teacher = self.teachers[i]
        if teacher is None:
            return None
        raw, grad = reuse_loss(
            teacher, student, obs, self.loss_kind, self.temperature, self.adapters[i], student_logits=logits
        )
        s = self.scalers[i].factor(raw, q_value)
        return ReuseTerm(s * raw, s * grad, raw)
