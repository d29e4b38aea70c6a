"""Experiment configuration, seeded runs and on-disk artifacts.

Config files are YAML mappings::

    name: spread33-knowru
    algorithm: maddpg            # maddpg | maac_lite
    condition: knowru            # scratch | init_from_teacher | knowru
    seeds: [0, 1, 2, 3, 4]
    output_dir: runs/spread33/knowru     # relative to the config file
    scenario: {kind: spread, n_agents: 3, n_landmarks: 3}
    train: {episodes: 800, batch_size: 256}
    knowru:
      teachers: [runs/spread22/seed_0/agent_0/actor.snap, ...]
      source_scenario: {kind: spread, n_agents: 2, n_landmarks: 2}
      loss_kind: mse             # mse | kd_kl | ce
      alpha0: 0.5
      floor: 0.02
      beta: null                 # null -> reach the floor at 80% of training
      scaler: dynamic            # none | static | dynamic

Each seed writes ``<output_dir>/seed_<s>/episodes.csv`` and snapshots named
``agent_<i>/<actor|critic>[_target].snap``. ``manifest.json`` records the
artifacts of every seed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import env as world
from .algos import LEARNERS, EpisodeStats, MaacLearner, TrainConfig, evaluate_actors, train_episode
from .metrics import tail_mean, time_to_threshold
from .nn import format_reals, load_snapshot, save_snapshot
from .replay import ReplayBuffer
from .reuse import (
    LOSS_KINDS,
    SCALER_MODES,
    AlphaSchedule,
    TeacherSnapshot,
    TransferContext,
    alpha_performance,
    default_beta,
    metadata_path,
    pair_by_role,
    same_task,
    spec_to_dict,
    write_teacher_metadata,
)

log = logging.getLogger(__name__)

ALGORITHMS = tuple(LEARNERS)
CONDITIONS = ("scratch", "init_from_teacher", "knowru")


class ConfigError(Exception):
    pass


class ConfigFileError(ConfigError):
    pass


class ConfigParseError(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class KnowruConfig:
    teachers: list
    source_scenario: world.ScenarioSpec
    loss_kind: str = "mse"
    temperature: float = 1.0
    alpha0: float = 0.5
    beta: float | None = None
    floor: float = 0.02
    scaler: str = "dynamic"
    scaler_k: float = 1.0


@dataclass
class ExperimentConfig:
    scenario: world.ScenarioSpec
    train: TrainConfig
    output_dir: Path
    name: str = "run"
    algorithm: str = "maddpg"
    condition: str = "scratch"
    seeds: list = field(default_factory=lambda: [0])
    knowru: KnowruConfig | None = None

    def resolved_beta(self) -> float:
        k = self.knowru
        return k.beta if k.beta is not None else default_beta(k.alpha0, k.floor, self.train.episodes)


# ------------------------------------------------------------------ parsing


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigValidationError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigValidationError(key, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or default is None and isinstance(value, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigValidationError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(key, f"expected a list, got {value!r}")
        return tuple(_coerce(v, 0, f"{key}[{k}]") for k, v in enumerate(value))
    return value


def _block(raw, cls, prefix, overrides=None):
    if not isinstance(raw, dict):
        raise ConfigValidationError(prefix, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigValidationError(f"{prefix}.{unknown[0]}", "unknown key")
    kw = dict(overrides or {})
    for name, value in raw.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if value is None and default is None:
            kw[name] = None
        else:
            kw[name] = _coerce(value, default, f"{prefix}.{name}")
    return kw


def _scenario(raw, prefix) -> world.ScenarioSpec:
    kw = _block(raw, world.ScenarioSpec, prefix)
    if "kind" not in kw:
        raise ConfigValidationError(f"{prefix}.kind", "missing required key")
    try:
        return world.ScenarioSpec(**kw).validate()
    except world.ConfigurationError as exc:
        raise ConfigValidationError(prefix, str(exc)) from exc


TOP_KEYS = {"name", "algorithm", "condition", "seeds", "output_dir", "scenario", "train", "knowru"}


def parse_config(raw, base_dir=".") -> ExperimentConfig:
    base_dir = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigValidationError("<root>", "expected a mapping")
    unknown = sorted(set(raw) - TOP_KEYS)
    if unknown:
        raise ConfigValidationError(unknown[0], "unknown key")
    if "scenario" not in raw:
        raise ConfigValidationError("scenario", "missing required key")
    scenario = _scenario(raw["scenario"], "scenario")

    train_kw = _block(raw.get("train") or {}, TrainConfig, "train")
    steps = train_kw.get("steps_per_episode")
    if steps is not None and steps != scenario.episode_length:
        raise ConfigValidationError("train.steps_per_episode", "must equal scenario.episode_length")
    train_kw["steps_per_episode"] = scenario.episode_length
    try:
        train = TrainConfig(**train_kw).validate()
    except ValueError as exc:
        raise ConfigValidationError("train", str(exc)) from exc

    name = raw.get("name", "run")
    algorithm = raw.get("algorithm", "maddpg")
    if algorithm not in ALGORITHMS:
        raise ConfigValidationError("algorithm", f"must be one of {ALGORITHMS}")
    if algorithm == "maac_lite" and scenario.total_agents < 2:
        raise ConfigValidationError("algorithm", "maac_lite needs at least two agents")
    condition = raw.get("condition", "scratch")
    if condition not in CONDITIONS:
        raise ConfigValidationError("condition", f"must be one of {CONDITIONS}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigValidationError("seeds", "expected a non-empty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigValidationError("seeds", "seeds must be distinct")
    out = Path(raw.get("output_dir", f"runs/{name}"))
    if not out.is_absolute():
        out = (base_dir / out).resolve()

    knowru = None
    needs_teachers = condition in ("knowru", "init_from_teacher")
    if "knowru" in raw and raw["knowru"] is not None:
        if not needs_teachers:
            raise ConfigValidationError("knowru", f"not allowed with condition {condition!r}")
        knowru = _knowru(raw["knowru"], base_dir, scenario)
    elif needs_teachers:
        raise ConfigValidationError("knowru.teachers", f"missing required key for condition {condition!r}")
    return ExperimentConfig(scenario, train, out, name, algorithm, condition, list(seeds), knowru)


def _knowru(raw, base_dir: Path, scenario) -> KnowruConfig:
    if not isinstance(raw, dict):
        raise ConfigValidationError("knowru", "expected a mapping")
    for req in ("teachers", "source_scenario"):
        if req not in raw:
            raise ConfigValidationError(f"knowru.{req}", "missing required key")
    source = _scenario(raw["source_scenario"], "knowru.source_scenario")
    if source.kind != scenario.kind:
        raise ConfigValidationError("knowru.source_scenario.kind", "must match scenario.kind")
    rest = {k: v for k, v in raw.items() if k not in ("teachers", "source_scenario")}
    kw = _block(rest, KnowruConfig, "knowru")
    teachers = raw["teachers"]
    if not isinstance(teachers, list) or not teachers:
        raise ConfigValidationError("knowru.teachers", "expected a non-empty list of snapshot paths")
    paths = []
    for k, p in enumerate(teachers):
        key = f"knowru.teachers[{k}]"
        if not isinstance(p, str):
            raise ConfigValidationError(key, "expected a path string")
        path = Path(p)
        if not path.is_absolute():
            path = (base_dir / path).resolve()
        if not path.exists():
            raise ConfigValidationError(key, f"teacher snapshot {path} does not exist")
        meta = metadata_path(path)
        if not meta.exists():
            raise ConfigValidationError(key, f"missing metadata sidecar {meta.name}")
        declared = world.ScenarioSpec(**yaml.safe_load(meta.read_text())["scenario"])
        if not same_task(declared, source):
            raise ConfigValidationError(key, "teacher was trained on a different source scenario")
        paths.append(path)
    cfg = KnowruConfig(paths, source, **kw)
    if cfg.loss_kind not in LOSS_KINDS:
        raise ConfigValidationError("knowru.loss_kind", f"must be one of {LOSS_KINDS}")
    if cfg.scaler not in SCALER_MODES:
        raise ConfigValidationError("knowru.scaler", f"must be one of {SCALER_MODES}")
    if not 0.0 <= cfg.alpha0 <= 1.0:
        raise ConfigValidationError("knowru.alpha0", "must lie in [0, 1]")
    if cfg.floor < 0 or (cfg.beta is not None and cfg.beta < 0):
        raise ConfigValidationError("knowru.floor", "floor and beta must be nonnegative")
    if not cfg.temperature > 0:
        raise ConfigValidationError("knowru.temperature", "must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    return parse_config(raw, path.parent.resolve())


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = {
        "name": cfg.name,
        "algorithm": cfg.algorithm,
        "condition": cfg.condition,
        "seeds": list(cfg.seeds),
        "output_dir": str(cfg.output_dir),
        "scenario": spec_to_dict(cfg.scenario),
        "train": cfg.train.to_dict(),
    }
    if cfg.knowru is not None:
        k = dataclasses.asdict(cfg.knowru)
        k["teachers"] = [str(p) for p in cfg.knowru.teachers]
        k["source_scenario"] = spec_to_dict(cfg.knowru.source_scenario)
        d["knowru"] = k
    return d


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


# --------------------------------------------------------------------- runs

EPISODE_FIXED = ["mean_reward", "critic_loss", "l_q", "l_reuse", "l_reuse_scaled", "alpha", "noise"]


def episode_columns(n_agents: int) -> list:
    return ["episode"] + [f"reward_{i}" for i in range(n_agents)] + EPISODE_FIXED


def episode_row(s: EpisodeStats) -> list:
    vals = [s.mean_reward, s.critic_loss, s.l_q, s.l_reuse, s.l_reuse_scaled, s.alpha, s.noise]
    return [s.episode] + [format_reals([r]) for r in s.rewards] + [format_reals([v]) for v in vals]


def read_curve(csv_path, column="mean_reward") -> np.ndarray:
    with Path(csv_path).open(newline="") as fh:
        return np.array([float(r[column]) for r in csv.DictReader(fh)])


def read_episode_log(csv_path) -> list:
    with Path(csv_path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunRecord:
    seed: int
    directory: Path
    status: str
    stats: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    error: str = ""

    @property
    def curve(self) -> np.ndarray:
        return np.array([s.mean_reward for s in self.stats])


def _seed_streams(seed: int, episodes: int):
    init_ss, env_ss, act_ss, sample_ss = np.random.SeedSequence(seed).spawn(4)
    env_seeds = np.random.default_rng(env_ss).integers(0, 2**31 - 1, size=episodes)
    return (
        np.random.default_rng(init_ss),
        [int(s) for s in env_seeds],
        np.random.default_rng(act_ss),
        np.random.default_rng(sample_ss),
    )


def load_teachers(cfg: ExperimentConfig) -> list:
    return [TeacherSnapshot.load(p) for p in cfg.knowru.teachers]


def init_from_teachers(learner, teachers, spec) -> int:
    """Copy every teacher layer whose shape matches the paired student layer.

    Returns the number of layers copied.
    """
    plan = pair_by_role(spec.roles(), [t.role for t in teachers])
    copied = 0
    for i, j in enumerate(plan):
        if j is None:
            continue
        src = teachers[j].net
        for net in (learner.actors[i], learner.target_actors[i]):
            for k in range(min(src.n_layers, net.n_layers)):
                if src.weights[k].shape == net.weights[k].shape:
                    net.weights[k][...] = src.weights[k]
                    net.biases[k][...] = src.biases[k]
                    copied += net is learner.actors[i]
    return copied


def build_transfer(cfg: ExperimentConfig, teachers):
    k = cfg.knowru
    schedule = AlphaSchedule(k.alpha0, cfg.resolved_beta(), k.floor)
    return TransferContext.build(
        teachers, cfg.scenario, schedule, loss_kind=k.loss_kind, temperature=k.temperature,
        scaler_mode=k.scaler, scaler_k=k.scaler_k,
    )


def train_seed(cfg: ExperimentConfig, seed: int, progress=None):
    """Train one seed in memory. Returns ``(learner, stats)``."""
    spec = cfg.scenario
    tc = cfg.train
    init_rng, env_seeds, act_rng, sample_rng = _seed_streams(seed, tc.episodes)
    obs_dims = [world.observation_dim(spec, i) for i in range(spec.total_agents)]
    learner = LEARNERS[cfg.algorithm](obs_dims, tc, init_rng)
    buffer = ReplayBuffer(obs_dims, world.N_ACTIONS, tc.buffer_capacity)
    transfer = None
    if cfg.condition == "init_from_teacher":
        init_from_teachers(learner, load_teachers(cfg), spec)
    elif cfg.condition == "knowru":
        transfer = build_transfer(cfg, load_teachers(cfg))
    noise = tc.noise_scale
    stats = []
    for ep in range(tc.episodes):
        s = train_episode(spec, learner, buffer, ep, env_seeds[ep], noise, act_rng, sample_rng, transfer)
        stats.append(s)
        if transfer is not None:
            transfer.schedule.step()
        noise = max(noise * tc.noise_decay, tc.noise_floor)
        if progress is not None:
            progress(seed, s)
    return learner, stats


def _write_attention(critic, path: Path) -> Path:
    lines = ["ATTENTION v1"]
    for name in ("query", "key", "value"):
        m = getattr(critic, name)
        lines.append(f"{name} {m.shape[0]} {m.shape[1]} {format_reals(m)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def save_learner(learner, cfg: ExperimentConfig, seed: int, run_dir: Path) -> list:
    spec = cfg.scenario
    written = []
    for i in range(learner.n_agents):
        agent_dir = run_dir / f"agent_{i}"
        actor = save_snapshot(learner.actors[i], agent_dir / "actor.snap")
        written.append(actor)
        written.append(write_teacher_metadata(actor, spec, i, seed, cfg.train.episodes))
        written.append(save_snapshot(learner.target_actors[i], agent_dir / "actor_target.snap"))
        if isinstance(learner, MaacLearner):
            for tag, critic in (("", learner.critic), ("_target", learner.target_critic)):
                written.append(save_snapshot(critic.embed_nets[i], agent_dir / f"critic_embed{tag}.snap"))
                written.append(save_snapshot(critic.head_nets[i], agent_dir / f"critic_head{tag}.snap"))
        else:
            written.append(save_snapshot(learner.critics[i], agent_dir / "critic.snap"))
            written.append(save_snapshot(learner.target_critics[i], agent_dir / "critic_target.snap"))
    if isinstance(learner, MaacLearner):
        written.append(_write_attention(learner.critic, run_dir / "shared" / "attention.snap"))
        written.append(_write_attention(learner.target_critic, run_dir / "shared" / "attention_target.snap"))
    return written


def write_episode_csv(stats, n_agents: int, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(episode_columns(n_agents))
        w.writerows(episode_row(s) for s in stats)
    return path


def _stats_from_csv(path: Path, n_agents: int) -> list:
    out = []
    for r in read_episode_log(path):
        s = EpisodeStats(int(r["episode"]), np.array([float(r[f"reward_{i}"]) for i in range(n_agents)]))
        for name in ("critic_loss", "l_q", "l_reuse", "l_reuse_scaled", "alpha", "noise"):
            setattr(s, name, float(r[name]))
        out.append(s)
    return out


def _manifest_path(cfg) -> Path:
    return cfg.output_dir / "manifest.json"


def _read_manifest(cfg) -> dict:
    p = _manifest_path(cfg)
    if p.exists():
        return json.loads(p.read_text())
    return {"seeds": {}}


def _write_manifest(cfg, manifest) -> None:
    _manifest_path(cfg).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run(cfg: ExperimentConfig, resume: bool = False, progress=None) -> list:
    """Train every seed and persist its artifacts. I/O errors fail that seed only."""
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "config.yaml").write_text(dump_config(cfg))
    manifest = _read_manifest(cfg) if resume else {"seeds": {}}
    manifest["config"] = "config.yaml"
    n = cfg.scenario.total_agents
    records = []
    for seed in cfg.seeds:
        run_dir = cfg.output_dir / f"seed_{seed}"
        entry = manifest["seeds"].get(str(seed))
        csv_path = run_dir / "episodes.csv"
        if resume and entry and entry.get("status") == "complete" and csv_path.exists():
            log.info("seed %d already complete, skipping", seed)
            records.append(RunRecord(seed, run_dir, "complete", _stats_from_csv(csv_path, n),
                                     [Path(a) for a in entry["artifacts"]]))
            continue
        learner, stats = train_seed(cfg, seed, progress)
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            artifacts = [write_episode_csv(stats, n, csv_path)]
            artifacts += save_learner(learner, cfg, seed, run_dir)
        except OSError as exc:
            log.error("seed %d failed: %s", seed, exc)
            manifest["seeds"][str(seed)] = {"status": "failed", "error": str(exc), "artifacts": []}
            records.append(RunRecord(seed, run_dir, "failed", stats, [], str(exc)))
            _write_manifest(cfg, manifest)
            continue
        rel = [str(a.relative_to(cfg.output_dir)) for a in artifacts]
        manifest["seeds"][str(seed)] = {"status": "complete", "artifacts": rel}
        records.append(RunRecord(seed, run_dir, "complete", stats, artifacts))
        _write_manifest(cfg, manifest)
    return records


def seed_curves(run_dir) -> dict:
    """``{seed: mean_reward curve}`` for every ``seed_*/episodes.csv`` under a run."""
    out = {}
    for p in sorted(Path(run_dir).glob("seed_*/episodes.csv")):
        out[int(p.parent.name.split("_", 1)[1])] = read_curve(p)
    return out


def load_actors(snapshot_dir, spec) -> list:
    snapshot_dir = Path(snapshot_dir)
    actors = []
    for i in range(spec.total_agents):
        net = load_snapshot(snapshot_dir / f"agent_{i}" / "actor.snap")
        if net.input_dim != world.observation_dim(spec, i):
            raise ValueError(f"agent {i}: snapshot input {net.input_dim} does not fit the scenario")
        actors.append(net)
    return actors


def evaluate(snapshot_dir, cfg: ExperimentConfig, episodes: int) -> float:
    return evaluate_actors(cfg.scenario, load_actors(snapshot_dir, cfg.scenario), episodes)


# --------------------------------------------------------------- alpha sweep


@dataclass
class AlphaRow:
    alpha0: float
    time: int
    reached: bool
    performance: float = 0.0
    tail: float = 0.0


def alpha_times(curves_by_alpha: dict, threshold=None, stability_window=None, half_window=10):
    """Episodes needed by each alpha's seed-averaged curve to reach the threshold.

    Times count episodes (first qualifying index + 1) so they stay positive.
    Unreached thresholds are censored at the curve length. The default
    threshold is the lowest seed-averaged final-10% mean among the alphas.
    """
    means = {a: np.mean(np.stack(c), axis=0) for a, c in curves_by_alpha.items()}
    if threshold is None:
        threshold = min(tail_mean(c) for c in curves_by_alpha.values())
    rows = []
    for a, m in means.items():
        sw = stability_window or max(1, round(0.05 * m.size))
        idx = time_to_threshold(m, threshold, sw, half_window)
        rows.append(AlphaRow(a, m.size if idx is None else idx + 1, idx is not None,
                             tail=tail_mean(curves_by_alpha[a])))
    perf = alpha_performance({r.alpha0: r.time for r in rows})
    for r in rows:
        r.performance = perf[r.alpha0]
    return rows, float(threshold)


def alpha_config(cfg: ExperimentConfig, alpha0: float) -> ExperimentConfig:
    k = dataclasses.replace(cfg.knowru, alpha0=float(alpha0))
    out = cfg.output_dir / f"alpha_{alpha0:g}"
    return dataclasses.replace(cfg, knowru=k, output_dir=out, name=f"{cfg.name}-alpha{alpha0:g}")


def alpha_sweep(cfg: ExperimentConfig, alphas, threshold=None, resume=False, progress=None):
    if cfg.condition != "knowru":
        raise ConfigValidationError("condition", "alpha-sweep needs condition knowru")
    curves = {}
    for a in alphas:
        recs = run(alpha_config(cfg, a), resume=resume, progress=progress)
        curves[float(a)] = [r.curve for r in recs]
    rows, thr = alpha_times(curves, threshold)
    path = cfg.output_dir / "alpha_sweep.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha0", "time", "reached", "performance", "tail_mean", "threshold"])
        for r in rows:
            w.writerow([format(r.alpha0, "g"), r.time, int(r.reached), format_reals([r.performance]),
                        format_reals([r.tail]), format_reals([thr])])
    return rows, thr, path

