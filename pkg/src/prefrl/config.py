"""Run configuration: a nested YAML file, flag overrides and the resolved snapshot.

Layout (every key optional, unknown keys are rejected)::

    run:        {seed, run_id}
    env:        {name, width, height, start, goal, reward_mode, episode_cap, slip_probability}
    schedule:   {horizon, total_steps, warmup_steps, steps_between_sessions, chunk_trajectories}
    feedback:   {max_feedback, queries_per_session, sampler, ensemble_size, query_window}
    reward:     {losses, lambda_ce, lambda_t, lambda_a, margin, ...}
    policy:     {gamma, alpha, temperature_start, ...}
    evaluation: {eval_episodes, spearman_sample_size, spearman_window}
    oracle:     {oracle, flip_probability, queue_capacity, min_session_seconds, checkpoint_every}

``config.resolved`` is this same layout with every value filled in, so
``run --config out/config.resolved`` repeats a run exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .envs import GridWorldConfig
from .trainer import TrainerConfig, config_from_dict, config_to_dict

TRAINER_SECTIONS = {
    "schedule": ("horizon", "total_steps", "warmup_steps", "steps_between_sessions",
                 "chunk_trajectories"),
    "feedback": ("max_feedback", "queries_per_session", "sampler", "ensemble_size",
                 "query_window"),
    "reward": ("losses", "lambda_ce", "lambda_t", "lambda_a", "margin", "triplet_mode",
               "reward_update_epochs", "reward_batch_size", "anchors_per_update",
               "tuples_per_anchor", "anchor_window", "k_window", "pairs_per_trajectory", "reward_hidden",
               "reward_optimizer", "reward_lr", "output_bound"),
    "policy": ("gamma", "alpha", "temperature_start", "temperature_end", "entropy_baseline",
               "center_rewards", "policy_batches_per_chunk", "policy_batch_size",
               "bank_capacity"),
    "evaluation": ("eval_episodes", "spearman_sample_size", "spearman_window"),
    "oracle": ("oracle", "flip_probability", "queue_capacity", "min_session_seconds",
               "checkpoint_every"),
}
_TRAINER_FIELD_SECTION = {name: sec for sec, names in TRAINER_SECTIONS.items() for name in names}
assert set(_TRAINER_FIELD_SECTION) == {f.name for f in fields(TrainerConfig)}

ENV_PRESETS = {
    "gridworld": {"reward_mode": "sparse"},
    "gridworld-shaped": {"reward_mode": "shaped"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending field."""


@dataclass
class RunConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    env: GridWorldConfig = field(default_factory=GridWorldConfig)
    env_name: str = "gridworld"
    seed: int = 0
    run_id: str = "run"

    def to_dict(self) -> dict:
        flat = config_to_dict(self.trainer)
        out = {"run": {"seed": self.seed, "run_id": self.run_id}}
        env = asdict(self.env)
        env["start"] = list(env["start"])
        env["goal"] = list(env["goal"])
        out["env"] = {"name": self.env_name, **env}
        for sec, names in TRAINER_SECTIONS.items():
            out[sec] = {n: flat[n] for n in names}
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "config.resolved"
        path.write_text(self.dump())
        return path


def _check_mapping(name, value, errors):
    if value is None:
        return {}
    if not isinstance(value, dict):
        errors.append(f"{name}: expected a mapping, got {type(value).__name__}")
        return {}
    return value


def from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    known = {"run", "env", *TRAINER_SECTIONS}
    for key in sorted(set(data) - known):
        errors.append(f"{key}: unknown section (expected one of {sorted(known)})")

    run = _check_mapping("run", data.get("run"), errors)
    for key in sorted(set(run) - {"seed", "run_id"}):
        errors.append(f"run.{key}: unknown field")

    env = dict(_check_mapping("env", data.get("env"), errors))
    env_name = env.pop("name", "gridworld")
    if env_name not in ENV_PRESETS:
        errors.append(f"env.name: unknown environment {env_name!r} (expected one of {sorted(ENV_PRESETS)})")
        env_fields = {}
    else:
        env_fields = {**ENV_PRESETS[env_name], **env}
    env_known = {f.name for f in fields(GridWorldConfig)}
    for key in sorted(set(env_fields) - env_known):
        errors.append(f"env.{key}: unknown field")

    flat = {}
    for sec, names in TRAINER_SECTIONS.items():
        block = _check_mapping(sec, data.get(sec), errors)
        for key, value in block.items():
            if key not in names:
                home = _TRAINER_FIELD_SECTION.get(key)
                hint = f" (belongs in section {home!r})" if home else ""
                errors.append(f"{sec}.{key}: unknown field{hint}")
            else:
                flat[key] = value
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    try:
        env_cfg = GridWorldConfig(**{k: v for k, v in env_fields.items() if k in env_known})
    except (TypeError, ValueError) as exc:
        errors.append(f"env: {exc}")
    try:
        trainer = config_from_dict(flat)
    except (TypeError, ValueError) as exc:
        errors.append(f"trainer: {exc}")
    if not errors and trainer.horizon > env_cfg.episode_cap:
        errors.append(f"schedule.horizon: {trainer.horizon} exceeds env.episode_cap {env_cfg.episode_cap}")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    seed = run.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"invalid config:\n  run.seed: expected a non-negative integer, got {seed!r}")
    return RunConfig(trainer, env_cfg, env_name, seed, str(run.get("run_id", "run")))


def load(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(data)


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(base: RunConfig, *, env: str | None = None, losses: str | None = None,
                    budget: int | None = None, seed: int | None = None,
                    run_id: str | None = None, assignments=()) -> RunConfig:
    """Return a new config with flag values and ``section.key=value`` assignments applied."""
    data = base.to_dict()
    if env is not None:
        if env not in ENV_PRESETS:
            raise ConfigError(f"--env: unknown environment {env!r} (expected one of {sorted(ENV_PRESETS)})")
        data["env"]["name"] = env
        data["env"].update(ENV_PRESETS[env])
    if losses is not None:
        data["reward"]["losses"] = losses
    if budget is not None:
        data["feedback"]["max_feedback"] = budget
    if seed is not None:
        data["run"]["seed"] = seed
    if run_id is not None:
        data["run"]["run_id"] = run_id
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        if "." in key:
            sec, _, name = key.partition(".")
        else:
            sec, name = _TRAINER_FIELD_SECTION.get(key), key
            if sec is None:
                raise ConfigError(f"--set {key}: unknown field; use section.key for run/env fields")
        data.setdefault(sec, {})[name] = _parse_scalar(value)
    return from_dict(data)
