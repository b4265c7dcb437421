"""Run configuration: loading, validation and component builders.

A run config is a TOML (or JSON) document with one table per block::

    [embedding]   kind, dimension, fidelity, seed, endpoint, template_alignment
    [reward]      temperature, threshold, negatives, seed, template
    [env]         width, height, num_objects, timeout, discount, seed, families, colors, types
    [agent]       iterations, batch_size, learning_rate, entropy_weight, seed, split_seed, ...
    [eval]        thresholds, dataset, dataset_size, dataset_seed, fidelities
    [[prompting.templates]]   optional custom templates (id, pattern)

Every block must be present and every block with randomness must name its
seed explicitly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .agent import AgentConfig
from .embedding import (
    RemoteEmbeddingClient,
    RemoteEmbeddingProvider,
    SyntheticEmbedder,
    SyntheticEmbedderConfig,
)
from .env import EnvConfig, GoalSpec
from .errors import ConfigError, InvalidInput
from .prompting import PromptTemplate, TemplateRegistry, load_templates
from .reward import RewardModel, RewardModelConfig, TaskSet

ENDPOINT_ENV_VAR = "VLMREWARD_EMBED_ENDPOINT"
BLOCKS = ("embedding", "reward", "env", "agent", "eval")
SEEDED_BLOCKS = ("embedding", "reward", "env", "agent")


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str = "synthetic"
    dimension: int = 64
    fidelity: float = 1.0
    seed: int = 0
    endpoint: str | None = None
    max_batch: int = 32
    timeout: float = 10.0
    retries: int = 3
    template_alignment: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("synthetic", "remote"):
            raise InvalidInput(f"embedding kind must be 'synthetic' or 'remote', got {self.kind!r}")
        if self.kind == "synthetic":
            SyntheticEmbedderConfig(self.dimension, self.fidelity, self.seed, dict(self.template_alignment))

    def synthetic(self) -> SyntheticEmbedderConfig:
        return SyntheticEmbedderConfig(self.dimension, self.fidelity, self.seed, dict(self.template_alignment))


@dataclass(frozen=True)
class EvalConfig:
    thresholds: int = 101
    dataset: str | None = None
    dataset_size: int = 1000
    dataset_seed: int = 0
    expert_prob: float = 0.5
    fidelities: tuple[float, ...] = (0.2, 0.5, 0.9, 1.0)

    def __post_init__(self):
        if self.thresholds < 2:
            raise InvalidInput("thresholds must be >= 2")
        if self.dataset_size < 2:
            raise InvalidInput("dataset_size must be >= 2")
        if not (0.0 <= self.expert_prob <= 1.0):
            raise InvalidInput("expert_prob must lie in [0, 1]")
        for f in self.fidelities:
            if not (0.0 <= f <= 1.0):
                raise InvalidInput("fidelities must lie in [0, 1]")

    def threshold_grid(self) -> list[float]:
        k = self.thresholds - 1
        return [i / k for i in range(k + 1)]


@dataclass(frozen=True)
class RunConfig:
    embedding: EmbeddingConfig
    reward: RewardModelConfig
    env: EnvConfig
    agent: AgentConfig
    eval: EvalConfig
    templates: tuple[PromptTemplate, ...] = ()
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False)
    source: str | None = field(default=None, compare=False)

    def goals(self) -> list[GoalSpec]:
        return self.env.goals()

    def registry(self) -> TemplateRegistry:
        return TemplateRegistry(self.templates)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "RunConfig":
        """Replace every seed in the config by ``seed``."""
        raw = json.loads(json.dumps(self.raw))
        for block in SEEDED_BLOCKS:
            raw[block]["seed"] = seed
        raw["agent"]["split_seed"] = seed
        raw["eval"]["dataset_seed"] = seed
        return from_mapping(raw, source=self.source)

    def replace(self, **blocks) -> "RunConfig":
        """Override individual fields, e.g. ``replace(embedding={"fidelity": 0.5})``."""
        raw = json.loads(json.dumps(self.raw))
        for block, updates in blocks.items():
            raw.setdefault(block, {}).update(updates)
        return from_mapping(raw, source=self.source)


def _seeded_block_defaults() -> dict[str, dict]:
    return {b: {"seed": 0} for b in SEEDED_BLOCKS} | {"eval": {}}


def default_config(**overrides) -> RunConfig:
    """A complete config with every seed set to 0; handy for tests and scripts."""
    raw: dict[str, dict] = _seeded_block_defaults()
    for block, updates in overrides.items():
        raw.setdefault(block, {}).update(updates)
    return from_mapping(raw)


def _build(cls, block: str, data: Mapping[str, Any], text: str | None):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {block}.{key}", _locate(text, block, key))
    kwargs = {}
    for key, value in data.items():
        ftype = str(next(f.type for f in dataclasses.fields(cls) if f.name == key))
        if ftype.startswith("tuple") and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (InvalidInput, TypeError) as exc:
        bad = _guess_key(str(exc), data)
        raise ConfigError(f"[{block}] {exc}", _locate(text, block, bad) if bad else _locate(text, block, None)) from None


def _guess_key(message: str, data: Mapping[str, Any]) -> str | None:
    for key in sorted(data, key=len, reverse=True):
        if re.search(rf"\b{re.escape(key)}\b", message):
            return key
    return None


def _locate(text: str | None, block: str, key: str | None) -> int | None:
    """Line number (1-based) of ``key`` inside ``[block]``, or of the block header."""
    if not text:
        return None
    if text.lstrip().startswith("{"):
        target = f'"{key or block}"'
        for i, line in enumerate(text.splitlines(), 1):
            if target in line:
                return i
        return None
    section = None
    header_line = None
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[+([^\]]+)\]+", stripped)
        if m:
            section = m.group(1).strip()
            if section == block:
                header_line = i
            continue
        if key and section == block and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return i
    return header_line


def from_mapping(raw: Mapping[str, Any], text: str | None = None, source: str | None = None) -> RunConfig:
    try:
        return _from_mapping(raw, text)
    except ConfigError as exc:
        exc.path = source
        raise


def _from_mapping(raw: Mapping[str, Any], text: str | None) -> RunConfig:
    for block in BLOCKS:
        if block not in raw or not isinstance(raw[block], Mapping):
            raise ConfigError(f"missing [{block}] block")
    for key in raw:
        if key not in BLOCKS + ("prompting",):
            raise ConfigError(f"unknown block [{key}]", _locate(text, key, None))
    for block in SEEDED_BLOCKS:
        if "seed" not in raw[block]:
            raise ConfigError(f"[{block}] must set 'seed' explicitly", _locate(text, block, None))

    emb = dict(raw["embedding"])
    if ENDPOINT_ENV_VAR in os.environ and emb.get("kind") == "remote":
        emb["endpoint"] = os.environ[ENDPOINT_ENV_VAR]
    embedding = _build(EmbeddingConfig, "embedding", emb, text)
    reward = _build(RewardModelConfig, "reward", raw["reward"], text)
    env = _build(EnvConfig, "env", raw["env"], text)
    agent = _build(AgentConfig, "agent", raw["agent"], text)
    evalc = _build(EvalConfig, "eval", raw["eval"], text)
    try:
        templates = tuple(load_templates(raw.get("prompting", {}).get("templates", [])))
        registry = TemplateRegistry(templates)
    except InvalidInput as exc:
        raise ConfigError(str(exc), _locate(text, "prompting.templates", None)) from None
    if reward.template not in registry:
        raise ConfigError(f"[reward] unknown template id {reward.template!r}", _locate(text, "reward", "template"))
    n_goals = len(env.goals())
    try:
        reward.resolve_negatives(n_goals)
    except InvalidInput as exc:
        raise ConfigError(f"[reward] {exc}", _locate(text, "reward", "negatives")) from None
    if embedding.kind == "remote" and not embedding.endpoint:
        raise ConfigError(
            f"remote embedding needs 'endpoint' (or ${ENDPOINT_ENV_VAR})", _locate(text, "embedding", None)
        )
    return RunConfig(embedding, reward, env, agent, evalc, templates, raw=dict(raw))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from None
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, exc.lineno, str(path)) from None
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(str(exc), int(m.group(1)) if m else None, str(path)) from None
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a table", path=str(path))
    return from_mapping(raw, text, str(path))


# --- builders ------------------------------------------------------------------


def build_provider(config: RunConfig, goals: list[GoalSpec] | None = None, fidelity: float | None = None):
    emb = config.embedding
    if emb.kind == "remote":
        client = RemoteEmbeddingClient(
            emb.endpoint, max_batch=emb.max_batch, timeout=emb.timeout, retries=emb.retries
        )
        return RemoteEmbeddingProvider(client)
    syn = emb.synthetic()
    if fidelity is not None:
        syn = dataclasses.replace(syn, fidelity=fidelity)
    return SyntheticEmbedder(syn, goals if goals is not None else config.goals(), config.registry())


def build_reward_model(
    config: RunConfig,
    provider=None,
    goals: list[GoalSpec] | None = None,
    template_id: str | None = None,
) -> RewardModel:
    goals = goals if goals is not None else config.goals()
    provider = provider if provider is not None else build_provider(config, goals)
    template = config.registry().get(template_id or config.reward.template)
    task_set = TaskSet.from_goals(goals, template)
    rcfg = dataclasses.replace(config.reward, template=template.id)
    return RewardModel(provider, rcfg, task_set)
