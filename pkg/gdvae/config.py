"""Configuration management for gdvae."""

import hashlib
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, FrozenSet, Optional, Tuple

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
DEBUG_MODE = os.getenv("DEBUG_MODE", "false").lower() == "true"

# Worker cap for ablation and trials
try:
    GDVAE_THREADS = max(1, int(os.getenv("GDVAE_THREADS", "1")))
except ValueError:
    print(f"Warning: Invalid GDVAE_THREADS value: {os.getenv('GDVAE_THREADS')}")
    GDVAE_THREADS = 1

# Where run directories go when --out is not given
RUN_ROOT = os.getenv("GDVAE_RUN_ROOT", "runs")

SHOW_PROGRESS = os.getenv("GDVAE_SHOW_PROGRESS", "false").lower() == "true"

TASKS: Tuple[str, ...] = ("T", "R", "P")
GRAPH_VARIANTS: Tuple[str, ...] = ("binary", "tfidf", "pmi_binary", "pmi_tfidf")


class ConfigError(ValueError):
    """Raised for invalid configuration files or values."""


@dataclass(frozen=True)
class TrainConfig:
    """Experiment settings for one training run."""

    tasks: FrozenSet[str] = frozenset(TASKS)
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    num_topics: int = 10
    merge_count: int = 10
    num_biterm_docs: int = 5000
    d_emb: int = 200
    d_latent: int = 200
    rec_hidden: int = 200
    alpha: float = 0.02
    graph_variant: str = "pmi_tfidf"
    patience: int = 10
    residual: bool = True
    min_count: int = 1
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    def with_tasks(self, tasks: FrozenSet[str]) -> "TrainConfig":
        """Return a copy restricted to the given task subset."""
        return replace(self, tasks=frozenset(tasks))


def task_key(tasks: FrozenSet[str]) -> str:
    """Render a task subset in canonical T, R, P order, e.g. ``TRP``."""
    return "".join(t for t in TASKS if t in tasks)


def task_mask(tasks: FrozenSet[str]) -> int:
    """Bitmask id of a task subset (T=1, R=2, P=4)."""
    return sum(1 << i for i, t in enumerate(TASKS) if t in tasks)


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"Invalid boolean for {key}: {raw!r}")


def _parse_value(key: str, raw: str) -> Any:
    """Convert a raw config string to the type of the matching TrainConfig field."""
    try:
        if key == "tasks":
            tasks = frozenset(t.strip().upper() for t in raw.replace(",", " ").split() if t.strip())
            if len(tasks) == 1 and len(next(iter(tasks))) > 1:
                # Compact form such as "TRP"
                tasks = frozenset(next(iter(tasks)))
            return tasks
        if key == "split":
            parts = tuple(float(p) for p in raw.replace(",", " ").split())
            if len(parts) != 3:
                raise ConfigError(f"split needs three ratios, got {raw!r}")
            return parts
        if key in ("residual",):
            return _parse_bool(key, raw)
        if key in ("learning_rate", "alpha"):
            return float(raw)
        if key == "graph_variant":
            return raw.strip().lower()
        return int(raw)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid value for {key}: {raw!r}") from e


def parse_tasks(raw: str) -> FrozenSet[str]:
    """Parse a task list such as ``T,R,P`` or ``TRP``."""
    return _parse_value("tasks", raw)


def parse_config_text(text: str) -> TrainConfig:
    """Parse flat ``key = value`` text into a TrainConfig.

    Args:
        text (str): Config file contents

    Returns:
        TrainConfig: Parsed and validated configuration
    """
    known = {f.name for f in fields(TrainConfig)}
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"Line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"Line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"Line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)

    config = TrainConfig(**values)
    validate_config(config)
    return config


def load_config(path: str) -> TrainConfig:
    """Load a TrainConfig from a ``key = value`` file."""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def render_config(config: TrainConfig) -> str:
    """Render a TrainConfig in canonical ``key = value`` form."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if f.name == "tasks":
            rendered = ",".join(task_key(value))
        elif f.name == "split":
            rendered = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, bool):
            rendered = str(value).lower()
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def save_config(config: TrainConfig, path: str) -> None:
    """Write a config in canonical form."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_config(config))


def config_digest(config: TrainConfig) -> str:
    """SHA-256 hex digest of the canonical config rendering."""
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()


def validate_config(config: TrainConfig) -> bool:
    """Validate that a TrainConfig satisfies its invariants."""
    if not config.tasks:
        raise ConfigError("At least one task must be active")
    unknown = set(config.tasks) - set(TASKS)
    if unknown:
        raise ConfigError(f"Unknown tasks: {sorted(unknown)}")
    if config.num_topics < 1:
        raise ConfigError(f"num_topics must be positive, got {config.num_topics}")
    if "T" in config.tasks and config.num_topics < 2:
        raise ConfigError(f"num_topics must be >= 2 when T is active, got {config.num_topics}")
    if config.graph_variant not in GRAPH_VARIANTS:
        raise ConfigError(f"Unknown graph variant {config.graph_variant!r}; expected one of {GRAPH_VARIANTS}")
    for name in ("epochs", "batch_size", "merge_count", "num_biterm_docs", "d_emb", "d_latent", "rec_hidden"):
        if getattr(config, name) < 1:
            raise ConfigError(f"{name} must be positive, got {getattr(config, name)}")
    if config.patience < 1:
        raise ConfigError(f"patience must be positive, got {config.patience}")
    if config.min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {config.min_count}")
    if config.learning_rate <= 0:
        raise ConfigError(f"learning_rate must be positive, got {config.learning_rate}")
    if config.alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {config.alpha}")
    if any(r <= 0 for r in config.split) or abs(sum(config.split) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be positive and sum to 1, got {config.split}")
    return True


def threads(override: Optional[int] = None) -> int:
    """Worker count, capped by GDVAE_THREADS."""
    if override is None:
        return GDVAE_THREADS
    return max(1, min(override, GDVAE_THREADS))
