import os
import hashlib
import logging
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml
from dotenv import load_dotenv

from face_tracer.errors import ConfigurationError
from face_tracer.losses import LossWeights, REDUNDANCY_MODES
from face_tracer.data import SyntheticSpec, CONVENTIONS

load_dotenv()
logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "FACE_TRACER_CACHE_DIR"
DEFAULT_CACHE_DIR = ".face_tracer_cache"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"


class Settings:
    """
    Process-wide settings read from the environment (and an optional .env file).

    Attributes:
        cache_dir (Path): Root directory for extracted frames, corpora and run outputs.
    """
    def __init__(self):
        self.cache_dir = Path(os.getenv(CACHE_DIR_ENV, DEFAULT_CACHE_DIR))

    def run_dir(self, name: str) -> Path:
        """Returns the default output directory for a command under the cache dir."""
        return self.cache_dir / name


def derive_seed(seed: int, stream: str) -> int:
    """
    Expands the top-level seed into an independent per-module seed.

    Args:
        seed (int): The run's top-level seed.
        stream (str): Name of the consumer, e.g. "init" or "shuffle".

    Returns:
        int: A non-negative 31-bit seed unique to (seed, stream).
    """
    digest = hashlib.sha256(f"{seed}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 128
    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    id_dim: int = 512
    attr_dim: int = 512
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ConfigurationError(f"❌ Invalid model.channels: expected 4 stages, got {len(self.channels)}.")
        if any(c <= 0 for c in self.channels):
            raise ConfigurationError(f"❌ Invalid model.channels: {self.channels} must be positive.")
        if self.resolution <= 0 or self.resolution % 8 != 0:
            raise ConfigurationError(
                f"❌ Invalid model.resolution: {self.resolution} must be a positive multiple of 8."
            )
        if self.id_dim <= 0 or self.attr_dim <= 0:
            raise ConfigurationError("❌ Invalid model dims: id_dim and attr_dim must be positive.")
        if self.id_dim != self.attr_dim:
            raise ConfigurationError(
                f"❌ Invalid model dims: id_dim ({self.id_dim}) and attr_dim ({self.attr_dim}) must match "
                "for the redundancy cosine."
            )
        if self.leaky_slope < 0:
            raise ConfigurationError(f"❌ Invalid model.leaky_slope: {self.leaky_slope} must be >= 0.")

    @property
    def level_scales(self) -> list[int]:
        """Spatial size of each encoder level: three halvings, then one resolution-preserving stage."""
        r = self.resolution
        return [r // 2, r // 4, r // 8, r // 8]

    @classmethod
    def desk_scale(cls) -> "ModelConfig":
        """Identical topology shrunk to laptop size, used by property tests and overfit runs."""
        return cls(resolution=32, channels=(16, 32, 64, 128), id_dim=64, attr_dim=64)


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    test_fraction: float = 0.1
    convention: str = "celebdf"
    frame_interval: float = 1.0
    split_seed: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigurationError(f"❌ Invalid data.test_fraction: {self.test_fraction} must be in [0, 1).")
        if self.convention not in CONVENTIONS:
            raise ConfigurationError(
                f"❌ Invalid data.convention: '{self.convention}' (choose from {sorted(CONVENTIONS)})."
            )
        if self.frame_interval <= 0:
            raise ConfigurationError(f"❌ Invalid data.frame_interval: {self.frame_interval} must be > 0.")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0003
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    seed: Optional[int] = None
    checkpoint_every: int = 10
    redundancy_mode: str = "raw"
    supervisor_seed: Optional[int] = None
    supervisor_path: Optional[str] = None
    log_every: int = 50
    convergence_tolerance: float = 0.01
    convergence_patience: int = 5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"❌ Invalid train.learning_rate: {self.learning_rate} must be >= 0.")
        if self.batch_size < 1:
            raise ConfigurationError(f"❌ Invalid train.batch_size: {self.batch_size} must be >= 1.")
        if self.epochs < 1:
            raise ConfigurationError(f"❌ Invalid train.epochs: {self.epochs} must be >= 1.")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigurationError("❌ Invalid Adam betas: both must lie in [0, 1).")
        if self.checkpoint_every < 1:
            raise ConfigurationError(f"❌ Invalid train.checkpoint_every: {self.checkpoint_every} must be >= 1.")
        if self.redundancy_mode not in REDUNDANCY_MODES:
            raise ConfigurationError(
                f"❌ Invalid train.redundancy_mode: '{self.redundancy_mode}' (choose raw or absolute)."
            )


@dataclass(frozen=True)
class EvalConfig:
    grid: int = 8
    failure_cases: int = 4
    batch_size: int = 32
    backbone_seed: Optional[int] = None
    backbone_path: Optional[str] = None

    def __post_init__(self):
        if self.grid < 0 or self.failure_cases < 0:
            raise ConfigurationError("❌ Invalid eval grid sizes: must be >= 0.")
        if self.batch_size < 1:
            raise ConfigurationError(f"❌ Invalid eval.batch_size: {self.batch_size} must be >= 1.")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    checkpoint: Optional[str] = None

    @classmethod
    def from_dict(cls, payload: Optional[dict]) -> "RunConfig":
        """
        Builds a RunConfig from a parsed document, rejecting unknown keys at every level.

        Args:
            payload (Optional[dict]): Parsed YAML mapping; None means all defaults.

        Returns:
            RunConfig: The validated configuration.

        Raises:
            ConfigurationError: On unknown keys or invalid values.
        """
        return _build(cls, payload or {}, "")

    def to_dict(self) -> dict:
        """Plain-data form, suitable for YAML/JSON serialization."""
        return _to_plain(dataclasses.asdict(self))

    def resolved(self) -> "RunConfig":
        """Returns a copy where every unset section seed is derived from the top-level seed."""
        synthetic = self.data.synthetic
        if synthetic.seed is None:
            synthetic = dataclasses.replace(synthetic, seed=derive_seed(self.seed, "synthetic"))
        data = dataclasses.replace(
            self.data,
            synthetic=synthetic,
            split_seed=_pick(self.data.split_seed, self.seed, "split"),
        )
        train = dataclasses.replace(
            self.train,
            seed=_pick(self.train.seed, self.seed, "init"),
            supervisor_seed=_pick(self.train.supervisor_seed, self.seed, "supervisor"),
        )
        evaluation = dataclasses.replace(
            self.eval,
            backbone_seed=_pick(self.eval.backbone_seed, self.seed, "evaluator"),
        )
        return dataclasses.replace(self, data=data, train=train, eval=evaluation)

    def save(self, path: Path) -> Path:
        """Writes the configuration as YAML and returns the path."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path

    def archive(self, output_dir: Path) -> Path:
        """Writes the resolved configuration next to a run's outputs."""
        path = self.resolved().save(Path(output_dir) / RESOLVED_CONFIG_NAME)
        logger.info(f"💾 Resolved config archived at {path}")
        return path


def _pick(explicit: Optional[int], seed: int, stream: str) -> int:
    return explicit if explicit is not None else derive_seed(seed, stream)


def _build(cls, payload: Any, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigurationError(f"❌ Invalid config section '{prefix or '<root>'}': expected a mapping.")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigurationError(f"❌ Unknown config key: '{where}{unknown[0]}'.")
    kwargs = {}
    for name, value in payload.items():
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value or {}, f"{prefix}.{name}" if prefix else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"❌ Invalid config section '{prefix or '<root>'}': {e}") from e


def _to_plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (DataConfig, "synthetic"): SyntheticSpec,
    (TrainConfig, "weights"): LossWeights,
}


def load_run_config(path: Optional[str]) -> RunConfig:
    """
    Loads a YAML run configuration; a missing path yields the defaults.

    Args:
        path (Optional[str]): Path to the YAML document.

    Returns:
        RunConfig: The validated (unresolved) configuration.

    Raises:
        ConfigurationError: If the file is missing, is not valid YAML, or fails validation.
    """
    if path is None:
        return RunConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigurationError(f"❌ Config file not found: {config_path}")
    try:
        payload = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"❌ Config file is not valid YAML: {config_path}: {e}") from e
    logger.info(f"Loaded run config from {config_path}")
    return RunConfig.from_dict(payload)


settings = Settings()
