"""Flat ``key=value`` run configuration with defaults, file and override layers."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import FeatureDims, SyntheticSpec
from .errors import ConfigurationError
from .losses import LossConfig
from .training import TrainConfig, dims_for_data

_ARCH_KEYS = (
    "content_code_dim", "emotion_code_dim", "fused_dim", "content_hidden_dim",
    "emotion_hidden_dim", "encoder_layers", "mlp_layers", "hidden_activation",
)
_LOSS_KEYS = tuple(f.name for f in fields(LossConfig))
_SYNTH_KEYS = tuple(f.name for f in fields(SyntheticSpec) if f.name != "seed")


@dataclass(frozen=True)
class RunConfig:
    # training
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    ablation: str = "interactive"
    all_pairs: bool = False
    train_fraction: float = 0.7
    # losses
    margin: float = 0.5
    lambda1: float = 0.8
    lambda2: float = 1.0
    mu1: float = 0.8
    mu2: float = 1.0
    k1: float = 0.5
    k2: float = 0.5
    k3: float = 1.0
    metric_variant: str = "contrastive"
    fusion_mode: str = "interactive"
    ppml_site: str = "content"
    # architecture
    content_code_dim: int = 256
    emotion_code_dim: int = 256
    fused_dim: int = 256
    content_hidden_dim: int = 512
    emotion_hidden_dim: int = 256
    encoder_layers: int = 2
    mlp_layers: int = 2
    hidden_activation: str = "relu"
    # synthetic data
    num_pairs: int = 100
    musics_per_video: int = 1
    latent_content_dim: int = 16
    latent_emotion_dim: int = 8
    video_content_dim: int = 256
    music_content_dim: int = 256
    video_emotion_dim: int = 64
    music_emotion_dim: int = 64
    num_classes: int = 4
    noise_sigma: float = 0.1
    class_separation: float = 1.5
    emotion_in_content: float = 0.25
    related_music_spread: float = 0.3
    # evaluation / runtime
    corpus: str = "test"
    threads: int = 0

    def __post_init__(self):
        if self.corpus not in ("test", "all"):
            raise ConfigurationError(f"corpus must be 'test' or 'all', got {self.corpus!r}")
        if self.threads < 0:
            raise ConfigurationError("threads must be >= 0")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")

    def loss_config(self) -> LossConfig:
        return LossConfig(**{k: getattr(self, k) for k in _LOSS_KEYS})

    def train_config(self, feature_dims: FeatureDims) -> TrainConfig:
        dims = dims_for_data(feature_dims, **{k: getattr(self, k) for k in _ARCH_KEYS})
        return TrainConfig(
            dims=dims,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_epsilon=self.adam_epsilon,
            seed=self.seed,
            loss=self.loss_config(),
            ablation=self.ablation,
            all_pairs=self.all_pairs,
            train_fraction=self.train_fraction,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(seed=self.seed, **{k: getattr(self, k) for k in _SYNTH_KEYS})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def render(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, raw, where: str):
    if key not in _TYPES:
        raise ConfigurationError(f"{where}: unknown key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
            return raw
        raise ConfigurationError(f"{where}: key {key!r} expects {kind.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{where}: key {key!r} expects {kind.__name__}, got {text!r}") from None
    return text


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} not found")
    values = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{p}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        values[key] = _coerce(key, raw, f"{p}:{lineno}")
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (optional), then ``overrides``."""
    values = read_config_file(path) if path is not None else {}
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw, "command line")
    try:
        return replace(RunConfig(), **values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def validate_run(cfg: RunConfig) -> None:
    """Cross-checks that do not need data: loss settings and optimizer bounds."""
    cfg.loss_config()
    if cfg.batch_size < 2:
        raise ConfigurationError(
            f"batch_size must be >= 2: the metric losses need in-batch negatives (got {cfg.batch_size})"
        )
    if cfg.epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if not cfg.learning_rate > 0:
        raise ConfigurationError("learning_rate must be positive")
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(cfg, name) < 1:
            raise ConfigurationError(f"{name} must lie in [0, 1)")
