"""JSON experiment configuration with strict key checking.

Relative paths inside a config file are resolved against the file's directory.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from . import rank_eval
from .data import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig, SyntheticSpec
from .losses import DEFAULT_BETAS, LossConfig, canonical_variant, parse_variant
from .trainer import ModelSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration: bad keys, values or missing paths."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSection(_Strict):
    num_identities: int = 64
    samples_per_identity: int = 12
    feature_dim: int = 32
    confusable_pairs: int = 8
    sigma_within: float = 0.35
    delta_pair: float = 1.0
    delta_far: float = 4.0
    num_cameras: int = 4
    disjoint_train_test: bool = True
    queries_per_identity: int = 1

    def to_spec(self) -> SyntheticSpec:
        spec = SyntheticSpec(**self.model_dump())
        spec.validate()
        return spec


class FeatureFiles(_Strict):
    query: str
    gallery: str


class DatasetSection(_Strict):
    synthetic: Optional[SyntheticSection] = None
    market_dir: Optional[str] = None
    dataset_file: Optional[str] = None
    features: Optional[FeatureFiles] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        given = [k for k in ("synthetic", "market_dir", "dataset_file", "features") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one dataset source is required, got {given or 'none'}")
        return self

    @property
    def kind(self) -> str:
        for k in ("synthetic", "market_dir", "dataset_file", "features"):
            if getattr(self, k) is not None:
                return k
        raise AssertionError("unreachable")


class ModelSection(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [128])
    feature_dim: int = 64
    latent_dim: Optional[int] = None
    activation: Literal["relu", "tanh"] = "relu"

    def to_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.hidden), self.feature_dim, self.latent_dim, self.activation)


class LossTerm(_Strict):
    variant: str
    alpha: float = 1.0
    beta: Optional[float] = None

    def to_config(self) -> LossConfig:
        variant = canonical_variant(self.variant)
        beta = DEFAULT_BETAS[variant] if self.beta is None else self.beta
        return LossConfig(variant, self.alpha, beta)


class VariantSection(_Strict):
    name: str
    losses: list[LossTerm]


class TrainSection(_Strict):
    lr: float = 5e-4
    epochs: int = 60
    batch_size: int = 32
    decay_epochs: list[int] = Field(default_factory=lambda: [20, 40])
    decay_factor: float = 10.0
    eval_every: int = 0
    vib_samples: int = 1


class EvalSection(_Strict):
    max_rank: int = 50
    use_camera_mask: bool = True
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    def to_settings(self) -> rank_eval.EvalSettings:
        return rank_eval.EvalSettings(**self.model_dump())


class AugmentSection(_Strict):
    image_size: tuple[int, int] = (64, 32)
    flip_probability: float = 0.5
    erase_probability: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 1 / 0.3)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def to_config(self) -> AugmentConfig:
        return AugmentConfig(**self.model_dump())


class ExperimentConfig(_Strict):
    dataset: DatasetSection
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    losses: list[LossTerm] = Field(default_factory=lambda: [LossTerm(variant="xent")])
    variants: list[Union[str, VariantSection]] = Field(default_factory=list)
    eval: EvalSection = Field(default_factory=EvalSection)
    augment: AugmentSection = Field(default_factory=AugmentSection)
    output_dir: str = "reid_out"
    seed: int = 0

    # set by load_config; not part of the schema
    _base_dir: Path = PrivateAttr(default=Path("."))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self._base_dir / p

    def loss_terms(self) -> list[LossConfig]:
        return [t.to_config() for t in self.losses]

    def train_config(self, losses: Optional[list[LossConfig]] = None) -> TrainConfig:
        t = self.train
        cfg = TrainConfig(
            losses=losses if losses is not None else self.loss_terms(),
            lr=t.lr,
            epochs=t.epochs,
            batch_size=t.batch_size,
            decay_epochs=tuple(t.decay_epochs),
            decay_factor=t.decay_factor,
            seed=self.seed,
            eval_every=t.eval_every,
            vib_samples=t.vib_samples,
        )
        cfg.validate()
        return cfg

    def variant_terms(self) -> dict[str, list[LossConfig]]:
        out: dict[str, list[LossConfig]] = {}
        for v in self.variants:
            if isinstance(v, str):
                name, terms = v, parse_variant(v)
            else:
                name, terms = v.name, [t.to_config() for t in v.losses]
            if name in out:
                raise ConfigError(f"variant {name!r} listed twice")
            out[name] = terms
        return out

    def input_paths(self) -> list[Path]:
        ds = self.dataset
        if ds.market_dir is not None:
            return [self.resolve(ds.market_dir)]
        if ds.dataset_file is not None:
            return [self.resolve(ds.dataset_file)]
        if ds.features is not None:
            return [self.resolve(ds.features.query), self.resolve(ds.features.gallery)]
        return []

    def check_paths(self) -> None:
        for p in self.input_paths():
            if not p.exists():
                raise ConfigError(f"dataset path does not exist: {p}")


def parse_config(data: dict, base_dir=".") -> ExperimentConfig:
    from pydantic import ValidationError

    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    cfg._base_dir = Path(base_dir)
    try:
        cfg.loss_terms()
        cfg.variant_terms()
        cfg.train_config()
        if cfg.dataset.synthetic is not None:
            cfg.dataset.synthetic.to_spec()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.check_paths()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(data, path.parent)
