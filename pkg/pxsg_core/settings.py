# Configuration surfaces of the system. Every config file maps onto one of the
# pydantic models below; environment overrides are read through python-dotenv.

import logging
import os
from pathlib import Path
from typing import Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

from .constants import Ablations, Defaults

logger = logging.getLogger(__name__)


class LossWeights(BaseModel):
    """Balancing weights of the total objective (lambda_1 .. lambda_4)."""
    adversarial: float = Field(0.5, ge=0.0)
    invertibility: float = Field(1.0, ge=0.0)
    smoothness: float = Field(10.0, ge=0.0)
    diversity: float = Field(1.0, ge=0.0)

    @classmethod
    def zero(cls) -> "LossWeights":
        return cls(adversarial=0.0, invertibility=0.0, smoothness=0.0, diversity=0.0)


class NetworkConfig(BaseModel):
    """Architecture of the generator, segmenter and discriminator."""
    dims: Tuple[int, int, int] = (24, 32, 32)
    classes: int = Field(Defaults.CLASSES, ge=2)
    key_dim: int = Field(Defaults.KEY_DIM, ge=1)
    base_width: int = Field(Defaults.BASE_WIDTH, ge=1)
    levels: int = Field(3, ge=1)
    key_width: int = Field(8, ge=1)
    embedding_dim: int = Field(64, ge=1)
    max_displacement: float = Field(Defaults.MAX_DISPLACEMENT, gt=0.0)
    # discriminator input channels; None means one per class
    input_channels: Optional[int] = Field(None, ge=1)

    @property
    def discriminator_channels(self) -> int:
        return self.input_channels or self.classes

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, dims):
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        return dims


class TrainConfig(BaseModel):
    """Joint adversarial training run; field names mirror the run config file."""
    epochs: int = Field(100, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = Field(2, ge=1)
    pairs_per_step: int = Field(4, ge=1)
    pair_balance: float = Field(0.5, ge=0.0, le=1.0)
    weights: LossWeights = Field(default_factory=LossWeights)
    no_invertibility: bool = False
    no_smoothness: bool = False
    no_diversity: bool = False
    freeze_generator: bool = False
    grad_clip: Optional[float] = Field(5.0, gt=0.0)
    seed: int = 0
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    prefetch: int = Field(2, ge=1)
    network: NetworkConfig = Field(default_factory=NetworkConfig)

    def effective_weights(self) -> LossWeights:
        """Weights after ablation flags have zeroed their lambdas."""
        weights = self.weights.model_copy()
        if self.no_invertibility:
            weights.invertibility = 0.0
        if self.no_smoothness:
            weights.smoothness = 0.0
        if self.no_diversity:
            weights.diversity = 0.0
        return weights

    def with_ablations(self, names) -> "TrainConfig":
        flags = {}
        for name in names:
            if name == Ablations.INVERTIBILITY:
                flags["no_invertibility"] = True
            elif name == Ablations.SMOOTHNESS:
                flags["no_smoothness"] = True
            elif name == Ablations.DIVERSITY:
                flags["no_diversity"] = True
            else:
                raise ValueError(f"unknown ablation '{name}', expected one of {Ablations.ALL}")
        return self.model_copy(update=flags)

    @classmethod
    def no_proxy(cls, **overrides) -> "TrainConfig":
        """Plain supervised segmentation: generator frozen at identity, all lambdas zero."""
        return cls(weights=LossWeights.zero(), freeze_generator=True, **overrides)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TrainConfig":
        return cls.model_validate_json(Path(path).read_text())


class PhantomSpec(BaseModel):
    """Synthetic multi-subject corpus description."""
    n_subjects: int = Field(20, ge=2)
    scans_per_subject: Optional[int] = Field(3, ge=1)
    dims: Tuple[int, int, int] = Defaults.DIMS
    classes: int = Field(Defaults.CLASSES, ge=2)
    seed: int = 0
    shell_radii: Tuple[float, ...] = (0.35, 0.55, 0.7, 0.85, 1.0)
    template_extent: float = Field(0.45, gt=0.0, le=0.5)
    noise_sigma: float = Field(0.02, ge=0.0)
    jitter: float = Field(0.5, ge=0.0, le=1.0)
    bias_amplitude: float = Field(0.1, ge=0.0, lt=1.0)
    deformation_sigma: float = Field(2.0, ge=0.0)
    axis_scale_sigma: float = Field(0.06, ge=0.0)

    @model_validator(mode="after")
    def _check_classes(self):
        if self.classes != len(self.shell_radii) + 1:
            raise ValueError(
                f"classes={self.classes} requires {self.classes - 1} shell radii, got {len(self.shell_radii)}"
            )
        radii = list(self.shell_radii)
        if radii != sorted(radii) or radii[0] <= 0:
            raise ValueError(f"shell radii must be positive and increasing, got {radii}")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PhantomSpec":
        return cls.model_validate_json(Path(path).read_text())


class EndpointConfig(BaseModel):
    """Segmentation server settings; every field has a PXSG_* environment override."""
    host: str = "127.0.0.1"
    port: int = Field(7450, ge=0, le=65535)
    max_payload: int = Field(Defaults.MAX_PAYLOAD, ge=1)
    read_timeout: float = Field(Defaults.READ_TIMEOUT, gt=0.0)
    segmenter_checkpoint: Optional[str] = None
    model_version: str = "unversioned"

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        load_dotenv()
        values = {}
        listen = os.getenv("PXSG_LISTEN")
        if listen:
            values["host"], values["port"] = parse_listen(listen)
        if os.getenv("PXSG_MAX_PAYLOAD"):
            values["max_payload"] = int(os.environ["PXSG_MAX_PAYLOAD"])
        if os.getenv("PXSG_READ_TIMEOUT"):
            values["read_timeout"] = float(os.environ["PXSG_READ_TIMEOUT"])
        if os.getenv("PXSG_SEGMENTER_CKPT"):
            values["segmenter_checkpoint"] = os.environ["PXSG_SEGMENTER_CKPT"]
        values.update({k: v for k, v in overrides.items() if v is not None})
        config = cls(**values)
        logger.info(f"Endpoint config: listen {config.host}:{config.port}, max payload {config.max_payload} bytes")
        return config


def parse_listen(address: str) -> Tuple[str, int]:
    """Split 'host:port' (host may be empty for all interfaces)."""
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected <addr:port>, got '{address}'")
    return host or "0.0.0.0", int(port)
