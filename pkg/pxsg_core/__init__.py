# This file marks 'pxsg_core' as a Python package.
# It also holds the system initialization shared by the HTTP app and the
# `serve` command: loading the frozen networks named by the endpoint settings.

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import torch.nn as nn

from .checkpoint import load_checkpoint
from .networks import NetworkKinds
from .settings import EndpointConfig

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

# Networks loaded by initialize_proxy_system, keyed by NetworkKinds
proxy_networks: Dict[str, nn.Module] = {}


def model_version_of(path: Path, descriptor: Dict) -> str:
    version = descriptor.get("model_version")
    if version:
        return version
    epoch = descriptor.get("extra", {}).get("epoch")
    return f"{path.stem}-epoch{epoch}" if epoch is not None else path.stem


def initialize_proxy_system(
    config: Optional[EndpointConfig] = None,
    generator_checkpoint: Optional[str] = None,
) -> Tuple[EndpointConfig, Dict[str, nn.Module]]:
    """
    Loads the segmenter checkpoint named in the endpoint settings (and, for
    in-process pipelines, an optional generator) and registers them in
    `proxy_networks`. Returns the settings with the model version filled in.
    """
    logger.info("Initializing proxy segmentation system components...")
    config = config or EndpointConfig.from_env()
    if not config.segmenter_checkpoint:
        raise RuntimeError("no segmenter checkpoint configured (set PXSG_SEGMENTER_CKPT or pass --model)")

    path = Path(config.segmenter_checkpoint)
    segmenter, descriptor = load_checkpoint(path, kind=NetworkKinds.SEGMENTER)
    proxy_networks[NetworkKinds.SEGMENTER] = segmenter.eval()
    if config.model_version == EndpointConfig.model_fields["model_version"].default:
        config = config.model_copy(update={"model_version": model_version_of(path, descriptor)})
    if generator_checkpoint:
        generator, _ = load_checkpoint(generator_checkpoint, kind=NetworkKinds.GENERATOR)
        proxy_networks[NetworkKinds.GENERATOR] = generator.eval()

    logger.info(f"Proxy system ready: {', '.join(proxy_networks)} (model {config.model_version})")
    return config, proxy_networks
