# The three learnable components: the key-conditioned flow generator G, the
# 3-D U-Net segmenter S and the Siamese discriminator D.

import logging
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .constants import Defaults
from .errors import DimensionMismatchError, IndivisibleDimsError
from .settings import NetworkConfig
from .volume import FlowField, PrivateKey, SegMap, Volume, required_padding

logger = logging.getLogger(__name__)


class NetworkKinds:
    GENERATOR = "generator"
    SEGMENTER = "segmenter"
    DISCRIMINATOR = "discriminator"

    ALL = (GENERATOR, SEGMENTER, DISCRIMINATOR)


def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


def check_divisible(dims, multiple: int) -> None:
    padding = required_padding(dims, multiple)
    if any(padding):
        raise IndivisibleDimsError(tuple(dims), multiple, padding)


def _widths(config: NetworkConfig) -> List[int]:
    return [config.base_width * 2 ** level for level in range(config.levels + 1)]


class _UNetBody(nn.Module):
    """Encoder of levels+1 conv blocks and a decoder of levels upsampling blocks."""

    def __init__(self, in_channels: int, config: NetworkConfig, extra_decoder_channels: int = 0):
        super().__init__()
        widths = _widths(config)
        self.levels = config.levels
        self.encoders = nn.ModuleList(
            [conv_block(in_channels if i == 0 else widths[i - 1], widths[i]) for i in range(self.levels + 1)]
        )
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose3d(widths[i + 1], widths[i], kernel_size=2, stride=2) for i in reversed(range(self.levels))]
        )
        self.decoders = nn.ModuleList(
            [conv_block(2 * widths[i] + extra_decoder_channels, widths[i]) for i in reversed(range(self.levels))]
        )

    def forward(self, x: torch.Tensor, decoder_extras=None) -> torch.Tensor:
        skips = []
        for level, block in enumerate(self.encoders):
            x = block(x)
            if level < self.levels:
                skips.append(x)
                x = F.max_pool3d(x, kernel_size=2)
        for step, (up, block) in enumerate(zip(self.upsamplers, self.decoders)):
            parts = [up(x), skips[-1 - step]]
            if decoder_extras is not None:
                parts.append(decoder_extras[step])
            x = block(torch.cat(parts, dim=1))
        return x


class GeneratorNet(nn.Module):
    """Outputs a forward flow f_k and its inverse f_k^inv for an image x and key k.

    The key is broadcast as a 1x1x1 map with M channels, expanded to the
    bottleneck grid by one transpose convolution, then upscaled 2x per level
    and concatenated at every decoder resolution. Both flow heads start at
    zero, so a fresh generator is the identity transform.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        check_divisible(config.dims, config.multiple)
        self.config = config
        widths = _widths(config)
        self.body = _UNetBody(1, config, extra_decoder_channels=config.key_width)
        bottom = tuple(d // config.multiple for d in config.dims)
        self.key_stem = nn.ConvTranspose3d(config.key_dim, config.key_width, kernel_size=bottom)
        self.key_upsamplers = nn.ModuleList(
            [nn.ConvTranspose3d(config.key_width, config.key_width, kernel_size=2, stride=2) for _ in range(config.levels)]
        )
        self.refine = conv_block(widths[0], widths[0])
        self.forward_head = nn.Conv3d(widths[0], 3, kernel_size=1)
        self.inverse_head = nn.Conv3d(widths[0], 3, kernel_size=1)
        for head in (self.forward_head, self.inverse_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def key_maps(self, key: torch.Tensor) -> List[torch.Tensor]:
        k = F.relu(self.key_stem(key.view(key.shape[0], -1, 1, 1, 1)))
        maps = []
        for up in self.key_upsamplers:
            k = F.relu(up(k))
            maps.append(k)
        return maps

    def forward(self, x: torch.Tensor, key: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        _check_input(x, self.config, channels=1)
        if key.dim() != 2 or key.shape[1] != self.config.key_dim or key.shape[0] != x.shape[0]:
            raise DimensionMismatchError(f"key batch {tuple(key.shape)} does not match (B={x.shape[0]}, M={self.config.key_dim})")
        features = self.refine(self.body(x, self.key_maps(key.to(x.dtype))))
        bound = self.config.max_displacement
        return bound * torch.tanh(self.forward_head(features)), bound * torch.tanh(self.inverse_head(features))


class SegmentationNet(nn.Module):
    """3-D U-Net with a per-voxel softmax over C classes."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        check_divisible(config.dims, config.multiple)
        self.config = config
        self.body = _UNetBody(1, config)
        self.head = nn.Conv3d(config.base_width, config.classes, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.config, channels=1)
        return self.head(self.body(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class SiameseDiscriminator(nn.Module):
    """Shared encoder on both soft maps, |e_a - e_b| fusion, two-layer head, logistic output."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = _widths(config)
        layers = []
        for level in range(config.levels + 1):
            layers.append(conv_block(config.discriminator_channels if level == 0 else widths[level - 1], widths[level]))
            if level < config.levels:
                layers.append(nn.MaxPool3d(kernel_size=2))
        self.encoder = nn.Sequential(*layers)
        self.embedding = nn.Linear(widths[-1], config.embedding_dim)
        self.head = nn.Sequential(
            nn.Linear(config.embedding_dim, config.embedding_dim // 2 or 1),
            nn.ReLU(inplace=True),
            nn.Linear(config.embedding_dim // 2 or 1, 1),
        )

    def embed(self, y: torch.Tensor) -> torch.Tensor:
        if y.dim() != 5 or y.shape[1] != self.config.discriminator_channels:
            raise DimensionMismatchError(f"discriminator expects (B, {self.config.discriminator_channels}, H, W, D), got {tuple(y.shape)}")
        check_divisible(y.shape[2:], self.config.multiple)
        return self.embedding(self.encoder(y).mean(dim=(2, 3, 4)))

    def compare(self, emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
        eps = Defaults.PROBABILITY_CLAMP
        logit = self.head((emb_a - emb_b).abs()).squeeze(-1)
        return torch.clamp(torch.sigmoid(logit), eps, 1 - eps)

    def forward(self, y_a: torch.Tensor, y_b: torch.Tensor) -> torch.Tensor:
        if y_a.shape != y_b.shape:
            raise DimensionMismatchError(f"pair shapes differ: {tuple(y_a.shape)} vs {tuple(y_b.shape)}")
        return self.compare(self.embed(y_a), self.embed(y_b))


def _check_input(x: torch.Tensor, config: NetworkConfig, channels: int) -> None:
    if x.dim() != 5 or x.shape[1] != channels:
        raise DimensionMismatchError(f"expected (B, {channels}, H, W, D), got {tuple(x.shape)}")
    check_divisible(x.shape[2:], config.multiple)
    if tuple(x.shape[2:]) != tuple(config.dims):
        raise DimensionMismatchError(f"network built for dims {tuple(config.dims)}, got {tuple(x.shape[2:])}")


def build_network(kind: str, config: NetworkConfig) -> nn.Module:
    if kind == NetworkKinds.GENERATOR:
        return GeneratorNet(config)
    if kind == NetworkKinds.SEGMENTER:
        return SegmentationNet(config)
    if kind == NetworkKinds.DISCRIMINATOR:
        return SiameseDiscriminator(config)
    raise ValueError(f"unknown network kind '{kind}', expected one of {NetworkKinds.ALL}")


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def declared_shapes(net: nn.Module, batch: int = 1) -> Dict[str, Tuple[int, ...]]:
    """Output shape every encoder/decoder stage should produce for the configured dims."""
    config = net.config
    widths = _widths(config)
    shapes = {}
    body = getattr(net, "body", None)
    if body is not None:
        for level in range(config.levels + 1):
            grid = tuple(d // 2 ** level for d in config.dims)
            shapes[f"body.encoders.{level}"] = (batch, widths[level], *grid)
        for step, level in enumerate(reversed(range(config.levels))):
            grid = tuple(d // 2 ** level for d in config.dims)
            shapes[f"body.upsamplers.{step}"] = (batch, widths[level], *grid)
            shapes[f"body.decoders.{step}"] = (batch, widths[level], *grid)
    if isinstance(net, GeneratorNet):
        shapes["key_stem"] = (batch, config.key_width, *(d // config.multiple for d in config.dims))
        for step, level in enumerate(reversed(range(config.levels))):
            shapes[f"key_upsamplers.{step}"] = (batch, config.key_width, *(d // 2 ** level for d in config.dims))
        shapes["forward_head"] = (batch, 3, *config.dims)
        shapes["inverse_head"] = (batch, 3, *config.dims)
    elif isinstance(net, SegmentationNet):
        shapes["head"] = (batch, config.classes, *config.dims)
    elif isinstance(net, SiameseDiscriminator):
        shapes["embedding"] = (batch, config.embedding_dim)
    return shapes


def generate_flows(generator: GeneratorNet, x: Volume, key: PrivateKey) -> Tuple[FlowField, FlowField]:
    """(f_k, f_k^inv) for one image on a frozen generator."""
    key.check_length(generator.config.key_dim)
    check_divisible(x.dims, generator.config.multiple)
    param = next(generator.parameters())
    generator.eval()
    with torch.no_grad():
        flow, inverse = generator(
            x.data.to(param.dtype).view(1, 1, *x.dims), key.values.to(param.dtype).view(1, -1)
        )
    return FlowField(flow[0]), FlowField(inverse[0])


def segment(segmenter: SegmentationNet, x_d: Volume) -> SegMap:
    param = next(segmenter.parameters())
    segmenter.eval()
    with torch.no_grad():
        probs = segmenter(x_d.data.to(param.dtype).view(1, 1, *x_d.dims))
    result = SegMap(probs[0])
    if not result.is_normalized():
        logger.warning("Segmenter output channel sums drifted beyond tolerance")
    return result


def discriminate(discriminator: SiameseDiscriminator, y_a: SegMap, y_b: SegMap) -> float:
    if y_a.dims != y_b.dims or y_a.classes != y_b.classes:
        raise DimensionMismatchError(f"pair disagrees: {y_a.dims}/{y_a.classes} vs {y_b.dims}/{y_b.classes}")
    param = next(discriminator.parameters())
    discriminator.eval()
    with torch.no_grad():
        p = discriminator(y_a.soft.to(param.dtype).unsqueeze(0), y_b.soft.to(param.dtype).unsqueeze(0))
    return float(p[0])
