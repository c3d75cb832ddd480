# Versioned checkpoint container for the three networks:
#
#   "PXCK" | version u16 | descriptor length u32 | descriptor JSON
#   | tensor count u32 | per tensor: name length u16, name, ndim u8, dims u32 * ndim, float32 LE data
#
# The JSON descriptor records the network kind and its full NetworkConfig;
# loading rebuilds the network and refuses any descriptor that disagrees with
# the configured architecture.

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .constants import FileFormat
from .errors import ArchitectureMismatchError, LengthMismatchError, VolumeFormatError
from .networks import GeneratorNet, NetworkKinds, SegmentationNet, SiameseDiscriminator, build_network
from .settings import NetworkConfig

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sHI")

_CLASSES = {
    NetworkKinds.GENERATOR: GeneratorNet,
    NetworkKinds.SEGMENTER: SegmentationNet,
    NetworkKinds.DISCRIMINATOR: SiameseDiscriminator,
}


def _kind_of(net: nn.Module) -> str:
    for kind, cls in _CLASSES.items():
        if isinstance(net, cls):
            return kind
    raise TypeError(f"not a checkpointable network: {type(net).__name__}")


def encode_checkpoint(net: nn.Module, complete: bool = True, model_version: Optional[str] = None, **extra) -> bytes:
    descriptor = {
        "kind": _kind_of(net),
        "network": net.config.model_dump(mode="json"),
        "complete": complete,
        "model_version": model_version,
        "extra": extra,
    }
    meta = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(FileFormat.CHECKPOINT_MAGIC, FileFormat.CHECKPOINT_VERSION, len(meta)), meta]
    state = net.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw_name = name.encode("utf-8")
        dims = tuple(tensor.shape)
        parts.append(struct.pack(f"<H{len(raw_name)}sB{len(dims)}I", len(raw_name), raw_name, len(dims), *dims))
        parts.append(tensor.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    if len(blob) < _PREFIX.size:
        raise LengthMismatchError("checkpoint shorter than its header")
    magic, version, meta_length = _PREFIX.unpack_from(blob)
    if magic != FileFormat.CHECKPOINT_MAGIC:
        raise VolumeFormatError(f"bad checkpoint magic {magic!r}")
    if version != FileFormat.CHECKPOINT_VERSION:
        raise VolumeFormatError(f"unsupported checkpoint version {version}")
    offset = _PREFIX.size
    try:
        descriptor = json.loads(blob[offset:offset + meta_length].decode("utf-8"))
        offset += meta_length
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        tensors = {}
        for _ in range(count):
            (name_length,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_length].decode("utf-8")
            offset += name_length
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if offset + size > len(blob):
                raise LengthMismatchError(f"tensor '{name}' runs past the end of the checkpoint")
            data = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=offset).astype(np.float32)
            tensors[name] = torch.from_numpy(data.reshape(dims))
            offset += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"corrupt checkpoint: {e}") from e
    if offset != len(blob):
        raise LengthMismatchError(f"{len(blob) - offset} trailing bytes after the last tensor")
    return descriptor, tensors


def save_checkpoint(path: Union[str, Path], net: nn.Module, complete: bool = True, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(net, complete=complete, **extra))
    tmp.replace(path)
    logger.info(f"Saved {_kind_of(net)} checkpoint to {path} (complete={complete})")
    return path


def load_checkpoint(
    path: Union[str, Path],
    kind: Optional[str] = None,
    config: Optional[NetworkConfig] = None,
) -> Tuple[nn.Module, Dict[str, Any]]:
    """Rebuild a network from its checkpoint, validating the descriptor against `kind` and `config`."""
    descriptor, tensors = decode_checkpoint(Path(path).read_bytes())
    if kind is not None and descriptor.get("kind") != kind:
        raise ArchitectureMismatchError(f"{path} holds a {descriptor.get('kind')}, expected a {kind}")
    stored = NetworkConfig.model_validate(descriptor["network"])
    if config is not None and stored != config:
        raise ArchitectureMismatchError(f"{path} was built for {stored.model_dump()}, configured {config.model_dump()}")
    net = build_network(descriptor["kind"], stored)
    expected = {name: tuple(t.shape) for name, t in net.state_dict().items()}
    found = {name: tuple(t.shape) for name, t in tensors.items()}
    if expected != found:
        missing = sorted(set(expected) ^ set(found)) or [n for n in expected if expected[n] != found.get(n)]
        raise ArchitectureMismatchError(f"{path} parameters do not match the architecture: {missing[:5]}")
    net.load_state_dict(tensors)
    if not descriptor.get("complete", False):
        logger.warning(f"Checkpoint {path} is flagged incomplete (training did not finish)")
    return net, descriptor
