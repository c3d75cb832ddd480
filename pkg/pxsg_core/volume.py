# Dense grid containers shared by every module, plus the raw PXSG volume format.
#
# Index convention: a grid is addressed (u, v, w) = (H, W, D) and stored
# C-contiguous, so w varies fastest in memory. Multi-channel containers put the
# channel axis first: (C, H, W, D). Flow channels are the displacements along
# (u, v, w) in voxel units.

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .constants import Defaults, FileFormat, VolumeKind
from .errors import (
    DimensionMismatchError,
    LabelRangeError,
    LengthMismatchError,
    NonFiniteError,
    VolumeFormatError,
)

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]

_HEADER = struct.Struct("<4sHB4I")


def _check_finite(tensor: torch.Tensor, what: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


def _check_dims(dims: Sequence[int], what: str) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise DimensionMismatchError(f"{what} needs three positive dims, got {dims}")
    return dims


@dataclass(frozen=True)
class Volume:
    """A scalar 3-D grid of shape (H, W, D)."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 3:
            raise DimensionMismatchError(f"Volume expects (H, W, D), got shape {tuple(self.data.shape)}")
        _check_dims(self.data.shape, "Volume")
        if not self.data.is_floating_point():
            object.__setattr__(self, "data", self.data.float())
        _check_finite(self.data, "Volume")

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)

    def is_normalized(self) -> bool:
        return bool((self.data >= 0).all() and (self.data <= 1).all())


@dataclass(frozen=True)
class SegMap:
    """Soft class map of shape (C, H, W, D); the discrete view is its argmax."""
    soft: torch.Tensor

    def __post_init__(self):
        if self.soft.dim() != 4 or self.soft.shape[0] < 2:
            raise DimensionMismatchError(f"SegMap expects (C>=2, H, W, D), got shape {tuple(self.soft.shape)}")
        _check_dims(self.soft.shape[1:], "SegMap")
        _check_finite(self.soft, "SegMap")
        tol = Defaults.SEGMAP_SUM_TOLERANCE
        if (self.soft < -tol).any() or (self.soft > 1 + tol).any():
            raise ValueError("SegMap channel values must lie in [0, 1]")

    @property
    def dims(self) -> Dims:
        return tuple(self.soft.shape[1:])

    @property
    def classes(self) -> int:
        return int(self.soft.shape[0])

    def labels(self) -> torch.Tensor:
        return argmax(self)

    def is_normalized(self, tolerance: float = Defaults.SEGMAP_SUM_TOLERANCE) -> bool:
        return bool(((self.soft.sum(dim=0) - 1).abs() <= tolerance).all())

    @classmethod
    def from_labels(cls, labels: torch.Tensor, classes: int) -> "SegMap":
        return one_hot(labels, classes)


@dataclass(frozen=True)
class FlowField:
    """Per-voxel displacement (3, H, W, D) in voxel units along (u, v, w)."""
    vectors: torch.Tensor

    def __post_init__(self):
        if self.vectors.dim() != 4 or self.vectors.shape[0] != 3:
            raise DimensionMismatchError(f"FlowField expects (3, H, W, D), got shape {tuple(self.vectors.shape)}")
        _check_dims(self.vectors.shape[1:], "FlowField")
        _check_finite(self.vectors, "FlowField")

    @property
    def dims(self) -> Dims:
        return tuple(self.vectors.shape[1:])

    @classmethod
    def zeros(cls, dims: Sequence[int], dtype=torch.float32) -> "FlowField":
        return cls(torch.zeros((3, *_check_dims(dims, "FlowField")), dtype=dtype))

    @classmethod
    def constant(cls, dims: Sequence[int], displacement: Sequence[float], dtype=torch.float32) -> "FlowField":
        vec = torch.tensor(list(displacement), dtype=dtype).view(3, 1, 1, 1)
        return cls(vec.expand(3, *_check_dims(dims, "FlowField")).clone())


@dataclass(frozen=True)
class PrivateKey:
    """Client-held random vector conditioning the generator."""
    values: torch.Tensor
    seed_id: Optional[int] = None

    def __post_init__(self):
        if self.values.dim() != 1 or self.values.numel() == 0:
            raise DimensionMismatchError(f"PrivateKey expects a non-empty vector, got shape {tuple(self.values.shape)}")
        _check_finite(self.values, "PrivateKey")

    def __len__(self) -> int:
        return int(self.values.numel())

    def __repr__(self) -> str:
        return f"PrivateKey(M={len(self)}, seed_id={self.seed_id})"

    def check_length(self, key_dim: int) -> None:
        if len(self) != key_dim:
            raise DimensionMismatchError(f"key has length {len(self)}, expected M={key_dim}")

    def to_hex(self) -> str:
        return self.values.to(torch.float32).numpy().astype("<f4").tobytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "PrivateKey":
        raw = bytes.fromhex(text.strip())
        if len(raw) == 0 or len(raw) % 4:
            raise VolumeFormatError(f"key hex must encode float32 values, got {len(raw)} bytes")
        return cls(torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float32)))

    @classmethod
    def generate(cls, key_dim: int = Defaults.KEY_DIM, seed: Optional[int] = None) -> "PrivateKey":
        """Draw k ~ N(0, I_M); a fresh OS-entropy seed is used when none is given."""
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % (2 ** 63))
        gen = torch.Generator().manual_seed(seed)
        return cls(torch.randn(key_dim, generator=gen), seed_id=seed)


@dataclass(frozen=True)
class Scan:
    scan_id: str
    volume: Volume
    segmap: SegMap


@dataclass(frozen=True)
class SubjectRecord:
    """All acquisitions of one subject; scans share dims."""
    subject_id: str
    scans: Tuple[Scan, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "scans", tuple(self.scans))
        if not self.scans:
            raise ValueError(f"subject '{self.subject_id}' has no scans")
        dims = {s.volume.dims for s in self.scans} | {s.segmap.dims for s in self.scans}
        if len(dims) != 1:
            raise DimensionMismatchError(f"subject '{self.subject_id}' scans disagree on dims: {sorted(dims)}")

    @property
    def dims(self) -> Dims:
        return self.scans[0].volume.dims


def one_hot(labels: torch.Tensor, classes: int) -> SegMap:
    """Discrete (H, W, D) labels to an exactly one-hot SegMap."""
    if labels.dim() != 3:
        raise DimensionMismatchError(f"labels expect (H, W, D), got shape {tuple(labels.shape)}")
    flat = labels.reshape(-1).long()
    bad = ((flat < 0) | (flat >= classes)).nonzero()
    if bad.numel():
        index = int(bad[0])
        raise LabelRangeError(index, int(flat[index]), classes)
    soft = torch.nn.functional.one_hot(labels.long(), classes).permute(3, 0, 1, 2)
    return SegMap(soft.to(torch.float32).contiguous())


def argmax(segmap: Union[SegMap, torch.Tensor]) -> torch.Tensor:
    """Per-voxel label; ties go to the lowest class index."""
    soft = segmap.soft if isinstance(segmap, SegMap) else segmap
    return torch.argmax(soft, dim=-4)


def serialize_volume(obj: Union[Volume, SegMap, FlowField], discrete: bool = False) -> bytes:
    """Encode a container in the PXSG raw format (payload is little-endian float32, or u16 labels)."""
    if isinstance(obj, Volume):
        kind, channels, payload = VolumeKind.VOLUME, 1, obj.data.unsqueeze(0)
    elif isinstance(obj, SegMap):
        kind = VolumeKind.SEGMAP_DISCRETE if discrete else VolumeKind.SEGMAP_SOFT
        channels, payload = obj.classes, obj.soft
    elif isinstance(obj, FlowField):
        kind, channels, payload = VolumeKind.FLOW, 3, obj.vectors
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    h, w, d = obj.dims
    header = _HEADER.pack(FileFormat.VOLUME_MAGIC, FileFormat.VOLUME_VERSION, kind, h, w, d, channels)
    if kind == VolumeKind.SEGMAP_DISCRETE:
        if channels > np.iinfo(np.uint16).max:
            raise VolumeFormatError(f"{channels} classes do not fit u16 labels")
        body = argmax(obj).numpy().astype("<u2").tobytes()
    else:
        body = payload.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
    return header + body


def peek_header(blob: bytes) -> Tuple[int, Dims, int]:
    """(kind, dims, channels) of a serialized container, validating magic and version."""
    if len(blob) < _HEADER.size:
        raise LengthMismatchError(f"need {_HEADER.size} header bytes, got {len(blob)}")
    magic, version, kind, h, w, d, channels = _HEADER.unpack_from(blob)
    if magic != FileFormat.VOLUME_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}")
    if version != FileFormat.VOLUME_VERSION:
        raise VolumeFormatError(f"unsupported volume format version {version}")
    if kind not in VolumeKind.ALL:
        raise VolumeFormatError(f"unknown volume kind {kind}")
    if min(h, w, d, channels) == 0:
        raise VolumeFormatError(f"zero dimension in header {(h, w, d, channels)}")
    return kind, (h, w, d), channels


def deserialize_volume(blob: bytes) -> Union[Volume, SegMap, FlowField]:
    kind, dims, channels = peek_header(blob)
    voxels = dims[0] * dims[1] * dims[2]
    itemsize = 2 if kind == VolumeKind.SEGMAP_DISCRETE else 4
    count = voxels if kind == VolumeKind.SEGMAP_DISCRETE else voxels * channels
    expected = _HEADER.size + count * itemsize
    if len(blob) != expected:
        raise LengthMismatchError(f"payload of {len(blob)} bytes, header declares {expected}")
    body = memoryview(blob)[_HEADER.size:]
    if kind == VolumeKind.SEGMAP_DISCRETE:
        labels = np.frombuffer(body, dtype="<u2").astype(np.int64).reshape(dims)
        return one_hot(torch.from_numpy(labels), channels)
    values = torch.from_numpy(np.frombuffer(body, dtype="<f4").astype(np.float32).reshape((channels, *dims)))
    if kind == VolumeKind.VOLUME:
        if channels != 1:
            raise VolumeFormatError(f"volume kind with {channels} channels")
        return Volume(values[0])
    if kind == VolumeKind.FLOW:
        if channels != 3:
            raise VolumeFormatError(f"flow kind with {channels} channels")
        return FlowField(values)
    return SegMap(values)


def write_volume_file(
    path: Union[str, Path],
    obj: Union[Volume, SegMap, FlowField],
    sidecar: Optional[Dict[str, Any]] = None,
    discrete: bool = False,
) -> Path:
    """Write a PXSG file and, when metadata is given, its `<name>.json` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_volume(obj, discrete=discrete))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_volume_file(path: Union[str, Path]) -> Union[Volume, SegMap, FlowField]:
    return deserialize_volume(Path(path).read_bytes())


def read_sidecar(path: Union[str, Path]) -> Optional[Dict[str, Any]]:
    meta = sidecar_path(Path(path))
    return json.loads(meta.read_text()) if meta.exists() else None


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + FileFormat.SIDECAR_SUFFIX)


def required_padding(dims: Sequence[int], multiple: int) -> Dims:
    return tuple((-int(d)) % multiple for d in dims)


def pad_tensor(tensor: torch.Tensor, dims: Sequence[int], value: float = 0.0) -> torch.Tensor:
    """Pad the trailing three axes at their high end up to `dims`."""
    pads = []
    for have, want in zip(reversed(tensor.shape[-3:]), reversed(tuple(dims))):
        if want < have:
            raise DimensionMismatchError(f"cannot pad {tuple(tensor.shape[-3:])} down to {tuple(dims)}")
        pads += [0, want - have]
    if not any(pads):
        return tensor
    return torch.nn.functional.pad(tensor, pads, value=value)


def crop_tensor(tensor: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    h, w, d = dims
    return tensor[..., :h, :w, :d]


def pad_to_multiple(obj, multiple: int = Defaults.NETWORK_MULTIPLE):
    """Zero-pad a container so every axis divides `multiple`; segmentations pad with background."""
    dims = tuple(a + p for a, p in zip(obj.dims, required_padding(obj.dims, multiple)))
    return pad_to(obj, dims)


def pad_to(obj, dims: Sequence[int]):
    if isinstance(obj, Volume):
        return Volume(pad_tensor(obj.data, dims))
    if isinstance(obj, FlowField):
        return FlowField(pad_tensor(obj.vectors, dims))
    if isinstance(obj, SegMap):
        background = pad_tensor(obj.soft[:1], dims, value=1.0)
        rest = pad_tensor(obj.soft[1:], dims)
        return SegMap(torch.cat([background, rest], dim=0))
    raise TypeError(f"cannot pad {type(obj).__name__}")


def crop_to(obj, dims: Sequence[int]):
    if isinstance(obj, Volume):
        return Volume(crop_tensor(obj.data, dims).contiguous())
    if isinstance(obj, FlowField):
        return FlowField(crop_tensor(obj.vectors, dims).contiguous())
    if isinstance(obj, SegMap):
        return SegMap(crop_tensor(obj.soft, dims).contiguous())
    raise TypeError(f"cannot crop {type(obj).__name__}")
