# Exception hierarchy shared by every module of the proxy segmentation system.

from typing import Optional, Tuple


class ProxySegError(Exception):
    """Root of all errors raised by pxsg_core."""


class DimensionMismatchError(ProxySegError, ValueError):
    """Two grids that must agree in shape (or class count) do not."""


class NonFiniteError(ProxySegError, ValueError):
    """A tensor that must be finite contains NaN or Inf."""


class LabelRangeError(ProxySegError, ValueError):
    def __init__(self, voxel_index: int, label: int, classes: int):
        super().__init__(f"label {label} at voxel {voxel_index} is outside [0, {classes})")
        self.voxel_index = voxel_index
        self.label = label
        self.classes = classes


class VolumeFormatError(ProxySegError, ValueError):
    """Bad magic, unknown version or unknown kind in a serialized container."""


class LengthMismatchError(VolumeFormatError):
    """Payload is shorter or longer than its header declares."""


class ArchitectureMismatchError(ProxySegError, ValueError):
    """A checkpoint descriptor does not match the configured architecture."""


class IndivisibleDimsError(ProxySegError, ValueError):
    def __init__(self, dims: Tuple[int, ...], multiple: int, padding: Tuple[int, ...]):
        super().__init__(
            f"dims {tuple(dims)} must be divisible by {multiple}; pad by {tuple(padding)} voxels"
        )
        self.dims = tuple(dims)
        self.multiple = multiple
        self.padding = tuple(padding)


class UnsatisfiablePairsError(ProxySegError, ValueError):
    def __init__(self, deficient: str, detail: str):
        super().__init__(f"cannot sample {deficient} pairs: {detail}")
        self.deficient = deficient


class TrainingDivergedError(ProxySegError, RuntimeError):
    def __init__(self, term: str, batch_index: int):
        super().__init__(f"non-finite '{term}' loss at batch {batch_index}; step aborted")
        self.term = term
        self.batch_index = batch_index


class ProtocolError(ProxySegError):
    def __init__(self, code: str, message: str, request_id: Optional[bytes] = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.request_id = request_id
