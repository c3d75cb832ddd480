# This file defines the binary wire format between the proxy client and the
# segmentation server. Every message is one frame:
#
#   u32 length (bytes that follow) | u8 frame type | body
#
#   REQUEST  body: u16 version | 16-byte request id | PXSG volume blob
#   RESPONSE body: u16 version | 16-byte request id | u16 n | model version (n bytes utf-8) | PXSG segmap blob
#   ERROR    body: 16-byte request id (zeros if unknown) | u16 n | code | u32 m | message
#
# All integers are little-endian. Volumes and segmentation maps are embedded
# in the raw PXSG container format from `volume`.

import asyncio
import logging
import struct
import uuid
from dataclasses import dataclass
from typing import Optional, Tuple, Union

from ..constants import Defaults, FrameType, ProtocolErrors
from ..errors import ProtocolError, VolumeFormatError
from ..volume import SegMap, Volume, deserialize_volume, serialize_volume

logger = logging.getLogger(__name__)

REQUEST_ID_BYTES = 16
_LENGTH = struct.Struct("<I")
_HEAD = struct.Struct("<B")
_VERSION_ID = struct.Struct(f"<H{REQUEST_ID_BYTES}s")
_NO_ID = bytes(REQUEST_ID_BYTES)

_SEAL = object()


class DeformedVolume:
    """A volume that has been through the client warp step.

    Only `seal` (called by the client encoder and by the request decoder, whose
    input already crossed the wire) can build one, so a ProxyRequest cannot be
    made from an undistorted volume by accident.
    """

    __slots__ = ("volume",)

    def __init__(self, volume: Volume, _token=None):
        if _token is not _SEAL:
            raise TypeError("DeformedVolume is only produced by client_encode")
        if not isinstance(volume, Volume):
            raise TypeError(f"expected a Volume, got {type(volume).__name__}")
        self.volume = volume

    @property
    def dims(self):
        return self.volume.dims

    def __repr__(self) -> str:
        return f"DeformedVolume(dims={self.dims})"


def seal(volume: Volume) -> DeformedVolume:
    return DeformedVolume(volume, _SEAL)


def new_request_id() -> bytes:
    return uuid.uuid4().bytes


def _check_id(request_id: bytes) -> bytes:
    if not isinstance(request_id, (bytes, bytearray)) or len(request_id) != REQUEST_ID_BYTES:
        raise ValueError(f"request id must be {REQUEST_ID_BYTES} bytes")
    return bytes(request_id)


@dataclass(frozen=True)
class ProxyRequest:
    request_id: bytes
    payload: DeformedVolume
    version: int = Defaults.PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "request_id", _check_id(self.request_id))
        if not isinstance(self.payload, DeformedVolume):
            raise TypeError("ProxyRequest payload must be the output of client_encode")


@dataclass(frozen=True)
class ProxyResponse:
    request_id: bytes
    segmap: SegMap
    model_version: str = "unversioned"
    version: int = Defaults.PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "request_id", _check_id(self.request_id))


@dataclass(frozen=True)
class ErrorFrame:
    code: str
    message: str
    request_id: Optional[bytes] = None


Message = Union[ProxyRequest, ProxyResponse, ErrorFrame]


def _frame(frame_type: int, body: bytes) -> bytes:
    return _LENGTH.pack(len(body) + _HEAD.size) + _HEAD.pack(frame_type) + body


def encode_request(request: ProxyRequest) -> bytes:
    body = _VERSION_ID.pack(request.version, request.request_id) + serialize_volume(request.payload.volume)
    return _frame(FrameType.REQUEST, body)


def encode_response(response: ProxyResponse) -> bytes:
    version = response.model_version.encode("utf-8")
    body = (
        _VERSION_ID.pack(response.version, response.request_id)
        + struct.pack("<H", len(version))
        + version
        + serialize_volume(response.segmap)
    )
    return _frame(FrameType.RESPONSE, body)


def encode_error(error: Union[ErrorFrame, ProtocolError]) -> bytes:
    code = error.code.encode("utf-8")
    message = error.message.encode("utf-8")
    body = (
        (error.request_id or _NO_ID)
        + struct.pack("<H", len(code))
        + code
        + struct.pack("<I", len(message))
        + message
    )
    return _frame(FrameType.ERROR, body)


def encode_message(message: Message) -> bytes:
    if isinstance(message, ProxyRequest):
        return encode_request(message)
    if isinstance(message, ProxyResponse):
        return encode_response(message)
    return encode_error(message)


def _malformed(message: str, request_id: Optional[bytes] = None) -> ProtocolError:
    return ProtocolError(ProtocolErrors.MALFORMED_FRAME, message, request_id)


def _versioned(body: bytes) -> Tuple[int, bytes]:
    if len(body) < _VERSION_ID.size:
        raise _malformed(f"body of {len(body)} bytes is shorter than version and request id")
    version, request_id = _VERSION_ID.unpack_from(body)
    if version != Defaults.PROTOCOL_VERSION:
        raise ProtocolError(
            ProtocolErrors.UNSUPPORTED_VERSION,
            f"protocol version {version} not supported (expected {Defaults.PROTOCOL_VERSION})",
            request_id,
        )
    return version, request_id


def decode_body(frame_type: int, body: bytes) -> Message:
    """Parse a frame body; any defect raises ProtocolError carrying the request id when it was readable."""
    if frame_type == FrameType.REQUEST:
        version, request_id = _versioned(body)
        try:
            volume = deserialize_volume(bytes(body[_VERSION_ID.size:]))
        except (VolumeFormatError, ValueError) as e:
            raise _malformed(f"request payload: {e}", request_id) from e
        if not isinstance(volume, Volume):
            raise _malformed("request payload is not a scalar volume", request_id)
        return ProxyRequest(request_id, seal(volume), version)
    if frame_type == FrameType.RESPONSE:
        version, request_id = _versioned(body)
        offset = _VERSION_ID.size
        try:
            (n,) = struct.unpack_from("<H", body, offset)
            model_version = bytes(body[offset + 2:offset + 2 + n]).decode("utf-8")
            segmap = deserialize_volume(bytes(body[offset + 2 + n:]))
        except (struct.error, UnicodeDecodeError, VolumeFormatError, ValueError) as e:
            raise _malformed(f"response payload: {e}", request_id) from e
        if not isinstance(segmap, SegMap):
            raise _malformed("response payload is not a segmentation map", request_id)
        return ProxyResponse(request_id, segmap, model_version, version)
    if frame_type == FrameType.ERROR:
        try:
            request_id = bytes(body[:REQUEST_ID_BYTES])
            if len(request_id) != REQUEST_ID_BYTES:
                raise struct.error("short request id")
            offset = REQUEST_ID_BYTES
            (n,) = struct.unpack_from("<H", body, offset)
            code = bytes(body[offset + 2:offset + 2 + n]).decode("utf-8")
            offset += 2 + n
            (m,) = struct.unpack_from("<I", body, offset)
            message = bytes(body[offset + 4:offset + 4 + m]).decode("utf-8")
            if offset + 4 + m != len(body):
                raise struct.error("trailing bytes")
        except (struct.error, UnicodeDecodeError) as e:
            raise _malformed(f"error frame: {e}") from e
        return ErrorFrame(code, message, None if request_id == _NO_ID else request_id)
    raise _malformed(f"unknown frame type {frame_type}")


def split_frame(data: bytes, max_payload: int = Defaults.MAX_PAYLOAD) -> Tuple[int, bytes]:
    """(frame type, body) of exactly one complete frame held in memory."""
    if len(data) < _LENGTH.size + _HEAD.size:
        raise _malformed(f"frame of {len(data)} bytes is shorter than its header")
    (length,) = _LENGTH.unpack_from(data)
    if length > max_payload:
        raise ProtocolError(ProtocolErrors.PAYLOAD_TOO_LARGE, f"frame of {length} bytes exceeds {max_payload}")
    if length != len(data) - _LENGTH.size or length < _HEAD.size:
        raise _malformed(f"length field says {length} bytes, frame carries {len(data) - _LENGTH.size}")
    (frame_type,) = _HEAD.unpack_from(data, _LENGTH.size)
    return frame_type, data[_LENGTH.size + _HEAD.size:]


def decode_frame(data: bytes, max_payload: int = Defaults.MAX_PAYLOAD) -> Message:
    return decode_body(*split_frame(data, max_payload))


async def read_frame(
    reader: asyncio.StreamReader,
    max_payload: int = Defaults.MAX_PAYLOAD,
    timeout: Optional[float] = Defaults.READ_TIMEOUT,
) -> Optional[Tuple[int, bytes]]:
    """Next (frame type, body) from a stream, or None on a clean end of stream.

    Raises ProtocolError(payload-too-large) before reading an oversized body;
    the stream position is then undefined and the caller must close it.
    """
    try:
        head = await asyncio.wait_for(reader.readexactly(_LENGTH.size), timeout)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise _malformed("stream ended inside a length field") from e
    (length,) = _LENGTH.unpack(head)
    if length > max_payload:
        raise ProtocolError(ProtocolErrors.PAYLOAD_TOO_LARGE, f"frame of {length} bytes exceeds {max_payload}")
    if length < _HEAD.size:
        raise _malformed("zero-length frame")
    try:
        data = await asyncio.wait_for(reader.readexactly(length), timeout)
    except asyncio.IncompleteReadError as e:
        raise _malformed(f"stream ended after {len(e.partial)} of {length} frame bytes") from e
    return data[0], data[_HEAD.size:]


async def write_frame(writer: asyncio.StreamWriter, frame: bytes) -> None:
    writer.write(frame)
    await writer.drain()
