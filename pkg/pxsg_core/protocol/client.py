# This file implements the client half of the proxy pipeline: keyed warping
# of the input before anything is sent, the network round trip, and unwarping
# of the returned segmentation with the locally retained inverse flow.

import asyncio
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

from ..constants import Defaults, FileFormat, ProtocolErrors, ProxyRoles
from ..errors import DimensionMismatchError, ProtocolError, VolumeFormatError
from ..networks import GeneratorNet, SegmentationNet, generate_flows, segment
from ..settings import parse_listen
from ..volume import FlowField, PrivateKey, SegMap, Volume, crop_to, deserialize_volume, pad_to, serialize_volume
from ..warp import warp
from .wire import (
    REQUEST_ID_BYTES,
    DeformedVolume,
    ErrorFrame,
    ProxyRequest,
    ProxyResponse,
    decode_body,
    encode_request,
    new_request_id,
    read_frame,
    seal,
    write_frame,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodedVolume:
    """Output of the client warp step. Only `deformed` may leave the client."""
    request_id: bytes
    deformed: DeformedVolume
    forward_flow: FlowField
    inverse_flow: FlowField
    original_dims: Tuple[int, int, int]

    def request(self) -> ProxyRequest:
        return ProxyRequest(self.request_id, self.deformed)


def client_encode(
    generator: GeneratorNet, x: Volume, key: PrivateKey, request_id: Optional[bytes] = None
) -> EncodedVolume:
    """x_d = warp(x, f_k) on the generator's grid; x is zero-padded at its high end to fit."""
    dims = tuple(generator.config.dims)
    if any(a > b for a, b in zip(x.dims, dims)):
        raise DimensionMismatchError(f"volume dims {x.dims} exceed the generator grid {dims}")
    padded = pad_to(x, dims)
    forward_flow, inverse_flow = generate_flows(generator, padded, key)
    deformed = warp(padded, forward_flow)
    logger.info(f"{ProxyRoles.CLIENT}: encoded a {x.dims} volume on grid {dims}")
    return EncodedVolume(request_id or new_request_id(), seal(deformed), forward_flow, inverse_flow, x.dims)


def client_decode(inverse_flow: FlowField, y_d: SegMap, original_dims=None) -> SegMap:
    """y_hat = warp(y_d, f_inv), cropped back to the original grid; `.labels()` gives the discrete map."""
    if y_d.dims != inverse_flow.dims:
        raise DimensionMismatchError(f"segmentation dims {y_d.dims} do not match the stored flow {inverse_flow.dims}")
    y_hat = warp(y_d, inverse_flow)
    if original_dims is not None and tuple(original_dims) != y_hat.dims:
        y_hat = crop_to(y_hat, original_dims)
    return y_hat


def proxy_segment(generator: GeneratorNet, segmenter: SegmentationNet, x: Volume, key: PrivateKey) -> SegMap:
    """The whole pipeline in-process: encode, segment the proxy volume, decode."""
    encoded = client_encode(generator, x, key)
    y_d = segment(segmenter, encoded.deformed.volume)
    return client_decode(encoded.inverse_flow, y_d, encoded.original_dims)


async def segment_remote_async(
    host: str,
    port: int,
    request: ProxyRequest,
    timeout: float = Defaults.READ_TIMEOUT,
    max_payload: int = Defaults.MAX_PAYLOAD,
) -> ProxyResponse:
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        await write_frame(writer, encode_request(request))
        frame = await read_frame(reader, max_payload, timeout)
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass
    if frame is None:
        raise ProtocolError(ProtocolErrors.MALFORMED_FRAME, "server closed the connection without replying", request.request_id)
    reply = decode_body(*frame)
    if isinstance(reply, ErrorFrame):
        raise ProtocolError(reply.code, reply.message, reply.request_id)
    if not isinstance(reply, ProxyResponse):
        raise ProtocolError(ProtocolErrors.MALFORMED_FRAME, "server answered with a request frame", request.request_id)
    if reply.request_id != request.request_id:
        raise ProtocolError(ProtocolErrors.MALFORMED_FRAME, "response id does not match the request", request.request_id)
    return reply


def segment_remote(address: str, request: ProxyRequest, timeout: float = Defaults.READ_TIMEOUT) -> ProxyResponse:
    host, port = parse_listen(address)
    response = asyncio.run(segment_remote_async(host, port, request, timeout))
    logger.info(f"{ProxyRoles.CLIENT}: received segmentation from {address} (model {response.model_version})")
    return response


# flows.bin: "PXFL" | u16 version | 16-byte request id | u32 * 3 original dims
#            | u32 n | forward flow blob | u32 m | inverse flow blob
_FLOWS_HEAD = struct.Struct(f"<4sH{REQUEST_ID_BYTES}s3I")


def save_flows(path: Union[str, Path], encoded: EncodedVolume) -> Path:
    """Keep both flows and the request id client-side so decode does not need the generator."""
    forward = serialize_volume(encoded.forward_flow)
    inverse = serialize_volume(encoded.inverse_flow)
    blob = (
        _FLOWS_HEAD.pack(FileFormat.FLOWS_MAGIC, FileFormat.FLOWS_VERSION, encoded.request_id, *encoded.original_dims)
        + struct.pack("<I", len(forward))
        + forward
        + struct.pack("<I", len(inverse))
        + inverse
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


@dataclass(frozen=True)
class FlowBundle:
    request_id: bytes
    forward_flow: FlowField
    inverse_flow: FlowField
    original_dims: Tuple[int, int, int]


def load_flows(path: Union[str, Path]) -> FlowBundle:
    blob = Path(path).read_bytes()
    try:
        magic, version, request_id, h, w, d = _FLOWS_HEAD.unpack_from(blob)
        if magic != FileFormat.FLOWS_MAGIC:
            raise VolumeFormatError(f"bad flows magic {magic!r}")
        if version != FileFormat.FLOWS_VERSION:
            raise VolumeFormatError(f"unsupported flows version {version}")
        offset = _FLOWS_HEAD.size
        flows = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", blob, offset)
            flows.append(deserialize_volume(blob[offset + 4:offset + 4 + n]))
            offset += 4 + n
    except struct.error as e:
        raise VolumeFormatError(f"truncated flows file {path}: {e}") from e
    if offset != len(blob) or not all(isinstance(f, FlowField) for f in flows):
        raise VolumeFormatError(f"{path} does not hold exactly two flow fields")
    return FlowBundle(request_id, flows[0], flows[1], (h, w, d))
