# Test-time proxy pipeline: keyed client, wire codec and segmentation server.

from .client import (
    EncodedVolume,
    FlowBundle,
    client_decode,
    client_encode,
    load_flows,
    proxy_segment,
    save_flows,
    segment_remote,
    segment_remote_async,
)
from .server import SegmentationServer, serve
from .wire import (
    DeformedVolume,
    ErrorFrame,
    ProxyRequest,
    ProxyResponse,
    decode_frame,
    encode_message,
    split_frame,
)

__all__ = [
    "DeformedVolume",
    "EncodedVolume",
    "ErrorFrame",
    "FlowBundle",
    "ProxyRequest",
    "ProxyResponse",
    "SegmentationServer",
    "client_decode",
    "client_encode",
    "decode_frame",
    "encode_message",
    "load_flows",
    "proxy_segment",
    "save_flows",
    "segment_remote",
    "segment_remote_async",
    "serve",
    "split_frame",
]
