import asyncio
import random
import struct

import pytest
import torch
from fastapi.testclient import TestClient

from pxsg_core.checkpoint import save_checkpoint
from pxsg_core.constants import FrameType, ProtocolErrors
from pxsg_core.errors import DimensionMismatchError, ProtocolError, VolumeFormatError
from pxsg_core.networks import segment
from pxsg_core.protocol.client import (
    client_decode,
    client_encode,
    load_flows,
    proxy_segment,
    save_flows,
    segment_remote_async,
)
from pxsg_core.protocol.server import SegmentationServer
from pxsg_core.protocol.wire import (
    DeformedVolume,
    ErrorFrame,
    ProxyRequest,
    ProxyResponse,
    decode_body,
    decode_frame,
    encode_request,
    new_request_id,
    read_frame,
    seal,
    split_frame,
    write_frame,
)
from pxsg_core.settings import EndpointConfig
from pxsg_core.volume import FlowField, PrivateKey, Volume, crop_to, pad_to, serialize_volume

KNOWN_CODES = {
    ProtocolErrors.PAYLOAD_TOO_LARGE,
    ProtocolErrors.UNSUPPORTED_VERSION,
    ProtocolErrors.MALFORMED_FRAME,
    ProtocolErrors.INTERNAL_ERROR,
}


def _request(volume: Volume) -> ProxyRequest:
    return ProxyRequest(new_request_id(), seal(volume))


def _frame(frame_type: int, body: bytes) -> bytes:
    return struct.pack("<IB", len(body) + 1, frame_type) + body


async def _with_server(segmenter, config, scenario):
    server = SegmentationServer(segmenter, config)
    await server.start()
    try:
        return await scenario(server)
    finally:
        await server.stop()


def test_deformed_volume_only_comes_from_seal(random_volume):
    with pytest.raises(TypeError):
        DeformedVolume(random_volume())
    with pytest.raises(TypeError):
        ProxyRequest(new_request_id(), random_volume())
    assert seal(random_volume()).dims == (12, 14, 13)


def test_request_frame_decodes_to_the_same_message(random_volume):
    request = _request(random_volume())
    decoded = decode_frame(encode_request(request))
    assert decoded.request_id == request.request_id
    assert torch.equal(decoded.payload.volume.data, request.payload.volume.data)


def test_unsupported_version_keeps_the_request_id(random_volume):
    request_id = new_request_id()
    body = struct.pack("<H16s", 2, request_id) + serialize_volume(random_volume())
    with pytest.raises(ProtocolError) as info:
        decode_body(FrameType.REQUEST, body)
    assert info.value.code == ProtocolErrors.UNSUPPORTED_VERSION
    assert info.value.request_id == request_id


def test_oversized_frame_is_rejected_before_parsing():
    with pytest.raises(ProtocolError) as info:
        split_frame(_frame(FrameType.REQUEST, bytes(100)), max_payload=50)
    assert info.value.code == ProtocolErrors.PAYLOAD_TOO_LARGE


def test_handler_turns_malformed_bodies_into_error_frames(segmenter):
    server = SegmentationServer(segmenter)
    request_id = new_request_id()
    truncated = struct.pack("<H16s", 1, request_id) + b"PXSG\x01\x00"
    reply = decode_frame(asyncio.run(server.handle_frame(FrameType.REQUEST, truncated)))
    assert isinstance(reply, ErrorFrame)
    assert reply.code == ProtocolErrors.MALFORMED_FRAME
    assert reply.request_id == request_id
    assert server.frames_rejected == 1


def test_fuzzed_frames_always_get_a_typed_error(segmenter):
    server = SegmentationServer(segmenter)
    rng = random.Random(0)
    prefix = struct.pack("<H16s", 1, bytes(16)) + b"PXSG"

    async def fuzz():
        codes = set()
        for i in range(1000):
            noise = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
            body = prefix + noise if i % 2 else noise
            reply = decode_frame(await server.handle_frame(rng.randint(0, 5), body))
            assert isinstance(reply, ErrorFrame)
            codes.add(reply.code)
        return codes

    assert asyncio.run(fuzz()) <= KNOWN_CODES
    assert server.frames_rejected == 1000


def test_loopback_round_trip(segmenter, random_volume):
    volume = pad_to(random_volume(), (16, 16, 16))
    request = _request(volume)

    async def scenario(server):
        return await segment_remote_async(server.config.host, server.config.port, request, timeout=10)

    response = asyncio.run(_with_server(segmenter, EndpointConfig(port=0, model_version="v1"), scenario))
    assert response.request_id == request.request_id
    assert response.model_version == "v1"
    assert response.segmap.is_normalized()
    assert torch.allclose(response.segmap.soft, segment(segmenter, volume).soft, atol=1e-6)


def test_concurrent_requests_are_answered_independently(segmenter, random_volume):
    volumes = [pad_to(random_volume(seed=s), (16, 16, 16)) for s in range(10)]
    requests = [_request(v) for v in volumes]

    async def scenario(server):
        return await asyncio.gather(
            *(segment_remote_async(server.config.host, server.config.port, r, timeout=20) for r in requests)
        )

    responses = asyncio.run(_with_server(segmenter, EndpointConfig(port=0), scenario))
    for volume, request, response in zip(volumes, requests, responses):
        assert response.request_id == request.request_id
        assert torch.allclose(response.segmap.soft, segment(segmenter, volume).soft, atol=1e-6)


def test_malformed_frame_leaves_the_connection_open(segmenter, random_volume):
    good = _request(pad_to(random_volume(), (16, 16, 16)))
    bad_id = new_request_id()
    bad = _frame(FrameType.REQUEST, struct.pack("<H16s", 1, bad_id) + serialize_volume(random_volume())[:-7])

    async def scenario(server):
        reader, writer = await asyncio.open_connection(server.config.host, server.config.port)
        await write_frame(writer, bad)
        first = decode_body(*await read_frame(reader, timeout=10))
        await write_frame(writer, encode_request(good))
        second = decode_body(*await read_frame(reader, timeout=10))
        writer.close()
        await writer.wait_closed()
        return first, second

    first, second = asyncio.run(_with_server(segmenter, EndpointConfig(port=0), scenario))
    assert isinstance(first, ErrorFrame)
    assert first.code == ProtocolErrors.MALFORMED_FRAME
    assert first.request_id == bad_id
    assert isinstance(second, ProxyResponse)
    assert second.request_id == good.request_id


def test_wrong_dims_are_reported_not_segmented(segmenter, random_volume):
    request = _request(random_volume())

    async def scenario(server):
        return await segment_remote_async(server.config.host, server.config.port, request, timeout=10)

    with pytest.raises(ProtocolError) as info:
        asyncio.run(_with_server(segmenter, EndpointConfig(port=0), scenario))
    assert info.value.code == ProtocolErrors.MALFORMED_FRAME
    assert info.value.request_id == request.request_id


def test_payload_too_large_closes_the_connection(segmenter):
    async def scenario(server):
        reader, writer = await asyncio.open_connection(server.config.host, server.config.port)
        writer.write(struct.pack("<IB", 4096, FrameType.REQUEST))
        await writer.drain()
        reply = decode_body(*await read_frame(reader, timeout=10))
        after = await read_frame(reader, timeout=10)
        writer.close()
        await writer.wait_closed()
        return reply, after

    reply, after = asyncio.run(_with_server(segmenter, EndpointConfig(port=0, max_payload=1024), scenario))
    assert isinstance(reply, ErrorFrame)
    assert reply.code == ProtocolErrors.PAYLOAD_TOO_LARGE
    assert after is None


def test_no_key_or_raw_image_bytes_leave_the_client(shifting_generator, random_volume):
    x = random_volume(seed=9)
    key = PrivateKey(torch.full((4,), 1234.5678))
    encoded = client_encode(shifting_generator, x, key)
    wire = encode_request(encoded.request())
    assert key.values.numpy().tobytes() not in wire
    for row in (x.data[5, 5], x.data[0, 0], x.data[11, 13]):
        assert row.numpy().tobytes() not in wire
    assert not torch.equal(crop_to(encoded.deformed.volume, x.dims).data, x.data)


def test_identity_pipeline_matches_direct_segmentation(generator, segmenter, random_volume):
    x = random_volume()
    result = proxy_segment(generator, segmenter, x, PrivateKey.generate(4, seed=0))
    direct = crop_to(segment(segmenter, pad_to(x, (16, 16, 16))), x.dims)
    assert result.dims == x.dims
    assert torch.equal(result.soft, direct.soft)


def test_decode_with_identity_flow_returns_the_server_map(segmenter, random_volume):
    y_d = segment(segmenter, pad_to(random_volume(), (16, 16, 16)))
    assert torch.equal(client_decode(FlowField.zeros(y_d.dims), y_d).soft, y_d.soft)
    with pytest.raises(DimensionMismatchError):
        client_decode(FlowField.zeros((8, 8, 8)), y_d)


def test_flows_file_round_trip(tmp_path, shifting_generator, random_volume):
    encoded = client_encode(shifting_generator, random_volume(), PrivateKey.generate(4, seed=2))
    bundle = load_flows(save_flows(tmp_path / "flows.bin", encoded))
    assert bundle.request_id == encoded.request_id
    assert bundle.original_dims == (12, 14, 13)
    assert torch.equal(bundle.inverse_flow.vectors, encoded.inverse_flow.vectors)
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "flows.bin").read_bytes()[4:])
    with pytest.raises(VolumeFormatError):
        load_flows(tmp_path / "bad.bin")


def test_http_face_speaks_the_same_frames(tmp_path, monkeypatch, segmenter, random_volume):
    import main

    path = save_checkpoint(tmp_path / "s.ckpt", segmenter, complete=True, epoch=4)
    monkeypatch.setenv("PXSG_SEGMENTER_CKPT", str(path))
    monkeypatch.setenv("PXSG_MAX_PAYLOAD", str(64 * 1024))
    request = _request(pad_to(random_volume(), (16, 16, 16)))
    with TestClient(main.app) as client:
        health = client.get("/")
        assert health.status_code == 200
        assert health.json()["model_version"] == "s-epoch4"

        reply = client.post("/v1/segment", content=encode_request(request))
        assert reply.status_code == 200
        response = decode_frame(reply.content)
        assert isinstance(response, ProxyResponse)
        assert response.request_id == request.request_id

        garbled = client.post("/v1/segment", content=_frame(FrameType.REQUEST, b"\x01"))
        assert garbled.status_code == 200
        assert decode_frame(garbled.content).code == ProtocolErrors.MALFORMED_FRAME

        oversized = client.post("/v1/segment", content=bytes(128 * 1024))
        assert oversized.status_code == 413
        assert decode_frame(oversized.content).code == ProtocolErrors.PAYLOAD_TOO_LARGE
    assert main.segmentation_server is None
