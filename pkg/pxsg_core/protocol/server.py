# This file implements the segmentation server: it receives proxy volumes,
# runs the frozen segmenter on them and answers with the deformed soft
# segmentation. It never sees keys, flows or undistorted images.

import asyncio
import logging
from typing import Optional

import torch

from ..constants import ProtocolErrors, ProxyRoles
from ..errors import DimensionMismatchError, ProtocolError
from ..networks import SegmentationNet, segment
from ..settings import EndpointConfig
from .base import ProxyEndpoint
from .wire import ErrorFrame, Message, ProxyRequest, ProxyResponse, encode_error, read_frame, write_frame

logger = logging.getLogger(__name__)


class SegmentationServer(ProxyEndpoint):
    """Stateless request/response service around a read-only segmenter shared by all connections."""

    def __init__(self, segmenter: SegmentationNet, config: Optional[EndpointConfig] = None):
        super().__init__(ProxyRoles.SEGMENTATION_SERVER, ["segment_proxy_volume"])
        self.segmenter = segmenter.eval()
        for p in self.segmenter.parameters():
            p.requires_grad_(False)
        self.config = config or EndpointConfig()
        self._server: Optional[asyncio.Server] = None

    @property
    def model_version(self) -> str:
        return self.config.model_version

    async def on_message(self, message: Message) -> Message:
        if not isinstance(message, ProxyRequest):
            return await super().on_message(message)
        volume = message.payload.volume
        expected = tuple(self.segmenter.config.dims)
        if volume.dims != expected:
            raise ProtocolError(
                ProtocolErrors.MALFORMED_FRAME,
                f"proxy volume dims {volume.dims} do not match the served model {expected}",
                message.request_id,
            )
        try:
            segmap = await asyncio.to_thread(self._segment, volume)
        except DimensionMismatchError as e:
            raise ProtocolError(ProtocolErrors.MALFORMED_FRAME, str(e), message.request_id) from e
        return ProxyResponse(message.request_id, segmap, self.model_version)

    def _segment(self, volume):
        with torch.inference_mode():
            return segment(self.segmenter, volume)

    async def handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        logger.info(f"Connection from {peer}")
        try:
            while True:
                try:
                    frame = await read_frame(reader, self.config.max_payload, self.config.read_timeout)
                except ProtocolError as e:
                    # payload-too-large and a stream cut mid-frame leave no frame boundary to resync on
                    self.frames_rejected += 1
                    logger.warning(f"Closing connection from {peer}: {e.code} ({e.message})")
                    await write_frame(writer, encode_error(ErrorFrame(e.code, e.message)))
                    break
                except asyncio.TimeoutError:
                    logger.warning(f"Read timeout on connection from {peer}")
                    break
                if frame is None:
                    break
                reply = await self.handle_frame(*frame)
                await write_frame(writer, reply)
        except ConnectionError as e:
            logger.info(f"Connection from {peer} dropped: {type(e).__name__}")
        except Exception as e:
            logger.error(f"Unexpected failure on connection from {peer}: {e}", exc_info=True)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except Exception:
                pass

    async def start(self) -> asyncio.Server:
        await self.on_start()
        self._server = await asyncio.start_server(self.handle_connection, self.config.host, self.config.port)
        sockets = self._server.sockets or []
        if sockets:
            host, port = sockets[0].getsockname()[:2]
            self.config = self.config.model_copy(update={"host": host, "port": port})
        logger.info(f"Segmentation server listening on {self.config.host}:{self.config.port} (model {self.model_version})")
        return self._server

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        await self.on_stop()

    async def serve_forever(self) -> None:
        server = self._server or await self.start()
        try:
            async with server:
                await server.serve_forever()
        finally:
            await self.stop()


def serve(segmenter: SegmentationNet, config: Optional[EndpointConfig] = None) -> None:
    """Run the TCP service until interrupted."""
    server = SegmentationServer(segmenter, config)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        logger.info("Segmentation server interrupted")
