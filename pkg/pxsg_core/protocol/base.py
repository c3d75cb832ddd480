# This file contains the base class for the parties of the proxy pipeline,
# providing common lifecycle logging, frame dispatch and error translation.

import logging
from typing import Any, Dict, Optional

from ..constants import ProtocolErrors
from ..errors import ProtocolError
from .wire import ErrorFrame, Message, decode_body, encode_error, encode_message

logger = logging.getLogger(__name__)


class ProxyEndpoint:
    """
    Base class for a party of the proxy segmentation pipeline.
    Subclasses implement `on_message` for the frame types they accept; the base
    turns every failure into a typed ERROR frame so no exception leaves a
    connection handler.
    """

    def __init__(self, endpoint_id: str, capabilities: list[str]):
        self.id = endpoint_id
        self.capabilities = capabilities
        self.frames_handled = 0
        self.frames_rejected = 0
        logger.info(f"Endpoint '{self.id}' initialized with capabilities: {', '.join(capabilities)}")

    async def on_start(self):
        """Called when the endpoint starts."""
        logger.info(f"Endpoint '{self.id}' has started.")

    async def on_stop(self):
        """Called when the endpoint stops."""
        logger.info(f"Endpoint '{self.id}' has stopped.")

    async def on_message(self, message: Message) -> Message:
        raise ProtocolError(ProtocolErrors.MALFORMED_FRAME, f"endpoint '{self.id}' does not accept {type(message).__name__}")

    async def handle_frame(self, frame_type: int, body: bytes) -> bytes:
        """Decode one frame body, dispatch it and encode the reply (a response or an ERROR frame)."""
        request_id: Optional[bytes] = None
        try:
            message = decode_body(frame_type, body)
            request_id = getattr(message, "request_id", None)
            reply = await self.on_message(message)
            self.frames_handled += 1
            return encode_message(reply)
        except ProtocolError as e:
            self.frames_rejected += 1
            logger.warning(f"Endpoint '{self.id}' rejected a frame: {e.code} ({e.message})")
            return encode_error(ErrorFrame(e.code, e.message, e.request_id or request_id))
        except Exception as e:
            self.frames_rejected += 1
            logger.error(f"Endpoint '{self.id}' failed on frame type {frame_type}: {e}", exc_info=True)
            return encode_error(ErrorFrame(ProtocolErrors.INTERNAL_ERROR, str(e) or type(e).__name__, request_id))

    def status(self) -> Dict[str, Any]:
        return {
            "status": "ok",
            "endpoint": self.id,
            "capabilities": self.capabilities,
            "frames_handled": self.frames_handled,
            "frames_rejected": self.frames_rejected,
        }
