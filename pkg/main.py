# This is the main FastAPI application file. It exposes the segmentation
# server over HTTP: the request and response bodies are the same binary
# frames the TCP service speaks, so proxy clients can use either transport.

from contextlib import asynccontextmanager
from dotenv import load_dotenv # Used to load environment variables from .env
import os
import logging
from typing import Optional

from fastapi import FastAPI, HTTPException, Request, Response
from pydantic import BaseModel

# Load environment variables from .env file at the start
load_dotenv()

logging.basicConfig(
    level=os.getenv("PXSG_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
)
logger = logging.getLogger(__name__)

from pxsg_core import initialize_proxy_system, proxy_networks
from pxsg_core.constants import ProtocolErrors
from pxsg_core.errors import ProtocolError
from pxsg_core.networks import NetworkKinds
from pxsg_core.protocol.server import SegmentationServer
from pxsg_core.protocol.wire import ErrorFrame, encode_error, split_frame
from pxsg_core.settings import EndpointConfig

FRAME_MEDIA_TYPE = "application/octet-stream"
FRAME_HEADER_BYTES = 5  # u32 length + u8 type

# Set by the lifespan handler once the segmenter checkpoint is loaded
segmentation_server: Optional[SegmentationServer] = None


class HealthResponse(BaseModel):
    """Basic health check payload."""
    status: str
    endpoint: str
    model_version: str
    frames_handled: int
    frames_rejected: int


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Loads the frozen segmenter on startup and releases it on shutdown.
    """
    global segmentation_server
    logger.info("FastAPI app startup: loading segmentation model...")
    try:
        config, networks = initialize_proxy_system(EndpointConfig.from_env())
        segmentation_server = SegmentationServer(networks[NetworkKinds.SEGMENTER], config)
        await segmentation_server.on_start()
    except Exception as e:
        logger.critical(f"Failed to initialize the segmentation server: {e}", exc_info=True)
        raise RuntimeError(f"Backend startup failed: {e}")

    yield

    logger.info("FastAPI app shutdown: releasing segmentation model...")
    if segmentation_server:
        await segmentation_server.on_stop()
        segmentation_server = None
        proxy_networks.clear()
    else:
        logger.warning("Segmentation server not initialized during shutdown.")


app = FastAPI(
    title="Proxy Segmentation Server",
    description="Segments identity-obfuscated proxy volumes; keys and inverse flows never leave the client.",
    version="1.0.0",
    lifespan=lifespan,
)


@app.get("/", response_model=HealthResponse)
async def read_root():
    """Root endpoint for a basic health check."""
    if segmentation_server is None:
        raise HTTPException(status_code=503, detail="Segmentation model not loaded. Please check backend logs for startup errors.")
    status = segmentation_server.status()
    return HealthResponse(
        status=status["status"],
        endpoint=status["endpoint"],
        model_version=segmentation_server.model_version,
        frames_handled=status["frames_handled"],
        frames_rejected=status["frames_rejected"],
    )


@app.post("/v1/segment")
async def segment_proxy(request: Request):
    """
    Accepts one REQUEST frame as the raw body and answers with a RESPONSE or
    ERROR frame. Protocol failures are reported in-band as ERROR frames with
    status 200, like the TCP service; only an unavailable model is an HTTP error.
    """
    if segmentation_server is None:
        raise HTTPException(status_code=503, detail="Segmentation model not loaded.")
    max_payload = segmentation_server.config.max_payload
    declared = request.headers.get("content-length")
    if declared and declared.isdigit() and int(declared) > max_payload + FRAME_HEADER_BYTES:
        error = ErrorFrame(ProtocolErrors.PAYLOAD_TOO_LARGE, f"body of {declared} bytes exceeds {max_payload}")
        return Response(content=encode_error(error), media_type=FRAME_MEDIA_TYPE, status_code=413)
    body = await request.body()
    try:
        frame_type, frame_body = split_frame(body, max_payload)
    except ProtocolError as e:
        logger.warning(f"Rejected HTTP frame: {e.code} ({e.message})")
        status_code = 413 if e.code == ProtocolErrors.PAYLOAD_TOO_LARGE else 200
        return Response(content=encode_error(ErrorFrame(e.code, e.message)), media_type=FRAME_MEDIA_TYPE, status_code=status_code)
    reply = await segmentation_server.handle_frame(frame_type, frame_body)
    return Response(content=reply, media_type=FRAME_MEDIA_TYPE)
