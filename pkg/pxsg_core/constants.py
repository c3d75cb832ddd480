# This file holds shared constants (volume kinds, wire frame types, error codes
# and desk-scale defaults) to avoid circular imports and keep definitions centralized.


class VolumeKind:
    """Kind tags of the raw volume format header."""
    VOLUME = 0
    SEGMAP_SOFT = 1
    SEGMAP_DISCRETE = 2
    FLOW = 3

    ALL = (VOLUME, SEGMAP_SOFT, SEGMAP_DISCRETE, FLOW)


class FileFormat:
    """Magic strings and versions of the on-disk containers."""
    VOLUME_MAGIC = b"PXSG"
    VOLUME_VERSION = 1
    CHECKPOINT_MAGIC = b"PXCK"
    CHECKPOINT_VERSION = 1
    FLOWS_MAGIC = b"PXFL"
    FLOWS_VERSION = 1
    VOLUME_SUFFIX = ".vol"
    SEGMAP_SUFFIX = ".seg"
    SIDECAR_SUFFIX = ".json"
    MANIFEST_NAME = "manifest.json"


class FrameType:
    """Frame type byte of the length-prefixed wire protocol."""
    REQUEST = 1
    RESPONSE = 2
    ERROR = 3


class ProtocolErrors:
    """Error codes carried by ERROR frames."""
    PAYLOAD_TOO_LARGE = "payload-too-large"
    UNSUPPORTED_VERSION = "unsupported-version"
    MALFORMED_FRAME = "malformed-frame"
    INTERNAL_ERROR = "internal-error"


class ProxyRoles:
    """Identifiers of the parties in the test-time pipeline, used in log lines."""
    CLIENT = "proxy_client"
    SEGMENTATION_SERVER = "segmentation_server"


class Defaults:
    """Desk-scale constants shared by every module."""
    DIMS = (24, 32, 28)
    KEY_DIM = 16
    CLASSES = 6
    NETWORK_MULTIPLE = 8
    BASE_WIDTH = 8
    MAX_DISPLACEMENT = 8.0
    PROTOCOL_VERSION = 1
    MAX_PAYLOAD = 64 * 1024 * 1024
    READ_TIMEOUT = 30.0
    LISTEN = "127.0.0.1:7450"
    PROBABILITY_CLAMP = 1e-7
    SEGMAP_SUM_TOLERANCE = 1e-4
    HISTOGRAM_BINS = 50
    F1_THRESHOLD = 0.5
    ATTACKER_STEPS = 200


class Ablations:
    """Names accepted by `train --ablate`."""
    INVERTIBILITY = "inv"
    SMOOTHNESS = "smt"
    DIVERSITY = "div"

    ALL = (INVERTIBILITY, SMOOTHNESS, DIVERSITY)
