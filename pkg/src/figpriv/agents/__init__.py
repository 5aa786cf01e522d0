from .backends import MockBackend, RemoteBackend, encode_png, image_key
from .config import (
    DEFAULT_PROMPTS,
    ROLES,
    AgentConfigError,
    AgentEndpointConfig,
    AgentError,
    AgentResponseError,
    AgentsFile,
    AgentTransportError,
    load_agents_file,
)
from .parsing import DetectionResult, normalize_label, parse_bbox_json
from .roles import (
    Agent,
    AgentSet,
    TextDetection,
    classify_text,
    decode_mask,
    detect_object,
    encode_mask,
    judge_orientation,
    ocr_text,
    segment_object,
    vlm_text,
    yes_probability,
)

__all__ = [
    "Agent",
    "AgentConfigError",
    "AgentEndpointConfig",
    "AgentError",
    "AgentResponseError",
    "AgentSet",
    "AgentTransportError",
    "AgentsFile",
    "DEFAULT_PROMPTS",
    "DetectionResult",
    "MockBackend",
    "ROLES",
    "RemoteBackend",
    "TextDetection",
    "classify_text",
    "decode_mask",
    "detect_object",
    "encode_mask",
    "encode_png",
    "image_key",
    "judge_orientation",
    "load_agents_file",
    "normalize_label",
    "ocr_text",
    "parse_bbox_json",
    "segment_object",
    "vlm_text",
    "yes_probability",
]
