"""Reference scoring service for the ayg-score/1 wire protocol."""

from .scoring import (
    PROTOCOL,
    AnalyticScorer,
    ProtocolMismatch,
    RequestError,
    ZerosScorer,
    decode_f32,
    encode_f32,
    load_manifest,
    parse_request,
    schedule_tables,
)
from .server import MODES, StubConfig, StubServer, create_server, serve_score

__all__ = [
    "PROTOCOL",
    "MODES",
    "AnalyticScorer",
    "ProtocolMismatch",
    "RequestError",
    "StubConfig",
    "StubServer",
    "ZerosScorer",
    "create_server",
    "decode_f32",
    "encode_f32",
    "load_manifest",
    "parse_request",
    "schedule_tables",
    "serve_score",
]
