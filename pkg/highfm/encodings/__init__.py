"""
Spatial, temporal and spectral token encodings
"""

from highfm.encodings.sincos import (
    EncodingConfig,
    compose_token_embedding,
    encoding_field,
    token_field,
    init_spectral_table,
    sincos_1d,
    sincos_2d,
    spectral_group_encoding,
    temporal_encoding,
)
from highfm.encodings.timestamp import Timestamp

__all__ = [
    "EncodingConfig",
    "Timestamp",
    "compose_token_embedding",
    "encoding_field",
    "init_spectral_table",
    "sincos_1d",
    "sincos_2d",
    "spectral_group_encoding",
    "temporal_encoding",
    "token_field",
]
