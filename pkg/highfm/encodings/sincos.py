"""
Token encodings
Fixed sin-cos spatial and temporal encodings plus learned spectral-group embeddings
"""

from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from highfm import config
from highfm.errors import ConfigError, ShapeError
from highfm.encodings.timestamp import Timestamp
from highfm.numerics import ops
from highfm.numerics.tensor import Tensor, get_default_dtype

TEMPORAL_COMPONENTS = ("year_offset", "day_of_year", "minute_of_day")


class EncodingConfig(BaseModel):
    """Geometry of the additive token encodings."""

    embed_dim: int = config.EMBED_DIM
    temporal_components: Tuple[str, str, str] = TEMPORAL_COMPONENTS
    base_frequency: float = config.ENCODING_BASE
    spectral_groups: int = 1
    reference_year: int = config.REFERENCE_YEAR

    @field_validator("embed_dim")
    @classmethod
    def _tiles_exactly(cls, value: int) -> int:
        if value <= 0 or value % 6:
            raise ConfigError(f"embed_dim must be a positive multiple of 6, got {value}")
        return value

    @field_validator("temporal_components")
    @classmethod
    def _fixed_components(cls, value: Tuple[str, str, str]) -> Tuple[str, str, str]:
        if tuple(value) != TEMPORAL_COMPONENTS:
            raise ConfigError(f"temporal components are fixed to {TEMPORAL_COMPONENTS}")
        return value

    @field_validator("spectral_groups")
    @classmethod
    def _positive_groups(cls, value: int) -> int:
        if value < 1:
            raise ConfigError("spectral_groups must be >= 1")
        return value


def _frequencies(d: int, base: float) -> np.ndarray:
    half = d // 2
    return base ** (-np.arange(half, dtype=np.float64) / half)


def sincos_1d(pos: float, d: int, base: float = config.ENCODING_BASE) -> np.ndarray:
    """concat(sin(pos * w), cos(pos * w)) with w_k = base^(-k / (d/2))."""
    return sincos_1d_many(np.asarray([pos], dtype=np.float64), d, base)[0]


def sincos_1d_many(positions: np.ndarray, d: int, base: float = config.ENCODING_BASE) -> np.ndarray:
    if d <= 0 or d % 2:
        raise ShapeError(f"sin-cos encoding width must be even, got {d}")
    angles = np.outer(np.asarray(positions, dtype=np.float64).reshape(-1), _frequencies(d, base))
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(grid_h: int, grid_w: int, d: int, base: float = config.ENCODING_BASE) -> np.ndarray:
    """Rows in row-major (y, x) order; each row is concat(enc(y), enc(x)) with d/2 dims apiece."""
    if d % 2 or (d // 2) % 2:
        raise ShapeError(f"2D sin-cos encoding needs d divisible by 4, got {d}")
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.concatenate(
        [sincos_1d_many(ys.reshape(-1), d // 2, base), sincos_1d_many(xs.reshape(-1), d // 2, base)],
        axis=1,
    )


@lru_cache(maxsize=4096)
def _temporal_cached(t: Timestamp, d: int, base: float, reference_year: int) -> np.ndarray:
    third = d // 3
    positions = (t.year - reference_year, t.day_of_year, t.minute_of_day)
    out = np.concatenate([sincos_1d(float(p), third, base) for p in positions])
    out.setflags(write=False)
    return out


def temporal_encoding(t: Timestamp, d: int, cfg: Optional[EncodingConfig] = None) -> np.ndarray:
    """
    Fine-grained temporal encoding of one acquisition.

    Concatenates sin-cos encodings of (year - reference_year, day_of_year,
    minute_of_day), each allotted d/3 dims.
    """
    cfg = cfg or EncodingConfig()
    if d % 3 or (d // 3) % 2:
        raise ShapeError(f"temporal encoding needs d divisible by 6, got {d}")
    return _temporal_cached(t, d, cfg.base_frequency, cfg.reference_year)


def init_spectral_table(n_groups: int, d: int, rng: np.random.Generator) -> Tensor:
    """Learned per-group embeddings drawn from N(0, 0.02^2)."""
    values = rng.normal(0.0, config.INIT_STD, size=(n_groups, d)).astype(get_default_dtype())
    return Tensor(values, requires_grad=True)


def spectral_group_encoding(table: Tensor, group: int, n_groups: int) -> Tensor:
    if not 0 <= group < n_groups or table.shape[0] != n_groups:
        raise ShapeError(f"spectral group {group} out of range for {n_groups} groups (table {table.shape})")
    return ops.index_select(table, np.asarray(group))


def _temporal_width(d: int) -> int:
    return d - d % 6


@lru_cache(maxsize=64)
def _spatial_cached(grid_h: int, grid_w: int, d: int, base: float) -> np.ndarray:
    out = sincos_2d(grid_h, grid_w, d, base)
    out.setflags(write=False)
    return out


def token_field(
    grid: Tuple[int, int],
    token_timestamps: Sequence[Timestamp],
    d: int,
    cfg: Optional[EncodingConfig] = None,
) -> np.ndarray:
    """
    Fixed spatial + temporal encoding for N tokens, token i sitting at cell i mod h*w.

    Widths that are not a multiple of 6 get the temporal encoding in the
    largest multiple of 6 below d, zero-filled to d.
    """
    cfg = cfg or EncodingConfig()
    h, w = grid
    n = len(token_timestamps)
    if n % (h * w):
        raise ShapeError(f"{n} tokens do not tile grid {grid}")
    field = np.tile(_spatial_cached(h, w, d, cfg.base_frequency), (n // (h * w), 1))
    tw = _temporal_width(d)
    if tw:
        rows = {t: temporal_encoding(t, tw, cfg) for t in set(token_timestamps)}
        field[:, :tw] += np.stack([rows[t] for t in token_timestamps])
    return field


def encoding_field(
    grid: Tuple[int, int],
    timestamps: Sequence[Timestamp],
    n_groups: int,
    d: int,
    cfg: Optional[EncodingConfig] = None,
) -> np.ndarray:
    """Field for a token sequence ordered [timestep][group][y][x]; one timestamp per timestep."""
    per_step = n_groups * grid[0] * grid[1]
    return token_field(grid, [t for t in timestamps for _ in range(per_step)], d, cfg)


def compose_token_embedding(
    tokens: Tensor,
    grid: Tuple[int, int],
    timestamps: Sequence[Timestamp],
    groups: Optional[Sequence[int]] = None,
    spectral_table: Optional[Tensor] = None,
    cfg: Optional[EncodingConfig] = None,
) -> Tensor:
    """
    Add spatial, temporal and (grouped mode) spectral encodings to tokens.

    Args:
        tokens: [..., N, d]
        grid: token grid (h, w); token i sits at cell i mod h*w
        timestamps: one Timestamp per token
        groups: spectral group per token (grouped mode only)
        spectral_table: learned [n_groups, d] table

    Returns:
        tokens + encodings, same shape
    """
    n, d = tokens.shape[-2], tokens.shape[-1]
    if len(timestamps) != n:
        raise ShapeError(f"{n} tokens but {len(timestamps)} timestamps")
    out = tokens + Tensor(token_field(grid, timestamps, d, cfg), dtype=tokens.dtype)
    if spectral_table is not None and spectral_table.shape[0] > 1:
        if groups is None or len(groups) != n:
            raise ShapeError("grouped mode needs one spectral group id per token")
        if spectral_table.shape[1] != d:
            raise ShapeError(f"spectral table width {spectral_table.shape[1]} vs token width {d}")
        out = out + ops.index_select(spectral_table, np.asarray(groups))
    return out
