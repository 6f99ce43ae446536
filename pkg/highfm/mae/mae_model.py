"""
Masked autoencoder
Patch tokenization, random masking, ViT encoder over visible tokens and a
lightweight transformer decoder trained to reconstruct the masked tokens
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator

from highfm import config
from highfm.encodings import EncodingConfig, Timestamp, encoding_field, init_spectral_table
from highfm.errors import ConfigError, ContractError, ShapeError
from highfm.numerics import ops
from highfm.numerics.layers import (
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    count_from_shapes,
    parameter,
    trunc_normal,
)
from highfm.numerics.tensor import Tensor, backward, get_default_dtype

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[np.ndarray, Tensor]


class ModelConfig(BaseModel):
    """Geometry of the masked autoencoder (encoder + reconstruction decoder)."""

    image_size: int = config.IMAGE_SIZE
    token_size: int = config.TOKEN_SIZE
    bands: int = config.BANDS
    embed_dim: int = config.EMBED_DIM
    depth: int = config.DEPTH
    heads: int = config.HEADS
    mlp_ratio: float = config.MLP_RATIO
    decoder_dim: int = config.DECODER_DIM
    decoder_depth: int = config.DECODER_DEPTH
    decoder_heads: int = config.DECODER_HEADS
    mask_ratio: float = config.MASK_RATIO
    timesteps: int = 1
    norm_pix: bool = True
    spectral_groups: int = 1
    mask_mode: Literal["independent", "consistent"] = "independent"
    reference_year: int = config.REFERENCE_YEAR

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.image_size <= 0 or self.token_size <= 0 or self.image_size % self.token_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by token_size {self.token_size}")
        for name, dim, heads in (
            ("embed_dim", self.embed_dim, self.heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ):
            if heads <= 0 or dim % heads:
                raise ConfigError(f"{name} {dim} is not divisible by {heads} heads")
            if dim % 4:
                raise ConfigError(f"{name} {dim} must be divisible by 4 for the 2D spatial encoding")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.timesteps not in (1, 3):
            raise ConfigError(f"timesteps must be 1 or 3, got {self.timesteps}")
        if self.spectral_groups < 1 or self.bands % self.spectral_groups:
            raise ConfigError(f"{self.bands} bands cannot be split into {self.spectral_groups} equal groups")
        if self.depth < 1 or self.decoder_depth < 1:
            raise ConfigError("depth and decoder_depth must be >= 1")
        return self

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-scale geometry used by gradient checks and convergence runs."""
        values = dict(
            image_size=8,
            token_size=4,
            bands=3,
            embed_dim=16,
            depth=2,
            heads=2,
            decoder_dim=16,
            decoder_depth=1,
            decoder_heads=2,
            norm_pix=False,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def grid(self) -> Tuple[int, int]:
        side = self.image_size // self.token_size
        return side, side

    @property
    def cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def tokens_per_step(self) -> int:
        return self.cells * self.spectral_groups

    @property
    def n_tokens(self) -> int:
        return self.timesteps * self.tokens_per_step

    @property
    def group_bands(self) -> int:
        return self.bands // self.spectral_groups

    @property
    def token_dim(self) -> int:
        return self.group_bands * self.token_size * self.token_size

    @property
    def n_visible(self) -> int:
        return visible_count(self.n_tokens, self.mask_ratio)

    def encoding_config(self, dim: Optional[int] = None) -> EncodingConfig:
        # Width is only validated when it tiles exactly; the field helpers zero-fill otherwise.
        width = dim if dim is not None else self.embed_dim
        return EncodingConfig(
            embed_dim=width if width % 6 == 0 else config.EMBED_DIM,
            spectral_groups=self.spectral_groups,
            reference_year=self.reference_year,
        )


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def _as_array(x: ArrayOrTensor) -> Tuple[np.ndarray, bool]:
    if isinstance(x, Tensor):
        return x.data, True
    return np.asarray(x), False


def patchify(x: ArrayOrTensor, token_size: int = config.TOKEN_SIZE) -> ArrayOrTensor:
    """
    Split images into non-overlapping token_size x token_size tokens.

    Accepts [..., C, H, W] (ndarray or Tensor) and returns [..., h*w, C*p*p]:
    tokens in row-major grid order, each row the band-major flattened block.
    """
    shape = x.shape
    if len(shape) < 3:
        raise ShapeError(f"patchify expects [..., C, H, W], got {shape}")
    *lead, c, h, w = shape
    p = token_size
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"image extents {(h, w)} are not divisible by token size {p}")
    gh, gw = h // p, w // p
    n = len(lead)
    split = tuple(lead) + (c, gh, p, gw, p)
    axes = tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4)
    out_shape = tuple(lead) + (gh * gw, c * p * p)
    if isinstance(x, Tensor):
        return x.reshape(split).transpose(*axes).reshape(out_shape)
    return np.ascontiguousarray(np.asarray(x).reshape(split).transpose(axes)).reshape(out_shape)


def unpatchify(tokens: ArrayOrTensor, token_size: int = config.TOKEN_SIZE) -> ArrayOrTensor:
    """Exact inverse of patchify: [..., h*w, C*p*p] -> [..., C, h*p, w*p] for a square grid."""
    shape = tokens.shape
    if len(shape) < 2:
        raise ShapeError(f"unpatchify expects [..., N, L], got {shape}")
    *lead, n_rows, row = shape
    p = token_size
    side = math.isqrt(n_rows)
    if side * side != n_rows:
        raise ShapeError(f"token count {n_rows} is not a perfect square")
    if row % (p * p) or row == 0:
        raise ShapeError(f"token row length {row} is not a multiple of {p}x{p}")
    c = row // (p * p)
    n = len(lead)
    split = tuple(lead) + (side, side, c, p, p)
    axes = tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4)
    out_shape = tuple(lead) + (c, side * p, side * p)
    if isinstance(tokens, Tensor):
        return tokens.reshape(split).transpose(*axes).reshape(out_shape)
    return np.ascontiguousarray(np.asarray(tokens).reshape(split).transpose(axes)).reshape(out_shape)


def tokenize(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[B, T, C, H, W] -> [B, T*G*h*w, C/G*p*p] ordered timestep, group, cell."""
    patches = np.asarray(patches)
    expected = (cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size)
    if patches.ndim != 5 or patches.shape[1:] != expected:
        raise ShapeError(f"patches of shape {patches.shape} do not match [B, {', '.join(map(str, expected))}]")
    b = patches.shape[0]
    cg = cfg.group_bands
    groups = [patchify(patches[:, :, g * cg : (g + 1) * cg], cfg.token_size) for g in range(cfg.spectral_groups)]
    return np.stack(groups, axis=2).reshape(b, cfg.n_tokens, cfg.token_dim)


def detokenize(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Inverse of tokenize: [B, N, L] -> [B, T, C, H, W]."""
    tokens = np.asarray(tokens)
    b = tokens.shape[0]
    grouped = tokens.reshape(b, cfg.timesteps, cfg.spectral_groups, cfg.cells, cfg.token_dim)
    images = [unpatchify(grouped[:, :, g], cfg.token_size) for g in range(cfg.spectral_groups)]
    return np.concatenate(images, axis=2)


def token_groups(cfg: ModelConfig) -> np.ndarray:
    """Spectral group id of every token position."""
    return (np.arange(cfg.n_tokens) // cfg.cells) % cfg.spectral_groups


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


def visible_count(n_tokens: int, mask_ratio: float) -> int:
    # Rounding guards against 0.25 * 64 landing a hair above 16.
    return int(math.ceil(round((1.0 - mask_ratio) * n_tokens, 9)))


@dataclass
class MaskPlan:
    """One sample's masking: keep_ids are encoded, the rest are reconstructed."""

    n_tokens: int
    n_visible: int
    shuffle: np.ndarray
    keep_ids: np.ndarray = field(init=False)
    restore: np.ndarray = field(init=False)

    def __post_init__(self):
        self.shuffle = np.asarray(self.shuffle, dtype=np.int64)
        if sorted(self.shuffle.tolist()) != list(range(self.n_tokens)):
            raise ContractError("shuffle is not a permutation of the token positions")
        if not 0 < self.n_visible <= self.n_tokens:
            raise ContractError(f"n_visible {self.n_visible} outside (0, {self.n_tokens}]")
        self.keep_ids = self.shuffle[: self.n_visible]
        self.restore = np.argsort(self.shuffle)

    @property
    def masked_ids(self) -> np.ndarray:
        return self.shuffle[self.n_visible :]

    @property
    def mask(self) -> np.ndarray:
        """1.0 at masked positions, 0.0 at visible ones, in original token order."""
        out = np.ones(self.n_tokens)
        out[self.keep_ids] = 0.0
        return out

    @classmethod
    def full(cls, n_tokens: int) -> "MaskPlan":
        return cls(n_tokens=n_tokens, n_visible=n_tokens, shuffle=np.arange(n_tokens))


def random_mask(
    n_tokens: int,
    mask_ratio: float,
    rng: np.random.Generator,
    timesteps: int = 1,
    consistent: bool = False,
) -> MaskPlan:
    """
    Draw a uniformly random masking plan.

    With consistent=True the same spatial cells are kept at every timestep;
    otherwise masking is uniform over all tokens.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if not consistent or timesteps == 1:
        return MaskPlan(n_tokens, visible_count(n_tokens, mask_ratio), rng.permutation(n_tokens))

    if n_tokens % timesteps:
        raise ShapeError(f"{n_tokens} tokens do not split into {timesteps} timesteps")
    per_step = n_tokens // timesteps
    order = rng.permutation(per_step)
    kept = visible_count(per_step, mask_ratio)
    offsets = np.arange(timesteps)[:, None] * per_step
    keep = (offsets + order[None, :kept]).reshape(-1)
    drop = (offsets + order[None, kept:]).reshape(-1)
    return MaskPlan(n_tokens, keep.size, np.concatenate([keep, drop]))


def draw_plans(cfg: ModelConfig, batch_size: int, rng: np.random.Generator) -> List[MaskPlan]:
    consistent = cfg.mask_mode == "consistent"
    return [random_mask(cfg.n_tokens, cfg.mask_ratio, rng, cfg.timesteps, consistent) for _ in range(batch_size)]


@dataclass
class PretrainBatch:
    patches: np.ndarray  # [B, T, C, H, W]
    timestamps: List[List[Timestamp]]  # [B][T]
    plans: List[MaskPlan]

    def __post_init__(self):
        self.patches = np.asarray(self.patches)
        b = self.patches.shape[0]
        if len(self.timestamps) != b or len(self.plans) != b:
            rows, plans = len(self.timestamps), len(self.plans)
            raise ShapeError(f"batch of {b} patches with {rows} timestamp rows and {plans} plans")
        for row in self.timestamps:
            if len(row) != self.patches.shape[1]:
                raise ShapeError(f"{len(row)} timestamps for {self.patches.shape[1]} timesteps")
            if len(row) > 1:
                if any(a >= b_ for a, b_ in zip(row, row[1:])):
                    raise ContractError("multi-timestep timestamps must be strictly ascending")
                if not all(row[0].same_hour(t) for t in row[1:]):
                    raise ContractError("multi-timestep timestamps must fall in the same clock hour")

    def __len__(self) -> int:
        return self.patches.shape[0]


def make_pretrain_batch(
    patches: np.ndarray,
    timestamps: Sequence[Sequence[Timestamp]],
    cfg: ModelConfig,
    rng: np.random.Generator,
) -> PretrainBatch:
    patches = np.asarray(patches)
    return PretrainBatch(patches, [list(row) for row in timestamps], draw_plans(cfg, patches.shape[0], rng))


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


def _field(cfg: ModelConfig, timestamps: Sequence[Sequence[Timestamp]], dim: int) -> np.ndarray:
    enc = cfg.encoding_config(dim)
    return np.stack([encoding_field(cfg.grid, row, cfg.spectral_groups, dim, enc) for row in timestamps])


class ViTEncoder(Module):
    """Patch embedding + fixed encodings + cls token + pre-norm transformer stack."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = [Linear(cfg.token_dim, d, rng) for _ in range(cfg.spectral_groups)]
        self.cls_token = parameter(trunc_normal(rng, (1, 1, d)))
        if cfg.spectral_groups > 1:
            self.spectral_table = init_spectral_table(cfg.spectral_groups, d, rng)
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)

    def _embed(self, visible: np.ndarray, groups: np.ndarray) -> Tensor:
        x = Tensor(visible)
        if self.cfg.spectral_groups == 1:
            return self.patch_embed[0](x)
        out = None
        for g, proj in enumerate(self.patch_embed):
            selected = proj(x) * (groups == g).astype(get_default_dtype())[..., None]
            out = selected if out is None else out + selected
        return out

    def forward(
        self,
        patches: np.ndarray,
        timestamps: Sequence[Sequence[Timestamp]],
        plans: Optional[Sequence[MaskPlan]] = None,
    ) -> Tensor:
        """
        Encode the visible tokens of each sample.

        Args:
            patches: [B, T, C, H, W]
            timestamps: [B][T] acquisition times
            plans: per-sample masking; None keeps every token

        Returns:
            Tensor [B, 1 + n_visible, embed_dim]
        """
        cfg = self.cfg
        tokens = tokenize(patches, cfg)
        b, n = tokens.shape[:2]
        if len(timestamps) != b:
            raise ShapeError(f"{len(timestamps)} timestamp rows for batch of {b}")
        plans = plans or [MaskPlan.full(n) for _ in range(b)]
        if any(p.n_tokens != n for p in plans) or len({p.n_visible for p in plans}) != 1:
            raise ContractError(f"mask plans do not describe {n} tokens with a common visible count")
        keep = np.stack([p.keep_ids for p in plans])

        # Only kept rows enter the graph, so masked pixels cannot reach the output.
        visible = np.take_along_axis(tokens, keep[..., None], axis=1)
        groups = token_groups(cfg)[keep]
        x = self._embed(visible, groups)
        field_rows = np.take_along_axis(_field(cfg, timestamps, cfg.embed_dim), keep[..., None], axis=1)
        x = x + Tensor(field_rows)
        if cfg.spectral_groups > 1:
            x = x + ops.index_select(self.spectral_table, groups)

        cls = ops.broadcast_to(self.cls_token, (b, 1, cfg.embed_dim))
        x = ops.concat([cls, x], axis=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class MAEDecoder(Module):
    """Reinserts mask tokens, re-adds encodings and predicts every token's pixels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dd = cfg.decoder_dim
        self.embed = Linear(cfg.embed_dim, dd, rng)
        self.mask_token = parameter(trunc_normal(rng, (1, 1, dd)))
        if cfg.spectral_groups > 1:
            self.spectral_table = init_spectral_table(cfg.spectral_groups, dd, rng)
        self.blocks = [TransformerBlock(dd, cfg.decoder_heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(dd)
        self.pred = Linear(dd, cfg.token_dim, rng)

    def forward(self, latent: Tensor, plans: Sequence[MaskPlan], timestamps: Sequence[Sequence[Timestamp]]) -> Tensor:
        cfg = self.cfg
        b, n = latent.shape[0], cfg.n_tokens
        n_visible = latent.shape[1] - 1
        if len(plans) != b or any(p.n_tokens != n or p.n_visible != n_visible for p in plans):
            raise ContractError(f"mask plans inconsistent with latent of shape {latent.shape} and {n} tokens")
        dd = cfg.decoder_dim

        x = self.embed(latent)
        cls, seq = x[:, :1], x[:, 1:]
        if n_visible < n:
            fill = ops.broadcast_to(self.mask_token, (b, n - n_visible, dd))
            seq = ops.concat([seq, fill], axis=1)
        seq = ops.gather_rows(seq, np.stack([p.restore for p in plans]))

        seq = seq + Tensor(_field(cfg, timestamps, dd))
        if cfg.spectral_groups > 1:
            seq = seq + ops.index_select(self.spectral_table, token_groups(cfg))

        x = ops.concat([cls, seq], axis=1)
        for block in self.blocks:
            x = block(x)
        return self.pred(self.norm(x))[:, 1:]


def recon_loss(pred: Tensor, target_tokens: np.ndarray, plans: Sequence[MaskPlan], norm_pix: bool) -> Tensor:
    """Mean squared error over masked tokens; targets standardized per token when norm_pix."""
    target = np.asarray(target_tokens, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.stack([p.mask for p in plans])
    if mask.shape != pred.shape[:2]:
        raise ShapeError(f"mask plans of shape {mask.shape} vs prediction {pred.shape}")
    if mask.sum() == 0:
        raise ContractError("reconstruction loss needs at least one masked token")
    if norm_pix:
        mean = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mean) / np.sqrt(var + 1e-6)
    diff = pred - Tensor(target, dtype=pred.dtype)
    per_token = (diff * diff).mean(axis=-1)
    return (per_token * Tensor(mask, dtype=pred.dtype)).sum() * (1.0 / float(mask.sum()))


class MaskedAutoencoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg, rng)
        self.decoder = MAEDecoder(cfg, rng)

    def encode(self, batch: PretrainBatch) -> Tensor:
        return self.encoder(batch.patches, batch.timestamps, batch.plans)

    def decode(self, latent: Tensor, plans: Sequence[MaskPlan], timestamps: Sequence[Sequence[Timestamp]]) -> Tensor:
        return self.decoder(latent, plans, timestamps)

    def forward_loss(self, batch: PretrainBatch) -> Tuple[Tensor, Tensor]:
        """Returns (loss, prediction [B, N, token_dim])."""
        pred = self.decode(self.encode(batch), batch.plans, batch.timestamps)
        loss = recon_loss(pred, tokenize(batch.patches, self.cfg), batch.plans, self.cfg.norm_pix)
        return loss, pred

    def forward(self, batch: PretrainBatch) -> Tensor:
        return self.forward_loss(batch)[0]

    def reconstruct(self, batch: PretrainBatch) -> np.ndarray:
        """Predicted images [B, T, C, H, W] (visualization only; normalized units when norm_pix)."""
        _, pred = self.forward_loss(batch)
        return detokenize(pred.data, self.cfg)


class Optimizer(Protocol):
    def step(self) -> None: ...


def pretrain_step(batch: PretrainBatch, model: MaskedAutoencoder, optimizer: Optimizer) -> float:
    """One forward/backward/update; returns the loss measured before the update."""
    if not model.training:
        raise ContractError("pretrain_step needs the model in training mode")
    model.zero_grad()
    loss, _ = model.forward_loss(batch)
    backward(loss)
    optimizer.step()
    value = loss.item()
    logger.debug(f"pretrain step loss={value:.6f}")
    return value


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------


def encoder_parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter name -> shape of ViTEncoder(cfg), without allocating weights."""
    d = cfg.embed_dim
    hidden = int(d * cfg.mlp_ratio)
    shapes: Dict[str, Tuple[int, ...]] = {}
    for g in range(cfg.spectral_groups):
        shapes[f"patch_embed.{g}.weight"] = (cfg.token_dim, d)
        shapes[f"patch_embed.{g}.bias"] = (d,)
    shapes["cls_token"] = (1, 1, d)
    if cfg.spectral_groups > 1:
        shapes["spectral_table"] = (cfg.spectral_groups, d)
    for i in range(cfg.depth):
        prefix = f"blocks.{i}."
        shapes.update(
            {
                prefix + "norm1.weight": (d,),
                prefix + "norm1.bias": (d,),
                prefix + "attn.qkv.weight": (d, 3 * d),
                prefix + "attn.qkv.bias": (3 * d,),
                prefix + "attn.proj.weight": (d, d),
                prefix + "attn.proj.bias": (d,),
                prefix + "norm2.weight": (d,),
                prefix + "norm2.bias": (d,),
                prefix + "mlp.fc1.weight": (d, hidden),
                prefix + "mlp.fc1.bias": (hidden,),
                prefix + "mlp.fc2.weight": (hidden, d),
                prefix + "mlp.fc2.bias": (d,),
            }
        )
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def encoder_parameter_count(cfg: Optional[ModelConfig] = None) -> int:
    return count_from_shapes(encoder_parameter_shapes(cfg or ModelConfig()))


def create_mae_model(cfg: Optional[ModelConfig] = None, seed: int = 0) -> MaskedAutoencoder:
    """Factory function to create a freshly initialized masked autoencoder"""
    cfg = cfg or ModelConfig()
    model = MaskedAutoencoder(cfg, np.random.default_rng(seed))
    logger.info(
        f"created MAE: d={cfg.embed_dim} depth={cfg.depth} T={cfg.timesteps} groups={cfg.spectral_groups} "
        f"encoder params={model.encoder.num_parameters():,}"
    )
    return model
