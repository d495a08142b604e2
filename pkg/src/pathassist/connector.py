"""Scale-invariant connector: tile an image of any size, encode every tile, and
resample the variable-length token pool to a fixed ``K x d_llm`` prefix."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError, InvalidInputError
from .images import check_image, resize_bilinear
from .layers import CrossBlock, seeded_init


@dataclass
class ConnectorConfig:
    tile_size: int = 224
    max_tiles: int = 6
    num_queries: int = 32
    d_llm: int = 256
    enc_dim: int = 128
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.max_tiles < 1 or self.num_queries < 1 or self.tile_size < 1:
            raise ConfigurationError("max_tiles, num_queries and tile_size must be >= 1")


@dataclass(frozen=True)
class TilePlan:
    grid_rows: int
    grid_cols: int
    tile_size: int
    resized_h: int
    resized_w: int
    includes_thumbnail: bool = True

    @property
    def n_tiles(self) -> int:
        return self.grid_rows * self.grid_cols + int(self.includes_thumbnail)


def _aspect_distance(rows: int, cols: int, h: int, w: int) -> Fraction:
    # max(x, 1/x) with x = (cols/rows) / (w/h); orders grids exactly like |log x|
    x = Fraction(cols * h, rows * w)
    return max(x, 1 / x)


def candidate_grids(h: int, w: int, tile_size: int, max_tiles: int) -> list[tuple[int, int]]:
    """Grids with ``r * c <= max_tiles`` that do not extend past the image's own tile extent."""
    max_r = max(1, math.ceil(h / tile_size))
    max_c = max(1, math.ceil(w / tile_size))
    return [
        (r, c)
        for r in range(1, min(max_r, max_tiles) + 1)
        for c in range(1, min(max_c, max_tiles // r) + 1)
    ]


def plan_tiles(h: int, w: int, cfg: ConnectorConfig) -> TilePlan:
    """Pick the grid whose aspect ratio best matches ``w / h``.

    Ties go to the grid with more tiles, then to fewer rows.
    """
    if h < 1 or w < 1:
        raise InvalidInputError(f"image size must be positive, got {h}x{w}")
    grids = candidate_grids(h, w, cfg.tile_size, cfg.max_tiles)
    r, c = min(grids, key=lambda g: (_aspect_distance(g[0], g[1], h, w), -g[0] * g[1], g[0]))
    return TilePlan(r, c, cfg.tile_size, r * cfg.tile_size, c * cfg.tile_size)


def tile_image(image, cfg: ConnectorConfig) -> list[np.ndarray]:
    """Row-major grid tiles of the resized image, followed by a whole-image thumbnail."""
    arr = check_image(image)
    plan = plan_tiles(arr.shape[0], arr.shape[1], cfg)
    resized = resize_bilinear(arr, plan.resized_h, plan.resized_w)
    t = plan.tile_size
    tiles = [
        resized[i * t : (i + 1) * t, j * t : (j + 1) * t]
        for i in range(plan.grid_rows)
        for j in range(plan.grid_cols)
    ]
    tiles.append(resize_bilinear(arr, t, t))
    return tiles


def reassemble(tiles: list[np.ndarray], plan: TilePlan) -> np.ndarray:
    rows = [
        np.concatenate(tiles[i * plan.grid_cols : (i + 1) * plan.grid_cols], axis=1)
        for i in range(plan.grid_rows)
    ]
    return np.concatenate(rows, axis=0)


class Connector(nn.Module):
    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.enc_dim
        self.row_emb = nn.Parameter(torch.zeros(cfg.max_tiles, d))
        self.col_emb = nn.Parameter(torch.zeros(cfg.max_tiles, d))
        self.kind_emb = nn.Parameter(torch.zeros(2, d))
        self.queries = nn.Parameter(torch.zeros(cfg.num_queries, d))
        self.block = CrossBlock(d, cfg.heads)
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.d_llm)
        seeded_init(self, cfg.seed)

    def tile_marker(self, row: int, col: int, thumbnail: bool) -> torch.Tensor:
        return self.row_emb[row] + self.col_emb[col] + self.kind_emb[int(thumbnail)]

    def build_pool(self, tile_tokens: list[torch.Tensor], plan: TilePlan) -> torch.Tensor:
        """Concatenate per-tile tokens, each tile prefixed by its position marker."""
        parts = []
        for idx, tokens in enumerate(tile_tokens):
            thumb = plan.includes_thumbnail and idx == len(tile_tokens) - 1
            row, col = (0, 0) if thumb else divmod(idx, plan.grid_cols)
            parts.append(self.tile_marker(row, col, thumb)[None].to(tokens.dtype))
            parts.append(tokens)
        return torch.cat(parts, dim=0)

    def forward(self, pool: torch.Tensor) -> torch.Tensor:
        """``(M, enc_dim)`` or ``(B, M, enc_dim)`` pool -> ``(.., K, d_llm)``."""
        batched = pool.ndim == 3
        if not batched:
            pool = pool[None]
        q = self.queries.to(pool.dtype).expand(pool.shape[0], -1, -1)
        out = self.out_proj(self.out_norm(self.block(q, pool)))
        return out if batched else out[0]


def resample(connector: Connector, pool: torch.Tensor) -> torch.Tensor:
    if pool.ndim != 2 or pool.shape[0] < 1:
        raise InvalidInputError("resample needs a non-empty (M, enc_dim) token pool")
    if pool.shape[1] != connector.cfg.enc_dim:
        raise InvalidInputError(f"pool width {pool.shape[1]} != enc_dim {connector.cfg.enc_dim}")
    return connector(pool)


def encode_tiles(encoder, tiles: list[np.ndarray]) -> list[torch.Tensor]:
    """Run the vision tower once over all (equal-size) tiles; returns per-tile patch tokens."""
    dtype = next(encoder.parameters()).dtype
    batch = torch.as_tensor(np.stack(tiles), dtype=dtype)
    patches, _ = encoder.encode_images(batch)
    return list(patches.unbind(0))


def connect(image, encoder, connector: Connector) -> torch.Tensor:
    """Image of any size -> visual prefix of shape ``(K, d_llm)``."""
    cfg = connector.cfg
    arr = check_image(image)
    plan = plan_tiles(arr.shape[0], arr.shape[1], cfg)
    tiles = tile_image(arr, cfg)
    frozen = not any(p.requires_grad for p in encoder.parameters())
    with torch.set_grad_enabled(torch.is_grad_enabled() and not frozen):
        tokens = encode_tiles(encoder, tiles)
    return resample(connector, connector.build_pool(tokens, plan))
