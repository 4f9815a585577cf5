"""Deterministic codec between pixel coordinates and coarse-to-fine index triples.

A frame is tiled into image tokens (``vit_patch_px * pool_side`` square), each
token into ``pool_side**2`` subpatches, and each subpatch into a 3x3 grid of
location cells. All binning is half-open with real-valued uniform thirds at the
location level, so every pixel of the unpadded image has exactly one owner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

LOCATIONS_PER_SUBPATCH = 9
_LOC_SIDE = 3


@dataclass(frozen=True)
class GridSpec:
    """Immutable tiling of an image (or frame stack) into tokens/subpatches/cells."""

    image_width_px: int
    image_height_px: int
    n_frames: int = 1
    vit_patch_px: int = 14
    pool_side: int = 2

    def __post_init__(self):
        if self.image_width_px <= 0 or self.image_height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if self.n_frames <= 0:
            raise ValueError("n_frames must be positive")
        if self.vit_patch_px < 3:
            raise ValueError("vit_patch_px must be >= 3")
        if self.pool_side < 1:
            raise ValueError("pool_side must be >= 1")

    @property
    def token_px(self) -> int:
        return self.vit_patch_px * self.pool_side

    @property
    def tokens_per_row(self) -> int:
        """Tokens across one row (horizontal count)."""
        return -(-self.image_width_px // self.token_px)

    @property
    def tokens_per_col(self) -> int:
        """Token rows (vertical count)."""
        return -(-self.image_height_px // self.token_px)

    @property
    def tokens_per_frame(self) -> int:
        return self.tokens_per_row * self.tokens_per_col

    @property
    def total_tokens(self) -> int:
        return self.n_frames * self.tokens_per_frame

    @property
    def subpatches_per_token(self) -> int:
        return self.pool_side ** 2

    @property
    def padded_width_px(self) -> int:
        return self.tokens_per_row * self.token_px

    @property
    def padded_height_px(self) -> int:
        return self.tokens_per_col * self.token_px

    @property
    def subpatch_cols(self) -> int:
        return self.tokens_per_row * self.pool_side

    @property
    def subpatch_rows(self) -> int:
        return self.tokens_per_col * self.pool_side


@dataclass(frozen=True)
class PointTriple:
    """One point as (image-token, subpatch, location) indices on some grid."""

    token_index: int
    subpatch_index: int
    location_index: int
    object_id: Optional[int] = None

    def same_cell(self, other: "PointTriple") -> bool:
        """Duplicate rule: two triples collide iff they share (token, subpatch)."""
        return (self.token_index, self.subpatch_index) == (
            other.token_index,
            other.subpatch_index,
        )


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float
    frame: int = 0
    object_id: Optional[int] = None


def build_grid(
    image_width_px: int,
    image_height_px: int,
    n_frames: int = 1,
    vit_patch_px: int = 14,
    pool_side: int = 2,
) -> GridSpec:
    """Build a GridSpec; raster order is frame-major, then row-major."""
    return GridSpec(image_width_px, image_height_px, n_frames, vit_patch_px, pool_side)


def _check_triple(grid: GridSpec, t: PointTriple) -> None:
    if not 0 <= t.token_index < grid.total_tokens:
        raise ValueError(f"token_index {t.token_index} out of range [0, {grid.total_tokens})")
    if not 0 <= t.subpatch_index < grid.subpatches_per_token:
        raise ValueError(
            f"subpatch_index {t.subpatch_index} out of range [0, {grid.subpatches_per_token})"
        )
    if not 0 <= t.location_index < LOCATIONS_PER_SUBPATCH:
        raise ValueError(f"location_index {t.location_index} out of range [0, 9)")


def encode_point(grid: GridSpec, p: PixelPoint) -> PointTriple:
    """Map a pixel point to its (token, subpatch, location) triple.

    Half-open binning throughout: a pixel on a cell edge belongs to the
    lower-index cell's successor, i.e. the cell starting at that edge.
    """
    if not (0 <= p.x < grid.image_width_px and 0 <= p.y < grid.image_height_px):
        raise ValueError(f"point ({p.x}, {p.y}) outside image bounds")
    if not 0 <= p.frame < grid.n_frames:
        raise ValueError(f"frame {p.frame} out of range [0, {grid.n_frames})")

    tok_col = int(p.x // grid.token_px)
    tok_row = int(p.y // grid.token_px)
    token = p.frame * grid.tokens_per_frame + tok_row * grid.tokens_per_row + tok_col

    x_in_tok = p.x - tok_col * grid.token_px
    y_in_tok = p.y - tok_row * grid.token_px
    sub_col = int(x_in_tok // grid.vit_patch_px)
    sub_row = int(y_in_tok // grid.vit_patch_px)
    subpatch = sub_row * grid.pool_side + sub_col

    third = grid.vit_patch_px / _LOC_SIDE
    loc_col = min(int((x_in_tok - sub_col * grid.vit_patch_px) // third), _LOC_SIDE - 1)
    loc_row = min(int((y_in_tok - sub_row * grid.vit_patch_px) // third), _LOC_SIDE - 1)
    location = loc_row * _LOC_SIDE + loc_col

    return PointTriple(token, subpatch, location, p.object_id)


def decode_triple(grid: GridSpec, t: PointTriple) -> PixelPoint:
    """Return the center of the location cell, clamped into the unpadded image."""
    _check_triple(grid, t)
    frame = t.token_index // grid.tokens_per_frame
    in_frame = t.token_index % grid.tokens_per_frame
    tok_row, tok_col = divmod(in_frame, grid.tokens_per_row)
    sub_row, sub_col = divmod(t.subpatch_index, grid.pool_side)
    loc_row, loc_col = divmod(t.location_index, _LOC_SIDE)

    third = grid.vit_patch_px / _LOC_SIDE
    x = tok_col * grid.token_px + sub_col * grid.vit_patch_px + (loc_col + 0.5) * third
    y = tok_row * grid.token_px + sub_row * grid.vit_patch_px + (loc_row + 0.5) * third

    # Cells that straddle the right/bottom padding get pulled into the image.
    x = min(max(x, 0.0), grid.image_width_px - 0.5)
    y = min(max(y, 0.0), grid.image_height_px - 0.5)
    return PixelPoint(x, y, frame, t.object_id)


def frame_of_token(grid: GridSpec, token_index: int) -> int:
    if not 0 <= token_index < grid.total_tokens:
        raise ValueError(f"token_index {token_index} out of range [0, {grid.total_tokens})")
    return token_index // grid.tokens_per_frame


def subpatch_rect(
    grid: GridSpec, token_index: int, subpatch_index: int
) -> Tuple[int, Tuple[float, float, float, float]]:
    """(frame, (x0, y0, x1, y1)) of one subpatch in padded-canvas coordinates."""
    frame = token_index // grid.tokens_per_frame
    in_frame = token_index % grid.tokens_per_frame
    tok_row, tok_col = divmod(in_frame, grid.tokens_per_row)
    sub_row, sub_col = divmod(subpatch_index, grid.pool_side)
    x0 = tok_col * grid.token_px + sub_col * grid.vit_patch_px
    y0 = tok_row * grid.token_px + sub_row * grid.vit_patch_px
    return frame, (float(x0), float(y0), float(x0 + grid.vit_patch_px), float(y0 + grid.vit_patch_px))


def token_coordinate_map(
    grid: GridSpec,
) -> List[Tuple[int, int, int, Tuple[float, float, float, float]]]:
    """Per (token, subpatch): (token, subpatch, frame, rect). Tiles each frame's padded canvas."""
    out = []
    for token in range(grid.total_tokens):
        for sub in range(grid.subpatches_per_token):
            frame, rect = subpatch_rect(grid, token, sub)
            out.append((token, sub, frame, rect))
    return out


def max_roundtrip_error(grid: GridSpec) -> float:
    """Brute-force oracle: worst Euclidean encode->decode error over all integer pixels."""
    worst = 0.0
    for frame in range(grid.n_frames):
        for y in range(grid.image_height_px):
            for x in range(grid.image_width_px):
                p = PixelPoint(float(x), float(y), frame)
                q = decode_triple(grid, encode_point(grid, p))
                if q.frame != frame:
                    raise AssertionError("frame not preserved in round trip")
                worst = max(worst, math.hypot(q.x - p.x, q.y - p.y))
    return worst
