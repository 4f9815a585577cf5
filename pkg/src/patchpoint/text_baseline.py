"""Text-coordinate baseline head: points as zero-padded per-mille digit text.

Each coordinate pair costs 8 tokens (3 digits per axis + 2 separators) versus
3 grounding tokens, with the same id/separator overhead, so comparisons against
the grounding head are like-for-like on the shared backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .geometry import GridSpec, PixelPoint, encode_point
from .targets import PointAnnotation, combine_losses, LossBreakdown

SPACE = "<sp>"
TOKENS_PER_COORD_PAIR = 8


class TextParseError(ValueError):
    pass


def _per_mille(value: float, extent: int) -> int:
    return min(int(value / extent * 1000.0), 999)


def encode_text_point(grid: GridSpec, p: PixelPoint) -> List[str]:
    """8 token strings: x digits, separator, y digits, separator."""
    if not (0 <= p.x < grid.image_width_px and 0 <= p.y < grid.image_height_px):
        raise ValueError(f"point ({p.x}, {p.y}) outside image bounds")
    if p.frame != 0:
        raise ValueError("text-coordinate format is single-frame")
    xs = f"{_per_mille(p.x, grid.image_width_px):03d}"
    ys = f"{_per_mille(p.y, grid.image_height_px):03d}"
    return list(xs) + [SPACE] + list(ys) + [SPACE]


def decode_text_point(tokens: Sequence[str], grid: GridSpec) -> PixelPoint:
    if len(tokens) != TOKENS_PER_COORD_PAIR:
        raise TextParseError(f"expected 8 tokens, got {len(tokens)}")
    if tokens[3] != SPACE or tokens[7] != SPACE:
        raise TextParseError("separators misplaced")
    try:
        vx = int("".join(tokens[0:3]))
        vy = int("".join(tokens[4:7]))
    except ValueError:
        raise TextParseError("malformed digits") from None
    x = (vx + 0.5) * grid.image_width_px / 1000.0
    y = (vy + 0.5) * grid.image_height_px / 1000.0
    return PixelPoint(min(x, grid.image_width_px - 0.5), min(y, grid.image_height_px - 0.5), 0)


def sorted_annotation_points(grid: GridSpec, annotation: PointAnnotation) -> List[PixelPoint]:
    """Same raster ordering the grounding head trains with."""
    keyed = []
    for p in annotation.points:
        t = encode_point(grid, p)
        keyed.append(((t.token_index, t.subpatch_index, t.location_index), p))
    keyed.sort(key=lambda kp: kp[0])
    return [p for _, p in keyed]


def build_text_response(model, grid: GridSpec, points: Sequence[PixelPoint]) -> List[int]:
    """Vocab ids of the baseline response: OPEN (coords id SEP?)... CLOSE."""
    v = model.vocab
    ids = [v.points_open]
    for k, p in enumerate(points):
        if k > 0:
            ids.append(v.sep)
        for tok in encode_text_point(grid, p):
            ids.append(v.space if tok == SPACE else v.ids[tok])
        oid = p.object_id if p.object_id is not None else k + 1
        ids.extend(v.digit_ids(oid))
    ids.append(v.points_close)
    return ids


def text_example_loss(
    model, image, query: str, annotation: PointAnnotation, point_sorting: bool = True
) -> LossBreakdown:
    """Pure LM cross-entropy over the baseline response; no grounding steps."""
    grid = image.grid
    points = (
        sorted_annotation_points(grid, annotation) if point_sorting else list(annotation.points)
    )
    resp = build_text_response(model, grid, points)
    _, e = model.vit(image)
    query_ids = model.vocab.encode_query(query)
    embs = torch.cat([
        e.T,
        model.tok_emb.weight[query_ids],
        model.tok_emb.weight[resp],
    ])
    hidden = model.transformer(embs)
    resp_start = e.shape[1] + len(query_ids)
    positions = list(range(resp_start - 1, embs.shape[0] - 1))
    logits = model.lm_head(hidden[positions])
    targets = torch.tensor(resp, dtype=torch.long)
    llm = F.cross_entropy(logits, targets, reduction="none")
    return combine_losses(list(llm))


@dataclass
class TextDecodeResult:
    points: List[PixelPoint]
    n_coord_tokens: int
    text: str


def decode_text(model, image, query: str, max_points: int = 256,
                max_id_digits: int = 8) -> TextDecodeResult:
    """Greedy rollout of the baseline, constrained to the coordinate format."""
    v = model.vocab
    grid = image.grid
    with torch.no_grad():
        sess = model.begin_session(image, query)
        h = sess.feed(v.points_open)
        points: List[PixelPoint] = []
        parts: List[str] = []
        n_coord = 0
        while True:
            if len(points) >= max_points:
                break
            # stop/continue decision (also allows an empty list)
            logits = sess.lm_logits(h)
            best_digit = max(v.digits, key=lambda t: float(logits[t]))
            if float(logits[v.points_close]) >= float(logits[best_digit]):
                break
            tokens: List[str] = []
            for slot in range(TOKENS_PER_COORD_PAIR):
                if slot in (3, 7):
                    h = sess.feed(v.space)
                    tokens.append(SPACE)
                else:
                    logits = sess.lm_logits(h)
                    d = max(range(10), key=lambda i: float(logits[v.digits[i]]))
                    h = sess.feed(v.digits[d])
                    tokens.append(str(d))
            n_coord += TOKENS_PER_COORD_PAIR
            oid = None
            for _ in range(max_id_digits):
                logits = sess.lm_logits(h)
                legal = list(v.digits) + ([v.sep, v.points_close] if oid is not None else [])
                choice = max(legal, key=lambda t: float(logits[t]))
                if choice in v.digit_set:
                    d = v.digits.index(choice)
                    oid = d if oid is None else oid * 10 + d
                    h = sess.feed(choice)
                else:
                    break
            p = decode_text_point(tokens, grid)
            points.append(PixelPoint(p.x, p.y, 0, oid))
            parts.append("".join(tokens[0:3]) + " " + "".join(tokens[4:7]) + " " + str(oid))
            logits = sess.lm_logits(h)
            if float(logits[v.points_close]) >= float(logits[v.sep]):
                break
            h = sess.feed(v.sep)
    return TextDecodeResult(points, n_coord, "; ".join(parts))
