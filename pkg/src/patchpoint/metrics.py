"""Pointing metrics and overlay rendering.

Matching is greedy nearest-first one-to-one within a pixel radius (a stand-in
for the mask-based matching used on full benchmarks; the default radius is one
location-cell diagonal so a decode in the correct cell always matches).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import GridSpec, PixelPoint


@dataclass(frozen=True)
class MatchConfig:
    match_radius_px: float

    def __post_init__(self):
        if self.match_radius_px <= 0:
            raise ValueError("match radius must be positive")

    @classmethod
    def for_grid(cls, grid: GridSpec) -> "MatchConfig":
        return cls(grid.vit_patch_px / 3.0 * math.sqrt(2.0))


@dataclass
class MetricsReport:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    count_accuracy: float = 0.0
    close_accuracy: float = 0.0
    overcount_rate: float = 0.0
    n_examples: int = 0
    n_empty_pred_nonempty_gt: int = 0  # examples where P=1 is the empty-pred convention

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "count_accuracy": self.count_accuracy,
            "close_accuracy": self.close_accuracy,
            "overcount_rate": self.overcount_rate,
            "n_examples": self.n_examples,
            "n_empty_pred_nonempty_gt": self.n_empty_pred_nonempty_gt,
            "matching": "greedy nearest-first within radius (stand-in for mask-based)",
        }


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def point_prf(
    preds: Sequence[PixelPoint], gts: Sequence[PixelPoint], cfg: MatchConfig
) -> Tuple[float, float, float]:
    """Greedy nearest-first one-to-one matching within the radius, frames kept apart."""
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.frame != g.frame:
                continue
            d = math.hypot(p.x - g.x, p.y - g.y)
            if d <= cfg.match_radius_px:
                pairs.append((d, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    matched = 0
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matched += 1
    p = 1.0 if not preds else matched / len(preds)
    r = 1.0 if not gts else matched / len(gts)
    return p, r, _f1(p, r)


def count_metrics(pred_n: int, gt_n: int) -> Tuple[bool, bool, bool]:
    """(correct, close, overcount): close uses delta = 1 + floor(0.05 * gt);
    overcount means > 10 points and at least twice the ground truth."""
    if pred_n < 0 or gt_n < 0:
        raise ValueError("counts must be non-negative")
    delta = 1 + gt_n // 20  # floor(0.05 * gt) in exact integer arithmetic
    correct = pred_n == gt_n
    close = abs(pred_n - gt_n) <= delta
    overcount = pred_n > 10 and pred_n >= 2 * gt_n
    return correct, close, overcount


def aggregate_reports(
    per_example: Sequence[Tuple[Sequence[PixelPoint], Sequence[PixelPoint]]],
    cfg: MatchConfig,
) -> MetricsReport:
    """Average per-example metrics over (preds, gts) pairs."""
    rep = MetricsReport(n_examples=len(per_example))
    if not per_example:
        return rep
    ps, rs, f1s, cor, clo, ovr = [], [], [], [], [], []
    for preds, gts in per_example:
        p, r, f1 = point_prf(preds, gts, cfg)
        if not preds and gts:
            rep.n_empty_pred_nonempty_gt += 1
        ps.append(p)
        rs.append(r)
        f1s.append(f1)
        c, cl, ov = count_metrics(len(preds), len(gts))
        cor.append(c)
        clo.append(cl)
        ovr.append(ov)
    rep.precision = float(np.mean(ps))
    rep.recall = float(np.mean(rs))
    rep.f1 = float(np.mean(f1s))
    rep.count_accuracy = float(np.mean(cor))
    rep.close_accuracy = float(np.mean(clo))
    rep.overcount_rate = float(np.mean(ovr))
    return rep


# ---------------------------------------------------------------------------
# Overlay rendering (binary PPM, deterministic bytes)

_PALETTE = [
    (239, 71, 111),
    (255, 209, 102),
    (6, 214, 160),
    (17, 138, 178),
    (7, 59, 76),
    (144, 103, 198),
    (244, 162, 97),
    (38, 70, 83),
]
_GT_COLOR = (0, 255, 0)
_PRED_COLOR = (255, 0, 0)


def _px(v: float) -> int:
    return int(math.floor(v + 0.5))


def render_overlay(image, preds: Sequence[PixelPoint], gts: Sequence[PixelPoint], path) -> None:
    """Write a binary PPM: frames tiled horizontally, gt crosses, pred circles.

    ``image`` is a backbone.SyntheticImage; pass None to draw on a gray canvas
    sized from the points (then everything lands on frame 0's panel).
    """
    if image is not None:
        grid = image.grid
        w, h, n_frames = grid.image_width_px, grid.image_height_px, grid.n_frames
    else:
        w = max([int(p.x) + 2 for p in list(preds) + list(gts)] + [16])
        h = max([int(p.y) + 2 for p in list(preds) + list(gts)] + [16])
        n_frames = max([p.frame for p in list(preds) + list(gts)] + [0]) + 1
    canvas = np.full((h, w * n_frames, 3), 224, dtype=np.uint8)

    if image is not None:
        sub = image.vit_patch_px
        for f in range(n_frames):
            for r in range(image.cells.shape[1]):
                for c in range(image.cells.shape[2]):
                    color = _PALETTE[int(image.cells[f, r, c]) % len(_PALETTE)]
                    y0, y1 = r * sub, min((r + 1) * sub, h)
                    x0, x1 = c * sub, min((c + 1) * sub, w)
                    if y0 < h and x0 < w:
                        canvas[y0:y1, f * w + x0 : f * w + x1] = color

    def put(x: int, y: int, color):
        if 0 <= y < canvas.shape[0] and 0 <= x < canvas.shape[1]:
            canvas[y, x] = color

    for g in gts:
        cx, cy = _px(g.x) + g.frame * w, _px(g.y)
        for k in range(-3, 4):
            put(cx + k, cy, _GT_COLOR)
            put(cx, cy + k, _GT_COLOR)
    for p in preds:
        cx, cy = _px(p.x) + p.frame * w, _px(p.y)
        for dy in range(-4, 5):
            for dx in range(-4, 5):
                d2 = dx * dx + dy * dy
                if 7 <= d2 <= 13:  # ring of radius ~3
                    put(cx + dx, cy + dy, _PRED_COLOR)

    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (canvas.shape[1], canvas.shape[0]))
        f.write(canvas.tobytes())
