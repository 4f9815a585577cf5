"""Teacher-forcing supervision sequences and grounding losses.

Ground-truth points are sorted by where their image tokens appear in the input,
each point contributes a patch/subpatch/location step, and the list ends with a
patch step assigned the done class. Patch candidates below the previously
selected token are masked during both training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import torch

from .geometry import GridSpec, PixelPoint, PointTriple, encode_point

PATCH, SUBPATCH, LOCATION = "patch", "subpatch", "location"


class DuplicatePointError(ValueError):
    """Two ground-truth points share an (image token, subpatch) cell."""


class MaskedTargetError(RuntimeError):
    """A supervision target is illegal under its own step mask."""


@dataclass(frozen=True)
class SupervisionStep:
    kind: str
    target_index: int
    legal_floor: int = 0  # patch steps: candidates below this token are masked
    rotary_prev: int = 0  # patch steps: query rotary position (previous selection)
    token_index: Optional[int] = None  # subpatch steps: which token's features to score


@dataclass
class PointAnnotation:
    """Labeled point list for one query, on the grid it was annotated against."""

    grid: GridSpec
    points: List[PixelPoint] = field(default_factory=list)


@dataclass
class LossBreakdown:
    l_p: Union[float, torch.Tensor]
    l_s: Union[float, torch.Tensor]
    l_loc: Union[float, torch.Tensor]
    llm_token_loss_sum: Union[float, torch.Tensor]
    n_tokens: int
    total: Union[float, torch.Tensor]

    def as_floats(self) -> dict:
        def f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return {
            "l_p": f(self.l_p),
            "l_s": f(self.l_s),
            "l_loc": f(self.l_loc),
            "llm_token_loss_sum": f(self.llm_token_loss_sum),
            "n_tokens": self.n_tokens,
            "total": f(self.total),
        }


def sort_points(grid: GridSpec, points: Sequence[PixelPoint]) -> List[PointTriple]:
    """Encode and stably sort by (token, subpatch, location); reject duplicates."""
    triples = [encode_point(grid, p) for p in points]
    triples.sort(key=lambda t: (t.token_index, t.subpatch_index, t.location_index))
    seen = set()
    for t in triples:
        cell = (t.token_index, t.subpatch_index)
        if cell in seen:
            raise DuplicatePointError(
                f"two points share token {t.token_index}, subpatch {t.subpatch_index}"
            )
        seen.add(cell)
    return triples


def prepare_triples(
    grid: GridSpec, points: Sequence[PixelPoint], point_sorting: bool = True
) -> List[PointTriple]:
    """Encode points, sorting them unless the sorting ablation is active."""
    if point_sorting:
        return sort_points(grid, points)
    triples = [encode_point(grid, p) for p in points]
    seen = set()
    for t in triples:
        cell = (t.token_index, t.subpatch_index)
        if cell in seen:
            raise DuplicatePointError(
                f"two points share token {t.token_index}, subpatch {t.subpatch_index}"
            )
        seen.add(cell)
    return triples


def build_targets(
    grid: GridSpec,
    annotation: PointAnnotation,
    point_sorting: bool = True,
    no_more_points: bool = True,
) -> List[SupervisionStep]:
    """Emit 3n+1 supervision steps for n points (3n when the done class is ablated)."""
    triples = prepare_triples(grid, annotation.points, point_sorting)
    steps: List[SupervisionStep] = []
    prev = 0
    for t in triples:
        floor = prev if point_sorting else 0
        steps.append(SupervisionStep(PATCH, t.token_index, floor, rotary_prev=prev))
        steps.append(SupervisionStep(SUBPATCH, t.subpatch_index, token_index=t.token_index))
        steps.append(SupervisionStep(LOCATION, t.location_index))
        prev = t.token_index
    if no_more_points:
        floor = prev if point_sorting else 0
        steps.append(SupervisionStep(PATCH, grid.total_tokens, floor, rotary_prev=prev))
    return steps


def grounding_step_loss(scores: torch.Tensor, step: SupervisionStep) -> torch.Tensor:
    """Cross-entropy of the masked softmax at the step's target.

    For patch steps, candidates below ``legal_floor`` are removed before the
    softmax; the done class (last entry, when present) is always legal.
    """
    n = scores.shape[0]
    if not 0 <= step.target_index < n:
        raise MaskedTargetError(f"target {step.target_index} outside {n} classes")
    if step.kind == PATCH and step.legal_floor > 0:
        if step.target_index < step.legal_floor:
            raise MaskedTargetError(
                f"patch target {step.target_index} is masked by floor {step.legal_floor}"
            )
        masked = scores.clone()
        masked[: step.legal_floor] = float("-inf")
        scores = masked
    return -torch.log_softmax(scores, dim=0)[step.target_index]


def teacher_force_select(step: SupervisionStep) -> int:
    """Training uses the ground-truth selection regardless of scores."""
    return step.target_index


def combine_losses(
    llm_losses: Sequence[Union[float, torch.Tensor]],
    l_p: Union[float, torch.Tensor] = 0.0,
    l_s: Union[float, torch.Tensor] = 0.0,
    l_loc: Union[float, torch.Tensor] = 0.0,
    n_grounding_steps: int = 0,
) -> LossBreakdown:
    """Average the grounding losses into the token-level loss.

    total = (sum(llm_losses) + l_p + l_s + l_loc) / n_tokens, where n_tokens
    counts every supervised position: LM-supervised tokens plus grounding steps.
    """
    n_tokens = len(llm_losses) + n_grounding_steps
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    llm_sum = sum(llm_losses) if len(llm_losses) > 0 else 0.0
    total = (llm_sum + l_p + l_s + l_loc) / n_tokens
    return LossBreakdown(l_p, l_s, l_loc, llm_sum, n_tokens, total)
