"""Grammar-constrained decoding of grounding tokens and the point-list text format.

The grounding grammar is (PATCH SUBPATCH LOCATION)* PATCH_done, with the list
terminator forced after the done class. Patch selections are monotone in token
index and may not reuse an (image token, subpatch) pair. The surface format is
``<points "`` G G G id ``, `` G G G id ... ``<patch done>">`` with the object id
as decimal text after its coordinates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import torch

from .geometry import GridSpec, PixelPoint, PointTriple, decode_triple
from . import heads

PHASE_TEXT = "text"
PHASE_EXPECT_SUBPATCH = "expect_subpatch"
PHASE_EXPECT_LOCATION = "expect_location"

NEXT_SUBPATCH = "subpatch"
NEXT_LOCATION = "location"
NEXT_TEXT = "text"
FORCE_TERMINATOR = "terminator"

LIST_OPEN = '<points "'
LIST_CLOSE = '">'
POINT_SEP = ", "


class ConstraintViolation(RuntimeError):
    """An illegal selection reached the state machine (a decoder bug)."""


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass
class DecodeState:
    """Cursor of one constrained generation session."""

    grid: GridSpec
    max_points: int = 256
    has_done: bool = True
    enforce_monotone: bool = True
    phase: str = PHASE_TEXT
    last_token_floor: int = 0
    used_pairs: Set[Tuple[int, int]] = field(default_factory=set)
    points_emitted: int = 0
    done: bool = False
    points: List[PointTriple] = field(default_factory=list)
    _pending_token: Optional[int] = None
    _pending_subpatch: Optional[int] = None
    _last_cell: Optional[Tuple[int, int]] = None

    @property
    def done_class(self) -> int:
        return self.grid.total_tokens

    def _subpatch_candidates(self, token_index: int) -> List[int]:
        k = self.grid.subpatches_per_token
        floor_sub = 0
        if (
            self.enforce_monotone
            and self._last_cell is not None
            and self._last_cell[0] == token_index
        ):
            floor_sub = self._last_cell[1]
        return [
            j
            for j in range(floor_sub, k)
            if (token_index, j) not in self.used_pairs
        ]

    def legal_patch_mask(self) -> torch.Tensor:
        """Boolean vector over I tokens (+ the done class last, when present)."""
        if self.phase != PHASE_TEXT or self.done:
            raise ConstraintViolation(f"patch selection illegal in phase {self.phase}")
        i = self.grid.total_tokens
        mask = torch.zeros(i + (1 if self.has_done else 0), dtype=torch.bool)
        if self.points_emitted < self.max_points:
            floor = self.last_token_floor if self.enforce_monotone else 0
            for tok in range(floor, i):
                if self._subpatch_candidates(tok):
                    mask[tok] = True
        if self.has_done:
            mask[i] = True
        return mask

    def legal_subpatch_mask(self, token_index: int) -> torch.Tensor:
        if self.phase != PHASE_EXPECT_SUBPATCH:
            raise ConstraintViolation(f"subpatch selection illegal in phase {self.phase}")
        k = self.grid.subpatches_per_token
        mask = torch.zeros(k, dtype=torch.bool)
        for j in self._subpatch_candidates(token_index):
            mask[j] = True
        return mask

    def step(self, kind: str, index: int) -> str:
        """Apply one grounding selection; return what the grammar forces next."""
        if kind == "patch":
            mask = self.legal_patch_mask()
            if index >= mask.shape[0] or not bool(mask[index]):
                raise ConstraintViolation(f"patch selection {index} is masked")
            if self.has_done and index == self.done_class:
                self.done = True
                return FORCE_TERMINATOR
            self._pending_token = index
            if self.enforce_monotone:
                self.last_token_floor = index
            self.phase = PHASE_EXPECT_SUBPATCH
            return NEXT_SUBPATCH
        if kind == "subpatch":
            assert self._pending_token is not None
            mask = self.legal_subpatch_mask(self._pending_token)
            if index >= mask.shape[0] or not bool(mask[index]):
                raise ConstraintViolation(f"subpatch selection {index} is masked")
            self._pending_subpatch = index
            self.phase = PHASE_EXPECT_LOCATION
            return NEXT_LOCATION
        if kind == "location":
            if self.phase != PHASE_EXPECT_LOCATION:
                raise ConstraintViolation(f"location selection illegal in phase {self.phase}")
            if not 0 <= index < 9:
                raise ConstraintViolation(f"location selection {index} out of range")
            tok, sub = self._pending_token, self._pending_subpatch
            self.points.append(PointTriple(tok, sub, index))
            self.used_pairs.add((tok, sub))
            self._last_cell = (tok, sub)
            self._pending_token = self._pending_subpatch = None
            self.points_emitted += 1
            self.phase = PHASE_TEXT
            return NEXT_TEXT
        raise ConstraintViolation(f"unknown selection kind {kind!r}")


def serialize_points(points: Sequence[PointTriple], include_done: bool = True) -> str:
    """Canonical surface string; 3 grounding tokens per point, id text after them."""
    parts = []
    for t in points:
        body = f"<patch {t.token_index}><sub {t.subpatch_index}><loc {t.location_index}>"
        if t.object_id is not None:
            body += str(t.object_id)
        parts.append(body)
    text = LIST_OPEN + POINT_SEP.join(parts)
    if include_done:
        text += "<patch done>"
    return text + LIST_CLOSE


_TOKEN_RE = re.compile(r"<patch (\d+|done)>|<sub (\d+)>|<loc (\d+)>|(\d+)|(, )")


def parse_points(text: str, grid: GridSpec) -> List[PointTriple]:
    """Invert serialize_points. Tolerates a missing or trailing separator."""
    if not text.startswith(LIST_OPEN):
        raise ParseError(f"expected {LIST_OPEN!r}", 0)
    if not text.endswith(LIST_CLOSE):
        raise ParseError(f"expected trailing {LIST_CLOSE!r}", len(text))
    pos, end = len(LIST_OPEN), len(text) - len(LIST_CLOSE)
    points: List[PointTriple] = []
    saw_done = False
    while pos < end:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError("unrecognized token", pos)
        if m.group(5) is not None:  # separator between points
            pos = m.end()
            continue
        if m.group(1) == "done":
            saw_done = True
            pos = m.end()
            if pos != end:
                raise ParseError("done marker must end the list", pos)
            break
        if m.group(1) is None:
            raise ParseError("expected <patch ...>", pos)
        token = int(m.group(1))
        pos = m.end()
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.group(2) is None:
            raise ParseError("expected <sub ...>", pos)
        sub = int(m.group(2))
        pos = m.end()
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.group(3) is None:
            raise ParseError("expected <loc ...>", pos)
        loc = int(m.group(3))
        pos = m.end()
        object_id = None
        m = _TOKEN_RE.match(text, pos)
        if m is not None and m.group(4) is not None:
            object_id = int(m.group(4))
            pos = m.end()
        if token >= grid.total_tokens:
            raise ParseError(f"token index {token} out of range", pos)
        if sub >= grid.subpatches_per_token:
            raise ParseError(f"subpatch index {sub} out of range", pos)
        if loc >= 9:
            raise ParseError(f"location index {loc} out of range", pos)
        points.append(PointTriple(token, sub, loc, object_id))
    del saw_done  # absent when the done class is ablated; both forms accepted
    return points


def grounding_token_count(text: str) -> int:
    """Number of grounding tokens in a serialized point list (includes the done marker)."""
    return len(re.findall(r"<patch (?:\d+|done)>|<sub \d+>|<loc \d+>", text))


@dataclass
class DecodeConfig:
    max_points: int = 256
    max_id_digits: int = 8
    enforce_monotone: bool = True
    step_fuse: Optional[int] = None  # absolute safety rail on fed tokens


@dataclass
class DecodeResult:
    points: List[PixelPoint]
    triples: List[PointTriple]
    text: str
    n_grounding_tokens: int


def _masked_argmax(scores: torch.Tensor, mask: torch.Tensor) -> int:
    masked = scores.masked_fill(~mask, float("-inf"))
    return int(torch.argmax(masked))


def decode(model, image, query: str, config: Optional[DecodeConfig] = None) -> DecodeResult:
    """Greedy constrained rollout; grounding triples converted back to pixels.

    ``model`` provides begin_session(image, query) -> session with fields
    ``ctx``, ``grounding_cache``, ``h`` and methods ``feed``/``lm_logits``
    (see backbone.ToyPointModel).
    """
    config = config or DecodeConfig()
    sess = model.begin_session(image, query)
    vocab = model.vocab
    params = model.grounding
    ctx = sess.ctx
    grid = ctx.grid
    state = DecodeState(
        grid=grid,
        max_points=config.max_points,
        has_done=params.use_done,
        enforce_monotone=config.enforce_monotone,
    )
    fuse = config.step_fuse or 20 * (3 * config.max_points + 8) + 200

    h = sess.feed(vocab.points_open)
    text_parts = [LIST_OPEN]
    ids: List[Optional[int]] = []
    n_grounding = 0
    last_selected: Optional[int] = None
    digits_in_id = 0
    # What the text grammar allows next: "patch" right after the opener or a
    # separator, "digit" right after a location, "choice" inside an id.
    expect = "patch"
    fed = 0

    def select_patch(h_state) -> str:
        nonlocal n_grounding, last_selected, h
        mask = state.legal_patch_mask()
        if not bool(mask.any()):
            raise ConstraintViolation("no legal patch selection")
        scores = heads.patch_scores(
            h_state, ctx, params, prev_selected=last_selected, cache=sess.grounding_cache
        )
        sel = _masked_argmax(scores, mask)
        directive = state.step("patch", sel)
        if directive == FORCE_TERMINATOR:
            h = sess.feed(vocab.patch)
            n_grounding += 1
            text_parts.append("<patch done>")
            return directive
        last_selected = sel
        h = sess.feed(vocab.patch, extra=heads.patch_feedback_embedding(
            model.vocab_embedding(vocab.patch), ctx, sel))
        n_grounding += 1
        text_parts.append(f"<patch {sel}>")
        return directive

    while fed < fuse:
        fed += 1
        if state.phase == PHASE_EXPECT_SUBPATCH:
            tok = state._pending_token
            mask = state.legal_subpatch_mask(tok)
            scores = heads.subpatch_scores(
                h, ctx.U[tok], params, cached_keys=sess.grounding_cache.subpatch_keys[tok]
            )
            sel = _masked_argmax(scores, mask)
            state.step("subpatch", sel)
            h = sess.feed(vocab.subpatch, extra=heads.subpatch_feedback_embedding(
                model.vocab_embedding(vocab.subpatch), ctx.U[tok], sel, params))
            n_grounding += 1
            text_parts.append(f"<sub {sel}>")
            continue
        if state.phase == PHASE_EXPECT_LOCATION:
            logits = heads.location_logits(h, params)
            sel = int(torch.argmax(logits))
            state.step("location", sel)
            h = sess.feed(vocab.location)
            n_grounding += 1
            text_parts.append(f"<loc {sel}>")
            ids.append(None)
            digits_in_id = 0
            expect = "digit"
            continue
        # phase == text
        if state.done:
            sess.feed(vocab.points_close)
            text_parts.append(LIST_CLOSE)
            break
        if expect == "patch":
            if params.use_done:
                directive = select_patch(h)
            else:
                # Without the done class the LM decides between pointing on and
                # stopping with the terminator.
                legal = [vocab.points_close]
                if bool(state.legal_patch_mask().any()):
                    legal.append(vocab.patch)
                logits = sess.lm_logits(h)
                choice = max(legal, key=lambda t: float(logits[t]))
                if choice == vocab.points_close:
                    sess.feed(vocab.points_close)
                    text_parts.append(LIST_CLOSE)
                    break
                select_patch(h)
            continue
        # expect == "digit" or "choice": id text
        logits = sess.lm_logits(h)
        if expect == "digit":
            legal_ids = list(vocab.digits)
        else:
            legal_ids = []
            if digits_in_id < config.max_id_digits:
                legal_ids.extend(vocab.digits)
            patch_possible = bool(state.legal_patch_mask().any())
            if patch_possible:
                legal_ids.append(vocab.sep)
                legal_ids.append(vocab.patch)
            if params.use_done:
                if not patch_possible:
                    legal_ids.append(vocab.patch)  # done is always reachable
            else:
                legal_ids.append(vocab.points_close)
        choice = max(legal_ids, key=lambda t: float(logits[t]))
        if choice in vocab.digit_set:
            d = vocab.digits.index(choice)
            ids[-1] = d if ids[-1] is None else ids[-1] * 10 + d
            digits_in_id += 1
            h = sess.feed(choice)
            text_parts.append(str(d))
            expect = "choice"
        elif choice == vocab.sep:
            h = sess.feed(choice)
            text_parts.append(POINT_SEP)
            expect = "patch"
        elif choice == vocab.patch:
            select_patch(h)
        else:  # points_close (done class ablated)
            sess.feed(vocab.points_close)
            text_parts.append(LIST_CLOSE)
            break
    else:
        raise RuntimeError("decode exceeded its step fuse; grammar bug")

    triples = [
        PointTriple(t.token_index, t.subpatch_index, t.location_index, ids[i])
        for i, t in enumerate(state.points)
    ]
    pixels = [decode_triple(grid, t) for t in triples]
    return DecodeResult(pixels, triples, "".join(text_parts), n_grounding)
