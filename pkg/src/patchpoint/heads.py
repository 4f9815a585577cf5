"""Grounding scoring heads: patch selection, subpatch selection, location classification.

Patch scores are dot products between a query projected from the pointing
token's hidden state and keys projected from image-token hidden states, both
layer-normalized, scaled by 1/sqrt(M). Keys are rotated to their image-token
position and the query to the previously selected position, so scores depend
only on the relative offset. A learned done key at position 0 provides the
no-more-points class. Subpatch scores work the same way over the unpooled ViT
features of one token; the location head is a single 9-way linear layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .geometry import GridSpec

LN_EPS = 1e-5


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine layer norm over the last dimension (mean/variance, eps 1e-5)."""
    return torch.nn.functional.layer_norm(x, x.shape[-1:], gain, bias, LN_EPS)


_INV_FREQ_CACHE: dict = {}


def _inv_freq(m: int, rope_base: float, dtype: torch.dtype) -> torch.Tensor:
    key = (m, rope_base, dtype)
    cached = _INV_FREQ_CACHE.get(key)
    if cached is None:
        cached = rope_base ** (-torch.arange(0, m, 2, dtype=dtype) / m)
        _INV_FREQ_CACHE[key] = cached
    return cached


def rotary_rotate(v: torch.Tensor, position, rope_base: float = 10000.0) -> torch.Tensor:
    """Rotate interleaved dimension pairs (2j, 2j+1) by position * rope_base**(-2j/M).

    ``v`` is (..., M) with M even; ``position`` is a scalar or a tensor
    broadcastable against v's leading dimensions.
    """
    m = v.shape[-1]
    if m % 2 != 0:
        raise ValueError(f"rotary dimension must be even, got {m}")
    if not torch.is_tensor(position):
        position = torch.tensor(float(position), dtype=v.dtype, device=v.device)
    angles = position.to(v.dtype).unsqueeze(-1) * _inv_freq(m, rope_base, v.dtype)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = v[..., 0::2], v[..., 1::2]
    return torch.stack(
        [even * cos - odd * sin, even * sin + odd * cos], dim=-1
    ).flatten(-2)


class GroundingParams(nn.Module):
    """All learned tensors of the pointing heads.

    ``use_done=False`` drops the no-more-points key (ablation); ``use_rotary=False``
    skips the relative rotation in patch scoring.
    """

    def __init__(
        self,
        hidden_size: int,
        vit_size: int,
        head_width: int = 512,
        subpatch_head_width: Optional[int] = None,
        rope_base: float = 10000.0,
        use_rotary: bool = True,
        use_done: bool = True,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        m = head_width
        m_s = subpatch_head_width if subpatch_head_width is not None else m
        if m % 2 != 0 or m_s % 2 != 0:
            raise ValueError("head widths must be even (rotary pairs dimensions)")
        self.D, self.T, self.M, self.M_s = hidden_size, vit_size, m, m_s
        self.rope_base = rope_base
        self.use_rotary = use_rotary
        self.use_done = use_done

        def init(*shape, scale):
            w = torch.empty(*shape, dtype=dtype)
            w.normal_(0.0, scale, generator=generator)
            return nn.Parameter(w)

        d, t = hidden_size, vit_size
        self.W_pq = init(m, d, scale=1.0 / math.sqrt(d))
        self.W_pk = init(m, d, scale=1.0 / math.sqrt(d))
        self.patch_norm_gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.patch_norm_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        if use_done:
            self.h_done = init(m, scale=1.0 / math.sqrt(m))
        else:
            self.h_done = None
        self.W_sq = init(m_s, d, scale=1.0 / math.sqrt(d))
        self.W_sk = init(m_s, t, scale=1.0 / math.sqrt(t))
        self.subq_norm_gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.subq_norm_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.subk_norm_gain = nn.Parameter(torch.ones(t, dtype=dtype))
        self.subk_norm_bias = nn.Parameter(torch.zeros(t, dtype=dtype))
        self.W_se = init(d, t, scale=1.0 / math.sqrt(t))
        self.W_loc = init(9, d, scale=1.0 / math.sqrt(d))
        self.b_loc = nn.Parameter(torch.zeros(9, dtype=dtype))

    @property
    def n_patch_classes_extra(self) -> int:
        return 1 if self.use_done else 0


@dataclass
class ImageContext:
    """Backbone outputs addressable by token index.

    H_i, E_i: (D, I) hidden states / input embeddings of the image tokens.
    U: (I, T, K) unpooled ViT subpatch features, one T x K block per token.
    ``grid`` may be None for synthetic contexts (e.g. the empty I=0 case).
    """

    H_i: torch.Tensor
    E_i: torch.Tensor
    U: torch.Tensor
    grid: Optional[GridSpec] = None

    def __post_init__(self):
        if self.grid is not None:
            i = self.grid.total_tokens
            k = self.grid.subpatches_per_token
            if self.H_i.shape[1] != i or self.E_i.shape[1] != i:
                raise ValueError(f"expected {i} image-token columns, got {self.H_i.shape[1]}")
            if self.U.shape[0] != i or self.U.shape[2] != k:
                raise ValueError(f"U must be ({i}, T, {k}), got {tuple(self.U.shape)}")
        elif self.H_i.shape[1] != self.U.shape[0] or self.E_i.shape[1] != self.U.shape[0]:
            raise ValueError("H_i, E_i and U disagree on token count")

    @property
    def n_tokens(self) -> int:
        return self.H_i.shape[1]

    @classmethod
    def empty(
        cls, hidden_size: int, vit_size: int, subpatches: int = 4,
        dtype: torch.dtype = torch.float32,
    ) -> "ImageContext":
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(z(hidden_size, 0), z(hidden_size, 0), z(0, vit_size, subpatches))


@dataclass
class GroundingKeyCache:
    """Prefilled, unrotated grounding keys for one image context.

    ``subpatch_keys`` may be None for a patch-only cache (training reuses patch
    keys across steps but scores subpatches per selected token).
    """

    patch_keys: torch.Tensor  # (I, M)
    subpatch_keys: Optional[torch.Tensor]  # (I, K, M_s)
    done_key: Optional[torch.Tensor]  # (M,)
    # Derived fast path (training): keys pre-rotated to their positions with the
    # done row appended; not part of the cache's accounted storage.
    scoring_keys: Optional[torch.Tensor] = None

    @property
    def n_scalars(self) -> int:
        n = self.patch_keys.numel()
        if self.subpatch_keys is not None:
            n += self.subpatch_keys.numel()
        if self.done_key is not None:
            n += self.done_key.numel()
        return n


def _patch_keys(ctx: ImageContext, params: GroundingParams) -> torch.Tensor:
    """Unrotated patch keys, one row per image token: (I, M)."""
    normed = layer_norm(ctx.H_i.T, params.patch_norm_gain, params.patch_norm_bias)
    return normed @ params.W_pk.T


def _subpatch_keys(u_token: torch.Tensor, params: GroundingParams) -> torch.Tensor:
    """Subpatch keys for one token's (T, K) features: (K, M_s)."""
    normed = layer_norm(u_token.T, params.subk_norm_gain, params.subk_norm_bias)
    return normed @ params.W_sk.T


def patch_scores(
    h_p: torch.Tensor,
    ctx: ImageContext,
    params: GroundingParams,
    prev_selected: Optional[int] = None,
    cache: Optional[GroundingKeyCache] = None,
) -> torch.Tensor:
    """Score every image token (and the done class, appended last) for one query.

    No masking happens here; legality is the decoder's concern.
    """
    if h_p.shape != (params.D,):
        raise ValueError(f"h_p must be ({params.D},), got {tuple(h_p.shape)}")
    if not torch.all(torch.isfinite(h_p)):
        raise FloatingPointError("non-finite patch query hidden state")
    q = layer_norm(h_p, params.patch_norm_gain, params.patch_norm_bias) @ params.W_pq.T
    if params.use_rotary:
        p_q = 0 if prev_selected is None else int(prev_selected)
        q = rotary_rotate(q, p_q, params.rope_base)
    if cache is not None and cache.scoring_keys is not None:
        return cache.scoring_keys @ q / math.sqrt(params.M)
    keys = cache.patch_keys if cache is not None else _patch_keys(ctx, params)
    if params.use_rotary and keys.shape[0] > 0:
        positions = torch.arange(keys.shape[0], dtype=keys.dtype, device=keys.device)
        keys = rotary_rotate(keys, positions, params.rope_base)
    scores = keys @ q / math.sqrt(params.M)
    if params.use_done:
        done_key = cache.done_key if cache is not None else params.h_done
        done_score = (done_key @ q / math.sqrt(params.M)).reshape(1)
        scores = torch.cat([scores, done_score])
    return scores


def subpatch_scores(
    h_s: torch.Tensor,
    u_token: torch.Tensor,
    params: GroundingParams,
    cached_keys: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Score the K subpatches of one token. No rotary: subpatches are local."""
    if h_s.shape != (params.D,):
        raise ValueError(f"h_s must be ({params.D},), got {tuple(h_s.shape)}")
    if not torch.all(torch.isfinite(h_s)):
        raise FloatingPointError("non-finite subpatch query hidden state")
    q = layer_norm(h_s, params.subq_norm_gain, params.subq_norm_bias) @ params.W_sq.T
    keys = cached_keys if cached_keys is not None else _subpatch_keys(u_token, params)
    return keys @ q / math.sqrt(params.M_s)


def location_logits(h_l: torch.Tensor, params: GroundingParams) -> torch.Tensor:
    if h_l.shape != (params.D,):
        raise ValueError(f"h_l must be ({params.D},), got {tuple(h_l.shape)}")
    return params.W_loc @ h_l + params.b_loc


def patch_feedback_embedding(
    patch_vocab_embedding: torch.Tensor, ctx: ImageContext, selected: int
) -> torch.Tensor:
    """Input embedding of a patch token that selected image token ``selected``."""
    if not 0 <= selected < ctx.n_tokens:
        raise ValueError(f"selected token {selected} out of range [0, {ctx.n_tokens})")
    return patch_vocab_embedding + ctx.E_i[:, selected]


def subpatch_feedback_embedding(
    subpatch_vocab_embedding: torch.Tensor,
    u_token: torch.Tensor,
    selected: int,
    params: GroundingParams,
) -> torch.Tensor:
    """Input embedding of a subpatch token that selected subpatch ``selected``."""
    if not 0 <= selected < u_token.shape[1]:
        raise ValueError(f"selected subpatch {selected} out of range [0, {u_token.shape[1]})")
    return subpatch_vocab_embedding + params.W_se @ u_token[:, selected]


def prefill_cache(ctx: ImageContext, params: GroundingParams) -> GroundingKeyCache:
    """Compute all grounding keys once; scoring against the cache is bit-identical."""
    patch_keys = _patch_keys(ctx, params)
    if ctx.n_tokens > 0:
        sub_keys = torch.stack(
            [_subpatch_keys(ctx.U[i], params) for i in range(ctx.n_tokens)]
        )
    else:
        sub_keys = torch.zeros((0, ctx.U.shape[2], params.M_s), dtype=ctx.U.dtype)
    done = params.h_done if params.use_done else None
    return GroundingKeyCache(patch_keys, sub_keys, done)


def patch_key_cache(ctx: ImageContext, params: GroundingParams) -> GroundingKeyCache:
    """Patch-keys-only cache for teacher-forced training (gradients flow through)."""
    keys = _patch_keys(ctx, params)
    done = params.h_done if params.use_done else None
    scoring = keys
    if params.use_rotary and keys.shape[0] > 0:
        positions = torch.arange(keys.shape[0], dtype=keys.dtype, device=keys.device)
        scoring = rotary_rotate(keys, positions, params.rope_base)
    if done is not None:
        scoring = torch.cat([scoring, done.unsqueeze(0)])
    return GroundingKeyCache(keys, None, done, scoring_keys=scoring)
