"""Toy trainable backbone: a small pre-norm causal transformer plus a mock ViT.

The mock ViT turns a synthetic color-cell image into per-subpatch features and
pooled image-token embeddings. The transformer consumes image-token embeddings,
query text, then the response tokens; grounding selections are predicted from
the hidden state immediately before each grounding token, and the selection's
feedback embedding rides on that token's own input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import heads
from .geometry import GridSpec, build_grid
from .heads import GroundingParams, ImageContext, rotary_rotate
from .targets import (
    PointAnnotation,
    SupervisionStep,
    build_targets,
    prepare_triples,
)

QUERY_WORDS = ["point", "to", "all", "cells", "of", "color"]


class Vocab:
    """Deterministic toy vocabulary: format markers, grounding tokens, digits, words."""

    def __init__(self, n_colors: int):
        self.n_colors = n_colors
        names = ["<points_open>", "<points_close>", "<sep>", "<sp>",
                 "<patch>", "<subpatch>", "<location>"]
        names += [str(d) for d in range(10)]
        names += QUERY_WORDS
        names += [f"c{i}" for i in range(n_colors)]
        self.names = names
        self.ids = {n: i for i, n in enumerate(names)}
        self.points_open = self.ids["<points_open>"]
        self.points_close = self.ids["<points_close>"]
        self.sep = self.ids["<sep>"]
        self.space = self.ids["<sp>"]
        self.patch = self.ids["<patch>"]
        self.subpatch = self.ids["<subpatch>"]
        self.location = self.ids["<location>"]
        self.digits = [self.ids[str(d)] for d in range(10)]
        self.digit_set = frozenset(self.digits)

    def __len__(self) -> int:
        return len(self.names)

    def encode_query(self, query: str) -> List[int]:
        try:
            return [self.ids[w] for w in query.split()]
        except KeyError as e:
            raise ValueError(f"query word {e} not in vocabulary") from None

    def digit_ids(self, value: int) -> List[int]:
        return [self.digits[int(c)] for c in str(value)]


@dataclass(frozen=True)
class ToyModelConfig:
    hidden_size: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vit_size: int = 32
    context_len: int = 512
    n_colors: int = 8
    head_width: int = 512
    rope_base: float = 10000.0
    noise_sigma: float = 0.05
    use_rotary: bool = True
    use_done: bool = True

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise ValueError("hidden_size must be divisible by n_heads")
        if (self.hidden_size // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary")


@dataclass
class SyntheticImage:
    """Categorical color labels at subpatch resolution, plus a noise seed."""

    width: int
    height: int
    cells: np.ndarray  # (n_frames, subpatch_rows, subpatch_cols) int
    noise_seed: int = 0
    vit_patch_px: int = 14
    pool_side: int = 2

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.ndim != 3:
            raise ValueError("cells must be (n_frames, rows, cols)")
        g = self.grid
        if self.cells.shape[1:] != (g.subpatch_rows, g.subpatch_cols):
            raise ValueError(
                f"cells {self.cells.shape[1:]} do not match subpatch grid "
                f"({g.subpatch_rows}, {g.subpatch_cols})"
            )

    @property
    def n_frames(self) -> int:
        return self.cells.shape[0]

    @property
    def grid(self) -> GridSpec:
        return build_grid(self.width, self.height, self.cells.shape[0],
                          self.vit_patch_px, self.pool_side)

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "vit_patch_px": self.vit_patch_px,
            "pool_side": self.pool_side,
            "cells": self.cells.tolist(),
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticImage":
        return cls(d["width"], d["height"], np.asarray(d["cells"]), d["noise_seed"],
                   d.get("vit_patch_px", 14), d.get("pool_side", 2))


def _sinusoid(position: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed sinusoidal code: (..., dim) from integer positions."""
    half = dim // 2
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1)
    )
    ang = position.to(dtype).unsqueeze(-1) * freq
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class MockViT(nn.Module):
    """Subpatch feature = color embedding + sinusoidal position code + seeded noise;
    image-token embedding = learned projection of the mean of its K features."""

    def __init__(self, n_colors: int, vit_size: int, hidden_size: int, noise_sigma: float):
        super().__init__()
        self.color_emb = nn.Embedding(n_colors, vit_size)
        self.pool_proj = nn.Linear(vit_size, hidden_size)
        self.noise_sigma = noise_sigma

    def forward(self, image: SyntheticImage) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return U (I, T, K) and E (D, I)."""
        grid = image.grid
        dtype = self.color_emb.weight.dtype
        n_f, rows, cols = image.cells.shape
        labels = torch.as_tensor(image.cells.reshape(-1))
        feats = self.color_emb(labels)  # (n_f*rows*cols, T)
        pos = torch.arange(n_f * rows * cols)
        feats = feats + _sinusoid(pos, feats.shape[-1], dtype)
        if self.noise_sigma > 0:
            g = torch.Generator().manual_seed(image.noise_seed)
            noise = torch.randn(feats.shape, generator=g, dtype=torch.float32)
            feats = feats + self.noise_sigma * noise.to(dtype)
        feats = feats.reshape(n_f, rows, cols, -1)

        per_token = []
        ps = grid.pool_side
        for f in range(n_f):
            for tr in range(grid.tokens_per_col):
                for tc in range(grid.tokens_per_row):
                    block = feats[f, tr * ps : (tr + 1) * ps, tc * ps : (tc + 1) * ps]
                    per_token.append(block.reshape(ps * ps, -1).T)  # (T, K)
        u = torch.stack(per_token)  # (I, T, K)
        pooled = self.pool_proj(u.mean(dim=2))  # (I, D)
        return u, pooled.T


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, rope_base: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.rope_base = rope_base
        self.ln1 = nn.LayerNorm(d)
        self.attn_qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp_in = nn.Linear(d, 4 * d)
        self.mlp_out = nn.Linear(4 * d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (L, D) -> (heads, L, head_dim)
        return x.reshape(x.shape[0], self.n_heads, self.head_dim).transpose(0, 1)

    def attend(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        kv: Optional[dict] = None,
    ) -> torch.Tensor:
        """Causal attention over x (L, D); with ``kv`` given, appends to the cache
        and attends over everything cached (incremental decoding)."""
        normed = self.ln1(x)
        qkv = self.attn_qkv(normed)
        q, k, v = qkv.chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        q = rotary_rotate(q, positions, self.rope_base)
        k = rotary_rotate(k, positions, self.rope_base)
        if kv is not None:
            if kv.get("k") is not None:
                k = torch.cat([kv["k"], k], dim=1)
                v = torch.cat([kv["v"], v], dim=1)
            kv["k"], kv["v"] = k, v
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        l_q, l_k = q.shape[1], k.shape[1]
        if l_q > 1:
            mask = torch.triu(
                torch.ones(l_q, l_k, dtype=torch.bool), diagonal=1 + (l_k - l_q)
            )
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(0, 1).reshape(l_q, -1)
        return self.attn_out(out)

    def forward(self, x, positions, kv=None):
        x = x + self.attend(x, positions, kv)
        x = x + self.mlp_out(F.gelu(self.mlp_in(x)))
        return x


class ToyTransformer(nn.Module):
    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            Block(cfg.hidden_size, cfg.n_heads, cfg.rope_base) for _ in range(cfg.n_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_size)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(L, D) -> (L, D) final-layer hidden states (post final norm)."""
        l = embeddings.shape[0]
        if l > self.cfg.context_len:
            raise ValueError(f"sequence length {l} exceeds context {self.cfg.context_len}")
        positions = torch.arange(l)
        x = embeddings
        for block in self.blocks:
            x = block(x, positions)
        return self.final_norm(x)

    def prefill(self, embeddings: torch.Tensor) -> Tuple[torch.Tensor, List[dict]]:
        l = embeddings.shape[0]
        if l > self.cfg.context_len:
            raise ValueError(f"sequence length {l} exceeds context {self.cfg.context_len}")
        caches: List[dict] = [{} for _ in self.blocks]
        positions = torch.arange(l)
        x = embeddings
        for block, kv in zip(self.blocks, caches):
            x = block(x, positions, kv)
        return self.final_norm(x), caches

    def step(self, embedding: torch.Tensor, caches: List[dict]) -> torch.Tensor:
        pos = caches[0]["k"].shape[1]
        if pos + 1 > self.cfg.context_len:
            raise ValueError("context length exceeded during decoding")
        x = embedding.unsqueeze(0)
        positions = torch.arange(pos, pos + 1)
        for block, kv in zip(self.blocks, caches):
            x = block(x, positions, kv)
        return self.final_norm(x)[0]


@dataclass
class AssembledExample:
    embeddings: torch.Tensor  # (L, D)
    ctx: ImageContext  # H_i is a placeholder until the forward pass fills it
    lm_positions: List[int]  # hidden-state positions with an LM target
    lm_targets: List[int]  # vocab ids predicted at those positions
    patch_evals: List[Tuple[int, SupervisionStep]]
    subpatch_evals: List[Tuple[int, SupervisionStep]]
    location_evals: List[Tuple[int, SupervisionStep]]
    response_ids: List[int]
    n_grounding_steps: int


@dataclass
class DecodeSession:
    """Incremental generation cursor handed to the constrained decoder."""

    model: "ToyPointModel"
    ctx: ImageContext
    grounding_cache: heads.GroundingKeyCache
    caches: List[dict]
    h: torch.Tensor

    def feed(self, token_id: int, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        emb = extra if extra is not None else self.model.vocab_embedding(token_id)
        self.h = self.model.transformer.step(emb, self.caches)
        return self.h

    def lm_logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.model.lm_head(h)


class ToyPointModel(nn.Module):
    """Backbone + mock ViT + (for the grounding head) the pointing parameters."""

    def __init__(self, cfg: ToyModelConfig, head: str = "grounding", seed: int = 0):
        super().__init__()
        if head not in ("grounding", "text"):
            raise ValueError(f"unknown head {head!r}")
        torch.manual_seed(seed)
        self.cfg = cfg
        self.head = head
        self.seed = seed
        self.vocab = Vocab(cfg.n_colors)
        d = cfg.hidden_size
        self.tok_emb = nn.Embedding(len(self.vocab), d)
        self.transformer = ToyTransformer(cfg)
        self.lm_head = nn.Linear(d, len(self.vocab))
        self.vit = MockViT(cfg.n_colors, cfg.vit_size, d, cfg.noise_sigma)
        if head == "grounding":
            self.grounding = GroundingParams(
                hidden_size=d,
                vit_size=cfg.vit_size,
                head_width=cfg.head_width,
                rope_base=cfg.rope_base,
                use_rotary=cfg.use_rotary,
                use_done=cfg.use_done,
            )
        else:
            self.grounding = None

    # -- parameter groups -------------------------------------------------
    def pointing_parameters(self):
        return [] if self.grounding is None else list(self.grounding.parameters())

    def base_parameters(self):
        pointing = {id(p) for p in self.pointing_parameters()}
        return [p for p in self.parameters() if id(p) not in pointing]

    def vocab_embedding(self, token_id: int) -> torch.Tensor:
        return self.tok_emb.weight[token_id]

    # -- sequence assembly -------------------------------------------------
    def assemble_inputs(
        self,
        image: SyntheticImage,
        query: str,
        annotation: PointAnnotation,
        point_sorting: bool = True,
    ) -> AssembledExample:
        if self.grounding is None:
            raise RuntimeError("assemble_inputs requires the grounding head")
        grid = image.grid
        u, e = self.vit(image)
        ctx = ImageContext(torch.zeros_like(e), e, u, grid)
        triples = prepare_triples(grid, annotation.points, point_sorting)
        steps = build_targets(
            grid, annotation, point_sorting=point_sorting,
            no_more_points=self.grounding.use_done,
        )

        v = self.vocab
        n_img = grid.total_tokens
        query_ids = v.encode_query(query)
        embs: List[torch.Tensor] = [e[:, i] for i in range(n_img)]
        embs += [self.vocab_embedding(t) for t in query_ids]

        resp_ids: List[int] = []
        resp_embs: List[torch.Tensor] = []

        def emit(token_id: int, emb: Optional[torch.Tensor] = None):
            resp_ids.append(token_id)
            resp_embs.append(emb if emb is not None else self.vocab_embedding(token_id))

        patch_evals: List[Tuple[int, SupervisionStep]] = []
        subpatch_evals: List[Tuple[int, SupervisionStep]] = []
        location_evals: List[Tuple[int, SupervisionStep]] = []
        resp_start = n_img + len(query_ids)

        def state_pos() -> int:
            # hidden state from which the NEXT emitted token is predicted
            return resp_start + len(resp_ids) - 1

        emit(v.points_open)
        for k, t in enumerate(triples):
            p_step, s_step, l_step = steps[3 * k], steps[3 * k + 1], steps[3 * k + 2]
            if k > 0:
                emit(v.sep)
            patch_evals.append((state_pos(), p_step))
            emit(v.patch, heads.patch_feedback_embedding(
                self.vocab_embedding(v.patch), ctx, p_step.target_index))
            subpatch_evals.append((state_pos(), s_step))
            emit(v.subpatch, heads.subpatch_feedback_embedding(
                self.vocab_embedding(v.subpatch), u[s_step.token_index],
                s_step.target_index, self.grounding))
            location_evals.append((state_pos(), l_step))
            emit(v.location)
            oid = t.object_id if t.object_id is not None else k + 1
            for d in v.digit_ids(oid):
                emit(d)
        if self.grounding.use_done:
            patch_evals.append((state_pos(), steps[-1]))
            emit(v.patch)  # done: bare vocabulary embedding, nothing selected
        emit(v.points_close)

        embeddings = torch.stack(embs + resp_embs)
        lm_positions = list(range(resp_start - 1, embeddings.shape[0] - 1))
        return AssembledExample(
            embeddings=embeddings,
            ctx=ctx,
            lm_positions=lm_positions,
            lm_targets=resp_ids,
            patch_evals=patch_evals,
            subpatch_evals=subpatch_evals,
            location_evals=location_evals,
            response_ids=resp_ids,
            n_grounding_steps=len(steps),
        )

    # -- inference ---------------------------------------------------------
    def begin_session(self, image: SyntheticImage, query: str) -> DecodeSession:
        grid = image.grid
        u, e = self.vit(image)
        prompt = torch.cat([e.T, self.tok_emb.weight[self.vocab.encode_query(query)]])
        hidden, caches = self.transformer.prefill(prompt)
        ctx = ImageContext(hidden[: grid.total_tokens].T, e, u, grid)
        gcache = heads.prefill_cache(ctx, self.grounding) if self.grounding else None
        return DecodeSession(self, ctx, gcache, caches, hidden[-1])

    # -- checkpointing -----------------------------------------------------
    def save(self, path, extra_config: Optional[dict] = None) -> None:
        tensors = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        config = {
            "model": {
                "hidden_size": self.cfg.hidden_size,
                "n_layers": self.cfg.n_layers,
                "n_heads": self.cfg.n_heads,
                "vit_size": self.cfg.vit_size,
                "context_len": self.cfg.context_len,
                "n_colors": self.cfg.n_colors,
                "head_width": self.cfg.head_width,
                "rope_base": self.cfg.rope_base,
                "noise_sigma": self.cfg.noise_sigma,
                "use_rotary": self.cfg.use_rotary,
                "use_done": self.cfg.use_done,
            },
            "head": self.head,
        }
        if extra_config:
            config.update(extra_config)
        ckpt.save_checkpoint(path, tensors, config)

    @classmethod
    def load(cls, path) -> "ToyPointModel":
        tensors, config = ckpt.load_checkpoint(path)
        cfg = ToyModelConfig(**config["model"])
        model = cls(cfg, head=config.get("head", "grounding"))
        state = {k: torch.from_numpy(v) for k, v in tensors.items()}
        model.load_state_dict(state)
        return model


def grounding_example_loss(
    model: ToyPointModel,
    image: SyntheticImage,
    query: str,
    annotation: PointAnnotation,
    point_sorting: bool = True,
):
    """Teacher-forced forward pass; returns (LossBreakdown, AssembledExample)."""
    from .targets import combine_losses, grounding_step_loss

    asm = model.assemble_inputs(image, query, annotation, point_sorting)
    hidden = model.transformer(asm.embeddings)
    n_img = asm.ctx.E_i.shape[1]
    asm.ctx.H_i = hidden[:n_img].T

    logits = model.lm_head(hidden[asm.lm_positions])
    targets = torch.tensor(asm.lm_targets, dtype=torch.long)
    llm_losses = F.cross_entropy(logits, targets, reduction="none")

    params = model.grounding
    key_cache = heads.patch_key_cache(asm.ctx, params)
    zero = hidden.sum() * 0.0
    l_p = zero.clone()
    for pos, step in asm.patch_evals:
        scores = heads.patch_scores(
            hidden[pos], asm.ctx, params, prev_selected=step.rotary_prev, cache=key_cache
        )
        l_p = l_p + grounding_step_loss(scores, step)
    l_s = zero.clone()
    for pos, step in asm.subpatch_evals:
        scores = heads.subpatch_scores(hidden[pos], asm.ctx.U[step.token_index], params)
        l_s = l_s + grounding_step_loss(scores, step)
    l_loc = zero.clone()
    for pos, step in asm.location_evals:
        l_loc = l_loc + grounding_step_loss(heads.location_logits(hidden[pos], params), step)

    breakdown = combine_losses(
        list(llm_losses), l_p, l_s, l_loc, n_grounding_steps=asm.n_grounding_steps
    )
    return breakdown, asm
