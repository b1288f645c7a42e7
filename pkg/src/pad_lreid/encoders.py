"""Prompt-injectable patch transformer and the frozen text transformer."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig


class VisualTriple(NamedTuple):
    v11: torch.Tensor  # class token after the penultimate block
    v12: torch.Tensor  # class token after the last block (post-norm)
    v_proj: torch.Tensor  # projected embedding used for retrieval and alignment


@dataclass
class RoutingRecord:
    selected: torch.Tensor  # (batch, layers, k) global slot indices
    intra_block_len: int  # sequence length seen by attention inside a block


class Attention(nn.Module):
    """Multi-head attention where queries and keys may come from different sequences.

    ``key_weights`` act as multiplicities on the softmax terms, so a weight of
    zero removes a key/value exactly and a weight of one is plain attention.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                key_weights: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, m, 2, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if key_weights is not None:
            scores = scores + torch.log(key_weights.clamp_min(1e-30))[:, None, None, :]
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor, prompts: torch.Tensor | None = None,
                prompt_weights: torch.Tensor | None = None) -> torch.Tensor:
        """Process ``x = [CLS, patches]``; prompts are inserted after CLS and stripped again.

        Only the original tokens are carried forward, so the prompt tokens act
        purely as extra keys and values for the block's attention.
        """
        h = self.ln_1(x)
        if prompts is None:
            x = x + self.attn(h)
        else:
            # prompts live in the normalized token space and skip ln_1
            context = torch.cat([h[:, :1], prompts, h[:, 1:]], dim=1)
            ones = h.new_ones(h.shape[0], 1)
            weights = torch.cat([ones, prompt_weights, ones.expand(-1, h.shape[1] - 1)], dim=1)
            x = x + self.attn(h, context, weights)
        return x + self.mlp(self.ln_2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ExperimentConfig, generator: torch.Generator | None = None):
        super().__init__()
        h, w, c = cfg.image_size
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch_size = p
        self.num_patches = (h // p) * (w // p)
        self.patch_embed = nn.Linear(p * p * c, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.num_patches, d))
        self.ln_pre = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads) for _ in range(cfg.num_layers))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.zeros(d, cfg.proj_dim))
        _init_transformer(self, generator)
        with torch.no_grad():
            self.cls_token.normal_(0.0, 0.02, generator=generator)
            self.pos_embed.normal_(0.0, 0.02, generator=generator)
            self.proj.normal_(0.0, d ** -0.5, generator=generator)

    def stem_parameters(self) -> list[nn.Parameter]:
        return [*self.patch_embed.parameters(), self.cls_token, self.pos_embed,
                *self.ln_pre.parameters()]

    def head_parameters(self) -> list[nn.Parameter]:
        return [*self.ln_post.parameters(), self.proj]

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        b, h, w, c = pixels.shape
        p = self.patch_size
        patches = pixels.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(b, (h // p) * (w // p), p * p * c)
        x = self.patch_embed(patches)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1) + self.pos_embed
        return self.ln_pre(x)

    def forward(self, pixels: torch.Tensor, pool=None) -> tuple[VisualTriple, RoutingRecord | None]:
        return encode_image(self, pool, pixels)


def _check_pixels(state: ImageEncoder, pixels: torch.Tensor) -> None:
    if pixels.dim() != 4:
        raise ValueError(f"expected (batch, H, W, C) pixels, got shape {tuple(pixels.shape)}")
    b, h, w, c = pixels.shape
    p = state.patch_size
    if (h // p) * (w // p) != state.num_patches or h % p or w % p or \
            c * p * p != state.patch_embed.in_features:
        raise ValueError(f"pixel shape {tuple(pixels.shape)} does not match the encoder")


def plain_forward(state: ImageEncoder, pixels: torch.Tensor) -> VisualTriple:
    """Promptless forward pass."""
    triple, _ = encode_image(state, None, pixels)
    return triple


def encode_image(state: ImageEncoder, pool, pixels: torch.Tensor) -> tuple[VisualTriple, RoutingRecord | None]:
    _check_pixels(state, pixels)
    use_pool = pool is not None and pool.num_active_slots > 0
    query = None
    if use_pool and not pool.per_layer_query:
        query = promptless_query(state, pixels)
    x = state.embed(pixels)
    n_blocks = len(state.blocks)
    v11 = x[:, 0]
    selected, seq_len = [], x.shape[1]
    for layer, blk in enumerate(state.blocks):
        if use_pool:
            q = F.normalize(x[:, 0].detach(), dim=-1) if pool.per_layer_query else query
            prompts, weights, idx = pool.layer_prompts(layer, q)
            selected.append(idx)
            seq_len = x.shape[1] + prompts.shape[1]
            x = blk(x, prompts, weights)
        else:
            x = blk(x)
        if layer == n_blocks - 2:
            v11 = x[:, 0]
    v12 = state.ln_post(x[:, 0])
    triple = VisualTriple(v11, v12, v12 @ state.proj)
    record = RoutingRecord(torch.stack(selected, dim=1), seq_len) if use_pool else None
    return triple, record


def promptless_query(state: ImageEncoder, pixels: torch.Tensor) -> torch.Tensor:
    """Unit-norm class-token feature of a promptless pass, used as the routing query."""
    with torch.no_grad():
        x = state.embed(pixels)
        for blk in state.blocks:
            x = blk(x)
        return F.normalize(state.ln_post(x[:, 0]), dim=-1)


def _init_transformer(module: nn.Module, generator: torch.Generator | None) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


# --- text side ------------------------------------------------------------------

TEMPLATE_PREFIX = ("a", "photo", "of", "a")
TEMPLATE_SUFFIX = ("person", ".")
VOCAB = ("<bos>", "<eos>", "a", "photo", "of", "person", ".") + tuple(
    f"w{i}" for i in range(57))
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}


@dataclass
class TokenSequence:
    """``[BOS, a, photo, of, a, slot_1..slot_M, person, ., EOS]`` with continuous slots."""

    prefix: list[int]
    slots: torch.Tensor  # (M, width)
    suffix: list[int]

    def __len__(self) -> int:
        return len(self.prefix) + self.slots.shape[0] + len(self.suffix)


def template_ids() -> tuple[list[int], list[int]]:
    prefix = [TOKEN_ID["<bos>"]] + [TOKEN_ID[t] for t in TEMPLATE_PREFIX]
    suffix = [TOKEN_ID[t] for t in TEMPLATE_SUFFIX] + [TOKEN_ID["<eos>"]]
    return prefix, suffix


class TextEncoder(nn.Module):
    """Small transformer fixed at construction; stands in for a pretrained text tower."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None, context_length: int = 16,
                 num_layers: int = 2):
        super().__init__()
        d = cfg.embed_dim
        g = torch.Generator().manual_seed(10_007 + (cfg.seed if seed is None else seed))
        self.width = d
        self.context_length = context_length
        self.token_embedding = nn.Embedding(len(VOCAB), d)
        self.pos_embed = nn.Parameter(torch.zeros(1, context_length, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads) for _ in range(num_layers))
        self.ln_final = nn.LayerNorm(d)
        self.text_proj = nn.Parameter(torch.zeros(d, cfg.proj_dim))
        _init_transformer(self, g)
        with torch.no_grad():
            self.token_embedding.weight.normal_(0.0, 1.0, generator=g)
            self.pos_embed.normal_(0.0, 0.1, generator=g)
            self.text_proj.normal_(0.0, d ** -0.5, generator=g)
        self.requires_grad_(False)

    def train(self, mode: bool = True) -> "TextEncoder":
        return super().train(False)

    def forward(self, slots: torch.Tensor) -> torch.Tensor:
        """Encode a batch of template sentences given their (batch, M, width) slot embeddings."""
        prefix, suffix = template_ids()
        b, m, _ = slots.shape
        n = len(prefix) + m + len(suffix)
        if n > self.context_length:
            raise ValueError(f"sequence length {n} exceeds context length {self.context_length}")
        table = self.token_embedding.weight
        pre = table[prefix].expand(b, -1, -1)
        suf = table[suffix].expand(b, -1, -1)
        x = torch.cat([pre, slots, suf], dim=1) + self.pos_embed[:, :n]
        for blk in self.blocks:
            x = blk(x)
        eos = self.ln_final(x[:, -1])
        return eos @ self.text_proj


def encode_text(state: TextEncoder, seq: TokenSequence) -> torch.Tensor:
    if seq.prefix != template_ids()[0] or seq.suffix != template_ids()[1]:
        raise ValueError("token sequence does not follow the fixed template")
    return state(seq.slots.unsqueeze(0))[0]
