"""Textual context prompts (TA-Prompt) and the visual prompt pool (VA-Prompt)."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, slot_ranges
from .encoders import ImageEncoder, TextEncoder, TokenSequence, promptless_query, template_ids


class TAPrompt(nn.Module):
    """Per-identity learnable context tokens, stored as one block of rows per domain."""

    def __init__(self, domain_ids: list[list[int]], n_tokens: int, width: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.width = width
        self.rows = nn.ParameterList(
            nn.Parameter(torch.zeros(len(ids), n_tokens, width)) for ids in domain_ids)
        self.index: dict[int, tuple[int, int]] = {}
        for t, ids in enumerate(domain_ids):
            for r, i in enumerate(ids):
                self.index[i] = (t, r)
        self.register_buffer("registered_mask", torch.zeros(len(domain_ids), dtype=torch.bool))

    @property
    def registered(self) -> list[int]:
        return torch.nonzero(self.registered_mask).flatten().tolist()

    def register_domain(self, t: int, generator: torch.Generator) -> None:
        if bool(self.registered_mask[t]):
            return
        with torch.no_grad():
            self.rows[t].normal_(0.0, 0.02, generator=generator)
        self.registered_mask[t] = True

    def ids_of(self, t: int) -> list[int]:
        return [i for i, (d, _) in self.index.items() if d == t]

    def known_ids(self) -> list[int]:
        done = self.registered
        return [i for i, (d, _) in self.index.items() if d in done]

    def context(self, ids: list[int]) -> torch.Tensor:
        """(len(ids), M, width) context embeddings, differentiable w.r.t. trainable rows."""
        done = self.registered
        missing = [i for i in ids if i not in self.index or self.index[i][0] not in done]
        if missing:
            raise KeyError(f"identities not registered in TA-Prompt: {missing[:5]}")
        return torch.stack([self.rows[self.index[i][0]][self.index[i][1]] for i in ids])


def tokenize_template(identity: int, ta: TAPrompt) -> TokenSequence:
    prefix, suffix = template_ids()
    return TokenSequence(prefix, ta.context([identity])[0], suffix)


def text_features(text: TextEncoder, ta: TAPrompt, ids: list[int], normalize: bool = True) -> torch.Tensor:
    out = text(ta.context(ids))
    return F.normalize(out, dim=-1) if normalize else out


class VAPromptPool(nn.Module):
    """General prompts shared by all inputs plus a pool of expert slots per layer.

    Slots are grouped by owning domain. Slots of future domains exist from the
    start (the pool size never changes) but are inert until activated.
    """

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        L, d = cfg.num_layers, cfg.embed_dim
        self.top_k = cfg.top_k
        self.slot_alloc = tuple(cfg.slot_alloc)
        self.per_layer_query = cfg.per_layer_query
        self.gate = cfg.prompt_gate
        self.g_prompt = nn.Parameter(torch.zeros(L, cfg.g_tokens, d))
        self.keys = nn.ParameterList(nn.Parameter(torch.zeros(L, n, d)) for n in cfg.slot_alloc)
        self.tokens = nn.ParameterList(
            nn.Parameter(torch.zeros(L, n, cfg.e_tokens, d)) for n in cfg.slot_alloc)
        self.register_buffer("n_active_domains", torch.zeros((), dtype=torch.long))
        self.current_domain = -1

    @property
    def pool_size(self) -> int:
        return sum(self.slot_alloc)

    @property
    def num_active_slots(self) -> int:
        return sum(self.slot_alloc[: int(self.n_active_domains)])

    def owner(self, slot: int) -> int:
        for t, r in enumerate(slot_ranges(self.slot_alloc)):
            if slot in r:
                return t
        raise IndexError(slot)

    def trainable_slots(self) -> list[int]:
        if self.current_domain < 0:
            return []
        return list(slot_ranges(self.slot_alloc)[self.current_domain])

    def active_keys(self, layer: int) -> torch.Tensor:
        n = int(self.n_active_domains)
        return torch.cat([self.keys[t][layer] for t in range(n)], dim=0)

    def active_tokens(self, layer: int) -> torch.Tensor:
        n = int(self.n_active_domains)
        return torch.cat([self.tokens[t][layer] for t in range(n)], dim=0)

    def layer_prompts(self, layer: int, query: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Prompt tokens ``[G, E_selected]`` for each image and their attention multiplicities.

        Each selected expert enters with weight ``(1 + cos) / 2`` scaled by the
        gate, which lets the slot keys learn from the task loss.
        """
        keys = self.active_keys(layer)
        tokens = self.active_tokens(layer)
        k = min(self.top_k, keys.shape[0])
        cos = F.normalize(query, dim=-1) @ F.normalize(keys, dim=-1).T
        idx = _topk_stable(cos.detach(), k)
        b = query.shape[0]
        le, d = tokens.shape[1], tokens.shape[2]
        experts = tokens[idx].reshape(b, k * le, d)
        w_e = (0.5 * (1.0 + cos.gather(1, idx))).repeat_interleave(le, dim=1)
        g = self.g_prompt[layer].expand(b, -1, -1)
        weights = torch.cat([w_e.new_ones(b, g.shape[1]), w_e], dim=1) * self.gate
        return torch.cat([g, experts], dim=1), weights, idx


def _topk_stable(scores: torch.Tensor, k: int) -> torch.Tensor:
    # stable descending sort: equal scores keep ascending slot order
    return torch.argsort(-scores, dim=-1, stable=True)[..., :k]


def select_experts(pool: VAPromptPool, query: torch.Tensor, layer: int) -> list[int]:
    """Top-k slot indices by cosine(query, key) over every activated slot."""
    norm = float(torch.linalg.vector_norm(query))
    if not torch.isfinite(query).all() or norm == 0.0:
        raise ValueError("routing query must be finite and nonzero")
    keys = pool.active_keys(layer).detach()
    cos = F.normalize(keys, dim=-1) @ (query / norm)
    k = min(pool.top_k, keys.shape[0])
    return _topk_stable(cos, k).tolist()


def advance_domain_slots(pool: VAPromptPool, t: int, generator: torch.Generator) -> VAPromptPool:
    """Activate domain ``t``'s slots and freeze every slot owned by an earlier domain."""
    if not 0 <= t < len(pool.slot_alloc):
        raise IndexError(f"domain {t} outside [0, {len(pool.slot_alloc)})")
    with torch.no_grad():
        while int(pool.n_active_domains) <= t:
            new = int(pool.n_active_domains)
            if new == 0:
                pool.g_prompt.normal_(0.0, 0.02, generator=generator)
            keys = torch.randn(pool.keys[new].shape, generator=generator)
            pool.keys[new].copy_(F.normalize(keys, dim=-1))
            pool.tokens[new].normal_(0.0, 0.02, generator=generator)
            pool.n_active_domains += 1
    for owner in range(len(pool.slot_alloc)):
        trainable = owner == t
        pool.keys[owner].requires_grad_(trainable)
        pool.tokens[owner].requires_grad_(trainable)
    pool.current_domain = t
    return pool


def routing_query(state: ImageEncoder, pixels: torch.Tensor) -> torch.Tensor:
    return promptless_query(state, pixels)
