"""The student model: image encoder, prompts, frozen text tower and per-domain heads."""
from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, FreezePolicy
from .encoders import ImageEncoder, RoutingRecord, TextEncoder, VisualTriple
from .prompts import TAPrompt, VAPromptPool, advance_domain_slots, text_features
from .synthdata import seen_specs


def domain_generator(cfg: ExperimentConfig, domain: int, purpose: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(1_000_003 * cfg.seed + 7919 * domain + 104_729 * purpose + 1)


class PADModel(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        specs = seen_specs(cfg.num_domains, cfg.n_train_ids, cfg.n_test_ids, cfg.n_cameras,
                           cfg.views_per_camera, cfg.image_size[:2])
        self.domain_ids = [s.train_ids for s in specs]
        g = torch.Generator().manual_seed(cfg.seed)
        self.image_encoder = ImageEncoder(cfg, g)
        self.pool = VAPromptPool(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.ta_prompt = TAPrompt(self.domain_ids, cfg.ta_tokens, cfg.embed_dim)
        self.heads = nn.ModuleList(nn.Linear(cfg.proj_dim, len(ids), bias=False)
                                   for ids in self.domain_ids)
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init)))

    @property
    def active_pool(self) -> VAPromptPool | None:
        return self.pool if self.cfg.use_va_prompt else None

    def encode(self, pixels: torch.Tensor) -> tuple[VisualTriple, RoutingRecord | None]:
        return self.image_encoder(pixels, self.active_pool)

    def text_features(self, ids: list[int], normalize: bool = True) -> torch.Tensor:
        return text_features(self.text_encoder, self.ta_prompt, ids, normalize)

    def local_labels(self, domain: int, ids: torch.Tensor) -> torch.Tensor:
        first = self.domain_ids[domain][0]
        return ids - first

    def enter_domain(self, t: int) -> None:
        """Initialize the parameters that belong to domain ``t``."""
        g = domain_generator(self.cfg, t)
        self.ta_prompt.register_domain(t, g)
        if self.cfg.use_va_prompt:
            advance_domain_slots(self.pool, t, g)
        with torch.no_grad():
            self.heads[t].weight.normal_(0.0, 0.01, generator=g)


def apply_freeze_policy(model: PADModel, policy: FreezePolicy, t: int) -> None:
    """Set ``requires_grad`` on every parameter for training domain ``t``."""
    cfg = model.cfg
    enc = model.image_encoder
    enc.requires_grad_(True)
    for p in enc.stem_parameters():
        p.requires_grad_(not policy.freeze_stem)
    for i, blk in enumerate(enc.blocks):
        blk.requires_grad_(i not in policy.frozen_block_indices)

    pool = model.pool
    pool.requires_grad_(False)
    if cfg.use_va_prompt:
        pool.g_prompt.requires_grad_(not cfg.freeze_g_prompt)
        pool.keys[t].requires_grad_(True)
        pool.tokens[t].requires_grad_(True)

    model.text_encoder.requires_grad_(False)
    for d, rows in enumerate(model.ta_prompt.rows):
        rows.requires_grad_(d == t)
    for d, head in enumerate(model.heads):
        head.requires_grad_(d == t and policy.classifier_trainable)
    model.gamma.requires_grad_(cfg.use_texkd and policy.kd_active)


def visual_modules(model: PADModel) -> nn.ModuleDict:
    return nn.ModuleDict({"image_encoder": model.image_encoder, "pool": model.pool})


class VisualTeacher(nn.Module):
    """Frozen copy of the visual branch used as the EMA distillation target."""

    def __init__(self, model: PADModel):
        super().__init__()
        self.image_encoder = copy.deepcopy(model.image_encoder)
        self.pool = copy.deepcopy(model.pool)
        self.use_pool = model.cfg.use_va_prompt
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, pixels: torch.Tensor) -> VisualTriple:
        triple, _ = self.image_encoder(pixels, self.pool if self.use_pool else None)
        return triple


def normalized(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)
