"""Alignment, identity, metric and distillation losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .config import ExperimentConfig

log = logging.getLogger(__name__)


@dataclass
class SimilarityDistribution:
    probs: torch.Tensor  # (..., K), rows sum to one
    log_probs: torch.Tensor
    tau: float
    gamma: float | torch.Tensor | None


@dataclass
class LossBreakdown:
    supcon: torch.Tensor | float = 0.0
    id: torch.Tensor | float = 0.0
    triplet: torch.Tensor | float = 0.0
    texkd: torch.Tensor | float = 0.0
    featkd: torch.Tensor | float = 0.0
    logitkd: torch.Tensor | float = 0.0
    kd_total: torch.Tensor | float = 0.0
    overall: torch.Tensor | float = 0.0

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass
class TextBank:
    """Text embeddings addressed by identity id."""

    ids: list[int]
    features: torch.Tensor  # (len(ids), dim)

    def __post_init__(self) -> None:
        self._row = {i: r for r, i in enumerate(self.ids)}

    def rows(self, subset: list[int]) -> torch.Tensor:
        missing = [i for i in subset if i not in self._row]
        if missing:
            raise KeyError(f"identities missing from text bank: {missing[:5]}")
        return self.features[[self._row[i] for i in subset]]


def _supcon_direction(anchor: torch.Tensor, contrast: torch.Tensor, labels: torch.Tensor,
                      temperature: float) -> torch.Tensor:
    logits = anchor @ contrast.T / temperature
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]).to(logits.dtype)
    n_pos = pos.sum(1)
    valid = n_pos > 0
    if not bool(valid.any()):
        return logits.sum() * 0.0
    per_anchor = -(pos * log_prob).sum(1)[valid] / n_pos[valid]
    return per_anchor.mean()


def supcon_loss(v: torch.Tensor, t: torch.Tensor, labels: torch.Tensor,
                temperature: float = 1.0) -> torch.Tensor:
    """Symmetric image-text supervised contrastive loss.

    Each direction averages, over anchors, the mean negative log-likelihood of
    the anchor's same-label partners in the other modality. Anchors without a
    positive are left out of the mean.
    """
    if not (len(v) == len(t) == len(labels)):
        raise ValueError("v, t and labels must have the same length")
    return (_supcon_direction(v, t, labels, temperature)
            + _supcon_direction(t, v, labels, temperature))


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if int(labels.max()) >= logits.shape[1] or int(labels.min()) < 0:
        raise ValueError(f"label outside [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    # clamp keeps the zero diagonal differentiable; diagonal entries are never used
    return sq.clamp_min(1e-24).sqrt()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    """Batch-hard triplet loss: hardest positive minus hardest negative plus margin, hinged."""
    dist = pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    skipped = int((~valid).sum())
    if skipped:
        log.debug("triplet: %d anchors without a positive or negative were skipped", skipped)
    if not bool(valid.any()):
        return features.sum() * 0.0
    inf = torch.finfo(dist.dtype).max
    hardest_pos = dist.masked_fill(~pos_mask, -inf).amax(1)
    hardest_neg = dist.masked_fill(~neg_mask, inf).amin(1)
    hinge = F.relu(hardest_pos - hardest_neg + margin)
    return hinge[valid].mean()


def similarity_logits(v: torch.Tensor, t_bank: torch.Tensor, tau: float,
                      gamma: float | torch.Tensor | None = None) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    scale = 1.0 if gamma is None else gamma
    return scale * (v @ t_bank.T) / tau


def vt_distribution(v: torch.Tensor, t_bank: torch.Tensor, tau: float,
                    gamma: float | torch.Tensor | None = None) -> SimilarityDistribution:
    """Softmax over ``gamma * cos(v, t_i) / tau`` across the K bank rows."""
    if t_bank.shape[0] < 1:
        raise ValueError("text bank must have at least one row")
    logits = similarity_logits(v, t_bank, tau, gamma)
    logits = logits - logits.amax(-1, keepdim=True)
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return SimilarityDistribution(log_probs.exp(), log_probs, tau, gamma)


def kl_teacher_student(teacher: SimilarityDistribution, student: SimilarityDistribution) -> torch.Tensor:
    """Mean over the batch of KL(teacher || student)."""
    kl = (teacher.probs * (teacher.log_probs - student.log_probs)).sum(-1)
    return kl.mean() if kl.dim() else kl


def texkd_loss(v: torch.Tensor, teacher_bank: TextBank, student_bank: TextBank,
               subset_ids: list[int], tau: float, gamma: float | torch.Tensor) -> torch.Tensor:
    """Textual distillation: tau^2 * KL between teacher- and student-text class scores."""
    t_tea = teacher_bank.rows(subset_ids)
    t_stu = student_bank.rows(subset_ids)
    p_tea = vt_distribution(v, t_tea, tau, gamma)
    p_stu = vt_distribution(v, t_stu, tau, gamma)
    return tau ** 2 * kl_teacher_student(p_tea, p_stu)


def featkd_loss(student, teacher) -> torch.Tensor:
    """Mean of the three per-level mean-squared errors (penultimate, final, projected)."""
    terms = []
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
        terms.append(F.mse_loss(s, t.detach()))
    return sum(terms) / 3.0


def logitkd_loss(v_student: torch.Tensor, v_teacher: torch.Tensor, t_bank: torch.Tensor,
                 tau: float) -> torch.Tensor:
    """Visual logit distillation over a fixed text bank, without logit scaling."""
    p_tea = vt_distribution(v_teacher.detach(), t_bank, tau)
    p_stu = vt_distribution(v_student, t_bank, tau)
    return tau ** 2 * kl_teacher_student(p_tea, p_stu)


def total_loss(parts: dict[str, torch.Tensor | float], cfg: ExperimentConfig) -> LossBreakdown:
    """Weighted sum of every enabled term; missing terms count as zero."""
    unknown = set(parts) - {"supcon", "id", "triplet", "texkd", "featkd", "logitkd"}
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    get = lambda k: parts.get(k, 0.0)  # noqa: E731
    kd = cfg.lambda_text * get("texkd") + cfg.lambda_feat * get("featkd") \
        + cfg.lambda_logit * get("logitkd")
    overall = get("supcon") + get("id") + get("triplet") + kd
    return LossBreakdown(get("supcon"), get("id"), get("triplet"), get("texkd"), get("featkd"),
                         get("logitkd"), kd, overall)
