"""Per-domain training loop, EMA teacher, text bank caching and run orchestration."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, FreezePolicy, configure_variant, resolve_freeze_policy
from .evaluation import MetricsReport, StageReport, evaluate_protocol, max_cosine_score, \
    prompt_routing_correlation
from .losses import LossBreakdown, TextBank, featkd_loss, id_loss, logitkd_loss, supcon_loss, \
    texkd_loss, total_loss, triplet_loss
from .model import PADModel, VisualTeacher, apply_freeze_policy
from .prompts import TAPrompt
from .encoders import TextEncoder
from .synthdata import DomainDataset, EvalSplit, generate_domain, make_unseen_suite, \
    sample_pk_indices, seen_specs

log = logging.getLogger(__name__)

LOSS_KEYS = ("supcon", "id", "triplet", "texkd", "featkd", "logitkd", "kd_total", "overall")


# --- teacher --------------------------------------------------------------------------

@dataclass
class TeacherState:
    ema_visual: VisualTeacher | None
    text_bank: TextBank | None
    alpha: float


def _tensors(x: nn.Module | Iterable[torch.Tensor]) -> list[torch.Tensor]:
    return list(x.parameters()) if isinstance(x, nn.Module) else list(x)


@torch.no_grad()
def ema_update(teacher: nn.Module | Iterable[torch.Tensor], student: nn.Module | Iterable[torch.Tensor],
               alpha: float) -> None:
    """In place: ``teacher <- alpha * teacher + (1 - alpha) * student`` for every parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    tp, sp = _tensors(teacher), _tensors(student)
    if len(tp) != len(sp) or any(a.shape != b.shape for a, b in zip(tp, sp)):
        raise ValueError("teacher and student parameter shapes differ")
    for t, s in zip(tp, sp):
        t.mul_(alpha).add_(s, alpha=1.0 - alpha)


def teacher_visual_update(teacher: VisualTeacher, model: PADModel, alpha: float) -> None:
    ema_update(teacher.image_encoder, model.image_encoder, alpha)
    if model.cfg.ema_covers_prompts:
        ema_update(teacher.pool, model.pool, alpha)


@torch.no_grad()
def build_text_bank(text_encoder: TextEncoder, ta_snapshot: TAPrompt, ids: list[int]) -> TextBank:
    """Frozen, unit-norm text embedding per identity from a TA-Prompt snapshot."""
    feats = F.normalize(text_encoder(ta_snapshot.context(ids)), dim=-1)
    return TextBank(list(ids), feats.detach().clone())


def snapshot_ta(model: PADModel) -> TAPrompt:
    snap = copy.deepcopy(model.ta_prompt)
    snap.requires_grad_(False)
    return snap


def frozen_text_bank(model: PADModel, t: int) -> TextBank | None:
    """Bank a stage-``t`` text teacher would hold, whether or not TEXKD uses it."""
    if t == 0:
        return None
    snap = snapshot_ta(model)
    return build_text_bank(model.text_encoder, snap, snap.known_ids())


def make_teacher(model: PADModel, t: int) -> TeacherState:
    """Teacher for domain ``t``: EMA copy of the visual branch plus the cached text bank."""
    cfg = model.cfg
    if t == 0:
        return TeacherState(None, None, cfg.ema_alpha)
    ema = VisualTeacher(model) if cfg.use_viskd else None
    bank = frozen_text_bank(model, t) if cfg.use_texkd or cfg.use_viskd else None
    return TeacherState(ema, bank, cfg.ema_alpha)


# --- logs -------------------------------------------------------------------------------

@dataclass
class StageLog:
    domain: int
    epochs: list[dict[str, float]] = field(default_factory=list)
    param_report: list[tuple[str, str, int, float]] = field(default_factory=list)

    def append(self, row: dict[str, float]) -> None:
        self.epochs.append(dict(row))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", *LOSS_KEYS, "gamma"])
            for row in self.epochs:
                w.writerow([int(row["epoch"])] + [f"{row[k]:.10f}" for k in (*LOSS_KEYS, "gamma")])

    def to_dict(self) -> dict:
        return {"domain": self.domain, "epochs": self.epochs,
                "param_report": [list(r) for r in self.param_report]}

    @classmethod
    def from_dict(cls, d: dict) -> "StageLog":
        return cls(d["domain"], d["epochs"], [tuple(r) for r in d["param_report"]])


def trainable_param_report(model: PADModel, policy: FreezePolicy | None = None) -> list[tuple[str, str, int, float]]:
    """(side, module, trainable count, ratio within side); the text encoder is excluded."""
    def count(params: Iterable[torch.Tensor]) -> int:
        return sum(p.numel() for p in params if p.requires_grad)

    text = [("text", "TA-Prompt", count(model.ta_prompt.parameters()))]
    visual = [
        ("visual", "VA-Prompt", count(model.pool.parameters())),
        ("visual", "Head", count(model.heads.parameters())),
        ("visual", "Backbone", count(model.image_encoder.parameters())),
    ]
    out = []
    for side in (text, visual):
        total = sum(c for _, _, c in side)
        out += [(s, m, c, (c / total) if total else 0.0) for s, m, c in side]
    return out


# --- training -----------------------------------------------------------------------------

def _param_groups(model: PADModel, cfg: ExperimentConfig, which: str) -> list[dict]:
    live = lambda ps: [p for p in ps if p.requires_grad]  # noqa: E731
    text = live([*model.ta_prompt.parameters(), model.gamma])
    visual = [
        {"params": live(model.image_encoder.parameters()), "lr": cfg.lr_backbone},
        {"params": live(model.pool.parameters()), "lr": cfg.lr_prompt},
        {"params": live(model.heads.parameters()), "lr": cfg.lr_head},
    ]
    groups = {"text": [{"params": text, "lr": cfg.lr_prompt}], "visual": visual,
              "joint": [{"params": text, "lr": cfg.lr_prompt}, *visual]}[which]
    return [g for g in groups if g["params"]]


def _make_optimizer(model: PADModel, cfg: ExperimentConfig, which: str) -> torch.optim.Optimizer | None:
    groups = _param_groups(model, cfg, which)
    return torch.optim.Adam(groups) if groups else None


@torch.no_grad()
def _cache_features(model: PADModel, pixels: np.ndarray, chunk: int = 128) -> torch.Tensor:
    was = model.training
    model.eval()
    out = []
    for s in range(0, len(pixels), chunk):
        triple, _ = model.encode(torch.from_numpy(pixels[s:s + chunk]))
        out.append(F.normalize(triple.v_proj, dim=-1))
    model.train(was)
    return torch.cat(out)


def _sample_negatives(bank: TextBank, exclude: set[int], n: int, rng: np.random.Generator) -> list[int]:
    pool = [i for i in bank.ids if i not in exclude]
    n = min(n, len(pool))
    if n == 0:
        return []
    return [pool[j] for j in sorted(rng.choice(len(pool), size=n, replace=False))]


def _texkd_term(model: PADModel, teacher: TeacherState, v: torch.Tensor, batch_ids: list[int],
                cfg: ExperimentConfig, rng: np.random.Generator) -> torch.Tensor:
    negatives = _sample_negatives(teacher.text_bank, set(batch_ids), cfg.neg_batch, rng)
    subset = batch_ids + negatives
    student = TextBank(subset, model.text_features(subset))
    return texkd_loss(v, teacher.text_bank, student, subset, cfg.tau_text, model.gamma)


def _unique(ids: torch.Tensor) -> tuple[list[int], torch.Tensor]:
    uniq, inverse = torch.unique(ids, sorted=True, return_inverse=True)
    return uniq.tolist(), inverse


def _visual_terms(model: PADModel, teacher: TeacherState, pixels: torch.Tensor, ids: torch.Tensor,
                  t_feat: torch.Tensor, cfg: ExperimentConfig, t: int, kd: bool) -> dict[str, torch.Tensor]:
    triple, _ = model.encode(pixels)
    v = F.normalize(triple.v_proj, dim=-1)
    labels = model.local_labels(t, ids)
    parts = {
        "id": id_loss(model.heads[t](triple.v_proj), labels),
        "triplet": triplet_loss(triple.v_proj, labels, cfg.triplet_margin),
        "supcon": supcon_loss(v, t_feat, labels, cfg.supcon_temp),
    }
    if kd and cfg.use_viskd and teacher.ema_visual is not None:
        tea = teacher.ema_visual(pixels)
        parts["featkd"] = featkd_loss(triple, tea)
        parts["logitkd"] = logitkd_loss(v, F.normalize(tea.v_proj, dim=-1),
                                        teacher.text_bank.features, cfg.tau_vis)
    return parts


class _EpochMeter:
    def __init__(self) -> None:
        self.sums = {k: 0.0 for k in LOSS_KEYS}
        self.counts = {k: 0 for k in LOSS_KEYS}

    def add(self, parts: dict[str, torch.Tensor]) -> None:
        for k, v in parts.items():
            self.sums[k] += float(v.detach() if torch.is_tensor(v) else v)
            self.counts[k] += 1

    def means(self) -> dict[str, float]:
        return {k: (self.sums[k] / self.counts[k]) if self.counts[k] else 0.0 for k in LOSS_KEYS}


def _epoch_row(meter: _EpochMeter, cfg: ExperimentConfig, epoch: int, gamma: float) -> dict[str, float]:
    m = meter.means()
    bd = total_loss({k: m[k] for k in ("supcon", "id", "triplet", "texkd", "featkd", "logitkd")}, cfg)
    row = bd.as_floats()
    row.update(epoch=epoch, gamma=gamma)
    return row


def train_domain(model: PADModel, teacher: TeacherState, data: DomainDataset, cfg: ExperimentConfig,
                 t: int, rng: np.random.Generator) -> tuple[PADModel, TeacherState, StageLog]:
    """Train on domain ``t``'s training images only.

    ``two_phase`` alternates, every epoch, a text phase (TA-Prompt and the logit
    scale, over image features cached with the current encoder) and a visual
    phase (encoder, prompts and head). ``joint`` optimizes everything at once.
    """
    policy = resolve_freeze_policy(cfg, t)
    apply_freeze_policy(model, policy, t)
    kd = policy.kd_active
    stage_log = StageLog(t, param_report=trainable_param_report(model, policy))
    train = data.train
    P, K = cfg.batch
    iters = math.ceil(len(train) / (P * K))
    epochs = cfg.warmup_epochs if t == 0 else cfg.epochs_per_domain
    domain_ids = model.domain_ids[t]

    if cfg.schedule == "two_phase":
        opt_text = _make_optimizer(model, cfg, "text")
        opt_vis = _make_optimizer(model, cfg, "visual")
    else:
        opt_joint = _make_optimizer(model, cfg, "joint")

    model.train()
    for epoch in range(epochs):
        meter = _EpochMeter()
        if cfg.schedule == "two_phase":
            cache = _cache_features(model, train.pixels)
            for _ in range(iters):
                idx = sample_pk_indices(train.identities, P, K, rng)
                ids = torch.from_numpy(train.identities[idx])
                uniq, inv = _unique(ids)
                v = cache[idx]
                t_feat = model.text_features(uniq)[inv]
                parts = {"supcon": supcon_loss(v, t_feat, model.local_labels(t, ids), cfg.supcon_temp)}
                if kd and cfg.use_texkd:
                    parts["texkd"] = _texkd_term(model, teacher, v, uniq, cfg, rng)
                loss = total_loss(parts, cfg).overall
                opt_text.zero_grad(set_to_none=True)
                loss.backward()
                opt_text.step()
                meter.add(parts)

            with torch.no_grad():
                text_bank = model.text_features(domain_ids)
            for _ in range(iters):
                idx = sample_pk_indices(train.identities, P, K, rng)
                ids = torch.from_numpy(train.identities[idx])
                pixels = torch.from_numpy(train.pixels[idx])
                t_feat = text_bank[model.local_labels(t, ids)]
                parts = _visual_terms(model, teacher, pixels, ids, t_feat, cfg, t, kd)
                loss = total_loss(parts, cfg).overall
                opt_vis.zero_grad(set_to_none=True)
                loss.backward()
                opt_vis.step()
                if teacher.ema_visual is not None:
                    teacher_visual_update(teacher.ema_visual, model, teacher.alpha)
                meter.add(parts)
        else:
            for _ in range(iters):
                idx = sample_pk_indices(train.identities, P, K, rng)
                ids = torch.from_numpy(train.identities[idx])
                uniq, inv = _unique(ids)
                pixels = torch.from_numpy(train.pixels[idx])
                t_feat = model.text_features(uniq)[inv]
                parts = _visual_terms(model, teacher, pixels, ids, t_feat, cfg, t, kd)
                if kd and cfg.use_texkd:
                    with torch.no_grad():
                        v = F.normalize(model.encode(pixels)[0].v_proj, dim=-1)
                    parts["texkd"] = _texkd_term(model, teacher, v, uniq, cfg, rng)
                loss = total_loss(parts, cfg).overall
                opt_joint.zero_grad(set_to_none=True)
                loss.backward()
                opt_joint.step()
                if teacher.ema_visual is not None:
                    teacher_visual_update(teacher.ema_visual, model, teacher.alpha)
                meter.add(parts)
        stage_log.append(_epoch_row(meter, cfg, epoch, float(model.gamma.detach())))
        log.info("domain %d epoch %d overall %.4f", t, epoch, stage_log.epochs[-1]["overall"])
    model.eval()
    return model, teacher, stage_log


# --- sequence -----------------------------------------------------------------------------

@dataclass
class RunData:
    seen: list[DomainDataset]
    unseen: list[EvalSplit]


def make_run_data(cfg: ExperimentConfig) -> RunData:
    specs = seen_specs(cfg.num_domains, cfg.n_train_ids, cfg.n_test_ids, cfg.n_cameras,
                       cfg.views_per_camera, cfg.image_size[:2])
    seen = [generate_domain(cfg.seed, s) for s in specs]
    unseen = make_unseen_suite(cfg.seed, cfg.n_unseen_domains, cfg.n_test_ids, cfg.n_cameras,
                               cfg.views_per_camera, cfg.image_size[:2])
    return RunData(seen, unseen)


def evaluate_stage(model: PADModel, data: RunData, t: int, frozen_bank: TextBank | None = None) -> StageReport:
    """Seen/unseen retrieval plus diagnostics for stage ``t``.

    ``frozen_bank`` is the text bank frozen at the entry of stage ``t``; drift is
    measured against it and left NaN when no such bank exists (stage 0).
    """
    seen = [d.test for d in data.seen[: t + 1]]
    out = evaluate_protocol(model.image_encoder, model.active_pool, seen, data.unseen, stage=t)
    report = out.report

    if frozen_bank is not None:
        bank_np = frozen_bank.features.double().numpy()
        scores = [max_cosine_score(out.features[("seen", d)][: len(split.query)], bank_np)
                  for d, split in enumerate(seen)]
        report.drift = float(np.mean(scores))

    if model.active_pool is not None:
        keys = sorted(out.routes)
        corr = prompt_routing_correlation([out.routes[k] for k in keys],
                                          [out.features[k] for k in keys], model.pool.pool_size)
        report.rho_pearson, report.rho_spearman = corr.pearson, corr.spearman
    return report


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def make_checkpoint(model: PADModel, teacher: TeacherState, optimizer_state: dict[str, torch.Tensor],
                    cfg: ExperimentConfig, t: int, rng: np.random.Generator,
                    report: MetricsReport, logs: list[StageLog]) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if teacher.ema_visual is not None:
        tensors.update({f"teacher.{k}": v for k, v in teacher.ema_visual.state_dict().items()})
    if teacher.text_bank is not None:
        tensors["teacher_bank.features"] = teacher.text_bank.features
        tensors["teacher_bank.ids"] = torch.tensor(teacher.text_bank.ids, dtype=torch.int64)
    tensors.update({f"optim.{k}": v for k, v in optimizer_state.items()})
    meta = {
        "config": cfg.to_dict(),
        "rng_state": _rng_state(rng),
        "stages": [s.to_dict() for s in report.stages],
        "logs": [lg.to_dict() for lg in logs],
    }
    return Checkpoint(t, cfg.config_hash(), tensors, meta)


def restore_model(ckpt: Checkpoint, cfg: ExperimentConfig) -> PADModel:
    model = PADModel(cfg)
    state = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    if cfg.use_va_prompt and int(model.pool.n_active_domains) > 0:
        model.pool.current_domain = ckpt.domain_index
    model.eval()
    return model


@dataclass
class RunResult:
    report: MetricsReport
    logs: list[StageLog]
    checkpoints: list[Path]
    model: PADModel


def run_sequence(cfg: ExperimentConfig, variant: str | None = None, out_dir: str | Path | None = None,
                 resume_from: str | Path | None = None, stop_after: int | None = None) -> RunResult:
    """Train over domains 0..T-1, evaluating every seen and unseen split after each."""
    if variant is not None:
        cfg = configure_variant(cfg, variant)
    torch.manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    data = make_run_data(cfg)
    report, logs, ckpts = MetricsReport(), [], []
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_hash=cfg.config_hash())
        model = restore_model(ckpt, cfg)
        rng.bit_generator.state = ckpt.meta["rng_state"]
        report = MetricsReport([StageReport.from_dict(s) for s in ckpt.meta["stages"]])
        logs = [StageLog.from_dict(d) for d in ckpt.meta["logs"]]
        start = ckpt.domain_index + 1
    else:
        model = PADModel(cfg)

    last = cfg.num_domains if stop_after is None else min(cfg.num_domains, stop_after + 1)
    for t in range(start, last):
        model.enter_domain(t)
        teacher = make_teacher(model, t)
        frozen_bank = teacher.text_bank if teacher.text_bank is not None else frozen_text_bank(model, t)
        model, teacher, stage_log = train_domain(model, teacher, data.seen[t], cfg, t, rng)
        logs.append(stage_log)
        report.stages.append(evaluate_stage(model, data, t, frozen_bank))
        if out is not None:
            stage_log.write_csv(out / f"stage_{t}.csv")
            ckpt = make_checkpoint(model, teacher, {}, cfg, t, rng, report, logs)
            ckpts.append(save_checkpoint(ckpt, out / "checkpoints" / f"stage_{t}.ckpt"))
    if out is not None:
        report.write_metrics_csv(out / "metrics.csv")
        report.write_diagnostics_csv(out / "diagnostics.csv")
    return RunResult(report, logs, ckpts, model)
