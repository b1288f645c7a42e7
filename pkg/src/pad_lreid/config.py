"""Experiment configuration, named variants and the per-domain freeze policy."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when a config file or override violates the schema."""


SCHEDULES = ("two_phase", "joint")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_domains: int = 3
    image_size: tuple[int, int, int] = (32, 16, 3)
    patch_size: int = 4
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    proj_dim: int = 32
    batch: tuple[int, int] = (8, 4)

    # distillation
    lambda_text: float = 0.5
    lambda_feat: float = 0.5
    lambda_logit: float = 0.5
    tau_text: float = 0.07
    tau_vis: float = 4.0
    gamma_init: float = 7.0
    ema_alpha: float = 0.997
    neg_batch: int = 256

    # prompts
    g_tokens: int = 6
    e_tokens: int = 6
    pool_size: int = 36
    top_k: int = 4
    slot_alloc: tuple[int, ...] = (12, 12, 12)
    ta_tokens: int = 4
    prompt_gate: float = 1.0
    freeze_g_prompt: bool = False
    per_layer_query: bool = False

    unfrozen_blocks: int = 2
    triplet_margin: float = 0.3
    supcon_temp: float = 0.1

    lr_backbone: float = 5e-4
    lr_prompt: float = 3.5e-3
    lr_head: float = 3.5e-3
    epochs_per_domain: int = 10
    warmup_epochs: int = 20
    schedule: str = "two_phase"

    # module switches (set by the S0..S5 variants)
    use_freeze: bool = True
    use_va_prompt: bool = True
    use_texkd: bool = True
    use_viskd: bool = True
    ema_covers_prompts: bool = True
    variant: str = "S5"

    # synthetic data
    n_train_ids: int = 20
    n_test_ids: int = 10
    n_cameras: int = 3
    views_per_camera: int = 4
    n_unseen_domains: int = 2

    def __post_init__(self) -> None:
        validate(self)

    @property
    def num_patches(self) -> int:
        h, w, _ = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def batch_size(self) -> int:
        return self.batch[0] * self.batch[1]

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **_coerce_all(changes))

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, value: Any) -> Any:
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {name!r}")
    kind = _FIELD_TYPES[name]
    try:
        if kind.startswith("tuple"):
            if isinstance(value, str):
                value = json.loads(value if value.startswith("[") else f"[{value}]")
            return tuple(int(v) for v in value)
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind}") from exc


def _coerce_all(values: dict[str, Any]) -> dict[str, Any]:
    return {k: _coerce(k, v) for k, v in values.items()}


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def validate(cfg: ExperimentConfig) -> None:
    """Check every cross-field invariant; the error names the offending field."""
    _require(cfg.num_domains >= 1, "num_domains", "must be >= 1")
    _require(len(cfg.slot_alloc) == cfg.num_domains, "slot_alloc",
             f"length {len(cfg.slot_alloc)} != num_domains {cfg.num_domains}")
    _require(sum(cfg.slot_alloc) == cfg.pool_size, "slot_alloc",
             f"sums to {sum(cfg.slot_alloc)}, pool_size is {cfg.pool_size}")
    _require(all(s >= 1 for s in cfg.slot_alloc), "slot_alloc", "every domain needs >= 1 slot")
    _require(1 <= cfg.top_k <= cfg.pool_size, "top_k", "must satisfy 1 <= top_k <= pool_size")
    _require(0 <= cfg.unfrozen_blocks <= cfg.num_layers, "unfrozen_blocks",
             "must satisfy 0 <= unfrozen_blocks <= num_layers")
    _require(0.0 < cfg.ema_alpha < 1.0, "ema_alpha", "must lie in (0, 1)")
    _require(len(cfg.image_size) == 3, "image_size", "expected (H, W, channels)")
    h, w, _ = cfg.image_size
    _require(h % cfg.patch_size == 0 and w % cfg.patch_size == 0, "patch_size",
             "must divide image height and width")
    _require(cfg.embed_dim % cfg.num_heads == 0, "num_heads", "must divide embed_dim")
    _require(len(cfg.batch) == 2 and min(cfg.batch) >= 1, "batch", "expected (P, K) >= 1")
    _require(cfg.batch[0] <= cfg.n_train_ids, "batch", "P exceeds identities per domain")
    _require(cfg.batch[1] <= cfg.n_cameras * cfg.views_per_camera, "batch",
             "K exceeds images per identity")
    for name in ("tau_text", "tau_vis", "supcon_temp"):
        _require(getattr(cfg, name) > 0, name, "must be > 0")
    for name in ("lambda_text", "lambda_feat", "lambda_logit", "triplet_margin"):
        _require(getattr(cfg, name) >= 0, name, "must be >= 0")
    for name in ("lr_backbone", "lr_prompt", "lr_head"):
        _require(getattr(cfg, name) > 0, name, "must be > 0")
    for name in ("g_tokens", "e_tokens", "ta_tokens", "epochs_per_domain", "neg_batch",
                 "n_train_ids", "n_test_ids", "n_cameras", "views_per_camera", "proj_dim"):
        _require(getattr(cfg, name) >= 0, name, "must be >= 0")
    _require(cfg.ta_tokens >= 1 and cfg.epochs_per_domain >= 1, "ta_tokens/epochs_per_domain",
             "must be >= 1")
    _require(cfg.n_cameras >= 2, "n_cameras", "cross-camera evaluation needs >= 2 cameras")
    _require(cfg.views_per_camera >= 2, "views_per_camera", "need a query and a gallery view")
    _require(cfg.n_unseen_domains >= 1, "n_unseen_domains", "must be >= 1")
    _require(cfg.schedule in SCHEDULES, "schedule", f"must be one of {SCHEDULES}")
    _require(0.0 <= cfg.prompt_gate <= 1.0, "prompt_gate", "must lie in [0, 1]")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfig(**_coerce_all(raw))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings as given to ``--set``."""
    changes = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        changes[key.strip()] = value.strip()
    return cfg.replace(**changes)


# --- variants -----------------------------------------------------------------

_FULL = dict(use_freeze=True, use_va_prompt=True, use_texkd=True, use_viskd=True)

_COMPONENTS = {
    "S0": dict(use_freeze=False, use_va_prompt=False, use_texkd=False, use_viskd=False),
    "S1": dict(use_freeze=True, use_va_prompt=False, use_texkd=False, use_viskd=False),
    "S2": dict(use_freeze=True, use_va_prompt=True, use_texkd=False, use_viskd=False),
    "S3": dict(use_freeze=True, use_va_prompt=True, use_texkd=True, use_viskd=False),
    "S4": dict(use_freeze=True, use_va_prompt=True, use_texkd=False, use_viskd=True),
    "S5": dict(_FULL),
}

# (lambda_text, tau_text, gamma_init, neg_batch), weak -> strong
_TEXKD = {
    "T1": (0.25, 0.07, 4.0, 256),
    "T2": (0.50, 0.07, 7.0, 256),
    "T3": (0.70, 0.07, 7.0, 256),
    "T4": (0.70, 0.05, 16.0, 512),
    "T5": (1.00, 0.05, 12.0, 512),
}

# (lambda_feat, lambda_logit, tau_vis)
_VISKD = {
    "V1": (0.25, 0.25, 4.0),
    "V2": (0.35, 0.35, 4.0),
    "V3": (0.50, 0.50, 4.0),
    "V4": (0.75, 0.75, 3.5),
    "V5": (1.00, 1.00, 3.0),
}

_SLOTS = {
    "P1": (8, 8, 8, 8, 4),
    "P2": (4, 4, 4, 4, 4),
    "P3": (8, 7, 7, 7, 7),
    "P4": (12, 8, 8, 4, 4),
    "P5": (4, 4, 8, 8, 12),
}

# unfrozen-block counts are quoted for a 12-block backbone and rescaled to num_layers
_BLOCKS = {"B2": 2, "B4": 4, "B6": 6, "B8": 8}


@dataclass(frozen=True)
class VariantSpec:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)


def variant_overrides(name: str, base: ExperimentConfig) -> dict[str, Any]:
    if name in _COMPONENTS:
        return dict(_COMPONENTS[name])
    if name in _TEXKD:
        lam, tau, gamma, neg = _TEXKD[name]
        return dict(_FULL, lambda_text=lam, tau_text=tau, gamma_init=gamma, neg_batch=neg)
    if name in _VISKD:
        lf, ll, tau = _VISKD[name]
        return dict(_FULL, lambda_feat=lf, lambda_logit=ll, tau_vis=tau)
    if name in _SLOTS:
        alloc = _SLOTS[name]
        return dict(_FULL, slot_alloc=alloc, pool_size=sum(alloc), num_domains=len(alloc))
    if name in _BLOCKS:
        n = max(1, round(_BLOCKS[name] * base.num_layers / 12))
        return dict(_FULL, unfrozen_blocks=n)
    raise ConfigError(f"unknown variant: {name!r}")


VARIANT_NAMES = (list(_COMPONENTS) + list(_TEXKD) + list(_VISKD) + list(_SLOTS) + list(_BLOCKS))

SUITES = {
    "components": list(_COMPONENTS),
    "texkd": list(_TEXKD),
    "viskd": list(_VISKD),
    "slots": list(_SLOTS),
    "blocks": list(_BLOCKS),
}


def get_variant(name: str, base: ExperimentConfig | None = None) -> VariantSpec:
    base = base or ExperimentConfig()
    return VariantSpec(name, variant_overrides(name, base))


def configure_variant(base: ExperimentConfig, v: VariantSpec | str) -> ExperimentConfig:
    if isinstance(v, str):
        v = get_variant(v, base)
    elif v.name not in VARIANT_NAMES:
        raise ConfigError(f"unknown variant: {v.name!r}")
    return base.replace(**v.overrides, variant=v.name)


# --- freeze policy ------------------------------------------------------------

@dataclass(frozen=True)
class FreezePolicy:
    text_encoder_frozen: bool
    frozen_block_indices: frozenset[int]
    frozen_slot_indices: frozenset[int]
    classifier_trainable: bool
    kd_active: bool
    freeze_stem: bool


def slot_ranges(slot_alloc: tuple[int, ...]) -> list[range]:
    out, start = [], 0
    for n in slot_alloc:
        out.append(range(start, start + n))
        start += n
    return out


def resolve_freeze_policy(cfg: ExperimentConfig, domain_index: int) -> FreezePolicy:
    """Which parameters stay fixed while training domain ``domain_index``.

    The first domain is a full fine-tune without distillation. Later domains
    freeze the lower blocks (when the freezing scheme is on) and every expert
    slot owned by an earlier domain.
    """
    if not 0 <= domain_index < cfg.num_domains:
        raise ConfigError(f"domain_index {domain_index} outside [0, {cfg.num_domains})")
    frozen_blocks: frozenset[int] = frozenset()
    if domain_index >= 1 and cfg.use_freeze:
        frozen_blocks = frozenset(range(cfg.num_layers - cfg.unfrozen_blocks))
    frozen_slots = frozenset(i for r in slot_ranges(cfg.slot_alloc)[:domain_index] for i in r)
    return FreezePolicy(
        text_encoder_frozen=True,
        frozen_block_indices=frozen_blocks,
        frozen_slot_indices=frozen_slots,
        classifier_trainable=True,
        kd_active=domain_index >= 1,
        freeze_stem=bool(frozen_blocks),
    )
