"""Procedural person-like identity images with controllable domain gaps.

Each identity is a stack of colored rectangles (head, torso, legs) drawn over a
domain-specific background. Cameras add an affine jitter and an illumination
gain; domains add a global hue rotation, background texture, sensor noise and
random occlusion bars. Everything is a pure function of the seed and specs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

IMAGE_SHAPE = (32, 16, 3)

# identity id layout: seen domain t owns [t*1000, t*1000+1000), unseen domains start here
UNSEEN_ID_BASE = 100_000
TEST_ID_OFFSET = 500
N_TEXTURES = 6
# garment hues of all identities share one band; a domain's hue rotation moves the band
HUE_BAND = 0.3

# seen-domain shift table: (hue rotation, background texture, noise sigma, occlusion prob)
_SEEN_SHIFTS = [
    (0.00, 0, 0.02, 0.0),
    (0.33, 1, 0.05, 0.1),
    (0.62, 2, 0.03, 0.2),
    (0.17, 3, 0.06, 0.1),
    (0.83, 1, 0.04, 0.3),
]


@dataclass(frozen=True)
class Identity:
    id: int
    torso_hsv: tuple[float, float, float]
    leg_hsv: tuple[float, float, float]
    head_value: float
    body_scale: float
    texture_id: int
    width: float


@dataclass(frozen=True)
class DomainShift:
    shift_id: int
    hue_rotation: float
    background_id: int
    noise_sigma: float
    occlusion_prob: float


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    shift: DomainShift
    n_train_ids: int = 20
    n_test_ids: int = 10
    n_cameras: int = 3
    views_per_camera: int = 4
    id_base: int | None = None
    image_hw: tuple[int, int] = IMAGE_SHAPE[:2]

    @property
    def first_id(self) -> int:
        return self.domain_id * 1000 if self.id_base is None else self.id_base

    @property
    def train_ids(self) -> list[int]:
        return [self.first_id + i for i in range(self.n_train_ids)]

    @property
    def test_ids(self) -> list[int]:
        return [self.first_id + TEST_ID_OFFSET + i for i in range(self.n_test_ids)]


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray
    identity_id: int
    camera_id: int
    domain_id: int


@dataclass
class ImageSet:
    """Columnar store of rendered images (pixels are N x H x W x 3 in [0, 1])."""

    pixels: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    views: np.ndarray
    domain_id: int

    def __len__(self) -> int:
        return len(self.identities)

    def __getitem__(self, i: int) -> RenderedImage:
        return RenderedImage(self.pixels[i], int(self.identities[i]), int(self.cameras[i]),
                             self.domain_id)

    def __iter__(self) -> Iterator[RenderedImage]:
        return (self[i] for i in range(len(self)))

    def subset(self, mask: np.ndarray) -> "ImageSet":
        return ImageSet(self.pixels[mask], self.identities[mask], self.cameras[mask],
                        self.views[mask], self.domain_id)


@dataclass
class EvalSplit:
    query: ImageSet
    gallery: ImageSet
    spec: DomainSpec


@dataclass
class DomainDataset:
    spec: DomainSpec
    train: ImageSet
    test: EvalSplit

    @property
    def train_ids(self) -> list[int]:
        return self.spec.train_ids


def seen_shift(index: int) -> DomainShift:
    if index < len(_SEEN_SHIFTS):
        hue, bg, noise, occ = _SEEN_SHIFTS[index]
    else:
        # long sequences wrap around with a perturbed hue so shift tuples stay distinct
        hue, bg, noise, occ = _SEEN_SHIFTS[index % len(_SEEN_SHIFTS)]
        hue = (hue + 0.05 * (index // len(_SEEN_SHIFTS))) % 1.0
    return DomainShift(index, hue, bg, noise, occ)


def unseen_shift(index: int) -> DomainShift:
    # hues sit between the seen ones; textures 4 and 5 are never used by seen domains
    hue = (0.08 + 0.41 * index) % 1.0
    return DomainShift(100 + index, hue, 4 + index % 2, 0.03 + 0.01 * (index % 3), 0.15)


def make_identity(seed: int, identity_id: int) -> Identity:
    rng = np.random.default_rng([seed, identity_id, 17])
    return Identity(
        id=identity_id,
        torso_hsv=(rng.uniform(0, HUE_BAND), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)),
        leg_hsv=(rng.uniform(0, HUE_BAND), rng.uniform(0.3, 0.9), rng.uniform(0.25, 0.8)),
        head_value=float(rng.uniform(0.1, 0.6)),
        body_scale=float(rng.uniform(0.8, 1.0)),
        texture_id=int(rng.integers(4)),
        width=float(rng.uniform(6.0, 10.0)),
    )


def _camera_params(seed: int, domain_id: int, camera: int) -> tuple[float, float, float, float]:
    rng = np.random.default_rng([seed, domain_id, camera, 29])
    dx, dy = rng.uniform(-1.5, 1.5, size=2)
    scale = rng.uniform(0.9, 1.1)
    gain = rng.uniform(0.75, 1.2)
    return float(dx), float(dy), float(scale), float(gain)


def _background(texture_id: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = yy.shape
    frame_h = IMAGE_SHAPE[0]
    base = {
        0: (0.55, 0.55, 0.5),
        1: (0.35, 0.45, 0.3),
        2: (0.6, 0.5, 0.4),
        3: (0.3, 0.3, 0.4),
        4: (0.5, 0.35, 0.35),
        5: (0.4, 0.5, 0.55),
    }[texture_id]
    img = np.broadcast_to(np.asarray(base, dtype=np.float64), (h, w, 3)).copy()
    phase = rng.uniform(0, 2 * np.pi)
    if texture_id == 1:
        img *= (0.85 + 0.15 * (yy / frame_h))[..., None]
    elif texture_id == 2:
        img *= (0.85 + 0.15 * np.sign(np.sin(yy * 1.3 + phase)))[..., None]
    elif texture_id == 3:
        img *= (0.85 + 0.15 * ((yy // 4 + xx // 4) % 2))[..., None]
    elif texture_id == 4:
        img *= (0.8 + 0.2 * np.sin(xx * 0.9 + phase) ** 2)[..., None]
    elif texture_id == 5:
        img *= (0.8 + 0.2 * np.cos((xx + yy) * 0.7 + phase) ** 2)[..., None]
    return img


def _hsv(c: tuple[float, float, float]) -> np.ndarray:
    return hsv_to_rgb(np.asarray(c, dtype=np.float64))


def rotate_hue(pixels: np.ndarray, rotation: float) -> np.ndarray:
    if rotation == 0.0:
        return pixels
    hsv = rgb_to_hsv(pixels)
    hsv[..., 0] = (hsv[..., 0] + rotation) % 1.0
    return hsv_to_rgb(hsv)


def render_image(seed: int, ident: Identity, camera: int, view: int, spec: DomainSpec) -> np.ndarray:
    """Render one H x W x 3 image; deterministic in all arguments."""
    h, w = spec.image_hw
    rng = np.random.default_rng([seed, spec.domain_id, ident.id, camera, view, 31])
    dx, dy, cam_scale, gain = _camera_params(seed, spec.domain_id, camera)
    jx, jy = rng.uniform(-1.0, 1.0, size=2)

    # geometry is authored on the canonical 32 x 16 frame
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy *= IMAGE_SHAPE[0] / h
    xx *= IMAGE_SHAPE[1] / w
    img = _background(spec.shift.background_id, rng, yy, xx)

    # inverse-map output pixels into the canonical person frame
    s = cam_scale * ident.body_scale
    cy, cx = IMAGE_SHAPE[0] / 2.0, IMAGE_SHAPE[1] / 2.0
    py = (yy - cy - dy - jy) / s + cy
    px = (xx - cx - dx - jx) / s + cx
    half = ident.width / 2.0

    head = (np.abs(px - cx) < 2.2) & (py >= 2) & (py < 8)
    torso = (np.abs(px - cx) < half) & (py >= 8) & (py < 19)
    legs = (np.abs(px - cx) < half * 0.8) & (py >= 19) & (py < 30) & (np.abs(px - cx) > 0.6)

    torso_rgb = _hsv(ident.torso_hsv)
    pattern = np.ones_like(py)
    if ident.texture_id == 1:
        pattern = np.where(np.floor(py / 2) % 2 == 0, 1.0, 0.6)
    elif ident.texture_id == 2:
        pattern = np.where(np.floor(px / 2) % 2 == 0, 1.0, 0.6)
    elif ident.texture_id == 3:
        pattern = np.where((np.floor(px / 2) + np.floor(py / 2)) % 2 == 0, 1.0, 0.6)
    img[torso] = torso_rgb * pattern[torso][:, None]
    img[legs] = _hsv(ident.leg_hsv)
    img[head] = np.array([0.85, 0.7, 0.6]) * (1.0 - ident.head_value) + ident.head_value * 0.2

    if rng.uniform() < spec.shift.occlusion_prob:
        top = int(rng.integers(0, h - 6))
        img[top:top + int(rng.integers(4, 8))] = 0.5

    img = img * gain + rng.normal(0.0, spec.shift.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return rotate_hue(img, spec.shift.hue_rotation)


def _render_set(seed: int, spec: DomainSpec, ids: list[int], cams_views: list[tuple[int, int]]) -> ImageSet:
    pix, idn, cam, vw = [], [], [], []
    for i in ids:
        ident = make_identity(seed, i)
        for c, v in cams_views:
            pix.append(render_image(seed, ident, c, v, spec))
            idn.append(i)
            cam.append(c)
            vw.append(v)
    return ImageSet(np.stack(pix).astype(np.float32), np.asarray(idn, dtype=np.int64),
                    np.asarray(cam, dtype=np.int64), np.asarray(vw, dtype=np.int64), spec.domain_id)


def _eval_split(seed: int, spec: DomainSpec) -> EvalSplit:
    grid = [(c, v) for c in range(spec.n_cameras) for v in range(spec.views_per_camera)]
    images = _render_set(seed, spec, spec.test_ids, grid)
    # one query per (identity, camera); remaining views form the gallery, so every
    # query has gallery images under the other cameras
    is_query = images.views == 0
    return EvalSplit(images.subset(is_query), images.subset(~is_query), spec)


def generate_domain(seed: int, spec: DomainSpec) -> DomainDataset:
    grid = [(c, v) for c in range(spec.n_cameras) for v in range(spec.views_per_camera)]
    train = _render_set(seed, spec, spec.train_ids, grid)
    return DomainDataset(spec, train, _eval_split(seed, spec))


def seen_specs(num_domains: int, n_train_ids: int = 20, n_test_ids: int = 10,
               n_cameras: int = 3, views_per_camera: int = 4,
               image_hw: tuple[int, int] = IMAGE_SHAPE[:2]) -> list[DomainSpec]:
    return [DomainSpec(t, seen_shift(t), n_train_ids, n_test_ids, n_cameras, views_per_camera,
                       image_hw=tuple(image_hw))
            for t in range(num_domains)]


def make_unseen_suite(seed: int, n_domains: int, n_test_ids: int = 10, n_cameras: int = 3,
                      views_per_camera: int = 4,
                      image_hw: tuple[int, int] = IMAGE_SHAPE[:2]) -> list[EvalSplit]:
    if n_domains < 1:
        raise ValueError("n_domains must be >= 1")
    out = []
    for u in range(n_domains):
        spec = DomainSpec(100 + u, unseen_shift(u), 0, n_test_ids, n_cameras, views_per_camera,
                          id_base=UNSEEN_ID_BASE + 1000 * u, image_hw=tuple(image_hw))
        out.append(_eval_split(seed, spec))
    return out


def sample_pk_batch(train: ImageSet, P: int, K: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Identity-balanced batch: P distinct identities with K images each."""
    idx = sample_pk_indices(train.identities, P, K, rng)
    return train.pixels[idx], train.identities[idx]


def sample_pk_indices(identities: np.ndarray, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    ids, counts = np.unique(identities, return_counts=True)
    eligible = ids[counts >= K]
    if P < 1 or K < 1:
        raise ValueError("P and K must be >= 1")
    if len(eligible) < P:
        raise ValueError(f"need {P} identities with >= {K} images, have {len(eligible)}")
    chosen = rng.choice(eligible, size=P, replace=False)
    idx = np.concatenate([rng.choice(np.flatnonzero(identities == i), size=K, replace=False)
                          for i in chosen])
    return idx


def export_png(datasets: list[DomainDataset], out_dir: str | Path) -> Path:
    """Dump images as PNGs plus a manifest, for inspection only."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for ds in datasets:
        for split, images in (("train", ds.train), ("query", ds.test.query),
                              ("gallery", ds.test.gallery)):
            for k in range(len(images)):
                im = images[k]
                name = f"{im.domain_id}_{im.identity_id}_{im.camera_id}_{int(images.views[k])}.png"
                Image.fromarray(np.round(im.pixels * 255).astype(np.uint8)).save(out / name)
                rows.append((name, im.identity_id, im.camera_id, im.domain_id, split))
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "identity", "camera", "domain", "split"])
        writer.writerows(rows)
    return out
