"""Synthetic tubule scenes, dataset generation and k-fold splits.

A scene is a set of annuli (epithelium ring around a lumen) on interstitial
background. Touching tubules overlap their rings, so the 2-class mask merges
them while the instance map keeps them apart. That makes these scenes the
fixture for the watershed splitting.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from . import io

PALETTES = {
    # mean RGB per tissue class; PAS: magenta epithelium on pale pink
    "pas": {"background": (232, 200, 214), "epithelium": (176, 68, 138), "lumen": (246, 238, 243), "nuclei": (110, 30, 90)},
    # H&E: purple epithelium on eosin-pink stroma
    "he": {"background": (228, 168, 196), "epithelium": (124, 84, 162), "lumen": (244, 238, 246), "nuclei": (62, 42, 120)},
}


class PlacementError(RuntimeError):
    pass


@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 128
    tubule_count: tuple = (2, 5)
    outer_radius: tuple = (12.0, 22.0)
    lumen_ratio: tuple = (0.35, 0.6)
    touching_probability: float = 0.3
    palette: str = "pas"
    color_jitter: float = 8.0
    texture_amplitude: float = 10.0
    border_width: float = 2.0
    max_attempts: int = 400  # per tubule
    max_restarts: int = 20  # whole-scene re-draws after a jammed layout

    def validate(self) -> "SyntheticSceneSpec":
        if self.width % 32 or self.height % 32:
            raise ValueError(f"scene extents {self.height}x{self.width} must be divisible by 32")
        lo, hi = self.tubule_count
        if not 1 <= lo <= hi:
            raise ValueError(f"bad tubule_count range {self.tubule_count}")
        rlo, rhi = self.outer_radius
        if not 0 < rlo <= rhi or 2 * rhi > min(self.width, self.height):
            raise ValueError(f"outer radius range {self.outer_radius} does not fit a {self.height}x{self.width} image")
        llo, lhi = self.lumen_ratio
        if not 0 < llo <= lhi < 1:
            raise ValueError(f"lumen ratio range {self.lumen_ratio} must lie in (0, 1)")
        if self.max_attempts < 1 or self.max_restarts < 0:
            raise ValueError("max_attempts must be >= 1 and max_restarts >= 0")
        if not 0 <= self.touching_probability <= 1:
            raise ValueError("touching_probability must lie in [0, 1]")
        if self.palette not in PALETTES:
            raise ValueError(f"unknown palette {self.palette!r}; expected one of {sorted(PALETTES)}")
        return self


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    mask2: np.ndarray  # (H, W) uint8, 1 = epithelium
    mask3: np.ndarray  # (H, W) uint8, 1 = epithelium, 2 = outer border
    instances: np.ndarray  # (H, W) int32, 0 = background
    tubules: list = field(default_factory=list)  # (cx, cy, r_outer, lumen_ratio)
    touching_pairs: list = field(default_factory=list)


def _place(spec: SyntheticSceneSpec, rng: np.random.Generator) -> tuple:
    for restart in range(spec.max_restarts + 1):
        try:
            return _place_once(spec, rng)
        except PlacementError as exc:
            if restart == spec.max_restarts:
                raise PlacementError(f"{exc}; gave up after {spec.max_restarts} scene restarts") from None


def _place_once(spec: SyntheticSceneSpec, rng: np.random.Generator) -> tuple:
    n = int(rng.integers(spec.tubule_count[0], spec.tubule_count[1] + 1))
    tubules: list = []
    pairs: list = []
    gap = 3.0  # keeps non-touching rings apart under 8-connectivity
    for k in range(n):
        r = float(rng.uniform(*spec.outer_radius))
        ratio = float(rng.uniform(*spec.lumen_ratio))
        touch = bool(tubules) and rng.random() < spec.touching_probability
        for _ in range(spec.max_attempts):
            partner = None
            if touch:
                partner = int(rng.integers(len(tubules)))
                px, py, pr, _ = tubules[partner]
                d = rng.uniform(0.75, 0.9) * (r + pr)
                theta = rng.uniform(0, 2 * np.pi)
                cx, cy = px + d * np.cos(theta), py + d * np.sin(theta)
            else:
                cx = rng.uniform(r, spec.width - 1 - r)
                cy = rng.uniform(r, spec.height - 1 - r)
            if not (r <= cx <= spec.width - 1 - r and r <= cy <= spec.height - 1 - r):
                continue
            clear = all(
                np.hypot(cx - ox, cy - oy) >= r + orad + gap
                for j, (ox, oy, orad, _) in enumerate(tubules)
                if j != partner
            )
            if clear:
                if partner is not None:
                    pairs.append((partner, k))
                tubules.append((float(cx), float(cy), r, ratio))
                break
        else:
            what = "touching" if touch else "non-overlapping"
            raise PlacementError(
                f"could not place tubule {k + 1}/{n} (radius {r:.1f}, {what}) inside "
                f"{spec.height}x{spec.width} after {spec.max_attempts} attempts"
            )
    return tubules, pairs


def _rasterize(spec: SyntheticSceneSpec, tubules: list):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full((h, w), np.inf)
    owner = np.zeros((h, w), dtype=np.int32)
    ratio_of = np.zeros((h, w))
    for k, (cx, cy, r, ratio) in enumerate(tubules, start=1):
        nd = np.hypot(xx - cx, yy - cy) / r
        take = (nd <= 1.0) & (nd < best)
        best[take] = nd[take]
        owner[take] = k
        ratio_of[take] = ratio
    epithelium = (owner > 0) & (best >= ratio_of)
    instances = np.where(epithelium, owner, 0).astype(np.int32)
    border = np.zeros((h, w), dtype=bool)
    for k in range(1, len(tubules) + 1):
        region = owner == k
        dist = ndi.distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]
        border |= region & (dist <= spec.border_width)
    mask2 = epithelium.astype(np.uint8)
    mask3 = mask2.copy()
    mask3[epithelium & border] = 2
    lumen = (owner > 0) & ~epithelium
    return mask2, mask3, instances, lumen


def _render(spec: SyntheticSceneSpec, mask2, instances, lumen, n_tubules: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    pal = PALETTES[spec.palette]
    jit = spec.color_jitter

    def color(name):
        return np.asarray(pal[name], dtype=np.float64) + rng.normal(0, jit, 3)

    img = np.empty((h, w, 3))
    img[:] = color("background")
    img[lumen] = color("lumen")
    for k in range(1, n_tubules + 1):
        img[instances == k] = color("epithelium") + rng.normal(0, jit, 3)

    # germ-cell nuclei: small dark blobs scattered through the epithelium
    seeds = (rng.random((h, w)) < 0.03) & (mask2 > 0)
    nuclei = ndi.binary_dilation(seeds, iterations=1) & (mask2 > 0)
    img[nuclei] = 0.5 * img[nuclei] + 0.5 * color("nuclei")

    texture = ndi.gaussian_filter(rng.normal(0, 1, (h, w, 3)), sigma=(1.2, 1.2, 0))
    img += spec.texture_amplitude * texture / max(texture.std(), 1e-8)

    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy = rng.uniform(-0.12, 0.12, 2)
    img *= (1.0 + gx * (xx - 0.5) + gy * (yy - 0.5))[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(spec: SyntheticSceneSpec, seed: int) -> Scene:
    """Deterministic scene for ``(spec, seed)``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tubules, pairs = _place(spec, rng)
    mask2, mask3, instances, lumen = _rasterize(spec, tubules)
    image = _render(spec, mask2, instances, lumen, len(tubules), rng)
    return Scene(image, mask2, mask3, instances, tubules, pairs)


def generate_dataset(out_dir, count: int = 40, seed: int = 0, spec: SyntheticSceneSpec | None = None, split: str = "train") -> Path:
    """Write ``count`` scenes (seeds seed..seed+count-1) and a manifest; returns its path."""
    spec = (spec or SyntheticSceneSpec()).validate()
    out = Path(out_dir)
    records = []
    for i in range(count):
        scene = generate_scene(spec, seed + i)
        stem = f"scene_{seed + i:05d}"
        rec = io.Record(
            image=out / "images" / f"{stem}.png",
            mask2=out / "masks2" / f"{stem}.png",
            mask3=out / "masks3" / f"{stem}.png",
            instances=out / "instances" / f"{stem}.png",
            split=split,
        )
        io.write_image(rec.image, scene.image)
        io.write_mask(rec.mask2, scene.mask2)
        io.write_mask(rec.mask3, scene.mask3)
        io.write_mask(rec.instances, scene.instances, instances=True)
        records.append(rec)
    manifest = out / "manifest.tsv"
    io.write_manifest(manifest, records)
    return manifest


def in_memory_dataset(count: int, seed: int = 0, spec: SyntheticSceneSpec | None = None) -> list:
    """Scenes as the record dicts used by the training code (no files)."""
    spec = (spec or SyntheticSceneSpec()).validate()
    out = []
    for i in range(count):
        s = generate_scene(spec, seed + i)
        out.append(
            {"name": f"scene_{seed + i:05d}", "image": s.image, "mask2": s.mask2, "mask3": s.mask3, "instances": s.instances}
        )
    return out


@dataclass
class FoldSplit:
    k: int
    folds: list  # list of sorted index lists

    def train_val(self, fold: int) -> tuple:
        val = list(self.folds[fold])
        train = sorted(i for f, idx in enumerate(self.folds) if f != fold for i in idx)
        return train, val


def kfold_split(n_records: int, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded permutation dealt round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_records < k:
        raise ValueError(f"cannot split {n_records} records into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_records)
    folds = [sorted(int(i) for i in perm[f::k]) for f in range(k)]
    return FoldSplit(k, folds)


def with_palette(spec: SyntheticSceneSpec, palette: str) -> SyntheticSceneSpec:
    return replace(spec, palette=palette).validate()
