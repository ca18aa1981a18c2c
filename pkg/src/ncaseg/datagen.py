"""Synthetic multi-domain segmentation data.

Every sample is a grayscale image of a few nested elliptical structures on a
textured background, with a 4-class mask: 0 background, 1 outer ring, 2 the
pool enclosed by the ring, 3 a detached blob. Geometry (the mask) and
appearance (how the mask renders to intensities) come from separate RNG
streams, so the same scene can be "scanned" under different domains: a
DomainSpec warps the clean render with gamma, contrast/brightness, box blur
and additive Gaussian noise, never touching the mask. Domains with small
warps stand in for near-identical scanners, aggressive ones for the cross-
vendor shift the generalization experiment measures.

Dataset layout on disk (the adapter contract): ``manifest.json`` holding a
list of ``{sample_id, domain, image_path, mask_path, size}`` entries, image
and mask tensors as NCAT files. Any directory following it loads through
:func:`load_dataset`, so externally converted real data can replace the
synthetic set without touching the harness. Conversion and preprocessing of
such data (cropping, intensity windowing) happen outside this package.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import container, seeds

__all__ = [
    "Sample",
    "DomainSpec",
    "GeometryError",
    "DEFAULT_DOMAINS",
    "CLASS_INTENSITY",
    "gen_sample",
    "gen_dataset",
    "load_dataset",
    "load_manifest",
]

N_CLASSES = 4

# clean-render intensity per class (background, ring, pool, blob)
CLASS_INTENSITY = (0.15, 0.85, 0.45, 0.65)
TEXTURE_AMP = 0.05

MAX_PLACE_TRIES = 100


class GeometryError(RuntimeError):
    """Could not place the requested shapes after the retry budget."""


@dataclass(frozen=True)
class Sample:
    """One image/mask pair tagged with its domain of origin."""

    image: np.ndarray  # [d_img, I, J] float32 in [0, 1]
    mask: np.ndarray  # [I, J] uint8 class ids
    domain: str
    sample_id: str


@dataclass(frozen=True)
class DomainSpec:
    """Appearance warp emulating one scanner: applied to the clean render in
    the order gamma -> contrast/brightness -> blur -> noise -> clip."""

    name: str
    gamma: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: int = 0
    texture_freq: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")


# shift magnitudes: vendor_a and vendor_b sit close together, vendor_c is the
# outlier scanner every LODO split struggles to reach
DEFAULT_DOMAINS = (
    DomainSpec(name="vendor_a", gamma=1.0, contrast=1.0, brightness=0.0,
               noise_sigma=0.02, blur_radius=0, texture_freq=3.0),
    DomainSpec(name="vendor_b", gamma=1.15, contrast=0.92, brightness=0.03,
               noise_sigma=0.04, blur_radius=1, texture_freq=5.0),
    DomainSpec(name="vendor_c", gamma=0.65, contrast=1.15, brightness=0.10,
               noise_sigma=0.09, blur_radius=2, texture_freq=9.0),
)


# --- geometry ----------------------------------------------------------------


def _ellipse(ii, jj, ci, cj, ri, rj):
    return ((ii - ci) / ri) ** 2 + ((jj - cj) / rj) ** 2 <= 1.0


def _place(occupied, rng, ri, rj, min_px, inner=None):
    """Find a free center for an ellipse of radii (ri, rj); returns the mask
    (and the inner-pool mask when ``inner`` gives a shrink factor), or None
    when MAX_PLACE_TRIES candidate positions all collide."""
    n_i, n_j = occupied.shape
    ii, jj = np.mgrid[0:n_i, 0:n_j]
    for _ in range(MAX_PLACE_TRIES):
        ci = rng.uniform(ri + 1.0, n_i - ri - 1.0)
        cj = rng.uniform(rj + 1.0, n_j - rj - 1.0)
        padded = _ellipse(ii, jj, ci, cj, ri + 1.0, rj + 1.0)
        if (occupied & padded).any():
            continue
        shape = _ellipse(ii, jj, ci, cj, ri, rj)
        if inner is not None:
            pool = _ellipse(ii, jj, ci, cj, ri * inner, rj * inner)
            ring = shape & ~pool
            if int(ring.sum()) < min_px or int(pool.sum()) < min_px:
                continue
            occupied |= padded
            return ring, pool
        if int(shape.sum()) < min_px:
            continue
        occupied |= padded
        return shape
    return None


def _try_scene(geometry_rng, n_i: int, n_j: int):
    m = min(n_i, n_j)
    mask = np.zeros((n_i, n_j), dtype=np.uint8)
    occupied = np.zeros((n_i, n_j), dtype=bool)
    n_struct = int(geometry_rng.integers(1, 4))
    n_blob = int(geometry_rng.integers(1, 4))
    # radii sized so foreground covers roughly a third of the frame; much
    # below that the dice objective stalls in the all-background minimum
    for _ in range(n_struct):
        ri = geometry_rng.uniform(0.19, 0.31) * m
        rj = geometry_rng.uniform(0.19, 0.31) * m
        th = geometry_rng.uniform(0.07, 0.13) * m
        shrink = max(0.25, 1.0 - th / (0.5 * (ri + rj)))
        placed = _place(occupied, geometry_rng, ri, rj, min_px=5, inner=shrink)
        if placed is None:
            return None
        ring, pool = placed
        mask[ring] = 1
        mask[pool] = 2
    for _ in range(n_blob):
        rb = geometry_rng.uniform(0.11, 0.18) * m
        blob = _place(occupied, geometry_rng, rb, rb, min_px=3)
        if blob is None:
            return None
        mask[blob] = 3
    return mask


def _draw_mask(geometry_rng, n_i: int, n_j: int) -> np.ndarray:
    """Class-id map with 1-3 ring+pool structures and 1-3 detached blobs.

    Consumes only ``geometry_rng``, so identical seeds give identical masks
    under every domain.  A scene draw that runs out of room (crowded grids
    at small sizes) is discarded and redrawn from the same stream; only
    MAX_PLACE_TRIES consecutive dead scenes raise.
    """
    for _ in range(MAX_PLACE_TRIES):
        mask = _try_scene(geometry_rng, n_i, n_j)
        if mask is not None:
            return mask
    raise GeometryError(
        f"could not lay out a {n_i}x{n_j} scene after {MAX_PLACE_TRIES} attempts"
    )


# --- appearance ---------------------------------------------------------------


def _box_blur_1d(x: np.ndarray, radius: int, axis: int) -> np.ndarray:
    width = 2 * radius + 1
    x = np.moveaxis(x, axis, 0)
    padded = np.pad(x, [(radius, radius)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    csum = np.cumsum(padded, axis=0, dtype=np.float64)
    csum = np.concatenate([np.zeros((1,) + csum.shape[1:]), csum], axis=0)
    out = (csum[width:] - csum[:-width]) / width
    return np.moveaxis(out.astype(x.dtype), 0, axis)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable (2r+1)^2 mean filter with edge-replicated borders."""
    if radius == 0:
        return img
    return _box_blur_1d(_box_blur_1d(img, radius, 0), radius, 1)


def _render_clean(mask: np.ndarray, spec: DomainSpec, appearance_rng) -> np.ndarray:
    lut = np.array(CLASS_INTENSITY, dtype=np.float32)
    img = lut[mask]
    if spec.texture_freq > 0:
        n_i, n_j = mask.shape
        m = min(n_i, n_j)
        ph_i, ph_j = appearance_rng.uniform(0.0, 2.0 * np.pi, size=2)
        ii = np.arange(n_i, dtype=np.float32)[:, None] / m
        jj = np.arange(n_j, dtype=np.float32)[None, :] / m
        wave = np.sin(2.0 * np.pi * spec.texture_freq * ii + ph_i) * np.sin(
            2.0 * np.pi * spec.texture_freq * jj + ph_j
        )
        img = img + TEXTURE_AMP * wave.astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _apply_appearance(clean: np.ndarray, spec: DomainSpec, appearance_rng) -> np.ndarray:
    # no-op stages are skipped outright so an identity spec is bit-exact
    img = clean.astype(np.float32)
    if spec.gamma != 1.0:
        img = img**spec.gamma
    if spec.contrast != 1.0 or spec.brightness != 0.0:
        img = (img - 0.5) * spec.contrast + 0.5 + spec.brightness
    img = _box_blur(img, spec.blur_radius)
    if spec.noise_sigma > 0:
        img = img + appearance_rng.normal(0.0, spec.noise_sigma, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_sample(
    spec: DomainSpec,
    geometry_rng: np.random.Generator,
    appearance_rng: np.random.Generator,
    size: tuple[int, int],
    sample_id: str = "sample",
) -> Sample:
    """Draw one scene and render it under ``spec``.

    The two RNGs are deliberately separate: the mask depends only on
    ``geometry_rng``, the rendering only on ``appearance_rng`` and the spec.
    """
    n_i, n_j = size
    if n_i < 32 or n_j < 32:
        raise ValueError("image size must be at least 32x32")
    mask = _draw_mask(geometry_rng, n_i, n_j)
    clean = _render_clean(mask, spec, appearance_rng)
    img = _apply_appearance(clean, spec, appearance_rng)
    return Sample(image=img[None], mask=mask, domain=spec.name, sample_id=sample_id)


# --- dataset I/O ----------------------------------------------------------------


def gen_dataset(
    specs,
    n_per_domain: int,
    size: tuple[int, int],
    seed: int,
    out_dir,
) -> list[dict]:
    """Generate ``n_per_domain`` samples per domain and write the directory
    layout described in the module docstring; returns the manifest entries.

    Per-sample RNG streams are keyed on the sample id, so the dataset is
    reproducible sample-by-sample and identical for any generation order.
    """
    if len(specs) < 2:
        raise ValueError("need at least 2 domains")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate domain names")
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    manifest = []
    for spec in specs:
        for k in range(n_per_domain):
            sid = f"{spec.name}_{k:04d}"
            key = seeds.sample_key(sid)
            sample = gen_sample(
                spec,
                seeds.stream(seed, seeds.GEOMETRY, key),
                seeds.stream(seed, seeds.APPEARANCE, key),
                size,
                sample_id=sid,
            )
            image_path = os.path.join("images", f"{sid}.ncat")
            mask_path = os.path.join("masks", f"{sid}.ncat")
            container.write_tensor(os.path.join(out_dir, image_path), sample.image)
            container.write_tensor(
                os.path.join(out_dir, mask_path), sample.mask.astype(np.float32)
            )
            manifest.append(
                {
                    "sample_id": sid,
                    "domain": spec.name,
                    "image_path": image_path,
                    "mask_path": mask_path,
                    "size": [int(size[0]), int(size[1])],
                }
            )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> list[dict]:
    path = os.path.join(str(data_dir), "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    if not isinstance(manifest, list) or not manifest:
        raise ValueError(f"{path}: expected a non-empty list of entries")
    return manifest


def load_dataset(data_dir) -> list[Sample]:
    """Load every sample listed in a dataset directory's manifest."""
    data_dir = str(data_dir)
    samples = []
    for entry in load_manifest(data_dir):
        image = container.read_tensor(os.path.join(data_dir, entry["image_path"]))
        raw = container.read_tensor(os.path.join(data_dir, entry["mask_path"]))
        mask = np.rint(raw).astype(np.uint8)
        if np.abs(raw - mask).max() > 1e-3 or mask.max() >= N_CLASSES:
            raise ValueError(f"{entry['mask_path']}: not a class-id map")
        samples.append(
            Sample(
                image=image,
                mask=mask,
                domain=entry["domain"],
                sample_id=entry["sample_id"],
            )
        )
    return samples
