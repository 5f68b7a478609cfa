"""CT volume ingestion, resampling, slicing, normalisation, augmentation,
dataset splitting, the slice cache, and a synthetic spine-phantom generator
for desk-scale work.

All pipeline randomness is derived from (seed, volume_id, slice_index,
epoch), so the augmentation a sample receives never depends on worker
scheduling or iteration order.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .autodiff import _resize_matrix
from .nifti import read_nifti, write_nifti

PLANES = ("sagittal", "coronal", "axial")
PHASES = ("train", "valid", "test")

INTENSITY_DIVISOR = 2048.0
SHIFT_RANGE = 0.25
CT_MIN, CT_MAX = -1024.0, 3072.0

# tolerated off-axis leakage when reducing an affine to permutation+spacing
OBLIQUE_TOL = 1e-3


@dataclass
class Volume:
    """3-D scalar grid with voxel spacing (mm) and an axis-orientation tag.

    `axes[i]` names the anatomical axis running along array axis i, so a
    slice of the named plane is taken by fixing that array axis.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    axes: tuple = PLANES

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"voxel spacing must be positive, got {self.spacing}")
        if sorted(self.axes) != sorted(PLANES):
            raise ValueError(f"axes must be a permutation of {PLANES}, got {self.axes}")

    @property
    def shape(self):
        return self.data.shape

    def plane_axis(self, plane):
        if plane not in PLANES:
            raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")
        return self.axes.index(plane)


@dataclass
class SliceSample:
    """One 2-D image/mask pair cut from a volume.

    The image holds raw CT intensities until `normalize_intensity` is
    applied; afterwards every entry lies in [-1, 1]. The mask is binary.
    """

    image: np.ndarray
    mask: np.ndarray
    plane: str
    volume_id: str
    slice_index: int
    phase: str = "train"


@dataclass
class AugmentationConfig:
    """Two augmentation sets: the first is drawn with probability `p_set1`,
    otherwise the second; each op in the chosen set fires independently
    with `per_op_prob`."""

    p_set1: float = 0.6
    per_op_prob: float = 0.5
    set1_ops: tuple = ("flip_lr", "flip_ud", "central_crop", "random_crop",
                       "random_contrast", "random_brightness", "transpose")
    set2_ops: tuple = ("rotation", "shear", "zoom", "shift")
    rotation_deg: float = 15.0
    shear_deg: float = 10.0
    zoom_range: tuple = (0.85, 1.15)
    shift_frac: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    brightness_delta: float = 0.1
    crop_min_area: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_set1 <= 1.0:
            raise ValueError("p_set1 must lie in [0, 1]")
        if not 0.0 <= self.per_op_prob <= 1.0:
            raise ValueError("per_op_prob must lie in [0, 1]")
        if not 0.0 < self.crop_min_area <= 1.0:
            raise ValueError("crop_min_area must lie in (0, 1]")


def sample_rng(seed, volume_id, slice_index, epoch=0):
    """Per-sample random stream: a pure function of its arguments."""
    key = zlib.crc32(str(volume_id).encode())
    return np.random.default_rng(
        np.random.SeedSequence([abs(int(seed)), int(epoch), key, int(slice_index)]))


# -- volume IO ---------------------------------------------------------------


def _affine_to_axes(affine):
    """Reduce a voxel-to-world affine to (axes, spacing); oblique rejected."""
    a = np.asarray(affine, dtype=float)[:3, :3]
    axes = []
    spacing = []
    for j in range(3):
        col = np.abs(a[:, j])
        i = int(col.argmax())
        if col[i] <= 0:
            raise ValueError(f"voxel spacing must be positive on axis {j}")
        off_axis = np.delete(col, i)
        if (off_axis > OBLIQUE_TOL * col[i]).any():
            raise ValueError(
                "oblique orientation: the affine does not reduce to an axis "
                f"permutation plus spacing (column {j} = {a[:, j]})")
        axes.append(PLANES[i])
        # headers store float32; strip the representation noise
        spacing.append(round(float(col[i]), 6))
    if len(set(axes)) != 3:
        raise ValueError("degenerate affine: two array axes map to the same "
                         "anatomical axis")
    return tuple(axes), tuple(spacing)


def load_volume(path):
    """Load a NIfTI volume into a `Volume` (header -> axes/spacing)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"volume not found: {path}")
    data, affine = read_nifti(path)
    axes, spacing = _affine_to_axes(affine)
    return Volume(data=data, spacing=spacing, axes=axes)


def save_volume(path, volume, dtype=np.float32):
    """Write a `Volume` as NIfTI with a permutation+spacing affine."""
    affine = np.eye(4)
    affine[:3, :3] = 0.0
    for j, name in enumerate(volume.axes):
        affine[PLANES.index(name), j] = volume.spacing[j]
    return write_nifti(path, volume.data, affine, dtype=dtype)


# -- resampling and slicing ----------------------------------------------------


def resample_to_unit_spacing(volume, is_mask=False):
    """Resample onto a 1 mm isotropic grid: trilinear for images, nearest
    for masks. New extent = old extent * old spacing, rounded (min 1)."""
    spacing = np.array(volume.spacing)
    if np.all(np.abs(spacing - 1.0) < 1e-6):
        return Volume(volume.data.copy(), (1.0, 1.0, 1.0), volume.axes)
    out_shape = np.maximum(1, np.round(np.array(volume.shape) * spacing)).astype(int)
    zoom = out_shape / np.array(volume.shape)
    order = 0 if is_mask else 1
    data = ndimage.zoom(volume.data, zoom, order=order, mode="nearest",
                        prefilter=False, grid_mode=False)
    assert data.shape == tuple(out_shape)
    return Volume(data, (1.0, 1.0, 1.0), volume.axes)


def resize2d(img, out_h, out_w, order=1):
    """2-D resize: bilinear (order 1) or nearest (order 0), half-pixel grid."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    if order == 0:
        ri = np.minimum((np.floor((np.arange(out_h) + 0.5) * h / out_h)).astype(int), h - 1)
        ci = np.minimum((np.floor((np.arange(out_w) + 0.5) * w / out_w)).astype(int), w - 1)
        return img[np.ix_(ri, ci)]
    return _resize_matrix(h, out_h) @ img @ _resize_matrix(w, out_w).T


def extract_slices(volume, mask, plane, *, volume_id="", phase="train",
                   keep_empty=False, size=256):
    """One SliceSample per index along the plane's normal axis.

    Images are resized bilinearly to size x size, masks with nearest
    neighbour and re-binarised. Slices whose mask is entirely background
    are dropped unless `keep_empty`. `size=None` keeps native slice shape.
    """
    if volume.shape != mask.shape:
        raise ValueError(
            f"image/mask shape mismatch: {volume.shape} vs {mask.shape}")
    if any(abs(a - b) > 1e-6 for a, b in zip(volume.spacing, mask.spacing)):
        raise ValueError("image/mask spacing mismatch")
    axis = volume.plane_axis(plane)
    samples = []
    for idx in range(volume.shape[axis]):
        m2d = np.take(mask.data, idx, axis=axis)
        if not keep_empty and not (m2d > 0).any():
            continue
        img2d = np.take(volume.data, idx, axis=axis)
        if size is not None:
            img2d = resize2d(img2d, size, size, order=1)
            m2d = resize2d(m2d, size, size, order=0)
        samples.append(SliceSample(
            image=img2d.astype(np.float64),
            mask=(m2d > 0.5).astype(np.uint8),
            plane=plane, volume_id=volume_id, slice_index=idx, phase=phase))
    return samples


def stack_slices(samples, axis):
    """Inverse of extract_slices at native size with keep_empty=True."""
    imgs = [s.image for s in sorted(samples, key=lambda s: s.slice_index)]
    return np.stack(imgs, axis=axis)


# -- intensity normalisation -----------------------------------------------------


def normalize_intensity(img, mode="eval", rng=None, *,
                        scale_range=(0.75, 1.25), literal_scale_range=False):
    """Scale raw CT intensities into [-1, 1].

    The intensities are divided by 2048; in train mode a random shift in
    [-0.25, 0.25] and a random scale are applied; the result is always
    clipped to [-1, 1]. By default the scale is drawn from (0.75, 1.25);
    `literal_scale_range` switches to (-1.25, 1.25), which can invert
    contrast for negative draws.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(img, dtype=np.float64) / INTENSITY_DIVISOR
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode normalisation needs an rng")
        x = x + rng.uniform(-SHIFT_RANGE, SHIFT_RANGE)
        lo, hi = (-1.25, 1.25) if literal_scale_range else scale_range
        x = x * rng.uniform(lo, hi)
    return np.clip(x, -1.0, 1.0)


# -- augmentation ------------------------------------------------------------------


@dataclass
class AugmentationTrace:
    """Record of one augmentation draw: which set fired, the ordered ops
    with their parameters, and a geometric replay for masks."""

    set_used: int
    ops: list = field(default_factory=list)
    geometric: list = field(default_factory=list)

    def apply_geometric(self, arr, order):
        """Replay the recorded geometric transform (order 0 for masks)."""
        out = np.asarray(arr, dtype=np.float64)
        for kind, params in self.geometric:
            if kind == "flip_lr":
                out = out[:, ::-1]
            elif kind == "flip_ud":
                out = out[::-1, :]
            elif kind == "transpose":
                out = out.T
            elif kind == "crop":
                r0, r1, c0, c1, size = params
                out = resize2d(out[r0:r1, c0:c1], size, size, order=order)
            elif kind == "affine":
                matrix, offset = params
                out = ndimage.affine_transform(out, matrix, offset=offset,
                                               order=order, mode="nearest",
                                               prefilter=False)
            else:
                raise ValueError(f"unknown geometric op {kind!r}")
        return out


def _centered(matrix, size):
    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    return matrix, center - matrix @ center


def augment_with_trace(sample, cfg, rng):
    """Augment a normalised sample; returns (sample, trace).

    Geometric ops hit image and mask identically (mask nearest, then
    re-binarised); photometric ops touch only the image; the image is
    re-clipped to [-1, 1] and crops are resized back to the input size.
    """
    if sample.image.shape[0] != sample.image.shape[1]:
        raise ValueError(
            f"augmentation expects square slices, got {sample.image.shape}")
    size = sample.image.shape[0]
    img = sample.image.astype(np.float64)
    trace = AugmentationTrace(set_used=1 if rng.random() < cfg.p_set1 else 2)
    ops = cfg.set1_ops if trace.set_used == 1 else cfg.set2_ops

    affine_mats = []
    for op in ops:
        if rng.random() >= cfg.per_op_prob:
            continue
        if op == "flip_lr":
            img = img[:, ::-1]
            trace.geometric.append(("flip_lr", None))
        elif op == "flip_ud":
            img = img[::-1, :]
            trace.geometric.append(("flip_ud", None))
        elif op == "transpose":
            img = img.T
            trace.geometric.append(("transpose", None))
        elif op in ("central_crop", "random_crop"):
            frac = rng.uniform(np.sqrt(cfg.crop_min_area), 1.0)
            side = max(1, int(round(size * frac)))
            if op == "central_crop":
                r0 = c0 = (size - side) // 2
            else:
                r0 = int(rng.integers(0, size - side + 1))
                c0 = int(rng.integers(0, size - side + 1))
            params = (r0, r0 + side, c0, c0 + side, size)
            img = resize2d(img[r0:r0 + side, c0:c0 + side], size, size, order=1)
            trace.geometric.append(("crop", params))
        elif op == "random_contrast":
            factor = rng.uniform(*cfg.contrast_range)
            mean = img.mean()
            img = mean + factor * (img - mean)
            trace.ops.append((op, factor))
            continue
        elif op == "random_brightness":
            delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
            img = img + delta
            trace.ops.append((op, delta))
            continue
        elif op == "rotation":
            theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
            m = np.array([[np.cos(theta), -np.sin(theta)],
                          [np.sin(theta), np.cos(theta)]])
            affine_mats.append(_centered(m, size))
            trace.ops.append((op, float(np.rad2deg(theta))))
            continue
        elif op == "shear":
            s = np.tan(np.deg2rad(rng.uniform(-cfg.shear_deg, cfg.shear_deg)))
            affine_mats.append(_centered(np.array([[1.0, s], [0.0, 1.0]]), size))
            trace.ops.append((op, float(s)))
            continue
        elif op == "zoom":
            z = rng.uniform(*cfg.zoom_range)
            affine_mats.append(_centered(np.eye(2) / z, size))
            trace.ops.append((op, float(z)))
            continue
        elif op == "shift":
            d = rng.uniform(-cfg.shift_frac, cfg.shift_frac, 2) * size
            affine_mats.append((np.eye(2), -d))
            trace.ops.append((op, tuple(d)))
            continue
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
        trace.ops.append((op, None))

    if affine_mats:
        m_total = np.eye(2)
        o_total = np.zeros(2)
        for m, o in affine_mats:
            m_total, o_total = m_total @ m, m_total @ o + o_total
        img = ndimage.affine_transform(img, m_total, offset=o_total, order=1,
                                       mode="nearest", prefilter=False)
        trace.geometric.append(("affine", (m_total, o_total)))

    mask = (trace.apply_geometric(sample.mask, order=0) > 0.5).astype(np.uint8)
    out = replace(sample, image=np.clip(img, -1.0, 1.0), mask=mask)
    return out, trace


def augment(sample, cfg, rng):
    return augment_with_trace(sample, cfg, rng)[0]


# -- synthetic phantoms --------------------------------------------------------


def make_synthetic_dataset(n_volumes, seed, shape=(64, 64, 64),
                           spacing=(1.0, 1.0, 1.0)):
    """Spine phantoms: a vertical stack of 5-7 bright ellipsoids inside a
    soft-tissue body with exact binary masks. Deterministic per seed; the
    mask foreground fraction always lies in (0.01, 0.30)."""
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    pairs = []
    for v in range(n_volumes):
        rng = np.random.default_rng(np.random.SeedSequence([abs(int(seed)), v]))
        img, mask = _make_phantom(rng, shape)
        pairs.append((Volume(img, spacing), Volume(mask, spacing)))
    return pairs


def _make_phantom(rng, shape):
    sz = np.array(shape)
    grid = np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij")

    # body: elliptical cylinder of soft tissue in an air background
    body_r = sz[:2] * rng.uniform(0.34, 0.46, 2)
    center = sz[:2] / 2.0
    body = (((grid[0] - center[0]) / body_r[0]) ** 2
            + ((grid[1] - center[1]) / body_r[1]) ** 2) <= 1.0
    tissue = 40.0 + 30.0 * ndimage.gaussian_filter(rng.normal(size=shape), 3.0)
    img = np.where(body, tissue, -1000.0 + 20.0 * rng.normal(size=shape))

    # per-patient variation: vertebra scale, spine offset, and spine tilt
    n_vert = int(rng.integers(5, 8))
    patient_scale = rng.uniform(0.8, 1.25)
    spine_base = center + rng.uniform(-0.08, 0.08, 2) * sz[:2]
    tilt = rng.uniform(-0.12, 0.12, 2)  # lateral drift per axial voxel

    z_span = sz[2] * 0.82
    z0 = sz[2] * 0.09
    pitch = z_span / n_vert
    mask = np.zeros(shape, dtype=bool)
    radii_scale = patient_scale
    while True:
        mask[:] = False
        for k in range(n_vert):
            cz = z0 + (k + 0.5) * pitch + rng.normal(0, 0.02) * pitch
            cx = spine_base[0] + tilt[0] * (cz - sz[2] / 2.0) \
                + rng.normal(0, 0.01) * sz[0]
            cy = spine_base[1] + tilt[1] * (cz - sz[2] / 2.0) \
                + rng.normal(0, 0.01) * sz[1]
            rx = sz[0] * rng.uniform(0.10, 0.14) * radii_scale
            ry = sz[1] * rng.uniform(0.10, 0.14) * radii_scale
            rz = pitch * rng.uniform(0.30, 0.42) * radii_scale
            ell = (((grid[0] - cx) / rx) ** 2 + ((grid[1] - cy) / ry) ** 2
                   + ((grid[2] - cz) / rz) ** 2) <= 1.0
            mask |= ell
        fraction = mask.mean()
        if fraction > 0.011:
            break
        radii_scale *= 1.3  # tiny draw: grow until clearly visible
    assert 0.01 < fraction < 0.30, f"phantom foreground fraction {fraction}"

    bone = 650.0 + rng.uniform(0, 300) + 60.0 * rng.normal(size=shape)
    img = np.where(mask, bone, img)
    return np.clip(img, CT_MIN, CT_MAX), mask.astype(np.float64)


# -- dataset split ---------------------------------------------------------------


def split_dataset(volumes, fractions, seed):
    """Volume-level split into train/valid/test by largest remainder.

    `volumes` is any sequence (typically volume ids); all slices of one
    volume therefore stay in one phase. Deterministic per seed.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must have 3 entries (train, valid, test)")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    items = list(volumes)
    n = len(items)
    n_phases = sum(1 for f in fractions if f > 0)
    if n < n_phases:
        raise ValueError(f"{n} volumes cannot cover {n_phases} phases")

    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = n - sum(counts)
    by_frac = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(remainder):
        counts[by_frac[i % 3]] += 1

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [items[i] for i in order]
    out = {}
    start = 0
    for phase, count in zip(PHASES, counts):
        out[phase] = shuffled[start:start + count]
        start += count
    return out


# -- slice cache ------------------------------------------------------------------


def save_slice_cache(samples, cache_dir):
    """Per-slice flat binary tensors plus a JSON index.

    Each record file holds the raw image as little-endian float32 followed
    by the mask as uint8; the index carries (volume_id, plane, slice_index,
    phase) and the slice shape.
    """
    os.makedirs(cache_dir, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        name = f"{i:06d}.bin"
        with open(os.path.join(cache_dir, name), "wb") as fh:
            fh.write(s.image.astype("<f4").tobytes())
            fh.write(s.mask.astype(np.uint8).tobytes())
        records.append({"file": name, "volume_id": s.volume_id, "plane": s.plane,
                        "slice_index": int(s.slice_index), "phase": s.phase,
                        "height": int(s.image.shape[0]),
                        "width": int(s.image.shape[1])})
    index = {"format": "vertseg-slice-cache-v1", "records": records}
    with open(os.path.join(cache_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1)
    return cache_dir


def load_slice_cache(cache_dir, plane=None, phase=None):
    index_path = os.path.join(cache_dir, "index.json")
    if not os.path.exists(index_path):
        raise FileNotFoundError(f"slice cache index not found: {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    samples = []
    for rec in index["records"]:
        if plane is not None and rec["plane"] != plane:
            continue
        if phase is not None and rec["phase"] != phase:
            continue
        h, w = rec["height"], rec["width"]
        with open(os.path.join(cache_dir, rec["file"]), "rb") as fh:
            raw = fh.read()
        img = np.frombuffer(raw, dtype="<f4", count=h * w).reshape(h, w)
        mask = np.frombuffer(raw, dtype=np.uint8, offset=4 * h * w,
                             count=h * w).reshape(h, w)
        samples.append(SliceSample(image=img.astype(np.float64), mask=mask.copy(),
                                   plane=rec["plane"], volume_id=rec["volume_id"],
                                   slice_index=rec["slice_index"],
                                   phase=rec["phase"]))
    return samples


# -- dataset directory layout ------------------------------------------------------


def write_dataset_dir(pairs, root, ids=None):
    """Write (image, mask) volume pairs as <root>/{images,masks}/<id>.nii.gz."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    ids = ids or [f"synth_{i:03d}" for i in range(len(pairs))]
    for vid, (img, mask) in zip(ids, pairs):
        save_volume(os.path.join(img_dir, f"{vid}.nii.gz"), img)
        save_volume(os.path.join(mask_dir, f"{vid}.nii.gz"), mask, dtype=np.uint8)
    return ids


def list_dataset_dir(root):
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise FileNotFoundError(
            f"dataset root must contain images/ and masks/: {root}")
    ids = sorted(f[:-len(".nii.gz")] if f.endswith(".nii.gz") else f[:-len(".nii")]
                 for f in os.listdir(img_dir) if f.endswith((".nii", ".nii.gz")))
    return ids


def load_dataset_pair(root, vid):
    def find(sub):
        for ext in (".nii.gz", ".nii"):
            p = os.path.join(root, sub, vid + ext)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(f"no {sub} volume for id {vid!r} under {root}")

    return load_volume(find("images")), load_volume(find("masks"))
