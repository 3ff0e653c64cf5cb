"""Parameter-tracked view augmentation.

Every random view is described by a :class:`TransformPlan` (the concrete
transform parameters) together with a :class:`PretextRecord` (the same
parameters encoded as prediction targets). The record is the source of
truth: ``sample_pretext`` first encodes the sampled parameters and then
decodes them back into the plan it returns, so rebuilding the plan from
the record and re-applying it reproduces the view bit for bit.

Transforms are applied in a fixed order: crop-resize, horizontal flip,
color jitter (brightness, contrast, saturation, hue), grayscale. Images
are ``float32`` arrays of shape ``(3, H, W)`` with values in ``[0, 1]``
and are never modified in place.

Target encoding, in the order used by the continuous target vector:

===================  =============================  =================
field                natural range                  unit encoding
===================  =============================  =================
crop_center_x        [0, 1] (relative to width)     stored directly
crop_center_y        [0, 1] (relative to height)    stored directly
crop_area_ratio      [0, 1]                         stored directly
crop_aspect_ratio    [ratio_min, ratio_max]         affine to [0, 1]
brightness           [max(0, 1-s), 1+s]             affine to [0, 1]
contrast             [max(0, 1-s), 1+s]             affine to [0, 1]
saturation           [max(0, 1-s), 1+s]             affine to [0, 1]
hue                  [-h, h]                        affine to [0, 1]
===================  =============================  =================

Discrete targets are ``(flip_applied, grayscale_applied,
jitter_applied)``, each in {0, 1}; rotation is a separate 4-way label
attached to the bundle. Identity parameters encode to 0.5 whenever the
range is symmetric around the identity; a zero-width range always
encodes to 0.5. When the jitter gate does not fire the four factor
entries hold the identity encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DISCRETE_FIELDS = ("flip_applied", "grayscale_applied", "jitter_applied")
DISCRETE_CLASS_SIZES = (2, 2, 2)
CONTINUOUS_FIELDS = (
    "crop_center_x",
    "crop_center_y",
    "crop_area_ratio",
    "crop_aspect_ratio",
    "brightness",
    "contrast",
    "saturation",
    "hue",
)
ROTATION_CLASSES = 4

# ITU-R 601 luma weights, shared by grayscale/contrast/saturation.
_LUMA = np.array([0.2989, 0.587, 0.114], dtype=np.float32)

_CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges and gate probabilities for the view pipeline."""

    out_size: int = 32
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    grayscale_prob: float = 0.2

    def __post_init__(self) -> None:
        if self.out_size < 1:
            raise ValueError(f"out_size must be positive, got {self.out_size}")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        rlo, rhi = self.crop_ratio
        if not (0.0 < rlo <= rhi):
            raise ValueError(f"crop_ratio must satisfy 0 < lo <= hi, got {self.crop_ratio}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if len(self.jitter_strength) != 4:
            raise ValueError("jitter_strength needs exactly 4 entries (brightness, contrast, saturation, hue)")
        b, c, s, h = self.jitter_strength
        for name, v in zip(("brightness", "contrast", "saturation"), (b, c, s)):
            if v < 0:
                raise ValueError(f"jitter strength for {name} must be >= 0, got {v}")
        if not (0.0 <= h <= 0.5):
            raise ValueError(f"hue strength must lie in [0, 0.5], got {h}")

    def factor_range(self, index: int) -> tuple[float, float]:
        """Natural range of jitter factor ``index`` (order: b, c, s, h)."""
        s = self.jitter_strength[index]
        if index == 3:
            return (-s, s)
        return (max(0.0, 1.0 - s), 1.0 + s)

    def factor_identity(self, index: int) -> float:
        return 0.0 if index == 3 else 1.0


@dataclass(frozen=True)
class TransformPlan:
    """Concrete parameters of one augmented view.

    Crop geometry is stored in units relative to the source side length;
    ``crop_area`` is the area ratio and ``crop_aspect`` is width/height
    of the crop window.
    """

    crop_center_x: float
    crop_center_y: float
    crop_area: float
    crop_aspect: float
    flip: bool
    jitter: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float
    grayscale: bool
    out_size: int


@dataclass(frozen=True)
class PretextRecord:
    """Prediction targets for one view.

    ``discrete`` holds (flip, grayscale, jitter-gate) class indices and
    ``continuous`` the eight unit-interval encodings listed in the
    module docstring.
    """

    discrete: tuple[int, int, int]
    continuous: tuple[float, float, float, float, float, float, float, float]

    def __post_init__(self) -> None:
        if len(self.discrete) != len(DISCRETE_FIELDS):
            raise ValueError(f"expected {len(DISCRETE_FIELDS)} discrete entries, got {len(self.discrete)}")
        for name, v, size in zip(DISCRETE_FIELDS, self.discrete, DISCRETE_CLASS_SIZES):
            if v not in range(size):
                raise ValueError(f"{name} must be in [0, {size}), got {v}")
        if len(self.continuous) != len(CONTINUOUS_FIELDS):
            raise ValueError(f"expected {len(CONTINUOUS_FIELDS)} continuous entries, got {len(self.continuous)}")
        for name, v in zip(CONTINUOUS_FIELDS, self.continuous):
            if not (0.0 <= v <= 1.0) or not math.isfinite(v):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class ViewBundle:
    """Two augmented views plus an optional rotated third view.

    ``x3`` is an exact 90-degree multiple rotation of ``x1`` and is
    present exactly when ``rotation`` is.
    """

    x1: np.ndarray
    x2: np.ndarray
    t1: PretextRecord
    t2: PretextRecord
    x3: Optional[np.ndarray] = None
    rotation: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.x3 is None) != (self.rotation is None):
            raise ValueError("x3 and rotation must be provided together")
        if self.rotation is not None and self.rotation not in range(ROTATION_CLASSES):
            raise ValueError(f"rotation must be in [0, {ROTATION_CLASSES}), got {self.rotation}")


def _to_unit(x: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.5
    return (x - lo) / (hi - lo)

def _from_unit(u: float, lo: float, hi: float) -> float:
    return lo + u * (hi - lo)


def encode_targets(record: PretextRecord) -> tuple[np.ndarray, np.ndarray]:
    """Return (discrete class indices, continuous unit targets) as arrays."""
    cat = np.asarray(record.discrete, dtype=np.int64)
    cont = np.asarray(record.continuous, dtype=np.float64)
    return cat, cont


def encode_target_batch(records: Sequence[PretextRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack target encodings for a batch of records."""
    cat = np.stack([np.asarray(r.discrete, dtype=np.int64) for r in records])
    cont = np.stack([np.asarray(r.continuous, dtype=np.float64) for r in records])
    return cat, cont


def record_to_plan(record: PretextRecord, cfg: AugmentConfig) -> TransformPlan:
    """Rebuild the transform plan a record was produced from.

    Uses the same unit-to-natural decoding as ``sample_pretext``, so the
    rebuilt plan is bitwise identical to the original.
    """
    flip, gray, jit = record.discrete
    c = record.continuous
    rlo, rhi = cfg.crop_ratio
    factors = [_from_unit(c[4 + i], *cfg.factor_range(i)) for i in range(4)]
    if not jit:
        factors = [cfg.factor_identity(i) for i in range(4)]
    return TransformPlan(
        crop_center_x=c[0],
        crop_center_y=c[1],
        crop_area=c[2],
        crop_aspect=_from_unit(c[3], rlo, rhi),
        flip=bool(flip),
        jitter=bool(jit),
        brightness=factors[0],
        contrast=factors[1],
        saturation=factors[2],
        hue=factors[3],
        grayscale=bool(gray),
        out_size=cfg.out_size,
    )


def plan_to_record(plan: TransformPlan, cfg: AugmentConfig) -> PretextRecord:
    """Encode a plan's parameters as pretext targets."""
    rlo, rhi = cfg.crop_ratio
    if plan.jitter:
        factor_units = tuple(
            _to_unit(f, *cfg.factor_range(i))
            for i, f in enumerate((plan.brightness, plan.contrast, plan.saturation, plan.hue))
        )
    else:
        factor_units = tuple(
            _to_unit(cfg.factor_identity(i), *cfg.factor_range(i)) for i in range(4)
        )
    return PretextRecord(
        discrete=(int(plan.flip), int(plan.grayscale), int(plan.jitter)),
        continuous=(
            plan.crop_center_x,
            plan.crop_center_y,
            plan.crop_area,
            _to_unit(plan.crop_aspect, rlo, rhi),
        ) + factor_units,
    )


def _sample_crop(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[float, float, float, float]:
    """Draw a crop window (center_x, center_y, area, aspect) in relative units.

    Rejection-samples up to 10 attempts like the usual area/log-aspect
    scheme; on failure it falls back to the largest centered window
    whose aspect is clipped into the configured range. The window is
    kept as real-valued coordinates, no snapping to the pixel grid.
    """
    lo, hi = cfg.crop_scale
    rlo, rhi = cfg.crop_ratio
    log_rlo, log_rhi = math.log(rlo), math.log(rhi)
    for _ in range(_CROP_ATTEMPTS):
        area = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(log_rlo, log_rhi))
        w = math.sqrt(area * aspect)
        h = math.sqrt(area / aspect)
        if w <= 1.0 and h <= 1.0:
            cx = rng.uniform(w / 2.0, 1.0 - w / 2.0) if w < 1.0 else 0.5
            cy = rng.uniform(h / 2.0, 1.0 - h / 2.0) if h < 1.0 else 0.5
            return cx, cy, area, aspect
    # Centered fallback; source images are square so in-ratio is 1.
    aspect = min(max(1.0, rlo), rhi)
    w = 1.0 if aspect >= 1.0 else aspect
    h = w / aspect
    return 0.5, 0.5, w * h, aspect


def sample_pretext(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[TransformPlan, PretextRecord]:
    """Sample one view's transform plan and its pretext record.

    Draw order is fixed: flip gate, crop window, jitter gate, the four
    jitter factors (only when the gate fired), grayscale gate. The plan
    is rebuilt from the record's encoding, which makes replay from the
    record exact.
    """
    flip = bool(rng.random() < cfg.flip_prob)
    cx, cy, area, aspect = _sample_crop(rng, cfg)
    jitter = bool(rng.random() < cfg.jitter_prob)
    if jitter:
        factors = tuple(rng.uniform(*cfg.factor_range(i)) for i in range(4))
    else:
        factors = tuple(cfg.factor_identity(i) for i in range(4))
    grayscale = bool(rng.random() < cfg.grayscale_prob)
    plan = TransformPlan(
        crop_center_x=cx,
        crop_center_y=cy,
        crop_area=area,
        crop_aspect=aspect,
        flip=flip,
        jitter=jitter,
        brightness=factors[0],
        contrast=factors[1],
        saturation=factors[2],
        hue=factors[3],
        grayscale=grayscale,
        out_size=cfg.out_size,
    )
    record = plan_to_record(plan, cfg)
    return record_to_plan(record, cfg), record


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected image of shape (3, H, W), got {img.shape}")


def luminance(img: np.ndarray) -> np.ndarray:
    """Per-pixel luma of an RGB image, shape (H, W)."""
    return np.tensordot(_LUMA.astype(img.dtype), img, axes=1)


def _crop_resize(img: np.ndarray, plan: TransformPlan) -> np.ndarray:
    """Bilinear crop-resize of a real-valued window, border-replicated.

    Sample positions follow the half-pixel convention
    ``src = left + (i + 0.5) * window / out - 0.5`` so a full-frame
    window at the native size is an exact identity.
    """
    _, height, width = img.shape
    out = plan.out_size
    w_rel = math.sqrt(plan.crop_area * plan.crop_aspect)
    h_rel = math.sqrt(plan.crop_area / plan.crop_aspect)
    win_w = w_rel * width
    win_h = h_rel * height
    left = plan.crop_center_x * width - win_w / 2.0
    top = plan.crop_center_y * height - win_h / 2.0

    xs = left + (np.arange(out, dtype=np.float64) + 0.5) * (win_w / out) - 0.5
    ys = top + (np.arange(out, dtype=np.float64) + 0.5) * (win_h / out) - 0.5
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    wx = (xs - x0).astype(img.dtype)[None, None, :]
    wy = (ys - y0).astype(img.dtype)[None, :, None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0c = np.clip(x0, 0, width - 1)
    x1c = np.clip(x0 + 1, 0, width - 1)
    y0c = np.clip(y0, 0, height - 1)
    y1c = np.clip(y0 + 1, 0, height - 1)

    rows0 = img[:, y0c, :]
    rows1 = img[:, y1c, :]
    tl = rows0[:, :, x0c]
    tr = rows0[:, :, x1c]
    bl = rows1[:, :, x0c]
    br = rows1[:, :, x1c]
    top_row = tl + wx * (tr - tl)
    bot_row = bl + wx * (br - bl)
    return top_row + wy * (bot_row - top_row)


def _blend(img: np.ndarray, other: np.ndarray | float, factor: float) -> np.ndarray:
    return np.clip(factor * img + (1.0 - factor) * other, 0.0, 1.0).astype(img.dtype)


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = _rgb_to_hsv(img.astype(np.float64))
    hsv[0] = (hsv[0] + shift) % 1.0
    return _hsv_to_rgb(hsv).astype(img.dtype)


def apply_plan(img: np.ndarray, plan: TransformPlan) -> np.ndarray:
    """Apply a transform plan to an image, returning a new array.

    Order: crop-resize, flip, jitter (brightness, contrast, saturation,
    hue), grayscale. Values stay inside [0, 1].
    """
    _check_image(img)
    out = _crop_resize(img, plan)
    if plan.flip:
        out = out[:, :, ::-1]
    if plan.jitter:
        out = _blend(out, 0.0, plan.brightness)
        out = _blend(out, luminance(out).mean(dtype=out.dtype), plan.contrast)
        out = _blend(out, luminance(out)[None], plan.saturation)
        if plan.hue != 0.0:
            out = _adjust_hue(out, plan.hue)
    if plan.grayscale:
        out = np.broadcast_to(luminance(out)[None], out.shape)
    return np.ascontiguousarray(out, dtype=img.dtype)


def rotate90(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate an image clockwise by k quarter turns (exact permutation)."""
    _check_image(img)
    if k not in range(ROTATION_CLASSES):
        raise ValueError(f"k must be in [0, {ROTATION_CLASSES}), got {k}")
    return np.ascontiguousarray(np.rot90(img, k=-k, axes=(1, 2)))


_ROTATION_VARIANTS = frozenset({"rot", "all", "prelax_rot", "prelax_all"})
_KNOWN_VARIANTS = _ROTATION_VARIANTS | frozenset(
    {"baseline", "std", "baseline_simsiam", "baseline_byol", "margin_baseline", "prelax_std"}
)


def make_bundle(
    img: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    variant: str = "std",
) -> ViewBundle:
    """Build the view bundle one training example contributes.

    Two independently augmented views are always produced; rotation
    variants additionally attach an exact quarter-turn rotation of the
    first view with its angle label.
    """
    if variant not in _KNOWN_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    _check_image(img)
    plan1, rec1 = sample_pretext(rng, cfg)
    plan2, rec2 = sample_pretext(rng, cfg)
    x1 = apply_plan(img, plan1)
    x2 = apply_plan(img, plan2)
    if variant in _ROTATION_VARIANTS:
        angle = int(rng.integers(ROTATION_CLASSES))
        return ViewBundle(x1=x1, x2=x2, t1=rec1, t2=rec2, x3=rotate90(x1, angle), rotation=angle)
    return ViewBundle(x1=x1, x2=x2, t1=rec1, t2=rec2)
