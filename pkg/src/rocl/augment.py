"""SimCLR-style stochastic augmentations: inception crop, flip, HSV jitter, grayscale.

Sampling and application are split: :func:`sample_transform` draws a concrete
:class:`TransformSpec` from a seed, :func:`apply_transform` is a deterministic
function of that spec. Crop-resize, flip and grayscale are linear maps of the
pixels; :func:`transform_vjp` pulls gradients back through them (and through
the jitter, via its per-pixel Jacobian) for expectation-over-transformation
attacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
_LOG_RATIO = (math.log(3 / 4), math.log(4 / 3))


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: Tuple[float, float] = (0.08, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    # (hue, brightness, saturation); magnitudes are a guess, not published values
    jitter_strengths: Tuple[float, float, float] = (0.1, 0.4, 0.4)
    gray_prob: float = 0.2

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ("flip_prob", "jitter_prob", "gray_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if any(s < 0 for s in self.jitter_strengths):
            raise ValueError("jitter strengths must be non-negative")


def simclr_policy() -> AugmentPolicy:
    """The training family T."""
    return AugmentPolicy()


def smoothing_policy(scale: float = 0.54, base: Optional[AugmentPolicy] = None) -> AugmentPolicy:
    """The training family (``base``) with a fixed-scale crop, used for smoothed inference."""
    return replace(base or AugmentPolicy(), crop_scale_range=(scale, scale))


def identity_policy() -> AugmentPolicy:
    return AugmentPolicy(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_prob=0.0, gray_prob=0.0)


@dataclass(frozen=True)
class TransformSpec:
    crop_rect: Tuple[float, float, float, float]  # x, y, w, h in source pixels
    flip: bool = False
    jitter: Optional[Tuple[float, float, float]] = None  # (d_hue, d_brightness, d_saturation)
    gray: bool = False
    image_dims: Tuple[int, int] = field(default=(0, 0))  # (H, W) the spec was sampled for

    def is_identity(self) -> bool:
        h, w = self.image_dims
        return (self.crop_rect == (0.0, 0.0, float(w), float(h)) and not self.flip
                and self.jitter is None and not self.gray)


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from integer keys, e.g. (global_seed, epoch, index, view)."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_transform(policy: AugmentPolicy, rng_seed: int, image_dims: Sequence[int]) -> TransformSpec:
    """Draw t ~ T deterministically from ``rng_seed`` for an image of ``image_dims``.

    ``image_dims`` is (H, W) or (C, H, W).
    """
    dims = tuple(int(d) for d in image_dims)
    H, W = dims[-2:]
    if H <= 0 or W <= 0:
        raise ValueError(f"image dims must be positive, got {image_dims}")
    rng = np.random.default_rng(rng_seed)
    lo, hi = policy.crop_scale_range
    area = H * W
    for _ in range(10):
        frac = rng.uniform(lo, hi) if hi > lo else lo
        ratio = math.exp(rng.uniform(*_LOG_RATIO))
        w = math.sqrt(frac * area * ratio)
        h = math.sqrt(frac * area / ratio)
        if 0 < w <= W and 0 < h <= H:
            break
    else:
        # aspect ratio that always fits; keeps the sampled area fraction
        w, h = math.sqrt(frac) * W, math.sqrt(frac) * H
    if frac == 1.0:
        w, h = float(W), float(H)
    x0 = rng.uniform(0, W - w) if W > w else 0.0
    y0 = rng.uniform(0, H - h) if H > h else 0.0
    flip = bool(rng.random() < policy.flip_prob)
    jitter = None
    if rng.random() < policy.jitter_prob:
        s = policy.jitter_strengths
        jitter = tuple(float(rng.uniform(-si, si)) for si in s)
    gray = bool(rng.random() < policy.gray_prob)
    return TransformSpec(crop_rect=(float(x0), float(y0), float(w), float(h)), flip=flip,
                         jitter=jitter, gray=gray, image_dims=(H, W))


# ---------------------------------------------------------------------------
# colour space
# ---------------------------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Channel-first RGB [..., 3, H, W] in [0, 1] to HSV with hue in [0, 1)."""
    r, g, b = rgb[..., 0, :, :], rgb[..., 1, :, :], rgb[..., 2, :, :]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-3)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0, :, :], hsv[..., 1, :, :], hsv[..., 2, :, :]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-3)


def _jitter_pixels(rgb: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """rgb [n,3,H,W], deltas [n,3] as (hue, brightness, saturation)."""
    hsv = rgb_to_hsv(rgb)
    dh = deltas[:, 0, None, None]
    dv = deltas[:, 1, None, None]
    ds = deltas[:, 2, None, None]
    h = (hsv[:, 0] + dh) % 1.0
    s = np.clip(hsv[:, 1] + ds, 0.0, 1.0)
    v = np.clip(hsv[:, 2] + dv, 0.0, 1.0)
    return np.clip(hsv_to_rgb(np.stack([h, s, v], axis=1)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# crop + resize as a linear map
# ---------------------------------------------------------------------------


def _resize_matrix(start: float, length: float, src: int, dst: int) -> np.ndarray:
    """[dst, src] bilinear sampling weights, align_corners=False."""
    centers = start + (np.arange(dst) + 0.5) * (length / dst) - 0.5
    centers = np.clip(centers, 0.0, src - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = centers - lo
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _crop_matrices(spec: TransformSpec, H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    x0, y0, w, h = spec.crop_rect
    return _resize_matrix(y0, h, H, H), _resize_matrix(x0, w, W, W)


def _check_inputs(specs: Sequence[TransformSpec], images: np.ndarray) -> None:
    if images.ndim != 4:
        raise ValueError(f"expected images [N,C,H,W], got shape {images.shape}")
    if len(specs) != images.shape[0]:
        raise ValueError("one TransformSpec per image is required")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    if images.shape[1] != 3 and any(s.jitter is not None or s.gray for s in specs):
        raise ValueError("colour jitter and grayscale need 3-channel images")
    H, W = images.shape[2:]
    for s in specs:
        x0, y0, w, h = s.crop_rect
        if w <= 0 or h <= 0 or x0 < -1e-9 or y0 < -1e-9 or x0 + w > W + 1e-9 or y0 + h > H + 1e-9:
            raise ValueError(f"crop {s.crop_rect} does not fit a {H}x{W} image")


def _geometric(specs, images):
    """Crop-resize + flip for every image; returns the result and the resize matrices."""
    n, C, H, W = images.shape
    out = images.copy()
    mats = [None] * n
    crop_idx = [k for k, s in enumerate(specs) if s.crop_rect != (0.0, 0.0, float(W), float(H))]
    if crop_idx:
        ry = np.stack([_crop_matrices(specs[k], H, W)[0] for k in crop_idx])
        rx = np.stack([_crop_matrices(specs[k], H, W)[1] for k in crop_idx])
        sub = images[crop_idx].astype(np.float64)
        res = np.matmul(np.matmul(ry[:, None], sub), np.swapaxes(rx, -1, -2)[:, None])
        out[crop_idx] = res.astype(images.dtype)
        for j, k in enumerate(crop_idx):
            mats[k] = (ry[j], rx[j])
    flip = np.array([s.flip for s in specs], dtype=bool)
    if flip.any():
        out[flip] = out[flip][..., ::-1]
    return out, mats


def apply_batch(specs: Sequence[TransformSpec], images: np.ndarray) -> np.ndarray:
    """Apply ``specs[k]`` to ``images[k]`` for a batch [N,C,H,W] in [0, 1]."""
    images = np.asarray(images)
    _check_inputs(specs, images)
    out, _ = _geometric(specs, images)
    jit = [k for k, s in enumerate(specs) if s.jitter is not None]
    if jit:
        deltas = np.array([specs[k].jitter for k in jit])
        out[jit] = _jitter_pixels(out[jit].astype(np.float64), deltas).astype(out.dtype)
    gray = [k for k, s in enumerate(specs) if s.gray]
    if gray:
        lum = np.tensordot(LUMA, out[gray].astype(np.float64), axes=([0], [1]))
        out[gray] = np.clip(lum, 0.0, 1.0)[:, None].astype(out.dtype)
    return out


def apply_transform(spec: TransformSpec, image: np.ndarray) -> np.ndarray:
    """Apply one spec to one image [C,H,W]; output stays in [0, 1] with the same shape."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an image [C,H,W], got shape {image.shape}")
    return apply_batch([spec], image[None])[0]


def _jitter_jacobian(rgb: np.ndarray, deltas: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Per-pixel 3x3 Jacobian d out_c / d in_k of the jitter, [n,3(out),3(in),H,W].

    The composed RGB->HSV->RGB map is continuous across the hue wrap, so a
    one-sided difference stepping away from the clamp boundary is well defined
    almost everywhere.
    """
    base = _jitter_pixels(rgb, deltas)
    jac = np.empty(rgb.shape[:1] + (3, 3) + rgb.shape[2:])
    for k in range(3):
        up = rgb[:, k] + h <= 1.0
        step = np.where(up, h, -h)
        pert = rgb.copy()
        pert[:, k] = rgb[:, k] + step
        jac[:, :, k] = (_jitter_pixels(pert, deltas) - base) / step[:, None]
    return jac


def transform_vjp(specs: Sequence[TransformSpec], images: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Pull ``grads`` (w.r.t. transformed images) back to the source images.

    ``images`` are the *source* images the specs were applied to.
    """
    images = np.asarray(images, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    _check_inputs(specs, images)
    geo, mats = _geometric(specs, images)
    g = grads.copy()
    gray = [k for k, s in enumerate(specs) if s.gray]
    if gray:
        # grayscale is linear; clamp is inactive for convex combinations of [0,1] pixels
        total = g[gray].sum(axis=1)
        g[gray] = LUMA[None, :, None, None] * total[:, None]
    jit = [k for k, s in enumerate(specs) if s.jitter is not None]
    if jit:
        deltas = np.array([specs[k].jitter for k in jit])
        jac = _jitter_jacobian(geo[jit], deltas)
        g[jit] = np.einsum("nckhw,nchw->nkhw", jac, g[jit])
    flip = np.array([s.flip for s in specs], dtype=bool)
    if flip.any():
        g[flip] = g[flip][..., ::-1]
    for k, m in enumerate(mats):
        if m is not None:
            ry, rx = m
            g[k] = ry.T @ g[k] @ rx
    return g
