"""Ground-view variations, aerial augmentation and evaluation perturbations.

Images are ``(H, W, C)`` float arrays.  For a panorama the W axis spans 360
degrees of azimuth with North on column ``W // 2``; azimuth grows to the right
(clockwise seen from above).  Aerial images are square with North up.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

NOISE_STD = (0.04, 0.08, 0.12, 0.18, 0.26)
BLUR_LENGTH = (3, 5, 7, 9, 15)
PERTURBATION_KINDS = ("random_fov", "zoom", "gaussian_noise", "motion_blur")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def shift_columns(width, theta_deg):
    """Number of columns a rotation by ``theta_deg`` moves, in ``[0, width)``."""
    return _round_half_up(width * (theta_deg % 360.0) / 360.0) % width


def crop_width(width, alpha_deg):
    return max(1, _round_half_up(width * alpha_deg / 360.0))


def cyclic_shift(pano, theta_deg):
    """Rotate the viewing direction by ``theta_deg``: columns roll left with wrap.

    After the shift the centre column shows the azimuth ``theta_deg``.
    """
    k = shift_columns(pano.shape[1], theta_deg)
    if k == 0:
        return pano.copy()
    return np.roll(pano, -k, axis=1)


def fov_crop(pano, alpha_deg, pad_to_full=False):
    """Keep the ``alpha_deg`` wide window centred on the centre column.

    With ``pad_to_full`` the window is placed back in the middle of a zero
    image of the original width.
    """
    if not 0 < alpha_deg <= 360:
        raise ValueError(f"alpha_deg must be in (0, 360], got {alpha_deg}")
    width = pano.shape[1]
    w = crop_width(width, alpha_deg)
    start = width // 2 - w // 2
    cols = (start + np.arange(w)) % width
    crop = pano[:, cols]
    if not pad_to_full or w == width:
        return crop
    left = (width - w) // 2
    out = np.zeros_like(pano)
    out[:, left : left + w] = crop
    return out


@dataclass(frozen=True)
class TransformSpec:
    theta_deg: float = 0.0
    alpha_deg: float = 360.0
    pad_to_full: bool = False

    def __post_init__(self):
        if not 0 <= self.theta_deg < 360:
            raise ValueError(f"theta_deg must be in [0, 360), got {self.theta_deg}")
        if not 0 < self.alpha_deg <= 360:
            raise ValueError(f"alpha_deg must be in (0, 360], got {self.alpha_deg}")


def apply_ground_transform(pano, spec):
    """Shift first, then crop."""
    return fov_crop(cyclic_shift(pano, spec.theta_deg), spec.alpha_deg, spec.pad_to_full)


def rotate_aerial(aerial, angle):
    """Rotate counter-clockwise by a multiple of 90 degrees.

    Counter-clockwise is the direction that brings the content at azimuth
    ``angle`` to the top, matching :func:`cyclic_shift` by ``angle``.
    """
    if angle % 90 != 0:
        raise ValueError(f"aerial rotation must be a multiple of 90, got {angle}")
    return np.rot90(aerial, k=(int(angle) // 90) % 4, axes=(0, 1)).copy()


def aerial_rotate_with_shift(aerial, pano, angle):
    if angle not in (90, 180, 270):
        raise ValueError(f"angle must be one of 90, 180, 270, got {angle}")
    return rotate_aerial(aerial, angle), cyclic_shift(pano, angle)


@dataclass(frozen=True)
class PerturbationSpec:
    """An unseen ground-view variation.

    params by kind:
      random_fov:     fov_range=(lo, hi) degrees, pad_to_full=False
      zoom:           ratio=r or ratio_range=(lo, hi), both within [0.5, 2.0]
      gaussian_noise: severity in 1..5, value_range=1.0
      motion_blur:    severity in 1..5
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        p = self.params
        if self.kind == "random_fov":
            lo, hi = p.get("fov_range", (0.0, 360.0))
            if not (0 <= lo <= hi <= 360) or hi == 0:
                raise ValueError(f"fov_range must lie in (0, 360], got {(lo, hi)}")
        elif self.kind == "zoom":
            lo, hi = p.get("ratio_range", (p.get("ratio", 1.0),) * 2)
            if not (0.5 <= lo <= hi <= 2.0):
                raise ValueError(f"zoom ratio must lie in [0.5, 2.0], got {(lo, hi)}")
        else:
            sev = p.get("severity", 5)
            if sev not in (1, 2, 3, 4, 5):
                raise ValueError(f"severity must be an integer in 1..5, got {sev}")

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}


def zoom(img, ratio):
    """Rescale about the image centre, keeping the original shape.

    ``ratio > 1`` magnifies (crops the border away); ``ratio < 1`` shrinks the
    content and pads with zeros.
    """
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rows = cy + (rows - cy) / ratio
    cols = cx + (cols - cx) / ratio
    return kernels.bilinear_sample(np.ascontiguousarray(img), rows, cols, 0.0)


def motion_blur(img, length):
    """Horizontal box blur of odd ``length``, wrapping around the azimuth."""
    half = length // 2
    acc = np.zeros_like(img, dtype=np.float64)
    for k in range(-half, half + 1):
        acc += np.roll(img, k, axis=1)
    return (acc / length).astype(img.dtype)


def perturb(img, spec, seed):
    """Apply ``spec`` to a ground image; a pure function of its arguments."""
    rng = np.random.default_rng(seed)
    p = spec.params
    if spec.kind == "random_fov":
        lo, hi = p.get("fov_range", (0.0, 360.0))
        alpha = rng.uniform(lo, hi) if hi > lo else float(hi)
        alpha = min(max(alpha, 1e-6), 360.0)
        return fov_crop(img, alpha, p.get("pad_to_full", False))
    if spec.kind == "zoom":
        if "ratio_range" in p:
            lo, hi = p["ratio_range"]
            ratio = rng.uniform(lo, hi)
        else:
            ratio = p.get("ratio", 1.0)
        return zoom(img, ratio)
    sev = p.get("severity", 5)
    if spec.kind == "gaussian_noise":
        std = NOISE_STD[sev - 1] * p.get("value_range", 1.0)
        return (img + rng.normal(0.0, std, size=img.shape)).astype(img.dtype)
    return motion_blur(img, BLUR_LENGTH[sev - 1])


def polar_transform(aerial, out_h, out_w):
    """Unwrap a square aerial image into a panorama-like strip.

    Column ``j`` looks along azimuth ``360 * (j - out_w // 2) / out_w`` (North
    in the centre column, like the panoramas); the bottom row samples the
    image centre and the top row the inscribed circle of radius ``(S-1)/2``.
    """
    s = aerial.shape[0]
    if aerial.shape[1] != s:
        raise ValueError(f"aerial image must be square, got {aerial.shape[:2]}")
    c = (s - 1) / 2.0
    radius = c * (out_h - 1 - np.arange(out_h, dtype=np.float64)) / max(out_h - 1, 1)
    phi = np.deg2rad(360.0 * (np.arange(out_w, dtype=np.float64) - out_w // 2) / out_w)
    rows = c - radius[:, None] * np.cos(phi)[None, :]
    cols = c + radius[:, None] * np.sin(phi)[None, :]
    # clamp rounding spill at the rim back onto the image
    rows = np.clip(rows, 0.0, s - 1.0)
    cols = np.clip(cols, 0.0, s - 1.0)
    return kernels.bilinear_sample(np.ascontiguousarray(aerial), rows, cols, 0.0)
