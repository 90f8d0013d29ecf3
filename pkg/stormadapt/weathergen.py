"""Fog, rain and patch-masking synthesis on clear images.

Images are float32 ``H x W x 3`` arrays in [0, 1]; depth maps are float32
``H x W`` arrays in metres. Every function here is pure: the only source of
randomness is the ``numpy.random.Generator`` passed in.

- Fog follows the atmospheric scattering model
  ``out = image * t + airlight * (1 - t)`` with ``t = exp(-beta_atm * depth)``.
- Rain is a procedural streak map, warped by a randomly composed affine
  transform, eroded according to the intensity level and screen-blended in.
- The Dynamic Masking Process zeroes 8x8 patches of an aligned triplet with
  one shared pattern.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage

from .errors import DatasetError, InputError

if TYPE_CHECKING:
    from .toyscenes import AlignedTriplet

logger = logging.getLogger(__name__)

# Depth PNGs hold centimetres; millimetres would overflow 16 bits past 65 m.
DEPTH_UNITS_PER_METER = 100


class Intensity(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class Weather(str, Enum):
    FOG = "fog"
    RAIN = "rain"

    @property
    def other(self) -> Weather:
        return Weather.RAIN if self is Weather.FOG else Weather.FOG


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def check_image(image: np.ndarray, name: str = "image") -> None:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        shape = getattr(image, "shape", None)
        raise InputError(f"{name} must be an H x W x 3 array, got shape {shape}")


def check_depth(depth: np.ndarray, shape: tuple[int, int] | None = None) -> None:
    if not isinstance(depth, np.ndarray) or depth.ndim != 2:
        raise InputError(f"depth must be an H x W array, got {getattr(depth, 'shape', None)}")
    if shape is not None and depth.shape != shape:
        raise InputError(f"depth shape {depth.shape} does not match image shape {shape}")
    if not np.all(np.isfinite(depth)):
        raise InputError("depth contains non-finite values")
    if depth.size and depth.min() < 0:
        raise InputError(f"depth must be non-negative, found {float(depth.min())}")


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Snap an image onto the 8-bit grid so PNG round trips are exact."""
    return to_uint8(image).astype(np.float32) / np.float32(255)


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    units = np.round(depth * DEPTH_UNITS_PER_METER).astype(np.uint16)
    return units.astype(np.float32) / np.float32(DEPTH_UNITS_PER_METER)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Fog
# ---------------------------------------------------------------------------

FOG_BETA = {
    Intensity.SMALL: 0.005,
    Intensity.MEDIUM: 0.01,
    Intensity.LARGE: 0.02,
}
DEFAULT_AIRLIGHT = (0.85, 0.85, 0.85)


@dataclass(frozen=True)
class FogParams:
    beta_atm: float
    airlight: tuple[float, float, float] = DEFAULT_AIRLIGHT
    level: Intensity = Intensity.LARGE

    def __post_init__(self) -> None:
        if not (math.isfinite(self.beta_atm) and self.beta_atm >= 0):
            raise InputError(f"beta_atm must be finite and >= 0, got {self.beta_atm}")
        if len(self.airlight) != 3 or not all(0.0 <= a <= 1.0 for a in self.airlight):
            raise InputError(f"airlight must be an RGB triple in [0, 1], got {self.airlight}")

    @classmethod
    def for_level(
        cls, level: Intensity | str, airlight: tuple[float, float, float] = DEFAULT_AIRLIGHT
    ) -> FogParams:
        level = Intensity(level)
        return cls(beta_atm=FOG_BETA[level], airlight=airlight, level=level)


def synth_fog(image: np.ndarray, depth: np.ndarray, params: FogParams) -> np.ndarray:
    check_image(image)
    check_depth(depth, image.shape[:2])
    transmittance = np.exp(-params.beta_atm * depth)[..., None]
    airlight = np.asarray(params.airlight, dtype=image.dtype)
    fogged = image * transmittance + airlight * (1 - transmittance)
    return np.clip(fogged, 0.0, 1.0).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# Rain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RainSpec:
    streak_count: int = 50
    streak_length: tuple[float, float] = (8.0, 24.0)
    streak_width: tuple[int, int] = (2, 5)
    streak_angle: tuple[float, float] = (-15.0, 15.0)  # degrees from vertical
    streak_intensity: tuple[float, float] = (0.6, 1.0)
    rotation: tuple[float, float] = (-10.0, 10.0)  # degrees
    zoom: tuple[float, float] = (0.9, 1.1)
    translation: tuple[float, float] = (-6.0, 6.0)  # pixels, per axis
    shear: tuple[float, float] = (-0.1, 0.1)
    erosion_small: int = 2
    erosion_medium: int = 1
    erosion_large: int = 0
    gain: float = 0.8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.streak_count < 0:
            raise InputError(f"streak_count must be >= 0, got {self.streak_count}")
        for name in ("streak_length", "streak_width", "streak_angle", "streak_intensity",
                     "rotation", "zoom", "translation", "shear"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InputError(f"{name} range is reversed: ({lo}, {hi})")
        if self.streak_width[0] < 1:
            raise InputError("streak widths must be at least 1 pixel")
        if not self.erosion_large < self.erosion_medium < self.erosion_small:
            raise InputError(
                "erosion radii must satisfy large < medium < small, got "
                f"{self.erosion_large}/{self.erosion_medium}/{self.erosion_small}"
            )
        if self.erosion_large < 0:
            raise InputError("erosion radii must be >= 0")
        if not 0.0 <= self.gain <= 1.0:
            raise InputError(f"rain gain must be in [0, 1], got {self.gain}")

    def erosion_radius(self, level: Intensity | str) -> int:
        return {
            Intensity.SMALL: self.erosion_small,
            Intensity.MEDIUM: self.erosion_medium,
            Intensity.LARGE: self.erosion_large,
        }[Intensity(level)]


@dataclass(frozen=True)
class RainAffine:
    """One sampled rain-map warp, composed as rotation . shear . zoom + shift."""

    rotation: float = 0.0  # degrees
    zoom: float = 1.0
    shear: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (self.rotation == 0 and self.zoom == 1 and self.shear == 0
                and self.tx == 0 and self.ty == 0)

    def matrix(self) -> np.ndarray:
        """Forward 2x2 linear part in (x, y) coordinates."""
        theta = math.radians(self.rotation)
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return rot @ shear * self.zoom


def gen_rain_map(
    spec: RainSpec, rng: np.random.Generator, shape: tuple[int, int] = (128, 128)
) -> np.ndarray:
    """Grayscale streak map in [0, 1]; nonzero only on the drawn streaks."""
    height, width = shape
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(spec.streak_count):
        x = rng.uniform(0, width)
        y = rng.uniform(0, height)
        length = rng.uniform(*spec.streak_length)
        stroke = int(rng.integers(spec.streak_width[0], spec.streak_width[1] + 1))
        angle = math.radians(rng.uniform(*spec.streak_angle))
        value = int(round(255 * rng.uniform(*spec.streak_intensity)))
        end = (x + length * math.sin(angle), y + length * math.cos(angle))
        draw.line([(x, y), end], fill=value, width=stroke)
    return np.asarray(canvas, dtype=np.float32) / np.float32(255)


def sample_rain_affine(rng: np.random.Generator, spec: RainSpec) -> RainAffine:
    return RainAffine(
        rotation=float(rng.uniform(*spec.rotation)),
        zoom=float(rng.uniform(*spec.zoom)),
        shear=float(rng.uniform(*spec.shear)),
        tx=float(rng.uniform(*spec.translation)),
        ty=float(rng.uniform(*spec.translation)),
    )


def warp_rain_map(rain_map: np.ndarray, affine: RainAffine) -> np.ndarray:
    """Apply ``affine`` about the map centre; uncovered pixels become 0."""
    if affine.is_identity:
        return rain_map.copy()
    height, width = rain_map.shape
    center = np.array([(width - 1) / 2, (height - 1) / 2])
    shift = np.array([affine.tx, affine.ty])
    inverse = np.linalg.inv(affine.matrix())
    # scipy maps output -> input coordinates in (row, col) order.
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    offset = swap @ (center - inverse @ (center + shift))
    warped = ndimage.affine_transform(
        rain_map, swap @ inverse @ swap, offset=offset, order=1, mode="constant", cval=0.0,
    )
    return np.clip(warped, 0.0, 1.0).astype(rain_map.dtype, copy=False)


def rainmix_transform(
    rain_map: np.ndarray, rng: np.random.Generator, spec: RainSpec
) -> np.ndarray:
    return warp_rain_map(rain_map, sample_rain_affine(rng, spec))


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def erode_rain_map(rain_map: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return rain_map
    return ndimage.grey_erosion(rain_map, footprint=_disk(radius), mode="nearest")


def apply_rain(
    image: np.ndarray,
    rain_map: np.ndarray,
    level: Intensity | str,
    spec: RainSpec | None = None,
) -> np.ndarray:
    """Erode the streak map for ``level`` and screen-blend it over ``image``."""
    spec = spec or RainSpec()
    check_image(image)
    if rain_map.ndim != 2 or rain_map.shape != image.shape[:2]:
        raise InputError(
            f"rain map shape {rain_map.shape} does not match image shape {image.shape[:2]}"
        )
    streaks = erode_rain_map(rain_map, spec.erosion_radius(level))
    layer = (spec.gain * streaks)[..., None]
    # Screen blend, 1 - (1 - image)(1 - layer), written so a zero layer is exact.
    rainy = image + layer * (1 - image)
    return np.clip(rainy, 0.0, 1.0).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# Combined rendering
# ---------------------------------------------------------------------------


def render_weather(
    image: np.ndarray,
    depth: np.ndarray,
    weather: Weather | str,
    level: Intensity | str,
    seed: int,
    *,
    fog_params: FogParams | None = None,
    rain_spec: RainSpec | None = None,
) -> np.ndarray:
    """Render ``image`` in fog or rain at ``level``; deterministic in ``seed``."""
    weather, level = Weather(weather), Intensity(level)
    if weather is Weather.FOG:
        return synth_fog(image, depth, fog_params or FogParams.for_level(level))
    spec = rain_spec or RainSpec()
    rng = np.random.default_rng([spec.rng_seed, seed])
    rain_map = gen_rain_map(spec, rng, image.shape[:2])
    rain_map = rainmix_transform(rain_map, rng, spec)
    return apply_rain(image, rain_map, level, spec)


# ---------------------------------------------------------------------------
# Dynamic Masking Process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    patch_pixels: int = 64
    rng_seed: int = 0

    def __post_init__(self) -> None:
        side = math.isqrt(self.patch_pixels)
        if self.patch_pixels <= 0 or side * side != self.patch_pixels:
            raise InputError(f"patch_pixels must be a positive square, got {self.patch_pixels}")

    @property
    def patch_side(self) -> int:
        return math.isqrt(self.patch_pixels)

    def rng(self, step: int) -> np.random.Generator:
        """Mask stream for one training step; replays for the same seed and step."""
        return np.random.default_rng([self.rng_seed, step])


def sample_patch_mask(
    shape: tuple[int, int],
    spec: MaskSpec,
    rng: np.random.Generator,
    rate: float | None = None,
) -> tuple[np.ndarray, float]:
    """Boolean ``H x W`` mask (True = dropped) and the rate it was drawn with."""
    if rate is None:
        rate = float(rng.uniform(0.0, 1.0))
    if not 0.0 <= rate <= 1.0:
        raise InputError(f"mask rate must be in [0, 1], got {rate}")
    side = spec.patch_side
    height, width = shape
    grid = (math.ceil(height / side), math.ceil(width / side))
    dropped = rng.random(grid) < rate
    mask = np.repeat(np.repeat(dropped, side, axis=0), side, axis=1)
    return mask[:height, :width], rate


def apply_dmp(
    triplet: AlignedTriplet,
    spec: MaskSpec,
    rng: np.random.Generator,
    rate: float | None = None,
) -> AlignedTriplet:
    """Zero the same randomly chosen patches in all three images of ``triplet``."""
    mask, rate = sample_patch_mask(triplet.source.image.shape[:2], spec, rng, rate)
    keep = (~mask)[..., None].astype(np.float32)
    logger.debug("dmp rate %.3f, dropped fraction %.3f", rate, mask.mean())

    def masked(member):
        return dataclasses.replace(member, image=member.image * keep)

    return dataclasses.replace(
        triplet,
        source=masked(triplet.source),
        auxiliary=masked(triplet.auxiliary),
        target=masked(triplet.target),
    )


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def save_image_png(image: np.ndarray, path: Path) -> None:
    check_image(image)
    Image.fromarray(to_uint8(image)).save(path)


def load_image_png(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(path, "missing image file")
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(path, f"cannot decode image ({exc})") from exc
    return data.astype(np.float32) / np.float32(255)


def save_depth_png(depth: np.ndarray, path: Path) -> None:
    check_depth(depth)
    units = np.round(depth * DEPTH_UNITS_PER_METER)
    if units.size and units.max() > np.iinfo(np.uint16).max:
        raise InputError(f"depth {float(depth.max())} m exceeds the 16-bit depth range")
    Image.fromarray(units.astype(np.uint16)).save(path)


def load_depth_png(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(path, "missing depth file")
    try:
        with Image.open(path) as img:
            units = np.asarray(img).astype(np.uint16)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(path, f"cannot decode depth map ({exc})") from exc
    return units.astype(np.float32) / np.float32(DEPTH_UNITS_PER_METER)
