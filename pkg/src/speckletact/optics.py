"""Coherent random-phasor speckle rendering and speckle analysis.

Each scatterer k (and its top-face mirror image when the scene's
reflection order is 1) contributes a spherical wavelet to every pixel:

    E(p) = sum_k sum_q  a_k / (d1_k * d2_qp) * exp(2*pi*i * n * (d1_k + d2_qp) / lambda)

with d1 the source-to-scatterer and d2 the (image-)scatterer-to-pixel
distance, both clamped below by ``min_distance_mm``. Finite linewidth is
modelled by averaging intensities over equal-probability quantiles of a
Gaussian spectrum whose FWHM is the source linewidth.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from . import kernels
from .errors import InvalidArgument, UndefinedContrast
from .scene import SceneConfig, ScattererField

NORMALIZATIONS = ("raw", "unit-peak", "8bit")
CROP_SIZE = 128
# origins (row, col) on the default 192x192 raw grid
CROP_REGIONS = {"A": (32, 32), "B": (0, 0), "C": (0, 64), "D": (64, 0)}


@dataclass(frozen=True)
class OpticsParams:
    spectral_samples: int = 1
    noise_frac: float = 0.005
    min_distance_mm: float = 0.05
    normalization: str = "raw"

    def __post_init__(self):
        if self.spectral_samples < 1:
            raise InvalidArgument("spectral_samples must be >= 1")
        if self.min_distance_mm <= 0:
            raise InvalidArgument("min_distance_mm must be positive")
        if self.noise_frac < 0:
            raise InvalidArgument("noise_frac must be non-negative")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidArgument(f"normalization must be one of {NORMALIZATIONS}")

    @classmethod
    def for_scene(cls, scene: SceneConfig, **overrides):
        """Defaults taken from the scene's source and camera."""
        kw = dict(spectral_samples=scene.source.spectral_samples,
                  noise_frac=scene.camera.read_noise_frac,
                  normalization="8bit" if scene.camera.bit_depth == "8bit" else "raw")
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class SpeckleImage:
    pixels: np.ndarray
    normalization: str = "raw"
    provenance: tuple = ("", "", None)

    def __post_init__(self):
        px = np.array(self.pixels)
        if px.ndim != 2:
            raise InvalidArgument("speckle image must be 2-D")
        if np.any(px < 0):
            raise InvalidArgument("speckle intensities must be non-negative")
        if self.normalization == "8bit" and not np.array_equal(px, np.clip(np.rint(px), 0, 255)):
            raise InvalidArgument("8-bit images must hold integers in [0, 255]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


def wavelength_samples(wavelength_nm, linewidth_nm, count):
    """Equal-probability quantiles of a Gaussian line (FWHM = linewidth)."""
    if count == 1 or linewidth_nm == 0:
        return np.full(count, float(wavelength_nm))
    sigma = linewidth_nm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    z = [NormalDist().inv_cdf((m + 0.5) / count) for m in range(count)]
    return wavelength_nm + sigma * np.array(z)


def field_intensity(pixels, source, points, amplitudes, *, refractive_index, wavelengths_nm,
                    thickness_mm=0.0, reflection_order=0, min_distance_mm=0.05):
    """Spectrally averaged |E|^2 at arbitrary pixel positions (no noise, no normalization)."""
    pixels = np.ascontiguousarray(np.atleast_2d(pixels), dtype=np.float64)
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    if len(points) == 0:
        raise InvalidArgument("at least one scatterer is required")
    wavenumbers = refractive_index / (np.asarray(wavelengths_nm, dtype=np.float64) * 1e-6)
    return kernels.render_intensity(pixels, np.asarray(source, dtype=np.float64), points,
                                    np.ascontiguousarray(amplitudes, dtype=np.float64),
                                    float(thickness_mm), int(reflection_order),
                                    np.ascontiguousarray(wavenumbers), float(min_distance_mm))


def _digest(obj):
    return hashlib.sha256(repr(obj).encode()).hexdigest()[:16]


def render_speckle(scene: SceneConfig, scatterers: ScattererField, params: OpticsParams,
                   noise_seed: int) -> SpeckleImage:
    if len(scatterers) == 0:
        raise InvalidArgument("empty scatterer field")
    src = scene.source
    intensity = field_intensity(
        scene.camera.pixel_coordinates(), src.position, scatterers.positions, scatterers.amplitudes,
        refractive_index=scene.geometry.refractive_index,
        wavelengths_nm=wavelength_samples(src.wavelength_nm, src.linewidth_nm, params.spectral_samples),
        thickness_mm=scene.geometry.thickness_mm, reflection_order=scene.reflection_order,
        min_distance_mm=params.min_distance_mm,
    ).reshape(scene.camera.raw_pixels)
    if params.noise_frac > 0:
        rng = np.random.Generator(np.random.PCG64(noise_seed))
        intensity = intensity + rng.normal(0.0, params.noise_frac * intensity.max(), intensity.shape)
        np.maximum(intensity, 0.0, out=intensity)
    intensity = normalize(intensity, params.normalization)
    provenance = (scene.digest()[:16], _digest(scatterers.positions.tobytes()), int(noise_seed))
    return SpeckleImage(intensity, params.normalization, provenance)


def normalize(intensity, mode):
    if mode == "raw":
        return intensity
    peak = intensity.max()
    unit = intensity / peak if peak > 0 else np.zeros_like(intensity)
    if mode == "unit-peak":
        return unit
    if mode == "8bit":
        return np.clip(np.rint(unit * 255.0), 0, 255)
    raise InvalidArgument(f"unknown normalization {mode!r}")


def crop_region(image: SpeckleImage, region, size: int = CROP_SIZE) -> SpeckleImage:
    """Exact ``size`` x ``size`` sub-array at a named region or an explicit (row, col) origin."""
    if isinstance(region, str):
        if region not in CROP_REGIONS:
            raise InvalidArgument(f"unknown crop region {region!r}; expected one of {sorted(CROP_REGIONS)}")
        r0, c0 = CROP_REGIONS[region]
    else:
        r0, c0 = (int(v) for v in region)
    h, w = image.shape
    if r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
        raise InvalidArgument(f"crop at ({r0}, {c0}) of size {size} exceeds {h}x{w} image")
    return SpeckleImage(image.pixels[r0:r0 + size, c0:c0 + size].copy(), image.normalization,
                        image.provenance)


def _pixels(image):
    return np.asarray(image.pixels if isinstance(image, SpeckleImage) else image, dtype=np.float64)


def speckle_contrast(image) -> float:
    """Population std over mean of all pixel intensities."""
    px = _pixels(image)
    if px.size < 2:
        raise InvalidArgument("speckle contrast needs at least two pixels")
    mean = px.mean()
    if mean == 0:
        raise UndefinedContrast("speckle contrast is undefined for an all-zero image")
    return float(px.std() / mean)


def exponential_ks_distance(image) -> float:
    """Kolmogorov-Smirnov distance between the intensity histogram and exp(mean)."""
    x = np.sort(_pixels(image).ravel())
    mean = x.mean()
    if mean <= 0:
        raise UndefinedContrast("exponential fit needs a positive mean intensity")
    cdf = 1.0 - np.exp(-x / mean)
    n = len(x)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


def zncc(a, b) -> float:
    """Zero-normalized cross-correlation of two equally shaped images."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise InvalidArgument(f"zncc needs equal shapes, got {x.shape} and {y.shape}")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).mean()), np.sqrt((y * y).mean())
    if sx == 0 or sy == 0:
        raise InvalidArgument("zncc is undefined for a constant image")
    return float(np.clip((x * y).mean() / (sx * sy), -1.0, 1.0))
