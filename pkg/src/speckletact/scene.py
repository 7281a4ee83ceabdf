"""Static sensor scene: elastomer slab, embedded scatterers, fiber source, bare camera.

Coordinates are slab-local millimetres: x across the width, y across the
depth, z from the bottom face (camera side, z = 0) to the top face
(contact side, z = thickness).

Scatterer positions come from numpy's PCG64 bit generator, whose output
stream is specified and identical on every platform for a given seed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidGeometry

SCHEMA_VERSION = 1
SCATTERER_MARGIN_MM = 0.1


def _frozen(arr, dtype=np.float64):
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SlabGeometry:
    width_mm: float
    depth_mm: float
    thickness_mm: float
    refractive_index: float = 1.41

    def __post_init__(self):
        dims = (self.width_mm, self.depth_mm, self.thickness_mm)
        if min(dims) <= 0:
            raise InvalidGeometry(f"slab dimensions must be positive, got {dims}")
        if self.thickness_mm > min(self.width_mm, self.depth_mm):
            raise InvalidGeometry("thickness must not exceed the slab's lateral extent")
        if self.refractive_index <= 1.0:
            raise InvalidGeometry("refractive index must exceed 1")

    def contains(self, points, margin=0.0):
        p = np.atleast_2d(points)
        lo = margin
        return ((p[:, 0] >= lo) & (p[:, 0] <= self.width_mm - lo)
                & (p[:, 1] >= lo) & (p[:, 1] <= self.depth_mm - lo)
                & (p[:, 2] >= lo) & (p[:, 2] <= self.thickness_mm - lo))


@dataclass(frozen=True, eq=False)
class ScattererField:
    positions: np.ndarray
    amplitudes: np.ndarray
    seed: int

    def __post_init__(self):
        pos = _frozen(self.positions)
        amp = _frozen(self.amplitudes)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidArgument(f"positions must be (N, 3), got {pos.shape}")
        if amp.shape != (len(pos),):
            raise InvalidArgument("one amplitude per scatterer required")
        if np.any(amp <= 0):
            raise InvalidArgument("scatterer amplitudes must be positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "amplitudes", amp)

    def __len__(self):
        return len(self.positions)

    def __eq__(self, other):
        return (isinstance(other, ScattererField) and self.seed == other.seed
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.amplitudes, other.amplitudes))

    def with_positions(self, positions):
        return ScattererField(positions, self.amplitudes, self.seed)

    def scaled(self, factor):
        return ScattererField(self.positions, self.amplitudes * factor, self.seed)


@dataclass(frozen=True)
class SourceSpec:
    position: tuple
    wavelength_nm: float = 635.0
    linewidth_nm: float = 1.0
    spectral_samples: int = 1

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if len(self.position) != 3:
            raise InvalidArgument("source position must be a 3-D point")
        if self.wavelength_nm <= 0:
            raise InvalidArgument("wavelength must be positive")
        if self.linewidth_nm < 0:
            raise InvalidArgument("linewidth must be non-negative")
        if self.spectral_samples < 1:
            raise InvalidArgument("spectral_samples must be >= 1")


@dataclass(frozen=True)
class CameraSpec:
    center: tuple
    raw_pixels: tuple = (192, 192)
    pixel_pitch_mm: float = 0.02
    bit_depth: str = "8bit"
    read_noise_frac: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "raw_pixels", tuple(int(v) for v in self.raw_pixels))
        h, w = self.raw_pixels
        if h < 128 or w < 128:
            raise InvalidArgument(f"raw grid must be at least 128x128, got {h}x{w}")
        if self.pixel_pitch_mm <= 0:
            raise InvalidArgument("pixel pitch must be positive")
        if self.bit_depth not in ("8bit", "float"):
            raise InvalidArgument(f"bit_depth must be '8bit' or 'float', got {self.bit_depth!r}")
        if not 0.0 <= self.read_noise_frac <= 0.1:
            raise InvalidArgument("read_noise_frac must lie in [0, 0.1]")

    def pixel_coordinates(self):
        """(H*W, 3) pixel centres on the bottom face, row-major; rows run along y."""
        h, w = self.raw_pixels
        cx, cy = self.center
        xs = cx + (np.arange(w) - (w - 1) / 2.0) * self.pixel_pitch_mm
        ys = cy + (np.arange(h) - (h - 1) / 2.0) * self.pixel_pitch_mm
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel(), np.zeros(h * w)])


@dataclass(frozen=True)
class SceneConfig:
    geometry: SlabGeometry
    scatterers: ScattererField
    source: SourceSpec
    camera: CameraSpec
    reflection_order: int = 1

    def __post_init__(self):
        g = self.geometry
        if self.reflection_order not in (0, 1):
            raise InvalidArgument("reflection_order must be 0 or 1")
        if not g.contains(self.scatterers.positions, SCATTERER_MARGIN_MM).all():
            raise InvalidGeometry("scatterers must lie inside the slab with 0.1 mm margin")
        if not g.contains(np.array(self.source.position)).all():
            raise InvalidGeometry("source must lie on or inside the slab")
        h, w = self.camera.raw_pixels
        half_w = w * self.camera.pixel_pitch_mm / 2.0
        half_h = h * self.camera.pixel_pitch_mm / 2.0
        cx, cy = self.camera.center
        if cx - half_w < 0 or cx + half_w > g.width_mm or cy - half_h < 0 or cy + half_h > g.depth_mm:
            raise InvalidGeometry("camera footprint exceeds the bottom face")

    def to_dict(self):
        g, s, src, cam = self.geometry, self.scatterers, self.source, self.camera
        return {
            "schema_version": SCHEMA_VERSION,
            "geometry": {
                "width_mm": g.width_mm,
                "depth_mm": g.depth_mm,
                "thickness_mm": g.thickness_mm,
                "refractive_index": g.refractive_index,
            },
            "scatterers": {
                "seed": s.seed,
                "positions": s.positions.tolist(),
                "amplitudes": s.amplitudes.tolist(),
            },
            "source": {
                "position": list(src.position),
                "wavelength_nm": src.wavelength_nm,
                "linewidth_nm": src.linewidth_nm,
                "spectral_samples": src.spectral_samples,
            },
            "camera": {
                "center": list(cam.center),
                "raw_pixels": list(cam.raw_pixels),
                "pixel_pitch_mm": cam.pixel_pitch_mm,
                "bit_depth": cam.bit_depth,
                "read_noise_frac": cam.read_noise_frac,
            },
            "reflection_order": self.reflection_order,
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InvalidArgument(f"unsupported scene schema_version {version!r}")
        s = doc["scatterers"]
        return cls(
            geometry=SlabGeometry(**doc["geometry"]),
            scatterers=ScattererField(np.array(s["positions"], dtype=np.float64).reshape(-1, 3),
                                      np.array(s["amplitudes"], dtype=np.float64), int(s["seed"])),
            source=SourceSpec(**doc["source"]),
            camera=CameraSpec(**doc["camera"]),
            reflection_order=doc["reflection_order"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def sample_scatterers(geometry: SlabGeometry, count: int, seed: int) -> ScattererField:
    """Draw ``count`` points uniformly from the slab inset by 0.1 mm on every face.

    One ``(count, 3)`` block of PCG64 uniforms is drawn and mapped affinely
    onto the inset box, so the result depends only on (geometry, count, seed).
    """
    if count < 1:
        raise InvalidArgument(f"scatterer count must be >= 1, got {count}")
    m = SCATTERER_MARGIN_MM
    extent = np.array([geometry.width_mm, geometry.depth_mm, geometry.thickness_mm]) - 2 * m
    if np.any(extent <= 0):
        raise InvalidGeometry("slab too thin for the 0.1 mm scatterer margin")
    rng = np.random.Generator(np.random.PCG64(seed))
    positions = m + rng.random((count, 3)) * extent
    return ScattererField(positions, np.ones(count), int(seed))


def image_sources(point, geometry: SlabGeometry, order: int):
    """Real point plus, for order 1, its mirror across the top face z = thickness."""
    p = np.asarray(point, dtype=np.float64)
    if order == 0:
        return [p]
    if order != 1:
        raise InvalidArgument("reflection order must be 0 or 1")
    return [p, mirror_top(p, geometry)]


def mirror_top(point, geometry: SlabGeometry):
    p = np.array(point, dtype=np.float64)
    p[..., 2] = 2.0 * geometry.thickness_mm - p[..., 2]
    return p


PRESETS = {
    # flat pad used for the position and force experiments
    "flat": dict(width_mm=55.0, depth_mm=61.0, thickness_mm=3.0),
    # gripper module used for texture classification
    "gripper": dict(width_mm=28.0, depth_mm=28.0, thickness_mm=6.0),
}


def default_scene(preset: str = "flat", scatterer_count: int = 500, seed: int = 7,
                  refractive_index: float = 1.41, reflection_order: int = 1,
                  camera: CameraSpec | None = None, source: SourceSpec | None = None) -> SceneConfig:
    """Scene with a side-coupled source at the x = 0 edge midpoint and a centred camera."""
    if preset not in PRESETS:
        raise InvalidArgument(f"unknown scene preset {preset!r}; choose from {sorted(PRESETS)}")
    geometry = SlabGeometry(refractive_index=refractive_index, **PRESETS[preset])
    if source is None:
        source = SourceSpec((0.0, geometry.depth_mm / 2.0, geometry.thickness_mm / 2.0))
    if camera is None:
        camera = CameraSpec((geometry.width_mm / 2.0, geometry.depth_mm / 2.0))
    return SceneConfig(geometry, sample_scatterers(geometry, scatterer_count, seed),
                       source, camera, reflection_order)


def load_scene(path) -> SceneConfig:
    with open(path) as fh:
        return SceneConfig.from_json(fh.read())


def save_scene(scene: SceneConfig, path):
    with open(path, "w") as fh:
        fh.write(scene.to_json())
