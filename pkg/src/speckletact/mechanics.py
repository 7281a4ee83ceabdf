"""Contact mechanics: indentation field of a press and the resulting scatterer motion.

The constitutive law is deliberately minimal. Peak indentation is linear in
force (F / k, clamped), spreads laterally as a Gaussian, is modulated by an
optional texture relief inside the contact patch, and decays linearly with
depth so the bottom face (where the camera sits) stays pinned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidGeometry
from .formats import read_pgm, write_pgm
from .scene import ScattererField, SlabGeometry

TEXTURE_CLASSES = (
    "White Dragon",
    "Red Dragon",
    "Green Dragon",
    "One of Characters",
    "One of Bamboos",
    "Five of Circles",
    "Six of Circles",
    "Seven of Circles",
)


@dataclass(frozen=True)
class MaterialModel:
    stiffness_N_per_mm: float
    max_indent_mm: float

    def __post_init__(self):
        if self.stiffness_N_per_mm <= 0:
            raise InvalidArgument("stiffness must be positive")
        if self.max_indent_mm <= 0:
            raise InvalidArgument("max_indent_mm must be positive")

    @classmethod
    def for_geometry(cls, geometry: SlabGeometry, stiffness_N_per_mm: float = 5000.0):
        return cls(stiffness_N_per_mm, geometry.thickness_mm / 3.0)

    def peak_indent(self, force_N):
        return min(force_N / self.stiffness_N_per_mm, self.max_indent_mm)


@dataclass(frozen=True, eq=False)
class TextureMask:
    grid: np.ndarray
    relief_frac: float = 0.6
    class_name: str = ""

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.uint8)
        if grid.ndim != 2 or min(grid.shape) < 8:
            raise InvalidArgument(f"texture grid must be 2-D and at least 8x8, got {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise InvalidArgument("texture grid must be binary")
        if not grid.any():
            raise InvalidArgument("texture grid needs at least one raised cell")
        if not 0.0 <= self.relief_frac <= 1.0:
            raise InvalidArgument("relief_frac must lie in [0, 1]")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    def __eq__(self, other):
        return (isinstance(other, TextureMask) and self.class_name == other.class_name
                and self.relief_frac == other.relief_frac
                and np.array_equal(self.grid, other.grid))


@dataclass(frozen=True)
class ContactStimulus:
    contact_xy: tuple
    force_N: float
    kernel_sigma_mm: float = 1.5
    texture: TextureMask | None = None
    patch_mm: tuple = (15.0, 19.0)

    def __post_init__(self):
        object.__setattr__(self, "contact_xy", tuple(float(v) for v in self.contact_xy))
        object.__setattr__(self, "patch_mm", tuple(float(v) for v in self.patch_mm))
        if self.force_N < 0:
            raise InvalidArgument("force must be non-negative")
        if self.kernel_sigma_mm <= 0:
            raise InvalidArgument("kernel_sigma_mm must be positive")

    def to_dict(self):
        return {
            "contact_xy": list(self.contact_xy),
            "force_N": self.force_N,
            "kernel_sigma_mm": self.kernel_sigma_mm,
            "texture": None if self.texture is None else self.texture.class_name,
            "patch_mm": list(self.patch_mm),
        }


def texture_factor(stimulus: ContactStimulus, xy):
    """Relief multiplier t(xy): 1 outside the patch, 1 - relief on engraved cells."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    factor = np.ones(len(xy))
    tex = stimulus.texture
    if tex is None:
        return factor
    length, width = stimulus.patch_mm
    cx, cy = stimulus.contact_xy
    rows, cols = tex.grid.shape
    u = (xy[:, 0] - (cx - width / 2.0)) / width
    v = (xy[:, 1] - (cy - length / 2.0)) / length
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    r = np.clip(np.floor(v[inside] * rows).astype(int), 0, rows - 1)
    c = np.clip(np.floor(u[inside] * cols).astype(int), 0, cols - 1)
    factor[inside] = 1.0 - tex.relief_frac * (1.0 - tex.grid[r, c])
    return factor


def surface_indent(stimulus: ContactStimulus, material: MaterialModel, xy):
    """Downward depth (mm) of the top face at ``xy``; accepts one point or an (N, 2) array."""
    pts = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    peak = material.peak_indent(stimulus.force_N)
    cx, cy = stimulus.contact_xy
    r2 = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2
    depth = peak * np.exp(-r2 / (2.0 * stimulus.kernel_sigma_mm ** 2)) * texture_factor(stimulus, pts)
    if np.ndim(xy) == 1:
        return float(depth[0])
    return depth


def deform_scatterers(field: ScattererField, stimulus: ContactStimulus,
                      material: MaterialModel, geometry: SlabGeometry) -> ScattererField:
    """Move each scatterer down by indent(x, y) * z / thickness; returns a new field."""
    cx, cy = stimulus.contact_xy
    if not (0 <= cx <= geometry.width_mm and 0 <= cy <= geometry.depth_mm):
        raise InvalidGeometry(f"contact point {stimulus.contact_xy} is outside the top face")
    pos = np.array(field.positions)
    if stimulus.force_N == 0:
        return field.with_positions(pos)
    depth = surface_indent(stimulus, material, pos[:, :2])
    pos[:, 2] -= depth * (pos[:, 2] / geometry.thickness_mm)
    np.clip(pos[:, 2], 0.0, geometry.thickness_mm, out=pos[:, 2])
    return field.with_positions(pos)


# --- procedural Mahjong textures -------------------------------------------
# Shapes are drawn in unit coordinates (u across columns, v down rows) and
# rasterized at the requested resolution; 0 marks engraved cells.

def _rect(u, v, u0, v0, u1, v1):
    return (u >= u0) & (u < u1) & (v >= v0) & (v < v1)


def _disc(u, v, cu, cv, r):
    return (u - cu) ** 2 + (v - cv) ** 2 <= r * r


def _engraved(name, u, v, rng):
    if name == "White Dragon":
        return _rect(u, v, 0.12, 0.10, 0.88, 0.90) & ~_rect(u, v, 0.26, 0.24, 0.74, 0.76)
    if name == "Red Dragon":
        box = _rect(u, v, 0.18, 0.30, 0.82, 0.66) & ~_rect(u, v, 0.28, 0.40, 0.72, 0.56)
        return box | _rect(u, v, 0.44, 0.08, 0.56, 0.92)
    if name == "Green Dragon":
        blocks = [(0.14, 0.08, 0.42, 0.20), (0.58, 0.08, 0.86, 0.20), (0.10, 0.30, 0.90, 0.38),
                  (0.18, 0.46, 0.44, 0.60), (0.56, 0.46, 0.82, 0.60), (0.10, 0.70, 0.90, 0.78),
                  (0.20, 0.84, 0.34, 0.94), (0.66, 0.84, 0.80, 0.94)]
        out = np.zeros(u.shape, dtype=bool)
        for b in blocks:
            out |= _rect(u, v, *b)
        return out
    if name == "One of Characters":
        cells = rng.random((6, 6)) < 0.55
        iu = np.floor((u - 0.14) / 0.12).astype(int)
        iv = np.floor((v - 0.14) / 0.12).astype(int)
        ok = (iu >= 0) & (iu < 6) & (iv >= 0) & (iv < 6)
        out = np.zeros(u.shape, dtype=bool)
        out[ok] = cells[iv[ok], iu[ok]]
        return out
    if name == "One of Bamboos":
        out = np.zeros(u.shape, dtype=bool)
        for cu in (0.30, 0.50, 0.70):
            out |= _rect(u, v, cu - 0.05, 0.12, cu + 0.05, 0.88)
        return out
    if name == "Five of Circles":
        centres = [(0.25, 0.22), (0.75, 0.22), (0.50, 0.50), (0.25, 0.78), (0.75, 0.78)]
        radius = 0.13
    elif name == "Six of Circles":
        centres = [(cu, cv) for cv in (0.18, 0.50, 0.82) for cu in (0.30, 0.70)]
        radius = 0.12
    elif name == "Seven of Circles":
        centres = [(0.20, 0.13), (0.50, 0.26), (0.80, 0.39),
                   (0.32, 0.62), (0.68, 0.62), (0.32, 0.86), (0.68, 0.86)]
        radius = 0.10
    else:
        raise InvalidArgument(f"unknown texture class {name!r}; expected one of {TEXTURE_CLASSES}")
    out = np.zeros(u.shape, dtype=bool)
    for cu, cv in centres:
        out |= _disc(u, v, cu, cv, radius)
    return out


def texture_mask_procedural(class_name: str, resolution=(64, 64), seed: int = 0,
                            relief_frac: float = 0.6) -> TextureMask:
    if class_name not in TEXTURE_CLASSES:
        raise InvalidArgument(f"unknown texture class {class_name!r}; expected one of {TEXTURE_CLASSES}")
    rows, cols = (int(v) for v in resolution)
    if rows < 8 or cols < 8:
        raise InvalidArgument("texture resolution must be at least 8x8")
    v, u = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = np.where(_engraved(class_name, u, v, rng), 0, 1).astype(np.uint8)
    return TextureMask(grid, relief_frac, class_name)


def save_texture_pgm(mask: TextureMask, path):
    """Raised cells white (255), engraved cells black (0)."""
    write_pgm(path, mask.grid.astype(np.uint8) * 255)


def load_texture_pgm(path, class_name: str = "", relief_frac: float = 0.6) -> TextureMask:
    """Pixels >= 128 are raised, darker ones engraved."""
    return TextureMask((read_pgm(path) >= 128).astype(np.uint8), relief_frac, class_name)
