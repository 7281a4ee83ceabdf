"""Labeled speckle datasets for the position, force and texture tasks.

Layout of a dataset directory::

    manifest.json        regeneration record (schema below), written atomically
    scene.json           the scene the samples were rendered from
    samples/NNNNN.spkl   cropped 128 x 128 float32 frames
    raw/NNNNN.spkl       full raw frames (only with keep_raw)

Per-sample seeds come from ``derive_seed(master_seed, index, stream)``,
which is ``SeedSequence(master_seed, spawn_key=(index, stream))`` reduced to
one u64. Stream 0 drives the stimulus jitter, stream 1 the camera noise.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, FormatError, InvalidArgument
from .formats import decode_spkl, encode_spkl, read_spkl
from .mechanics import (TEXTURE_CLASSES, ContactStimulus, MaterialModel, deform_scatterers,
                        texture_mask_procedural)
from .optics import CROP_REGIONS, CROP_SIZE, OpticsParams, crop_region, render_speckle
from .scene import SCHEMA_VERSION, SceneConfig

TASKS = ("position4", "force", "texture9")
NO_CONTACT = "no-contact"
JITTER_STREAM, NOISE_STREAM = 0, 1


def derive_seed(master_seed: int, index: int, stream: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), int(stream)))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TaskSpec:
    """What to press, where, how hard and how many times.

    Contact points are offsets in mm from the centre of the top face, so the
    same spec works on any slab large enough to hold them.
    """
    kind: str
    train_per_class: int = 200
    test_per_class: int = 40
    offsets_mm: tuple = ()
    location_names: tuple = ()
    force_levels_N: tuple = ()
    repeats: int = 1
    train_repeats: int | None = None  # None: same as repeats
    kernel_sigma_mm: float = 1.5
    stiffness_N_per_mm: float = 5000.0
    position_jitter_mm: float = 0.3
    force_jitter_frac: float = 0.02
    texture_resolution: tuple = (64, 64)
    texture_seed: int = 0
    relief_frac: float = 0.6
    patch_mm: tuple = (15.0, 19.0)
    crop: str = "A"

    def __post_init__(self):
        for name in ("offsets_mm", "location_names", "force_levels_N", "texture_resolution", "patch_mm"):
            value = getattr(self, name)
            if name == "offsets_mm":
                value = tuple(tuple(float(c) for c in p) for p in value)
            elif name == "location_names":
                value = tuple(str(v) for v in value)
            else:
                value = tuple(float(v) if name != "texture_resolution" else int(v) for v in value)
            object.__setattr__(self, name, value)
        if self.kind not in TASKS:
            raise InvalidArgument(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.repeats < 1 or (self.train_repeats is not None and self.train_repeats < 1):
            raise InvalidArgument("repeats must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise InvalidArgument("per-class counts must be positive")
        if not self.force_levels_N or min(self.force_levels_N) < 0:
            raise InvalidArgument("force levels must be a non-empty list of non-negative values")
        if self.kind == "position4" and len(self.offsets_mm) != 4:
            raise InvalidArgument("position4 needs exactly four contact points")
        if self.kind == "force" and len(self.offsets_mm) != len(self.location_names):
            raise InvalidArgument("force task needs one name per location")
        if self.kind != "texture9" and not self.offsets_mm:
            raise InvalidArgument(f"{self.kind} needs contact points")
        if self.crop not in CROP_REGIONS:
            raise InvalidArgument(f"unknown crop region {self.crop!r}")

    @classmethod
    def default(cls, kind: str, **overrides):
        if kind == "position4":
            kw = dict(offsets_mm=((-6.0, -6.0), (6.0, -6.0), (-6.0, 6.0), (6.0, 6.0)),
                      force_levels_N=(0.6, 0.8, 1.0))
        elif kind == "force":
            kw = dict(offsets_mm=((-8.0, 0.0), (0.0, 0.0), (8.0, 0.0)), location_names=("A", "B", "C"),
                      force_levels_N=tuple(round(0.1 * i, 1) for i in range(1, 11)), repeats=3,
                      train_repeats=8, kernel_sigma_mm=8.0)
        elif kind == "texture9":
            kw = dict(force_levels_N=(1.0,), kernel_sigma_mm=8.0)
        else:
            raise InvalidArgument(f"unknown task {kind!r}; expected one of {TASKS}")
        kw.update(overrides)
        return cls(kind=kind, **kw)

    @property
    def class_names(self):
        if self.kind == "position4":
            return tuple(f"P{i + 1}" for i in range(4))
        if self.kind == "texture9":
            return TEXTURE_CLASSES + (NO_CONTACT,)
        return ()

    @property
    def is_regression(self):
        return self.kind == "force"

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(p) if isinstance(p, tuple) else p for p in v]
        return d

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidArgument(f"unknown task keys: {', '.join(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class SamplePlan:
    index: int
    split: str
    label: object
    class_name: str
    contact_xy: tuple | None
    force_N: float
    texture: str | None


def plan_samples(task: TaskSpec, scene: SceneConfig):
    """Nominal (un-jittered) stimulus for every sample, train split first."""
    geo = scene.geometry
    cx, cy = geo.width_mm / 2.0, geo.depth_mm / 2.0
    points = [(cx + dx, cy + dy) for dx, dy in task.offsets_mm]
    for x, y in points:
        if not (0 <= x <= geo.width_mm and 0 <= y <= geo.depth_mm):
            raise InvalidArgument(f"contact point ({x}, {y}) lies outside the {geo.width_mm}x{geo.depth_mm} face")
    plans = []
    for split, per_class in (("train", task.train_per_class), ("test", task.test_per_class)):
        if task.kind == "position4":
            for label, xy in enumerate(points):
                for j in range(per_class):
                    f = task.force_levels_N[j % len(task.force_levels_N)]
                    plans.append((split, label, f"P{label + 1}", xy, f, None))
        elif task.kind == "force":
            repeats = task.repeats if split == "test" or task.train_repeats is None else task.train_repeats
            for name, xy in zip(task.location_names, points):
                for f in task.force_levels_N:
                    for _ in range(repeats):
                        plans.append((split, f, name, xy, f, None))
        else:
            for label, name in enumerate(task.class_names):
                for j in range(per_class):
                    if name == NO_CONTACT:
                        plans.append((split, label, name, None, 0.0, None))
                    else:
                        f = task.force_levels_N[j % len(task.force_levels_N)]
                        plans.append((split, label, name, (cx, cy), f, name))
    return [SamplePlan(i, *p) for i, p in enumerate(plans)]


def _stimulus(task: TaskSpec, plan: SamplePlan, jitter_seed: int):
    if plan.contact_xy is None:
        return None
    rng = np.random.Generator(np.random.PCG64(jitter_seed))
    dx, dy = rng.uniform(-task.position_jitter_mm, task.position_jitter_mm, 2)
    scale = 1.0 + rng.uniform(-task.force_jitter_frac, task.force_jitter_frac)
    texture = None
    if plan.texture is not None:
        texture = texture_mask_procedural(plan.texture, task.texture_resolution, task.texture_seed,
                                          task.relief_frac)
    return ContactStimulus((plan.contact_xy[0] + dx, plan.contact_xy[1] + dy), plan.force_N * scale,
                           task.kernel_sigma_mm, texture, task.patch_mm)


def render_contact(scene: SceneConfig, stimulus: ContactStimulus | None, optics: OpticsParams,
                   noise_seed: int, stiffness_N_per_mm: float = 5000.0):
    """Deform the scene's scatterers under ``stimulus`` (None = no contact) and render."""
    field_ = scene.scatterers
    if stimulus is not None:
        material = MaterialModel.for_geometry(scene.geometry, stiffness_N_per_mm)
        field_ = deform_scatterers(field_, stimulus, material, scene.geometry)
    return render_speckle(scene, field_, optics, noise_seed)


def _sha256(blob):
    return hashlib.sha256(blob).hexdigest()


def _render_job(args):
    task, scene, optics, plan, master_seed = args
    jitter_seed = derive_seed(master_seed, plan.index, JITTER_STREAM)
    noise_seed = derive_seed(master_seed, plan.index, NOISE_STREAM)
    stim = _stimulus(task, plan, jitter_seed)
    frame = render_contact(scene, stim, optics, noise_seed, task.stiffness_N_per_mm)
    crop = crop_region(frame, task.crop, CROP_SIZE)
    return (encode_spkl(crop.pixels), encode_spkl(frame.pixels), jitter_seed, noise_seed,
            None if stim is None else stim.to_dict())


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_optics(scene: SceneConfig) -> OpticsParams:
    """Dataset frames are always 8-bit quantized with the camera's read noise."""
    return OpticsParams.for_scene(scene, normalization="8bit")


def gen_dataset(task: TaskSpec, scene: SceneConfig, out_dir, master_seed: int,
                keep_raw: bool = False, threads: int = 1, progress=None) -> dict:
    """Render every planned sample into ``out_dir`` and return the manifest dict."""
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
        if keep_raw:
            (out / "raw").mkdir(exist_ok=True)
    except OSError as exc:
        raise InvalidArgument(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise InvalidArgument(f"dataset directory {out} is not writable")
    optics = dataset_optics(scene)
    plans = plan_samples(task, scene)
    jobs = [(task, scene, optics, p, int(master_seed)) for p in plans]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = pool.map(_render_job, jobs, chunksize=8)
            records = _write_samples(out, plans, results, keep_raw, progress)
    else:
        records = _write_samples(out, plans, map(_render_job, jobs), keep_raw, progress)
    scene_json = scene.to_json()
    _atomic_write(out / "scene.json", scene_json.encode())
    counts = {}
    for r in records:
        key = r["class_name"]
        counts.setdefault(r["split"], {}).setdefault(key, 0)
        counts[r["split"]][key] += 1
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "task": task.to_dict(),
        "label_names": list(task.class_names),
        "label_kind": "force_N" if task.is_regression else "class_id",
        "scene_file": "scene.json",
        "scene_sha256": _sha256(scene_json.encode()),
        "mechanics": {"model": "linear-gaussian", "stiffness_N_per_mm": task.stiffness_N_per_mm,
                      "max_indent_mm": scene.geometry.thickness_mm / 3.0},
        "optics": asdict(optics),
        "master_seed": int(master_seed),
        "seed_derivation": "numpy SeedSequence(master_seed, spawn_key=(index, stream)).generate_state(1, uint64); "
                           "stream 0 = jitter, 1 = noise",
        "crop_region": task.crop,
        "crop_origin": list(CROP_REGIONS[task.crop]),
        "keep_raw": bool(keep_raw),
        "counts": counts,
        "samples": records,
    }
    _atomic_write(out / "manifest.json", manifest_bytes(manifest))
    return manifest


def _write_samples(out, plans, results, keep_raw, progress):
    records = []
    for plan, (crop_blob, raw_blob, jitter_seed, noise_seed, stim) in zip(plans, results):
        name = f"samples/{plan.index:05d}.spkl"
        (out / name).write_bytes(crop_blob)
        rec = {"index": plan.index, "file": name, "sha256": _sha256(crop_blob), "split": plan.split,
               "label": plan.label, "class_name": plan.class_name,
               "seeds": {"jitter": jitter_seed, "noise": noise_seed}, "stimulus": stim}
        if keep_raw:
            raw_name = f"raw/{plan.index:05d}.spkl"
            (out / raw_name).write_bytes(raw_blob)
            rec["raw_file"] = raw_name
            rec["raw_sha256"] = _sha256(raw_blob)
        records.append(rec)
        if progress is not None:
            progress(len(records), len(plans))
    return records


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()


def manifest_hash(manifest: dict) -> str:
    return _sha256(manifest_bytes(manifest))


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CorruptDataset(f"{path}: manifest not found") from exc
    except ValueError as exc:
        raise CorruptDataset(f"{path}: manifest is not valid JSON") from exc
    for key in ("schema_version", "task", "samples"):
        if key not in doc:
            raise CorruptDataset(f"{path}: manifest lacks {key!r}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise CorruptDataset(f"{path}: unsupported manifest schema {doc['schema_version']}")
    return doc


def standardize(images):
    """Zero mean, unit variance per image (leading axis indexes images)."""
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return ((x - mean) / np.where(std > 0, std, 1.0)).astype(np.float32)


class Dataset:
    """One split of a generated dataset, decoded, verified and standardized in memory."""

    def __init__(self, manifest, root, split, images, labels, records):
        self.manifest = manifest
        self.root = Path(root)
        self.split = split
        self.images = images
        self.labels = labels
        self.records = records

    def __len__(self):
        return len(self.labels)

    @property
    def task(self):
        return self.manifest["task"]["kind"]

    @property
    def is_regression(self):
        return self.manifest.get("label_kind") == "force_N"

    @property
    def label_names(self):
        return self.manifest.get("label_names", [])

    @property
    def class_names(self):
        """Per-sample class (or location) names."""
        return [r["class_name"] for r in self.records]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.manifest, self.root, self.split, self.images[idx], self.labels[idx],
                       [self.records[i] for i in idx])

    def epoch_order(self, shuffle_seed: int, epoch: int):
        """Permutation for ``epoch``; a pure function of (shuffle_seed, epoch)."""
        rng = np.random.Generator(np.random.PCG64([int(shuffle_seed), int(epoch)]))
        return rng.permutation(len(self))

    def batches(self, batch_size: int, shuffle_seed: int = 0, epoch: int = 0, shuffle: bool = True):
        order = self.epoch_order(shuffle_seed, epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def __iter__(self):
        for i in range(len(self)):
            yield self.images[i], self.labels[i]


def _read_verified(root: Path, rel, digest):
    path = root / rel
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptDataset(f"missing sample file {rel}") from exc
    if _sha256(blob) != digest:
        raise CorruptDataset(f"hash mismatch for sample file {rel}")
    try:
        return decode_spkl(blob, rel)
    except FormatError as exc:
        raise CorruptDataset(str(exc)) from exc


def load_dataset(root, split="train", region: str | None = None) -> Dataset:
    """Load one split; ``region`` re-crops from the raw frames (needs keep_raw)."""
    root = Path(root)
    manifest = read_manifest(root)
    if split not in ("train", "test"):
        raise InvalidArgument(f"split must be 'train' or 'test', got {split!r}")
    records = [r for r in manifest["samples"] if r["split"] == split]
    if not records:
        raise CorruptDataset(f"{root}: no {split} samples in manifest")
    if region is not None and region != manifest.get("crop_region") and not manifest.get("keep_raw"):
        raise InvalidArgument(f"re-cropping to region {region} needs a dataset generated with keep_raw")
    frames = []
    for r in records:
        if region is None or region == manifest.get("crop_region"):
            frames.append(_read_verified(root, r["file"], r["sha256"]))
        else:
            r0, c0 = CROP_REGIONS[region]
            raw = _read_verified(root, r["raw_file"], r["raw_sha256"])
            frames.append(raw[r0:r0 + CROP_SIZE, c0:c0 + CROP_SIZE])
    images = standardize(np.stack(frames))[:, None]
    dtype = np.float64 if manifest.get("label_kind") == "force_N" else np.int64
    labels = np.array([r["label"] for r in records], dtype=dtype)
    return Dataset(manifest, root, split, images, labels, records)


def verify_dataset(root) -> int:
    """Re-hash every referenced file; returns the number checked."""
    root = Path(root)
    manifest = read_manifest(root)
    n = 0
    for r in manifest["samples"]:
        _read_verified(root, r["file"], r["sha256"])
        n += 1
        if "raw_file" in r:
            _read_verified(root, r["raw_file"], r["raw_sha256"])
            n += 1
    return n


def load_frame(path):
    """A single SPKL frame, standardized, shaped 1 x 1 x H x W."""
    return standardize(read_spkl(path)[None])[:, None]
