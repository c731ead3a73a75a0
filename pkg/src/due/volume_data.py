"""Synthetic volumetric datasets, sparse slice annotations, splits and raw I/O.

Positive volumes carry one blobby lesion whose cross-section drifts and
deforms smoothly along depth, so the missing slices between two annotated
ones are not a trivial copy of either neighbour. Negative volumes carry
background only.

On disk a dataset is a directory with ``manifest.json`` plus raw
little-endian arrays in row-major ``(D, H, W)`` order. Every raw file has a
``<file>.json`` header next to it recording shape and dtype.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    AnnotationError,
    ConfigError,
    CorruptFileError,
    SplitError,
    ValidationError,
)
from .seeding import derive_seed, numpy_rng

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"volume must be rank 3, got shape {data.shape}")
        if min(data.shape) < 4:
            raise ValidationError(f"every volume dimension must be >= 4, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValidationError("volume intensities must lie in [0, 1]")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class DenseAnnotation:
    mask: np.ndarray
    provenance: str = "ground_truth"

    def __post_init__(self):
        if self.provenance not in ("ground_truth", "interpolated"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        mask = np.asarray(self.mask)
        if mask.ndim != 3:
            raise ValidationError(f"dense annotation must be rank 3, got {mask.shape}")
        if self.provenance == "ground_truth":
            if not np.all((mask == 0) | (mask == 1)):
                raise ValidationError("ground-truth masks must be binary")
            mask = mask.astype(np.uint8)
        else:
            mask = mask.astype(np.float32)
            if not np.all(np.isfinite(mask)) or mask.min() < 0 or mask.max() > 1:
                raise ValidationError("interpolated mask values must lie in [0, 1]")
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.mask.shape

    def foreground_extent(self):
        """(z_min, z_max) of depths containing foreground, or None when empty."""
        zs = np.flatnonzero(self.mask.reshape(self.mask.shape[0], -1).max(axis=1) > 0)
        if zs.size == 0:
            return None
        return int(zs[0]), int(zs[-1])


@dataclass(frozen=True)
class SparseAnnotation:
    """Binary slices at strictly increasing depth indices of a volume of depth ``depth``."""

    indices: tuple
    masks: np.ndarray
    depth: int

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        masks = np.asarray(self.masks)
        if masks.ndim != 3 or masks.shape[0] != len(indices):
            raise ValidationError("masks must have shape (n_slices, H, W) matching indices")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError(f"slice indices must be strictly increasing: {indices}")
        if indices and (indices[0] < 0 or indices[-1] > self.depth - 1):
            raise ValidationError(f"slice indices {indices} outside [0, {self.depth - 1}]")
        if not np.all((masks == 0) | (masks == 1)):
            raise ValidationError("annotation slices must be binary")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "masks", masks.astype(np.uint8))

    @property
    def slices(self):
        return list(zip(self.indices, self.masks))

    @property
    def extent(self):
        return self.indices[0], self.indices[-1]

    @property
    def gaps(self):
        return [b - a for a, b in zip(self.indices, self.indices[1:])]

    @property
    def slice_shape(self):
        return self.masks.shape[1:]

    def intervals(self):
        """Yield ``(past_index, future_index, past_mask, future_mask)`` per adjacent pair."""
        for k in range(len(self.indices) - 1):
            yield self.indices[k], self.indices[k + 1], self.masks[k], self.masks[k + 1]


@dataclass
class SyntheticConfig:
    n_pos: int = 10
    n_neg: int = 10
    shape: tuple = (32, 64, 64)
    lesion_radius_range: tuple = (7.0, 13.0)  # in-plane semi-axes, voxels
    lesion_depth_radius_range: tuple = (5.0, 10.0)  # depth semi-axis, voxels
    lesion_contrast: float = 0.3
    background_level: float = 0.35
    texture_sigma: float = 3.0
    texture_amplitude: float = 0.12
    noise_std: float = 0.03
    n_distractors: int = 3
    distractor_radius_range: tuple = (1.5, 3.0)
    distractor_contrast: float = 0.35
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.lesion_radius_range = tuple(float(r) for r in self.lesion_radius_range)
        self.lesion_depth_radius_range = tuple(float(r) for r in self.lesion_depth_radius_range)
        self.distractor_radius_range = tuple(float(r) for r in self.distractor_radius_range)
        self.spacing = tuple(float(s) for s in self.spacing)

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValidationError(f"shape must be three dimensions >= 4, got {self.shape}")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ConfigError("n_pos and n_neg must both be >= 1")
        rmin, rmax = self.lesion_radius_range
        zmin, zmax = self.lesion_depth_radius_range
        if not (0 < rmin <= rmax) or not (2 <= zmin <= zmax):
            raise ConfigError("lesion radius ranges must be positive, ordered, depth radius >= 2")
        D, H, W = self.shape
        # 1.4 covers boundary perturbation plus centre drift
        if 2 * zmax + 3 > D or 2 * 1.4 * rmax + 4 > min(H, W):
            raise ConfigError(
                f"lesion radii {self.lesion_radius_range}/{self.lesion_depth_radius_range} "
                f"do not fit inside shape {self.shape}"
            )


@dataclass
class SampleEntry:
    id: str
    label: int
    volume: str
    mask: str
    shape: tuple
    sparse: str | None = None
    split: str | None = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"unknown split tag {self.split!r}")


@dataclass
class DatasetManifest:
    samples: list
    seed: int
    config: dict
    format_version: int = FORMAT_VERSION
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("sample ids must be unique")

    def by_split(self, split):
        return [s for s in self.samples if s.split == split]

    def get(self, sample_id):
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def path(self, rel):
        return Path(self.root) / rel

    def to_json(self):
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "config": self.config,
            "samples": [asdict(s) for s in self.samples],
        }

    def save(self, root=None):
        root = Path(root or self.root)
        self.root = root
        _write_json(root / "manifest.json", self.to_json())

    @classmethod
    def load(cls, root, check_paths=True):
        root = Path(root)
        with open(root / "manifest.json", encoding="utf-8") as fh:
            raw = json.load(fh)
        samples = [SampleEntry(**s) for s in raw["samples"]]
        m = cls(samples, raw["seed"], raw["config"], raw.get("format_version", FORMAT_VERSION), root)
        if check_paths:
            for s in samples:
                for rel in (s.volume, s.mask, s.sparse):
                    if rel is not None and not (root / rel).exists():
                        raise CorruptFileError(f"manifest references missing path {rel}")
        return m

    # convenience loaders
    def load_volume(self, entry):
        return load_volume(self.path(entry.volume))

    def load_mask(self, entry):
        return load_annotation(self.path(entry.mask))

    def load_sparse(self, entry):
        if entry.sparse is None:
            return None
        return load_sparse(self.path(entry.sparse))


# ---------------------------------------------------------------------------
# Raw array I/O
# ---------------------------------------------------------------------------


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _header_path(path):
    return Path(str(path) + ".json")


def save_array(path, array, dtype, **extra):
    """Write ``array`` as raw little-endian ``dtype`` plus a JSON header sidecar."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"target directory {path.parent} does not exist")
    arr = np.ascontiguousarray(np.asarray(array).astype(np.dtype(dtype).newbyteorder("<")))
    with open(path, "wb") as fh:
        fh.write(arr.tobytes(order="C"))
    header = {"shape": list(arr.shape), "dtype": np.dtype(dtype).newbyteorder("<").str}
    header.update(extra)
    _write_json(_header_path(path), header)


def read_header(path):
    hp = _header_path(path)
    if not hp.exists():
        raise CorruptFileError(f"missing header {hp}")
    with open(hp, encoding="utf-8") as fh:
        return json.load(fh)


def load_array(path, shape=None, dtype=None):
    """Read a raw array. ``shape``/``dtype`` default to the header values."""
    path = Path(path)
    header = None
    if shape is None or dtype is None:
        header = read_header(path)
    shape = tuple(shape if shape is not None else header["shape"])
    dt = np.dtype(dtype if dtype is not None else header["dtype"]).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise CorruptFileError(
            f"{path}: header says {shape} x {dt.str} = {expected} bytes, payload has {actual}"
        )
    return np.fromfile(path, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_volume(path, volume):
    save_array(path, volume.data, "<f4", spacing=list(volume.spacing))


def load_volume(path, shape=None):
    data = load_array(path, shape=shape, dtype=None if shape is None else "<f4")
    spacing = (1.0, 1.0, 1.0)
    if _header_path(path).exists():
        spacing = tuple(read_header(path).get("spacing", spacing))
    return Volume(data, spacing)


def save_annotation(path, annotation):
    """Ground-truth masks go to 8-bit, interpolated (soft) masks to 32-bit floats."""
    dtype = "<u1" if annotation.provenance == "ground_truth" else "<f4"
    save_array(path, annotation.mask, dtype, provenance=annotation.provenance)


def load_annotation(path, shape=None):
    header = read_header(path) if _header_path(path).exists() else {}
    provenance = header.get("provenance", "ground_truth")
    dtype = None if shape is None else ("<u1" if provenance == "ground_truth" else "<f4")
    return DenseAnnotation(load_array(path, shape=shape, dtype=dtype), provenance)


def save_sparse(directory, sparse):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for z, m in sparse.slices:
        name = f"slice_{z:04d}.u8"
        save_array(directory / name, m, "<u1")
        files.append(name)
    _write_json(
        directory / "index.json",
        {"indices": list(sparse.indices), "files": files, "depth": sparse.depth,
         "slice_shape": list(sparse.slice_shape)},
    )


def load_sparse(directory):
    directory = Path(directory)
    with open(directory / "index.json", encoding="utf-8") as fh:
        idx = json.load(fh)
    masks = [load_array(directory / f) for f in idx["files"]]
    return SparseAnnotation(tuple(idx["indices"]), np.stack(masks), idx["depth"])


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def lesion_mask(shape, rng, radius_range, depth_radius_range):
    """Binary blobby lesion whose cross-section drifts and deforms along depth."""
    D, H, W = shape
    rz = rng.uniform(*depth_radius_range)
    ry, rx = rng.uniform(*radius_range, size=2)
    zc = rng.uniform(rz + 1, D - 2 - rz)
    margin_y, margin_x = 1.4 * ry + 1, 1.4 * rx + 1
    cy = rng.uniform(margin_y, H - 1 - margin_y)
    cx = rng.uniform(margin_x, W - 1 - margin_x)
    # centre drift along depth, bounded so the blob stays in frame
    dy, dx = rng.uniform(-0.2, 0.2, size=2) * np.array([ry, rx])
    tilt = rng.uniform(0, math.pi)
    harmonics = np.arange(2, 5)
    amp = rng.uniform(0.0, 0.16, size=harmonics.size)
    phase = rng.uniform(0, 2 * math.pi, size=harmonics.size)
    twist = rng.uniform(-2.0, 2.0, size=harmonics.size)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros(shape, dtype=np.uint8)
    for z in range(D):
        t = (z - zc) / rz
        if abs(t) >= 1.0:
            continue
        s = math.sqrt(1.0 - t * t)
        oy = cy + dy * t + 0.5 * dy * math.sin(math.pi * t)
        ox = cx + dx * t + 0.5 * dx * math.sin(math.pi * t)
        u = (yy - oy) * math.cos(tilt) + (xx - ox) * math.sin(tilt)
        v = -(yy - oy) * math.sin(tilt) + (xx - ox) * math.cos(tilt)
        rho = np.sqrt((u / (ry * s)) ** 2 + (v / (rx * s)) ** 2)
        theta = np.arctan2(v, u)
        boundary = 1.0 + np.tensordot(
            amp, np.cos(harmonics[:, None, None] * theta[None] + (phase + twist * t)[:, None, None]), 1
        )
        mask[z] = rho <= boundary
    if mask.sum() == 0 or np.count_nonzero(mask.reshape(D, -1).any(1)) < 2:
        # degenerate draw (vanishingly thin); fall back to a plain ellipsoid core
        z0 = int(round(zc))
        mask[z0 - 1 : z0 + 2, int(cy) - 1 : int(cy) + 2, int(cx) - 1 : int(cx) + 2] = 1
    return mask


def background_volume(shape, rng, cfg):
    D, H, W = shape
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), cfg.texture_sigma)
    tex /= np.abs(tex).max() + 1e-12
    vol = cfg.background_level + cfg.texture_amplitude * tex
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    for _ in range(cfg.n_distractors):
        r = rng.uniform(*cfg.distractor_radius_range)
        c = [rng.uniform(r, n - 1 - r) for n in shape]
        d2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        vol += cfg.distractor_contrast * np.exp(-d2 / (2 * r * r))
    return vol


def synthesize_sample(cfg, label, rng):
    """Return (volume array float32, mask uint8) for one sample."""
    vol = background_volume(cfg.shape, rng, cfg)
    mask = np.zeros(cfg.shape, dtype=np.uint8)
    if label == 1:
        mask = lesion_mask(cfg.shape, rng, cfg.lesion_radius_range, cfg.lesion_depth_radius_range)
        soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.8)
        grain = ndimage.gaussian_filter(rng.standard_normal(cfg.shape), 1.0)
        grain /= np.abs(grain).max() + 1e-12
        vol += cfg.lesion_contrast * soft * (1.0 + 0.25 * grain)
    vol += cfg.noise_std * rng.standard_normal(cfg.shape)
    return np.clip(vol, 0.0, 1.0).astype(np.float32), mask


def generate_synthetic_dataset(config, seed, out_dir):
    """Write a synthetic dataset to ``out_dir`` and return its manifest.

    The output is a pure function of ``(config, seed)``: each sample draws
    from its own stream keyed by the sample id.
    """
    config.validate()
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    plan = [(f"pos{i:04d}", 1) for i in range(config.n_pos)]
    plan += [(f"neg{i:04d}", 0) for i in range(config.n_neg)]
    for sid, label in plan:
        rng = numpy_rng(seed, "sample", sid)
        vol, mask = synthesize_sample(config, label, rng)
        vrel, mrel = f"volumes/{sid}.f32", f"masks/{sid}.u8"
        save_volume(out / vrel, Volume(vol, config.spacing))
        save_annotation(out / mrel, DenseAnnotation(mask, "ground_truth"))
        samples.append(SampleEntry(sid, label, vrel, mrel, config.shape))
    manifest = DatasetManifest(samples, int(seed), _config_snapshot(config), root=out)
    manifest.save()
    return manifest


def generate_mask_pool(config, seed, n):
    """Stack of ``n`` ground-truth lesion masks drawn from the lesion generator only."""
    out = np.zeros((n,) + config.shape, dtype=np.uint8)
    for i in range(n):
        rng = numpy_rng(seed, "pool", i)
        out[i] = lesion_mask(config.shape, rng, config.lesion_radius_range,
                             config.lesion_depth_radius_range)
    return out


def _config_snapshot(config):
    snap = asdict(config)
    return json.loads(json.dumps(snap))


# ---------------------------------------------------------------------------
# Sparsification
# ---------------------------------------------------------------------------


def regular_indices(z_min, z_max, k):
    if k < 2:
        raise ValidationError(f"slice spacing must be >= 2, got {k}")
    kept = list(range(z_min, z_max + 1, k))
    if kept[-1] != z_max:
        kept.append(z_max)
    return kept


def random_indices(z_min, z_max, gap_range, rng):
    """Keep both extent ends; interior gaps drawn uniformly from ``gap_range`` (inclusive)."""
    lo, hi = int(gap_range[0]), int(gap_range[1])
    if lo < 1 or hi < lo:
        raise ValidationError(f"invalid gap range {gap_range}")
    kept = [z_min]
    while True:
        nxt = kept[-1] + int(rng.integers(lo, hi + 1))
        if nxt >= z_max:
            break
        kept.append(nxt)
    kept.append(z_max)
    return kept


def sparsify_annotation(dense, spacing, depth=None):
    """Keep a subset of depth slices of ``dense``.

    ``spacing`` is either an integer ``k >= 2`` (regular spacing from the
    first foreground slice, the last foreground slice always kept) or an
    explicit iterable of depth indices.
    """
    mask = dense.mask if isinstance(dense, DenseAnnotation) else np.asarray(dense)
    if isinstance(dense, DenseAnnotation) and dense.provenance != "ground_truth":
        raise AnnotationError("only ground-truth dense annotations can be sparsified")
    ext = DenseAnnotation(mask).foreground_extent()
    if ext is None:
        raise AnnotationError("cannot sparsify an annotation with empty foreground")
    z_min, z_max = ext
    if z_max <= z_min:
        raise AnnotationError(f"foreground spans a single slice ({z_min}); need at least two")
    if isinstance(spacing, (int, np.integer)):
        kept = regular_indices(z_min, z_max, int(spacing))
    else:
        kept = sorted(int(i) for i in spacing)
        if any(i < 0 or i >= mask.shape[0] for i in kept):
            raise ValidationError(f"indices {kept} outside depth {mask.shape[0]}")
    return SparseAnnotation(tuple(kept), mask[kept].copy(), mask.shape[0] if depth is None else depth)


def sparsify_dataset(manifest, spacing=4, seed=0, gap_range=None):
    """Sparsify every positive sample in place and record the paths in the manifest.

    With ``gap_range`` set, indices are drawn by :func:`random_indices`
    instead of regular spacing ``spacing``.
    """
    for entry in manifest.samples:
        if entry.label != 1:
            entry.sparse = None
            continue
        dense = manifest.load_mask(entry)
        if gap_range is not None:
            z_min, z_max = dense.foreground_extent()
            idx = random_indices(z_min, z_max, gap_range, numpy_rng(seed, "sparsify", entry.id))
            sparse = sparsify_annotation(dense, idx)
        else:
            sparse = sparsify_annotation(dense, spacing)
        rel = f"sparse/{entry.id}"
        save_sparse(manifest.path(rel), sparse)
        entry.sparse = rel
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _split_sizes(n, ratios):
    sizes = [int(round(r * n)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        sizes[-2] += sizes[-1]
        sizes[-1] = 0
    return sizes


def split_dataset(manifest, ratios=(0.5, 0.2, 0.3), seed=0, balance_train=False):
    """Assign train/val/test tags.

    Without balancing, each split receives its share of samples with the
    global class ratio (largest-remainder allocation). With
    ``balance_train``, the train split takes ``n_train // 2`` samples of
    each class and val/test are drawn from the rest at the global ratio;
    samples left over are dropped from the manifest.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = numpy_rng(seed, "split")
    pos = [s for s in manifest.samples if s.label == 1]
    neg = [s for s in manifest.samples if s.label == 0]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    n = len(pos) + len(neg)
    sizes = _split_sizes(n, ratios)
    prevalence = len(pos) / n if n else 0.0

    assigned = {}
    if balance_train:
        half = sizes[0] // 2
        if len(pos) < half or len(neg) < half:
            raise SplitError(
                f"cannot balance a train split of {sizes[0]}: need {half} per class, "
                f"have {len(pos)} positive / {len(neg)} negative"
            )
        for s in pos[:half] + neg[:half]:
            assigned[s.id] = "train"
        pos, neg = pos[half:], neg[half:]
        remaining = [("val", sizes[1]), ("test", sizes[2])]
    else:
        remaining = list(zip(SPLITS, sizes))

    for k, (tag, size) in enumerate(remaining):
        last = k == len(remaining) - 1 and not balance_train
        if last:
            take_pos, take_neg = len(pos), len(neg)
        else:
            take_pos = min(len(pos), int(round(size * prevalence)))
            take_neg = min(len(neg), size - take_pos)
            take_pos = min(len(pos), size - take_neg)
        for s in pos[:take_pos] + neg[:take_neg]:
            assigned[s.id] = tag
        pos, neg = pos[take_pos:], neg[take_neg:]

    samples = []
    for s in manifest.samples:
        if s.id in assigned:
            s = SampleEntry(**{**asdict(s), "split": assigned[s.id]})
            samples.append(s)
    out = DatasetManifest(samples, manifest.seed, manifest.config, manifest.format_version, manifest.root)
    return out
