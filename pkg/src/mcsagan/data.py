"""Synthetic paired multi-contrast phantoms, preprocessing, and volume I/O.

A phantom starts from one smooth "anatomy" field (a sum of random
Gaussian blobs).  Each contrast applies a fixed strictly monotone
intensity remapping of that field plus an additive tumour-profile term,
so the cross-contrast mapping is deterministic and a perfect translator
exists.  The tumour is an ellipsoid recorded in a binary mask; its
voxel fraction is kept inside [0.5%, 10%] by deterministic redraws from
the same seeded stream.

Volumes travel as float32 numpy arrays in [-1, 1] after normalization;
the on-disk format is MCSV1 (header + raw little-endian payload).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mcsagan.networks import CONTRASTS

SOURCE_CONTRAST = "t2w"
FRACTION_MIN = 0.005
FRACTION_MAX = 0.10
_MAX_TUMOUR_DRAWS = 200

_MAGIC = b"MCSV"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float32"): 0}


# --------------------------------------------------------------------------
# phantom model
# --------------------------------------------------------------------------

# base remapping (strictly monotone on [0,1]) and additive tumour weight
_TRANSFERS: dict[str, tuple] = {
    "t2w": (lambda a: a, 0.30),
    "t2f": (lambda a: a ** 0.6, 0.45),
    "t1c": (lambda a: a ** 1.8, 0.40),
    "t1n": (lambda a: 0.2 + 0.8 * a, -0.35),
}


def contrast_transfer(name: str, anatomy: np.ndarray,
                      tumour_profile: np.ndarray) -> np.ndarray:
    """Raw (pre-normalization) intensities of one contrast."""
    base, weight = _TRANSFERS[name]
    return base(anatomy) + weight * tumour_profile


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    blob_count: tuple[int, int] = (8, 16)
    blob_radius: tuple[float, float] = (3.0, 9.0)
    tumour_axes: tuple[float, float] = (3.5, 8.0)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims {self.dims} must be three axes >= 8")
        for name, rng_pair in (("blob_count", self.blob_count),
                               ("blob_radius", self.blob_radius),
                               ("tumour_axes", self.tumour_axes)):
            lo, hi = rng_pair
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range {rng_pair} invalid")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Sample:
    x_s: np.ndarray
    targets: dict[str, np.ndarray]
    mask: np.ndarray
    subject_id: str

    def validate(self) -> "Sample":
        dims = self.x_s.shape
        if set(self.targets) != set(CONTRASTS):
            raise ValueError(
                f"targets must cover {CONTRASTS}, got {sorted(self.targets)}")
        vols = [self.x_s, *self.targets.values()]
        for v in vols:
            if v.shape != dims:
                raise ValueError("all volumes in a sample must share dims")
            if v.min() < -1.0 or v.max() > 1.0:
                raise ValueError("volume values must lie in [-1, 1]")
        if self.mask.shape != dims:
            raise ValueError("mask dims must match volumes")
        if not np.all(np.isin(np.unique(self.mask), (0, 1))):
            raise ValueError("mask must be binary")
        return self


def _anatomy_field(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    d, h, w = spec.dims
    zz, yy, xx = np.meshgrid(np.arange(d, dtype=np.float64),
                             np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    acc = np.zeros(spec.dims, dtype=np.float64)
    for _ in range(n_blobs):
        c = rng.uniform(0, 1, 3) * np.array([d - 1, h - 1, w - 1])
        r = rng.uniform(*spec.blob_radius)
        amp = rng.uniform(0.3, 1.0)
        q = ((zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2) / (2 * r * r)
        acc += amp * np.exp(-q)
    lo, hi = acc.min(), acc.max()
    if hi > lo:
        acc = (acc - lo) / (hi - lo)
    return acc


def _draw_tumour(rng: np.random.Generator,
                 spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """(profile, mask); redraws until the voxel fraction is in bounds."""
    d, h, w = spec.dims
    zz, yy, xx = np.meshgrid(np.arange(d, dtype=np.float64),
                             np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    total = d * h * w
    for _ in range(_MAX_TUMOUR_DRAWS):
        axes = rng.uniform(spec.tumour_axes[0], spec.tumour_axes[1], 3)
        lo_c = np.minimum(axes, np.array([d, h, w]) / 2.0)
        c = [rng.uniform(a, dim - 1 - a) if dim - 1 - a > a else (dim - 1) / 2.0
             for a, dim in zip(lo_c, (d, h, w))]
        q = (((zz - c[0]) / axes[0]) ** 2 + ((yy - c[1]) / axes[1]) ** 2
             + ((xx - c[2]) / axes[2]) ** 2)
        mask = (q <= 1.0).astype(np.float32)
        frac = mask.sum() / total
        if FRACTION_MIN <= frac <= FRACTION_MAX:
            profile = np.clip(1.0 - q, 0.0, None)
            return profile, mask
    raise RuntimeError(
        f"no tumour draw hit fraction [{FRACTION_MIN}, {FRACTION_MAX}] "
        f"in {_MAX_TUMOUR_DRAWS} attempts for dims {spec.dims}")


def phantom_fields(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(anatomy, tumour_profile, mask) underlying one phantom; deterministic."""
    rng = np.random.default_rng(spec.seed)
    anatomy = _anatomy_field(rng, spec)
    profile, mask = _draw_tumour(rng, spec)
    return anatomy, profile, mask


def generate_phantom(spec: PhantomSpec) -> Sample:
    anatomy, profile, mask = phantom_fields(spec)
    rng = np.random.default_rng((spec.seed, 0xA5))  # noise stream, decoupled
    volumes = {}
    for name in (SOURCE_CONTRAST, *CONTRASTS):
        raw = contrast_transfer(name, anatomy, profile)
        if spec.noise_sigma > 0:
            raw = raw + rng.normal(0.0, spec.noise_sigma, spec.dims)
        volumes[name] = normalize_volume(raw)
    return Sample(x_s=volumes[SOURCE_CONTRAST],
                  targets={c: volumes[c] for c in CONTRASTS},
                  mask=mask,
                  subject_id=f"phantom-{spec.seed:08d}").validate()


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def normalize_volume(v: np.ndarray) -> np.ndarray:
    """Percentile-clip then min-max rescale to [-1, 1], float32."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo, hi = np.percentile(v, (0.1, 99.9))
    clipped = np.clip(v, lo, hi)
    cmin, cmax = clipped.min(), clipped.max()
    if cmax == cmin:
        warnings.warn("constant volume normalized to all -1", stacklevel=2)
        return np.full(v.shape, -1.0, dtype=np.float32)
    out = (clipped - cmin) / (cmax - cmin) * 2.0 - 1.0
    return out.astype(np.float32)


def pad_to_grid(v: np.ndarray, target: tuple[int, int, int],
                pad_value: float) -> np.ndarray:
    """Grow to ``target``: in-plane symmetric (extra trailing), axial trailing.

    Axes are (in-plane, in-plane, axial); masks pass pad_value 0, images -1.
    """
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError("pad_to_grid expects a (D,H,W) volume")
    deficits = [t - s for t, s in zip(target, v.shape)]
    if any(d < 0 for d in deficits):
        raise ValueError(f"target {target} smaller than volume {v.shape}")
    widths = []
    for axis, deficit in enumerate(deficits):
        if axis < 2:
            lead = deficit // 2
            widths.append((lead, deficit - lead))
        else:
            widths.append((0, deficit))
    return np.pad(v, widths, constant_values=pad_value)


# --------------------------------------------------------------------------
# MCSV1 volume format
# --------------------------------------------------------------------------

def write_volume(path, v: np.ndarray) -> None:
    v = np.asarray(v)
    code = _DTYPE_CODES.get(v.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {v.dtype}; store float32")
    if not np.isfinite(v).all():
        raise ValueError("refusing to write non-finite values")
    header = _MAGIC + struct.pack("<BB", _VERSION, v.ndim)
    header += b"".join(struct.pack("<I", d) for d in v.shape)
    header += struct.pack("<B", code)
    Path(path).write_bytes(header + np.ascontiguousarray(v).astype("<f4").tobytes())


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise ValueError(f"bad magic in {path}: not an MCSV file")
    version, ndim = struct.unpack_from("<BB", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unknown MCSV version {version}")
    off = 6
    if len(blob) < off + 4 * ndim + 1:
        raise ValueError(f"truncated header in {path}")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    (code,) = struct.unpack_from("<B", blob, off)
    off += 1
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise ValueError(f"unknown MCSV dtype code {code}")
    want = int(np.prod(dims)) * dtype.itemsize
    payload = blob[off:]
    if len(payload) < want:
        raise ValueError(
            f"truncated payload in {path}: {len(payload)} of {want} bytes")
    if len(payload) > want:
        raise ValueError(f"trailing bytes after payload in {path}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# --------------------------------------------------------------------------
# dataset assembly
# --------------------------------------------------------------------------

def dataset_split(ids, counts, seed: int) -> list[list]:
    ids = list(ids)
    if sum(counts) > len(ids):
        raise ValueError(f"requested {sum(counts)} ids from {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    splits, at = [], 0
    for c in counts:
        splits.append(shuffled[at:at + c])
        at += c
    return splits


def write_sample(out_dir, sample: Sample) -> dict:
    """Write one sample's volumes; returns its manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {}
    named = {SOURCE_CONTRAST: sample.x_s, **sample.targets, "mask": sample.mask}
    for name, vol in named.items():
        rel = f"{sample.subject_id}_{name}.mcsv"
        write_volume(out_dir / rel, np.asarray(vol, dtype=np.float32))
        entry[name] = rel
    return entry


def read_sample(root, subject_id: str, entry: dict) -> Sample:
    root = Path(root)
    vols = {name: read_volume(root / rel) for name, rel in entry.items()}
    return Sample(x_s=vols[SOURCE_CONTRAST],
                  targets={c: vols[c] for c in CONTRASTS},
                  mask=vols["mask"],
                  subject_id=subject_id).validate()


def write_manifest(path, entries: dict) -> None:
    Path(path).write_text(json.dumps({"samples": entries}, indent=1,
                                     sort_keys=True))


def load_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if "samples" not in doc:
        raise ValueError(f"{path} is not a dataset manifest")
    return doc["samples"]


def build_phantom_dataset(out_dir, count: int, dims=(32, 32, 32), seed: int = 0,
                          noise_sigma: float = 0.02,
                          spec_overrides: dict | None = None) -> Path:
    """Generate ``count`` phantoms under ``out_dir``; returns manifest path.

    ``spec_overrides`` may carry any :class:`PhantomSpec` field except
    ``seed`` (consecutive seeds starting at ``seed`` are assigned here).
    """
    out_dir = Path(out_dir)
    base = {"dims": tuple(dims), "noise_sigma": noise_sigma}
    overrides = dict(spec_overrides or {})
    if "seed" in overrides:
        raise ValueError("per-sample seeds are assigned from the seed argument")
    known = {f.name for f in fields(PhantomSpec)}
    for key, value in overrides.items():
        if key not in known:
            raise ValueError(f"unknown phantom spec field '{key}'")
        base[key] = tuple(value) if isinstance(value, list) else value
    entries = {}
    for i in range(count):
        sample = generate_phantom(PhantomSpec(seed=seed + i, **base))
        entries[sample.subject_id] = write_sample(out_dir, sample)
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest


def load_dataset(manifest_path) -> list[Sample]:
    """All samples named by a manifest, in sorted subject order."""
    manifest_path = Path(manifest_path)
    entries = load_manifest(manifest_path)
    root = manifest_path.parent
    return [read_sample(root, sid, entries[sid]) for sid in sorted(entries)]
