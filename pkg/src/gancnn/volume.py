"""Volumetric scans: NIfTI-1 I/O, synthetic phantoms and slice preprocessing.

Voxel arrays are indexed ``[front, top, depth]``; serialized payloads are
front-fastest, which is ``order="F"`` in numpy terms.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BadDimError, BadMagicError, NiftiError, ShapeError, TruncatedPayloadError, UnsupportedDatatypeError,
)

LABELS = ("bipolar", "normal", "unlabeled")
PROVENANCES = ("real", "synthetic", "generated")

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352


@dataclass(eq=False)
class Volume:
    voxels: np.ndarray
    label: str = "unlabeled"
    provenance: str = "real"
    intensity_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeError(f"volume must be 3-D with positive dims, got {self.voxels.shape}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def dims(self):
        return self.voxels.shape

    @property
    def flat(self):
        return self.voxels.ravel(order="F")


@dataclass(eq=False)
class SliceStack:
    slices: np.ndarray  # [n, h, w]
    depth_indices: tuple
    label: str = "unlabeled"
    provenance: str = "real"
    sample_id: str = ""

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        self.depth_indices = tuple(int(i) for i in self.depth_indices)
        if self.slices.ndim != 3:
            raise ShapeError(f"slice stack must be [n, h, w], got {self.slices.shape}")
        if len(self.depth_indices) != self.slices.shape[0]:
            raise ShapeError("one depth index per slice required")
        if any(b - a != 1 for a, b in zip(self.depth_indices, self.depth_indices[1:])):
            raise ShapeError(f"depth indices must be contiguous and increasing: {self.depth_indices}")

    @property
    def shape(self):
        return self.slices.shape

    def to_grid(self):
        """Classifier layout ``[h, w, depth]``."""
        return np.ascontiguousarray(self.slices.transpose(1, 2, 0))


# -- intensity normalization --------------------------------------------------

def normalize_intensities(values):
    """Min-max map to [-1, 1]; a constant array maps to -1 everywhere."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, -1.0, dtype=np.float32), (lo, hi)
    return (2.0 * (v - lo) / (hi - lo) - 1.0).astype(np.float32), (lo, hi)


def normalize_volume(v: Volume) -> Volume:
    vox, rng = normalize_intensities(v.voxels)
    return Volume(vox, v.label, v.provenance, rng)


# -- NIfTI-1 ---------------------------------------------------------------

def parse_nifti(data: bytes, normalize=True, label="unlabeled", provenance="real") -> Volume:
    """Decode a single-file NIfTI-1 image (uint8, int16 or float32 payload).

    A 4-D image contributes its first volume.
    """
    data = bytes(data)
    if len(data) < DEFAULT_VOX_OFFSET:
        raise TruncatedPayloadError(f"need at least {DEFAULT_VOX_OFFSET} bytes, got {len(data)}", "sizeof_hdr")
    if struct.unpack_from("<i", data, 0)[0] == HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        e = ">"
    else:
        raise NiftiError("header size is not 348 in either byte order", "sizeof_hdr")
    magic = data[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise BadMagicError(f"unrecognized magic {magic!r}")
    dim = struct.unpack_from(f"{e}8h", data, 40)
    if dim[0] not in (3, 4):
        raise BadDimError(f"dim[0] must be 3 or 4, got {dim[0]}")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise BadDimError(f"non-positive spatial dimension in {dims}")
    datatype, bitpix = struct.unpack_from(f"{e}2h", data, 70)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} is not one of {sorted(NIFTI_DTYPES)}")
    dtype = NIFTI_DTYPES[datatype].newbyteorder(e)
    if bitpix != dtype.itemsize * 8:
        raise NiftiError(f"bitpix {bitpix} inconsistent with datatype {datatype}", "bitpix")
    vox_offset, slope, inter = struct.unpack_from(f"{e}3f", data, 108)
    start = int(vox_offset)
    n = int(np.prod(dims))
    end = start + n * dtype.itemsize
    if start < DEFAULT_VOX_OFFSET or end > len(data):
        raise TruncatedPayloadError(f"payload needs bytes {start}..{end}, file has {len(data)}")
    raw = np.frombuffer(data, dtype=dtype, count=n, offset=start).astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        raw = raw * slope + inter
    voxels = raw.reshape(dims, order="F")
    if normalize:
        vox, rng = normalize_intensities(voxels)
        return Volume(vox, label, provenance, rng)
    return Volume(voxels, label, provenance, (float(raw.min()), float(raw.max())))


def nifti_header(dims, datatype=16, slope=1.0, inter=0.0, vox_offset=DEFAULT_VOX_OFFSET, magic=b"n+1\0",
                 endian="<", ndim=3) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(f"{endian}i", hdr, 0, HEADER_SIZE)
    dim = [ndim] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into(f"{endian}8h", hdr, 40, *dim)
    bitpix = NIFTI_DTYPES[datatype].itemsize * 8 if datatype in NIFTI_DTYPES else 0
    struct.pack_into(f"{endian}2h", hdr, 70, datatype, bitpix)
    struct.pack_into(f"{endian}8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(f"{endian}3f", hdr, 108, float(vox_offset), slope, inter)
    hdr[344:348] = magic
    return bytes(hdr)


def serialize_nifti(v: Volume) -> bytes:
    """Float32, little-endian, slope 1 / intercept 0, single-file NIfTI-1."""
    head = nifti_header(v.dims)
    return head + b"\0\0\0\0" + np.asarray(v.flat, dtype="<f4").tobytes()


def read_nifti(path, **kw) -> Volume:
    return parse_nifti(Path(path).read_bytes(), **kw)


def write_nifti(path, v: Volume):
    Path(path).write_bytes(serialize_nifti(v))


# -- geometry ----------------------------------------------------------------

def crop_to_multiple(v: Volume, factor: int) -> Volume:
    """Center-crop each dim down to the nearest multiple of ``factor``."""
    sl = []
    for n in v.dims:
        keep = n - n % factor
        lo = (n - keep) // 2
        sl.append(slice(lo, lo + keep))
    return Volume(v.voxels[tuple(sl)], v.label, v.provenance, v.intensity_range)


def pad_depth(v: Volume, depth: int = 176) -> Volume:
    """Center-pad the depth axis with the volume minimum (e.g. 172 -> 176)."""
    d = v.dims[2]
    if d > depth:
        raise ShapeError(f"depth {d} already exceeds target {depth}")
    lo = (depth - d) // 2
    vox = np.pad(v.voxels, [(0, 0), (0, 0), (lo, depth - d - lo)], constant_values=float(v.voxels.min()))
    return Volume(vox, v.label, v.provenance, v.intensity_range)


def downsample_volume(v: Volume, factor: int = 4) -> Volume:
    """Non-overlapping ``factor**3`` mean pooling."""
    f, t, d = v.dims
    if f % factor or t % factor or d % factor:
        raise ShapeError(f"dims {v.dims} not divisible by {factor}; crop or pad first")
    blocks = v.voxels.astype(np.float64).reshape(f // factor, factor, t // factor, factor, d // factor, factor)
    return Volume(blocks.mean(axis=(1, 3, 5)), v.label, v.provenance, v.intensity_range)


def select_band(v: Volume, count: int = 22, sample_id="") -> SliceStack:
    """Keep the ``count`` middle depth slices."""
    depth = v.dims[2]
    if depth < count:
        raise ShapeError(f"depth {depth} smaller than band size {count}")
    start = (depth - count) // 2
    idx = range(start, start + count)
    slices = np.moveaxis(v.voxels[:, :, start:start + count], 2, 0)
    return SliceStack(slices, tuple(idx), v.label, v.provenance, sample_id)


def resize_stack(s: SliceStack, expected=None) -> SliceStack:
    """Halve each slice with 2x2 mean pooling (64x64 -> 32x32 on full-size data)."""
    n, h, w = s.shape
    if expected is not None and (h, w) != tuple(expected):
        raise ShapeError(f"expected {tuple(expected)} slices, got {(h, w)}")
    if h % 2 or w % 2:
        raise ShapeError(f"slice size {(h, w)} is not even")
    pooled = s.slices.astype(np.float64).reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return SliceStack(pooled, s.depth_indices, s.label, s.provenance, s.sample_id)


def preprocess(v: Volume, factor=4, band=22, depth=None, sample_id="") -> SliceStack:
    """Downsample then keep the middle band; optionally pad depth first."""
    if depth is not None and v.dims[2] < depth:
        v = pad_depth(v, depth)
    if any(n % factor for n in v.dims):
        v = crop_to_multiple(v, factor)
    return select_band(downsample_volume(v, factor), band, sample_id)


# -- phantoms ----------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    radii: tuple = (0.38, 0.42, 0.40)
    brain_level: float = 0.25
    ventricle_level: float = -0.35
    noise_amplitude: float = 0.08
    signature_center: tuple = (0.16, -0.12, 0.0)
    signature_radius: float = 0.14
    signature_amplitude: float = 0.6


def _axis(n):
    return (np.arange(n, dtype=np.float32) + 0.5) / n - 0.5


def signature_mask(dims, spec=PhantomSpec()):
    u, v, w = np.meshgrid(*(_axis(n) for n in dims), indexing="ij", sparse=True)
    cu, cv, cw = spec.signature_center
    r = np.sqrt((u - cu) ** 2 + (v - cv) ** 2 + (w - cw) ** 2) / spec.signature_radius
    return r < 1, r


def make_phantom(seed, label, dims=(256, 256, 176), spec=PhantomSpec()) -> Volume:
    """Deterministic synthetic head: ellipsoid brain, dark ventricles, smooth noise.

    The ``bipolar`` class adds a compactly supported bright blob at a fixed
    position; both classes consume the random stream identically, so for a
    given seed they differ only inside that blob.
    """
    if label not in ("bipolar", "normal"):
        raise ValueError(f"phantom label must be bipolar or normal, got {label!r}")
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 32:
        raise ShapeError(f"phantom dims must be three values >= 32, got {dims}")
    rng = np.random.default_rng(seed)
    scale = 1 + 0.05 * rng.uniform(-1, 1, 3)
    level = spec.brain_level + 0.05 * rng.uniform(-1, 1)
    coarse = rng.standard_normal((6, 6, 6))
    noise = ndimage.zoom(coarse, [n / 6 for n in dims], order=1).astype(np.float32)

    u, v, w = np.meshgrid(*(_axis(n) for n in dims), indexing="ij", sparse=True)
    ru, rv, rw = (r * s for r, s in zip(spec.radii, scale))
    rho = np.sqrt((u / ru) ** 2 + (v / rv) ** 2 + (w / rw) ** 2)
    brain = np.clip((1.0 - rho) * 12.0, 0.0, 1.0)
    ventricle = np.sqrt((u / (0.3 * ru)) ** 2 + (v / (0.2 * rv)) ** 2 + (w / (0.35 * rw)) ** 2) < 1

    vox = -1.0 + brain * (level + 1.0 + spec.noise_amplitude * noise)
    vox = np.where(ventricle, spec.ventricle_level, vox)
    if label == "bipolar":
        inside, r = signature_mask(dims, spec)
        bump = spec.signature_amplitude * np.cos(0.5 * np.pi * np.minimum(r, 1.0)) ** 2
        vox = vox + np.where(inside, bump, 0.0)
    vox = np.clip(vox, -1.0, 1.0).astype(np.float32)
    return Volume(vox, label, "synthetic", (-1.0, 1.0))


def brain_mask(dims, spec=PhantomSpec()):
    u, v, w = np.meshgrid(*(_axis(n) for n in dims), indexing="ij", sparse=True)
    ru, rv, rw = spec.radii
    return (u / ru) ** 2 + (v / rv) ** 2 + (w / rw) ** 2 < 1


# -- image and manifest output ------------------------------------------------

def pgm_bytes(image) -> bytes:
    """8-bit binary PGM; [-1, 1] maps linearly onto [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D image, got {img.shape}")
    pix = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def write_pgm(path, image):
    Path(path).write_bytes(pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


@dataclass
class ManifestRow:
    path: str
    label: str
    provenance: str


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in rows:
            writer.writerow([r.path, r.label, r.provenance])


def read_manifest(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh, delimiter="\t"):
            if not rec:
                continue
            if len(rec) != 3:
                raise ValueError(f"{path}: manifest lines need path, label, provenance; got {rec}")
            rows.append(ManifestRow(*rec))
    return rows

