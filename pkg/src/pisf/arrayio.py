"""Portable array files, dataset manifests and checkpoints.

ArrayFile layout (all integers little-endian)::

    b"PISF" | version u8 (=1) | dtype u8 | ndim u8 | reserved u8 (=0)
    | ndim x u64 dims | row-major payload

dtype 1 is float32, dtype 2 is complex64 stored as interleaved (re, im)
float32 pairs.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ArrayFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "UnsupportedDtypeError",
    "HeaderError",
    "LengthMismatchError",
    "ManifestError",
    "CheckpointError",
    "write_array",
    "read_array",
    "DatasetManifest",
    "ManifestEntry",
    "save_manifest",
    "load_manifest",
    "save_checkpoint",
    "load_checkpoint",
    "write_json",
]

MAGIC = b"PISF"
VERSION = 1
MAX_NDIM = 8
DTYPE_REAL = 1
DTYPE_COMPLEX = 2
_CODES = {DTYPE_REAL: np.dtype("<f4"), DTYPE_COMPLEX: np.dtype("<c8")}
_PREFIX = struct.Struct("<4sBBBB")


class ArrayFormatError(ValueError):
    """Raised when an ArrayFile cannot be written or parsed."""


class BadMagicError(ArrayFormatError):
    pass


class UnsupportedVersionError(ArrayFormatError):
    pass


class UnsupportedDtypeError(ArrayFormatError):
    pass


class HeaderError(ArrayFormatError):
    pass


class LengthMismatchError(ArrayFormatError):
    pass


class ManifestError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _encode(a):
    a = np.asarray(a)
    if a.size == 0:
        raise ArrayFormatError("cannot write an empty array")
    if a.ndim == 0 or a.ndim > MAX_NDIM:
        raise ArrayFormatError(f"ndim must be in [1, {MAX_NDIM}], got {a.ndim}")
    if np.iscomplexobj(a):
        code = DTYPE_COMPLEX
    elif a.dtype.kind == "f":
        code = DTYPE_REAL
    else:
        raise UnsupportedDtypeError(f"unsupported element type {a.dtype}")
    payload = np.ascontiguousarray(a, dtype=_CODES[code])
    header = _PREFIX.pack(MAGIC, VERSION, code, a.ndim, 0)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + payload.tobytes()


def write_array(path, a):
    """Write ``a`` as an ArrayFile. Float64/complex128 input is narrowed to 32-bit."""
    data = _encode(a)
    with open(path, "wb") as fh:
        fh.write(data)


def decode_array(buf, source="<buffer>"):
    if len(buf) < _PREFIX.size:
        raise HeaderError(f"{source}: truncated header")
    magic, version, code, ndim, reserved = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    if code not in _CODES:
        raise UnsupportedDtypeError(f"{source}: unknown dtype code {code}")
    if reserved != 0:
        raise HeaderError(f"{source}: reserved byte is {reserved}, expected 0")
    if ndim == 0 or ndim > MAX_NDIM:
        raise HeaderError(f"{source}: invalid ndim {ndim}")
    offset = _PREFIX.size + 8 * ndim
    if len(buf) < offset:
        raise LengthMismatchError(f"{source}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, _PREFIX.size)
    if 0 in dims:
        raise HeaderError(f"{source}: zero-length dimension in {dims}")
    dtype = _CODES[code]
    expected = int(np.prod(dims, dtype=object)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise LengthMismatchError(
            f"{source}: payload has {len(buf) - offset} bytes, header implies {expected}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims).copy()


def read_array(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_array(buf, source=str(path))


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- manifests

FORMAT_VERSION = 1


@dataclass
class ManifestEntry:
    sample_id: int
    y_path: str
    xref_path: str
    mask_path: str
    snr_db: float
    seed: int


@dataclass
class DatasetManifest:
    master_seed: int
    sample_count: int
    af: float
    acs_width: int
    snr_range_db: list
    entries: list = field(default_factory=list)
    train_fraction: float = 0.9
    signal_length: int = 320
    format_version: int = FORMAT_VERSION
    root: Path | None = field(default=None, compare=False, repr=False)

    @property
    def n_train(self):
        return int(round(self.train_fraction * self.sample_count))

    @property
    def n_val(self):
        return self.sample_count - self.n_train

    def split(self):
        """Return ``(train_entries, val_entries)``."""
        return self.entries[: self.n_train], self.entries[self.n_train :]

    def resolve(self, rel):
        return Path(rel) if self.root is None else self.root / rel

    def validate(self, check_files=True):
        if self.sample_count < 1:
            raise ManifestError("sample_count must be at least 1")
        if len(self.entries) != self.sample_count:
            raise ManifestError(
                f"sample_count is {self.sample_count} but {len(self.entries)} entries are listed"
            )
        if not 0.0 < self.train_fraction <= 1.0:
            raise ManifestError(f"train_fraction {self.train_fraction} outside (0, 1]")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ManifestError(f"snr_range_db {self.snr_range_db} is not ordered")
        if not check_files:
            return
        n = self.signal_length
        expect = {"y_path": (np.complex64, (n,)), "xref_path": (np.complex64, (n,)), "mask_path": (np.float32, (n,))}
        for e in self.entries:
            for key, (dtype, shape) in expect.items():
                rel = getattr(e, key)
                path = self.resolve(rel)
                if not path.exists():
                    raise ManifestError(f"sample {e.sample_id}: missing {key} file {rel}")
                try:
                    a = read_array(path)
                except ArrayFormatError as exc:
                    raise ManifestError(f"sample {e.sample_id}: {rel} does not parse: {exc}") from exc
                if a.dtype != dtype or a.shape != shape:
                    raise ManifestError(
                        f"sample {e.sample_id}: {rel} has {a.dtype}{a.shape}, expected {np.dtype(dtype)}{shape}"
                    )

    def to_dict(self):
        d = asdict(self)
        d.pop("root")
        return d


def save_manifest(m: DatasetManifest, path, check_files=True):
    path = Path(path)
    if m.root is None:
        m.root = path.parent
    m.validate(check_files=check_files)
    write_json(path, m.to_dict())


def load_manifest(path, check_files=True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    try:
        entries = [ManifestEntry(**e) for e in raw.pop("entries")]
        m = DatasetManifest(entries=entries, root=path.parent, **raw)
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    if m.format_version != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported format_version {m.format_version}")
    m.validate(check_files=check_files)
    return m


# --------------------------------------------------------------- checkpoints


def _tensor_filename(name):
    return name.replace("/", "__") + ".pisf"


def save_checkpoint(directory, meta, tensors):
    """Write ``tensors`` (name -> array) and a ``manifest.json`` built from ``meta``.

    The layer table is generated from ``tensors``; ``meta`` supplies every other
    manifest field (model_version, K, lambda, normalization, config, seed, ...).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        fname = _tensor_filename(name)
        write_array(directory / fname, a)
        layers.append(
            {
                "name": name,
                "file": fname,
                "shape": list(a.shape),
                "dtype": "complex64" if np.iscomplexobj(a) else "float32",
            }
        )
    manifest = dict(meta)
    manifest["layers"] = layers
    tmp = directory / "manifest.json.tmp"
    write_json(tmp, manifest)
    os.replace(tmp, directory / "manifest.json")


def load_checkpoint(directory):
    """Return ``(meta, tensors)``; every layer-table entry is checked against its file."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"{directory}: no manifest.json")
    with open(path) as fh:
        meta = json.load(fh)
    tensors = {}
    for layer in meta.get("layers", []):
        fpath = directory / layer["file"]
        if not fpath.exists():
            raise CheckpointError(f"{directory}: missing tensor file {layer['file']}")
        a = read_array(fpath)
        if list(a.shape) != list(layer["shape"]):
            raise CheckpointError(
                f"{directory}: {layer['name']} has shape {list(a.shape)}, table says {layer['shape']}"
            )
        tensors[layer["name"]] = a
    return meta, tensors
