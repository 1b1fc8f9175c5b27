"""Physics-informed synthesis of paired 1D training signals.

A multi-coil image ``X_c = A * P * S_c`` is built from a magnitude ``A``, a
smooth unit-modulus phase ``P`` and coil sensitivities ``S``. Rows of ``X`` are
Fourier transformed, corrupted with complex Gaussian noise and undersampled to
give the network input ``y``; the clean row is the label.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import sampling
from .arrayio import DatasetManifest, ManifestEntry, read_array, save_manifest, write_array, write_json
from .fourier import fft1c, fft2c, ifft1c, ifft2c

__all__ = [
    "MagnitudeImage",
    "PhaseMap",
    "CoilSensitivitySet",
    "SyntheticScene",
    "SyntheticSample",
    "SynthConfig",
    "SHEPP_LOGAN_ELLIPSES",
    "shepp_logan",
    "magnitude_source",
    "gen_phase_map",
    "gen_coil_maps",
    "coil_map_violations",
    "load_coil_maps",
    "save_coil_maps",
    "compose_scene",
    "simulate_scene",
    "extract_row",
    "embed_row",
    "forward_linear_1d",
    "adjoint_1d",
    "forward_1d",
    "sample_seed",
    "make_sample",
    "build_dataset",
    "load_split",
    "intensity_stats",
]

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".pgm", ".ppm"}

# Modified Shepp-Logan (Toft): intensity, semi-axis a (x), semi-axis b (y), x0, y0, angle (deg).
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.8, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.1, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.1, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.1, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.1, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


@dataclass
class MagnitudeImage:
    values: np.ndarray
    source: str


@dataclass
class PhaseMap:
    values: np.ndarray
    trunc_size: int
    seed: int | None = None


@dataclass
class CoilSensitivitySet:
    maps: np.ndarray
    geometry: list = field(default_factory=list)
    origin: str = "simulated"

    @property
    def ncoils(self):
        return self.maps.shape[0]


@dataclass
class SyntheticScene:
    X: np.ndarray
    A: MagnitudeImage
    P: PhaseMap
    S: CoilSensitivitySet


@dataclass
class SyntheticSample:
    y: np.ndarray
    x_ref: np.ndarray
    mask: sampling.Mask1D
    snr_db: float
    seed: int


# ------------------------------------------------------------ magnitudes


def _shape2(size):
    h, w = (size, size) if np.isscalar(size) else size
    return int(h), int(w)


def _grid(h, w):
    """Normalized pixel coordinates with the center pixel ``(h//2, w//2)`` at the origin."""
    y = -(np.arange(h) - h // 2) / (h / 2)
    x = (np.arange(w) - w // 2) / (w / 2)
    return np.meshgrid(y, x, indexing="ij")


def shepp_logan(size):
    h, w = _shape2(size)
    yy, xx = _grid(h, w)
    img = np.zeros((h, w))
    for rho, a, b, x0, y0, deg in SHEPP_LOGAN_ELLIPSES:
        t = np.deg2rad(deg)
        dx, dy = xx - x0, yy - y0
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += rho
    return np.clip(img, 0.0, None)


def _blobs(h, w, rng):
    yy, xx = _grid(h, w)
    img = np.zeros((h, w))
    for _ in range(rng.integers(3, 11)):
        cy, cx = rng.uniform(-0.8, 0.8, size=2)
        sy, sx = rng.uniform(0.05, 0.5, size=2)
        img += rng.uniform(0.2, 1.0) * np.exp(-((yy - cy) ** 2) / (2 * sy**2) - (xx - cx) ** 2 / (2 * sx**2))
    return img


def _corpus_files(directory):
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if directory.is_dir() else []
    if not files:
        raise ValueError(f"no images found in corpus directory {directory}")
    return files


def _corpus_image(path, h, w, rng):
    from PIL import Image

    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    H, W = gray.shape
    # random crop with the target aspect ratio, then resample to (h, w)
    scale = min(H / h, W / w)
    ch, cw = max(1, int(h * scale)), max(1, int(w * scale))
    y0 = rng.integers(0, H - ch + 1)
    x0 = rng.integers(0, W - cw + 1)
    crop = gray[y0 : y0 + ch, x0 : x0 + cw].astype(np.float32)
    if crop.shape != (h, w):
        crop = np.asarray(Image.fromarray(crop, mode="F").resize((w, h), Image.BILINEAR))
    return crop.astype(np.float64)


def magnitude_source(kind, size, params=None, seed=0) -> MagnitudeImage:
    """Real magnitude image in [0, 1] with maximum 1 (unless identically zero).

    kind is ``"shepp-logan"``, ``"procedural-blobs"`` or ``"corpus-file"``; the
    corpus kind needs ``params["directory"]``.
    """
    h, w = _shape2(size)
    if min(h, w) < 16:
        raise ValueError(f"magnitude images must be at least 16x16, got {h}x{w}")
    params = params or {}
    rng = np.random.default_rng(seed)
    if kind == "shepp-logan":
        img = shepp_logan((h, w))
    elif kind == "procedural-blobs":
        img = _blobs(h, w, rng)
    elif kind == "corpus-file":
        files = _corpus_files(params["directory"])
        img = _corpus_image(files[rng.integers(len(files))], h, w, rng)
    else:
        raise ValueError(f"unknown magnitude source {kind!r}")
    peak = img.max()
    if peak > 0:
        img = img / peak
    return MagnitudeImage(np.clip(img, 0.0, 1.0), kind)


# ----------------------------------------------------------------- phase


def gen_phase_map(h, w, trunc_size, seed=0) -> PhaseMap:
    """Smooth random phase: low-pass truncated complex white noise, modulus normalized."""
    if not 1 <= trunc_size <= min(h, w):
        raise ValueError(f"trunc_size must be in [1, {min(h, w)}], got {trunc_size}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    k = fft2c(noise)
    keep = np.zeros((h, w), dtype=bool)
    r0, r1 = sampling.acs_bounds(h, trunc_size)
    c0, c1 = sampling.acs_bounds(w, trunc_size)
    keep[r0:r1, c0:c1] = True
    k[~keep] = 0
    p = ifft2c(k)
    mod = np.abs(p)
    tiny = mod < 1e-12
    p = np.where(tiny, 1.0 + 0j, p / np.where(tiny, 1.0, mod))
    return PhaseMap(p, trunc_size, seed)


# ----------------------------------------------------------------- coils

COIL_DEFAULTS = {"radius": 0.55, "width": 0.6, "phase_slope": np.pi / 2, "phase_offset": True}


def gen_coil_maps(h, w, ncoils, params=None, seed=0) -> CoilSensitivitySet:
    """Gaussian-profile coils on a circle around the FOV with low-order phase.

    Coil ``j`` sits at radius ``params["radius"]`` (FOV units) and angle
    ``2 pi j / ncoils``. Its phase is ``a_j + b_j . p`` with ``a_j`` uniform in
    ``[0, 2 pi)`` (when ``phase_offset``) and each component of ``b_j`` uniform
    in ``[-phase_slope, phase_slope]``. Maps are scaled so that the maximum
    sum-of-squares is 1.
    """
    if not 1 <= ncoils <= 32:
        raise ValueError(f"ncoils must be in [1, 32], got {ncoils}")
    p = dict(COIL_DEFAULTS, **(params or {}))
    rng = np.random.default_rng(seed)
    py = (np.arange(h) - h // 2) / h
    px = (np.arange(w) - w // 2) / w
    yy, xx = np.meshgrid(py, px, indexing="ij")
    maps = np.empty((ncoils, h, w), dtype=np.complex128)
    geometry = []
    for j in range(ncoils):
        ang = 2 * np.pi * j / ncoils
        cy, cx = p["radius"] * np.sin(ang), p["radius"] * np.cos(ang)
        a = rng.uniform(0, 2 * np.pi) if p["phase_offset"] else 0.0
        b = rng.uniform(-p["phase_slope"], p["phase_slope"], size=2)
        prof = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * p["width"] ** 2))
        maps[j] = prof * np.exp(1j * (a + b[0] * yy + b[1] * xx))
        geometry.append({"center": [float(cy), float(cx)], "width": p["width"], "a": float(a), "b": b.tolist()})
    maps /= np.sqrt((np.abs(maps) ** 2).sum(axis=0).max())
    return CoilSensitivitySet(maps, geometry, "simulated")


def coil_map_violations(maps):
    """Human-readable list of simulated-coil invariants that ``maps`` violate."""
    out = []
    sos = (np.abs(maps) ** 2).sum(axis=0)
    c, h, w = maps.shape
    if sos.max() > 1.05:
        out.append(f"max sum-of-squares {sos.max():.4f} exceeds 1.05")
    yy, xx = np.meshgrid((np.arange(h) - h // 2) / h, (np.arange(w) - w // 2) / w, indexing="ij")
    disc = np.hypot(yy, xx) <= 0.4
    if sos[disc].min() < 0.05:
        out.append(f"min sum-of-squares in central disc {sos[disc].min():.4f} below 0.05")
    step = max(np.abs(np.diff(maps, axis=1)).max(), np.abs(np.diff(maps, axis=2)).max())
    if step > 0.2:
        out.append(f"neighbor difference {step:.4f} exceeds 0.2 (not smooth)")
    return out


def save_coil_maps(path, coils: CoilSensitivitySet):
    write_array(path, coils.maps)


def load_coil_maps(path) -> CoilSensitivitySet:
    maps = read_array(path)
    if not np.iscomplexobj(maps) or maps.ndim != 3:
        raise ValueError(f"{path}: coil maps must be a complex c x h x w array, got {maps.dtype}{maps.shape}")
    for msg in coil_map_violations(maps):
        warnings.warn(f"{path}: {msg}", stacklevel=2)
    return CoilSensitivitySet(maps, [], "loaded")


# ----------------------------------------------------------------- scenes


def compose_scene(A, P, S) -> SyntheticScene:
    a = getattr(A, "values", A)
    ph = getattr(P, "values", P)
    s = getattr(S, "maps", S)
    s = s[None] if s.ndim == 2 else s
    if a.shape != ph.shape or a.shape != s.shape[1:]:
        raise ValueError(f"shape mismatch: A {a.shape}, P {ph.shape}, S {s.shape}")
    X = a[None] * ph[None] * s
    A = A if isinstance(A, MagnitudeImage) else MagnitudeImage(a, "array")
    P = P if isinstance(P, PhaseMap) else PhaseMap(ph, 0)
    S = S if isinstance(S, CoilSensitivitySet) else CoilSensitivitySet(s)
    return SyntheticScene(X, A, P, S)


def simulate_scene(kind, size, ncoils, seed=0, trunc_size=None, coil_params=None, corpus_dir=None):
    """Convenience: magnitude + random smooth phase + simulated coils for one scene."""
    h, w = _shape2(size)
    ss = np.random.SeedSequence(seed)
    s_mag, s_phase, s_coil, s_trunc = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(4))
    A = magnitude_source(kind, (h, w), {"directory": corpus_dir} if corpus_dir else None, s_mag)
    t = trunc_size or int(np.random.default_rng(s_trunc).integers(2, 6))
    P = gen_phase_map(h, w, t, s_phase)
    S = gen_coil_maps(h, w, ncoils, coil_params, s_coil)
    return compose_scene(A, P, S)


def extract_row(X, m):
    """Row ``m`` of every coil: ``(c, h, w) -> (c, w)``."""
    if not 0 <= m < X.shape[-2]:
        raise IndexError(f"row {m} out of range for {X.shape[-2]} rows")
    return X[..., m, :]


def embed_row(v, m, h):
    """Adjoint of :func:`extract_row`: place ``v`` as row ``m`` of a zero image."""
    if not 0 <= m < h:
        raise IndexError(f"row {m} out of range for {h} rows")
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (h, v.shape[-1]), dtype=v.dtype)
    out[..., m, :] = v
    return out


# ---------------------------------------------------------- forward model


def forward_linear_1d(x, mask):
    m = np.asarray(getattr(mask, "sampled", mask), dtype=bool)
    return fft1c(x) * m


def adjoint_1d(y, mask):
    m = np.asarray(getattr(mask, "sampled", mask), dtype=bool)
    return ifft1c(y * m)


def forward_1d(x, mask, snr_db=np.inf, seed=0):
    """Undersampled noisy k-space of each coil row: FT, then noise, then mask.

    Noise power per sample is ``mean(|k|^2) / 10**(snr_db / 10)``, split
    equally between real and imaginary parts. ``snr_db = inf`` disables noise.
    """
    x = np.asarray(x)
    m = np.asarray(getattr(mask, "sampled", mask), dtype=bool)
    if x.shape[-1] != m.shape[-1]:
        raise ValueError(f"signal length {x.shape[-1]} != mask length {m.shape[-1]}")
    k = fft1c(x)
    if np.isfinite(snr_db):
        rng = np.random.default_rng(seed)
        power = np.mean(np.abs(k) ** 2, axis=-1, keepdims=True)
        sigma = np.sqrt(power / 10 ** (snr_db / 10) / 2)
        k = k + sigma * (rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape))
    return np.where(m, k, 0)


# ---------------------------------------------------------------- datasets


@dataclass
class SynthConfig:
    sample_count: int = 1000
    signal_length: int = 320
    image_rows: int | None = None
    af: float = 4.0
    acs_width: int = 24
    snr_range_db: tuple = (10.0, 80.0)
    trunc_range: tuple = (2, 5)
    magnitude_kinds: tuple = ("procedural-blobs",)
    corpus_dir: str | None = None
    n_magnitudes: int = 200
    n_coil_sets: int = 6
    ncoils: int = 8
    coil_params: dict | None = None
    train_fraction: float = 0.9
    master_seed: int = 0
    jobs: int = 1

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["snr_range_db"] = list(d["snr_range_db"])
        d["trunc_range"] = list(d["trunc_range"])
        d["magnitude_kinds"] = list(d["magnitude_kinds"])
        return d


def sample_seed(master_seed, sample_id):
    """Per-sample seed derived from ``(master_seed, sample_id)``, independent of generation order."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(0, int(sample_id)))
    return int(ss.generate_state(1, np.uint64)[0])


def _pool_seed(master_seed, pool, index):
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(pool, int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


class _Pools:
    """Magnitude images and coil sets shared across samples, built once per dataset."""

    def __init__(self, cfg: SynthConfig):
        h = cfg.image_rows or cfg.signal_length
        n = cfg.signal_length
        kinds = list(cfg.magnitude_kinds)
        params = {"directory": cfg.corpus_dir} if cfg.corpus_dir else None
        self.magnitudes = [
            magnitude_source(kinds[i % len(kinds)], (h, n), params, _pool_seed(cfg.master_seed, 1, i)).values
            for i in range(cfg.n_magnitudes)
        ]
        self.coils = [
            gen_coil_maps(h, n, cfg.ncoils, cfg.coil_params, _pool_seed(cfg.master_seed, 2, i)).maps
            for i in range(cfg.n_coil_sets)
        ]
        self.rows = [np.flatnonzero(a.max(axis=1) > 0) for a in self.magnitudes]


def make_sample(cfg: SynthConfig, pools: _Pools, sample_id) -> SyntheticSample:
    seed = sample_seed(cfg.master_seed, sample_id)
    rng = np.random.default_rng(seed)
    mi = int(rng.integers(len(pools.magnitudes)))
    A = pools.magnitudes[mi]
    h, n = A.shape
    trunc = int(rng.integers(cfg.trunc_range[0], cfg.trunc_range[1] + 1))
    phase_seed, mask_seed, noise_seed = (int(s) for s in rng.integers(0, 2**63, size=3))
    S = pools.coils[int(rng.integers(len(pools.coils)))]
    coil = int(rng.integers(S.shape[0]))
    rows = pools.rows[mi] if pools.rows[mi].size else np.arange(h)
    m = int(rows[rng.integers(rows.size)])
    snr = float(rng.uniform(*cfg.snr_range_db))
    P = gen_phase_map(h, n, trunc, phase_seed).values
    x_ref = A[m] * P[m] * S[coil, m]
    mask = sampling.make_cartesian_1d(n, cfg.af, cfg.acs_width, mask_seed)
    y = forward_1d(x_ref, mask, snr, noise_seed)
    return SyntheticSample(y.astype(np.complex64), x_ref.astype(np.complex64), mask, snr, seed)


def build_dataset(config, out_dir) -> DatasetManifest:
    """Generate a dataset directory (``manifest.json`` + per-sample ArrayFiles)."""
    cfg = config if isinstance(config, SynthConfig) else SynthConfig.from_dict(config)
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    pools = _Pools(cfg)

    def one(i):
        s = make_sample(cfg, pools, i)
        stem = f"samples/{i:06d}"
        write_array(out_dir / f"{stem}_y.pisf", s.y)
        write_array(out_dir / f"{stem}_xref.pisf", s.x_ref)
        write_array(out_dir / f"{stem}_mask.pisf", s.mask.sampled.astype(np.float32))
        return ManifestEntry(i, f"{stem}_y.pisf", f"{stem}_xref.pisf", f"{stem}_mask.pisf", s.snr_db, s.seed)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            entries = list(pool.map(one, range(cfg.sample_count)))
    else:
        entries = [one(i) for i in range(cfg.sample_count)]
    manifest = DatasetManifest(
        master_seed=cfg.master_seed,
        sample_count=cfg.sample_count,
        af=cfg.af,
        acs_width=cfg.acs_width,
        snr_range_db=list(cfg.snr_range_db),
        entries=entries,
        train_fraction=cfg.train_fraction,
        signal_length=cfg.signal_length,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json", check_files=False)
    write_json(out_dir / "synth_config.json", cfg.to_dict())
    logger.info("wrote %d samples to %s", cfg.sample_count, out_dir)
    return manifest


def load_split(manifest: DatasetManifest, split="train"):
    """Stack a split into arrays ``(y, mask, x_ref)`` of shapes ``(T, n)``."""
    train, val = manifest.split()
    entries = {"train": train, "val": val, "all": manifest.entries}[split]
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    y = np.stack([read_array(manifest.resolve(e.y_path)) for e in entries])
    x = np.stack([read_array(manifest.resolve(e.xref_path)) for e in entries])
    m = np.stack([read_array(manifest.resolve(e.mask_path)) for e in entries]).astype(bool)
    return y, m, x


def intensity_stats(manifest: DatasetManifest, bins=50):
    """Histogram of per-sample max-normalized ``|x_ref|`` over [0, 1]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if not manifest.entries:
        raise ValueError("manifest has no samples")
    counts = np.zeros(bins, dtype=np.int64)
    lo, hi, total, acc = np.inf, -np.inf, 0, 0.0
    for e in manifest.entries:
        v = np.abs(read_array(manifest.resolve(e.xref_path))).astype(np.float64)
        peak = v.max()
        v = v / peak if peak > 0 else v
        counts += np.histogram(v, bins=bins, range=(0.0, 1.0))[0]
        lo, hi = min(lo, v.min()), max(hi, v.max())
        total += v.size
        acc += v.sum()
    return {
        "bins": bins,
        "edges": np.linspace(0.0, 1.0, bins + 1).tolist(),
        "counts": counts.tolist(),
        "min": float(lo),
        "max": float(hi),
        "mean": acc / total,
        "total": int(total),
    }
