"""Multi-coil 2D reconstruction with a trained 1D de-aliasing network.

Every phase de-aliases each row (and optionally each column) of the coil
images, optionally refines the result through a SPIRiT k-space kernel, then
re-imposes the measured samples::

    D = rows(X);  B = F* G(F D);  X = F* [mask ? (Y + lam F B) / (1 + lam) : F B]

k-space arrays are ``(coils, rows, cols)`` with DC at ``(rows // 2, cols // 2)``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import sampling
from ._validation import check_complex, check_mask, check_nonneg, check_positive_int
from .arrayio import write_array, write_json
from .fourier import fft2c, ifft2c
from .unroll import DealiasInference, UnrolledModel

__all__ = [
    "KspaceVolume",
    "SpiritKernel",
    "ReconOptions",
    "ReconTrace",
    "ReconResult",
    "compress_coils",
    "calibrate_spirit",
    "apply_spirit",
    "dealias_2d",
    "data_consistency_2d",
    "reconstruct",
    "sos_combine",
    "zero_filled",
    "Reconstructor",
]

logger = logging.getLogger(__name__)

CHUNK_SIGNALS = 256


@dataclass
class KspaceVolume:
    """Undersampled multi-coil k-space with its sampling pattern.

    ``mask`` is a boolean ``(rows, cols)`` array; ``acs`` holds half-open
    ``rows`` and ``cols`` index ranges of the fully sampled calibration block.
    """

    data: np.ndarray
    mask: np.ndarray
    acs: dict | None = None

    def __post_init__(self):
        self.data = check_complex(self.data, ndim=3, name="k-space")
        m = getattr(self.mask, "sampled", self.mask)
        m = check_mask(m)
        if m.ndim == 1:
            m = np.tile(m, (self.data.shape[1], 1))
        self.mask = check_mask(m, self.data.shape[1:])
        if np.any(self.data[:, ~self.mask]):
            raise ValueError("k-space data must be zero wherever the mask is false")
        if self.acs is None:
            self.acs = find_acs(self.mask)

    @classmethod
    def from_full(cls, full, mask, acs=None):
        """Apply ``mask`` to fully sampled k-space ``full``."""
        full = check_complex(full, ndim=3, name="k-space")
        m = getattr(mask, "sampled", mask)
        m = np.asarray(m, dtype=bool)
        if m.ndim == 1:
            m = np.tile(m, (full.shape[1], 1))
        return cls(np.where(m, full, 0).astype(np.complex64), m, acs)

    @property
    def ncoils(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_1d(self):
        """True when the pattern is one column mask repeated down every row."""
        return bool((self.mask == self.mask[:1]).all())


def find_acs(mask):
    """Largest fully sampled block centered on DC as ``{"rows": (lo, hi), "cols": (lo, hi)}``."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if (mask == mask[:1]).all():
        width = sampling.detect_acs_width(mask[0])
        return {"rows": (0, h), "cols": sampling.acs_bounds(w, width)}
    side = sampling.detect_acs_width(mask)
    return {"rows": sampling.acs_bounds(h, side), "cols": sampling.acs_bounds(w, side)}


# ------------------------------------------------------------------ coils


def compress_coils(Y: KspaceVolume, target=8):
    """SVD coil compression to ``target`` virtual coils.

    Returns ``(volume, retained_energy)``; volumes with ``ncoils <= target``
    pass through unchanged.
    """
    target = check_positive_int(target, "target")
    c = Y.ncoils
    if not np.any(Y.data):
        raise ValueError("cannot compress an all-zero k-space volume")
    if c <= target:
        return Y, 1.0
    M = Y.data.reshape(c, -1).astype(np.complex128)
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    P = U[:, :target].conj().T
    out = (P @ M).reshape(target, *Y.data.shape[1:])
    energy = float(np.sum(s[:target] ** 2) / np.sum(s**2))
    return KspaceVolume(np.where(Y.mask, out, 0).astype(np.complex64), Y.mask, dict(Y.acs)), energy


def sos_combine(X):
    """Root-sum-of-squares over the coil axis."""
    X = np.asarray(X)
    if X.ndim < 2 or X.shape[0] < 1:
        raise ValueError("expected a (coils, ...) array")
    return np.sqrt(np.sum(np.abs(X) ** 2, axis=0))


def zero_filled(Y: KspaceVolume):
    """Coil images from the inverse FT of the zero-filled k-space."""
    return ifft2c(Y.data)


# ------------------------------------------------------------------ SPIRiT


@dataclass
class SpiritKernel:
    """``weights[j, i, dy, dx]`` maps coil ``i`` at offset ``(dy - r, dx - r)`` to target coil ``j``."""

    weights: np.ndarray
    tikhonov: float
    residual: float

    @property
    def size(self):
        return self.weights.shape[-1]


def _patches(calib, ks):
    """Rows of vectorized ``(coil, dy, dx)`` neighborhoods over all fully contained windows."""
    c, h, w = calib.shape
    win = np.lib.stride_tricks.sliding_window_view(calib, (ks, ks), axis=(1, 2))  # c, h', w', ks, ks
    return win.transpose(1, 2, 0, 3, 4).reshape(-1, c * ks * ks)


def calibrate_spirit(Y: KspaceVolume, kernel_size=5, tikhonov_rel=1e-2):
    """Fit a SPIRiT kernel on the ACS block by Tikhonov-regularized least squares.

    For each target coil the calibration matrix holds every ``kernel_size``
    squared neighborhood of all coils, minus the target's own center sample;
    the regularization weight is ``tikhonov_rel`` times its largest singular
    value.
    """
    if kernel_size % 2 != 1:
        raise ValueError("kernel_size must be odd")
    (r0, r1), (c0, c1) = Y.acs["rows"], Y.acs["cols"]
    calib = Y.data[:, r0:r1, c0:c1].astype(np.complex128)
    if (r1 - r0) * (c1 - c0) < (kernel_size + 3) ** 2 or min(r1 - r0, c1 - c0) < kernel_size:
        raise ValueError(
            f"ACS block {r1 - r0}x{c1 - c0} is too small for a {kernel_size}x{kernel_size} kernel"
        )
    c = calib.shape[0]
    A_full = _patches(calib, kernel_size)
    per = kernel_size * kernel_size
    center = per // 2
    weights = np.zeros((c, c * per), dtype=np.complex128)
    residuals, eps_used = [], []
    for j in range(c):
        col = j * per + center
        A = np.delete(A_full, col, axis=1)
        b = A_full[:, col]
        smax = np.linalg.norm(A, 2) if A.size else 0.0
        if smax == 0 or not np.any(b):
            raise ValueError(f"calibration matrix for coil {j} is rank zero (empty ACS?)")
        eps = tikhonov_rel * smax
        AhA = A.conj().T @ A
        AhA[np.diag_indices_from(AhA)] += eps
        g = scipy.linalg.solve(AhA, A.conj().T @ b, assume_a="pos")
        weights[j] = np.insert(g, col, 0)
        residuals.append(np.linalg.norm(A @ g - b) / np.linalg.norm(b))
        eps_used.append(eps)
    W = weights.reshape(c, c, kernel_size, kernel_size)
    logger.debug("SPIRiT calibration residual %.4f", np.mean(residuals))
    return SpiritKernel(W.astype(np.complex64), float(np.mean(eps_used)), float(np.mean(residuals)))


def apply_spirit(K, G: SpiritKernel, jobs=1):
    """Neighborhood-weighted sum over coils (zero boundary) for every k-space point."""
    K = np.asarray(K)
    c, h, w = K.shape
    W = G.weights
    if W.shape[:2] != (c, c):
        raise ValueError(f"kernel is for {W.shape[0]} coils, k-space has {c}")
    ks = W.shape[-1]
    r = ks // 2
    Kp = np.zeros((c, h + 2 * r, w + 2 * r), dtype=np.result_type(K, W))
    Kp[:, r : r + h, r : r + w] = K

    def coils(sel):
        out = np.zeros((len(sel), h * w), dtype=Kp.dtype)
        for dy in range(ks):
            for dx in range(ks):
                shifted = Kp[:, dy : dy + h, dx : dx + w].reshape(c, -1)
                out += W[sel, :, dy, dx] @ shifted
        return out

    if jobs > 1 and c > 1:
        groups = np.array_split(np.arange(c), min(jobs, c))
        with ThreadPoolExecutor(len(groups)) as pool:
            parts = list(pool.map(coils, groups))
        out = np.concatenate(parts)
    else:
        out = coils(np.arange(c))
    return out.reshape(c, h, w)


# ------------------------------------------------------------------ phases


def _signal_scales(X, axis):
    """Per-signal peak magnitude along ``axis`` (1 where the signal is zero)."""
    peak = np.abs(X).max(axis=axis, keepdims=True)
    return np.where(peak > 1e-12, peak, 1.0)


def _run_signals(fn, S, jobs):
    chunks = [slice(s, s + CHUNK_SIGNALS) for s in range(0, S.shape[0], CHUNK_SIGNALS)]
    out = np.empty_like(S)
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            for sl, r in zip(chunks, pool.map(lambda sl: fn(S[sl]), chunks)):
                out[sl] = r
    else:
        for sl in chunks:
            out[sl] = fn(S[sl])
    return out


def _pass(X, fn, axis, scales, jobs):
    Xm = np.moveaxis(X, axis, -1)
    sc = _signal_scales(Xm, -1) if scales is None else np.moveaxis(scales, axis, -1)
    flat = (Xm / sc).reshape(-1, Xm.shape[-1])
    out = _run_signals(fn, flat.astype(np.complex64), jobs).reshape(Xm.shape) * sc
    return np.moveaxis(out, -1, axis)


def _denoiser(model, k, bypass_threshold):
    if isinstance(model, UnrolledModel):
        inf = DealiasInference(model.module(k))
        return lambda s: inf.dealias(s, bypass_threshold)
    if isinstance(model, DealiasInference):
        return lambda s: model.dealias(s, bypass_threshold)
    if callable(model):
        return model
    raise TypeError("model must be an UnrolledModel, DealiasInference or a callable on (B, n) signals")


def dealias_2d(X, model, k=0, mode="rows", axis=-1, averaged=False, scales=None, jobs=1, bypass_threshold=False):
    """Apply the 1D de-aliasing module of phase ``k`` to every row of every coil image.

    Signals run along ``axis`` (the undersampled direction). Each signal is
    scaled by its peak magnitude (or by ``scales``, a pair for
    ``rows_then_cols``) before the network and rescaled after. In
    ``rows_then_cols`` mode the column pass follows the row pass; with
    ``averaged`` the two passes run on the same input and are averaged.
    ``model`` may also be any callable mapping complex ``(B, n)`` signals.
    """
    X = check_complex(X, ndim=3, name="coil images")
    if mode not in ("rows", "rows_then_cols"):
        raise ValueError(f"mode must be 'rows' or 'rows_then_cols', got {mode!r}")
    fn = _denoiser(model, k, bypass_threshold)
    axis = axis % 3
    if axis == 0:
        raise ValueError("axis must be a spatial axis (1 or 2)")
    other = 1 if axis == 2 else 2
    s_rows, s_cols = (scales if scales is not None else (None, None)) if mode == "rows_then_cols" else (scales, None)
    D = _pass(X, fn, axis, s_rows, jobs)
    if mode == "rows":
        return D
    if averaged:
        return 0.5 * (D + _pass(X, fn, other, s_cols, jobs))
    return _pass(D, fn, other, s_cols, jobs)


def data_consistency_2d(B, Y, mask, lam):
    """Per-frequency blend ``(Y + lam B^)/(1 + lam)`` on sampled points, ``B^`` elsewhere."""
    lam = check_nonneg(float(lam), "lambda")
    m = check_mask(getattr(mask, "sampled", mask))
    if np.shape(B) != np.shape(Y) or m.shape != np.shape(B)[-2:]:
        raise ValueError(f"shape mismatch: B {np.shape(B)}, Y {np.shape(Y)}, mask {m.shape}")
    Bh = fft2c(B)
    return ifft2c(np.where(m, (Y + lam * Bh) / (1.0 + lam), Bh))


# ------------------------------------------------------------------ driver


@dataclass
class ReconOptions:
    """``plain`` skips the adaptive thresholding and SPIRiT; ``advanced`` uses both.

    ``spirit=None`` follows the variant. ``mask_kind=None`` detects 1D
    patterns (one column mask repeated over rows); 2D masks use
    ``rows_then_cols``. ``K`` runs only the first ``K`` phases.
    """

    variant: str = "advanced"
    mask_kind: str | None = None
    K: int | None = None
    spirit: bool | None = None
    trace: bool = False
    axis: int = -1
    averaged: bool = False
    kernel_size: int = 5
    tikhonov_rel: float = 1e-2
    jobs: int = 1

    def resolved(self, volume: KspaceVolume, model: UnrolledModel):
        if self.variant not in ("plain", "advanced"):
            raise ValueError(f"variant must be 'plain' or 'advanced', got {self.variant!r}")
        spirit = (self.variant == "advanced") if self.spirit is None else bool(self.spirit)
        if self.variant == "plain" and spirit:
            raise ValueError("the plain variant does not use SPIRiT")
        kind = self.mask_kind or ("1d" if volume.is_1d else "2d")
        if kind not in ("1d", "2d"):
            raise ValueError(f"mask_kind must be '1d' or '2d', got {kind!r}")
        K = model.K if self.K is None else self.K
        if not 1 <= K <= model.K:
            raise ValueError(f"K must be in [1, {model.K}], got {K}")
        return spirit, kind, K


@dataclass
class ReconTrace:
    D: list = field(default_factory=list)
    B: list = field(default_factory=list)
    X: list = field(default_factory=list)
    psnr: list = field(default_factory=list)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("D", "B", "X"):
            for k, a in enumerate(getattr(self, name), start=1):
                write_array(directory / f"{name}_{k:02d}.pisf", a)
        write_json(directory / "trace.json", {"phases": len(self.X), "psnr_db": [_json_num(p) for p in self.psnr]})


def _json_num(v):
    return "inf" if v == np.inf else float(v)


@dataclass
class ReconResult:
    coil_images: np.ndarray
    sos: np.ndarray
    trace: ReconTrace | None
    options: dict


def reconstruct(Y: KspaceVolume, model: UnrolledModel, opts: ReconOptions | None = None, reference=None, kernel=None):
    """Run the unrolled 2D reconstruction; ``reference`` (an SoS image) enables per-phase PSNR in the trace."""
    from .metrics import psnr

    opts = opts or ReconOptions()
    spirit, kind, K = opts.resolved(Y, model)
    mode = "rows" if kind == "1d" else "rows_then_cols"
    if spirit and kernel is None:
        kernel = calibrate_spirit(Y, opts.kernel_size, opts.tikhonov_rel)
    bypass = opts.variant == "plain"
    axis = opts.axis % 3
    other = 1 if axis == 2 else 2
    X = ifft2c(Y.data)
    scales = _signal_scales(X, axis)
    if mode == "rows_then_cols":
        scales = (scales, _signal_scales(X, other))
    trace = ReconTrace() if opts.trace else None
    for k in range(K):
        D = dealias_2d(X, model, k, mode, opts.axis, opts.averaged, scales, opts.jobs, bypass)
        B = ifft2c(apply_spirit(fft2c(D), kernel, opts.jobs)) if spirit else D
        X = data_consistency_2d(B, Y.data, Y.mask, float(model.lam[k])).astype(np.complex64)
        if trace is not None:
            trace.D.append(D.astype(np.complex64))
            trace.B.append(B.astype(np.complex64))
            trace.X.append(X)
            if reference is not None:
                trace.psnr.append(psnr(reference, sos_combine(X)))
    used = {"variant": opts.variant, "spirit": spirit, "mask_kind": kind, "mode": mode, "K": K,
            "averaged": opts.averaged, "axis": opts.axis}
    return ReconResult(X, sos_combine(X), trace, used)


class Reconstructor(BaseEstimator, TransformerMixin):
    """Estimator front-end: ``fit`` calibrates SPIRiT on a volume's ACS, ``transform`` returns coil images.

    ``predict`` returns the root-sum-of-squares magnitude image.
    """

    def __init__(self, model=None, variant="advanced", spirit=None, mask_kind=None, K=None, axis=-1,
                 averaged=False, kernel_size=5, tikhonov_rel=1e-2, jobs=1):
        self.model = model
        self.variant = variant
        self.spirit = spirit
        self.mask_kind = mask_kind
        self.K = K
        self.axis = axis
        self.averaged = averaged
        self.kernel_size = kernel_size
        self.tikhonov_rel = tikhonov_rel
        self.jobs = jobs

    def _options(self):
        return ReconOptions(self.variant, self.mask_kind, self.K, self.spirit, False, self.axis, self.averaged,
                            self.kernel_size, self.tikhonov_rel, self.jobs)

    def _model(self):
        if self.model is None:
            raise ValueError("no model given")
        return self.model if isinstance(self.model, UnrolledModel) else UnrolledModel.load(self.model)

    def fit(self, volume: KspaceVolume, y=None):
        self.model_ = self._model()
        spirit, _, _ = self._options().resolved(volume, self.model_)
        self.kernel_ = calibrate_spirit(volume, self.kernel_size, self.tikhonov_rel) if spirit else None
        return self

    def transform(self, volume: KspaceVolume):
        check_is_fitted(self, "model_")
        return reconstruct(volume, self.model_, self._options(), kernel=self.kernel_).coil_images

    def predict(self, volume: KspaceVolume):
        return sos_combine(self.transform(volume))
