"""PSNR and SSIM on magnitude images, both after scaling by the reference maximum."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import correlate

__all__ = ["psnr", "ssim", "gaussian_window", "MetricReport", "evaluate"]

WINDOW = {"size": 11, "sigma": 1.5, "K1": 0.01, "K2": 0.03}


def _normalized(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: reference {ref.shape}, test {test.shape}")
    peak = ref.max() if ref.size else 0.0
    if not peak > 0:
        raise ValueError("reference image is all zero (or has no positive maximum)")
    return ref / peak, test / peak


def psnr(ref, test):
    """``10 log10(1 / MSE)`` after dividing both images by ``max(ref)``; ``inf`` if identical."""
    r, t = _normalized(ref, test)
    mse = float(np.mean((r - t) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(ref, test, size=WINDOW["size"], sigma=WINDOW["sigma"], K1=WINDOW["K1"], K2=WINDOW["K2"]):
    """Mean SSIM over all fully contained Gaussian windows (dynamic range 1 after normalization)."""
    r, t = _normalized(ref, test)
    if r.ndim != 2 or min(r.shape) < size:
        raise ValueError(f"images must be 2D and at least {size}x{size}, got {r.shape}")
    win = gaussian_window(size, sigma)

    def filt(a):
        return correlate(a, win, mode="valid", method="direct" if min(a.shape) < 64 else "auto")

    mu_r, mu_t = filt(r), filt(t)
    var_r = filt(r * r) - mu_r**2
    var_t = filt(t * t) - mu_t**2
    cov = filt(r * t) - mu_r * mu_t
    C1, C2 = (K1 * 1.0) ** 2, (K2 * 1.0) ** 2
    num = (2 * mu_r * mu_t + C1) * (2 * cov + C2)
    den = (mu_r**2 + mu_t**2 + C1) * (var_r + var_t + C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    normalization: str = "reference-max"
    window: dict = field(default_factory=lambda: dict(WINDOW))

    def to_dict(self):
        d = asdict(self)
        d["psnr_db"] = "inf" if self.psnr_db == math.inf else self.psnr_db
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(ref, test):
    return MetricReport(psnr(ref, test), ssim(ref, test))
