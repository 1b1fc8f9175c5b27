"""K-phase unrolled 1D reconstruction network and its trainer.

Each phase de-aliases the current estimate with a CNN and then blends its
spectrum with the measurements::

    d = N2(soft(N1(x); theta))
    x = F* [mask ? (y + lam * F d) / (1 + lam) : F d]

The de-aliasing weights are shared across phases by default; every phase has
its own non-negative ``lam``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import arrayio
from ._validation import check_complex, check_mask, check_nonneg
from .autonet import Adam, AdaptiveThreshold, BatchNorm1d, Conv1d, Module, ReLU, ResBlock
from .fourier import fft1c, ifft1c

__all__ = [
    "complex_to_channels",
    "channels_to_complex",
    "DealiasModule",
    "DealiasInference",
    "UnrolledModel",
    "TrainConfig",
    "TrainingError",
    "dealias_1d",
    "data_consistency_1d",
    "data_consistency_1d_backward",
    "forward_unrolled",
    "training_loss",
    "train",
    "UnrolledDealiaser",
]

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
VARIANTS = ("advanced", "plain")


class TrainingError(RuntimeError):
    pass


def complex_to_channels(x):
    """Complex ``(..., n)`` -> real ``(..., n, 2)`` holding (re, im)."""
    x = np.asarray(x)
    dtype = np.float64 if x.dtype == np.complex128 else np.float32
    return np.stack([x.real, x.imag], axis=-1).astype(dtype, copy=False)


def channels_to_complex(t):
    """Inverse of :func:`complex_to_channels`; ``2k`` channels give ``k`` complex channels."""
    t = np.asarray(t)
    if t.shape[-1] % 2:
        raise ValueError(f"channel count must be even, got {t.shape[-1]}")
    z = t[..., 0::2] + 1j * t[..., 1::2]
    return z[..., 0] if t.shape[-1] == 2 else z


class DealiasModule(Module):
    """``N1 -> adaptive soft-threshold -> N2`` on 2-channel (re, im) signals.

    N1 is conv(2->64, 3) + BN + ReLU followed by two ResBlocks; N2 is two
    ResBlocks followed by conv(64->2, 3). The ``plain`` variant has no
    thresholding stage.
    """

    def __init__(self, variant="advanced", channels=64, rng=None, dtype=np.float32, zero_init_residual=True):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.add("conv_in", Conv1d(2, channels, 3, rng, dtype))
        self.add("bn_in", BatchNorm1d(channels, dtype=dtype))
        self.add("res1", ResBlock(channels, rng, dtype, zero_init_residual))
        self.add("res2", ResBlock(channels, rng, dtype, zero_init_residual))
        if variant == "advanced":
            self.add("threshold", AdaptiveThreshold(channels, rng, dtype))
        self.add("res3", ResBlock(channels, rng, dtype, zero_init_residual))
        self.add("res4", ResBlock(channels, rng, dtype, zero_init_residual))
        self.add("conv_out", Conv1d(channels, 2, 3, rng, dtype))
        self._relu = ReLU()

    def forward(self, x, train=False, bypass_threshold=False, **kw):
        ch = self.children
        if x.shape[1] < 3:
            raise ValueError(f"signals must have length >= 3, got {x.shape[1]}")
        caches = {}
        h, caches["conv_in"] = ch["conv_in"].forward(x, train)
        h, caches["bn_in"] = ch["bn_in"].forward(h, train, **kw)
        h, caches["relu_in"] = self._relu.forward(h)
        h, caches["res1"] = ch["res1"].forward(h, train, **kw)
        h, caches["res2"] = ch["res2"].forward(h, train, **kw)
        if "threshold" in ch and not bypass_threshold:
            h, caches["threshold"] = ch["threshold"].forward(h, train, **kw)
        h, caches["res3"] = ch["res3"].forward(h, train, **kw)
        h, caches["res4"] = ch["res4"].forward(h, train, **kw)
        out, caches["conv_out"] = ch["conv_out"].forward(h, train)
        return out, caches

    def backward(self, dy, caches):
        ch = self.children
        g = ch["conv_out"].backward(dy, caches["conv_out"])
        g = ch["res4"].backward(g, caches["res4"])
        g = ch["res3"].backward(g, caches["res3"])
        if "threshold" in caches:
            g = ch["threshold"].backward(g, caches["threshold"])
        g = ch["res2"].backward(g, caches["res2"])
        g = ch["res1"].backward(g, caches["res1"])
        g = self._relu.backward(g, caches["relu_in"])
        g = ch["bn_in"].backward(g, caches["bn_in"])
        return ch["conv_in"].backward(g, caches["conv_in"])


def _im2col(x, k):
    B, L, C = x.shape
    if k == 1:
        return x.reshape(B * L, C)
    p = k // 2
    cols = np.zeros((B, L, k * C), dtype=x.dtype)
    for j in range(k):
        s = j - p
        dst = cols[:, :, j * C : (j + 1) * C]
        if s >= 0:
            dst[:, : L - s] = x[:, s:]
        else:
            dst[:, -s:] = x[:, : L + s]
    return cols.reshape(B * L, k * C)


class _FoldedConv:
    """Eval-mode ``conv`` (optionally followed by BN) collapsed into one affine map."""

    def __init__(self, conv: Conv1d, bn: BatchNorm1d | None = None):
        W = conv._wmat().astype(np.float64)
        b = conv.params["bias"].astype(np.float64)
        if bn is not None:
            s = bn.params["gamma"] / np.sqrt(bn.buffers["running_var"].astype(np.float64) + bn.eps)
            W = W * s
            b = (b - bn.buffers["running_mean"]) * s + bn.params["beta"]
        dtype = conv.params["weight"].dtype
        self.W, self.b, self.k, self.out = W.astype(dtype), b.astype(dtype), conv.k, conv.out_ch

    def __call__(self, x):
        B, L, _ = x.shape
        y = _im2col(x, self.k) @ self.W
        y += self.b
        return y.reshape(B, L, self.out)


class DealiasInference:
    """Fast, cache-free eval-mode evaluation of a :class:`DealiasModule`.

    Batch-norm layers are folded into the preceding convolutions, so results
    match ``module.forward(x, train=False)`` up to float rounding. The snapshot
    does not track later changes to the module's parameters.
    """

    def __init__(self, module: DealiasModule):
        ch = module.children
        self.conv_in = _FoldedConv(ch["conv_in"], ch["bn_in"])
        self.res = {
            name: (_FoldedConv(ch[name].children["conv1"], ch[name].children["bn1"]),
                   _FoldedConv(ch[name].children["conv2"], ch[name].children["bn2"]))
            for name in ("res1", "res2", "res3", "res4")
        }
        self.thr = None
        if "threshold" in ch:
            t = ch["threshold"].children
            self.thr = (_FoldedConv(t["conv1"], t["bn"]), _FoldedConv(t["conv2"]))
        self.conv_out = _FoldedConv(ch["conv_out"])
        self.dtype = module.dtype

    def _res(self, name, h):
        c1, c2 = self.res[name]
        z = c2(np.maximum(c1(h), 0))
        z += h
        return np.maximum(z, 0, out=z)

    def __call__(self, t, bypass_threshold=False):
        h = np.maximum(self.conv_in(t), 0)
        h = self._res("res2", self._res("res1", h))
        if self.thr is not None and not bypass_threshold:
            g = np.abs(h).mean(axis=1)
            z = np.maximum(self.thr[0](g[:, None, :]), 0)
            theta = (expit(self.thr[1](z)[:, 0, :]) * g)[:, None, :]
            h = np.sign(h) * np.maximum(np.abs(h) - theta, 0)
        h = self._res("res4", self._res("res3", h))
        return self.conv_out(h)

    def dealias(self, x, bypass_threshold=False):
        """Complex ``(B, n)`` in, complex ``(B, n)`` out."""
        t = complex_to_channels(x).astype(self.dtype, copy=False)
        return channels_to_complex(self(t, bypass_threshold))


def dealias_1d(x, module: DealiasModule, train=False, bypass_threshold=False, update_stats=True):
    """Apply the de-aliasing CNN to complex signals ``(B, n)``; returns ``(d, cache)``."""
    t = complex_to_channels(x).astype(module.dtype, copy=False)
    out, cache = module.forward(t, train=train, bypass_threshold=bypass_threshold, update_stats=update_stats)
    return channels_to_complex(out), cache


def _dc_weights(mask, lam):
    return np.where(mask, lam / (1.0 + lam), 1.0)


def data_consistency_1d(d, y, mask, lam):
    """Closed-form minimizer of ``||y - U F x||^2 + lam ||x - d||^2``.

    Sampled frequencies become ``(y + lam * F d) / (1 + lam)``; the others keep
    ``F d``. ``mask`` broadcasts against ``d`` (one mask or one per signal).
    """
    lam = check_nonneg(float(lam), "lambda")
    m = check_mask(mask)
    if m.shape[-1] != np.shape(d)[-1]:
        raise ValueError(f"mask length {m.shape[-1]} != signal length {np.shape(d)[-1]}")
    dh = fft1c(d)
    xh = np.where(m, (y + lam * dh) / (1.0 + lam), dh)
    return ifft1c(xh)


def data_consistency_1d_backward(gx, d, y, mask, lam):
    """Gradients of a real loss through :func:`data_consistency_1d`.

    ``gx`` is ``dL/dRe(x) + i dL/dIm(x)``; returns ``(gd, glam)`` in the same
    convention (``glam`` is a real scalar).
    """
    m = check_mask(mask)
    G = fft1c(gx)
    gd = ifft1c(_dc_weights(m, lam) * G)
    dh = fft1c(d)
    dxh_dlam = np.where(m, (dh - y) / (1.0 + lam) ** 2, 0)
    glam = float(np.sum((np.conj(G) * dxh_dlam).real))
    return gd, glam


def _mse_grad(diff, scale):
    return 2.0 * scale * diff


def training_loss(outputs, x_ref):
    """``1/(K T) * sum_k sum_t ||x_ref_t - x_t^(k)||^2`` for complex ``(T, n)`` arrays."""
    x_ref = np.asarray(x_ref)
    K = len(outputs)
    if K == 0:
        raise ValueError("no phase outputs")
    T = x_ref.shape[0] if x_ref.ndim > 1 else 1
    total = 0.0
    for x in outputs:
        if np.shape(x) != x_ref.shape:
            raise ValueError(f"output shape {np.shape(x)} != label shape {x_ref.shape}")
        diff = np.asarray(x, dtype=np.complex128) - x_ref
        total += float(np.sum(diff.real**2 + diff.imag**2))
    return total / (K * T)


@dataclass
class UnrolledModel:
    """Shared (or per-phase) de-aliasing modules plus per-phase ``lam``."""

    modules: list
    lam: np.ndarray
    normalize: bool = True
    shared: bool = True
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(cls, K=10, variant="advanced", shared=True, normalize=True, seed=0, dtype=np.float32):
        if K < 1:
            raise ValueError("K must be >= 1")
        rng = np.random.default_rng(seed)
        n_mod = 1 if shared else K
        modules = [DealiasModule(variant, rng=rng, dtype=dtype) for _ in range(n_mod)]
        return cls(modules, np.ones(K, dtype=dtype), normalize, shared, {"seed": int(seed)})

    @property
    def K(self):
        return self.lam.shape[0]

    @property
    def variant(self):
        return self.modules[0].variant

    def module(self, k):
        return self.modules[0] if self.shared else self.modules[k]

    # -- parameters ---------------------------------------------------------

    def _prefix(self, i):
        return "dealias." if self.shared else f"phase{i:02d}."

    def named_parameters(self):
        out = {}
        for i, mod in enumerate(self.modules):
            out.update({self._prefix(i) + k: v for k, v in mod.named_parameters().items()})
        out["lambda"] = self.lam
        return out

    def named_grads(self):
        out = {}
        for i, mod in enumerate(self.modules):
            out.update({self._prefix(i) + k: v for k, v in mod.named_grads().items()})
        out["lambda"] = self.lam_grad
        return out

    def state_dict(self):
        out = self.named_parameters()
        for i, mod in enumerate(self.modules):
            out.update({self._prefix(i) + k: v for k, v in mod.named_buffers().items()})
        return out

    def zero_grad(self):
        for mod in self.modules:
            mod.zero_grad()
        self.lam_grad = np.zeros_like(self.lam)

    def astype(self, dtype):
        return UnrolledModel(
            [m.astype(dtype) for m in self.modules], self.lam.astype(dtype), self.normalize, self.shared, dict(self.metadata)
        )

    # -- forward / backward -------------------------------------------------

    def forward(self, y, mask, train=False, bypass_threshold=False, keep_cache=False, update_stats=True):
        """Run all phases on ``y`` (``(B, n)`` measured spectra). Returns ``(outputs, cache)``."""
        m = check_mask(mask)
        y = np.where(m, y, 0)
        x0 = ifft1c(y)
        scale = np.ones((y.shape[0], 1)) if y.ndim > 1 else np.ones(1)
        if self.normalize:
            peak = np.abs(x0).max(axis=-1, keepdims=True)
            scale = np.where(peak > 1e-12, peak, 1.0)
        yn, x = y / scale, x0 / scale
        outputs, caches = [], []
        for k in range(self.K):
            d, c = dealias_1d(x, self.module(k), train, bypass_threshold, update_stats)
            x_new = data_consistency_1d(d, yn, m, float(self.lam[k]))
            if keep_cache:
                caches.append((c, d))
            x = x_new
            outputs.append(x * scale)
        return outputs, {"phases": caches, "scale": scale, "yn": yn, "mask": m}

    def backward(self, grads, cache):
        """Back-propagate ``grads[k] = dL/dx^(k)`` (physical scale) through all phases."""
        scale, yn, m = cache["scale"], cache["yn"], cache["mask"]
        if not hasattr(self, "lam_grad"):
            self.zero_grad()
        gx = np.zeros_like(grads[-1])
        for k in reversed(range(self.K)):
            gx = gx + grads[k] * scale
            c, d = cache["phases"][k]
            gd, glam = data_consistency_1d_backward(gx, d, yn, m, float(self.lam[k]))
            self.lam_grad[k] += glam
            proj = complex_to_channels(gd).astype(self.module(k).dtype, copy=False)
            gt = self.module(k).backward(proj, c)
            gx = channels_to_complex(gt)
        return gx / scale

    def project(self):
        np.maximum(self.lam, 0, out=self.lam)

    def set_eval_stats(self):
        """No-op hook kept for symmetry; BN uses running stats whenever ``train=False``."""

    # -- persistence --------------------------------------------------------

    def save(self, directory, config=None):
        meta = {
            "model_version": MODEL_VERSION,
            "K": int(self.K),
            "variant": self.variant,
            "shared": bool(self.shared),
            "lambda": [float(v) for v in self.lam],
            "normalization": "per-signal-max" if self.normalize else "none",
            "gap": "per-channel",
            "layout": "channels-last",
            "config": config if config is not None else self.metadata.get("config", {}),
            "seed": int(self.metadata.get("seed", 0)),
        }
        arrayio.save_checkpoint(directory, meta, self.state_dict())

    @classmethod
    def load(cls, directory):
        meta, tensors = arrayio.load_checkpoint(directory)
        if meta.get("model_version") != MODEL_VERSION:
            raise arrayio.CheckpointError(f"{directory}: unsupported model_version {meta.get('model_version')}")
        model = cls.create(
            K=meta["K"], variant=meta["variant"], shared=meta["shared"], normalize=meta["normalization"] != "none"
        )
        state = {k: v for k, v in tensors.items() if k != "lambda"}
        for i, mod in enumerate(model.modules):
            prefix = model._prefix(i)
            mod.load_state_dict({k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)})
        model.lam[...] = tensors["lambda"]
        model.metadata = {"seed": meta["seed"], "config": meta.get("config", {})}
        return model


def forward_unrolled(y, mask, model: UnrolledModel, bypass_threshold=False):
    """Eval-mode reconstruction: list of the ``K`` phase outputs."""
    y = check_complex(y, ndim=(1, 2), name="y")
    squeeze = y.ndim == 1
    Y = y[None] if squeeze else y
    outs, _ = model.forward(Y, mask, train=False, bypass_threshold=bypass_threshold)
    return [o[0] for o in outs] if squeeze else outs


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.99
    K: int = 10
    variant: str = "advanced"
    shared: bool = True
    normalize: bool = True
    seed: int = 0
    deterministic: bool = True

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        for name in ("epochs", "batch_size", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lr and lr_decay must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def _loss_grads(outputs, x_ref):
    K, T = len(outputs), x_ref.shape[0]
    return [_mse_grad(o - x_ref, 1.0 / (K * T)) for o in outputs]


def _evaluate(model, y, m, x, batch):
    total = 0.0
    for s in range(0, y.shape[0], batch):
        outs, _ = model.forward(y[s : s + batch], m[s : s + batch], train=False)
        total += training_loss(outs, x[s : s + batch]) * len(x[s : s + batch])
    return total / y.shape[0]


def train_arrays(train_data, val_data, config: TrainConfig, out_dir=None, model=None, log_path=None):
    """Train on in-memory ``(y, mask, x_ref)`` tuples; returns ``(model, history)``."""
    config.validate()
    y, m, x = train_data
    if y.shape[0] == 0:
        raise ValueError("training set is empty")
    model = model or UnrolledModel.create(config.K, config.variant, config.shared, config.normalize, config.seed)
    model.metadata["config"] = asdict(config)
    params = model.named_parameters()
    opt = Adam(params, lr=config.lr, decay=config.lr_decay)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = open(log_path or out_dir / "train_log.jsonl", "w") if (log_path or out_dir) else None
    history, best = [], math.inf
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.time()
            order = rng.permutation(y.shape[0])
            run, seen = 0.0, 0
            for s in range(0, len(order), config.batch_size):
                idx = np.sort(order[s : s + config.batch_size])
                if idx.size < 2:
                    continue  # batch norm needs at least two signals
                yb, mb, xb = y[idx], m[idx], x[idx]
                model.zero_grad()
                outs, cache = model.forward(yb, mb, train=True, keep_cache=True)
                loss = training_loss(outs, xb)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}; last good checkpoint kept")
                model.backward(_loss_grads(outs, xb), cache)
                opt.step(model.named_grads())
                model.project()
                run += loss * idx.size
                seen += idx.size
            train_loss = run / max(seen, 1)
            val_loss = _evaluate(model, *val_data, config.batch_size) if val_data is not None else float("nan")
            rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr, "seconds": time.time() - t0}
            history.append(rec)
            logger.info("epoch %d train %.5f val %.5f (%.0fs)", epoch, train_loss, val_loss, rec["seconds"])
            if log:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if out_dir:
                model.save(out_dir / f"epoch_{epoch:03d}")
                if val_loss < best or not np.isfinite(best):
                    best = val_loss
                    model.save(out_dir / "best")
            opt.end_epoch()
    finally:
        if log:
            log.close()
    return model, history


def train(manifest, config: TrainConfig, out_dir=None):
    """Train from a dataset manifest (object or path); returns ``(model, history)``."""
    from .physim import load_split

    if not isinstance(manifest, arrayio.DatasetManifest):
        manifest = arrayio.load_manifest(manifest)
    train_data = load_split(manifest, "train")
    val_data = load_split(manifest, "val") if manifest.n_val else None
    return train_arrays(train_data, val_data, config, out_dir)


class UnrolledDealiaser(BaseEstimator):
    """Estimator wrapper: ``fit`` trains the unrolled network, ``predict`` reconstructs 1D signals.

    Parameters mirror :class:`TrainConfig`. ``fit`` accepts either a dataset
    manifest (path or object) or arrays ``X = (y, mask)`` with labels ``x_ref``.
    """

    def __init__(self, K=10, variant="advanced", shared=True, normalize=True, epochs=10, batch_size=32, lr=1e-3,
                 lr_decay=0.99, seed=0, checkpoint_dir=None):
        self.K = K
        self.variant = variant
        self.shared = shared
        self.normalize = normalize
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir

    def _config(self):
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.lr_decay, self.K, self.variant, self.shared,
                           self.normalize, self.seed)

    def fit(self, X, x_ref=None, validation=None):
        if x_ref is None:
            self.model_, self.history_ = train(X, self._config(), self.checkpoint_dir)
        else:
            y, mask = X
            y = check_complex(y, ndim=2, name="y")
            mask = np.broadcast_to(check_mask(mask), y.shape)
            data = (y, mask, check_complex(x_ref, ndim=2, name="x_ref"))
            self.model_, self.history_ = train_arrays(data, validation, self._config(), self.checkpoint_dir)
        return self

    @classmethod
    def from_checkpoint(cls, directory):
        model = UnrolledModel.load(directory)
        cfg = model.metadata.get("config", {})
        est = cls(**{k: cfg[k] for k in ("epochs", "batch_size", "lr", "lr_decay", "seed") if k in cfg})
        est.set_params(K=model.K, variant=model.variant, shared=model.shared, normalize=model.normalize)
        est.model_, est.history_ = model, []
        return est

    def predict(self, y, mask, all_phases=False):
        check_is_fitted(self, "model_")
        outs = forward_unrolled(y, mask, self.model_)
        return outs if all_phases else outs[-1]

    def score(self, X, x_ref):
        """Negative phase-averaged loss (higher is better)."""
        y, mask = X
        return -training_loss(self.predict(y, mask, all_phases=True), x_ref)
