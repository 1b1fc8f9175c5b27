"""Small 1D convolutional layers with hand-written reverse-mode gradients.

Activations are laid out channels-last, ``(batch, length, channels)``, so each
convolution is a single matrix product. Every layer follows the same protocol::

    y, cache = layer.forward(x, train=False)
    dx = layer.backward(dy, cache)        # accumulates into layer.grads

Layers compute in the dtype of their parameters; ``module.astype(np.float64)``
gives the double-precision copy used for gradient checking.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "Module",
    "Conv1d",
    "BatchNorm1d",
    "ReLU",
    "ResBlock",
    "AdaptiveThreshold",
    "Kink",
    "gap_abs",
    "soft_threshold",
    "Adam",
    "GradcheckReport",
    "finite_diff_gradcheck",
]


class Kink:
    """Boolean activation pattern recorded in a cache, used to detect kink crossings."""

    __slots__ = ("pattern",)

    def __init__(self, pattern):
        self.pattern = pattern


def _collect_kinks(cache, out):
    if isinstance(cache, Kink):
        out.append(cache.pattern)
    elif isinstance(cache, dict):
        for v in cache.values():
            _collect_kinks(v, out)
    elif isinstance(cache, (list, tuple)):
        for v in cache:
            _collect_kinks(v, out)
    return out


class Module:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.children = {}

    def add(self, name, module):
        self.children[name] = module
        return module

    def _walk(self, attr, prefix=""):
        for k, v in getattr(self, attr).items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child._walk(attr, f"{prefix}{name}.")

    def named_parameters(self):
        return dict(self._walk("params"))

    def named_grads(self):
        return dict(self._walk("grads"))

    def named_buffers(self):
        return dict(self._walk("buffers"))

    def state_dict(self):
        return {**self.named_parameters(), **self.named_buffers()}

    def load_state_dict(self, state, strict=True):
        own = {**self.named_parameters(), **self.named_buffers()}
        missing = set(own) - set(state)
        if strict and (missing or set(state) - set(own)):
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(set(state) - set(own))}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def zero_grad(self):
        for g in self._walk("grads"):
            g[1].fill(0)

    def astype(self, dtype):
        clone = copy.deepcopy(self)
        for mod in clone.modules():
            for d in (mod.params, mod.grads, mod.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return clone

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    @property
    def dtype(self):
        p = next(iter(self.named_parameters().values()), None)
        return np.float32 if p is None else p.dtype

    def _param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value


class Conv1d(Module):
    """Same-length zero-padded cross-correlation with bias (odd kernel size)."""

    def __init__(self, in_ch, out_ch, k=3, rng=None, dtype=np.float32):
        super().__init__()
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        bound = np.sqrt(6.0 / (in_ch * k))
        self._param("weight", rng.uniform(-bound, bound, (out_ch, in_ch, k)).astype(dtype))
        self._param("bias", np.zeros(out_ch, dtype=dtype))

    def _wmat(self):
        # row index j * in_ch + c holds weight[:, c, j]
        return self.params["weight"].transpose(2, 1, 0).reshape(self.k * self.in_ch, self.out_ch)

    def forward(self, x, train=False, **_):
        B, L, C = x.shape
        if C != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {C}")
        k, p = self.k, self.k // 2
        if k == 1:
            cols = x.reshape(B * L, C)
        else:
            cols = np.zeros((B, L, k * C), dtype=x.dtype)
            for j in range(k):
                s = j - p  # slot j reads x[t + s]
                dst = cols[:, :, j * C : (j + 1) * C]
                if s >= 0:
                    dst[:, : L - s] = x[:, s:]
                else:
                    dst[:, -s:] = x[:, : L + s]
            cols = cols.reshape(B * L, k * C)
        y = cols @ self._wmat()
        y += self.params["bias"]
        return y.reshape(B, L, self.out_ch), (cols, x.shape)

    def backward(self, dy, cache):
        cols, (B, L, C) = cache
        g = dy.reshape(B * L, self.out_ch)
        gw = cols.T @ g
        self.grads["weight"] += gw.reshape(self.k, C, self.out_ch).transpose(2, 1, 0)
        self.grads["bias"] += g.sum(axis=0)
        dcols = (g @ self._wmat().T).reshape(B, L, self.k * C)
        if self.k == 1:
            return dcols
        p = self.k // 2
        dx = dcols[:, :, p * C : (p + 1) * C].copy()
        for j in range(self.k):
            s = j - p
            src = dcols[:, :, j * C : (j + 1) * C]
            if s > 0:
                dx[:, s:] += src[:, : L - s]
            elif s < 0:
                dx[:, : L + s] += src[:, -s:]
        return dx


class BatchNorm1d(Module):
    """Per-channel batch normalization over (batch, length).

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self._param("gamma", np.ones(channels, dtype=dtype))
        self._param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False, update_stats=True, **_):
        C = x.shape[-1]
        flat = x.reshape(-1, C)
        n = flat.shape[0]
        if train:
            if n < 2:
                raise ValueError("batch norm in train mode needs more than one element per channel")
            mean = flat.mean(axis=0)
            xc = flat - mean
            var = np.einsum("ij,ij->j", xc, xc) / n
            if update_stats:
                m = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm *= m
                rm += (1 - m) * mean
                rv *= m
                rv += (1 - m) * var * (n / (n - 1))
        else:
            xc = flat - self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        y = xc * (self.params["gamma"] * inv)
        y += self.params["beta"]
        return y.reshape(x.shape), (xc, inv, train, x.shape)

    def backward(self, dy, cache):
        xc, inv, train, shape = cache
        g = dy.reshape(xc.shape)
        sgx = np.einsum("ij,ij->j", g, xc) * inv
        sg = g.sum(axis=0)
        self.grads["gamma"] += sgx
        self.grads["beta"] += sg
        scale = self.params["gamma"] * inv
        if not train:
            return (g * scale).reshape(shape)
        n = g.shape[0]
        dx = g - sg / n
        dx -= xc * (sgx * inv / n)
        dx *= scale
        return dx.reshape(shape)


class ReLU(Module):
    def forward(self, x, train=False, **_):
        mask = x > 0
        return np.maximum(x, 0), Kink(mask)

    def backward(self, dy, cache):
        return dy * cache.pattern


class _Seq(Module):
    """Run named children in order."""

    order: tuple = ()

    def forward(self, x, train=False, **kw):
        caches = []
        for name in self.order:
            x, c = self.children[name].forward(x, train=train, **kw)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for name, c in zip(reversed(self.order), reversed(caches)):
            dy = self.children[name].backward(dy, c)
        return dy


class ResBlock(Module):
    """``relu(x + bn2(conv2(relu(bn1(conv1(x))))))`` with 3-tap convolutions.

    With ``zero_init_residual`` the second BN scale starts at 0, so the block
    starts out as ``relu(x)``; this makes deep unrolled stacks trainable from
    scratch.
    """

    def __init__(self, channels=64, rng=None, dtype=np.float32, zero_init_residual=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.add("conv1", Conv1d(channels, channels, 3, rng, dtype))
        self.add("bn1", BatchNorm1d(channels, dtype=dtype))
        self.add("conv2", Conv1d(channels, channels, 3, rng, dtype))
        self.add("bn2", BatchNorm1d(channels, dtype=dtype))
        if zero_init_residual:
            self.children["bn2"].params["gamma"][:] = 0
        self._relu = ReLU()

    def forward(self, x, train=False, **kw):
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        ch = self.children
        h, c1 = ch["conv1"].forward(x, train)
        h, b1 = ch["bn1"].forward(h, train, **kw)
        h, r1 = self._relu.forward(h)
        h, c2 = ch["conv2"].forward(h, train)
        h, b2 = ch["bn2"].forward(h, train, **kw)
        h += x
        out, r2 = self._relu.forward(h)
        return out, (c1, b1, r1, c2, b2, r2)

    def backward(self, dy, cache):
        c1, b1, r1, c2, b2, r2 = cache
        ch = self.children
        dh = self._relu.backward(dy, r2)
        dx = dh.copy()
        dh = ch["bn2"].backward(dh, b2)
        dh = ch["conv2"].backward(dh, c2)
        dh = self._relu.backward(dh, r1)
        dh = ch["bn1"].backward(dh, b1)
        dx += ch["conv1"].backward(dh, c1)
        return dx


def gap_abs(r):
    """Global average of ``|r|`` over the length axis: ``(B, L, C) -> (B, C)``."""
    return np.abs(r).mean(axis=1)


def soft_threshold(x, theta):
    """``sign(x) * max(|x| - theta, 0)``; ``theta`` broadcasts against ``x``."""
    theta = np.asarray(theta)
    if np.any(theta < 0):
        raise ValueError("soft-threshold requires theta >= 0")
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0)


class AdaptiveThreshold(Module):
    """Data-dependent soft-thresholding of a feature map.

    ``g = GAP(|r|)`` per channel feeds a two-layer 1x1 subnetwork ending in a
    sigmoid, giving scales ``alpha`` in (0, 1); the threshold is ``alpha * g``.
    """

    def __init__(self, channels=64, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.add("conv1", Conv1d(channels, channels, 1, rng, dtype))
        self.add("bn", BatchNorm1d(channels, dtype=dtype))
        self.add("conv2", Conv1d(channels, channels, 1, rng, dtype))
        self._relu = ReLU()

    def thresholds(self, r, train=False, **kw):
        B, L, C = r.shape
        if C != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {C}")
        g = gap_abs(r)
        ch = self.children
        z, c1 = ch["conv1"].forward(g[:, None, :], train)
        z, b = ch["bn"].forward(z, train, **kw)
        z, rl = self._relu.forward(z)
        z, c2 = ch["conv2"].forward(z, train)
        alpha = expit(z[:, 0, :])
        return alpha * g, (g, alpha, c1, b, rl, c2)

    def forward(self, r, train=False, **kw):
        theta, sub = self.thresholds(r, train, **kw)
        mag = np.abs(r)
        active = mag > theta[:, None, :]
        sgn = np.sign(r)
        out = sgn * (mag - theta[:, None, :])
        out *= active
        return out, (sub, Kink(active), Kink(r > 0), sgn, active, theta)

    def backward(self, dy, cache):
        (g, alpha, c1, b, rl, c2), _, _, sgn, active, theta = cache
        L = dy.shape[1]
        da = dy * active
        dtheta = -np.einsum("blc,blc->bc", da, sgn)
        dalpha = dtheta * g
        dg = dtheta * alpha
        dz = (dalpha * alpha * (1 - alpha))[:, None, :]
        ch = self.children
        dz = ch["conv2"].backward(dz, c2)
        dz = self._relu.backward(dz, rl)
        dz = ch["bn"].backward(dz, b)
        dg += ch["conv1"].backward(dz, c1)[:, 0, :]
        da += sgn * (dg / L)[:, None, :]
        return da


# ------------------------------------------------------------------ Adam


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.99):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.decay = lr, beta1, beta2, eps, decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k}")
            if g.shape != self.params[k].shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {self.params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {k}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.params[k] -= (self.lr * upd).astype(self.params[k].dtype)

    def end_epoch(self):
        self.lr *= self.decay

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "m": self.m, "v": self.v}


# ------------------------------------------------------------- gradcheck


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    n_excluded: int
    errors: dict

    def __str__(self):
        return (
            f"max rel err {self.max_rel_error:.3e} at {self.worst} "
            f"({self.n_checked} checked, {self.n_excluded} excluded near kinks)"
        )


def finite_diff_gradcheck(module, x, step=1e-5, n_per_tensor=12, train=False, seed=0, floor_frac=1e-6, stencil=2,
                          reference_dtype=None):
    """Finite differences against analytic gradients of ``sum(w * module(x))``.

    ``w`` is a fixed random weighting of the output. A probe is excluded when
    any perturbed evaluation changes a recorded activation pattern (ReLU,
    shrinkage or sign of the thresholded input), i.e. when the segment crosses
    a kink. Batch norm never updates running statistics during the check.

    The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor = floor_frac * max |analytic gradient|`` over all checked tensors;
    exactly-zero gradients (e.g. a bias feeding batch norm) are otherwise
    dominated by roundoff. ``stencil=4`` selects the fourth-order five-point
    formula.

    With ``reference_dtype`` set (e.g. ``np.float64`` for a float32 module),
    analytic gradients come from ``module`` while the finite differences are
    taken on a copy cast to ``reference_dtype`` at the same point, so the
    numerical oracle is not limited by the module's own precision.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    offsets = (1, -1) if stencil == 2 else (1, -1, 2, -2)
    rng = np.random.default_rng(seed)
    out, cache = module.forward(x, train=train, update_stats=False)
    w = rng.standard_normal(out.shape)
    module.zero_grad()
    dx = module.backward(w.astype(out.dtype), cache)
    analytic = dict(module.named_grads())
    analytic["<input>"] = dx

    probe = module if reference_dtype is None else module.astype(reference_dtype)
    xr = x if reference_dtype is None else x.astype(reference_dtype)
    base_kinks = _collect_kinks(probe.forward(xr, train=train, update_stats=False)[1], [])

    def evaluate():
        o, c = probe.forward(xr, train=train, update_stats=False)
        same = all(np.array_equal(a, b) for a, b in zip(_collect_kinks(c, []), base_kinks))
        return float(np.sum(o.astype(np.float64) * w)), same

    targets = dict(probe.named_parameters())
    targets["<input>"] = xr
    scale = floor_frac * max(float(np.abs(g).max()) for g in analytic.values())
    errors, worst, worst_err, checked, excluded = {}, "", 0.0, 0, 0
    for name, arr in targets.items():
        grad = analytic[name].reshape(-1)
        idx = rng.choice(arr.size, size=min(n_per_tensor, arr.size), replace=False)
        flat = arr.reshape(-1)
        tensor_err = 0.0
        for i in idx:
            orig = flat[i].copy()
            vals, ok = {}, True
            for mult in offsets:
                flat[i] = orig + mult * step
                vals[mult], same = evaluate()
                ok = ok and same
            flat[i] = orig
            if not ok:
                excluded += 1
                continue
            if stencil == 2:
                num = (vals[1] - vals[-1]) / (2 * step)
            else:
                num = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * step)
            ana = float(grad[i])
            err = abs(num - ana) / max(abs(num), abs(ana), scale)
            tensor_err = max(tensor_err, err)
            checked += 1
        errors[name] = tensor_err
        if tensor_err >= worst_err:
            worst, worst_err = name, tensor_err
    return GradcheckReport(worst_err, worst, checked, excluded, errors)
