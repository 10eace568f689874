"""Layers with explicit forward and backward passes.

Activations are channels-last, batch-first: (N, H, W, C) for feature maps
and (N, F) for vectors. Each layer caches what its backward pass needs
during ``forward`` and writes parameter gradients into ``self.grads``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    kind = "Layer"

    def __init__(self, name: str | None = None):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None
        self.init_gain = 2.0  # variance gain of the weight init; 2 suits a following ReLU
        self._cache = None

    def build(self, in_shape: tuple[int, ...], gen: np.random.Generator, dtype=np.float32) -> tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(self._build(self.in_shape, gen, np.dtype(dtype)))
        return self.out_shape

    def _build(self, in_shape, gen, dtype):
        return in_shape

    def _check_input(self, x: np.ndarray) -> None:
        if self.in_shape is not None and tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"{self.label}: expected input shape (N, {', '.join(map(str, self.in_shape))}), got {x.shape}")

    def _pop_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.label}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    @property
    def label(self) -> str:
        return self.name or self.kind

    def config(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _uniform_init(gen: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    """Uniform weights with variance gain / fan_in (He init for gain 2, LeCun for gain 1)."""
    bound = math.sqrt(3.0 * gain / fan_in)
    return gen.uniform(-bound, bound, shape).astype(dtype)


# ---------------------------------------------------------------- conv kernels


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def tconv_out_size(n: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    return (n - 1) * stride + kernel - 2 * padding + output_padding


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, Hp, Wp, C) -> (N*ho*wo, k*k*C), patch entries ordered (ki, kj, c)."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    # win: (N, ho, wo, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * xp.shape[3])


def _scatter(y: np.ndarray, w: np.ndarray, s: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of the im2col product: spread each y[n, i, j] back over its k x k window.

    ``w`` has shape (k, k, C_out_of_scatter, C_y); returns (N, H, W, C_out_of_scatter).
    """
    n, ho, wo, _ = y.shape
    k = w.shape[0]
    out = np.zeros((n, out_hw[0], out_hw[1], w.shape[2]), dtype=np.result_type(y, w))
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += y @ w[i, j].T
    return out


class Conv2D(Layer):
    """Zero-padded cross-correlation; weight shape (k, k, C_in, filters)."""

    kind = "Conv2D"

    def __init__(self, filters: int, kernel: int, stride: int = 1, padding: int = 0, name: str | None = None):
        super().__init__(name)
        self.filters, self.kernel, self.stride, self.padding = filters, kernel, stride, padding

    def _build(self, in_shape, gen, dtype):
        h, w, c = in_shape
        k, p = self.kernel, self.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise ValueError(f"{self.label}: kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        self.params["weight"] = _uniform_init(gen, (k, k, c, self.filters), k * k * c, self.init_gain, dtype)
        self.params["bias"] = np.zeros(self.filters, dtype)
        return (conv_out_size(h, k, self.stride, p), conv_out_size(w, k, self.stride, p), self.filters)

    def config(self):
        return {**super().config(), "filters": self.filters, "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def forward(self, x, training=False):
        self._check_input(x)
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        ho, wo, _ = self.out_shape
        cols = _im2col(xp, k, s, ho, wo)
        w = self.params["weight"]
        y = cols @ w.reshape(-1, self.filters) + self.params["bias"]
        self._cache = (cols, xp.shape)
        return y.reshape(x.shape[0], ho, wo, self.filters)

    def backward(self, dy):
        cols, xp_shape = self._pop_cache()
        w = self.params["weight"]
        p = self.padding
        dy2 = dy.reshape(-1, self.filters)
        self.grads["weight"] = (cols.T @ dy2).reshape(w.shape)
        self.grads["bias"] = dy2.sum(axis=0)
        dxp = _scatter(dy, w, self.stride, xp_shape[1:3])
        h, wd, _ = self.in_shape
        return dxp[:, p : p + h, p : p + wd, :]


class TConv2D(Layer):
    """Transposed convolution: the exact adjoint of :class:`Conv2D` with the same
    kernel, stride and padding. Weight shape (k, k, filters, C_in).
    """

    kind = "TConv2D"

    def __init__(self, filters: int, kernel: int, stride: int = 1, padding: int = 0, output_padding: int = 0, name: str | None = None):
        super().__init__(name)
        if not 0 <= output_padding < max(stride, 1):
            raise ValueError(f"output_padding must be in [0, stride), got {output_padding}")
        self.filters, self.kernel, self.stride = filters, kernel, stride
        self.padding, self.output_padding = padding, output_padding

    def _build(self, in_shape, gen, dtype):
        h, w, c = in_shape
        k = self.kernel
        self.params["weight"] = _uniform_init(gen, (k, k, self.filters, c), k * k * c, self.init_gain, dtype)
        self.params["bias"] = np.zeros(self.filters, dtype)
        args = (k, self.stride, self.padding, self.output_padding)
        ho, wo = tconv_out_size(h, *args), tconv_out_size(w, *args)
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.label}: non-positive output size {ho}x{wo}")
        return (ho, wo, self.filters)

    def config(self):
        return {
            **super().config(),
            "filters": self.filters,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "output_padding": self.output_padding,
        }

    def _full_size(self) -> tuple[int, int]:
        h, w, _ = self.in_shape
        k, s, op = self.kernel, self.stride, self.output_padding
        return (h - 1) * s + k + op, (w - 1) * s + k + op

    def forward(self, x, training=False):
        self._check_input(x)
        full = _scatter(x, self.params["weight"], self.stride, self._full_size())
        p = self.padding
        ho, wo, _ = self.out_shape
        self._cache = x
        return full[:, p : p + ho, p : p + wo, :] + self.params["bias"]

    def backward(self, dy):
        x = self._pop_cache()
        p, k, s = self.padding, self.kernel, self.stride
        ho, wo, _ = self.out_shape
        fh, fw = self._full_size()
        dfull = np.zeros((dy.shape[0], fh, fw, self.filters), dtype=dy.dtype)
        dfull[:, p : p + ho, p : p + wo, :] = dy
        h, w, c = self.in_shape
        cols = _im2col(dfull, k, s, h, w)
        wt = self.params["weight"]
        x2 = x.reshape(-1, c)
        self.grads["weight"] = (cols.T @ x2).reshape(wt.shape)
        self.grads["bias"] = dy.sum(axis=(0, 1, 2))
        return (cols @ wt.reshape(-1, c)).reshape(x.shape)


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def __init__(self, pool: int = 2, stride: int | None = None, name: str | None = None):
        super().__init__(name)
        self.pool = pool
        self.stride = stride or pool

    def _build(self, in_shape, gen, dtype):
        h, w, c = in_shape
        if self.pool > min(h, w):
            raise ValueError(f"{self.label}: pool {self.pool} larger than input {h}x{w}")
        return (conv_out_size(h, self.pool, self.stride, 0), conv_out_size(w, self.pool, self.stride, 0), c)

    def config(self):
        return {**super().config(), "pool": self.pool, "stride": self.stride}

    def forward(self, x, training=False):
        self._check_input(x)
        k, s = self.pool, self.stride
        ho, wo, c = self.out_shape
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        flat = win.reshape(x.shape[0], ho, wo, c, k * k)
        arg = flat.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        arg, shape = self._pop_cache()
        k, s = self.pool, self.stride
        ho, wo, _ = self.out_shape
        dx = np.zeros(shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += np.where(hit, dy, 0)
        return dx


class Dense(Layer):
    """y = x W^T + b with W of shape (units, inputs)."""

    kind = "Dense"

    def __init__(self, units: int, name: str | None = None):
        super().__init__(name)
        self.units = units

    def _build(self, in_shape, gen, dtype):
        if len(in_shape) != 1:
            raise ValueError(f"{self.label}: expects flat input, got {in_shape}")
        n = in_shape[0]
        self.params["weight"] = _uniform_init(gen, (self.units, n), n, self.init_gain, dtype)
        self.params["bias"] = np.zeros(self.units, dtype)
        return (self.units,)

    def config(self):
        return {**super().config(), "units": self.units}

    def forward(self, x, training=False):
        self._check_input(x)
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._pop_cache()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._pop_cache(), dy, 0).astype(dy.dtype, copy=False)


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, slope: float = 0.01, name: str | None = None):
        super().__init__(name)
        self.slope = slope

    def config(self):
        return {**super().config(), "slope": self.slope}

    def forward(self, x, training=False):
        pos = x >= 0
        self._cache = pos
        return np.where(pos, x, x * x.dtype.type(self.slope))

    def backward(self, dy):
        return np.where(self._pop_cache(), dy, dy * dy.dtype.type(self.slope))


class ClippedReLU(Layer):
    kind = "ClippedReLU"

    def __init__(self, lo: float = 0.0, hi: float = 1.0, name: str | None = None):
        super().__init__(name)
        self.lo, self.hi = lo, hi

    def config(self):
        return {**super().config(), "lo": self.lo, "hi": self.hi}

    def forward(self, x, training=False):
        self._cache = (x > self.lo) & (x < self.hi)
        return np.clip(x, self.lo, self.hi).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._pop_cache(), dy, 0).astype(dy.dtype, copy=False)


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis except the last."""

    kind = "BatchNorm"

    def __init__(self, momentum: float = 0.1, eps: float = 1e-5, name: str | None = None):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps

    def _build(self, in_shape, gen, dtype):
        c = in_shape[-1]
        self.params["gamma"] = np.ones(c, dtype)
        self.params["beta"] = np.zeros(c, dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype)
        self.buffers["running_var"] = np.ones(c, dtype)
        return in_shape

    def config(self):
        return {**super().config(), "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, training=False):
        self._check_input(x)
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            if x.shape[0] < 2:
                raise ValueError(f"{self.label}: training mode needs a batch of at least 2, got {x.shape[0]}")
            x64 = x.astype(np.float64)
            mean = x64.mean(axis=axes)
            var = x64.var(axis=axes)
            m = x.size // x.shape[-1]
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - mom) * rm + mom * mean
            rv[...] = (1 - mom) * rv + mom * var * m / (m - 1)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = ((x64 - mean) * inv_std).astype(x.dtype)
            self._cache = (xhat, inv_std.astype(x.dtype))
        else:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
            xhat = ((x - self.buffers["running_mean"]) * inv_std).astype(x.dtype)
            self._cache = None  # inference mode has no backward
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std = self._pop_cache()
        axes = tuple(range(dy.ndim - 1))
        m = dy.size // dy.shape[-1]
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        s1 = dxhat.astype(np.float64).sum(axis=axes)
        s2 = (dxhat * xhat).astype(np.float64).sum(axis=axes)
        return ((inv_std / m) * (m * dxhat - s1 - xhat * s2)).astype(dy.dtype)


class Flatten(Layer):
    kind = "Flatten"

    def _build(self, in_shape, gen, dtype):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False):
        self._check_input(x)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._pop_cache())


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, target: tuple[int, ...], name: str | None = None):
        super().__init__(name)
        self.target = tuple(int(t) for t in target)

    def _build(self, in_shape, gen, dtype):
        if int(np.prod(in_shape)) != int(np.prod(self.target)):
            raise ValueError(f"{self.label}: cannot reshape {in_shape} to {self.target}")
        return self.target

    def config(self):
        return {**super().config(), "target": list(self.target)}

    def forward(self, x, training=False):
        self._check_input(x)
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, dy):
        return dy.reshape(self._pop_cache())


LAYER_TYPES = {
    cls.kind: cls
    for cls in (Conv2D, TConv2D, MaxPool2D, Dense, ReLU, LeakyReLU, ClippedReLU, BatchNorm, Flatten, Reshape)
}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    if "target" in cfg:
        cfg["target"] = tuple(cfg["target"])
    return LAYER_TYPES[kind](**cfg)
