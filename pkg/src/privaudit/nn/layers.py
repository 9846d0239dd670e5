"""Layer specifications and their forward/backward implementations.

Arrays are float64, batch-first.  Images are channels-last ``(N, H, W, C)``.
Convolutions are stride 1 with "same" zero padding; average pooling uses
stride equal to the pool size, so every architecture's shape flow is fixed
at construction time.

Each built layer exposes ``forward(x, params) -> (y, cache)`` and
``backward(dy, cache, params, per_example) -> (dx, dparams)``.  With
``per_example=True`` the parameter gradients keep the batch axis in front
(one gradient per example); ``dx`` always keeps it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from privaudit.errors import ConfigError

ACTIVATIONS = ("relu", "sigmoid", "identity")


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "identity"


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel_h: int
    kernel_w: int
    activation: str = "identity"


@dataclass(frozen=True)
class AvgPool2D:
    pool_h: int
    pool_w: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Embedding:
    vocab_size: int
    embed_dim: int


@dataclass(frozen=True)
class GlobalAvgPool1D:
    pass


LayerSpec = Union[Dense, Conv2D, AvgPool2D, Flatten, Embedding, GlobalAvgPool1D]

_KIND_NAMES = {
    Dense: "dense",
    Conv2D: "conv2d",
    AvgPool2D: "avg_pool2d",
    Flatten: "flatten",
    Embedding: "embedding",
    GlobalAvgPool1D: "global_avg_pool1d",
}


def layer_spec_to_dict(spec: LayerSpec) -> dict:
    """JSON-friendly encoding: ``{"kind": ..., <parameters>}``."""
    d = {"kind": _KIND_NAMES[type(spec)]}
    for field in spec.__dataclass_fields__:
        d[field] = getattr(spec, field)
    return d


def layer_spec_from_dict(d: dict) -> LayerSpec:
    by_name = {name: cls for cls, name in _KIND_NAMES.items()}
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in by_name:
        raise ConfigError(f"unknown layer kind {kind!r}")
    cls = by_name[kind]
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"layer kind {kind!r} got unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"layer kind {kind!r}: {exc}") from exc


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d(activation)/dz, expressed from preactivation z and output a."""
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


class BuiltLayer:
    """A layer spec resolved against a concrete per-example input shape."""

    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    #: indices into the params list that the L2 penalty / weight decay touch
    decayed_slots: tuple[int, ...] = ()

    def param_shapes(self) -> list[tuple[int, ...]]:
        return []

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray, params: list[np.ndarray]):
        raise NotImplementedError

    def backward(self, dy, cache, params, per_example: bool):
        raise NotImplementedError


def _glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _DenseLayer(BuiltLayer):
    decayed_slots = (0,)

    def __init__(self, spec: Dense, in_shape):
        if spec.units < 1:
            raise ConfigError(f"dense units must be >= 1, got {spec.units}")
        if spec.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {spec.activation!r}")
        if len(in_shape) != 1:
            raise ConfigError(
                f"dense layer needs a flat input, got shape {in_shape} "
                "(insert a flatten or pooling layer first)"
            )
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (spec.units,)

    def param_shapes(self):
        return [(self.spec.units, self.in_shape[0]), (self.spec.units,)]

    def init_params(self, rng):
        m, = self.in_shape
        n = self.spec.units
        w = _glorot_uniform(rng, (n, m), fan_in=m, fan_out=n)
        return [w, np.zeros(n)]

    def forward(self, x, params):
        w, b = params
        z = x @ w.T + b
        a = _activate(z, self.spec.activation)
        return a, (x, z, a)

    def backward(self, dy, cache, params, per_example):
        w, _ = params
        x, z, a = cache
        dz = dy * _activation_grad(self.spec.activation, z, a)
        dx = dz @ w
        if per_example:
            dw = np.einsum("no,ni->noi", dz, x)
            db = dz
        else:
            dw = dz.T @ x
            db = dz.sum(axis=0)
        return dx, [dw, db]


class _Conv2DLayer(BuiltLayer):
    decayed_slots = (0,)

    def __init__(self, spec: Conv2D, in_shape):
        if spec.filters < 1 or spec.kernel_h < 1 or spec.kernel_w < 1:
            raise ConfigError(f"conv2d sizes must be >= 1, got {spec}")
        if spec.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {spec.activation!r}")
        if len(in_shape) != 3:
            raise ConfigError(f"conv2d needs (H, W, C) input, got shape {in_shape}")
        self.spec = spec
        self.in_shape = in_shape
        h, w, _ = in_shape
        if spec.kernel_h > h or spec.kernel_w > w:
            raise ConfigError(f"conv2d kernel {spec.kernel_h}x{spec.kernel_w} larger than input {h}x{w}")
        self.out_shape = (h, w, spec.filters)
        # "same" padding for stride 1; extra pixel goes after, as in TF
        self._pad_top = (spec.kernel_h - 1) // 2
        self._pad_left = (spec.kernel_w - 1) // 2

    def init_params(self, rng):
        kh, kw = self.spec.kernel_h, self.spec.kernel_w
        cin = self.in_shape[2]
        f = self.spec.filters
        w = _glorot_uniform(rng, (kh, kw, cin, f), fan_in=kh * kw * cin, fan_out=kh * kw * f)
        return [w, np.zeros(f)]

    def _pad(self, x):
        kh, kw = self.spec.kernel_h, self.spec.kernel_w
        pt, pl = self._pad_top, self._pad_left
        return np.pad(x, ((0, 0), (pt, kh - 1 - pt), (pl, kw - 1 - pl), (0, 0)))

    def _im2col(self, x):
        """(N, H, W, C) -> (N, H, W, kh*kw*C) patch matrix (padded, stride 1)."""
        kh, kw = self.spec.kernel_h, self.spec.kernel_w
        xp = self._pad(x)
        # windows: (N, H, W, C, kh, kw) -> (N, H, W, kh, kw, C)
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = np.ascontiguousarray(np.moveaxis(win, 3, 5))
        n, h, w = win.shape[:3]
        return win.reshape(n, h, w, kh * kw * self.in_shape[2])

    def forward(self, x, params):
        w, b = params
        cols = self._im2col(x)
        f = self.spec.filters
        z = cols @ w.reshape(-1, f) + b
        a = _activate(z, self.spec.activation)
        return a, (cols, z, a)

    def backward(self, dy, cache, params, per_example):
        w, _ = params
        cols, z, a = cache
        kh, kw = self.spec.kernel_h, self.spec.kernel_w
        h, wd, cin = self.in_shape
        f = self.spec.filters
        n = dy.shape[0]

        dz = dy * _activation_grad(self.spec.activation, z, a)
        dz2 = dz.reshape(n, h * wd, f)
        cols2 = cols.reshape(n, h * wd, kh * kw * cin)
        if per_example:
            dw = np.einsum("npk,npf->nkf", cols2, dz2).reshape(n, kh, kw, cin, f)
            db = dz2.sum(axis=1)
        else:
            dw = np.einsum("npk,npf->kf", cols2, dz2).reshape(kh, kw, cin, f)
            db = dz2.sum(axis=(0, 1))

        # scatter column gradients back onto the padded input
        dcols = (dz2 @ w.reshape(-1, f).T).reshape(n, h, wd, kh, kw, cin)
        pt, pl = self._pad_top, self._pad_left
        dxp = np.zeros((n, h + kh - 1, wd + kw - 1, cin))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt : pt + h, pl : pl + wd, :]
        return dx, [dw, db]


class _AvgPool2DLayer(BuiltLayer):
    def __init__(self, spec: AvgPool2D, in_shape):
        if spec.pool_h < 1 or spec.pool_w < 1:
            raise ConfigError(f"pool sizes must be >= 1, got {spec}")
        if len(in_shape) != 3:
            raise ConfigError(f"avg_pool2d needs (H, W, C) input, got shape {in_shape}")
        h, w, c = in_shape
        if h % spec.pool_h or w % spec.pool_w:
            raise ConfigError(
                f"avg_pool2d {spec.pool_h}x{spec.pool_w} does not evenly divide input {h}x{w}"
            )
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (h // spec.pool_h, w // spec.pool_w, c)

    def forward(self, x, params):
        ph, pw = self.spec.pool_h, self.spec.pool_w
        n = x.shape[0]
        ho, wo, c = self.out_shape
        y = x.reshape(n, ho, ph, wo, pw, c).mean(axis=(2, 4))
        return y, None

    def backward(self, dy, cache, params, per_example):
        ph, pw = self.spec.pool_h, self.spec.pool_w
        n = dy.shape[0]
        ho, wo, c = self.out_shape
        h, w, _ = self.in_shape
        dx = np.broadcast_to(
            dy[:, :, None, :, None, :] / (ph * pw), (n, ho, ph, wo, pw, c)
        ).reshape(n, h, w, c)
        return dx, []


class _FlattenLayer(BuiltLayer):
    def __init__(self, spec: Flatten, in_shape):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, cache, params, per_example):
        return dy.reshape((dy.shape[0],) + self.in_shape), []


class _EmbeddingLayer(BuiltLayer):
    # the table is excluded from L2 / weight decay
    def __init__(self, spec: Embedding, in_shape):
        if spec.vocab_size < 1 or spec.embed_dim < 1:
            raise ConfigError(f"embedding sizes must be >= 1, got {spec}")
        if len(in_shape) != 1:
            raise ConfigError(f"embedding needs (sequence_length,) input, got shape {in_shape}")
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (in_shape[0], spec.embed_dim)

    def init_params(self, rng):
        v, d = self.spec.vocab_size, self.spec.embed_dim
        table = _glorot_uniform(rng, (v, d), fan_in=v, fan_out=d)
        table[0] = 0.0  # padding row
        return [table]

    def forward(self, x, params):
        (table,) = params
        idx = x.astype(np.int64)
        if idx.min() < 0 or idx.max() >= self.spec.vocab_size:
            raise ConfigError(
                f"token index out of range [0, {self.spec.vocab_size}) in embedding input"
            )
        return table[idx], idx

    def backward(self, dy, cache, params, per_example):
        idx = cache
        n = idx.shape[0]
        v, d = self.spec.vocab_size, self.spec.embed_dim
        if per_example:
            dtable = np.zeros((n, v, d))
            np.add.at(dtable, (np.arange(n)[:, None], idx), dy)
        else:
            dtable = np.zeros((v, d))
            np.add.at(dtable, idx.reshape(-1), dy.reshape(-1, d))
        return np.zeros((n,) + self.in_shape), [dtable]


class _GlobalAvgPool1DLayer(BuiltLayer):
    def __init__(self, spec: GlobalAvgPool1D, in_shape):
        if len(in_shape) != 2:
            raise ConfigError(f"global_avg_pool1d needs (L, D) input, got shape {in_shape}")
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (in_shape[1],)

    def forward(self, x, params):
        return x.mean(axis=1), None

    def backward(self, dy, cache, params, per_example):
        length = self.in_shape[0]
        dx = np.broadcast_to(dy[:, None, :] / length, (dy.shape[0],) + self.in_shape).copy()
        return dx, []


_BUILDERS = {
    Dense: _DenseLayer,
    Conv2D: _Conv2DLayer,
    AvgPool2D: _AvgPool2DLayer,
    Flatten: _FlattenLayer,
    Embedding: _EmbeddingLayer,
    GlobalAvgPool1D: _GlobalAvgPool1DLayer,
}


def build_layer(spec: LayerSpec, in_shape: tuple[int, ...]) -> BuiltLayer:
    try:
        builder = _BUILDERS[type(spec)]
    except KeyError:
        raise ConfigError(f"unknown layer spec type {type(spec).__name__}") from None
    return builder(spec, tuple(int(s) for s in in_shape))
