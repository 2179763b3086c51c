"""3D network layers with hand-written reverse-mode gradients.

Tensors are (N, C, X, Y, Z).  Convolutions use zero padding that preserves
spatial dims; pooling and transpose convolution halve/double them.  Each
layer caches what its backward pass needs; backward accumulates parameter
gradients into the owning ParameterStore and returns the input cotangent.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .axisops import resize3, resize3_adjoint

__all__ = [
    "Param",
    "ParameterStore",
    "xavier_uniform",
    "Conv3d",
    "BatchNorm3d",
    "ReLU",
    "MaxPool2x",
    "Deconv2x",
    "TrilinearUp2x",
    "ChannelPairMean",
    "GlobalAvgPool",
    "Linear",
]

# batch chunking bound for im2col buffers
_WINDOW_BYTES_LIMIT = 1 << 28


class Param:
    """A learnable tensor with paired gradient and Adam moment buffers."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)


class ParameterStore:
    """Named parameters plus non-learnable state (batch-norm statistics)."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Param] = {}
        self.state: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, np.ascontiguousarray(value, dtype=self.dtype))
        self.params[name] = p
        return p

    def add_state(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.state:
            raise ValueError(f"duplicate state name {name!r}")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self.state[name] = arr
        return arr

    def zero_grads(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _batch_slices(n: int, bytes_per_sample: int):
    step = max(1, _WINDOW_BYTES_LIMIT // max(1, bytes_per_sample))
    for start in range(0, n, step):
        yield slice(start, min(start + step, n))


_COPY_POOL: ThreadPoolExecutor | None = None
_COPY_WORKERS = 2


def _copy_pool() -> ThreadPoolExecutor:
    global _COPY_POOL
    if _COPY_POOL is None:
        _COPY_POOL = ThreadPoolExecutor(max_workers=_COPY_WORKERS)
    return _COPY_POOL


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N, C, X, Y, Z) -> (N, C*k^3, X*Y*Z) columns of a same-padded conv.

    Built offset by offset so every copy runs along contiguous z-lines.
    Offsets are copied by a small thread pool into disjoint slices, which
    keeps the result bit-identical while roughly doubling throughput.
    """
    n, c, dx, dy, dz = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    buf = np.empty((n, c, k**3, dx, dy, dz), dtype=x.dtype)
    offsets = [(a, b, g) for a in range(k) for b in range(k) for g in range(k)]

    def fill(worker: int):
        for t in range(worker, len(offsets), _COPY_WORKERS):
            a, b, g = offsets[t]
            buf[:, :, t] = xp[:, :, a : a + dx, b : b + dy, g : g + dz]

    list(_copy_pool().map(fill, range(_COPY_WORKERS)))
    return buf.reshape(n, c * k**3, dx * dy * dz)


# column buffers above this size are rebuilt in backward instead of cached
_COLS_CACHE_BYTES = 1 << 29


class Conv3d:
    """Stride-1 zero-padded convolution; spatial dims are preserved."""

    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 ksize: int, rng: np.random.Generator | None, zero_init: bool = False):
        if ksize % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in = c_in
        self.c_out = c_out
        self.k = ksize
        self.pad = ksize // 2
        shape = (c_out, c_in, ksize, ksize, ksize)
        if zero_init:
            w = np.zeros(shape)
        else:
            fan = c_in * ksize**3, c_out * ksize**3
            w = xavier_uniform(rng, shape, *fan)
        self.w = store.add_param(f"{name}.w", w)
        self.b = store.add_param(f"{name}.b", np.zeros(c_out))
        self._x = None
        self._cols = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c = x.shape[:2]
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        self._x = x
        cols = _im2col(x, self.k, self.pad)
        self._cols = cols if cols.nbytes <= _COLS_CACHE_BYTES else None
        w2 = self.w.value.reshape(self.c_out, -1)
        y = np.matmul(w2, cols).reshape((n, self.c_out) + x.shape[2:])
        return y + self.b.value.reshape(1, -1, 1, 1, 1)

    def backward(self, dy: np.ndarray, need_dx: bool = True):
        x = self._x
        n = x.shape[0]
        voxels = int(np.prod(x.shape[2:]))
        cols = self._cols if self._cols is not None else _im2col(x, self.k, self.pad)
        self._cols = None
        dy2 = dy.reshape(n, self.c_out, voxels)
        dw = np.matmul(dy2, cols.swapaxes(1, 2)).sum(axis=0)
        self.w.grad += dw.reshape(self.w.value.shape)
        self.b.grad += dy2.sum(axis=(0, 2))
        if not need_dx:
            return None
        # transpose conv: correlate dy with the spatially flipped kernel
        cols_dy = _im2col(dy, self.k, self.pad)
        wf = self.w.value[:, :, ::-1, ::-1, ::-1]
        wf2 = np.ascontiguousarray(wf.transpose(1, 0, 2, 3, 4)).reshape(self.c_in, -1)
        return np.matmul(wf2, cols_dy).reshape(x.shape)


class BatchNorm3d:
    """Per-channel batch normalization over (N, X, Y, Z).

    Training mode normalizes with batch statistics and updates running
    statistics as running = momentum * running + (1 - momentum) * batch;
    eval mode normalizes with the stored running statistics.
    """

    def __init__(self, store: ParameterStore, name: str, channels: int,
                 eps: float = 1e-5, momentum: float = 0.9):
        self.eps = eps
        self.momentum = momentum
        self.gamma = store.add_param(f"{name}.gamma", np.ones(channels))
        self.beta = store.add_param(f"{name}.beta", np.zeros(channels))
        self.run_mean = store.add_state(f"{name}.run_mean", np.zeros(channels))
        self.run_var = store.add_state(f"{name}.run_var", np.ones(channels))
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        axes = (0, 2, 3, 4)
        shape = (1, -1, 1, 1, 1)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.run_mean *= self.momentum
            self.run_mean += (1.0 - self.momentum) * mean.astype(self.run_mean.dtype)
            self.run_var *= self.momentum
            self.run_var += (1.0 - self.momentum) * var.astype(self.run_var.dtype)
        else:
            mean = self.run_mean.astype(x.dtype)
            var = self.run_var.astype(x.dtype)
        ivar = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xhat = (x - mean.reshape(shape)) * ivar.reshape(shape)
        self._cache = (xhat, ivar, training, x.shape)
        return self.gamma.value.reshape(shape) * xhat + self.beta.value.reshape(shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, ivar, training, x_shape = self._cache
        axes = (0, 2, 3, 4)
        shape = (1, -1, 1, 1, 1)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.value.reshape(shape)
        if not training:
            return dxhat * ivar.reshape(shape)
        m = x_shape[0] * x_shape[2] * x_shape[3] * x_shape[4]
        sum_d = dxhat.sum(axis=axes).reshape(shape)
        sum_dx = (dxhat * xhat).sum(axis=axes).reshape(shape)
        return (ivar.reshape(shape) / m) * (m * dxhat - sum_d - xhat * sum_dx)


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._mask


class MaxPool2x:
    """2x2x2 max pooling, stride 2; gradient routes to the argmax voxel."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, dx, dy_, dz = x.shape
        if dx % 2 or dy_ % 2 or dz % 2:
            raise ValueError(f"pooling needs even spatial dims, got {x.shape[2:]}")
        cells = (
            x.reshape(n, c, dx // 2, 2, dy_ // 2, 2, dz // 2, 2)
            .transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(n, c, dx // 2, dy_ // 2, dz // 2, 8)
        )
        arg = cells.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        arg, x_shape = self._cache
        n, c, dx, dy_, dz = x_shape
        cells = np.zeros(dy.shape + (8,), dtype=dy.dtype)
        np.put_along_axis(cells, arg[..., None], dy[..., None], axis=-1)
        return (
            cells.reshape(n, c, dx // 2, dy_ // 2, dz // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x_shape)
        )


class Deconv2x:
    """Transpose convolution with kernel 2, stride 2: exactly doubles dims."""

    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator):
        self.c_in = c_in
        self.c_out = c_out
        w = xavier_uniform(rng, (c_in, c_out, 2, 2, 2), c_in * 8, c_out * 8)
        self.w = store.add_param(f"{name}.w", w)
        self.b = store.add_param(f"{name}.b", np.zeros(c_out))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        n, _, dx, dy_, dz = x.shape
        t = np.tensordot(x, self.w.value, axes=([1], [0]))
        # (N, X, Y, Z, Cout, 2, 2, 2) -> (N, Cout, X, 2, Y, 2, Z, 2)
        y = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, self.c_out, 2 * dx, 2 * dy_, 2 * dz)
        return y + self.b.value.reshape(1, -1, 1, 1, 1)

    def backward(self, dy: np.ndarray, need_dx: bool = True):
        x = self._x
        n, _, dx, dy_, dz = x.shape
        dt = (
            dy.reshape(n, self.c_out, dx, 2, dy_, 2, dz, 2)
            .transpose(0, 2, 4, 6, 1, 3, 5, 7)
        )
        self.w.grad += np.tensordot(x, dt, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
        self.b.grad += dy.sum(axis=(0, 2, 3, 4))
        if not need_dx:
            return None
        d = np.tensordot(dt, self.w.value, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
        return np.moveaxis(d, -1, 1)


class TrilinearUp2x:
    """Parameter-free trilinear upsampling to double spatial dims."""

    def __init__(self):
        self._in_dims = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_dims = x.shape[2:]
        return resize3(x, tuple(2 * d for d in x.shape[2:]))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return resize3_adjoint(dy, self._in_dims)


class ChannelPairMean:
    """Halve channels by averaging consecutive channel pairs."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c = x.shape[:2]
        if c % 2:
            raise ValueError(f"channel count must be even, got {c}")
        return x.reshape(n, c // 2, 2, *x.shape[2:]).mean(axis=2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, c = dy.shape[:2]
        half = 0.5 * dy[:, :, None]
        return np.broadcast_to(half, (n, c, 2) + dy.shape[2:]).reshape(n, 2 * c, *dy.shape[2:])


class GlobalAvgPool:
    """Mean over spatial dims: (N, C, X, Y, Z) -> (N, C)."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, c, dx, dy_, dz = self._shape
        m = dx * dy_ * dz
        return np.broadcast_to((dy / m)[:, :, None, None, None], self._shape).copy()


class Linear:
    def __init__(self, store: ParameterStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None, zero_init: bool = False,
                 bias_init: np.ndarray | None = None):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = xavier_uniform(rng, (n_in, n_out), n_in, n_out)
        b = np.zeros(n_out) if bias_init is None else np.asarray(bias_init, dtype=np.float64)
        self.w = store.add_param(f"{name}.w", w)
        self.b = store.add_param(f"{name}.b", b)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.w.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T
