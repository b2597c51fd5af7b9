"""Network layers with explicit forward/backward passes.

All layers share one calling convention: ``forward(x, training, rng)``
caches whatever the backward pass needs, ``backward(dout)`` returns the
input gradient and stores parameter gradients. A frozen layer still
propagates gradients downwards but reports zero parameter gradients and
is skipped by the optimizer, so its weights stay bit-identical.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Layer:
    frozen: bool = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self._raw_grads: dict[str, np.ndarray] = {}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        if self.frozen:
            return {k: np.zeros_like(v) for k, v in self.params.items()}
        return self._raw_grads

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"type": type(self).__name__, "frozen": bool(self.frozen)}


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero 'same' padding, NHWC layout.

    Implemented as nine shifted matrix products, which keeps forward and
    backward exact transposes of each other.
    """

    KERNEL = 3

    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        k = self.KERNEL
        fan_in = k * k * in_channels
        limit = np.sqrt(6.0 / fan_in)
        self.params = {
            "w": rng.uniform(-limit, limit, size=(k, k, in_channels, filters)).astype(dtype),
            "b": np.zeros(filters, dtype=dtype),
        }
        self._x_padded: np.ndarray | None = None

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"conv expected (N,H,W,{self.in_channels}), got {x.shape}")
        n, h, w, _ = x.shape
        k = self.KERNEL
        xp = np.zeros((n, h + k - 1, w + k - 1, self.in_channels), dtype=x.dtype)
        xp[:, 1:1 + h, 1:1 + w, :] = x
        self._x_padded = xp
        out = np.broadcast_to(
            self.params["b"].astype(x.dtype), (n, h, w, self.filters)
        ).copy()
        wt = self.params["w"].astype(x.dtype, copy=False)
        for ki in range(k):
            for kj in range(k):
                out += xp[:, ki:ki + h, kj:kj + w, :] @ wt[ki, kj]
        return out

    def backward(self, dout):
        xp = self._x_padded
        n, h, w, _ = dout.shape
        k = self.KERNEL
        dw = np.empty_like(self.params["w"])
        dxp = np.zeros_like(xp)
        dflat = dout.reshape(-1, self.filters)
        wt = self.params["w"]
        for ki in range(k):
            for kj in range(k):
                patch = xp[:, ki:ki + h, kj:kj + w, :].reshape(-1, self.in_channels)
                dw[ki, kj] = (patch.T @ dflat).astype(dw.dtype, copy=False)
                dxp[:, ki:ki + h, kj:kj + w, :] += dout @ wt[ki, kj].astype(dout.dtype).T
        self._raw_grads = {"w": dw, "b": dout.sum(axis=(0, 1, 2)).astype(self.params["b"].dtype)}
        return dxp[:, 1:1 + h, 1:1 + w, :]

    def descriptor(self):
        d = super().descriptor()
        d.update(in_channels=self.in_channels, filters=self.filters)
        return d


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dout):
        return np.where(self._mask, dout, dout.dtype.type(0))


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x, training=False, rng=None):
        n, h, w, c = x.shape
        ph, pw = h // 2, w // 2
        if ph == 0 or pw == 0:
            raise ShapeError(f"input {x.shape} too small for 2x2 pooling")
        self._in_shape = x.shape
        win = (
            x[:, : ph * 2, : pw * 2, :]
            .reshape(n, ph, 2, pw, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, ph, pw, 4, c)
        )
        self._argmax = win.argmax(axis=3)
        return np.take_along_axis(win, self._argmax[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(self, dout):
        n, ph, pw, c = dout.shape
        dwin = np.zeros((n, ph, pw, 4, c), dtype=dout.dtype)
        np.put_along_axis(dwin, self._argmax[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        dx[:, : ph * 2, : pw * 2, :] = (
            dwin.reshape(n, ph, pw, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, ph * 2, pw * 2, c)
        )
        return dx


class Flatten(Layer):
    def forward(self, x, training=False, rng=None):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._in_shape)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        limit = np.sqrt(6.0 / in_dim)
        self.params = {
            "w": rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype),
            "b": np.zeros(out_dim, dtype=dtype),
        }

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expected (N,{self.in_dim}), got {x.shape}")
        self._x = x
        return x @ self.params["w"].astype(x.dtype, copy=False) + self.params["b"].astype(x.dtype)

    def backward(self, dout):
        self._raw_grads = {
            "w": (self._x.T @ dout).astype(self.params["w"].dtype, copy=False),
            "b": dout.sum(axis=0).astype(self.params["b"].dtype),
        }
        return dout @ self.params["w"].astype(dout.dtype, copy=False).T

    def descriptor(self):
        d = super().descriptor()
        d.update(in_dim=self.in_dim, out_dim=self.out_dim)
        return d


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an RNG")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask

    def descriptor(self):
        d = super().descriptor()
        d.update(rate=self.rate)
        return d


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (Conv2D, ReLU, MaxPool2D, Flatten, Dense, Dropout)
}
