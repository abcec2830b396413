"""Differentiable layer primitives: forward and backward passes.

Every layer consumes and produces ``Tensor`` activations. Spatial layers
use the (batch, channels, height, width) layout; the classifier head works
on (batch, features). A layer caches whatever its backward pass needs when
``forward`` runs, and ``backward`` raises if called first. Parameter
gradients accumulate into per-layer slots shaped exactly like the
parameters; callers zero them between steps.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "Layer",
    "Conv2d",
    "ConvFat1d",
    "ConvTall1d",
    "OuterProductFuse",
    "BatchNorm2d",
    "MaxPool2d",
    "FullyConnected",
    "ReLU",
    "Softmax",
    "Flatten",
    "Concat",
    "same_pad_amounts",
    "conv_output_size",
]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    """Spatial output size of a convolution or pooling window sweep."""
    if padding == "same":
        return -(-size // stride)
    if kernel > size:
        raise ShapeError(f"kernel {kernel} larger than input extent {size} with valid padding")
    return (size - kernel) // stride + 1


def same_pad_amounts(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero-padding split for same-style output ceil(size/stride).

    The split is as even as possible with the extra pixel at the
    bottom/right.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    lo = total // 2
    return lo, total - lo


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Strided view of all kernel-sized patches: (B, C, oh, ow, kh, kw)."""
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::sh, ::sw]


class Layer:
    """Base layer: parameter bookkeeping plus the forward/backward contract."""

    def __init__(self):
        self._params: list[Tensor] = []
        self._grads: list[Tensor] = []
        self._cache = None

    def _register(self, param: Tensor) -> Tensor:
        self._params.append(param)
        self._grads.append(Tensor.zeros(param.shape, dtype=param.dtype))
        return param

    def params(self) -> list[Tensor]:
        return list(self._params)

    def grads(self) -> list[Tensor]:
        return list(self._grads)

    def state_tensors(self) -> list[Tensor]:
        """Everything a checkpoint must persist (params + running stats)."""
        return list(self._params)

    def zero_grads(self) -> None:
        for g in self._grads:
            g.data[...] = 0

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def forward(self, *xs: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor):
        raise NotImplementedError


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Conv2d(Layer):
    """2D convolution: out[b,j] = bias[j] + sum_i in[b,i] * kernel[j,i].

    Weights are shaped (out_channels, in_channels, kh, kw). Padding is
    either "valid" or zero-filled "same" (output extent ceil(input/stride)).
    """

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel, stride: int = 1,
                 padding: str = "same", *, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if min(in_channels, out_channels, kh, kw, stride) < 1:
            raise ValueError("conv geometry must be positive")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {padding!r}")
        rng = rng or np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.weights = self._register(
            _uniform_init(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, dtype))
        self.bias = self._register(Tensor.zeros((out_channels,), dtype=dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expected {self.in_channels} input channels, got {c}")
        kh, kw = self.kernel
        s = self.stride
        if self.padding == "same":
            pt, pb = same_pad_amounts(h, kh, s)
            pl, pr = same_pad_amounts(w, kw, s)
            padded = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        else:
            pt = pl = 0
            if kh > h or kw > w:
                raise ShapeError(f"kernel {self.kernel} larger than input {(h, w)} with valid padding")
            padded = x.data
        pat = _windows(padded, kh, kw, s, s)
        w_arr = self.weights.data.astype(padded.dtype, copy=False)
        out = np.einsum("bcxyij,ocij->boxy", pat, w_arr, optimize=True)
        out += self.bias.data.astype(padded.dtype, copy=False)[:, None, None]
        self._cache = (x.shape, padded, (pt, pl))
        return Tensor(out)

    def backward(self, grad: Tensor) -> Tensor:
        x_shape, padded, (pt, pl) = self._take_cache()
        kh, kw = self.kernel
        s = self.stride
        g = grad.data
        pat = _windows(padded, kh, kw, s, s)
        self._grads[0].data += np.einsum("boxy,bcxyij->ocij", g, pat, optimize=True)
        self._grads[1].data += g.sum(axis=(0, 2, 3))
        w_arr = self.weights.data.astype(padded.dtype, copy=False)
        contrib = np.einsum("boxy,ocij->bcxyij", g, w_arr, optimize=True)
        dpad = np.zeros_like(padded)
        oh, ow = g.shape[2], g.shape[3]
        for i in range(kh):
            for j in range(kw):
                dpad[:, :, i:i + s * oh:s, j:j + s * ow:s] += contrib[:, :, :, :, i, j]
        _, _, h, w = x_shape
        return Tensor(dpad[:, :, pt:pt + h, pl:pl + w])


class ConvFat1d(Layer):
    """Full-width 1D convolution: one affine response per input row.

    The kernel is 1 x width and must span the whole image width; output is
    (batch, out_channels, height, 1).
    """

    kind = "conv_fat"

    def __init__(self, in_channels: int, out_channels: int, width: int, *, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.weights = self._register(
            _uniform_init(rng, (out_channels, in_channels, 1, width), in_channels * width, dtype))
        self.bias = self._register(Tensor.zeros((out_channels,), dtype=dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"fat conv expected {self.in_channels} input channels, got {c}")
        if w != self.width:
            raise ShapeError(f"fat kernel width {self.width} must equal input width {w}")
        w_arr = self.weights.data[:, :, 0, :].astype(x.dtype, copy=False)
        out = np.einsum("bchw,ocw->boh", x.data, w_arr, optimize=True)
        out += self.bias.data.astype(x.dtype, copy=False)[:, None]
        self._cache = x.data
        return Tensor(out[..., None])

    def backward(self, grad: Tensor) -> Tensor:
        x = self._take_cache()
        g = grad.data[..., 0]
        self._grads[0].data += np.einsum("boh,bchw->ocw", g, x, optimize=True)[:, :, None, :]
        self._grads[1].data += g.sum(axis=(0, 2))
        w_arr = self.weights.data[:, :, 0, :].astype(x.dtype, copy=False)
        return Tensor(np.einsum("boh,ocw->bchw", g, w_arr, optimize=True))


class ConvTall1d(Layer):
    """Full-height 1D convolution: one affine response per input column.

    The kernel is height x 1 and must span the whole image height; output
    is (batch, out_channels, 1, width).
    """

    kind = "conv_tall"

    def __init__(self, in_channels: int, out_channels: int, height: int, *, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.height = height
        self.weights = self._register(
            _uniform_init(rng, (out_channels, in_channels, height, 1), in_channels * height, dtype))
        self.bias = self._register(Tensor.zeros((out_channels,), dtype=dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"tall conv expected {self.in_channels} input channels, got {c}")
        if h != self.height:
            raise ShapeError(f"tall kernel height {self.height} must equal input height {h}")
        w_arr = self.weights.data[:, :, :, 0].astype(x.dtype, copy=False)
        out = np.einsum("bchw,och->bow", x.data, w_arr, optimize=True)
        out += self.bias.data.astype(x.dtype, copy=False)[:, None]
        self._cache = x.data
        return Tensor(out[:, :, None, :])

    def backward(self, grad: Tensor) -> Tensor:
        x = self._take_cache()
        g = grad.data[:, :, 0, :]
        self._grads[0].data += np.einsum("bow,bchw->och", g, x, optimize=True)[:, :, :, None]
        self._grads[1].data += g.sum(axis=(0, 2))
        w_arr = self.weights.data[:, :, :, 0].astype(x.dtype, copy=False)
        return Tensor(np.einsum("bow,och->bchw", g, w_arr, optimize=True))


class OuterProductFuse(Layer):
    """Channel-wise outer product of a column map and a row map.

    out[b,c,i,j] = col[b,c,i,0] * row[b,c,0,j]. Pairs channels one-to-one,
    so both operands must carry the same batch and channel counts.
    """

    kind = "outer_fuse"

    def forward(self, phi: Tensor, omega: Tensor, train: bool = False) -> Tensor:
        if phi.shape[:2] != omega.shape[:2]:
            raise ShapeError(
                f"outer fuse pairs channels one-to-one: {phi.shape} vs {omega.shape}")
        if phi.shape[3] != 1:
            raise ShapeError(f"first fuse operand must be a column map, got {phi.shape}")
        if omega.shape[2] != 1:
            raise ShapeError(f"second fuse operand must be a row map, got {omega.shape}")
        self._cache = (phi.data, omega.data)
        return Tensor(phi.data * omega.data)

    def backward(self, grad: Tensor) -> tuple[Tensor, Tensor]:
        phi, omega = self._take_cache()
        g = grad.data
        dphi = (g * omega).sum(axis=3, keepdims=True)
        domega = (g * phi).sum(axis=2, keepdims=True)
        return Tensor(dphi), Tensor(domega)


class BatchNorm2d(Layer):
    """Per-channel batch normalization with learnable scale and shift.

    Training mode normalizes by the batch+spatial moments and updates the
    running statistics by exponential moving average; eval mode normalizes
    by the running statistics. Population variance throughout.
    """

    kind = "batch_norm"

    def __init__(self, channels: int, *, momentum: float = BN_MOMENTUM,
                 epsilon: float = BN_EPSILON, dtype=np.float32):
        super().__init__()
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0 < momentum < 1):
            raise ValueError("momentum must lie in (0, 1)")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.alpha = self._register(Tensor.ones((channels,), dtype=dtype))
        self.beta = self._register(Tensor.zeros((channels,), dtype=dtype))
        self.running_mean = Tensor.zeros((channels,), dtype=dtype)
        self.running_var = Tensor.ones((channels,), dtype=dtype)

    def state_tensors(self) -> list[Tensor]:
        return [self.alpha, self.beta, self.running_mean, self.running_var]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expected {self.channels} channels, got {x.shape[1]}")
        xd = x.data
        if train:
            mean = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data[...] = (1 - m) * self.running_var.data + m * var
        else:
            mean = self.running_mean.data.astype(xd.dtype)
            var = self.running_var.data.astype(xd.dtype)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
        alpha = self.alpha.data.astype(xd.dtype, copy=False)
        beta = self.beta.data.astype(xd.dtype, copy=False)
        out = xhat * alpha[:, None, None] + beta[:, None, None]
        self._cache = (xhat, inv_std, train)
        return Tensor(out)

    def backward(self, grad: Tensor) -> Tensor:
        xhat, inv_std, train = self._take_cache()
        g = grad.data
        self._grads[0].data += (g * xhat).sum(axis=(0, 2, 3))
        self._grads[1].data += g.sum(axis=(0, 2, 3))
        alpha = self.alpha.data.astype(g.dtype, copy=False)
        dxhat = g * alpha[:, None, None]
        if not train:
            return Tensor(dxhat * inv_std[:, None, None])
        n = g.shape[0] * g.shape[2] * g.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n) * inv_std[:, None, None]
        return Tensor(dx)


class MaxPool2d(Layer):
    """Max pooling over square windows; trailing partial windows drop.

    Ties route the gradient to the first maximum in row-major window scan.
    """

    kind = "max_pool"

    def __init__(self, window: int, stride: int):
        super().__init__()
        if window < 1 or stride < 1:
            raise ValueError("pool window and stride must be positive")
        self.window = window
        self.stride = stride

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        b, c, h, w = x.shape
        k, s = self.window, self.stride
        if k > h or k > w:
            raise ShapeError(f"pool window {k} exceeds input {(h, w)}")
        pat = _windows(x.data, k, k, s, s)
        flat = pat.reshape(*pat.shape[:4], k * k)
        arg = flat.argmax(axis=4)
        out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
        self._cache = (x.shape, arg)
        return Tensor(out)

    def backward(self, grad: Tensor) -> Tensor:
        x_shape, arg = self._take_cache()
        k, s = self.window, self.stride
        g = grad.data
        b, c, oh, ow = g.shape
        dx = np.zeros(x_shape, dtype=g.dtype)
        bi, ci, yi, xi = np.indices((b, c, oh, ow))
        rows = yi * s + arg // k
        cols = xi * s + arg % k
        np.add.at(dx, (bi, ci, rows, cols), g)
        return Tensor(dx)


class FullyConnected(Layer):
    """Affine map on flattened features: out = x @ W.T + b."""

    kind = "fully_connected"

    def __init__(self, in_features: int, out_features: int, *, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.in_features = in_features
        self.out_features = out_features
        self.weights = self._register(
            _uniform_init(rng, (out_features, in_features), in_features, dtype))
        self.bias = self._register(Tensor.zeros((out_features,), dtype=dtype))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.rank != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"fully connected expected (batch, {self.in_features}), got {x.shape}")
        w_arr = self.weights.data.astype(x.dtype, copy=False)
        out = x.data @ w_arr.T + self.bias.data.astype(x.dtype, copy=False)
        self._cache = x.data
        return Tensor(out)

    def backward(self, grad: Tensor) -> Tensor:
        x = self._take_cache()
        g = grad.data
        self._grads[0].data += g.T @ x
        self._grads[1].data += g.sum(axis=0)
        return Tensor(g @ self.weights.data.astype(x.dtype, copy=False))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        mask = x.data > 0
        self._cache = mask
        return Tensor(np.where(mask, x.data, 0))

    def backward(self, grad: Tensor) -> Tensor:
        mask = self._take_cache()
        return Tensor(np.where(mask, grad.data, 0))


class Softmax(Layer):
    """Row-wise softmax with max subtraction for stability."""

    kind = "softmax"

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        self._cache = probs
        return Tensor(probs)

    def backward(self, grad: Tensor) -> Tensor:
        probs = self._take_cache()
        g = grad.data
        inner = (g * probs).sum(axis=1, keepdims=True)
        return Tensor(probs * (g - inner))


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        self._cache = x.shape
        return Tensor(x.data.reshape(x.shape[0], -1))

    def backward(self, grad: Tensor) -> Tensor:
        shape = self._take_cache()
        return Tensor(grad.data.reshape(shape))


class Concat(Layer):
    """Channel-wise concatenation; spatial dims must match exactly."""

    kind = "concat"

    def forward(self, *xs: Tensor, train: bool = False) -> Tensor:
        spatial = {x.shape[2:] for x in xs}
        if len(spatial) != 1:
            raise ShapeError(f"concat spatial dims differ: {[x.shape for x in xs]}")
        self._cache = [x.shape[1] for x in xs]
        return Tensor(np.concatenate([x.data for x in xs], axis=1))

    def backward(self, grad: Tensor) -> tuple[Tensor, ...]:
        channels = self._take_cache()
        splits = np.cumsum(channels)[:-1]
        return tuple(Tensor(part) for part in np.split(grad.data, splits, axis=1))
