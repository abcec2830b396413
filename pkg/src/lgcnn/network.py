"""Executable networks built from model specs.

``build`` turns a resolved ModelSpec into a Network: a topologically
ordered list of layer instances wired by name. Forward runs the graph on a
batch; backward walks it in reverse, accumulating gradients wherever a
value fans out to several consumers (the input image feeds all branches).
"""

from __future__ import annotations

import numpy as np

from .layers import (
    BatchNorm2d,
    Concat,
    Conv2d,
    ConvFat1d,
    ConvTall1d,
    Flatten,
    FullyConnected,
    MaxPool2d,
    OuterProductFuse,
    ReLU,
    Softmax,
)
from .model import GraphError, LayerSpec, ModelSpec
from .tensor import ShapeError, Tensor

__all__ = ["Network", "build"]


def _instantiate(layer: LayerSpec, rng, dtype):
    kind = layer.kind
    if kind in ("conv2d", "conv1x1"):
        return Conv2d(layer.in_channels, layer.out_channels, layer.kernel,
                      stride=layer.stride, padding=layer.padding, rng=rng, dtype=dtype)
    if kind == "conv_fat":
        return ConvFat1d(layer.in_channels, layer.out_channels, layer.kernel[1],
                         rng=rng, dtype=dtype)
    if kind == "conv_tall":
        return ConvTall1d(layer.in_channels, layer.out_channels, layer.kernel[0],
                          rng=rng, dtype=dtype)
    if kind == "batch_norm":
        return BatchNorm2d(layer.in_channels, dtype=dtype)
    if kind == "max_pool":
        return MaxPool2d(layer.kernel[0], layer.stride)
    if kind == "fully_connected":
        return FullyConnected(layer.in_features, layer.out_features, rng=rng, dtype=dtype)
    if kind == "relu":
        return ReLU()
    if kind == "softmax":
        return Softmax()
    if kind == "flatten":
        return Flatten()
    if kind == "outer_fuse":
        return OuterProductFuse()
    if kind == "concat":
        return Concat()
    raise GraphError(f"{layer.name}: no runnable layer for kind {layer.kind!r}")


class Network:
    """A runnable forward/backward graph with flat parameter access."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers = {l.name: _instantiate(l, rng, dtype) for l in spec.layers}
        self._order = [l.name for l in spec.layers]
        self._inputs = {l.name: l.inputs for l in spec.layers}
        self._kinds = {l.name: l.kind for l in spec.layers}

    # ---- running ---------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        expect = self.spec.input_shape
        if x.rank != 4 or x.shape[1:] != (expect.channels, expect.height, expect.width):
            raise ShapeError(
                f"model {self.spec.name!r} expects input (B, {expect.channels}, "
                f"{expect.height}, {expect.width}), got {x.shape}")
        values = {"input": x}
        for name in self._order:
            args = [values[src] for src in self._inputs[name]]
            values[name] = self.layers[name].forward(*args, train=train)
        self._values = values
        return values[self._order[-1]]

    def backward(self, grad: Tensor, from_logits: bool = False) -> Tensor:
        """Distribute ``grad`` backwards; returns the input-image gradient.

        ``from_logits=True`` treats ``grad`` as the gradient at the final
        softmax's input (the fused cross-entropy path) and skips that node.
        """
        order = list(self._order)
        if from_logits:
            if self._kinds[order[-1]] != "softmax":
                raise GraphError(
                    f"model {self.spec.name!r} does not end in softmax; "
                    f"cannot take logit gradients")
            order = order[:-1]
        pending: dict[str, Tensor] = {order[-1]: grad}
        for name in reversed(order):
            upstream = pending.pop(name, None)
            if upstream is None:
                continue
            out = self.layers[name].backward(upstream)
            outs = out if isinstance(out, tuple) else (out,)
            for src, g in zip(self._inputs[name], outs):
                if src in pending:
                    pending[src] = pending[src] + g
                else:
                    pending[src] = g
        return pending["input"]

    def predict(self, x: Tensor) -> np.ndarray:
        """Class index per row; argmax breaks ties toward the lowest index."""
        probs = self.forward(x, train=False)
        return np.argmax(probs.data, axis=1)

    # ---- parameter access --------------------------------------------------

    def params(self) -> list[Tensor]:
        return [p for name in self._order for p in self.layers[name].params()]

    def grads(self) -> list[Tensor]:
        return [g for name in self._order for g in self.layers[name].grads()]

    def state_tensors(self) -> list[Tensor]:
        """Checkpoint payload: parameters plus batch-norm running stats."""
        return [t for name in self._order for t in self.layers[name].state_tensors()]

    def zero_grads(self) -> None:
        for name in self._order:
            self.layers[name].zero_grads()

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Network:
    return Network(spec, seed=seed, dtype=dtype)
