"""Shared oracles and the finite-difference gradient checker.

Used by the per-layer suites and the acceptance gate. Everything here is
written independently of the library code paths it checks: convolution as
six explicit loops, Pearson correlation as the textbook two-pass formula,
gradients as central differences.
"""

import numpy as np
import numpy.testing as npt

from lgcnn.tensor import Tensor

H = 1e-4


def int_tensor(rng, shape, lo=-3, hi=4):
    """Integer-valued float tensor: arithmetic on it is exact in float32."""
    return Tensor(rng.integers(lo, hi, size=shape).astype(np.float32))


def naive_conv2d(x, w, b, stride=1):
    """Six nested loops, valid padding. The direct-definition oracle."""
    B, C, Hh, Ww = x.shape
    O, _, kh, kw = w.shape
    oh = (Hh - kh) // stride + 1
    ow = (Ww - kw) // stride + 1
    out = np.zeros((B, O, oh, ow), dtype=np.float64)
    for n in range(B):
        for o in range(O):
            for y in range(oh):
                for z in range(ow):
                    acc = float(b[o])
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (float(x[n, c, y * stride + i, z * stride + j])
                                        * float(w[o, c, i, j]))
                    out[n, o, y, z] = acc
    return out


def two_pass_pearson(x):
    """Textbook Pearson matrix: center, then normalized cross products."""
    x = np.asarray(x, dtype=np.float64)
    n, v = x.shape
    mean = x.sum(axis=0) / n
    centered = x - mean
    out = np.empty((v, v), dtype=np.float64)
    for i in range(v):
        for j in range(v):
            num = float((centered[:, i] * centered[:, j]).sum())
            den = np.sqrt(float((centered[:, i] ** 2).sum())
                          * float((centered[:, j] ** 2).sum()))
            out[i, j] = num / den
    return out


def region_max_pool(x, k, s):
    """Max over each k-by-k region, spelled out per output cell."""
    B, C, Hh, Ww = x.shape
    oh = (Hh - k) // s + 1
    ow = (Ww - k) // s + 1
    out = np.zeros((B, C, oh, ow), dtype=x.dtype)
    for n in range(B):
        for c in range(C):
            for y in range(oh):
                for z in range(ow):
                    out[n, c, y, z] = x[n, c, y * s:y * s + k, z * s:z * s + k].max()
    return out


def check_gradients(layer, inputs, rtol=1e-4, atol=1e-7, train=True):
    """Compare backprop against central differences for one layer call.

    ``inputs`` is a list of float64 arrays. The scalar objective is
    sum(out * R) for a fixed random R, so the upstream gradient is R.
    """
    rng = np.random.default_rng(abs(hash(tuple(a.shape for a in inputs))) % (2**32))

    def run(arrs):
        out = layer.forward(*[Tensor(a) for a in arrs], train=train)
        return out.data

    base = run(inputs)
    upstream = rng.normal(size=base.shape)

    layer.zero_grads()
    layer.forward(*[Tensor(a) for a in inputs], train=train)
    got = layer.backward(Tensor(upstream))
    input_grads = [g.data for g in (got if isinstance(got, tuple) else (got,))]
    assert len(input_grads) == len(inputs)

    def fd_loss(arrs):
        return float((run(arrs) * upstream).sum())

    for which, x in enumerate(inputs):
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            bumped = [a.copy() for a in inputs]
            bumped[which][idx] += H
            hi = fd_loss(bumped)
            bumped[which][idx] -= 2 * H
            lo = fd_loss(bumped)
            fd[idx] = (hi - lo) / (2 * H)
        npt.assert_allclose(input_grads[which], fd, rtol=rtol, atol=atol,
                            err_msg=f"input {which} gradient mismatch")

    for p, g in zip(layer.params(), layer.grads()):
        fd = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + H
            hi = fd_loss(inputs)
            p.data[idx] = orig - H
            lo = fd_loss(inputs)
            p.data[idx] = orig
            fd[idx] = (hi - lo) / (2 * H)
        npt.assert_allclose(g.data, fd, rtol=rtol, atol=atol,
                            err_msg="parameter gradient mismatch")


def f64(layer):
    """Re-seat a layer's parameters in float64 for low-noise differencing."""
    for p in layer.params():
        p.data = p.data.astype(np.float64)
    for g in layer.grads():
        g.data = g.data.astype(np.float64)
    return layer


def random_layer_cases(seed):
    """One small random config per layer kind, keyed by kind name.

    Inputs avoid ReLU/pool kinks: coordinates are kept away from exact
    ties and zeros so central differences stay valid.
    """
    from lgcnn.layers import (BatchNorm2d, Concat, Conv2d, ConvFat1d,
                              ConvTall1d, Flatten, FullyConnected, MaxPool2d,
                              OuterProductFuse, ReLU, Softmax)

    rng = np.random.default_rng(seed)
    b = int(rng.integers(1, 3))
    c = int(rng.integers(1, 3))
    h = int(rng.integers(3, 6))
    w = int(rng.integers(3, 6))
    x = rng.normal(size=(b, c, h, w))
    cases = {}

    k = int(rng.integers(1, min(3, h, w) + 1))
    stride = int(rng.integers(1, 3))
    pad = "same" if rng.integers(2) else "valid"
    cases["conv2d"] = (f64(Conv2d(c, 2, (k, k), stride=stride, padding=pad,
                                  rng=rng)), [x])
    cases["conv_fat"] = (f64(ConvFat1d(c, 2, w, rng=rng)), [x])
    cases["conv_tall"] = (f64(ConvTall1d(c, 2, h, rng=rng)), [x])
    cases["outer_fuse"] = (OuterProductFuse(),
                           [rng.normal(size=(b, c, h, 1)),
                            rng.normal(size=(b, c, 1, w))])
    cases["batch_norm"] = (f64(BatchNorm2d(c)), [x])
    pool_vals = rng.permutation(b * c * 4 * 4).reshape(b, c, 4, 4) * 0.1
    cases["max_pool"] = (MaxPool2d(2, 2), [pool_vals])
    cases["fully_connected"] = (f64(FullyConnected(h * w, 3, rng=rng)),
                                [rng.normal(size=(b, h * w))])
    relu_x = rng.normal(size=(b, c, h, w))
    relu_x = np.where(np.abs(relu_x) < 1e-3, 0.5, relu_x)
    cases["relu"] = (ReLU(), [relu_x])
    cases["softmax"] = (Softmax(), [rng.normal(size=(b, 4))])
    cases["flatten"] = (Flatten(), [x])
    cases["concat"] = (Concat(), [x, rng.normal(size=(b, c + 1, h, w))])
    return cases
