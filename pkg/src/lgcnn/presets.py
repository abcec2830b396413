"""The six built-in architectures plus reduced variants for desk-scale runs.

Three local-global models pair a 3x3 local branch with full-span fat (1 x W)
and tall (H x 1) kernel branches whose responses fuse by channel-wise outer
product; three local-only baselines keep just the square-kernel path in
front of the identical trunk and head. Channel widths double from model to
model; models 2 and 3 add a pool + stride-3 convolution trunk, and model 3
an extra 3x3 integration conv.

The baseline presets are the count-consistent form: their published layer
listings include 1x1 squeeze convolutions, but the published parameter
totals (320,212 / 716,528 / 1,500,656) are only reproduced without those
layers, with the first FC reading all 16 conv channels. The presets ship
the form that matches the totals, since those are machine-checkable.
"""

from __future__ import annotations

from .model import ModelSpec, parse_model_spec

__all__ = [
    "PRESETS",
    "preset_names",
    "preset_text",
    "load_preset",
    "lgcnn1_text",
    "cnn1_text",
    "scaled_text",
]


def lgcnn1_text(channels: int = 16, squeeze: int = 8, classes: int = 20,
                height: int = 20, width: int = 50, name: str = "lgcnn-1") -> str:
    """Two-branch local-global model with no trunk: concat feeds the head."""
    flat = 2 * squeeze * height * width
    return f"""\
model {name}
input (1, {height}, {width})

section local
C((3, 3), {channels})
BN
ReLU
C((1, 1), {squeeze})

section fat
C((1, {width}), {channels})
ReLU

section tall
C(({height}, 1), {channels})
ReLU

section global from fat, tall
Multiply
BN
ReLU
C((1, 1), {squeeze})

section main from local, global
Concat
Flatten
FC({flat}, {classes})
Softmax
"""


def cnn1_text(channels: int = 16, classes: int = 20,
              height: int = 20, width: int = 50, name: str = "cnn-1") -> str:
    """Local-only counterpart of the smallest model, same head budget."""
    flat = channels * height * width
    return f"""\
model {name}
input (1, {height}, {width})

C((3, 3), {channels})
BN
ReLU
Flatten
FC({flat}, {classes})
Softmax
"""


_LGCNN_2 = """\
model lgcnn-2
input (1, 20, 50)

section local
C((3, 3), 32)
BN
ReLU
C((1, 1), 16)

section fat
C((1, 50), 32)
ReLU

section tall
C((20, 1), 32)
ReLU

section global from fat, tall
Multiply
BN
ReLU
C((1, 1), 16)

section main from local, global
Concat
P((2, 2), 2)
C((3, 3), 64)
s = 3
BN
ReLU
Flatten
FC(2304, 300)
ReLU
FC(300, 20)
Softmax
"""

_LGCNN_3 = """\
model lgcnn-3
input (1, 20, 50)

section local
C((3, 3), 64)
BN
ReLU
C((1, 1), 32)

section fat
C((1, 50), 64)
ReLU

section tall
C((20, 1), 64)
ReLU

section global from fat, tall
Multiply
BN
ReLU
C((1, 1), 32)

section main from local, global
Concat
C((3, 3), 64)
BN
ReLU
P((2, 2), 2)
C((3, 3), 128)
s = 3
BN
ReLU
Flatten
FC(4608, 300)
ReLU
FC(300, 20)
Softmax
"""

_CNN_2 = """\
model cnn-2
input (1, 20, 50)

C((3, 3), 32)
BN
ReLU
P((2, 2), 2)
C((3, 3), 64)
s = 3
BN
ReLU
Flatten
FC(2304, 300)
ReLU
FC(300, 20)
Softmax
"""

_CNN_3 = """\
model cnn-3
input (1, 20, 50)

C((3, 3), 64)
BN
ReLU
C((3, 3), 64)
BN
ReLU
P((2, 2), 2)
C((3, 3), 128)
s = 3
BN
ReLU
Flatten
FC(4608, 300)
ReLU
FC(300, 20)
Softmax
"""

PRESETS: dict[str, str] = {
    "lgcnn-1": lgcnn1_text(),
    "lgcnn-2": _LGCNN_2,
    "lgcnn-3": _LGCNN_3,
    "cnn-1": cnn1_text(),
    "cnn-2": _CNN_2,
    "cnn-3": _CNN_3,
}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def preset_text(name: str) -> str:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        ) from None


def load_preset(name: str) -> ModelSpec:
    return parse_model_spec(preset_text(name))


def scaled_text(base: str, divisor: int, classes: int,
                height: int = 20, width: int = 50) -> str:
    """Reduced-width variant of the smallest models for quick experiments.

    Divides every channel count by ``divisor`` (floored at 1) and swaps the
    class count, keeping the topology untouched.
    """
    if divisor < 1:
        raise ValueError("divisor must be >= 1")
    name = f"{base}-w{divisor}-c{classes}"
    if base == "lgcnn-1":
        return lgcnn1_text(channels=max(1, 16 // divisor),
                           squeeze=max(1, 8 // divisor),
                           classes=classes, height=height, width=width, name=name)
    if base == "cnn-1":
        return cnn1_text(channels=max(1, 16 // divisor),
                         classes=classes, height=height, width=width, name=name)
    raise ValueError(f"no scaled variant for {base!r}; use lgcnn-1 or cnn-1")
