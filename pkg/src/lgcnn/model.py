"""Declarative model specs: parsing, shape propagation, audits, receptive fields.

A model is described in a small text format whose layer lines mirror the
notation used for the architecture tables (`C((3, 3), 16)`, `P((2, 2), 2)`,
`BN`, `FC(16000, 20)`, a bare `s = 3` amending the stride of the previous
convolution). Sections name the branches and wire them together:

    model lgcnn-1
    input (1, 20, 50)

    section local
    C((3, 3), 16)
    ...

    section combined from fat, tall
    Multiply
    ...

Parsing resolves the full graph: every convolution is classified by its
geometry (1x1 squeeze, full-width fat, full-height tall, or plain 2D),
shapes are propagated end to end, parameter counts and receptive fields are
computed per layer. All of that happens eagerly so a returned ModelSpec is
always internally consistent.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .tensor import Shape4

__all__ = [
    "GraphError",
    "LayerSpec",
    "ModelSpec",
    "ParamAudit",
    "ReceptiveField",
    "parse_model_spec",
    "propagate_shapes",
    "audit_parameters",
    "receptive_fields",
    "receptive_field",
]


class GraphError(ValueError):
    """Raised when a model spec fails to parse or to propagate shapes."""


@dataclass
class LayerSpec:
    """One node of the layer graph, fully resolved after parsing."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: str = "same"
    out_channels: int | None = None
    in_features: int | None = None
    out_features: int | None = None
    # filled in by shape propagation
    in_channels: int | None = None
    out_shape: tuple | None = None
    param_count: int = 0

    def table_notation(self) -> str:
        """The layer line as it appears in a spec file."""
        if self.kind in ("conv2d", "conv1x1", "conv_fat", "conv_tall"):
            (kh, kw), n = self.kernel, self.out_channels
            line = f"C(({kh}, {kw}), {n})"
            if self.stride != 1:
                line += f", s = {self.stride}"
            return line
        if self.kind == "max_pool":
            kh, kw = self.kernel
            return f"P(({kh}, {kw}), {self.stride})"
        if self.kind == "fully_connected":
            return f"FC({self.in_features}, {self.out_features})"
        return {
            "batch_norm": "BN", "relu": "ReLU", "softmax": "Softmax",
            "flatten": "Flatten", "outer_fuse": "Multiply", "concat": "Concat",
        }[self.kind]


@dataclass
class ParamAudit:
    per_layer: list[tuple[str, str, int]]  # (name, kind, parameter count)
    total: int


@dataclass(frozen=True)
class ReceptiveField:
    """Input-image extent influencing one unit of a layer's output."""

    height: int
    width: int
    stride_h: int
    stride_w: int


@dataclass
class ModelSpec:
    name: str
    input_shape: Shape4
    layers: list[LayerSpec]
    sections: list[tuple[str, list[str]]] = field(default_factory=list)

    @property
    def output_name(self) -> str:
        return self.layers[-1].name

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind == "fully_connected":
                return layer.out_features
        raise GraphError(f"model {self.name!r} has no fully-connected head")

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise GraphError(f"unknown layer {name!r} in model {self.name!r}")

    def canonical_text(self) -> str:
        """Deterministic re-serialization of the model text; the hashing basis."""
        lines = [f"model {self.name}"]
        c = self.input_shape
        lines.append(f"input ({c.channels}, {c.height}, {c.width})")
        by_section: dict[str, list[LayerSpec]] = {}
        for layer in self.layers:
            sec = layer.name.rsplit(".", 1)[0]
            by_section.setdefault(sec, []).append(layer)
        for sec_name, sources in self.sections:
            lines.append("")
            head = f"section {sec_name}"
            if sources != ["input"]:
                head += " from " + ", ".join(sources)
            lines.append(head)
            for layer in by_section.get(sec_name, []):
                if layer.kind.startswith("conv") and layer.stride != 1:
                    kh, kw = layer.kernel
                    lines.append(f"C(({kh}, {kw}), {layer.out_channels})")
                    lines.append(f"s = {layer.stride}")
                else:
                    lines.append(layer.table_notation())
        return "\n".join(lines) + "\n"

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


_CONV_RE = re.compile(r"^C\(\((\d+)\s*,\s*(\d+)\)\s*,\s*(\d+)\)$")
_POOL_RE = re.compile(r"^P\(\((\d+)\s*,\s*(\d+)\)\s*,\s*(\d+)\)$")
_FC_RE = re.compile(r"^FC\((\d+)\s*,\s*(\d+)\)$")
_STRIDE_RE = re.compile(r"^s\s*=\s*(\d+)$")
_INPUT_RE = re.compile(r"^input\s*\((\d+)\s*,\s*(\d+)\s*,\s*(\d+)\)$")
_WORD_LAYERS = {
    "bn": "batch_norm",
    "relu": "relu",
    "softmax": "softmax",
    "flatten": "flatten",
    "multiply": "outer_fuse",
    "concat": "concat",
}


def parse_model_spec(text: str) -> ModelSpec:
    """Parse and fully resolve a model spec from its text form."""
    name = None
    input_shape = None
    sections: list[tuple[str, list[str]]] = []
    section_layers: dict[str, list[LayerSpec]] = {}
    current: str | None = None

    def err(lineno, msg):
        return GraphError(f"model spec line {lineno}: {msg}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("model "):
            if name is not None:
                raise err(lineno, "duplicate model declaration")
            name = line[len("model "):].strip()
            if not name:
                raise err(lineno, "empty model name")
            continue
        m = _INPUT_RE.match(line)
        if m:
            if input_shape is not None:
                raise err(lineno, "duplicate input declaration")
            c, h, w = (int(g) for g in m.groups())
            input_shape = Shape4(batch=1, channels=c, height=h, width=w)
            continue
        if line.startswith("section "):
            rest = line[len("section "):].strip()
            if " from " in rest:
                sec_name, src_text = rest.split(" from ", 1)
                sources = [s.strip() for s in re.split(r"[,\s]+", src_text) if s.strip()]
            else:
                sec_name, sources = rest, ["input"]
            sec_name = sec_name.strip()
            if not sec_name or sec_name == "input":
                raise err(lineno, f"bad section name {sec_name!r}")
            if sec_name in section_layers:
                raise err(lineno, f"duplicate section {sec_name!r}")
            sections.append((sec_name, sources))
            section_layers[sec_name] = []
            current = sec_name
            continue
        # a layer line; open an implicit main section when none declared yet
        if current is None:
            sections.append(("main", ["input"]))
            section_layers["main"] = []
            current = "main"
        layers = section_layers[current]
        m = _STRIDE_RE.match(line)
        if m:
            if not layers or not layers[-1].kind.startswith("conv"):
                raise err(lineno, "stride line must follow a convolution")
            layers[-1].stride = int(m.group(1))
            if layers[-1].stride < 1:
                raise err(lineno, "stride must be >= 1")
            continue
        spec = _parse_layer_line(line, lineno)
        spec.name = f"{current}.{len(layers)}"
        layers.append(spec)

    if name is None:
        raise GraphError("model spec is missing a 'model NAME' line")
    if input_shape is None:
        raise GraphError(f"model {name!r} is missing an 'input (C, H, W)' line")
    if not sections:
        raise GraphError(f"model {name!r} declares no layers")
    for sec_name, layers in section_layers.items():
        if not layers:
            raise GraphError(f"section {sec_name!r} of model {name!r} is empty")

    spec = _wire_graph(name, input_shape, sections, section_layers)
    _propagate(spec)
    _compute_receptive_fields(spec)
    return spec


def _parse_layer_line(line: str, lineno: int) -> LayerSpec:
    m = _CONV_RE.match(line)
    if m:
        kh, kw, n = (int(g) for g in m.groups())
        if min(kh, kw, n) < 1:
            raise GraphError(f"model spec line {lineno}: conv geometry must be positive")
        return LayerSpec(name="", kind="conv", inputs=(), kernel=(kh, kw), out_channels=n)
    m = _POOL_RE.match(line)
    if m:
        kh, kw, s = (int(g) for g in m.groups())
        if kh != kw:
            raise GraphError(f"model spec line {lineno}: pooling windows are square")
        return LayerSpec(name="", kind="max_pool", inputs=(), kernel=(kh, kw),
                         stride=s, padding="valid")
    m = _FC_RE.match(line)
    if m:
        fin, fout = int(m.group(1)), int(m.group(2))
        return LayerSpec(name="", kind="fully_connected", inputs=(),
                         in_features=fin, out_features=fout)
    kind = _WORD_LAYERS.get(line.lower())
    if kind:
        return LayerSpec(name="", kind=kind, inputs=())
    raise GraphError(f"model spec line {lineno}: unrecognized layer {line!r}")


def _wire_graph(name, input_shape, sections, section_layers) -> ModelSpec:
    section_names = [s for s, _ in sections]
    outputs = {"input": "input"}
    ordered: list[LayerSpec] = []
    for sec_name, sources in sections:
        for src in sources:
            if src not in outputs and src not in section_names:
                raise GraphError(
                    f"section {sec_name!r} reads unknown source {src!r}")
            if src not in outputs:
                raise GraphError(
                    f"section {sec_name!r} reads section {src!r} before it is defined")
        feeds = tuple(outputs[src] for src in sources)
        for i, layer in enumerate(section_layers[sec_name]):
            if i == 0:
                if layer.kind in ("outer_fuse", "concat"):
                    layer.inputs = feeds
                elif len(feeds) == 1:
                    layer.inputs = feeds
                else:
                    raise GraphError(
                        f"section {sec_name!r} has {len(feeds)} sources; its first "
                        f"layer must be Multiply or Concat, not {layer.kind}")
            else:
                if layer.kind in ("outer_fuse", "concat"):
                    raise GraphError(
                        f"{layer.name}: {layer.table_notation()} must be the first "
                        f"layer of a multi-source section")
                layer.inputs = (ordered[-1].name,)
            ordered.append(layer)
        outputs[sec_name] = ordered[-1].name

    consumed = {inp for layer in ordered for inp in layer.inputs}
    for sec_name, _ in sections[:-1]:
        if outputs[sec_name] not in consumed:
            raise GraphError(f"section {sec_name!r} output is never consumed")
    if ordered[0].inputs != () and "input" not in consumed:
        raise GraphError(f"model {name!r} never reads the input")
    return ModelSpec(name=name, input_shape=input_shape, layers=ordered,
                     sections=sections)


_MAP, _VEC = "map", "vec"


def _propagate(spec: ModelSpec) -> None:
    """Resolve conv kinds, output shapes, and parameter counts in topo order."""
    from .layers import conv_output_size

    shapes: dict[str, tuple] = {
        "input": (_MAP, spec.input_shape.channels,
                  spec.input_shape.height, spec.input_shape.width)
    }

    def want_map(layer, shape):
        if shape[0] != _MAP:
            raise GraphError(
                f"{layer.name}: {layer.kind} needs a (C, H, W) feature map, got "
                f"a flat vector of {shape[1]} features")
        return shape[1:]

    for layer in spec.layers:
        ins = [shapes[i] for i in layer.inputs]
        if layer.kind == "conv":
            c, h, w = want_map(layer, ins[0])
            kh, kw = layer.kernel
            if (kh, kw) == (1, 1):
                layer.kind = "conv1x1"
            elif kh == 1 and kw == w and w > 1:
                layer.kind = "conv_fat"
            elif kw == 1 and kh == h and h > 1:
                layer.kind = "conv_tall"
            else:
                layer.kind = "conv2d"
            layer.in_channels = c
            layer.param_count = layer.out_channels * c * kh * kw + layer.out_channels
            if layer.kind == "conv_fat":
                out = (_MAP, layer.out_channels, h, 1)
            elif layer.kind == "conv_tall":
                out = (_MAP, layer.out_channels, 1, w)
            else:
                oh = conv_output_size(h, kh, layer.stride, layer.padding)
                ow = conv_output_size(w, kw, layer.stride, layer.padding)
                out = (_MAP, layer.out_channels, oh, ow)
        elif layer.kind == "max_pool":
            c, h, w = want_map(layer, ins[0])
            k = layer.kernel[0]
            if k > h or k > w:
                raise GraphError(f"{layer.name}: pool window {k} exceeds input {h}x{w}")
            out = (_MAP, c,
                   conv_output_size(h, k, layer.stride, "valid"),
                   conv_output_size(w, k, layer.stride, "valid"))
        elif layer.kind == "batch_norm":
            c, h, w = want_map(layer, ins[0])
            layer.in_channels = c
            layer.param_count = 2 * c
            out = ins[0]
        elif layer.kind in ("relu", "softmax"):
            out = ins[0]
        elif layer.kind == "flatten":
            c, h, w = want_map(layer, ins[0])
            out = (_VEC, c * h * w)
        elif layer.kind == "fully_connected":
            if ins[0][0] != _VEC:
                raise GraphError(
                    f"{layer.name}: fully-connected layers need flattened input; "
                    f"add a Flatten line before it")
            provided = ins[0][1]
            if provided != layer.in_features:
                raise GraphError(
                    f"{layer.name}: FC declares {layer.in_features} input features "
                    f"but the graph provides {provided}")
            layer.param_count = layer.in_features * layer.out_features + layer.out_features
            out = (_VEC, layer.out_features)
        elif layer.kind == "outer_fuse":
            if len(ins) != 2:
                raise GraphError(f"{layer.name}: Multiply fuses exactly two sources")
            (c1, h1, w1) = want_map(layer, ins[0])
            (c2, h2, w2) = want_map(layer, ins[1])
            if c1 != c2:
                raise GraphError(
                    f"{layer.name}: Multiply pairs channels one-to-one, got {c1} vs {c2}")
            if w1 != 1 or h2 != 1:
                raise GraphError(
                    f"{layer.name}: Multiply expects a column map (H, 1) then a row "
                    f"map (1, W); got {h1}x{w1} and {h2}x{w2}")
            out = (_MAP, c1, h1, w2)
        elif layer.kind == "concat":
            if len(ins) < 2:
                raise GraphError(f"{layer.name}: Concat needs at least two sources")
            maps = [want_map(layer, s) for s in ins]
            spatial = {(h, w) for _, h, w in maps}
            if len(spatial) != 1:
                raise GraphError(
                    f"{layer.name}: Concat spatial dims differ: "
                    + ", ".join(f"{h}x{w}" for _, h, w in maps))
            out = (_MAP, sum(c for c, _, _ in maps)) + maps[0][1:]
        else:
            raise GraphError(f"{layer.name}: unknown layer kind {layer.kind!r}")
        layer.out_shape = out
        shapes[layer.name] = out


def _compute_receptive_fields(spec: ModelSpec) -> None:
    cap_h, cap_w = spec.input_shape.height, spec.input_shape.width
    fields: dict[str, ReceptiveField] = {
        "input": ReceptiveField(1, 1, 1, 1)
    }
    for layer in spec.layers:
        ins = [fields[i] for i in layer.inputs]
        if layer.kind in ("conv2d", "conv1x1", "conv_fat", "conv_tall", "max_pool"):
            r = ins[0]
            kh, kw = layer.kernel
            rf = ReceptiveField(
                height=min(cap_h, r.height + (kh - 1) * r.stride_h),
                width=min(cap_w, r.width + (kw - 1) * r.stride_w),
                stride_h=r.stride_h * layer.stride,
                stride_w=r.stride_w * layer.stride,
            )
        elif layer.kind == "fully_connected":
            rf = ReceptiveField(cap_h, cap_w, 1, 1)
        elif len(ins) == 1:
            rf = ins[0]
        else:
            rf = ReceptiveField(
                height=min(cap_h, max(r.height for r in ins)),
                width=min(cap_w, max(r.width for r in ins)),
                stride_h=max(r.stride_h for r in ins),
                stride_w=max(r.stride_w for r in ins),
            )
        fields[layer.name] = rf
    spec._rf = fields  # type: ignore[attr-defined]


def propagate_shapes(spec: ModelSpec) -> list[tuple[str, tuple]]:
    """Per-layer output shapes: ('map', C, H, W) or ('vec', features)."""
    return [(layer.name, layer.out_shape) for layer in spec.layers]


def audit_parameters(spec: ModelSpec) -> ParamAudit:
    per_layer = [(l.name, l.kind, l.param_count) for l in spec.layers]
    return ParamAudit(per_layer=per_layer, total=sum(n for _, _, n in per_layer))


def receptive_fields(spec: ModelSpec) -> dict[str, ReceptiveField]:
    return dict(spec._rf)  # type: ignore[attr-defined]


def receptive_field(spec: ModelSpec, layer: str) -> ReceptiveField:
    fields = receptive_fields(spec)
    if layer not in fields:
        raise GraphError(f"unknown layer {layer!r} in model {spec.name!r}")
    return fields[layer]
