"""Darknet-style network definition parsing and tensor shape inference."""

from __future__ import annotations

from dataclasses import dataclass, replace

CONVOLUTIONAL = "convolutional"
SHORTCUT = "shortcut"
ROUTE = "route"
UPSAMPLE = "upsample"
YOLO = "yolo"

LAYER_KINDS = (CONVOLUTIONAL, SHORTCUT, ROUTE, UPSAMPLE, YOLO)

ACTIVATIONS = ("linear", "leaky")


class ConfigError(ValueError):
    """Malformed or unsupported network configuration text."""


class ShapeError(ValueError):
    """Layer shapes cannot be inferred consistently."""


@dataclass(frozen=True)
class TensorShape:
    """Feature map extent: h rows, w columns, c channels."""

    h: int
    w: int
    c: int

    def __post_init__(self):
        if min(self.h, self.w, self.c) < 1:
            raise ShapeError(
                f"tensor dimensions must be >= 1, got {self.h}x{self.w}x{self.c}"
            )

    @property
    def elements(self) -> int:
        return self.h * self.w * self.c


@dataclass(frozen=True)
class ConvSpec:
    """Convolution parameters. pad is the number of zero rows/cols per border."""

    filters: int
    kernel: int
    stride: int
    pad: int
    batch_normalize: bool = False
    activation: str = "linear"

    def __post_init__(self):
        if self.filters < 1:
            raise ConfigError(f"filters must be >= 1, got {self.filters}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ConfigError(f"padding must be >= 0, got {self.pad}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unsupported activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )


@dataclass(frozen=True)
class LayerSpec:
    """One network layer.

    Exactly the fields relevant to the layer's kind are set. Shape fields
    (in_shape, out_shape, source_shapes) are filled by infer_shapes; shortcut
    and route layers carry the shapes of all maps they consume so that access
    counting needs no surrounding context.
    """

    kind: str
    conv: ConvSpec | None = None
    from_index: int | None = None  # shortcut source, absolute
    sources: tuple[int, ...] | None = None  # route sources, absolute
    factor: int | None = None  # upsample scale
    meta: dict | None = None  # yolo head parameters
    in_shape: TensorShape | None = None
    out_shape: TensorShape | None = None
    source_shapes: tuple[TensorShape, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkDef:
    """Input shape plus an ordered sequence of layers."""

    input: TensorShape
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("network defines no layers")

    def kind_census(self) -> dict[str, int]:
        census = {kind: 0 for kind in LAYER_KINDS}
        for layer in self.layers:
            census[layer.kind] += 1
        return census


def _split_sections(text: str) -> list[tuple[str, dict[str, str]]]:
    sections: list[tuple[str, dict[str, str]]] = []
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            current = {}
            sections.append((line[1:-1].strip().lower(), current))
        else:
            if current is None:
                raise ConfigError(f"line {lineno}: key/value pair outside any section")
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            current[key.strip()] = value.strip()
    return sections


def _resolve_index(value: int, current: int) -> int:
    # Negative indices are relative to the current position, e.g. from=-3 in
    # layer 10 refers to layer 7. Positive indices are absolute.
    absolute = current + value if value < 0 else value
    if not 0 <= absolute < current:
        raise ConfigError(
            f"layer {current}: source index {value} does not resolve to an earlier layer"
        )
    return absolute


def _parse_int_list(value: str) -> list[int]:
    return [int(tok) for tok in value.replace(",", " ").split()]


def _parse_yolo_meta(options: dict[str, str]) -> dict:
    meta: dict = {"classes": int(options.get("classes", 80))}
    if meta["classes"] < 1:
        raise ConfigError(f"yolo classes must be >= 1, got {meta['classes']}")
    if "mask" in options:
        meta["mask"] = tuple(_parse_int_list(options["mask"]))
    if "anchors" in options:
        meta["anchors"] = tuple(float(tok) for tok in options["anchors"].replace(",", " ").split())
    if "num" in options:
        meta["num"] = int(options["num"])
    return meta


def _parse_layer(name: str, options: dict[str, str], index: int) -> LayerSpec:
    if name == CONVOLUTIONAL:
        size = int(options.get("size", 1))
        # pad=1 requests same-style padding of size//2; an explicit padding=
        # key gives the exact border width.
        if int(options.get("pad", 0)):
            pad = size // 2
        else:
            pad = int(options.get("padding", 0))
        conv = ConvSpec(
            filters=int(options.get("filters", 1)),
            kernel=size,
            stride=int(options.get("stride", 1)),
            pad=pad,
            batch_normalize=bool(int(options.get("batch_normalize", 0))),
            activation=options.get("activation", "linear"),
        )
        return LayerSpec(kind=CONVOLUTIONAL, conv=conv)
    if name == SHORTCUT:
        if "from" not in options:
            raise ConfigError(f"layer {index}: shortcut requires a from= key")
        return LayerSpec(kind=SHORTCUT, from_index=_resolve_index(int(options["from"]), index))
    if name == ROUTE:
        if "layers" not in options:
            raise ConfigError(f"layer {index}: route requires a layers= key")
        tokens = _parse_int_list(options["layers"])
        if not 1 <= len(tokens) <= 2:
            raise ConfigError(
                f"layer {index}: route supports one or two sources, got {len(tokens)}"
            )
        return LayerSpec(
            kind=ROUTE, sources=tuple(_resolve_index(tok, index) for tok in tokens)
        )
    if name == UPSAMPLE:
        factor = int(options.get("stride", 2))
        if factor != 2:
            raise ConfigError(f"layer {index}: only factor-2 upsampling is modeled, got {factor}")
        return LayerSpec(kind=UPSAMPLE, factor=factor)
    if name == YOLO:
        return LayerSpec(kind=YOLO, meta=_parse_yolo_meta(options))
    raise ConfigError(f"layer {index}: unknown section kind [{name}]")


def parse_config(text: str) -> NetworkDef:
    """Parse configuration text into a NetworkDef (shapes not yet inferred).

    Unknown keys inside known sections are ignored; unknown section kinds are
    an error.
    """
    sections = _split_sections(text)
    if not sections:
        raise ConfigError("empty configuration")
    first_name, net_options = sections[0]
    if first_name not in ("net", "network"):
        raise ConfigError(f"first section must be [net], got [{first_name}]")
    missing = [key for key in ("width", "height", "channels") if key not in net_options]
    if missing:
        raise ConfigError(f"[net] section missing input dimensions: {', '.join(missing)}")
    input_shape = TensorShape(
        h=int(net_options["height"]),
        w=int(net_options["width"]),
        c=int(net_options["channels"]),
    )
    layers: list[LayerSpec] = []
    for name, options in sections[1:]:
        index = len(layers)
        try:
            layers.append(_parse_layer(name, options, index))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"layer {index} [{name}]: {exc}") from exc
    return NetworkDef(input=input_shape, layers=tuple(layers))


def infer_shapes(net: NetworkDef) -> NetworkDef:
    """Return a copy of net with in/out shapes filled for every layer.

    Convolution output extent is (input - kernel + 2 * pad) // stride + 1 per
    axis (floor division).
    """
    shaped: list[LayerSpec] = []
    outputs: list[TensorShape] = []
    for index, layer in enumerate(net.layers):
        previous = outputs[index - 1] if index else net.input
        if layer.kind == CONVOLUTIONAL:
            spec = layer.conv
            out_h = (previous.h - spec.kernel + 2 * spec.pad) // spec.stride + 1
            out_w = (previous.w - spec.kernel + 2 * spec.pad) // spec.stride + 1
            if out_h < 1 or out_w < 1:
                raise ShapeError(
                    f"layer {index}: kernel {spec.kernel} stride {spec.stride} "
                    f"pad {spec.pad} yields empty output from {previous.h}x{previous.w}"
                )
            new = replace(
                layer,
                in_shape=previous,
                out_shape=TensorShape(h=out_h, w=out_w, c=spec.filters),
            )
        elif layer.kind == SHORTCUT:
            other = outputs[layer.from_index]
            if other != previous:
                raise ShapeError(
                    f"layer {index}: shortcut operands differ, "
                    f"{previous.h}x{previous.w}x{previous.c} vs {other.h}x{other.w}x{other.c}"
                )
            new = replace(
                layer,
                in_shape=previous,
                out_shape=previous,
                source_shapes=(previous, other),
            )
        elif layer.kind == ROUTE:
            shapes = tuple(outputs[s] for s in layer.sources)
            if len(shapes) == 2 and (shapes[0].h, shapes[0].w) != (shapes[1].h, shapes[1].w):
                raise ShapeError(
                    f"layer {index}: route sources disagree on spatial extent, "
                    f"{shapes[0].h}x{shapes[0].w} vs {shapes[1].h}x{shapes[1].w}"
                )
            out = TensorShape(
                h=shapes[0].h, w=shapes[0].w, c=sum(s.c for s in shapes)
            )
            new = replace(layer, in_shape=shapes[0], out_shape=out, source_shapes=shapes)
        elif layer.kind == UPSAMPLE:
            out = TensorShape(h=previous.h * 2, w=previous.w * 2, c=previous.c)
            new = replace(layer, in_shape=previous, out_shape=out)
        else:  # yolo: raw pass-through
            new = replace(layer, in_shape=previous, out_shape=previous)
        shaped.append(new)
        outputs.append(new.out_shape)
    return NetworkDef(input=net.input, layers=tuple(shaped))


def serialize_config(net: NetworkDef) -> str:
    """Emit configuration text that parses back to an equal NetworkDef."""
    lines = [
        "[net]",
        f"width={net.input.w}",
        f"height={net.input.h}",
        f"channels={net.input.c}",
        "",
    ]
    for layer in net.layers:
        if layer.kind == CONVOLUTIONAL:
            spec = layer.conv
            lines.append("[convolutional]")
            if spec.batch_normalize:
                lines.append("batch_normalize=1")
            lines.append(f"filters={spec.filters}")
            lines.append(f"size={spec.kernel}")
            lines.append(f"stride={spec.stride}")
            lines.append(f"padding={spec.pad}")
            lines.append(f"activation={spec.activation}")
        elif layer.kind == SHORTCUT:
            lines.append("[shortcut]")
            lines.append(f"from={layer.from_index}")
        elif layer.kind == ROUTE:
            lines.append("[route]")
            lines.append("layers=" + ",".join(str(s) for s in layer.sources))
        elif layer.kind == UPSAMPLE:
            lines.append("[upsample]")
            lines.append(f"stride={layer.factor}")
        else:
            lines.append("[yolo]")
            meta = layer.meta or {}
            if "mask" in meta:
                lines.append("mask=" + ",".join(str(m) for m in meta["mask"]))
            if "anchors" in meta:
                lines.append(
                    "anchors=" + ",".join(f"{a:g}" for a in meta["anchors"])
                )
            lines.append(f"classes={meta.get('classes', 80)}")
            if "num" in meta:
                lines.append(f"num={meta['num']}")
        lines.append("")
    return "\n".join(lines)
