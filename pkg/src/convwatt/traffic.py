"""Per-layer DRAM element accesses and floating-point operation counts.

The access model follows an output-stationary dataflow: convolution partial
sums accumulate inside PE register files, so convolution outputs are written
to DRAM exactly once and never read back, while the full filter set is
re-streamed from DRAM for every computed row of output.

All counts are exact integers of 32-bit element accesses (packing into wider
bus transactions happens later, in the energy model).
"""

from __future__ import annotations

from dataclasses import dataclass

from .netdef import (
    CONVOLUTIONAL,
    ROUTE,
    SHORTCUT,
    UPSAMPLE,
    YOLO,
    LayerSpec,
    NetworkDef,
    ShapeError,
)


class UnsupportedLayerError(ValueError):
    """Layer falls outside the modeled (kernel, stride) families."""


SUPPORTED_CONV = ((3, 1), (3, 2), (1, 1))

# Weight-streaming row conventions. Filters are re-streamed once per computed
# output row; 3x3 kernels skip the two border rows. "output_rows" counts the
# layer's own output rows (the convention that matches the model's published
# totals); "input_rows" counts input rows instead. The two coincide for every
# stride-1 same-padded layer and differ only under stride 2.
ROWS_OUTPUT = "output_rows"
ROWS_INPUT = "input_rows"
ROW_CONVENTIONS = (ROWS_OUTPUT, ROWS_INPUT)

# Bucketing of feature-map re-reads done by shortcut/route/upsample/yolo
# layers. "inputs" reports them all in the input-read bucket (default; this
# matches the published access breakdown); "split" reports re-reads of maps
# produced before the immediately preceding layer as output reads instead.
READS_AS_INPUTS = "inputs"
READS_SPLIT = "split"
READ_BUCKETS = (READS_AS_INPUTS, READS_SPLIT)


@dataclass(frozen=True)
class AccessProfile:
    """DRAM element accesses bucketed as weights / inputs / outputs."""

    weight_reads: int = 0
    input_reads: int = 0
    output_reads: int = 0
    output_writes: int = 0

    def __post_init__(self):
        for name in ("weight_reads", "input_reads", "output_reads", "output_writes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def __add__(self, other: "AccessProfile") -> "AccessProfile":
        return AccessProfile(
            self.weight_reads + other.weight_reads,
            self.input_reads + other.input_reads,
            self.output_reads + other.output_reads,
            self.output_writes + other.output_writes,
        )

    @property
    def total_reads(self) -> int:
        return self.weight_reads + self.input_reads + self.output_reads

    @property
    def total_elements(self) -> int:
        return self.total_reads + self.output_writes


@dataclass(frozen=True)
class OpProfile:
    """Floating-point operation counts for one inference pass."""

    macs: int = 0
    fp_add: int = 0
    fp_sub: int = 0
    fp_mul: int = 0
    fp_div: int = 0
    fp_exp: int = 0
    fp_sqrt: int = 0

    def __post_init__(self):
        for name in ("macs", "fp_add", "fp_sub", "fp_mul", "fp_div", "fp_exp", "fp_sqrt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def __add__(self, other: "OpProfile") -> "OpProfile":
        return OpProfile(
            self.macs + other.macs,
            self.fp_add + other.fp_add,
            self.fp_sub + other.fp_sub,
            self.fp_mul + other.fp_mul,
            self.fp_div + other.fp_div,
            self.fp_exp + other.fp_exp,
            self.fp_sqrt + other.fp_sqrt,
        )

    @property
    def total(self) -> int:
        return (
            self.macs
            + self.fp_add
            + self.fp_sub
            + self.fp_mul
            + self.fp_div
            + self.fp_exp
            + self.fp_sqrt
        )

    @property
    def mac_share(self) -> float:
        return self.macs / self.total if self.total else 0.0


def _require_shapes(layer: LayerSpec):
    if layer.in_shape is None or layer.out_shape is None:
        raise ShapeError("layer shapes not inferred; run infer_shapes first")


def conv_accesses(
    layer: LayerSpec,
    row_convention: str = ROWS_OUTPUT,
    generalized: bool = False,
) -> AccessProfile:
    """Element accesses of one convolution layer.

    Weight reads stream the whole filter set once per computed output row
    (interior rows only for 3x3 kernels). Input rows are fetched once per
    kernel row they overlap; they are broadcast across filters, so input
    reads do not scale with the filter count. Outputs are written once.

    Only (kernel, stride) in {(3,1), (3,2), (1,1)} are modeled. generalized=True
    enables a fallback for other shapes that streams weights and inputs once
    per output row with no border adjustment.
    """
    if layer.kind != CONVOLUTIONAL:
        raise ValueError(f"conv_accesses called on {layer.kind} layer")
    _require_shapes(layer)
    if row_convention not in ROW_CONVENTIONS:
        raise ValueError(f"unknown row convention {row_convention!r}")
    spec = layer.conv
    i, o = layer.in_shape, layer.out_shape
    k, s = spec.kernel, spec.stride
    params = k * k * i.c * spec.filters
    writes = o.h * o.w * spec.filters
    if (k, s) not in SUPPORTED_CONV:
        if not generalized:
            raise UnsupportedLayerError(
                f"no access formula for kernel {k} stride {s}; "
                f"modeled pairs are {SUPPORTED_CONV}"
            )
        return AccessProfile(
            weight_reads=params * o.h,
            input_reads=i.w * k * i.c * o.h,
            output_writes=writes,
        )
    base_h = o.h if row_convention == ROWS_OUTPUT else i.h
    if k == 3:
        if base_h < 3 or i.h < 3:
            raise UnsupportedLayerError(
                f"map of {base_h} rows is too small for the 3x3 access model"
            )
        weight_rows = base_h - 2
    else:
        weight_rows = base_h
    if (k, s) == (3, 1):
        input_reads = i.w * 3 * i.c * (i.h - 2)
    elif (k, s) == (3, 2):
        # stride 2 touches one extra (padded) column per fetched row
        input_reads = (i.w + 1) * 3 * i.c * (i.h - 2)
    else:
        input_reads = i.w * i.c * i.h
    return AccessProfile(
        weight_reads=params * weight_rows,
        input_reads=input_reads,
        output_writes=writes,
    )


def other_layer_accesses(layer: LayerSpec, read_bucket: str = READS_AS_INPUTS) -> AccessProfile:
    """Element accesses of shortcut/route/upsample/yolo layers.

    These layers re-read feature maps produced earlier and write their result
    once (upsampling writes each input element four times). read_bucket picks
    the reporting bucket for the re-reads; totals are unaffected.
    """
    if layer.kind == CONVOLUTIONAL:
        raise ValueError("use conv_accesses for convolution layers")
    _require_shapes(layer)
    if read_bucket not in READ_BUCKETS:
        raise ValueError(f"unknown read bucket {read_bucket!r}")
    if layer.kind == SHORTCUT:
        previous, other = layer.source_shapes
        writes = previous.elements  # one result map, written once
        if read_bucket == READS_AS_INPUTS:
            return AccessProfile(
                input_reads=previous.elements + other.elements, output_writes=writes
            )
        return AccessProfile(
            input_reads=previous.elements,
            output_reads=other.elements,
            output_writes=writes,
        )
    if layer.kind == ROUTE:
        moved = sum(shape.elements for shape in layer.source_shapes)
        if read_bucket == READS_AS_INPUTS:
            return AccessProfile(input_reads=moved, output_writes=moved)
        return AccessProfile(output_reads=moved, output_writes=moved)
    if layer.kind == UPSAMPLE:
        n = layer.in_shape.elements
        if read_bucket == READS_AS_INPUTS:
            return AccessProfile(input_reads=n, output_writes=4 * n)
        return AccessProfile(output_reads=n, output_writes=4 * n)
    if layer.kind == YOLO:
        n = layer.in_shape.elements
        if read_bucket == READS_AS_INPUTS:
            return AccessProfile(input_reads=n, output_writes=n)
        return AccessProfile(output_reads=n, output_writes=n)
    raise ValueError(f"no access model for layer kind {layer.kind!r}")


def layer_access_profile(
    layer: LayerSpec,
    row_convention: str = ROWS_OUTPUT,
    read_bucket: str = READS_AS_INPUTS,
    generalized: bool = False,
) -> AccessProfile:
    if layer.kind == CONVOLUTIONAL:
        return conv_accesses(layer, row_convention=row_convention, generalized=generalized)
    return other_layer_accesses(layer, read_bucket=read_bucket)


def aggregate(
    net: NetworkDef,
    row_convention: str = ROWS_OUTPUT,
    read_bucket: str = READS_AS_INPUTS,
    generalized: bool = False,
) -> tuple[list[AccessProfile], AccessProfile]:
    """Per-layer access profiles and their element-wise sum."""
    per_layer = [
        layer_access_profile(
            layer,
            row_convention=row_convention,
            read_bucket=read_bucket,
            generalized=generalized,
        )
        for layer in net.layers
    ]
    total = AccessProfile()
    for profile in per_layer:
        total = total + profile
    return per_layer, total


def conv_macs(layer: LayerSpec) -> int:
    """Multiply-accumulate count of one convolution layer."""
    if layer.kind != CONVOLUTIONAL:
        raise ValueError(f"conv_macs called on {layer.kind} layer")
    _require_shapes(layer)
    spec = layer.conv
    i, o = layer.in_shape, layer.out_shape
    return o.h * o.w * spec.kernel * spec.kernel * i.c * spec.filters


def _yolo_ops(layer: LayerSpec) -> OpProfile:
    # Each anchor predicts 2 box offsets, 2 box sizes, 1 objectness and the
    # class scores. Offsets, objectness and class scores pass through a
    # logistic (one exp, one add, one div each); box sizes are exponentiated
    # and scaled by their anchor prior (one exp, one mul each).
    meta = layer.meta or {}
    classes = meta.get("classes", 80)
    per_anchor = classes + 5
    if "mask" in meta:
        n_anchors = len(meta["mask"])
        if n_anchors * per_anchor != layer.in_shape.c:
            raise ShapeError(
                f"yolo layer expects {n_anchors * per_anchor} channels "
                f"for {n_anchors} anchors x {per_anchor}, got {layer.in_shape.c}"
            )
    else:
        if layer.in_shape.c % per_anchor:
            raise ShapeError(
                f"yolo channel count {layer.in_shape.c} is not a multiple of {per_anchor}"
            )
        n_anchors = layer.in_shape.c // per_anchor
    cells = layer.in_shape.h * layer.in_shape.w
    logistic = cells * n_anchors * (classes + 3)
    box = cells * n_anchors * 2
    return OpProfile(
        fp_add=logistic, fp_div=logistic, fp_exp=logistic + box, fp_mul=box
    )


def op_profile(net: NetworkDef) -> OpProfile:
    """Floating-point operation census for one inference pass.

    Leaky activations cost one compare (priced as a subtraction) and one
    multiply per output element. Batch normalization is folded offline and
    adds no runtime work. Shortcuts cost one add per output element;
    upsampling and routing move data without arithmetic.
    """
    total = OpProfile()
    for layer in net.layers:
        _require_shapes(layer)
        if layer.kind == CONVOLUTIONAL:
            n = layer.out_shape.elements
            leaky = layer.conv.activation == "leaky"
            total = total + OpProfile(
                macs=conv_macs(layer),
                fp_sub=n if leaky else 0,
                fp_mul=n if leaky else 0,
            )
        elif layer.kind == SHORTCUT:
            total = total + OpProfile(fp_add=layer.out_shape.elements)
        elif layer.kind == YOLO:
            total = total + _yolo_ops(layer)
        # upsample and route: pure data movement
    return total
