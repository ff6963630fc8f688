"""Reference inference engine for verifying clustered execution.

Deliberately naive: the point is reproducible arithmetic, not speed. Every
GEMM variant accumulates in the same fixed (i, k, j) loop order with fp32
multiplies and adds, no fused operations and no reassociation, so "bitwise
equal" is a meaningful, testable contract between plain weights, dequantized
weights, and on-the-fly codebook indirection.
"""

from __future__ import annotations

import numpy as np

from .cluster import (
    SCOPE_ALL_LAYERS,
    ClusteredModel,
    ConvParams,
    DarknetWeights,
    unpack_indices,
)
from .netdef import (
    CONVOLUTIONAL,
    ROUTE,
    SHORTCUT,
    UPSAMPLE,
    YOLO,
    LayerSpec,
    NetworkDef,
    infer_shapes,
)

LEAKY_SLOPE = np.float32(0.1)


def _as_f32(name: str, arr, inout: bool = False) -> np.ndarray:
    out = np.asarray(arr)
    if out.dtype != np.float32:
        raise TypeError(f"{name} must be float32, got {out.dtype}")
    flat = out.reshape(-1)
    if inout and not np.shares_memory(flat, out):
        raise ValueError(f"{name} must be a contiguous buffer (updated in place)")
    return flat


def _check_extent(name: str, size: int, rows: int, ld: int, cols: int):
    if ld < cols:
        raise ValueError(f"{name}: leading dimension {ld} < row width {cols}")
    needed = (rows - 1) * ld + cols if rows else 0
    if size < needed:
        raise ValueError(f"{name}: {size} elements, need at least {needed}")


def gemm_nn(M, N, K, alpha, A, lda, B, ldb, C, ldc):
    """C[i,j] += alpha * A[i,k] * B[k,j], accumulated in (i, k, j) order.

    Flat row-major fp32 buffers with explicit leading dimensions; C is
    updated in place and returned.
    """
    a = _as_f32("A", A)
    b = _as_f32("B", B)
    c = _as_f32("C", C, inout=True)
    _check_extent("A", a.size, M, lda, K)
    _check_extent("B", b.size, K, ldb, N)
    _check_extent("C", c.size, M, ldc, N)
    alpha = np.float32(alpha)
    for i in range(M):
        row = c[i * ldc : i * ldc + N]
        for k in range(K):
            a_part = alpha * a[i * lda + k]
            row += a_part * b[k * ldb : k * ldb + N]
    return C


def gemm_nn_centroids(M, N, K, alpha, centroids, indexes, lda, B, ldb, C, ldc):
    """gemm_nn with A[i,k] looked up as centroids[indexes[i*lda + k]]."""
    table = _as_f32("centroids", centroids)
    idx = np.asarray(indexes).reshape(-1)
    b = _as_f32("B", B)
    c = _as_f32("C", C, inout=True)
    _check_extent("indexes", idx.size, M, lda, K)
    _check_extent("B", b.size, K, ldb, N)
    _check_extent("C", c.size, M, ldc, N)
    if idx.size and (int(idx.min()) < 0 or int(idx.max()) >= table.size):
        raise ValueError(
            f"index out of range for {table.size}-entry centroid table"
        )
    alpha = np.float32(alpha)
    for i in range(M):
        row = c[i * ldc : i * ldc + N]
        for k in range(K):
            a_part = alpha * table[idx[i * lda + k]]
            row += a_part * b[k * ldb : k * ldb + N]
    return C


def gemm_nn_packed(M, N, K, alpha, centroids, packed, lda, B, ldb, C, ldc, base=0):
    """gemm_nn_centroids with indexes decoded from packed words on the fly.

    base offsets into the packed stream, so one global stream can serve many
    layers without materializing the decoded indexes.
    """
    table = _as_f32("centroids", centroids)
    b = _as_f32("B", B)
    c = _as_f32("C", C, inout=True)
    _check_extent("B", b.size, K, ldb, N)
    _check_extent("C", c.size, M, ldc, N)
    if base < 0 or (M and base + (M - 1) * lda + K > packed.count):
        raise ValueError("packed stream too short for requested extent")
    bits = packed.bits
    per_word = 32 // bits
    mask = (1 << bits) - 1
    words = packed.words
    alpha = np.float32(alpha)
    for i in range(M):
        row = c[i * ldc : i * ldc + N]
        for k in range(K):
            j = base + i * lda + k
            index = (int(words[j // per_word]) >> ((j % per_word) * bits)) & mask
            if index >= table.size:
                raise ValueError(
                    f"index {index} out of range for {table.size}-entry table"
                )
            a_part = alpha * table[index]
            row += a_part * b[k * ldb : k * ldb + N]
    return C


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Unfold a CHW fp32 tensor into a (c*k*k, out_h*out_w) matrix.

    Row (c*kernel + kr)*kernel + kc holds the input values that kernel cell
    (kr, kc) of channel c sees at each output position.
    """
    if x.ndim != 3:
        raise ValueError(f"expected CHW input, got shape {x.shape}")
    c, h, w = x.shape
    out_h = (h - kernel + 2 * pad) // stride + 1
    out_w = (w - kernel + 2 * pad) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError("kernel does not fit the padded input")
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    padded[:, pad : pad + h, pad : pad + w] = x
    cols = np.empty((c * kernel * kernel, out_h * out_w), dtype=np.float32)
    row = 0
    for ch in range(c):
        for kr in range(kernel):
            for kc in range(kernel):
                window = padded[
                    ch,
                    kr : kr + stride * out_h : stride,
                    kc : kc + stride * out_w : stride,
                ]
                cols[row] = window.reshape(-1)
                row += 1
    return cols


def leaky(x: np.ndarray) -> np.ndarray:
    """Darknet leaky activation: x if x > 0 else 0.1*x."""
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _conv_common(layer: LayerSpec, x: np.ndarray):
    if layer.kind != CONVOLUTIONAL:
        raise ValueError(f"conv forward called on {layer.kind} layer")
    if layer.in_shape is None or layer.out_shape is None:
        raise ValueError("layer shapes not inferred")
    expected = (layer.in_shape.c, layer.in_shape.h, layer.in_shape.w)
    if x.shape != expected:
        raise ValueError(f"input shape {x.shape} does not match layer {expected}")
    spec = layer.conv
    cols = im2col(x, spec.kernel, spec.stride, spec.pad)
    m = spec.filters
    kdim = layer.in_shape.c * spec.kernel * spec.kernel
    n = layer.out_shape.h * layer.out_shape.w
    out = np.zeros(m * n, dtype=np.float32)
    return spec, cols, m, kdim, n, out


def _finish_conv(layer: LayerSpec, out_flat, biases):
    spec = layer.conv
    out = out_flat.reshape(spec.filters, layer.out_shape.h, layer.out_shape.w)
    out += biases.reshape(-1, 1, 1)
    if spec.activation == "leaky":
        out = leaky(out)
    return out


def conv_forward(layer: LayerSpec, x: np.ndarray, params: ConvParams) -> np.ndarray:
    """One convolution layer: im2col, gemm, bias, activation."""
    if params.batch_normalized:
        raise ValueError("fold batch norm into the weights before inference")
    spec, cols, m, kdim, n, out = _conv_common(layer, x)
    if params.kernel.size != m * kdim:
        raise ValueError(
            f"kernel holds {params.kernel.size} weights, layer needs {m * kdim}"
        )
    gemm_nn(m, n, kdim, 1.0, params.kernel, kdim, cols.reshape(-1), n, out, n)
    return _finish_conv(layer, out, params.biases)


def conv_forward_clustered(
    layer: LayerSpec,
    x: np.ndarray,
    biases: np.ndarray,
    centroids: np.ndarray,
    packed,
    base: int = 0,
    on_the_fly: bool = False,
) -> np.ndarray:
    """Convolution with codebook-indirected weights.

    packed is a PackedIndices stream; base selects this layer's span within
    it. With on_the_fly the indexes are decoded inside the GEMM loop,
    otherwise they are unpacked up front. Both paths produce bitwise
    identical results.
    """
    spec, cols, m, kdim, n, out = _conv_common(layer, x)
    if base + m * kdim > packed.count:
        raise ValueError(
            f"index stream ends at {packed.count}, layer needs {base + m * kdim}"
        )
    if on_the_fly:
        gemm_nn_packed(
            m, n, kdim, 1.0, centroids, packed, kdim, cols.reshape(-1), n, out, n,
            base=base,
        )
    else:
        idx = unpack_indices(packed)[base : base + m * kdim]
        gemm_nn_centroids(
            m, n, kdim, 1.0, centroids, idx, kdim, cols.reshape(-1), n, out, n
        )
    return _finish_conv(layer, out, biases)


def _clustered_lookup(net: NetworkDef, weights: DarknetWeights, model: ClusteredModel):
    """Map conv layer index -> (centroids, packed, base) for either scope."""
    lookup = {}
    if model.scope == SCOPE_ALL_LAYERS:
        entry = model.entries[0]
        if entry.packed.count != sum(c.n_weights for c in weights.convs):
            raise ValueError(
                "global index stream length does not cover the model's weights"
            )
        base = 0
        for conv in weights.convs:
            lookup[conv.layer_index] = (entry.table.centroids, entry.packed, base)
            base += conv.n_weights
    else:
        by_layer = {e.layer_id: e for e in model.entries}
        for conv in weights.convs:
            entry = by_layer.get(conv.layer_index)
            if entry is None:
                raise ValueError(f"no codebook table for conv layer {conv.layer_index}")
            if entry.packed.count != conv.n_weights:
                raise ValueError(
                    f"layer {conv.layer_index}: table covers {entry.packed.count} "
                    f"weights, layer holds {conv.n_weights}"
                )
            lookup[conv.layer_index] = (entry.table.centroids, entry.packed, 0)
    return lookup


def run_network(
    net: NetworkDef,
    weights: DarknetWeights,
    x: np.ndarray,
    clustered: ClusteredModel | None = None,
    on_the_fly: bool = False,
) -> list[np.ndarray]:
    """Execute a toy network, returning every layer's output tensor.

    Convolutions use plain weights, or codebook indirection when a clustered
    model is given. Yolo layers pass their input through unchanged; decoding
    beyond raw activations is out of scope here.
    """
    if any(layer.in_shape is None for layer in net.layers):
        net = infer_shapes(net)
    x = np.asarray(x, dtype=np.float32)
    expected = (net.input.c, net.input.h, net.input.w)
    if x.shape != expected:
        raise ValueError(f"input shape {x.shape} does not match network {expected}")
    lookup = _clustered_lookup(net, weights, clustered) if clustered else None
    outputs: list[np.ndarray] = []
    for index, layer in enumerate(net.layers):
        current = outputs[index - 1] if index else x
        if layer.kind == CONVOLUTIONAL:
            params = weights.conv_for_layer(index)
            if params.batch_normalized:
                raise ValueError(
                    f"layer {index} still carries batch-norm statistics; fold first"
                )
            if lookup is None:
                out = conv_forward(layer, current, params)
            else:
                centroids, packed, base = lookup[index]
                out = conv_forward_clustered(
                    layer, current, params.biases, centroids, packed,
                    base=base, on_the_fly=on_the_fly,
                )
        elif layer.kind == SHORTCUT:
            out = current + outputs[layer.from_index]
        elif layer.kind == ROUTE:
            out = np.concatenate([outputs[s] for s in layer.sources], axis=0)
        elif layer.kind == UPSAMPLE:
            out = np.repeat(np.repeat(current, layer.factor, axis=1), layer.factor, axis=2)
        elif layer.kind == YOLO:
            out = current
        else:
            raise ValueError(f"cannot execute layer kind {layer.kind!r}")
        shape = layer.out_shape
        assert out.shape == (shape.c, shape.h, shape.w), (
            f"layer {index} produced {out.shape}, inference said "
            f"{(shape.c, shape.h, shape.w)}"
        )
        outputs.append(out)
    return outputs
