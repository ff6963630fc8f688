"""Config parsing and shape inference."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from convwatt.netdef import (
    CONVOLUTIONAL,
    ROUTE,
    SHORTCUT,
    UPSAMPLE,
    YOLO,
    ConfigError,
    ConvSpec,
    NetworkDef,
    ShapeError,
    TensorShape,
    infer_shapes,
    parse_config,
    serialize_config,
)

MINIMAL = "[net]\nwidth=8\nheight=8\nchannels=3\n[convolutional]\nfilters=4\nsize=3\nstride=1\npad=1"


def conv_chain_cfg(width, height, channels, convs):
    lines = [f"[net]\nwidth={width}\nheight={height}\nchannels={channels}"]
    for filters, size, stride in convs:
        lines.append(
            f"[convolutional]\nfilters={filters}\nsize={size}\nstride={stride}\npad=1"
        )
    return "\n".join(lines)


class TestParse:
    def test_minimal_conv(self):
        net = parse_config(MINIMAL)
        assert net.input == TensorShape(h=8, w=8, c=3)
        assert len(net.layers) == 1
        layer = net.layers[0]
        assert layer.kind == CONVOLUTIONAL
        assert layer.conv == ConvSpec(
            filters=4, kernel=3, stride=1, pad=1, batch_normalize=False
        )

    def test_pad_key_means_same_padding(self):
        net = parse_config(MINIMAL.replace("size=3", "size=5"))
        assert net.layers[0].conv.pad == 2

    def test_padding_key_is_exact(self):
        net = parse_config(MINIMAL.replace("pad=1", "padding=2"))
        assert net.layers[0].conv.pad == 2

    def test_negative_shortcut_resolves_relative(self):
        convs = "\n".join("[convolutional]\nfilters=2\nsize=1" for _ in range(10))
        net = parse_config(f"[net]\nwidth=4\nheight=4\nchannels=1\n{convs}\n[shortcut]\nfrom=-3")
        assert net.layers[10].kind == SHORTCUT
        assert net.layers[10].from_index == 7

    def test_positive_route_index_is_absolute(self):
        convs = "\n".join("[convolutional]\nfilters=2\nsize=1" for _ in range(4))
        net = parse_config(f"[net]\nwidth=4\nheight=4\nchannels=1\n{convs}\n[route]\nlayers=1")
        assert net.layers[4].sources == (1,)

    def test_comments_and_blanks_ignored(self):
        text = "# header\n\n[net]\nwidth=4 \n height=4\nchannels=1\n; note\n[convolutional]\nfilters=1\nsize=1\n"
        net = parse_config(text)
        assert net.input == TensorShape(4, 4, 1)

    def test_unknown_keys_ignored(self):
        net = parse_config(MINIMAL + "\nmomentum=0.9\nlearning_rate=0.001")
        assert net.layers[0].conv.filters == 4

    def test_yolo_metadata(self):
        text = MINIMAL + "\n[yolo]\nmask=0,1,2\nanchors=10,13, 16,30\nclasses=80\nnum=9"
        meta = parse_config(text).layers[1].meta
        assert meta["mask"] == (0, 1, 2)
        assert meta["anchors"] == (10.0, 13.0, 16.0, 30.0)
        assert meta["classes"] == 80
        assert meta["num"] == 9

    @pytest.mark.parametrize(
        "text, fragment",
        [
            ("", "empty"),
            ("[convolutional]\nfilters=1", "first section"),
            ("[net]\nwidth=8\nchannels=3\n[convolutional]\nsize=1", "height"),
            (MINIMAL + "\n[maxpool]\nsize=2", "unknown section"),
            (MINIMAL.replace("size=3", "size=2"), "odd"),
            (MINIMAL.replace("stride=1", "stride=0"), "stride"),
            (MINIMAL + "\n[shortcut]\nfrom=-5", "earlier layer"),
            (MINIMAL + "\n[shortcut]\nfrom=1", "earlier layer"),
            (MINIMAL + "\n[shortcut]", "from="),
            (MINIMAL + "\n[route]\nlayers=0,0,0", "one or two"),
            (MINIMAL + "\n[route]", "layers="),
            (MINIMAL + "\n[upsample]\nstride=4", "factor-2"),
            (MINIMAL + "\n[yolo]\nclasses=0", "classes"),
            (MINIMAL.replace("filters=4", "filters=nine"), "convolutional"),
            ("width=8\n[net]", "outside any section"),
            ("[net\nwidth=8", "section header"),
            ("[net]\nwidth", "key=value"),
            (MINIMAL + "\nactivation=relu6", "activation"),
        ],
    )
    def test_rejects_malformed(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            parse_config(text)

    def test_no_layers_rejected(self):
        with pytest.raises(ConfigError, match="no layers"):
            parse_config("[net]\nwidth=8\nheight=8\nchannels=3")


class TestInferShapes:
    def test_same_padding_identity(self):
        net = infer_shapes(parse_config(conv_chain_cfg(608, 608, 3, [(32, 3, 1)])))
        assert net.layers[0].out_shape == TensorShape(608, 608, 32)

    def test_stride_two_halves(self):
        net = infer_shapes(parse_config(conv_chain_cfg(608, 608, 3, [(64, 3, 2)])))
        assert net.layers[0].out_shape == TensorShape(304, 304, 64)

    def test_floor_division_on_odd_extent(self):
        net = infer_shapes(parse_config(conv_chain_cfg(7, 7, 1, [(1, 3, 2)])))
        # (7 - 3 + 2) // 2 + 1
        assert net.layers[0].out_shape == TensorShape(4, 4, 1)

    def test_upsample_doubles(self, toy_net):
        layer = toy_net.layers[4]
        assert layer.kind == UPSAMPLE
        assert layer.in_shape == TensorShape(4, 4, 4)
        assert layer.out_shape == TensorShape(8, 8, 4)

    def test_route_concatenates_channels(self, toy_net):
        layer = toy_net.layers[5]
        assert layer.kind == ROUTE
        assert layer.out_shape == TensorShape(8, 8, 12)
        assert layer.source_shapes == (TensorShape(8, 8, 4), TensorShape(8, 8, 8))

    def test_shortcut_and_yolo_passthrough(self, toy_net):
        assert toy_net.layers[2].out_shape == toy_net.layers[1].out_shape
        assert toy_net.layers[6].out_shape == toy_net.layers[5].out_shape

    def test_unpadded_kernel_larger_than_input(self):
        text = conv_chain_cfg(2, 2, 1, []) + "\n[convolutional]\nfilters=1\nsize=3\nstride=1"
        with pytest.raises(ShapeError, match="empty output"):
            infer_shapes(parse_config(text))

    def test_shortcut_shape_mismatch(self):
        text = conv_chain_cfg(8, 8, 1, [(2, 3, 1), (2, 3, 2)]) + "\n[shortcut]\nfrom=-2"
        with pytest.raises(ShapeError, match="shortcut operands differ"):
            infer_shapes(parse_config(text))

    def test_route_spatial_mismatch(self):
        text = conv_chain_cfg(8, 8, 1, [(2, 3, 1), (2, 3, 2)]) + "\n[route]\nlayers=-1,-2"
        with pytest.raises(ShapeError, match="spatial extent"):
            infer_shapes(parse_config(text))

    @given(
        h=st.integers(min_value=1, max_value=32),
        w=st.integers(min_value=1, max_value=32),
        c=st.integers(min_value=1, max_value=4),
        kernel=st.sampled_from([1, 3, 5]),
        filters=st.integers(min_value=1, max_value=8),
    )
    def test_same_padding_stride_one_preserves_extent(self, h, w, c, kernel, filters):
        text = (
            f"[net]\nwidth={w}\nheight={h}\nchannels={c}\n"
            f"[convolutional]\nfilters={filters}\nsize={kernel}\nstride=1\npad=1"
        )
        net = infer_shapes(parse_config(text))
        assert net.layers[0].out_shape == TensorShape(h, w, filters)

    def test_inference_is_deterministic(self, toy_net):
        again = infer_shapes(parse_config(serialize_config(toy_net)))
        assert again == toy_net


class TestRoundtrip:
    def test_toy_roundtrip(self, toy_net):
        unshaped = parse_config(serialize_config(toy_net))
        assert parse_config(serialize_config(unshaped)) == unshaped

    def test_shapes_do_not_leak_into_text(self, toy_net):
        assert serialize_config(toy_net) == serialize_config(
            parse_config(serialize_config(toy_net))
        )

    @given(
        dims=st.tuples(
            st.integers(min_value=3, max_value=16),
            st.integers(min_value=3, max_value=16),
            st.integers(min_value=1, max_value=3),
        ),
        convs=st.lists(
            st.tuples(
                st.integers(min_value=1, max_value=8),
                st.sampled_from([1, 3]),
                st.sampled_from([1, 2]),
            ),
            min_size=1,
            max_size=6,
        ),
    )
    def test_random_conv_chains_roundtrip(self, dims, convs):
        h, w, c = dims
        net = parse_config(conv_chain_cfg(w, h, c, convs))
        assert parse_config(serialize_config(net)) == net


class TestFixture:
    def test_layer_census(self, yolov3_net):
        census = yolov3_net.kind_census()
        assert census[CONVOLUTIONAL] == 75
        assert census[SHORTCUT] == 23
        assert census[ROUTE] == 4
        assert census[UPSAMPLE] == 2
        assert census[YOLO] == 3
        assert len(yolov3_net.layers) == 107

    def test_input_resolution(self, yolov3_net):
        assert yolov3_net.input == TensorShape(608, 608, 3)

    def test_backbone_landmmarks(self, yolov3_net):
        assert yolov3_net.layers[0].out_shape == TensorShape(608, 608, 32)
        assert yolov3_net.layers[1].out_shape == TensorShape(304, 304, 64)

    def test_detection_head_shapes(self, yolov3_net):
        heads = [l for l in yolov3_net.layers if l.kind == YOLO]
        assert [l.out_shape for l in heads] == [
            TensorShape(19, 19, 255),
            TensorShape(38, 38, 255),
            TensorShape(76, 76, 255),
        ]

    def test_upsample_stages(self, yolov3_net):
        ups = [l for l in yolov3_net.layers if l.kind == UPSAMPLE]
        assert [(l.in_shape, l.out_shape) for l in ups] == [
            (TensorShape(19, 19, 256), TensorShape(38, 38, 256)),
            (TensorShape(38, 38, 128), TensorShape(76, 76, 128)),
        ]

    def test_fixture_roundtrip(self, yolov3_text, yolov3_net):
        net = parse_config(yolov3_text)
        assert parse_config(serialize_config(net)) == net
        assert infer_shapes(net) == yolov3_net

    def test_all_conv_kernels_modeled(self, yolov3_net):
        pairs = {
            (l.conv.kernel, l.conv.stride)
            for l in yolov3_net.layers
            if l.kind == CONVOLUTIONAL
        }
        assert pairs == {(3, 1), (3, 2), (1, 1)}
