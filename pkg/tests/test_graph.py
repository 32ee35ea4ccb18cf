import numpy as np
import pytest

from ern.compiler import compile_checkpoint, gen_random_checkpoint
from ern.errors import ConfigError, ShapeError
from ern.graph import (
    ARCHITECTURES,
    AvgPoolScale,
    ArchConfig,
    BnAct,
    Conv,
    FinalConv,
    GraphDef,
    PixelEmbed,
    ResidualAdd,
    arch_config,
    build_bottleneck,
    build_convblock,
    build_model,
    execute,
    macs_for_conv,
    model_stats,
    trace_shapes,
    validate_graph,
)
from ern.kernels import ConvSpec

from conftest import random_image


def tiny_nodes():
    return [
        PixelEmbed("embed", 1, 2, "image", "embed.out"),
        Conv("c1", ConvSpec(3, 4, 1, 1), False, "embed.out", "c1.out"),
        BnAct("b1", 4, "c1.out", "b1.out"),
        FinalConv("f", ConvSpec(4, 2, 1, 1), "b1.out", "f.out"),
        AvgPoolScale("pool", "f.out", "logits"),
    ]


class TestValidation:
    def test_tiny_graph_passes_without_lane_rule(self):
        edges = validate_graph(GraphDef(tuple(tiny_nodes())), require_lane_multiple=False)
        assert edges["c1.out"].kind == "acc"
        assert edges["c1.out"].bound == 3 * 3
        assert edges["b1.out"].kind == "act2"

    def test_lane_rule_enforced(self):
        with pytest.raises(ConfigError, match="multiple of 64"):
            validate_graph(GraphDef(tuple(tiny_nodes())))

    def test_undefined_edge(self):
        nodes = tiny_nodes()
        nodes[1] = Conv("c1", ConvSpec(3, 4, 1, 1), False, "nowhere", "c1.out")
        with pytest.raises(ConfigError, match="undefined edge"):
            validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)

    def test_duplicate_edge(self):
        nodes = tiny_nodes()
        nodes.insert(2, Conv("c2", ConvSpec(3, 4, 1, 1), False, "embed.out", "c1.out"))
        with pytest.raises(ConfigError, match="produced twice"):
            validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)

    def test_kind_mismatch(self):
        nodes = tiny_nodes()
        # conv consuming an accumulator edge
        nodes[2] = Conv("b1", ConvSpec(4, 4, 1, 1), False, "c1.out", "b1.out")
        with pytest.raises(ConfigError, match="needs a act2 edge"):
            validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)

    def test_channel_mismatch(self):
        nodes = tiny_nodes()
        nodes[2] = BnAct("b1", 8, "c1.out", "b1.out")
        with pytest.raises(ConfigError, match="channels"):
            validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)

    def test_residual_requires_const_scaled_branches(self):
        nodes = [
            PixelEmbed("embed", 1, 2, "image", "embed.out"),
            Conv("c1", ConvSpec(3, 4, 1, 1), True, "embed.out", "c1.out"),
            Conv("c2", ConvSpec(3, 4, 1, 1), False, "embed.out", "c2.out"),
            ResidualAdd("add", "c1.out", "c2.out", "add.out"),
            BnAct("b1", 4, "add.out", "b1.out"),
            FinalConv("f", ConvSpec(4, 2, 1, 1), "b1.out", "f.out"),
            AvgPoolScale("pool", "f.out", "logits"),
        ]
        with pytest.raises(ConfigError, match="const-scaled"):
            validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)

    def test_residual_bound_accumulates(self):
        nodes = [
            PixelEmbed("embed", 1, 2, "image", "embed.out"),
            Conv("c1", ConvSpec(3, 4, 1, 1), True, "embed.out", "c1.out"),
            Conv("c2", ConvSpec(3, 4, 3, 3, (1, 1), (1, 1)), True, "embed.out", "c2.out"),
            ResidualAdd("add", "c1.out", "c2.out", "add.out"),
            BnAct("b1", 4, "add.out", "b1.out"),
            FinalConv("f", ConvSpec(4, 2, 1, 1), "b1.out", "f.out"),
            AvgPoolScale("pool", "f.out", "logits"),
        ]
        edges = validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)
        assert edges["add.out"].bound == 9 + 81

    def test_pool_must_consume_final_conv(self):
        nodes = tiny_nodes()
        nodes[4] = AvgPoolScale("pool", "c1.out", "logits")
        with pytest.raises(ConfigError, match="final conv"):
            validate_graph(GraphDef(tuple(nodes)), require_lane_multiple=False)


class TestArchitectures:
    def test_five_variants(self):
        assert sorted(ARCHITECTURES) == [
            "erns101",
            "erns18",
            "erns18x075",
            "erns34",
            "erns50",
        ]

    def test_unknown_arch(self):
        with pytest.raises(ConfigError, match="unknown architecture"):
            arch_config("resnet18")

    @pytest.mark.parametrize(
        "name,params",
        [
            ("erns18x075", 8245120),
            ("erns18", 11797376),
            ("erns34", 21898112),
            ("erns50", 25621376),
            ("erns101", 44561280),
        ],
    )
    def test_param_counts(self, name, params):
        assert model_stats(arch_config(name), 256).param_count == params

    def test_stage_channels_must_be_lane_multiples(self):
        with pytest.raises(ConfigError, match="multiples of 64"):
            ArchConfig("bad", "conv", (2, 2, 2, 2), (64, 128, 200, 512))

    def test_relaxed_lanes_config(self):
        # stage 1 must stay 64 wide to match the stem; later stages may
        # drop the lane rule when strict_lanes is off
        cfg = ArchConfig(
            "toy", "conv", (1, 1, 1, 1), (64, 96, 96, 160), strict_lanes=False
        )
        g = build_model(cfg, k=1)
        assert validate_graph(g, require_lane_multiple=False)
        with pytest.raises(ConfigError, match="multiples of 64"):
            ArchConfig("toy2", "conv", (1, 1, 1, 1), (64, 96, 96, 160))

    def test_block_misuse(self):
        with pytest.raises(ConfigError, match="downsample"):
            build_convblock(64, 128, downsample=False, src="x", prefix="b")
        with pytest.raises(ConfigError, match="cmid"):
            build_bottleneck(64, 64, 128, downsample=True, src="x", prefix="b")

    def test_bottleneck_stride_position_flag(self):
        cfg = arch_config("erns50")
        moved = ArchConfig(
            "erns50v1", "bottleneck", cfg.counts, cfg.channels,
            stride_on_first_bottleneck_conv=True,
        )
        g_default = build_model(cfg)
        g_moved = build_model(moved)
        conv1_d = g_default.node("s2.b1.conv1")
        conv2_d = g_default.node("s2.b1.conv2")
        conv1_m = g_moved.node("s2.b1.conv1")
        conv2_m = g_moved.node("s2.b1.conv2")
        assert (conv1_d.spec.stride, conv2_d.spec.stride) == ((1, 1), (2, 2))
        assert (conv1_m.spec.stride, conv2_m.spec.stride) == ((2, 2), (1, 1))
        # both reach the same stage-output shapes
        assert trace_shapes(g_default, 64, 64)["s2.b1.add.out"] == trace_shapes(
            g_moved, 64, 64
        )["s2.b1.add.out"]

    def test_stage1_bottleneck_projects_without_downsampling(self):
        g = build_model(arch_config("erns50"))
        down = g.node("s1.b1.down")
        assert down.spec.stride == (1, 1)
        assert down.spec.in_ch == 64 and down.spec.out_ch == 256


class TestShapes:
    def test_ladder_256(self):
        g = build_model(arch_config("erns18"))
        sh = trace_shapes(g, 256, 256)
        assert sh["embed.out"] == (30, 256, 256)
        assert sh["stem.conv4.out"] == (64, 64, 64)
        assert sh["s2.b1.add.out"] == (128, 32, 32)
        assert sh["s4.b2.add.out"] == (512, 8, 8)
        assert sh["head.conv.out"] == (1000, 8, 8)

    def test_ladder_288(self):
        g = build_model(arch_config("erns18"))
        assert trace_shapes(g, 288, 288)["s4.b2.add.out"] == (512, 9, 9)

    def test_small_inputs_survive_padding(self):
        # 3x3 pad-1 stride-2 maps H=1 to H=1, so the ladder never collapses
        g = build_model(arch_config("erns18"))
        assert trace_shapes(g, 32, 32)["head.conv.out"] == (1000, 1, 1)
        assert trace_shapes(g, 16, 16)["head.conv.out"] == (1000, 1, 1)

    def test_macs_reference_layers(self):
        assert macs_for_conv(ConvSpec(3, 64, 7, 7, (2, 2), (3, 3)), 224, 224) == 118013952
        assert macs_for_conv(ConvSpec(30, 64, 7, 7, (2, 2), (3, 3)), 224, 224) == 1180139520


class TestStats:
    @pytest.mark.parametrize(
        "name,weight_bytes",
        [
            ("erns18x075", 1030640),
            ("erns18", 1474672),
            ("erns34", 2737264),
            ("erns50", 3202672),
            ("erns101", 5570160),
        ],
    )
    def test_weight_bytes(self, name, weight_bytes):
        stats = model_stats(arch_config(name), 256)
        assert stats.binary_weight_bytes == weight_bytes
        assert stats.binary_weight_bytes == -(-stats.param_count // 8)
        assert stats.padded_weight_bytes >= stats.binary_weight_bytes

    def test_macs_scale_with_resolution(self):
        cfg = arch_config("erns18")
        # spatial dims quarter exactly, so conv work does too
        assert model_stats(cfg, 256).macs == 16 * model_stats(cfg, 64).macs


class TestExecution:
    def test_kernels_agree(self, erns18_model, rng):
        img = random_image(rng)
        a = execute(erns18_model, img, kernel="popcount")
        b = execute(erns18_model, img, kernel="naive")
        assert np.array_equal(a.logits, b.logits)

    def test_repeat_runs_bitwise_identical(self, erns18_model, rng):
        img = random_image(rng)
        a = execute(erns18_model, img).logits
        b = execute(erns18_model, img).logits
        assert a.tobytes() == b.tobytes()

    def test_no_float_ops_in_core(self, erns18_model, rng):
        assert execute(erns18_model, random_image(rng)).float_ops_core == 0

    def test_record_keeps_intermediates(self, erns18_model, rng):
        r = execute(erns18_model, random_image(rng), record=True)
        g = erns18_model.graph
        assert set(r.acts) == {"embed.out"} | {bn.dst for bn in g.bnacts}
        conv_edges = {n.dst for n in g.convs}
        add_edges = {n.dst for n in g.nodes if isinstance(n, ResidualAdd)}
        assert set(r.accs) == conv_edges | add_edges
        for acc in r.accs.values():
            assert acc.dtype == np.int32

    def test_unknown_kernel(self, erns18_model):
        with pytest.raises(ConfigError):
            execute(erns18_model, np.zeros((3, 64, 64), np.uint8), kernel="simd")

    def test_bad_image_shape(self, erns18_model):
        with pytest.raises(ShapeError):
            execute(erns18_model, np.zeros((64, 64), np.uint8))

    def test_tiny_image_still_runs(self, erns18_model):
        r = execute(erns18_model, np.zeros((3, 16, 16), np.uint8))
        assert r.logits.shape == (1000,)
        assert np.all(np.isfinite(r.logits))

    def test_resolution_discrepancy(self, erns18_model, rng):
        # models carry no baked-in input size; a 288 image just yields a
        # 9x9 head map instead of 8x8
        img = rng.integers(0, 256, size=(3, 288, 288), dtype=np.uint8)
        r = execute(erns18_model, img, record=True)
        assert r.accs["head.conv.out"].shape == (1000, 9, 9)
        assert np.all(np.isfinite(r.logits))


class TestScaleDoubling:
    def test_doubling_c_with_const_fed_folds_is_invariant(self, rng):
        # c enters the fold only where the incoming edge carries the shared
        # constant; doubling (c, s_a, beta, mean) on exactly those units
        # rescales slope and intercept by a power of two, which commutes
        # with IEEE rounding, so every table and every logit is bitwise
        # unchanged even though the serialized constants differ
        m1 = gen_random_checkpoint("erns18x075", seed=5, shared_const=0.75)
        m2 = gen_random_checkpoint("erns18x075", seed=5, shared_const=1.5)
        g = m1.graph()
        edges = validate_graph(g)
        for bn in g.bnacts:
            if not edges[bn.src].const_scaled:
                continue
            rec = m2.bnacts[bn.name]
            rec.beta = rec.beta * 2.0
            rec.mean = rec.mean * 2.0
            rec.act_scale = rec.act_scale * 2.0
        a = compile_checkpoint(m1)
        b = compile_checkpoint(m2)
        assert b.shared_const == 2 * a.shared_const
        for name in a.thresholds:
            ta, tb = a.thresholds[name], b.thresholds[name]
            assert np.array_equal(ta.t, tb.t), name
            assert np.array_equal(ta.ascending, tb.ascending), name
        img = random_image(rng)
        la = execute(a, img).logits
        lb = execute(b, img).logits
        assert la.tobytes() == lb.tobytes()
