"""Model assembly: variants, branch structure, features, significance export."""

import numpy as np
import pytest

from hpgn import autodiff as ad
from hpgn.layers import ForwardContext
from hpgn.model import (ConfigError, ModelConfig, build_model,
                        export_significance, extract_features)


def desk_config(variant="hpgn", **kw):
    base = dict(num_classes=5, input_size=32, backbone_channels=(8, 12, 16),
                embed_dim=24, variant=variant)
    base.update(kw)
    return ModelConfig(**base)


def images(n, size=32, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, size, size, 3))


class TestConfig:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError) as e:
            desk_config("resnet")
        msg = str(e.value)
        for v in ("hpgn", "baseline", "hpgn-ng", "hpgn-oi", "hpgn1", "hpgn2", "hpgn3"):
            assert v in msg

    def test_non_power_of_two_base(self):
        with pytest.raises(ConfigError):
            desk_config(input_size=24)

    def test_bad_scale_window(self):
        with pytest.raises(ConfigError):
            desk_config(scale_windows=(3,)).branch_windows()

    def test_too_many_scales_for_pyramid(self):
        # input 16 with two stride-2 stages leaves a 4x4 base: 2-level pyramid
        with pytest.raises(ConfigError):
            desk_config("hpgn3", input_size=16).branch_windows()

    def test_desk_base_eight_windows(self):
        cfg = desk_config()
        assert cfg.base_hw == 8
        assert cfg.branch_windows() == (1, 2, 4)

    def test_variant_windows(self):
        # 4-level pyramid: reduced variants keep the largest windows
        kw = dict(num_classes=5, input_size=64)
        assert ModelConfig(variant="baseline", **kw).branch_windows() == ()
        assert ModelConfig(variant="hpgn1", **kw).branch_windows() == (8,)
        assert ModelConfig(variant="hpgn2", **kw).branch_windows() == (4, 8)
        assert ModelConfig(variant="hpgn3", **kw).branch_windows() == (2, 4, 8)
        assert ModelConfig(variant="hpgn", **kw).branch_windows() == (1, 2, 4, 8)

    def test_explicit_scale_subset(self):
        cfg = desk_config(scale_windows=(4, 1))
        assert cfg.branch_windows() == (1, 4)


class TestStructure:
    def test_param_count_strictly_increasing(self):
        kw = dict(num_classes=5, input_size=64)
        counts = [build_model(ModelConfig(variant=v, **kw)).param_count()
                  for v in ("baseline", "hpgn1", "hpgn2", "hpgn3", "hpgn")]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    def test_theta_shapes_follow_pyramid(self):
        model = build_model(ModelConfig(num_classes=5, input_size=64))
        c0 = model.config.base_channels
        sizes = [sgn.layers[0].theta.shape for sgn in model.sgns]
        assert sizes == [(256, c0), (64, c0), (16, c0), (4, c0)]

    def test_baseline_has_single_head(self):
        model = build_model(desk_config("baseline"))
        assert not hasattr(model, "cbr1")
        assert model.sgns == []

    def test_ng_keeps_pyramid_without_graphs(self):
        model = build_model(desk_config("hpgn-ng"))
        assert model.windows == (1, 2, 4)
        assert model.sgns == []
        assert hasattr(model, "cbr1")

    def test_seed_determinism(self):
        a = build_model(desk_config(), seed=5)
        b = build_model(desk_config(), seed=5)
        for (n1, p1), (n2, p2) in zip(a.named_params(), b.named_params()):
            assert n1 == n2
            assert np.array_equal(p1, p2)


class TestForward:
    def test_shapes(self):
        model = build_model(desk_config())
        ctx = ForwardContext(ad.Tape(np.float32), mode="train")
        out = model.forward(ctx, images(2))
        assert out.embed1.data.shape == (2, 24)
        assert out.embed2.data.shape == (2, 24)
        assert out.logits1.data.shape == (2, 5)
        assert out.logits2.data.shape == (2, 5)
        assert len(out.branch_pooled) == 4  # three pyramid branches + GMP

    def test_embeddings_nonnegative(self):
        model = build_model(desk_config())
        ctx = ForwardContext(ad.Tape(np.float32), mode="train")
        out = model.forward(ctx, images(3))
        assert np.all(out.embed1.data >= 0)
        assert np.all(out.embed2.data >= 0)

    def test_shape_mismatch(self):
        model = build_model(desk_config())
        ctx = ForwardContext(ad.Tape(np.float32))
        with pytest.raises(ValueError):
            model.forward(ctx, images(2, size=16))

    def test_baseline_output(self):
        model = build_model(desk_config("baseline"))
        ctx = ForwardContext(ad.Tape(np.float32), mode="train")
        out = model.forward(ctx, images(2))
        assert out.embed1 is None and out.logits1 is None
        assert out.embed2.data.shape == (2, 24)
        assert len(out.branch_pooled) == 1

    def test_gmp_head_shared_across_graph_variants(self):
        # the global-max branch has no graph stage, so hpgn and hpgn-ng give
        # bit-identical second-head outputs from the same seed
        x = images(2)
        outs = []
        for variant in ("hpgn", "hpgn-ng"):
            model = build_model(desk_config(variant), seed=4)
            ctx = ForwardContext(ad.Tape(np.float32), mode="infer")
            outs.append(model.forward(ctx, x))
        assert np.array_equal(outs[0].embed2.data, outs[1].embed2.data)
        assert np.array_equal(outs[0].logits2.data, outs[1].logits2.data)

    def test_unit_theta_self_only_matches_graphless(self):
        # fresh hpgn-oi (theta = ones) in bn-bypass mode reduces every graph
        # stage to the identity, matching the graph-free variant
        x = images(2, seed=1)
        outs = []
        for variant in ("hpgn-oi", "hpgn-ng"):
            model = build_model(desk_config(variant), seed=4)
            ctx = ForwardContext(ad.Tape(np.float32), mode="bn-bypass")
            outs.append(model.forward(ctx, x))
        for a, b in zip(outs[0].branch_pooled, outs[1].branch_pooled):
            assert np.max(np.abs(a.data - b.data)) < 1e-5
        assert np.max(np.abs(outs[0].embed1.data - outs[1].embed1.data)) < 1e-5

    def test_scale_subset_drops_exactly_one_branch(self):
        x = images(2, seed=2)
        full = build_model(desk_config("hpgn-ng"), seed=4)
        sub = build_model(desk_config("hpgn-ng", scale_windows=(2, 4)), seed=4)
        ctx1 = ForwardContext(ad.Tape(np.float32), mode="bn-bypass")
        ctx2 = ForwardContext(ad.Tape(np.float32), mode="bn-bypass")
        out_full = full.forward(ctx1, x)
        out_sub = sub.forward(ctx2, x)
        # remaining branches are bit-identical; only window 1 disappeared
        for a, b in zip(out_full.branch_pooled[1:], out_sub.branch_pooled):
            assert np.array_equal(a.data, b.data)


class TestExtractFeatures:
    def test_dims(self):
        assert extract_features(build_model(desk_config()), images(3)).shape == (3, 48)
        assert extract_features(build_model(desk_config("baseline")), images(3)).shape == (3, 24)

    def test_inference_determinism(self):
        model = build_model(desk_config())
        x = images(4, seed=3)
        f1 = extract_features(model, x)
        f2 = extract_features(model, x)
        assert np.array_equal(f1, f2)

    def test_batch_size_independent(self):
        model = build_model(desk_config("baseline"))
        x = images(5, seed=4)
        assert np.array_equal(extract_features(model, x, batch_size=2),
                              extract_features(model, x, batch_size=5))


class TestSignificance:
    def test_fresh_model_all_zero(self):
        maps = export_significance(build_model(desk_config()))
        assert len(maps) == 3 * 3  # scales x depth
        for m in maps:
            assert np.all(m["heatmap"] == 0.0)
            assert m["heatmap"].shape == (m["size"], m["size"])

    def test_values_in_unit_interval(self):
        model = build_model(desk_config())
        rng = np.random.default_rng(6)
        for sgn in model.sgns:
            for layer in sgn.layers:
                layer.theta[:] = rng.normal(1, 0.5, layer.theta.shape)
        for m in export_significance(model):
            assert m["heatmap"].min() == 0.0
            assert m["heatmap"].max() == 1.0

    def test_graphless_variant_empty(self):
        assert export_significance(build_model(desk_config("baseline"))) == []
        assert export_significance(build_model(desk_config("hpgn-ng"))) == []
