import numpy as np
import pytest

from seqseg import fcn, ops
from seqseg.errors import ConfigurationError, ContractViolation
from seqseg.fcn import FcnConfig, LogitsBundle, build_fcn, fcn_forward, replace_low_logits

from oracles import bilinear_upsample_oracle


def tiny_config(**kw):
    base = dict(
        num_classes=3,
        input_hw=(16, 16),
        stem_channels=4,
        stem_kernel=3,
        stage_blocks=(1, 1),
        stage_channels=(4, 6),
        skip_taps=(0,),
    )
    base.update(kw)
    return FcnConfig(**base)


def tensors_equal(m1, m2):
    t1, t2 = dict(m1.named_tensors()), dict(m2.named_tensors())
    assert t1.keys() == t2.keys()
    return all(np.array_equal(t1[k], t2[k]) for k in t1)


class TestConfig:
    def test_defaults_valid(self):
        cfg = FcnConfig()
        assert cfg.total_downsample == 8
        assert cfg.input_hw == (48, 64)

    def test_fcn45_constructible(self):
        cfg = fcn.fcn45_config()
        model = build_fcn(cfg, seed=0)
        assert model.num_params() > 1_000_000

    def test_rejects_single_stage(self):
        with pytest.raises(ConfigurationError):
            FcnConfig(stage_blocks=(2,), stage_channels=(8,), skip_taps=())

    def test_rejects_unordered_taps(self):
        with pytest.raises(ConfigurationError):
            FcnConfig(skip_taps=(1, 0))

    def test_rejects_tap_on_last_stage(self):
        with pytest.raises(ConfigurationError):
            FcnConfig(skip_taps=(0, 2))

    def test_rejects_indivisible_input(self):
        with pytest.raises(ConfigurationError):
            FcnConfig(input_hw=(50, 64))


class TestBuild:
    def test_deterministic_for_seed(self):
        cfg = tiny_config()
        assert tensors_equal(build_fcn(cfg, 7), build_fcn(cfg, 7))

    def test_different_seeds_differ(self):
        cfg = tiny_config()
        m1, m2 = build_fcn(cfg, 1), build_fcn(cfg, 2)
        assert not np.array_equal(
            dict(m1.named_tensors())["stem/conv/w"], dict(m2.named_tensors())["stem/conv/w"]
        )

    def test_default_param_count_stable(self):
        n1 = build_fcn(FcnConfig(), 0).num_params()
        n2 = build_fcn(FcnConfig(), 5).num_params()
        assert n1 == n2
        # 18 trainable convs + heads, desk scale
        assert 50_000 < n1 < 150_000

    def test_single_class_heads(self):
        model = build_fcn(tiny_config(num_classes=1), 0)
        assert model.low_head.bank.out_channels == 1
        assert all(h.bank.out_channels == 1 for h in model.tap_heads.values())

    def test_batchnorm_identity_init(self):
        model = build_fcn(tiny_config(), 0)
        t = dict(model.named_tensors())
        assert np.all(t["stem/bn/gamma"] == 1.0)
        assert np.all(t["stem/bn/beta"] == 0.0)


class TestForward:
    def test_shapes(self):
        cfg = FcnConfig()
        model = build_fcn(cfg, 0)
        img = np.random.default_rng(0).uniform(size=(2, 3, 48, 64))
        bundle = fcn_forward(model, img, "infer")
        assert bundle.logits_low.shape == (2, 4, 6, 8)
        assert [s.shape for s in bundle.skip_logits] == [(2, 4, 24, 32), (2, 4, 12, 16)]
        assert bundle.logits_full.shape == (2, 4, 48, 64)

    def test_zero_heads_give_zero_logits(self, rng):
        model = build_fcn(tiny_config(), 0)
        for head in [model.low_head, *model.tap_heads.values()]:
            head.bank.weights[:] = 0.0
            head.bank.bias[:] = 0.0
        bundle = fcn_forward(model, rng.uniform(size=(1, 3, 16, 16)), "infer")
        assert np.array_equal(bundle.logits_full, np.zeros_like(bundle.logits_full))
        probs = ops.softmax_channels(bundle.logits_full)
        assert np.allclose(probs, 1.0 / 3.0, atol=1e-15)

    def test_low_head_bias_gives_constant_map(self, rng):
        model = build_fcn(tiny_config(), 0)
        for head in [model.low_head, *model.tap_heads.values()]:
            head.bank.weights[:] = 0.0
            head.bank.bias[:] = 0.0
        model.low_head.bank.bias[:] = [1.0, -0.5, 2.0]
        bundle = fcn_forward(model, rng.uniform(size=(1, 3, 16, 16)), "infer")
        for c, v in enumerate([1.0, -0.5, 2.0]):
            assert np.allclose(bundle.logits_full[0, c], v, atol=1e-12)

    def test_merge_matches_oracle_recomposition(self, rng):
        model = build_fcn(FcnConfig(), 0)
        img = rng.uniform(size=(1, 3, 48, 64))
        b = fcn_forward(model, img, "infer")
        x = bilinear_upsample_oracle(b.logits_low, 2) + b.skip_logits[1]
        x = bilinear_upsample_oracle(x, 2) + b.skip_logits[0]
        want = bilinear_upsample_oracle(x, 2)
        assert np.allclose(b.logits_full, want, atol=1e-10)

    def test_wrong_spatial_dims_rejected(self):
        model = build_fcn(tiny_config(), 0)
        with pytest.raises(ContractViolation):
            fcn_forward(model, np.zeros((1, 3, 32, 32)), "infer")

    def test_brightness_changes_logits(self, rng):
        model = build_fcn(FcnConfig(), 0)
        img = rng.uniform(0.2, 0.5, size=(1, 3, 48, 64))
        a = fcn_forward(model, img, "infer").logits_full
        b = fcn_forward(model, 2.0 * img, "infer").logits_full
        assert np.max(np.abs(a - b)) > 1e-6


class TestResidualIdentity:
    def test_zeroed_branch_is_identity(self, rng):
        model = build_fcn(tiny_config(), 0)
        block = model.stages[0].blocks[0]
        for conv in (block.conv1, block.conv2):
            conv.bank.weights[:] = 0.0
            conv.bank.bias[:] = 0.0
        x = rng.uniform(0.0, 1.0, size=(1, 4, 8, 8))  # non-negative input
        y = block.forward(x, "infer")
        assert np.array_equal(y, x)


class TestReplaceLowLogits:
    @pytest.fixture
    def bundle(self, rng):
        model = build_fcn(tiny_config(), 3)
        return fcn_forward(model, rng.uniform(size=(1, 3, 16, 16)), "infer")

    def test_identity_substitution_bitwise(self, bundle):
        out = replace_low_logits(bundle, bundle.logits_low)
        assert np.array_equal(out.logits_full, bundle.logits_full)

    def test_zero_low_leaves_skip_merge(self, bundle):
        out = replace_low_logits(bundle, np.zeros_like(bundle.logits_low))
        want = fcn.merge_logits(np.zeros_like(bundle.logits_low), bundle.skip_logits,
                                bundle.tap_downsamples, bundle.low_downsample)
        assert np.array_equal(out.logits_full, want)

    def test_random_substitution_matches_oracle(self, bundle, rng):
        new_low = rng.standard_normal(bundle.logits_low.shape)
        out = replace_low_logits(bundle, new_low)
        x = bilinear_upsample_oracle(new_low, 2) + bundle.skip_logits[0]
        want = bilinear_upsample_oracle(x, 2)
        assert np.allclose(out.logits_full, want, atol=1e-10)
        assert out.skip_logits is bundle.skip_logits

    def test_dim_mismatch_rejected(self, bundle):
        with pytest.raises(ContractViolation):
            replace_low_logits(bundle, np.zeros((1, 3, 2, 2)))


class TestGradients:
    @pytest.mark.parametrize("phase", ["train", "infer"])
    def test_end_to_end_matches_finite_differences(self, phase, rng):
        model = build_fcn(tiny_config(), 11)
        img = rng.uniform(size=(1, 3, 16, 16))
        r = rng.standard_normal((1, 3, 16, 16))

        def loss():
            return float((model.forward(img, phase).logits_full * r).sum())

        bundle = model.forward(img, phase, keep_cache=True)
        d_img = model.backward(bundle, r)
        grads = dict(model.named_grads())

        assert ops.finite_diff_check(loss, img, d_img, rng=rng) < 1e-4
        params = dict(model.trainable_tensors())
        for name in ["stem/conv/w", "stage0/block0/conv1/w", "stage1/trans/conv/w",
                     "stage0/block0/bn1/gamma", "head/low/w", "head/tap0/b"]:
            assert ops.finite_diff_check(loss, params[name], grads[name], rng=rng) < 1e-4, name

    def test_merge_backward_is_transpose(self, rng):
        low = rng.standard_normal((1, 3, 4, 4))
        skips = (rng.standard_normal((1, 3, 16, 16)), rng.standard_normal((1, 3, 8, 8)))
        full = fcn.merge_logits(low, skips, (2, 4), 8)
        g = rng.standard_normal(full.shape)
        d_low, d_skips = fcn.merge_logits_backward(g, (4, 4), [(16, 16), (8, 8)], (2, 4), 8)
        lhs = (full * g).sum()
        rhs = (d_low * low).sum() + sum((a * b).sum() for a, b in zip(d_skips, skips))
        # merge is linear so <Ax, g> == <x, A^T g>
        assert np.isclose(lhs, rhs, atol=1e-8)
