"""Model construction, forward/backward, taps, and SGD semantics."""

import numpy as np
import pytest

from quest import tensor as T
from quest.errors import ConfigurationError, UsageError
from quest.models import ArchSpec, Model, apply_sgd, backward, build_model, forward


def _f64(model):
    for k in model.params:
        model.params[k] = model.params[k].astype(np.float64)
    return model


class TestArchSpec:
    def test_tap_names_and_alias(self):
        spec = ArchSpec(stages=((8, 2), (16, 1)), num_classes=4)
        assert spec.tap_names() == ("stage1", "stage2", "last_conv")
        assert spec.resolve_tap("last_conv") == 1
        assert spec.resolve_tap("stage1") == 0
        assert spec.tap_channels("last_conv") == 16
        assert spec.tap_channels("stage1") == 8

    def test_tap_hw_halves_per_stage(self):
        spec = ArchSpec(stages=((4, 1), (8, 1), (16, 1)), num_classes=2)
        assert spec.tap_hw("stage1", 32, 32) == (32, 32)
        assert spec.tap_hw("stage2", 32, 32) == (16, 16)
        assert spec.tap_hw("stage3", 32, 32) == (8, 8)
        assert spec.tap_hw("last_conv", 32, 32) == (8, 8)

    def test_unknown_tap_rejected(self):
        spec = ArchSpec(stages=((4, 1),), num_classes=2)
        with pytest.raises(ConfigurationError):
            spec.resolve_tap("stage9")

    def test_bad_specs_rejected(self):
        with pytest.raises(ConfigurationError):
            ArchSpec(stages=(), num_classes=2)
        with pytest.raises(ConfigurationError):
            ArchSpec(stages=((0, 1),), num_classes=2)
        with pytest.raises(ConfigurationError):
            ArchSpec(stages=((4, 0),), num_classes=2)
        with pytest.raises(ConfigurationError):
            ArchSpec(stages=((4, 1),), num_classes=1)
        with pytest.raises(ConfigurationError):
            ArchSpec(stages=((4, 1),), num_classes=2, in_channels=0)


class TestBuildModel:
    def test_param_shapes(self):
        spec = ArchSpec(stages=((4, 2), (6, 1)), num_classes=3)
        m = build_model(spec, seed=0)
        assert m.params["stage1.conv1.weight"].shape == (4, 3, 3, 3)
        assert m.params["stage1.conv2.weight"].shape == (4, 4, 3, 3)
        assert m.params["stage2.conv1.weight"].shape == (6, 4, 3, 3)
        assert m.params["fc.weight"].shape == (3, 6)
        assert m.params["fc.bias"].shape == (3,)
        assert m.params["stage1.conv1.bias"].shape == (4,)

    def test_biases_zero_weights_nonzero(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=3)
        assert np.all(m.params["stage1.conv1.bias"] == 0)
        assert np.all(m.params["fc.bias"] == 0)
        assert np.abs(m.params["stage1.conv1.weight"]).max() > 0

    def test_seed_determinism(self):
        spec = ArchSpec(stages=((4, 1), (8, 1)), num_classes=5)
        a = build_model(spec, seed=7)
        b = build_model(spec, seed=7)
        c = build_model(spec, seed=8)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
        assert not np.array_equal(a.params["stage1.conv1.weight"],
                                  c.params["stage1.conv1.weight"])

    def test_dtype(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0)
        assert m.params["stage1.conv1.weight"].dtype == np.float32
        m64 = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0,
                          dtype=np.float64)
        assert m64.params["fc.weight"].dtype == np.float64


class TestForward:
    def test_shapes_and_taps(self):
        spec = ArchSpec(stages=((4, 1), (6, 1)), num_classes=3)
        m = build_model(spec, seed=1)
        x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
        logits, feats, cache = forward(m, x, taps=("stage1", "last_conv"))
        assert logits.shape == (2, 3)
        assert feats["stage1"].shape == (2, 4, 8, 8)
        assert feats["last_conv"].shape == (2, 6, 4, 4)
        assert cache is None

    def test_last_conv_matches_final_stage(self):
        spec = ArchSpec(stages=((4, 1), (6, 1)), num_classes=3)
        m = build_model(spec, seed=1)
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 8)).astype(np.float32)
        _, feats, _ = forward(m, x, taps=("stage2", "last_conv"))
        assert np.array_equal(feats["stage2"], feats["last_conv"])

    def test_taps_post_relu(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=2)
        x = np.random.default_rng(2).normal(size=(2, 3, 8, 8)).astype(np.float32)
        _, feats, _ = forward(m, x, taps=("stage1",))
        assert feats["stage1"].min() >= 0.0

    def test_hand_computed_constant_path(self):
        # zero conv weights: feature map is relu(bias) everywhere, GAP
        # reproduces it, so logits = fc_w @ relu(b) + fc_b exactly
        spec = ArchSpec(stages=((2, 1),), num_classes=2)
        m = build_model(spec, seed=0, dtype=np.float64)
        m.params["stage1.conv1.weight"][:] = 0.0
        m.params["stage1.conv1.bias"][:] = [1.5, -2.0]
        m.params["fc.weight"][:] = [[1.0, 1.0], [2.0, -1.0]]
        m.params["fc.bias"][:] = [0.5, 0.0]
        x = np.random.default_rng(0).normal(size=(3, 3, 4, 4))
        logits, feats, _ = forward(m, x, taps=("stage1",))
        assert np.allclose(feats["stage1"][:, 0], 1.5)
        assert np.allclose(feats["stage1"][:, 1], 0.0)
        assert np.allclose(logits, [[2.0, 3.0]] * 3)

    def test_bad_batch_rejected(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0)
        with pytest.raises(ConfigurationError):
            forward(m, np.zeros((2, 1, 8, 8), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            forward(m, np.zeros((2, 8, 8), dtype=np.float32))

    def test_forward_pure_given_params(self):
        m = build_model(ArchSpec(stages=((4, 1), (6, 1)), num_classes=3), seed=4)
        x = np.random.default_rng(3).normal(size=(2, 3, 8, 8)).astype(np.float32)
        l1, _, _ = forward(m, x)
        l2, _, _ = forward(m, x)
        assert np.array_equal(l1, l2)


class TestBackward:
    def test_ce_grads_match_finite_differences(self):
        spec = ArchSpec(stages=((3, 1), (4, 1)), num_classes=3)
        m = _f64(build_model(spec, seed=9, dtype=np.float64))
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 8, 8))
        targets = np.zeros((2, 3))
        targets[0, 1] = targets[1, 2] = 1.0

        logits, _, cache = forward(m, x, want_cache=True)
        dlogits = T.cross_entropy_backward(logits, targets, from_logits=True)
        grads = backward(m, cache, dlogits)

        def loss_for(name):
            def fn(p):
                saved = m.params[name]
                m.params[name] = p
                out, _, _ = forward(m, x)
                m.params[name] = saved
                return T.cross_entropy(out, targets, from_logits=True)
            return fn

        for name in ("stage1.conv1.weight", "stage2.conv1.bias", "fc.weight"):
            num = T.finite_difference_gradient(loss_for(name), m.params[name])
            assert T.relative_error(grads[name], num) < 1e-6, name

    def test_tap_gradient_injection_site(self):
        # loss = sum(R * tap) with zero classifier grad; backward must route
        # the injected gradient through the stage but not the classifier
        spec = ArchSpec(stages=((3, 1), (4, 1)), num_classes=2)
        m = _f64(build_model(spec, seed=5, dtype=np.float64))
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 8, 8))
        logits, feats, cache = forward(m, x, taps=("stage1",), want_cache=True)
        r = rng.normal(size=feats["stage1"].shape)
        grads = backward(m, cache, np.zeros_like(logits), tap_grads={"stage1": r})
        assert np.all(grads["fc.weight"] == 0)
        assert np.all(grads["stage2.conv1.weight"] == 0)

        def fn(p):
            saved = m.params["stage1.conv1.weight"]
            m.params["stage1.conv1.weight"] = p
            _, f, _ = forward(m, x, taps=("stage1",))
            m.params["stage1.conv1.weight"] = saved
            return float((r * f["stage1"]).sum())

        num = T.finite_difference_gradient(fn, m.params["stage1.conv1.weight"])
        assert T.relative_error(grads["stage1.conv1.weight"], num) < 1e-6

    def test_tap_plus_classifier_grads_add(self):
        spec = ArchSpec(stages=((3, 1),), num_classes=2)
        m = _f64(build_model(spec, seed=13, dtype=np.float64))
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 6, 6))
        logits, feats, cache = forward(m, x, taps=("stage1",), want_cache=True)
        dl = rng.normal(size=logits.shape)
        r = rng.normal(size=feats["stage1"].shape)
        combined = backward(m, cache, dl, tap_grads={"stage1": r})

        logits, feats, cache = forward(m, x, taps=("stage1",), want_cache=True)
        only_cls = backward(m, cache, dl)
        logits, feats, cache = forward(m, x, taps=("stage1",), want_cache=True)
        only_tap = backward(m, cache, np.zeros_like(dl), tap_grads={"stage1": r})
        for k in combined:
            assert np.allclose(combined[k], only_cls[k] + only_tap[k], atol=1e-12)


class TestSgdAndFreeze:
    def test_frozen_rejects_update(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0)
        m.freeze()
        grads = {k: np.zeros_like(v) for k, v in m.params.items()}
        with pytest.raises(UsageError):
            apply_sgd(m, grads, lr=0.1)

    def test_weight_decay_skips_biases(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0)
        m.params["stage1.conv1.bias"][:] = 1.0
        w_before = m.params["stage1.conv1.weight"].copy()
        grads = {k: np.zeros_like(v) for k, v in m.params.items()}
        apply_sgd(m, grads, lr=0.1, momentum=0.0, weight_decay=0.5)
        # v = wd * p, p -= lr * v  ->  p * (1 - lr * wd)
        assert np.allclose(m.params["stage1.conv1.weight"], w_before * 0.95)
        assert np.all(m.params["stage1.conv1.bias"] == 1.0)

    def test_momentum_accumulates(self):
        m = build_model(ArchSpec(stages=((2, 1),), num_classes=2), seed=0,
                        dtype=np.float64)
        m.params["fc.bias"][:] = 0.0
        g = {"fc.bias": np.ones(2)}
        apply_sgd(m, g, lr=0.1, momentum=0.9)
        apply_sgd(m, g, lr=0.1, momentum=0.9)
        # v1 = 1, p = -0.1; v2 = 1.9, p = -0.29
        assert np.allclose(m.params["fc.bias"], -0.29)

    def test_checksum_tracks_params(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0)
        c1 = m.checksum()
        assert m.checksum() == c1
        m.params["fc.bias"][0] += 1.0
        assert m.checksum() != c1

    def test_freeze_returns_self(self):
        m = build_model(ArchSpec(stages=((4, 1),), num_classes=2), seed=0)
        assert m.freeze() is m
        assert m.frozen
