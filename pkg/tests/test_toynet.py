import math

import numpy as np
import pytest

from anomseg import toynet as tn
from anomseg.tensorio import IGNORE_LABEL


def tiny_params(seed=0, n_classes=3, hidden=6, k=3):
    return tn.init_params(k=k, hidden=hidden, n_classes=n_classes, seed=seed)


def rand_instance(seed, h=4, w=4, n_classes=3):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3))
    labels = rng.integers(0, n_classes, (h, w)).astype(np.uint8)
    return img, labels


def fd_param_check(loss_fn, params, eps=1e-4, samples=25, seed=0):
    """Max relative error of analytic parameter gradients vs central FD."""
    _, grads = loss_fn(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ("w1", "b1", "w2", "b2"):
        arr = getattr(params, name)
        g = grads[name]
        flat_idx = rng.choice(arr.size, size=min(samples, arr.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            old = arr[idx]
            arr[idx] = old + eps
            vp, _ = loss_fn(params)
            arr[idx] = old - eps
            vm, _ = loss_fn(params)
            arr[idx] = old
            fd = (vp - vm) / (2 * eps)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    return worst


class TestForward:
    def test_zero_weights_uniform_softmax(self):
        p = tiny_params()
        p.w1[:] = 0.0
        p.w2[:] = 0.0
        img, _ = rand_instance(0)
        logits, feats = tn.forward(p, img)
        assert np.all(logits == 0.0)
        sm = tn.softmax_map(logits)
        assert np.allclose(sm, 1.0 / 3.0)
        assert np.all(feats >= 0.0)

    def test_deterministic_without_dropout(self):
        p = tiny_params(1)
        img, _ = rand_instance(1)
        a, _ = tn.forward(p, img)
        b, _ = tn.forward(p, img)
        assert np.array_equal(a, b)

    def test_dropout_seed_contract(self):
        p = tiny_params(2)
        img, _ = rand_instance(2, h=8, w=8)
        a, _ = tn.forward(p, img, dropout_rate=0.25, dropout_seed=1)
        b, _ = tn.forward(p, img, dropout_rate=0.25, dropout_seed=1)
        c, _ = tn.forward(p, img, dropout_rate=0.25, dropout_seed=2)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSoftmaxArgmax:
    def test_uniform(self):
        assert np.allclose(tn.softmax_map(np.zeros((1, 1, 4))), 0.25)

    def test_extreme_logits_no_overflow(self):
        sm = tn.softmax_map(np.array([[[1000.0, 0.0]]]))
        assert abs(sm[0, 0, 0] - 1.0) < 1e-12
        assert sm[0, 0, 1] < 1e-12

    def test_ln2_example(self):
        sm = tn.softmax_map(np.array([[[math.log(2.0), 0.0]]]))
        assert np.allclose(sm[0, 0], [2.0 / 3.0, 1.0 / 3.0])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        sm = tn.softmax_map(rng.normal(0, 10, (16, 16, 5)))
        assert np.abs(sm.sum(-1) - 1.0).max() < 1e-6

    def test_argmax_and_ties(self):
        assert tn.predict_mask(np.array([[[3.0, 1.0, 2.0]]]))[0, 0] == 0
        assert tn.predict_mask(np.array([[[5.0, 5.0]]]))[0, 0] == 0

    def test_argmax_shift_invariant(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(0, 1, (8, 8, 4))
        shifted = logits + rng.normal(0, 5, (8, 8, 1))
        assert np.array_equal(tn.predict_mask(logits), tn.predict_mask(shifted))


class TestLosses:
    def test_ce_perfect_prediction_zero(self):
        labels = np.array([[0, 1], [2, 1]], dtype=np.uint8)
        logits = np.full((2, 2, 3), -1000.0)
        for i in range(2):
            for j in range(2):
                logits[i, j, labels[i, j]] = 1000.0
        value, _ = tn.ce_value_grad(logits, labels)
        assert value < 1e-9

    def test_ce_uniform_is_log_s(self):
        value, _ = tn.ce_value_grad(np.zeros((3, 3, 4)), np.zeros((3, 3), np.uint8))
        assert abs(value - math.log(4)) < 1e-12

    def test_ce_ignores_255(self):
        labels = np.full((2, 2), IGNORE_LABEL, dtype=np.uint8)
        labels[0, 0] = 1
        logits = np.zeros((2, 2, 4))
        logits[0, 0] = [0.0, 100.0, 0.0, 0.0]
        value, grad = tn.ce_value_grad(logits, labels)
        assert value < 1e-9
        assert np.all(grad[labels == IGNORE_LABEL] == 0.0)

    def test_ce_all_ignored_errors(self):
        labels = np.full((2, 2), IGNORE_LABEL, dtype=np.uint8)
        with pytest.raises(ValueError, match="empty loss"):
            tn.ce_value_grad(np.zeros((2, 2, 3)), labels)

    def test_anom_uniform_is_global_minimum(self):
        v_uniform, _ = tn.anom_value_grad(np.zeros((2, 2, 4)))
        assert abs(v_uniform - math.log(4)) < 1e-12
        rng = np.random.default_rng(0)
        for _ in range(20):
            v, _ = tn.anom_value_grad(rng.normal(0, 2, (2, 2, 4)))
            assert v >= v_uniform - 1e-12

    def test_anom_clamp_keeps_loss_finite(self):
        # near one-hot: three probabilities ~1e-12 each
        logits = np.zeros((1, 1, 4))
        logits[0, 0, 0] = 27.7  # e^-27.7 ~ 9e-13
        value, _ = tn.anom_value_grad(logits)
        assert math.isfinite(value)
        assert 15.0 < value < 25.0  # ~ (3/4) ln(1e12)

    def test_distill_matches_self_is_entropy(self):
        rng = np.random.default_rng(3)
        old = rng.normal(0, 2, (3, 3, 4))
        new = np.concatenate([old, np.full((3, 3, 1), -1e9)], axis=-1)
        q = tn.softmax_map(old)
        expected = float(-(q * np.log(np.maximum(q, 1e-12))).sum(-1).mean())
        value, _ = tn.distill_value_grad(new, old)
        assert abs(value - expected) < 1e-9

    def test_distill_onehot_zero(self):
        old = np.full((2, 2, 3), -1000.0)
        old[..., 1] = 1000.0
        new = np.concatenate([old, np.full((2, 2, 1), -1e9)], axis=-1)
        value, _ = tn.distill_value_grad(new, old)
        assert value < 1e-9

    def test_distill_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            tn.distill_value_grad(np.zeros((1, 1, 5)), np.zeros((1, 1, 3)))

    def test_total_entmax_endpoints_and_linearity(self):
        p = tiny_params(4)
        img1, lab1 = rand_instance(4)
        img2, _ = rand_instance(5)
        batch_d = [(img1, lab1)]
        batch_a = [img2]
        v0, g0 = tn.loss_total_entmax(p, batch_d, batch_a, 0.0)
        ce_v, ce_g = tn.loss_ce(p, img1, lab1)
        assert abs(v0 - ce_v) < 1e-12
        assert np.allclose(g0["w1"], ce_g["w1"])
        v1, g1 = tn.loss_total_entmax(p, [], batch_a, 1.0)
        an_v, an_g = tn.loss_anom(p, img2)
        assert abs(v1 - an_v) < 1e-12
        assert np.allclose(g1["w2"], an_g["w2"])
        vh, _ = tn.loss_total_entmax(p, batch_d, batch_a, 0.5)
        assert abs(vh - 0.5 * (v0 + v1)) < 1e-12

    def test_total_entmax_empty_labeled_batch(self):
        p = tiny_params(4)
        with pytest.raises(ValueError, match="empty labeled batch"):
            tn.loss_total_entmax(p, [], [], 0.5)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_ce_gradient(self, seed):
        img, labels = rand_instance(seed)
        p = tiny_params(seed)
        assert fd_param_check(lambda q: tn.loss_ce(q, img, labels), p) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_anom_gradient(self, seed):
        img, _ = rand_instance(seed + 10)
        p = tiny_params(seed + 10)
        assert fd_param_check(lambda q: tn.loss_anom(q, img), p) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_distill_gradient(self, seed):
        img, _ = rand_instance(seed + 20)
        old = tiny_params(seed + 20)
        new = tn.extend_head(old, seed)
        assert fd_param_check(lambda q: tn.loss_distill(q, old, img), new) < 1e-5

    def test_input_gradient_matches_fd(self):
        img, _ = rand_instance(30)
        p = tiny_params(30)

        def scalar(logits):
            return float((logits**2).sum()), 2.0 * logits

        g = tn.input_gradient(p, img, scalar)
        rng = np.random.default_rng(0)
        eps = 1e-5
        for _ in range(40):
            i, j, c = rng.integers(0, 4), rng.integers(0, 4), rng.integers(0, 3)
            old = img[i, j, c]
            img[i, j, c] = old + eps
            vp = float((tn.forward(p, img)[0] ** 2).sum())
            img[i, j, c] = old - eps
            vm = float((tn.forward(p, img)[0] ** 2).sum())
            img[i, j, c] = old
            fd = (vp - vm) / (2 * eps)
            assert abs(fd - g[i, j, c]) / max(abs(fd), abs(g[i, j, c]), 1e-8) < 1e-4

    def test_input_gradient_zero_cases(self):
        img, _ = rand_instance(31)
        p = tiny_params(31)
        p.w1[:] = 0.0

        def scalar(logits):
            return float(logits.sum()), np.ones_like(logits)

        assert np.all(tn.input_gradient(p, img, scalar) == 0.0)
        p2 = tiny_params(32)

        def const(logits):
            return 1.0, np.zeros_like(logits)

        assert np.all(tn.input_gradient(p2, img, const) == 0.0)


class TestTraining:
    def test_zero_epochs_unchanged(self):
        p = tiny_params(5)
        img, lab = rand_instance(5)
        p2, trace = tn.train(p, [(img, lab)], tn.CrossEntropyObjective(), 0, 0.1)
        assert trace == []
        assert np.array_equal(p.w1, p2.w1) and np.array_equal(p.b2, p2.b2)

    def test_frozen_encoder_bit_identical(self, small_world):
        data = [(s.image, s.mask) for s in small_world["train"][:6]]
        p = tn.init_params(seed=3)
        p2, _ = tn.train(p, data, tn.CrossEntropyObjective(), 2, 0.05, freeze_encoder=True)
        assert np.array_equal(p.w1, p2.w1)
        assert np.array_equal(p.b1, p2.b1)
        assert not np.array_equal(p.w2, p2.w2)

    def test_loss_decreases_on_world(self, trained_models):
        trace = trained_models["base_trace"]
        assert trace[-1] < trace[0]

    def test_training_bit_reproducible(self, small_world):
        data = [(s.image, s.mask) for s in small_world["train"][:6]]
        runs = []
        for _ in range(2):
            p = tn.init_params(seed=4)
            p2, trace = tn.train(p, data, tn.CrossEntropyObjective(), 2, 0.05, seed=9)
            runs.append((p2, trace))
        assert np.array_equal(runs[0][0].w1, runs[1][0].w1)
        assert np.array_equal(runs[0][0].w2, runs[1][0].w2)
        assert runs[0][1] == runs[1][1]

    def test_divergence_detected(self):
        p = tiny_params(6)
        img, lab = rand_instance(6)
        with pytest.raises(tn.TrainingDiverged):
            tn.train(p, [(img, lab)], tn.CrossEntropyObjective(), 5, 1e200)

    def test_invalid_lr(self):
        p = tiny_params(6)
        with pytest.raises(ValueError, match="lr"):
            tn.train(p, [], tn.CrossEntropyObjective(), 1, 0.0)


class TestExtendHead:
    def test_old_logits_identical(self):
        p = tiny_params(7)
        img, _ = rand_instance(7)
        ext = tn.extend_head(p, init_seed=11)
        before, _ = tn.forward(p, img)
        after, _ = tn.forward(ext, img)
        assert np.array_equal(after[..., :3], before)
        assert ext.n_out == 4

    def test_new_row_norm_bound(self):
        p = tn.init_params(hidden=32, seed=8)
        ext = tn.extend_head(p, init_seed=11)
        norm = float(np.linalg.norm(ext.w2[-1]))
        assert norm <= 0.01 * math.sqrt(32) * 5
        assert norm > 0.0

    def test_double_extension_composes(self):
        p = tiny_params(9)
        once = tn.extend_head(tn.extend_head(p, 1), 2)
        assert once.n_out == 5
        again = tn.extend_head(tn.extend_head(p, 1), 2)
        assert np.array_equal(once.w2, again.w2)
        assert np.array_equal(once.w2[:3], p.w2)


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        p = tiny_params(10)
        tn.save_params(tmp_path / "m", p)
        back = tn.load_params(tmp_path / "m")
        assert back.k == p.k and back.hidden == p.hidden and back.n_out == p.n_out
        # float32 quantization is the contract
        assert np.array_equal(back.w1, p.w1.astype(np.float32).astype(np.float64))

    def test_mc_samples_reproducible(self):
        p = tiny_params(11)
        img, _ = rand_instance(11)
        a = tn.dropout_softmax_samples(p, img, n_samples=3, seed=5)
        b = tn.dropout_softmax_samples(p, img, n_samples=3, seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        assert not np.array_equal(a[0], a[1])
