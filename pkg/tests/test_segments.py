import numpy as np
import pytest

from anomseg import segments as sg
from anomseg import toynet as tn
from anomseg.scoring import score_entropy
from anomseg.tensorio import IGNORE_LABEL


class TestConnectedComponents:
    def test_uniform_single_segment(self):
        segs = sg.connected_components(np.zeros((5, 5), np.uint8))
        assert len(segs) == 1
        assert segs[0].size == 25

    def test_checkerboard_8conn_two_segments(self):
        lab = np.array([[0, 1], [1, 0]], np.uint8)
        segs = sg.connected_components(lab)
        assert len(segs) == 2
        assert sorted(s.class_label for s in segs) == [0, 1]
        # diagonals connect under 8-connectivity
        assert all(s.size == 2 for s in segs)

    def test_checkerboard_4conn_four_segments(self):
        lab = np.array([[0, 1], [1, 0]], np.uint8)
        segs = sg.connected_components(lab, connectivity=4)
        assert len(segs) == 4

    def test_single_differing_pixel(self):
        lab = np.zeros((4, 4), np.uint8)
        lab[2, 2] = 3
        segs = sg.connected_components(lab)
        assert len(segs) == 2

    def test_partition_of_non_ignore(self):
        rng = np.random.default_rng(0)
        lab = rng.integers(0, 3, (16, 16)).astype(np.uint8)
        lab[rng.random((16, 16)) < 0.1] = IGNORE_LABEL
        segs = sg.connected_components(lab)
        covered = np.zeros(lab.shape, bool)
        for s in segs:
            assert not covered[s.rows, s.cols].any()
            covered[s.rows, s.cols] = True
            assert np.unique(lab[s.rows, s.cols]).size == 1
        assert np.array_equal(covered, lab != IGNORE_LABEL)

    def test_ordering_by_min_row_col(self):
        lab = np.zeros((4, 6), np.uint8)
        lab[0, 4] = 1
        lab[3, 0] = 2
        segs = sg.connected_components(lab)
        keys = [(int(s.rows.min()), int(s.cols.min())) for s in segs]
        assert keys == sorted(keys)


class TestSegmentIoU:
    def _seg(self, mask):
        rows, cols = np.nonzero(mask)
        return sg.Segment(0, 1, rows, cols, mask.shape)

    def test_identical(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert sg.segment_iou(self._seg(m), m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        a[0, 0] = True
        b = np.zeros((4, 4), bool)
        b[3, 3] = True
        assert sg.segment_iou(self._seg(a), b) == 0.0

    def test_shifted_block_third(self):
        a = np.zeros((4, 4), bool)
        a[1:3, 0:2] = True
        b = np.zeros((4, 4), bool)
        b[1:3, 1:3] = True
        assert abs(sg.segment_iou(self._seg(a), b) - 1.0 / 3.0) < 1e-12


class TestSegmentMetrics:
    def test_onehot_entropy_zero(self):
        lab = np.zeros((4, 4), np.uint8)
        seg = sg.connected_components(lab)[0]
        softmax = np.zeros((4, 4, 3))
        softmax[..., 1] = 1.0
        v = sg.segment_metrics(seg, softmax)
        assert v.shape == (sg.N_METRICS,)
        assert abs(v[0]) < 1e-9  # mean normalized entropy

    def test_one_pixel_segment(self):
        lab = np.zeros((3, 3), np.uint8)
        lab[1, 1] = 1
        segs = sg.connected_components(lab)
        one = [s for s in segs if s.class_label == 1][0]
        v = sg.segment_metrics(one, np.full((3, 3, 2), 0.5))
        assert v[5] == 1.0  # size
        assert v[7] == 1.0  # boundary fraction

    def test_full_image_centroid(self):
        lab = np.zeros((5, 7), np.uint8)
        seg = sg.connected_components(lab)[0]
        v = sg.segment_metrics(seg, np.full((5, 7, 2), 0.5))
        assert abs(v[9] - 0.5) < 1e-12
        assert abs(v[10] - 0.5) < 1e-12


def separable_segments(n=20, seed=0):
    """Half good (IoU>0) and half bad segments with disjoint metric ranges."""
    rng = np.random.default_rng(seed)
    segs = []
    for i in range(n):
        good = i % 2 == 0
        seg = sg.Segment(i, 1, np.array([0]), np.array([0]), (4, 4))
        base = np.zeros(sg.N_METRICS)
        base[0] = 0.9 if good else 0.1
        base[5] = 100 + rng.random() if good else 2 + rng.random()
        base[6] = np.log(base[5])
        seg.metrics = base
        seg.true_iou = 0.8 if good else 0.0
        segs.append(seg)
    return segs


class TestMetaClassifier:
    def test_separable_perfect_accuracy(self):
        segs = separable_segments()
        model = sg.meta_fit(segs)
        kept = sg.meta_apply(model, segs)
        assert sorted(s.index for s in kept) == [s.index for s in segs if s.true_iou > 0]

    def test_zero_iterations_prob_half(self):
        segs = separable_segments()
        model = sg.meta_fit(segs, iters=0)
        probs = model.predict_proba(np.stack([s.metrics for s in segs]))
        assert np.allclose(probs, 0.5)

    def test_single_outcome_rejected(self):
        segs = [s for s in separable_segments() if s.true_iou > 0]
        with pytest.raises(ValueError, match="both outcomes"):
            sg.meta_fit(segs)

    def test_extreme_bias(self):
        segs = separable_segments()
        model = sg.meta_fit(segs)
        model.bias = 1e9
        assert len(sg.meta_apply(model, segs)) == len(segs)
        model.bias = -1e9
        assert len(sg.meta_apply(model, segs)) == 0

    def test_logistic_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (30, 5))
        y = (rng.random(30) > 0.5).astype(float)
        w = rng.normal(0, 0.5, 5)
        b = 0.3
        _, dw, db = sg.logistic_loss_grad(w, b, x, y)
        eps = 1e-6
        for i in range(5):
            w[i] += eps
            lp, _, _ = sg.logistic_loss_grad(w, b, x, y)
            w[i] -= 2 * eps
            lm, _, _ = sg.logistic_loss_grad(w, b, x, y)
            w[i] += eps
            assert abs((lp - lm) / (2 * eps) - dw[i]) < 1e-6
        lp, _, _ = sg.logistic_loss_grad(w, b + eps, x, y)
        lm, _, _ = sg.logistic_loss_grad(w, b - eps, x, y)
        assert abs((lp - lm) / (2 * eps) - db) < 1e-6


class TestObjectLevelEval:
    def test_threshold_above_all(self):
        amap = np.zeros((8, 8))
        gt = np.zeros((8, 8), np.uint8)
        gt[2:4, 2:4] = 1
        res = sg.object_level_eval([amap], 0.5, [gt])
        assert res["fp"] == 0 and res["fn"] == 1 and res["f1"] == 0.0

    def test_perfect_map(self):
        gt = np.zeros((8, 8), np.uint8)
        gt[2:4, 2:4] = 1
        amap = gt.astype(np.float64)
        res = sg.object_level_eval([amap], 0.5, [gt])
        assert res["fp"] == 0 and res["fn"] == 0 and res["f1"] == 1.0

    def test_fp_only(self):
        gt = np.zeros((8, 8), np.uint8)
        gt[6:8, 6:8] = 1
        amap = np.zeros((8, 8))
        amap[0:2, 0:2] = 1.0
        res = sg.object_level_eval([amap], 0.5, [gt])
        assert res["fp"] == 1 and res["fn"] == 1 and res["tp"] == 0

    def test_fp_nonincreasing_in_tau(self, small_world, trained_models):
        scenes = small_world["test"][:6]
        params = trained_models["entmax"]
        maps, gts = [], []
        for s in scenes:
            sm = tn.softmax_map(tn.forward(params, s.image)[0])
            maps.append(score_entropy(sm))
            gts.append(s.anomaly_mask)
        fps = []
        for tau in (0.3, 0.5, 0.7, 0.9):
            fps.append(sg.object_level_eval(maps, tau, gts)["fp"])
        assert all(a >= b for a, b in zip(fps, fps[1:]))

    def test_meta_never_increases_fp(self, small_world, trained_models):
        params = trained_models["entmax"]
        scenes = small_world["test"]
        maps, gts, sms = [], [], []
        for s in scenes:
            sm = tn.softmax_map(tn.forward(params, s.image)[0])
            sms.append(sm)
            maps.append(score_entropy(sm))
            gts.append(s.anomaly_mask)
        segs = []
        for amap, gt, sm in zip(maps, gts, sms):
            segs.extend(sg.anomaly_segments(amap, 0.5, gt_mask=gt, softmax=sm))
        model = sg.meta_fit(segs)
        for tau in (0.4, 0.6):
            plain = sg.object_level_eval(maps, tau, gts)
            meta = sg.object_level_eval(maps, tau, gts, meta_model=model, softmax_maps=sms)
            assert meta["fp"] <= plain["fp"]
            assert meta["fn"] >= plain["fn"]


class TestClassStats:
    def test_confusion_and_stats(self):
        pred = [np.array([[0, 1], [1, 1]], np.uint8)]
        gt = [np.array([[0, 1], [255, 0]], np.uint8)]
        conf = sg.confusion_matrix(pred, gt, 2)
        assert conf.sum() == 3  # one ignore dropped
        stats = sg.class_stats(conf)
        # class 0: tp=1, gt=2, pred=1 -> iou 1/2
        assert abs(stats["iou"][0] - 0.5) < 1e-12
        assert abs(stats["recall"][0] - 0.5) < 1e-12
        assert abs(stats["precision"][0] - 1.0) < 1e-12
