import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats
from sklearn.metrics import f1_score, r2_score, recall_score

from spatial_templates import corpus, embed, metrics, models
from spatial_templates.corpus import Box
from spatial_templates.metrics import (
    CtrlBaseline,
    EvalReport,
    MetricError,
    above_below,
    ctrl_baseline,
    evaluate,
    iou,
    iou_accuracy,
    mean_iou_pixels,
    pearson,
    r_squared,
)


def iou_counting_oracle(box_a: Box, box_b: Box, cells: int = 1000) -> float:
    """Count cell centers of a grid laid over the pair's joint bounding box."""
    ax0, ay0, ax1, ay1 = box_a.corners()
    bx0, by0, bx1, by1 = box_b.corners()
    x0, x1 = min(ax0, bx0), max(ax1, bx1)
    y0, y1 = min(ay0, by0), max(ay1, by1)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    xs = x0 + (np.arange(cells) + 0.5) * (x1 - x0) / cells
    ys = y0 + (np.arange(cells) + 0.5) * (y1 - y0) / cells
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx >= ax0) & (gx <= ax1) & (gy >= ay0) & (gy <= ay1)
    in_b = (gx >= bx0) & (gx <= bx1) & (gy >= by0) & (gy <= by1)
    inter = int(np.sum(in_a & in_b))
    union = int(np.sum(in_a | in_b))
    return inter / union if union else 0.0


def random_box(rng) -> Box:
    return Box(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
               rng.uniform(0.02, 0.35), rng.uniform(0.02, 0.35))


class TestIou:
    def test_identical(self):
        box = Box(0.4, 0.4, 0.2, 0.1)
        assert iou(box, box) == 1.0

    def test_disjoint(self):
        assert iou(Box(0.1, 0.1, 0.05, 0.05), Box(0.9, 0.9, 0.05, 0.05)) == 0.0

    def test_one_third_case(self):
        a = Box(0.5, 0.5, 0.25, 0.25)
        b = Box(0.75, 0.5, 0.25, 0.25)
        assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert iou_counting_oracle(a, b) == pytest.approx(1.0 / 3.0, abs=2e-3)

    def test_zero_area_pairs(self):
        a = Box(0.5, 0.5, 0.0, 0.0)
        assert iou(a, a) == 0.0

    def test_negative_half_rejected(self):
        with pytest.raises(MetricError):
            iou(Box(0.5, 0.5, -0.1, 0.1), Box(0.5, 0.5, 0.1, 0.1))

    def test_oracle_agreement_200_pairs(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            worst = max(worst, abs(iou(a, b) - iou_counting_oracle(a, b)))
        assert worst < 2e-3

    @given(cx=st.floats(0.1, 0.9), cy=st.floats(0.1, 0.9),
           hw=st.floats(0.01, 0.4), hh=st.floats(0.01, 0.4),
           dx=st.floats(-0.5, 0.5))
    @settings(max_examples=80, deadline=None)
    def test_symmetry_and_range(self, cx, cy, hw, hh, dx):
        a = Box(cx, cy, hw, hh)
        b = Box(cx + dx, cy, hw, hh)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


class TestIouAccuracy:
    def test_perfect(self):
        boxes = [Box(0.5, 0.5, 0.1, 0.1)] * 3
        assert iou_accuracy(boxes, boxes) == 1.0

    def test_exact_half_counted_incorrect(self):
        # concentric boxes, one half the height of the other; power-of-two
        # coordinates keep the ratio exactly 0.5 in binary floating point
        a = Box(0.5, 0.5, 0.25, 0.125)
        b = Box(0.5, 0.5, 0.25, 0.25)
        assert iou(a, b) == 0.5
        assert iou_accuracy([a], [b]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            iou_accuracy([], [])


class TestRSquared:
    def test_perfect(self):
        y = np.random.default_rng(0).normal(size=(50, 4))
        assert r_squared(y, y) == 1.0

    def test_constant_at_mean_is_zero(self):
        y = np.random.default_rng(1).normal(size=(50, 4))
        preds = np.tile(y.mean(axis=0), (50, 1))
        assert r_squared(preds, y) == pytest.approx(0.0, abs=1e-12)

    def test_matched_random_predictions_near_minus_one(self):
        rng = np.random.default_rng(2)
        y = rng.normal(0.5, 0.2, size=(20000, 4))
        preds = rng.normal(0.5, 0.2, size=(20000, 4))
        assert r_squared(preds, y) == pytest.approx(-1.0, abs=0.05)

    def test_agrees_with_sklearn_uniform_average(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=(100, 4))
        preds = y + rng.normal(0, 0.3, size=(100, 4))
        ours = r_squared(preds, y)
        ref = r2_score(y, preds, multioutput="uniform_average")
        assert ours == pytest.approx(ref, rel=1e-12)

    def test_zero_variance_dimension_excluded(self):
        y = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        preds = np.array([[1.0, 9.0], [2.0, 9.0], [3.0, 9.0]])
        assert r_squared(preds, y) == 1.0


class TestPearson:
    def test_identity(self):
        xs = np.arange(10.0)
        assert pearson(xs, xs) == pytest.approx(1.0)

    def test_negation(self):
        xs = np.arange(10.0)
        assert pearson(xs, -xs) == pytest.approx(-1.0)

    def test_constant_rejected(self):
        with pytest.raises(MetricError):
            pearson(np.arange(5.0), np.ones(5))

    def test_agrees_with_scipy(self):
        rng = np.random.default_rng(4)
        xs = rng.normal(size=200)
        ys = 0.3 * xs + rng.normal(size=200)
        ref = scipy_stats.pearsonr(xs, ys).statistic
        assert pearson(xs, ys) == pytest.approx(ref, rel=1e-12)

    @given(a=st.floats(0.1, 50.0), b=st.floats(-10.0, 10.0))
    @settings(max_examples=50, deadline=None)
    def test_positive_affine_invariance(self, a, b):
        rng = np.random.default_rng(5)
        xs = rng.normal(size=64)
        ys = rng.normal(size=64)
        base = pearson(xs, ys)
        assert pearson(a * xs + b, ys) == pytest.approx(base, abs=1e-9)


class TestAboveBelow:
    def test_all_match(self):
        subj = np.full(10, 0.5)
        true = np.array([0.7] * 5 + [0.3] * 5)
        acc, f1 = above_below(true, true, subj)
        assert acc == 1.0 and f1 == 1.0

    def test_all_flipped(self):
        subj = np.full(10, 0.5)
        true = np.array([0.7] * 5 + [0.3] * 5)
        pred = np.array([0.3] * 5 + [0.7] * 5)
        acc, _ = above_below(pred, true, subj)
        assert acc == 0.0

    def test_flip_complement_property(self):
        rng = np.random.default_rng(6)
        subj = rng.uniform(0.3, 0.7, 200)
        true = subj + rng.normal(0, 0.1, 200)
        pred = subj + rng.normal(0, 0.1, 200)
        flipped = 2 * subj - pred  # mirror predictions through the subject
        acc, _ = above_below(pred, true, subj)
        acc_flip, _ = above_below(flipped, true, subj)
        assert acc + acc_flip == pytest.approx(1.0)

    def test_random_predictions_near_half(self):
        rng = np.random.default_rng(7)
        n = 40000
        subj = rng.uniform(0.3, 0.7, n)
        true = subj + rng.normal(0, 0.1, n)
        pred = subj + rng.normal(0, 0.1, n)
        acc, _ = above_below(pred, true, subj)
        assert acc == pytest.approx(0.5, abs=0.02)

    def test_agrees_with_sklearn_macro(self):
        rng = np.random.default_rng(8)
        subj = rng.uniform(0.3, 0.7, 500)
        true = subj + rng.normal(0, 0.1, 500)
        pred = subj + rng.normal(0, 0.1, 500)
        acc, f1 = above_below(pred, true, subj)
        t_cls = (true - subj >= 0).astype(int)
        p_cls = (pred - subj >= 0).astype(int)
        assert acc == pytest.approx(
            recall_score(t_cls, p_cls, average="macro"), rel=1e-12)
        assert f1 == pytest.approx(
            f1_score(t_cls, p_cls, average="macro"), rel=1e-12)

    def test_zero_diff_counts_as_below(self):
        subj = np.array([0.5, 0.5])
        true = np.array([0.5, 0.7])   # both "below" under the zero rule
        pred = np.array([0.5, 0.5])
        acc, _ = above_below(pred, true, subj)
        assert acc == 1.0

    def test_missing_class_excluded_with_warning(self, caplog):
        subj = np.full(4, 0.5)
        true = np.full(4, 0.8)
        pred = np.array([0.8, 0.8, 0.2, 0.8])
        with caplog.at_level("WARNING"):
            acc, _ = above_below(pred, true, subj)
        assert acc == pytest.approx(0.75)
        assert "absent" in caplog.text


class TestMeanIouPixels:
    def test_exact_heatmaps(self):
        rng = np.random.default_rng(9)
        targets = (rng.uniform(size=(20, 15, 15)) < 0.1).astype(float)
        targets[0, 0, 0] = 1.0  # both classes present
        best, thr = mean_iou_pixels(targets, targets)
        assert best == 1.0 and 0.0 <= thr < 1.0

    def test_all_zero_heatmaps_exactly_half(self):
        rng = np.random.default_rng(10)
        targets = (rng.uniform(size=(50, 15, 15)) < 0.05).astype(float)
        targets[0, 0, 0] = 1.0
        best, _ = mean_iou_pixels(np.zeros_like(targets), targets)
        assert best == 0.5

    def test_random_uniform_near_half(self):
        rng = np.random.default_rng(11)
        targets = (rng.uniform(size=(100, 15, 15)) < 0.05).astype(float)
        targets[0, 0, 0] = 1.0
        heatmaps = rng.uniform(size=targets.shape)
        best, _ = mean_iou_pixels(heatmaps, targets)
        assert best == pytest.approx(0.5, abs=0.02)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(12)
        targets = (rng.uniform(size=(30, 15, 15)) < 0.1).astype(float)
        targets[0, 0, 0] = 1.0
        heatmaps = rng.uniform(0.05, 0.95, size=targets.shape)
        base, _ = mean_iou_pixels(heatmaps, targets)
        squashed, _ = mean_iou_pixels(heatmaps ** 3, targets)
        assert squashed == pytest.approx(base, abs=0.02)

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            mean_iou_pixels(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))

    def test_sweep_against_bruteforce(self):
        rng = np.random.default_rng(13)
        targets = (rng.uniform(size=(10, 8, 8)) < 0.2).astype(float)
        targets[0, 0, 0] = 1.0
        heatmaps = rng.uniform(size=targets.shape)
        best, best_thr = mean_iou_pixels(heatmaps, targets)
        acts, tgts = heatmaps.reshape(-1), targets.reshape(-1)
        scores = []
        for t in metrics.MIOU_THRESHOLDS:
            pred = acts > t
            r1 = np.sum(pred & (tgts == 1)) / np.sum(tgts == 1)
            r0 = np.sum(~pred & (tgts == 0)) / np.sum(tgts == 0)
            scores.append((r1 + r0) / 2)
        assert best == pytest.approx(max(scores), abs=1e-12)
        assert best_thr == pytest.approx(
            metrics.MIOU_THRESHOLDS[int(np.argmax(scores))])


class TestCtrl:
    def test_degenerate_sigma(self):
        targets = np.full((10, 4), 0.25)  # power of two: exact mean, zero std
        preds = ctrl_baseline(targets, 5, seed=0)
        assert np.all(preds == 0.25)

    def test_mean_within_bound(self):
        rng = np.random.default_rng(14)
        targets = rng.normal(0.4, 0.15, size=(500, 4))
        preds = ctrl_baseline(targets, 40000, seed=1)
        mu = targets.mean(axis=0)
        sigma = targets.std(axis=0)
        bound = 4 * sigma / np.sqrt(40000)
        assert np.all(np.abs(preds.mean(axis=0) - mu) < bound)

    def test_seed_determinism(self):
        targets = np.random.default_rng(15).normal(size=(100, 4))
        a = ctrl_baseline(targets, 50, seed=3)
        b = ctrl_baseline(targets, 50, seed=3)
        assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def small_world():
    insts = corpus.generate_synthetic(corpus.DEFAULT_RULES, 3000, 0.02, seed=7)
    tables = [embed.make_one_hot(v) for v in corpus.build_vocabs(insts)]
    return insts, tables


class TestEvaluate:
    def test_reg_report_has_no_miou(self, small_world):
        insts, tables = small_world
        model = models.train(insts[:1000], "reg", tables,
                             config=models.TrainConfig(epochs=2), seed=0)
        result = evaluate(model, insts[1000:1500])
        assert result["miou"] is None
        assert result["r_squared"] is not None
        assert result["iou_acc"] is not None

    def test_pix_report_has_no_iou_or_r2(self, small_world):
        insts, tables = small_world
        model = models.train(insts[:1000], "pix", tables,
                             config=models.TrainConfig(epochs=2), seed=0)
        result = evaluate(model, insts[1000:1500])
        assert result["iou_acc"] is None and result["r_squared"] is None
        assert result["miou"] is not None

    def test_provenance_mismatch(self, small_world):
        insts, tables = small_world
        model = models.train(insts[:500], "reg", tables,
                             config=models.TrainConfig(epochs=1), seed=0,
                             provenance={"stoplist_sha256": "aaa"})
        with pytest.raises(MetricError):
            evaluate(model, insts[500:600],
                     corpus_provenance={"stoplist_sha256": "bbb"})

    def test_empty_test_set(self, small_world):
        insts, tables = small_world
        model = models.train(insts[:500], "reg", tables,
                             config=models.TrainConfig(epochs=1), seed=0)
        with pytest.raises(MetricError):
            evaluate(model, [])

    def test_ctrl_signature_small(self, small_world):
        insts, _ = small_world
        ctrl = CtrlBaseline.fit(insts[:1500], "reg", seed=0)
        result = evaluate(ctrl, insts[1500:])
        assert result["r_squared"] < -0.5
        assert abs(result["acc_y"] - 0.5) < 0.1


class TestEvalReport:
    def test_mean_of_folds(self):
        report = EvalReport.from_folds("reg", "cv", [
            {"r_squared": 0.8, "acc_y": 0.9, "miou": None, "fold": 0},
            {"r_squared": 0.6, "acc_y": 1.0, "miou": None, "fold": 1},
        ])
        assert report.mean["r_squared"] == pytest.approx(0.7)
        assert report.mean["acc_y"] == pytest.approx(0.95)
        assert report.mean["miou"] is None
        assert "fold" not in report.mean

    def test_table_layout(self):
        report = EvalReport.from_folds("reg", "cv", [
            {"r_squared": 0.72, "acc_y": 0.764, "f1_y": 0.764,
             "r_x": 0.897, "r_y": 0.843, "iou_acc": 0.152, "miou": None}])
        table = report.to_table()
        header, row = table.splitlines()
        assert header.split() == ["method", "R2", "acc_y", "F1_y",
                                  "r_x", "r_y", "IoU", "mIoU"]
        assert row.split() == ["reg", "0.720", "0.764", "0.764",
                               "0.897", "0.843", "0.152", "-"]

    def test_cross_validate_smoke(self, small_world):
        insts, tables = small_world
        plan = corpus.make_cv_folds(insts, k=2, seed=0)
        report = metrics.cross_validate(
            insts, plan, "reg", tables,
            config=models.TrainConfig(epochs=1), seed=0)
        assert len(report.per_fold) == 2
        assert report.mean["r_squared"] is not None
