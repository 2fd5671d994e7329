import numpy as np
import pytest

from navlab.gridworld import FREE, OBJECT_BASE
from navlab.segnoise import (
    CalibrationTable,
    CategoryNoise,
    Detection,
    SegNoiseModel,
    apply_threshold,
    connected_components,
    default_noise_model,
    detection_rng,
    filter_small_masks,
    predict_detections,
    write_sweep_csv,
)


def ccl_oracle(mask):
    """Union-find connected-component labeling (independent of the BFS path)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            parent.setdefault((x, y), (x, y))
            if x > 0 and mask[y, x - 1]:
                union((x - 1, y), (x, y))
            if y > 0 and mask[y - 1, x]:
                union((x, y - 1), (x, y))
    groups = {}
    for cell in parent:
        groups.setdefault(find(cell), set()).add(cell)
    return {frozenset(g) for g in groups.values()}


def view_with(goal_cells, other_cells=(), k=9, other_cat=2, goal_cat=0):
    view = np.full((k, k), FREE, dtype=np.int16)
    for x, y in goal_cells:
        view[y, x] = OBJECT_BASE + goal_cat
    for x, y in other_cells:
        view[y, x] = OBJECT_BASE + other_cat
    return view


class TestPredict:
    def test_noiseless_limit_reproduces_blobs(self):
        model = SegNoiseModel({0: CategoryNoise(recall_base=1.0, recall_slope=0.0, fp_rate=0.0)})
        view = view_with([(1, 1), (2, 1), (5, 5)])
        rng = detection_rng(model, 7, 0)
        dets = predict_detections(view, 0, model, rng)
        assert len(dets) == 2
        assert all(d.is_true_positive for d in dets)
        union = np.zeros_like(view, dtype=np.uint8)
        for d in dets:
            union |= d.mask
        assert np.array_equal(union, (view == OBJECT_BASE).astype(np.uint8))

    def test_zero_recall_always_empty(self):
        model = SegNoiseModel({0: CategoryNoise(recall_base=0.0, recall_slope=0.0, fp_rate=0.0)})
        view = view_with([(1, 1)])
        for step in range(50):
            assert predict_detections(view, 0, model, detection_rng(model, 1, step)) == []

    def test_detection_rate_matches_bernoulli_oracle(self):
        model = SegNoiseModel({0: CategoryNoise(recall_base=0.7, recall_slope=0.0, fp_rate=0.0)})
        view = view_with([(4, 4)])
        n = 10_000
        hits = sum(
            bool(predict_detections(view, 0, model, detection_rng(model, 1, step)))
            for step in range(n)
        )
        p = 0.7
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(hits / n - p) < 3 * sigma

    def test_deterministic_per_episode_step(self):
        model = default_noise_model(8, model_seed=5)
        view = view_with([(1, 1), (6, 2)], other_cells=[(3, 3)])
        a = predict_detections(view, 3, model, detection_rng(model, 11, 4))
        b = predict_detections(view, 3, model, detection_rng(model, 11, 4))
        assert len(a) == len(b)
        for d1, d2 in zip(a, b):
            assert d1.confidence == d2.confidence
            assert np.array_equal(d1.mask, d2.mask)

    def test_false_positives_use_confusion_blobs(self):
        model = SegNoiseModel({0: CategoryNoise(recall_base=0.0, fp_rate=1.0,
                                                confusion=(2,))})
        view = view_with([], other_cells=[(3, 3), (4, 3)], other_cat=2)
        dets = predict_detections(view, 0, model, detection_rng(model, 2, 0))
        assert len(dets) == 1
        assert not dets[0].is_true_positive
        assert np.array_equal(dets[0].mask, (view == OBJECT_BASE + 2).astype(np.uint8))

    def test_alias_collapses_before_thresholding(self):
        model = SegNoiseModel({0: CategoryNoise(recall_base=1.0, fp_rate=0.0)},
                              aliases={5: 0})
        view = view_with([(1, 1)], goal_cat=0)
        dets = predict_detections(view, 5, model, detection_rng(model, 1, 0))
        assert len(dets) == 1


class TestThreshold:
    def dets(self):
        m1 = np.zeros((5, 5), np.uint8)
        m1[0, 0] = 1
        m2 = np.zeros((5, 5), np.uint8)
        m2[4, 4] = 1
        return [Detection(m1, 0.2, True), Detection(m2, 0.5, True)]

    def test_zero_threshold_keeps_all(self):
        table = CalibrationTable(thresholds={0: 0.0})
        mask = apply_threshold(self.dets(), table, 0)
        assert mask.sum() == 2

    def test_threshold_one_drops_all(self):
        table = CalibrationTable(thresholds={0: 1.0})
        assert apply_threshold(self.dets(), table, 0) is None

    def test_mixed_keeps_only_confident(self):
        table = CalibrationTable(thresholds={0: 0.3})
        mask = apply_threshold(self.dets(), table, 0)
        assert mask[4, 4] == 1 and mask[0, 0] == 0

    def test_default_threshold_fallback(self):
        table = CalibrationTable(default_threshold=0.3)
        mask = apply_threshold(self.dets(), table, 9)
        assert mask[4, 4] == 1 and mask[0, 0] == 0

    def test_monotone_raising_threshold_never_adds_pixels(self):
        rng = np.random.default_rng(0)
        model = default_noise_model(8)
        view = view_with([(1, 1), (2, 1), (5, 5), (7, 7)], other_cells=[(3, 6)])
        dets = predict_detections(view, 0, model, detection_rng(model, 3, 1))
        prev = None
        for thr in np.linspace(0, 1, 21):
            mask = apply_threshold(dets, CalibrationTable(thresholds={0: float(thr)}), 0)
            total = 0 if mask is None else int(mask.sum())
            if prev is not None:
                assert total <= prev
            prev = total

    def test_table_file_roundtrip(self, tmp_path):
        table = CalibrationTable(thresholds={0: 0.05, 3: 0.45})
        path = tmp_path / "calib.tsv"
        table.save(path)
        loaded = CalibrationTable.load(path)
        assert loaded.thresholds == {0: 0.05, 3: 0.45}
        assert loaded.threshold_for(1) == 0.3

    def test_malformed_table_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("0 0.3\n")
        with pytest.raises(ValueError, match="bad.tsv:1"):
            CalibrationTable.load(path)


class TestFilterSmallMasks:
    def test_single_cell_removed(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[2, 2] = 1
        assert filter_small_masks(mask, min_extent=1, min_area=2).sum() == 0

    def test_two_by_two_kept(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[2:4, 2:4] = 1
        out = filter_small_masks(mask, min_extent=1, min_area=2)
        assert np.array_equal(out, mask)

    def test_extent_filter(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[1, 1:5] = 1  # 4x1 line: extent 1 in one direction
        assert filter_small_masks(mask, min_extent=2, min_area=2).sum() == 0
        assert filter_small_masks(mask, min_extent=1, min_area=2).sum() == 4

    def test_components_match_ccl_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            mask = (rng.random((9, 9)) < 0.35).astype(np.uint8)
            comps = connected_components(mask)
            got = {frozenset((int(x), int(y)) for y, x in np.argwhere(c)) for c in comps}
            assert got == ccl_oracle(mask)

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mask = (rng.random((9, 9)) < 0.3).astype(np.uint8)
            once = filter_small_masks(mask, 1, 2)
            twice = filter_small_masks(once, 1, 2)
            assert np.array_equal(once, twice)

    def test_zero_thresholds_are_identity(self):
        rng = np.random.default_rng(3)
        mask = (rng.random((7, 7)) < 0.3).astype(np.uint8)
        assert np.array_equal(filter_small_masks(mask, 0, 0), mask)


def test_default_model_has_low_and_high_confidence_categories():
    model = default_noise_model(8)
    means = {c: p.conf_a / (p.conf_a + p.conf_b) for c, p in model.categories.items()}
    assert min(means.values()) < 0.15  # one category mostly below a 0.3 threshold
    assert max(means.values()) > 0.6
    assert any(p.fp_rate > 0 for p in model.categories.values())


def test_sweep_csv_writer(tmp_path):
    rows = [(0, 0.1, 0.8, 20), (1, None, None, 0)]
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "category,threshold,sr,episodes"
    assert lines[1] == "0,0.1,0.8,20"
    assert lines[2] == "1,,,0"
