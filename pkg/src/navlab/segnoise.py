"""Parametric noisy open-vocabulary segmenter and its adaptation tools.

Stands in for a real detector: per category, true goal blobs are detected
with a size-dependent recall and a Beta-distributed confidence, and
look-alike categories occasionally produce false-positive masks. On top
of that sit the deployment adaptations: confidence thresholding with a
per-category calibration table, small-component filtering, and an SR
sweep that picks thresholds per category.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridworld import OBJECT_BASE


@dataclass(frozen=True)
class CategoryNoise:
    recall_base: float = 1.0
    recall_slope: float = 0.0  # recall grows with blob area
    conf_a: float = 8.0
    conf_b: float = 2.0
    fp_rate: float = 0.0  # per-frame probability of a false-positive mask
    fp_conf_a: float = 2.0
    fp_conf_b: float = 8.0
    confusion: tuple = ()  # categories whose blobs may be mislabeled as this one

    def __post_init__(self):
        for name in ("recall_base", "fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("conf_a", "conf_b", "fp_conf_a", "fp_conf_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SegNoiseModel:
    categories: dict  # category id -> CategoryNoise
    model_seed: int = 0
    aliases: dict = field(default_factory=dict)  # redundant id -> canonical id

    def canonical(self, category):
        return self.aliases.get(category, category)

    def params_for(self, category):
        return self.categories.get(self.canonical(category), CategoryNoise())


def default_noise_model(category_count=8, model_seed=0):
    """Heterogeneous default: mostly well-behaved categories, one whose true
    detections are low-confidence (a 0.3 threshold starves it) and one with
    confusable look-alikes (it benefits from a higher threshold)."""
    cats = {}
    for c in range(category_count):
        cats[c] = CategoryNoise(recall_base=0.85, recall_slope=0.05,
                                conf_a=8.0, conf_b=3.0)
    low_conf = 1 % category_count
    cats[low_conf] = CategoryNoise(recall_base=0.9, recall_slope=0.05,
                                   conf_a=1.5, conf_b=14.0)
    confused = 3 % category_count
    cats[confused] = CategoryNoise(recall_base=0.85, recall_slope=0.05,
                                   conf_a=9.0, conf_b=2.0,
                                   fp_rate=0.45, fp_conf_a=4.0, fp_conf_b=5.0,
                                   confusion=(int((confused + 1) % category_count),))
    return SegNoiseModel(categories=cats, model_seed=model_seed)


@dataclass
class Detection:
    mask: np.ndarray  # (K, K) uint8, nonempty
    confidence: float
    is_true_positive: bool


def detection_rng(model: SegNoiseModel, episode_seed, step):
    """Deterministic per (model_seed, episode, step) stream."""
    return np.random.default_rng(
        np.random.SeedSequence([int(model.model_seed) & (2**63 - 1),
                                int(episode_seed) & (2**63 - 1), int(step)])
    )


def connected_components(mask):
    """4-connected components of a binary mask, ordered by first (row-major)
    pixel. Returns a list of uint8 masks."""
    mask = np.asarray(mask)
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            stack = [(x, y)]
            seen[y, x] = True
            comp = np.zeros((h, w), dtype=np.uint8)
            while stack:
                cx, cy = stack.pop()
                comp[cy, cx] = 1
                for dx, dy in ((0, -1), (-1, 0), (1, 0), (0, 1)):
                    nx, ny = cx + dx, cy + dy
                    if 0 <= nx < w and 0 <= ny < h and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((nx, ny))
            comps.append(comp)
    return comps


def predict_detections(view, goal_category, model: SegNoiseModel, rng) -> list:
    """Noisy detections for the goal category in one ego view."""
    p = model.params_for(goal_category)
    goal_id = OBJECT_BASE + model.canonical(goal_category)
    out = []
    for blob in connected_components(np.asarray(view) == goal_id):
        area = int(blob.sum())
        recall = min(1.0, p.recall_base + p.recall_slope * area)
        if rng.random() < recall:
            conf = float(rng.beta(p.conf_a, p.conf_b))
            out.append(Detection(mask=blob, confidence=conf, is_true_positive=True))
    if p.confusion and rng.random() < p.fp_rate:
        candidates = []
        for cat in p.confusion:
            candidates.extend(connected_components(np.asarray(view) == OBJECT_BASE + cat))
        if candidates:
            blob = candidates[int(rng.integers(len(candidates)))]
            conf = float(rng.beta(p.fp_conf_a, p.fp_conf_b))
            out.append(Detection(mask=blob, confidence=conf, is_true_positive=False))
    return out


@dataclass
class CalibrationTable:
    thresholds: dict = field(default_factory=dict)  # category id -> threshold
    default_threshold: float = 0.3

    def threshold_for(self, category):
        return self.thresholds.get(category, self.default_threshold)

    def save(self, path):
        with open(path, "w") as f:
            for cat in sorted(self.thresholds):
                f.write(f"{cat}\t{self.thresholds[cat]:.6g}\n")

    @classmethod
    def load(cls, path, default_threshold=0.3):
        table = cls(default_threshold=default_threshold)
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{ln}: expected 'category<TAB>threshold'")
                table.thresholds[int(parts[0])] = float(parts[1])
        return table


def apply_threshold(detections, table: CalibrationTable, category):
    """Union of detection masks at or above the category's threshold."""
    thr = table.threshold_for(category)
    out = None
    for det in detections:
        if det.confidence >= thr:
            out = det.mask.copy() if out is None else (out | det.mask)
    if out is None:
        return None  # caller substitutes an all-zero mask of the right shape
    return out.astype(np.uint8)


def filter_small_masks(mask, min_extent=1, min_area=2):
    """Drop connected components whose bounding box is narrower than
    min_extent in either direction or whose area is below min_area."""
    mask = np.asarray(mask)
    out = np.zeros_like(mask, dtype=np.uint8)
    for comp in connected_components(mask):
        ys, xs = np.nonzero(comp)
        width = xs.max() - xs.min() + 1
        height = ys.max() - ys.min() + 1
        if width >= min_extent and height >= min_extent and len(xs) >= min_area:
            out |= comp
    return out


def calibrate(policy_params, episodes_by_category, model: SegNoiseModel,
              threshold_grid, success_radius=1, calibration_split="calib"):
    """Per-category SR sweep over candidate confidence thresholds.

    episodes_by_category: {category id: list of EpisodeSpec} evaluated with
    the same seeds at every threshold (paired comparison). Returns
    (CalibrationTable, sweep rows) where each row is
    (category, threshold, sr, episodes). Categories without episodes keep
    the default threshold and are flagged with sr=None.
    """
    from .runner import evaluate_policy  # local import: runner uses this module

    grid = sorted(set(float(t) for t in threshold_grid))
    if not grid or any(not 0.0 <= t <= 1.0 for t in grid):
        raise ValueError("threshold grid must be a nonempty subset of [0, 1]")
    table = CalibrationTable()
    rows = []
    for cat in sorted(episodes_by_category):
        specs = episodes_by_category[cat]
        if not specs:
            rows.append((cat, None, None, 0))
            continue
        best_thr, best_sr = None, -1.0
        for thr in grid:
            probe = CalibrationTable(thresholds={cat: thr})
            # Same seed for every threshold: paired comparison over episodes.
            results = evaluate_policy(
                policy_params, specs, split=calibration_split, seed=1000 + cat,
                mask_source="noisy", noise_model=model, calibration=probe,
            )
            sr = float(np.mean([r.success for r in results]))
            rows.append((cat, thr, sr, len(specs)))
            if sr > best_sr:  # ties keep the earlier (lower) threshold
                best_thr, best_sr = thr, sr
        table.thresholds[cat] = best_thr
    return table, rows


def write_sweep_csv(path, rows):
    with open(path, "w") as f:
        f.write("category,threshold,sr,episodes\n")
        for cat, thr, sr, n in rows:
            thr_s = "" if thr is None else f"{thr:.6g}"
            sr_s = "" if sr is None else f"{sr:.6g}"
            f.write(f"{cat},{thr_s},{sr_s},{n}\n")
