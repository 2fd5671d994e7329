"""Episode metrics (SR, SPL, SoftSPL, collisions), multi-seed aggregation,
and a one-sided unpaired Welch t-test with the Student survival function
evaluated through a continued-fraction incomplete beta (no external
numeric dependencies)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

METRICS = ("sr", "spl", "softspl", "collisions")


@dataclass
class EpisodeResult:
    success: bool
    shortest_path: float  # start-to-goal geodesic (cells the agent must walk)
    agent_path: int       # successful forward moves executed
    start_distance: float
    final_distance: float
    collisions: int
    steps: int
    goal_category: int
    split: str = ""
    seed: int = 0


def spl(result: EpisodeResult) -> float:
    if not result.success:
        return 0.0
    l = result.shortest_path
    if l <= 0:
        return 1.0  # degenerate: started at the goal
    return l / max(result.agent_path, l)


def soft_spl(result: EpisodeResult) -> float:
    d0 = result.start_distance
    if d0 <= 0:
        return 1.0 if result.success else 0.0  # degenerate episode
    progress = max(0.0, 1.0 - result.final_distance / d0)
    return progress * d0 / max(result.agent_path, d0)


def episode_metrics(result: EpisodeResult) -> dict:
    return {
        "sr": 1.0 if result.success else 0.0,
        "spl": spl(result),
        "softspl": soft_spl(result),
        "collisions": float(result.collisions),
    }


@dataclass
class EvalReport:
    # split -> metric -> (mean across seeds, sample std or None)
    splits: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)  # split -> sorted seed list
    per_category: dict = field(default_factory=dict)  # split -> {category: sr}


def aggregate(results) -> EvalReport:
    """Per-seed metric means first, then mean and sample std across seeds."""
    results = list(results)
    if not results:
        raise ValueError("no episode results to aggregate")
    report = EvalReport()
    by_split = {}
    for r in results:
        by_split.setdefault(r.split, []).append(r)
    for split, rows in sorted(by_split.items()):
        by_seed = {}
        for r in rows:
            by_seed.setdefault(r.seed, []).append(r)
        seeds = sorted(by_seed)
        report.seeds[split] = seeds
        metric_rows = {m: [] for m in METRICS}
        for seed in seeds:
            eps = by_seed[seed]
            for m in METRICS:
                metric_rows[m].append(float(np.mean([episode_metrics(r)[m] for r in eps])))
        report.splits[split] = {}
        for m in METRICS:
            vals = metric_rows[m]
            std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
            report.splits[split][m] = (float(np.mean(vals)), std)
        cats = {}
        for r in rows:
            cats.setdefault(r.goal_category, []).append(1.0 if r.success else 0.0)
        report.per_category[split] = {c: float(np.mean(v)) for c, v in sorted(cats.items())}
    return report


# --- Student t machinery ----------------------------------------------------

def _betacf(a, b, x, eps=3e-14, max_iter=300):
    """Continued fraction for the regularized incomplete beta (modified
    Lentz). Converges to well below the 1e-8 target for the dofs here."""
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def reg_inc_beta(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log(1.0 - x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, dof):
    """P(T > t) for Student's t with `dof` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = dof / (dof + t * t)
    p = 0.5 * reg_inc_beta(dof / 2.0, 0.5, x)
    return p if t >= 0 else 1.0 - p


def welch_t_one_sided(sample_a, sample_b, alternative="a_greater"):
    """Welch's unpaired t-test, one-sided. Returns (t, dof, p).

    alternative 'a_greater' tests mean(a) > mean(b); 'a_less' the reverse.
    Two zero-variance samples with equal means give p = 0.5 by convention.
    """
    if alternative not in ("a_greater", "a_less"):
        raise ValueError("alternative must be 'a_greater' or 'a_less'")
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = len(a), len(b)
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    se2 = va / na + vb / nb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, float(na + nb - 2), 0.5
        t = math.inf if diff > 0 else -math.inf
        dof = float(na + nb - 2)
    else:
        t = diff / math.sqrt(se2)
        dof = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = student_t_sf(t, dof) if alternative == "a_greater" else 1.0 - student_t_sf(t, dof)
    return float(t), float(dof), float(p)


# --- CSV io ------------------------------------------------------------------

EPISODE_FIELDS = ("split", "seed", "goal_category", "success", "shortest_path",
                  "agent_path", "start_distance", "final_distance", "collisions",
                  "steps", "spl", "softspl")


def write_episodes_csv(path, results):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPISODE_FIELDS)
        for r in results:
            w.writerow([
                r.split, r.seed, r.goal_category, int(r.success),
                f"{r.shortest_path:.6g}", r.agent_path,
                f"{r.start_distance:.6g}", f"{r.final_distance:.6g}",
                r.collisions, r.steps, f"{spl(r):.6g}", f"{soft_spl(r):.6g}",
            ])


def read_episodes_csv(path):
    results = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for ln, row in enumerate(reader, 2):
            try:
                results.append(EpisodeResult(
                    success=bool(int(row["success"])),
                    shortest_path=float(row["shortest_path"]),
                    agent_path=int(row["agent_path"]),
                    start_distance=float(row["start_distance"]),
                    final_distance=float(row["final_distance"]),
                    collisions=int(row["collisions"]),
                    steps=int(row["steps"]),
                    goal_category=int(row["goal_category"]),
                    split=row["split"],
                    seed=int(row["seed"]),
                ))
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}: malformed row {ln}: {e}") from e
    return results


def write_eval_report_csv(path, report: EvalReport):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "metric", "mean", "std", "seeds"])
        for split in sorted(report.splits):
            seeds = " ".join(str(s) for s in report.seeds[split])
            for m in METRICS:
                mean_, std = report.splits[split][m]
                w.writerow([split, m, f"{mean_:.6g}",
                            "" if std is None else f"{std:.6g}", seeds])


def compare_runs(results_a, results_b, metric="sr", alternative="a_greater", alpha=0.05):
    """Welch test on per-seed means of one metric; returns a text block."""
    def seed_means(results):
        by_seed = {}
        for r in results:
            by_seed.setdefault(r.seed, []).append(episode_metrics(r)[metric])
        return [float(np.mean(v)) for _, v in sorted(by_seed.items())]

    a = seed_means(results_a)
    b = seed_means(results_b)
    t, dof, p = welch_t_one_sided(a, b, alternative)
    lines = [
        f"metric={metric} alternative={alternative}",
        f"run_a: n_seeds={len(a)} mean={np.mean(a):.6g}",
        f"run_b: n_seeds={len(b)} mean={np.mean(b):.6g}",
        f"t={t:.6g} dof={dof:.6g} p={p:.6g}",
        (f"reject H0 at alpha={alpha}" if p < alpha else f"fail to reject H0 at alpha={alpha}"),
    ]
    return "\n".join(lines), (t, dof, p)
