"""Task metrics and the bootstrap/significance protocol.

Confidence intervals bootstrap the mean performance over runs: each resample
draws sample ids with replacement, the metric is computed per run on the
resampled rows and averaged across runs, and the 2.5/97.5 percentiles of the
resulting distribution are reported.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (AlignmentError, ClassError, DegenerateError, FormatError,
                     ShapeError)
from .rng import derive_key, generator


# -- run results -----------------------------------------------------------------

@dataclass
class RunResult:
    """Predictions of one training run: (sample_id, truth, score vector) rows."""

    run_id: int
    sample_ids: list[str]
    truths: np.ndarray
    scores: np.ndarray  # (n,) or (n, k)

    def __post_init__(self):
        self.truths = np.asarray(self.truths)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.sample_ids) != len(self.truths) or len(self.sample_ids) != len(self.scores):
            raise ShapeError("run result columns have mismatched lengths")
        if not np.all(np.isfinite(self.scores)):
            raise FormatError(f"run {self.run_id}: non-finite scores")


def write_run_result(result: RunResult, path: str | Path) -> None:
    scores = result.scores if result.scores.ndim == 2 else result.scores[:, None]
    score_cols = ["score"] + [f"score_{k}" for k in range(1, scores.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "sample_id", "truth"] + score_cols)
        for sid, truth, row in zip(result.sample_ids, result.truths, scores):
            writer.writerow([result.run_id, sid, truth] + [repr(float(v)) for v in row])


def read_run_result(path: str | Path) -> RunResult:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["run_id", "sample_id", "truth"]:
            raise FormatError(f"{path}: not a run-result CSV")
        n_scores = len(header) - 3
        run_id, ids, truths, scores = None, [], [], []
        for row in reader:
            run_id = int(row[0])
            ids.append(row[1])
            truths.append(row[2])
            scores.append([float(v) for v in row[3:3 + n_scores]])
    truths_arr = np.array(truths)
    try:
        truths_arr = truths_arr.astype(np.float64)
    except ValueError:
        pass  # string labels are fine
    sc = np.array(scores)
    return RunResult(run_id=run_id if run_id is not None else 0, sample_ids=ids,
                     truths=truths_arr, scores=sc[:, 0] if sc.shape[1] == 1 else sc)


@dataclass
class MetricReport:
    metric: str
    point: float
    ci_low: float
    ci_high: float
    n_bootstrap: int
    seed: int
    n_redraws: int = 0
    p_values: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ci_low <= self.point <= self.ci_high:
            raise ShapeError(
                f"CI [{self.ci_low}, {self.ci_high}] does not bracket {self.point}")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "point": self.point, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "n_bootstrap": self.n_bootstrap,
                "seed": self.seed, "n_redraws": self.n_redraws,
                "p_values": self.p_values, "extra": self.extra}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True),
                              "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        d = json.loads(Path(path).read_text("utf-8"))
        return cls(metric=d["metric"], point=d["point"], ci_low=d["ci_low"],
                   ci_high=d["ci_high"], n_bootstrap=d["n_bootstrap"],
                   seed=d["seed"], n_redraws=d.get("n_redraws", 0),
                   p_values=d.get("p_values", {}), extra=d.get("extra", {}))


# -- point metrics -----------------------------------------------------------------

def auroc(labels, scores) -> float:
    """Mann-Whitney AUROC with 0.5 credit for score ties."""
    y = np.asarray(labels).astype(np.float64)
    s = np.asarray(scores, dtype=np.float64)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ClassError("AUROC needs both classes present")
    # average ranks over the pooled sample
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    ranks[order] = np.arange(1, pooled.size + 1)
    sorted_vals = pooled[order]
    # replace ranks of tied values by their mean rank
    uniq, inverse, counts = np.unique(sorted_vals, return_inverse=True,
                                      return_counts=True)
    if uniq.size != pooled.size:
        ends = np.cumsum(counts)
        starts = ends - counts
        mean_ranks = (starts + 1 + ends) / 2.0
        ranks[order] = mean_ranks[inverse]
    r_pos = ranks[:pos.size].sum()
    u = r_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def balanced_accuracy(labels, predictions) -> float:
    """Unweighted mean of per-class recall over classes present in ``labels``."""
    y = np.asarray(labels)
    p = np.asarray(predictions)
    recalls = [float((p[y == c] == c).mean()) for c in np.unique(y)]
    return float(np.mean(recalls))


def accuracy(labels, predictions) -> float:
    y = np.asarray(labels)
    return float((np.asarray(predictions) == y).mean())


def r2_rmse(truth, predictions) -> tuple[float, float]:
    """(r2 scaled by 100 as a percentage-style score, rmse in target units)."""
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if t.size < 2:
        raise DegenerateError("r2 needs at least 2 points")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        raise DegenerateError("r2 undefined: zero truth variance")
    ss_res = float(((t - p) ** 2).sum())
    r2 = 100.0 * (1.0 - ss_res / ss_tot)
    rmse = float(np.sqrt(((t - p) ** 2).mean()))
    return r2, rmse


# -- metric handles over RunResult rows ---------------------------------------------

def _predicted_labels(scores: np.ndarray) -> np.ndarray:
    if scores.ndim == 2:
        return scores.argmax(axis=1)
    return (scores >= 0.5).astype(np.int64)


def metric_on_rows(metric: str, truths: np.ndarray, scores: np.ndarray) -> float:
    """Evaluate one named metric on aligned truth/score arrays."""
    if metric == "accuracy":
        return accuracy(truths.astype(np.int64), _predicted_labels(scores))
    if metric == "balanced_accuracy":
        return balanced_accuracy(truths.astype(np.int64), _predicted_labels(scores))
    if metric == "auroc":
        s = scores[:, 1] if scores.ndim == 2 else scores
        return auroc(truths.astype(np.int64), s)
    if metric == "r2":
        return r2_rmse(truths.astype(np.float64),
                       scores if scores.ndim == 1 else scores[:, 0])[0]
    if metric == "rmse":
        return -r2_rmse(truths.astype(np.float64),
                        scores if scores.ndim == 1 else scores[:, 0])[1]
    raise ShapeError(f"unknown metric {metric!r}")


# -- bootstrap protocol ---------------------------------------------------------------

def _aligned_runs(runs: list[RunResult]):
    ids = runs[0].sample_ids
    id_set = set(ids)
    for r in runs[1:]:
        if set(r.sample_ids) != id_set:
            raise AlignmentError("runs do not share an identical sample_id set")
    aligned = []
    for r in runs:
        index = {sid: k for k, sid in enumerate(r.sample_ids)}
        perm = np.array([index[sid] for sid in ids])
        scores = r.scores[perm]
        aligned.append((r.truths[perm], scores))
    return ids, aligned


def bootstrap_ci(runs: list[RunResult], metric, B: int = 1000, seed: int = 0,
                 max_redraw: int = 1000) -> MetricReport:
    """Percentile bootstrap of the mean-over-runs metric; deterministic given seed.

    ``metric`` is a name from :func:`metric_on_rows` or a callable
    ``(truths, scores) -> float``.  Resamples on which the metric is undefined
    are redrawn and the redraw count is reported.
    """
    metric_name = metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")
    fn = (lambda t, s: metric_on_rows(metric, t, s)) if isinstance(metric, str) else metric
    ids, aligned = _aligned_runs(runs)
    n = len(ids)
    rng = generator(derive_key(seed, "bootstrap_ci"))
    values = np.empty(B)
    redraws = 0
    for b in range(B):
        for _ in range(max_redraw + 1):
            idx = rng.integers(0, n, size=n)
            try:
                values[b] = np.mean([fn(t[idx], s[idx]) for t, s in aligned])
                break
            except (ClassError, DegenerateError):
                redraws += 1
        else:
            raise DegenerateError(
                f"metric undefined on {max_redraw} consecutive resamples")
    values.sort()
    point = float(values.mean())
    ci_low = float(np.percentile(values, 2.5))
    ci_high = float(np.percentile(values, 97.5))
    return MetricReport(metric=metric_name, point=point, ci_low=min(ci_low, point),
                        ci_high=max(ci_high, point), n_bootstrap=B, seed=seed,
                        n_redraws=redraws)


def paired_bootstrap_pvalue(runs_a: list[RunResult], runs_b: list[RunResult],
                            metric, B: int = 1000, seed: int = 0) -> float:
    """Two-sided paired bootstrap p-value on the mean-over-runs metric difference.

    p = 2 * min(#{d <= 0} + 1, #{d >= 0} + 1) / (B + 1), capped at 1.
    """
    fn = (lambda t, s: metric_on_rows(metric, t, s)) if isinstance(metric, str) else metric
    ids_a, aligned_a = _aligned_runs(runs_a)
    ids_b, aligned_b = _aligned_runs(runs_b)
    if set(ids_a) != set(ids_b):
        raise AlignmentError("paired test needs identical sample_id sets")
    # canonical (sorted) id order so the test is exactly symmetric in (A, B)
    canon = sorted(ids_a)
    perm_a = np.array([{s: k for k, s in enumerate(ids_a)}[sid] for sid in canon])
    perm_b = np.array([{s: k for k, s in enumerate(ids_b)}[sid] for sid in canon])
    aligned_a = [(t[perm_a], s[perm_a]) for t, s in aligned_a]
    aligned_b = [(t[perm_b], s[perm_b]) for t, s in aligned_b]

    n = len(ids_a)
    rng = generator(derive_key(seed, "paired_bootstrap"))
    n_le = n_ge = 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        try:
            m_a = np.mean([fn(t[idx], s[idx]) for t, s in aligned_a])
            m_b = np.mean([fn(t[idx], s[idx]) for t, s in aligned_b])
        except (ClassError, DegenerateError):
            n_le += 1
            n_ge += 1
            continue
        d = m_a - m_b
        if d <= 0:
            n_le += 1
        if d >= 0:
            n_ge += 1
    p = 2.0 * min(n_le + 1, n_ge + 1) / (B + 1)
    return float(min(p, 1.0))


def pooled_roc(runs: list[RunResult]) -> tuple[np.ndarray, float]:
    """Concatenate all runs' rows into one ensemble; ROC points plus pooled AUROC.

    Returns (points, auc) where points is an (m, 2) array of (fpr, tpr) from
    (0,0) to (1,1).
    """
    labels = np.concatenate([np.asarray(r.truths).astype(np.int64) for r in runs])
    scores = np.concatenate([r.scores[:, 1] if r.scores.ndim == 2 else r.scores
                             for r in runs])
    if set(np.unique(labels)) - {0, 1} or np.unique(labels).size < 2:
        raise ClassError("pooled ROC needs binary labels with both classes")
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    s = scores[order]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    # one ROC vertex per distinct threshold (last index of each tied block)
    keep = np.r_[s[1:] != s[:-1], True]
    tpr = tps[keep] / n_pos
    fpr = fps[keep] / n_neg
    points = np.vstack([[0.0, 0.0], np.column_stack([fpr, tpr])])
    return points, auroc(labels, scores)
