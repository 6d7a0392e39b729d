"""Cox proportional-hazards training and the survival evaluation stack.

Partial likelihood uses the Breslow convention for tied event times: all
events tied at a time share the same risk set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (DegenerateError, FormatError, NoComparablePairsError,
                     NoEventError)
from .heads.config import HeadConfig, TrainConfig, TrainedHead
from .heads.train import train_head


@dataclass
class SurvivalRecord:
    subject_id: str
    time: float  # days
    event: int   # 1 = event observed, 0 = censored
    risk: float = 0.0

    def __post_init__(self):
        if self.time <= 0:
            raise FormatError(f"subject {self.subject_id!r}: time must be > 0")
        if self.event not in (0, 1):
            raise FormatError(f"subject {self.subject_id!r}: event must be 0 or 1")


def _arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    risks = np.array([r.risk for r in records], dtype=np.float64)
    return times, events, risks


def cox_loss(records) -> tuple[float, np.ndarray]:
    """Negative partial log likelihood and its gradient w.r.t. the risks.

    loss = -sum over events i of [eta_i - log sum_{j: t_j >= t_i} exp(eta_j)].
    """
    times, events, risks = _arrays(records)
    if events.sum() == 0:
        raise NoEventError("cox loss needs at least one observed event")
    shift = risks.max()
    ex = np.exp(risks - shift)

    # Risk-set sums via suffix accumulation over times sorted ascending.
    order = np.argsort(times, kind="stable")
    sorted_ex = ex[order]
    suffix = np.cumsum(sorted_ex[::-1])[::-1]
    # exp underflow can zero a late risk set when risks span >700 nats;
    # the tiny floor keeps loss/gradient finite so the lr search can reject
    # the diverging candidate instead of crashing.
    suffix = np.maximum(suffix, np.finfo(np.float64).tiny)
    sorted_times = times[order]

    loss = 0.0
    # d log(risk-set sum)/d eta_k accumulates exp(eta_k) * sum over events i
    # with t_i <= t_k of 1/S_i; build that per-event coefficient first.
    inv_s_at_event = np.zeros(len(records))
    log_s = np.log(suffix) + shift
    for i in np.flatnonzero(events):
        t_i = times[i]
        # first index in sorted order with time >= t_i (ties share the set)
        pos = np.searchsorted(sorted_times, t_i, side="left")
        s_i = suffix[pos]
        loss -= risks[i] - log_s[pos]
        inv_s_at_event[i] = 1.0 / s_i

    # gradient: -(event_k - exp(eta_k) * sum_{events i: t_k >= t_i} 1/S_i).
    # Tied times must all see the cumsum at the end of their tie block.
    # Diverging risk vectors (from too-large lr candidates) may push these
    # accumulations to inf/nan; callers drop non-finite results.
    with np.errstate(over="ignore", invalid="ignore"):
        cs = np.cumsum(inv_s_at_event[order])
        uniq, inverse = np.unique(sorted_times, return_inverse=True)
        block_end = np.searchsorted(sorted_times, uniq, side="right") - 1
        coeff_sorted = cs[block_end][inverse]
        coeff = np.empty(len(records))
        coeff[order] = coeff_sorted
        grad = -(events.astype(np.float64) - ex * coeff)
    return float(loss), grad


def concordance_index(records) -> float:
    """Harrell's c-index: ties in risk credit 0.5; pairs need t_i < t_j, event_i=1."""
    times, events, risks = _arrays(records)
    n = len(records)
    concordant = 0.0
    comparable = 0
    for i in range(n):
        if events[i] != 1:
            continue
        later = times > times[i]
        comparable += int(later.sum())
        concordant += float((risks[i] > risks[later]).sum())
        concordant += 0.5 * float((risks[i] == risks[later]).sum())
    if comparable == 0:
        raise NoComparablePairsError("no comparable pairs: c-index undefined")
    return concordant / comparable


@dataclass
class KaplanMeierCurve:
    times: np.ndarray      # distinct event times, ascending
    survival: np.ndarray   # S(t) just after each event time
    at_risk: np.ndarray    # risk-set size at each event time

    def value_at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def kaplan_meier(records) -> KaplanMeierCurve:
    """Product-limit estimate over distinct event times."""
    times, events, _ = _arrays(records)
    if len(records) == 0:
        raise DegenerateError("kaplan_meier needs at least one record")
    event_times = np.unique(times[events == 1])
    surv, at_risk, s = [], [], 1.0
    for t in event_times:
        n_t = int((times >= t).sum())
        d_t = int(((times == t) & (events == 1)).sum())
        s *= 1.0 - d_t / n_t
        surv.append(s)
        at_risk.append(n_t)
    return KaplanMeierCurve(times=event_times, survival=np.array(surv),
                            at_risk=np.array(at_risk, dtype=np.int64))


def logrank_statistic(group_a, group_b) -> float:
    """Two-group log-rank chi-square: (sum(O-E))^2 / sum(V) over event times."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise DegenerateError("log-rank needs two nonempty groups")
    ta, ea, _ = _arrays(group_a)
    tb, eb, _ = _arrays(group_b)
    times = np.concatenate([ta, tb])
    events = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(len(ta), bool), np.zeros(len(tb), bool)])
    if events.sum() == 0:
        raise NoEventError("log-rank needs at least one event")

    o_minus_e = 0.0
    var = 0.0
    for t in np.unique(times[events == 1]):
        at_risk = times >= t
        n = int(at_risk.sum())
        n_a = int((at_risk & in_a).sum())
        d = int(((times == t) & (events == 1)).sum())
        d_a = int(((times == t) & (events == 1) & in_a).sum())
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        raise DegenerateError("log-rank variance is zero for these groups")
    return float(o_minus_e ** 2 / var)


def select_risk_threshold(records) -> float:
    """Midpoint between consecutive distinct risks maximizing the log-rank statistic.

    Ties are broken toward the median split (most balanced groups), then toward
    the lower threshold.
    """
    _, _, risks = _arrays(records)
    distinct = np.unique(risks)
    if distinct.size < 2:
        raise DegenerateError("all risks identical: no candidate thresholds")
    candidates = (distinct[:-1] + distinct[1:]) / 2.0
    n = len(records)
    best = None  # (statistic, -imbalance, -threshold_index)
    best_thr = None
    for k, thr in enumerate(candidates):
        high = [r for r in records if r.risk > thr]
        low = [r for r in records if r.risk <= thr]
        try:
            stat = logrank_statistic(high, low)
        except (DegenerateError, NoEventError):
            continue
        imbalance = abs(len(high) - n / 2.0)
        key = (stat, -imbalance, -k)
        if best is None or key > best:
            best = key
            best_thr = float(thr)
    if best_thr is None:
        raise DegenerateError("no candidate threshold yields a valid log-rank split")
    return best_thr


def train_cox_head(train_features: np.ndarray, train_records,
                   val_features: np.ndarray, val_records,
                   tc: TrainConfig) -> TrainedHead:
    """Linear risk head trained on the partial likelihood, selected by val c-index.

    Risk sets need the whole cohort, so each epoch takes one full-batch step.
    """
    for name, recs in (("train", train_records), ("val", val_records)):
        if sum(r.event for r in recs) == 0:
            raise NoEventError(f"{name} split holds no events")

    train_records = list(train_records)

    def objective(outputs, batch_records):
        loss, grad = cox_loss([replace(r, risk=float(o))
                               for r, o in zip(batch_records, outputs[:, 0])])
        return loss, grad[:, None]

    def val_metric(outputs, recs):
        return concordance_index([replace(r, risk=float(o))
                                  for r, o in zip(recs, outputs[:, 0])])

    config = HeadConfig(kind="cls_linear", n_outputs=1)
    return train_head(train_features, train_records, val_features, list(val_records),
                      config, tc, objective=objective, val_metric=val_metric,
                      full_batch=True)


# -- survival manifest ---------------------------------------------------------

_SURV_COLUMNS = ("subject_id", "time_days", "event", "feature_ref", "split", "group_id")


@dataclass
class SurvivalManifestRow:
    subject_id: str
    time_days: float
    event: int
    feature_ref: str
    split: str
    group_id: str


def load_survival_manifest(path: str | Path) -> list[SurvivalManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty survival manifest")
        missing = [c for c in _SURV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: survival manifest missing columns {missing}")
        rows = []
        for i, rec in enumerate(reader, start=2):
            rows.append(SurvivalManifestRow(
                subject_id=rec["subject_id"].strip(),
                time_days=float(rec["time_days"]),
                event=int(rec["event"]),
                feature_ref=rec["feature_ref"].strip(),
                split=rec["split"].strip(),
                group_id=rec["group_id"].strip(),
            ))
            if rows[-1].split not in ("train", "val", "test"):
                raise FormatError(f"{path}:{i}: bad split {rows[-1].split!r}")
    return rows
