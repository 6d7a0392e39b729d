"""Survival stack vs exhaustive risk-set/pair-enumeration oracles."""

import math

import numpy as np
import pytest

from fmbench.errors import DegenerateError, NoComparablePairsError, NoEventError
from fmbench.heads import TrainConfig
from fmbench.survival import (SurvivalRecord, concordance_index, cox_loss,
                              kaplan_meier, logrank_statistic,
                              select_risk_threshold, train_cox_head)


def recs(times, events, risks=None):
    risks = risks if risks is not None else [0.0] * len(times)
    return [SurvivalRecord(subject_id=f"s{i}", time=float(t), event=int(e),
                           risk=float(r))
            for i, (t, e, r) in enumerate(zip(times, events, risks))]


# -- cox_loss -----------------------------------------------------------------

def cox_loss_oracle(records):
    """Explicit risk-set enumeration, Breslow ties."""
    loss = 0.0
    for r in records:
        if r.event != 1:
            continue
        risk_set = [s for s in records if s.time >= r.time]
        loss -= r.risk - math.log(sum(math.exp(s.risk) for s in risk_set))
    return loss


def cox_grad_fd(records, h=1e-6):
    grad = np.zeros(len(records))
    for k in range(len(records)):
        up = [SurvivalRecord(r.subject_id, r.time, r.event,
                             r.risk + (h if i == k else 0.0))
              for i, r in enumerate(records)]
        down = [SurvivalRecord(r.subject_id, r.time, r.event,
                               r.risk - (h if i == k else 0.0))
                for i, r in enumerate(records)]
        grad[k] = (cox_loss_oracle(up) - cox_loss_oracle(down)) / (2 * h)
    return grad


def test_cox_singleton_event_zero_loss():
    for eta in (-2.0, 0.0, 3.5):
        loss, grad = cox_loss(recs([5.0], [1], [eta]))
        assert abs(loss) < 1e-12
        assert abs(grad[0]) < 1e-12


def test_cox_two_records_ln2():
    loss, _ = cox_loss(recs([1.0, 2.0], [1, 0], [0.0, 0.0]))
    assert abs(loss - math.log(2)) < 1e-12


def test_cox_matches_oracle_with_ties():
    rng = np.random.default_rng(17)
    for trial in range(20):
        times = rng.choice([1.0, 2.0, 2.0, 3.0, 5.0, 5.0], size=6, replace=True)
        events = rng.integers(0, 2, size=6)
        if events.sum() == 0:
            events[0] = 1
        risks = rng.normal(size=6)
        records = recs(times, events, risks)
        loss, grad = cox_loss(records)
        assert abs(loss - cox_loss_oracle(records)) < 1e-9
        assert np.allclose(grad, cox_grad_fd(records), atol=1e-5)


def test_cox_no_events_raises():
    with pytest.raises(NoEventError):
        cox_loss(recs([1.0, 2.0], [0, 0]))


def test_cox_shift_invariance():
    rng = np.random.default_rng(3)
    records = recs(rng.uniform(1, 10, 8), [1, 0, 1, 1, 0, 1, 0, 1],
                   rng.normal(size=8))
    base, _ = cox_loss(records)
    shifted, _ = cox_loss([SurvivalRecord(r.subject_id, r.time, r.event, r.risk + 4.2)
                           for r in records])
    assert abs(base - shifted) < 1e-8


# -- concordance --------------------------------------------------------------

def cindex_oracle(records):
    conc, comp = 0.0, 0
    for i in records:
        for j in records:
            if i.event == 1 and i.time < j.time:
                comp += 1
                if i.risk > j.risk:
                    conc += 1.0
                elif i.risk == j.risk:
                    conc += 0.5
    return conc / comp


def test_cindex_perfectly_anti_ordered():
    # highest risk dies first
    assert concordance_index(recs([1, 2, 3, 4], [1, 1, 1, 1], [4, 3, 2, 1])) == 1.0


def test_cindex_all_tied_risks():
    assert concordance_index(recs([1, 2, 3], [1, 1, 1], [5, 5, 5])) == 0.5


def test_cindex_matches_pair_oracle():
    rng = np.random.default_rng(23)
    for _ in range(20):
        times = rng.uniform(1, 10, size=10)
        events = rng.integers(0, 2, size=10)
        events[rng.integers(10)] = 1
        risks = rng.choice([-1.0, 0.0, 0.5, 1.0], size=10)
        records = recs(times, events, risks)
        assert concordance_index(records) == cindex_oracle(records)


def test_cindex_complement_identity_without_ties():
    rng = np.random.default_rng(29)
    times = rng.uniform(1, 10, size=9)
    events = np.array([1, 0, 1, 1, 0, 1, 1, 0, 1])
    risks = rng.normal(size=9)  # continuous: no ties a.s.
    records = recs(times, events, risks)
    flipped = recs(times, events, -risks)
    assert abs(concordance_index(records) + concordance_index(flipped) - 1.0) < 1e-12


def test_cindex_no_comparable_pairs():
    with pytest.raises(NoComparablePairsError):
        concordance_index(recs([3.0, 2.0], [0, 0], [1.0, 2.0]))


# -- Kaplan-Meier ---------------------------------------------------------------

def test_km_all_censored_is_one():
    km = kaplan_meier(recs([1, 2, 3], [0, 0, 0]))
    assert km.times.size == 0
    assert km.value_at(99.0) == 1.0


def test_km_all_events_product():
    km = kaplan_meier(recs([2, 4, 6], [1, 1, 1]))
    assert np.allclose(km.survival, [2 / 3, 1 / 3, 0.0])
    assert np.array_equal(km.at_risk, [3, 2, 1])


def test_km_mixed_eight_records_hand_enumerated():
    # times/events: 1+ 2c 3+ 3c 5+ 6c 7+ 8c  (+ = event, c = censored)
    records = recs([1, 2, 3, 3, 5, 6, 7, 8], [1, 0, 1, 0, 1, 0, 1, 0])
    km = kaplan_meier(records)
    # risk table: t=1: n=8,d=1 -> 7/8
    #             t=3: n=6,d=1 -> 7/8 * 5/6
    #             t=5: n=4,d=1 -> ... * 3/4
    #             t=7: n=2,d=1 -> ... * 1/2
    want = [7 / 8, 7 / 8 * 5 / 6, 7 / 8 * 5 / 6 * 3 / 4, 7 / 8 * 5 / 6 * 3 / 4 * 1 / 2]
    assert np.allclose(km.survival, want)
    assert np.array_equal(km.at_risk, [8, 6, 4, 2])


def test_km_monotone_in_unit_interval():
    rng = np.random.default_rng(31)
    for _ in range(20):
        n = rng.integers(1, 15)
        records = recs(rng.uniform(1, 20, n), rng.integers(0, 2, n))
        km = kaplan_meier(records)
        assert np.all(np.diff(km.survival) <= 1e-12)
        assert np.all((km.survival >= -1e-12) & (km.survival <= 1 + 1e-12))


# -- log-rank --------------------------------------------------------------------

def logrank_oracle(group_a, group_b):
    """Spreadsheet-style O/E/V table over distinct event times."""
    pooled = [(r.time, r.event, 0) for r in group_a] + \
             [(r.time, r.event, 1) for r in group_b]
    event_times = sorted({t for t, e, _ in pooled if e == 1})
    o_minus_e, var = 0.0, 0.0
    for t in event_times:
        n = sum(1 for tt, _, _ in pooled if tt >= t)
        n_a = sum(1 for tt, _, g in pooled if tt >= t and g == 0)
        d = sum(1 for tt, e, _ in pooled if tt == t and e == 1)
        d_a = sum(1 for tt, e, g in pooled if tt == t and e == 1 and g == 0)
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    return o_minus_e ** 2 / var


def test_logrank_identical_groups_zero():
    g = recs([1, 2, 3, 4], [1, 1, 0, 1])
    assert logrank_statistic(g, g) < 1e-12


def test_logrank_disjoint_time_groups_matches_oracle():
    a = recs([1, 2, 3, 4, 5], [1, 1, 1, 0, 1])
    b = recs([11, 12, 13, 14, 15], [1, 0, 1, 1, 1])
    assert abs(logrank_statistic(a, b) - logrank_oracle(a, b)) < 1e-10


def test_logrank_random_groups_match_oracle():
    rng = np.random.default_rng(37)
    for _ in range(10):
        a = recs(rng.uniform(1, 10, 6), rng.integers(0, 2, 6))
        b = recs(rng.uniform(1, 10, 7), rng.integers(0, 2, 7))
        if sum(r.event for r in a + b) == 0:
            continue
        try:
            got = logrank_statistic(a, b)
        except DegenerateError:
            continue
        assert abs(got - logrank_oracle(a, b)) < 1e-10


def test_logrank_empty_group_degenerate():
    with pytest.raises(DegenerateError):
        logrank_statistic(recs([1, 2], [1, 1]), [])


# -- threshold selection ------------------------------------------------------------

def test_threshold_unique_separating_midpoint():
    # high risk (+1) dies early, low risk (-1) censored late
    records = recs([1, 2, 30, 40], [1, 1, 0, 0], [1, 1, -1, -1])
    assert select_risk_threshold(records) == 0.0


def test_threshold_matches_exhaustive_scan():
    rng = np.random.default_rng(41)
    risks = rng.normal(size=10)
    times = np.exp(-risks) * rng.uniform(1, 3, size=10) + 0.5  # monotone-ish
    records = recs(times, [1] * 10, risks)
    got = select_risk_threshold(records)

    distinct = np.unique(risks)
    best_stat = -1.0
    stats = {}
    for thr in (distinct[:-1] + distinct[1:]) / 2:
        high = [r for r in records if r.risk > thr]
        low = [r for r in records if r.risk <= thr]
        try:
            stats[thr] = logrank_statistic(high, low)
            best_stat = max(best_stat, stats[thr])
        except (DegenerateError, NoEventError):
            continue
    assert math.isclose(stats[got], best_stat, rel_tol=1e-12)


def test_threshold_constant_risks_degenerate():
    with pytest.raises(DegenerateError):
        select_risk_threshold(recs([1, 2, 3], [1, 1, 0], [2.0, 2.0, 2.0]))


def test_threshold_partition_invariant_under_monotone_transform():
    rng = np.random.default_rng(43)
    risks = rng.normal(size=8)
    records = recs(rng.uniform(1, 10, 8), [1, 1, 0, 1, 1, 0, 1, 1], risks)
    thr = select_risk_threshold(records)
    transformed = recs([r.time for r in records], [r.event for r in records],
                       np.exp([r.risk for r in records]))
    thr_t = select_risk_threshold(transformed)
    part_a = {r.subject_id for r in records if r.risk > thr}
    part_b = {r.subject_id for r in transformed if r.risk > thr_t}
    assert part_a == part_b


# -- cox head training ----------------------------------------------------------

def synthetic_cohort(n, seed, d=6, beta=5.0):
    """Exponential survival times driven by one feature coordinate.

    The hazard is steep enough that the true model's c-index exceeds 0.92,
    leaving headroom above the 0.9 bar for the trained head.
    """
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    hazard = np.exp(beta * X[:, 0])
    times = rng.exponential(1.0 / hazard) * 365.0 + 1e-3
    horizon = np.median(times) * 3.0
    observed = np.minimum(times, horizon)
    events = (times <= horizon).astype(int)
    records = recs(observed, events, np.zeros(n))
    return X, records


def test_train_cox_head_recovers_signal():
    Xtr, rtr = synthetic_cohort(140, seed=0)
    Xva, rva = synthetic_cohort(60, seed=1)
    tc = TrainConfig(epochs=40, seed=0)
    head = train_cox_head(Xtr, rtr, Xva, rva, tc)
    assert head.val_score >= 0.9


def test_train_cox_head_deterministic():
    Xtr, rtr = synthetic_cohort(60, seed=2)
    Xva, rva = synthetic_cohort(30, seed=3)
    tc = TrainConfig(epochs=10, seed=4)
    h1 = train_cox_head(Xtr, rtr, Xva, rva, tc)
    h2 = train_cox_head(Xtr, rtr, Xva, rva, tc)
    assert np.array_equal(h1.weights, h2.weights)


def test_train_cox_head_all_censored_rejected():
    X = np.random.default_rng(0).normal(size=(10, 4))
    records = recs(np.arange(1, 11), [0] * 10)
    with pytest.raises(NoEventError):
        train_cox_head(X, records, X, records, TrainConfig(epochs=5))
