import numpy as np
import pytest

from bff import metrics as mt
from bff.errors import ConfigError, MetricUndefinedError


def oracle_auc_cd(t, scores, y, s, cens_sf, tie_policy="as_written"):
    """Exhaustive double-loop evaluation of the weighted concordance ratio."""
    n = len(y)
    num = 0.0
    n_controls = 0
    w_total = 0.0
    for i in range(n):
        if y[i] > t:
            n_controls += 1
    for i in range(n):
        if y[i] <= t and s[i] == 1:
            w = 1.0 / cens_sf.left_limit(y[i])
            w_total += w
            for j in range(n):
                if y[j] > t:
                    if scores[j] < scores[i]:
                        num += w
                    elif scores[j] == scores[i]:
                        num += w if tie_policy == "as_written" else 0.5 * w
    if w_total == 0 or n_controls == 0:
        raise MetricUndefinedError("oracle: undefined")
    return num / (w_total * n_controls)


def oracle_roc_auc(scores, labels):
    pos = [x for x, l in zip(scores, labels) if l == 1]
    neg = [x for x, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_km_all_events_hand_fixture():
    sf = mt.km([1.0, 2.0, 3.0], [1, 1, 1], target="event")
    assert sf(1.0) == pytest.approx(2 / 3)
    assert sf(2.0) == pytest.approx(1 / 3)
    assert sf(3.0) == pytest.approx(0.0)
    assert sf(0.5) == 1.0
    assert sf.left_limit(1.0) == 1.0


def test_km_no_events_is_identically_one():
    sf = mt.km([1.0, 2.0, 3.0], [0, 0, 0], target="event")
    assert sf(10.0) == 1.0
    assert sf.times.size == 0


def test_km_censoring_target_hand_fixture():
    sf = mt.km([1.0, 2.0, 3.0], [1, 0, 1], target="censoring")
    # only t=2 is a censoring event; risk set there is {2, 3}
    assert sf.times.tolist() == [2.0]
    assert sf(2.0) == pytest.approx(0.5)
    assert sf(1.9) == 1.0


def test_km_ties_decrement_simultaneously():
    sf = mt.km([1.0, 1.0, 2.0, 2.0], [1, 1, 1, 0], target="event")
    assert sf(1.0) == pytest.approx(0.5)
    assert sf(2.0) == pytest.approx(0.25)


def test_km_without_censoring_equals_empirical_survival():
    rng = np.random.default_rng(0)
    y = rng.integers(1, 20, size=50).astype(float)
    sf = mt.km(y, np.ones(50, dtype=int), target="event")
    for t in [1.0, 5.0, 10.0, 19.0]:
        assert sf(t) == pytest.approx((y > t).mean())


def test_km_empty_is_error():
    with pytest.raises(MetricUndefinedError):
        mt.km([], [], target="event")


def _no_censoring_sf():
    return mt.StepFunction(times=np.array([]), values=np.array([]))


def test_auc_cd_perfectly_antiranked_times():
    y = [1.0, 2.0, 3.0, 4.0]
    s = [1, 1, 1, 1]
    scores = [4.0, 3.0, 2.0, 1.0]
    got = mt.auc_cd(2.5, scores, y, s, _no_censoring_sf())
    assert got == 1.0


def test_auc_cd_all_tied_scores_depends_on_tie_policy():
    y = [1.0, 2.0, 3.0, 4.0]
    s = [1, 1, 1, 1]
    scores = [1.0, 1.0, 1.0, 1.0]
    assert mt.auc_cd(2.5, scores, y, s, _no_censoring_sf(), "as_written") == 1.0
    assert mt.auc_cd(2.5, scores, y, s, _no_censoring_sf(), "half_ties") == 0.5


@pytest.mark.parametrize("seed", range(50))
def test_auc_cd_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 51))
    censor_frac = rng.uniform(0.0, 0.6)
    y = rng.integers(1, 15, size=n).astype(float)
    s = (rng.random(n) > censor_frac).astype(int)
    scores = np.round(rng.normal(size=n), 2)  # rounding forces some ties
    if s.sum() == 0:
        s[0] = 1
    cens_sf = mt.km(y, s, target="censoring")
    t = float(rng.integers(2, 13))
    policy = "as_written" if seed % 2 == 0 else "half_ties"
    try:
        got = mt.auc_cd(t, scores, y, s, cens_sf, policy)
    except MetricUndefinedError:
        with pytest.raises(MetricUndefinedError):
            oracle_auc_cd(t, scores, y, s, cens_sf, policy)
        return
    want = oracle_auc_cd(t, scores, y, s, cens_sf, policy)
    assert got == pytest.approx(want, abs=1e-12)


def test_auc_cd_error_paths():
    y = [1.0, 2.0, 3.0]
    with pytest.raises(MetricUndefinedError, match="no controls"):
        mt.auc_cd(5.0, [1, 2, 3], y, [1, 1, 1], _no_censoring_sf())
    with pytest.raises(MetricUndefinedError, match="no weighted cases"):
        mt.auc_cd(0.5, [1, 2, 3], y, [1, 1, 1], _no_censoring_sf())
    # a case whose weight is undefined because Sc hit zero before its time
    dead_sf = mt.StepFunction(times=np.array([1.0]), values=np.array([0.0]))
    with pytest.raises(MetricUndefinedError, match="subject"):
        mt.auc_cd(2.5, [1, 2, 3], [2.0, 2.5, 3.0], [1, 0, 0], dead_sf)


def test_auc_cd_invariant_to_monotone_transform():
    rng = np.random.default_rng(1)
    y = rng.integers(1, 10, size=30).astype(float)
    s = (rng.random(30) > 0.3).astype(int)
    scores = rng.normal(size=30)
    cens = mt.km(y, s, target="censoring")
    a = mt.auc_cd(5.0, scores, y, s, cens)
    b = mt.auc_cd(5.0, np.exp(2.0 * scores) + 7.0, y, s, cens)
    assert a == pytest.approx(b, abs=1e-12)


def test_auc_cd_no_censoring_equals_roc_of_cases_vs_controls():
    rng = np.random.default_rng(2)
    y = rng.integers(1, 10, size=40).astype(float)
    s = np.ones(40, dtype=int)
    scores = rng.normal(size=40)
    t = 5.0
    got = mt.auc_cd(t, scores, y, s, _no_censoring_sf(), "half_ties")
    labels = (y <= t).astype(int)
    assert got == pytest.approx(mt.roc_auc(scores, labels), abs=1e-12)


def test_integrated_auc_constant_and_single_time():
    sf = mt.km([2.0, 4.0, 6.0, 8.0], [1, 1, 1, 1], target="event")
    times = sf.times
    assert mt.integrated_auc(1.0, 9.0, times, [0.7] * 4, sf) == pytest.approx(0.7)
    assert mt.integrated_auc(3.0, 5.0, times, [0.1, 0.9, 0.3, 0.4], sf) == pytest.approx(0.9)


def test_integrated_auc_hand_weighted_fixture():
    sf = mt.StepFunction(times=np.array([2.0, 4.0]), values=np.array([0.8, 0.7]))
    got = mt.integrated_auc(1.0, 5.0, [2.0, 4.0], [0.8, 0.6], sf)
    assert got == pytest.approx((0.2 * 0.8 + 0.1 * 0.6) / 0.3, abs=1e-12)


def test_integrated_auc_errors():
    sf = mt.StepFunction(times=np.array([2.0]), values=np.array([0.5]))
    with pytest.raises(MetricUndefinedError):
        mt.integrated_auc(3.0, 9.0, [2.0], [0.5], sf)
    with pytest.raises(ConfigError):
        mt.integrated_auc(5.0, 3.0, [2.0], [0.5], sf)
    flat = mt.StepFunction(times=np.array([]), values=np.array([]))
    with pytest.raises(MetricUndefinedError):
        mt.integrated_auc(1.0, 9.0, [2.0], [0.5], flat)


def test_integrated_auc_within_min_max_of_inputs():
    sf = mt.km(np.arange(1.0, 11.0), np.ones(10, dtype=int), target="event")
    rng = np.random.default_rng(3)
    aucs = rng.uniform(0.4, 0.9, size=sf.times.size)
    got = mt.integrated_auc(0.5, 10.0, sf.times, aucs, sf)
    assert aucs.min() <= got <= aucs.max()


def test_roc_auc_fixtures_and_oracle():
    assert mt.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert mt.roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    rng = np.random.default_rng(4)
    scores = np.round(rng.normal(size=10), 1)
    labels = rng.integers(0, 2, size=10)
    if labels.sum() in (0, 10):
        labels[0] = 1 - labels[0]
    assert mt.roc_auc(scores, labels) == pytest.approx(
        oracle_roc_auc(scores.tolist(), labels.tolist()), abs=1e-12)


def test_roc_auc_single_class_is_error():
    with pytest.raises(MetricUndefinedError):
        mt.roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(5)
    scores = rng.normal(size=25)
    labels = rng.integers(0, 2, size=25)
    labels[0], labels[1] = 0, 1
    a = mt.roc_auc(scores, labels)
    b = mt.roc_auc(3.0 * scores - 2.0, labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_survival_risk_scores_pick_cumulative_mass():
    probs = np.array([[0.1, 0.2, 0.3, 0.4]])  # 3 bins + terminal class
    edges = np.array([0.0, 10.0, 20.0, 30.0])
    assert mt.survival_risk_scores(probs, edges, 5.0)[0] == pytest.approx(0.1)
    assert mt.survival_risk_scores(probs, edges, 10.0)[0] == pytest.approx(0.1)
    assert mt.survival_risk_scores(probs, edges, 10.5)[0] == pytest.approx(0.3)
    assert mt.survival_risk_scores(probs, edges, 99.0)[0] == pytest.approx(0.6)
