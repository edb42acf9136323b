import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nestdiff import ensemble as E

finite = st.floats(-5, 5, allow_nan=False, width=64)


def sample_sets(max_groups=5, max_m=12, max_c=5):
    return st.integers(2, max_c).flatmap(lambda C: st.lists(
        arrays(np.float64, st.tuples(st.integers(1, max_m), st.just(C)), elements=finite),
        min_size=1, max_size=max_groups))


def test_vote_picks_coordinate_closest_to_one():
    assert E.vote_of([0.1, 0.9, 1.5]) == 1
    assert E.vote_of([2.0, 0.0]) == 0  # both at squared distance 1; lowest index wins
    assert E.vote_of([-3.0, 1.0, 1.0]) == 1


def test_vote_rejects_non_finite():
    with pytest.raises(ValueError):
        E.vote_of([np.nan, 1.0])


def test_mode_lowest_index_tie_break():
    assert E.mode([2, 1, 2, 1]) == 1
    assert E.mode([3, 3, 0]) == 3
    with pytest.raises(ValueError):
        E.mode([])


def test_two_level_example():
    g1 = E.CandidateGroup(1, [[0.9, 0.1], [0.8, 0.3], [0.2, 0.95]])
    g2 = E.CandidateGroup(2, [[0.1, 1.1], [0.2, 0.9], [0.0, 1.0]])
    assert E.aggregate_lower(g1) == [0, 0, 1]
    assert E.aggregate_lower(g2) == [1, 1, 1]
    assert E.aggregate_upper([g1, g2]) == 1


def test_single_sample_degenerates_to_its_vote():
    g = E.CandidateGroup(1, [[0.3, 0.7, 0.2]])
    assert E.aggregate_upper([g]) == 1


def test_empty_group_errors():
    with pytest.raises(ValueError):
        E.aggregate_lower(E.CandidateGroup(1, np.zeros((0, 2))))
    with pytest.raises(ValueError):
        E.aggregate_upper([])


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        E.predict_proba([E.CandidateGroup(1, [[1.0, 0.0]])], 0.0)


def test_temperature_sharpens():
    groups = [E.CandidateGroup(1, [[0.9, 0.2]])]
    hot, cold = E.predict_proba(groups, 1.0), E.predict_proba(groups, 0.1)
    assert cold[0] > hot[0] > 0.5


@settings(max_examples=80, deadline=None)
@given(sample_sets(), st.sampled_from([0.1737, 0.3162, 1.0]))
def test_proba_is_distribution(groups, temp):
    p = E.predict_proba([E.CandidateGroup(k, g) for k, g in enumerate(groups)], temp)
    assert abs(p.sum() - 1) <= 1e-6 and (p >= 0).all()


@settings(max_examples=80, deadline=None)
@given(sample_sets(), st.randoms(use_true_random=False))
def test_upper_vote_invariant_to_regrouping(groups, rnd):
    pooled = np.concatenate(groups)
    ref = E.aggregate_upper([E.CandidateGroup(1, pooled)])
    order = list(range(len(pooled)))
    rnd.shuffle(order)
    cut = sorted(rnd.sample(range(1, len(pooled)), min(3, len(pooled) - 1))) if len(pooled) > 1 else []
    parts = np.split(pooled[order], cut)
    assert E.aggregate_upper([E.CandidateGroup(i, p) for i, p in enumerate(parts)]) == ref


@settings(max_examples=50, deadline=None)
@given(sample_sets())
def test_combine_record(groups):
    gs = [E.CandidateGroup(k, g) for k, g in enumerate(groups)]
    out = E.combine(gs)
    rec = out.to_record()
    n = sum(len(g) for g in groups)
    assert out.raw.shape == (n, groups[0].shape[1])
    assert rec["class"] == E.aggregate_upper(gs)
    assert all(v >= 0 for v in rec["pv"])
    if n >= 2:
        assert all(w >= 0 for w in rec["piw"])
    else:
        assert rec["piw"] is None


def test_group_shape_validation():
    with pytest.raises(ValueError):
        E.CandidateGroup(1, [1.0, 2.0])
