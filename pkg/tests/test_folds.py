from collections import Counter

import numpy as np
import pytest

from conftest import make_rows, mask_of
from voxpipe.domain.errors import EmptyStratum, GeometryMismatch, InsufficientGroup, MissingClass
from voxpipe.domain.models import Group
from voxpipe.training.folds import (
    balance_downsample,
    default_holdout_counts,
    holdout_test,
    stratified_kfold,
    subset_filter,
)
from voxpipe.training.voting import vote_masks


def _per_fold(split, group):
    return Counter(f for cid, f in split.assignments.items() if split.stratum[cid] is group)


def test_kfold_divisible_strata():
    split = stratified_kfold(make_rows((4, 4, 0, 0, 0)), k=4, seed=1)
    for g in (Group.LD, Group.SD):
        assert sorted(_per_fold(split, g).values()) == [1, 1, 1, 1]


def test_kfold_uneven_strata_balanced_within_one():
    rows = make_rows((5, 3, 0, 0, 0))
    split = stratified_kfold(rows, k=4, seed=2)
    for g in (Group.LD, Group.SD):
        counts = [_per_fold(split, g).get(f, 0) for f in range(4)]
        assert max(counts) - min(counts) <= 1
    totals = Counter(split.assignments.values())
    assert max(totals.values()) - min(totals.values()) <= 1
    assert sorted(split.assignments) == sorted(r.case_id for r in rows)


def test_kfold_is_deterministic():
    rows = make_rows((6, 6, 6, 5, 1))
    assert stratified_kfold(rows, 4, 3).assignments == stratified_kfold(rows, 4, 3).assignments


def test_kfold_dev_and_train_partition():
    split = stratified_kfold(make_rows((3, 3, 3, 3, 0)), k=3, seed=0)
    for f in range(3):
        assert not set(split.dev_ids(f)) & set(split.train_ids(f))
        assert len(split.dev_ids(f)) + len(split.train_ids(f)) == 12


def test_kfold_rejects_bad_input():
    with pytest.raises(ValueError):
        stratified_kfold(make_rows((2, 0, 0, 0, 0)), k=1, seed=0)
    with pytest.raises(EmptyStratum):
        stratified_kfold([], k=2, seed=0)


def test_holdout_reference_counts():
    rows = make_rows((150, 150, 150, 119, 18))
    test, rest = holdout_test(rows, (15, 15, 15, 12, 3), seed=0)
    by_group = Counter(r.group for r in rows if r.case_id in set(test))
    assert [by_group[g] for g in Group] == [15, 15, 15, 12, 3]
    assert len(rest) == 587 - 60
    assert not set(test) & {r.case_id for r in rest}


def test_holdout_zero_request_and_insufficient_group():
    rows = make_rows((2, 2, 2, 2, 1))
    test, rest = holdout_test(rows, (0, 0, 0, 0, 0), seed=0)
    assert test == [] and len(rest) == 9
    with pytest.raises(InsufficientGroup):
        holdout_test(rows, (0, 0, 0, 0, 2), seed=0)


def test_default_holdout_counts_scale_with_cohort():
    assert default_holdout_counts(make_rows((150, 150, 150, 119, 18))) == (15, 15, 15, 12, 3)
    assert default_holdout_counts(make_rows((31, 31, 30, 24, 4))) == (3, 3, 3, 2, 1)


def test_default_holdout_counts_skip_absent_groups():
    counts = default_holdout_counts(subset_filter(make_rows((31, 31, 30, 24, 4)), "contrast"))
    assert counts[0] == counts[1] == counts[4] == 0
    assert counts[2] > 0 and counts[3] > 0


def test_subset_filter():
    rows = make_rows((1, 1, 1, 1, 1))
    assert {r.group for r in subset_filter(rows, "contrast")} == {Group.CTA, Group.AN}
    assert {r.group for r in subset_filter(rows, "non_contrast")} == {Group.LD, Group.SD, Group.ANNC}
    with pytest.raises(ValueError):
        subset_filter(rows, "dose")


def test_balance_downsample():
    records = [(f"c{i}", 0) for i in range(10)] + [(f"t{i}", 1) for i in range(4)]
    out = balance_downsample(records, seed=0, label_of=lambda r: r[1])
    assert Counter(r[1] for r in out) == {0: 4, 1: 4}
    assert out == balance_downsample(records, seed=0, label_of=lambda r: r[1])


def test_balance_downsample_never_upsamples():
    records = [(f"c{i}", 0) for i in range(3)] + [(f"t{i}", 1) for i in range(5)]
    assert balance_downsample(records, seed=0, label_of=lambda r: r[1]) == records
    balanced = [("a", 0), ("b", 1)]
    assert balance_downsample(balanced, seed=0, label_of=lambda r: r[1]) == balanced
    with pytest.raises(MissingClass):
        balance_downsample([("a", 0)], seed=0, label_of=lambda r: r[1])


@pytest.mark.parametrize("bits", [tuple((n >> i) & 1 for i in range(3)) for n in range(8)])
def test_vote_masks_majority(bits):
    masks = [mask_of(np.full((1, 1, 1), b)) for b in bits]
    assert int(vote_masks(masks).data[0, 0, 0]) == int(sum(bits) >= 2)


def test_vote_masks_unanimous_and_geometry():
    m = mask_of((np.arange(8).reshape(2, 2, 2) % 3 == 0).astype(np.uint8))
    np.testing.assert_array_equal(vote_masks([m, m, m]).data, m.data)
    other = mask_of(np.zeros((2, 2, 2)), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(GeometryMismatch):
        vote_masks([m, m, other])
    with pytest.raises(ValueError):
        vote_masks([m, m])
