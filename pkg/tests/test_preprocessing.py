import numpy as np
import pytest

from dataset import Dataset, DatasetError, NOMINAL, NUMERIC
from preprocessing import (AllMissingColumn, KTooLarge, GridShape, Preprocessor, impute_missing, normalize_minmax,
                           grid_shape, to_grid, to_grid_batch, from_grid, stratified_kfold)


def _with_missing():
    nan = np.nan
    instances = np.array([[1.0, 0.0],
                          [3.0, 2.0],
                          [nan, 2.0],
                          [100.0, nan],
                          [5.0, 1.0]])
    return Dataset('m', instances, [0, 1, 0, 1, 0], ['num', 'nom'], ['a', 'b'],
                   missing_mask=np.isnan(instances), attribute_kinds=[NUMERIC, NOMINAL],
                   nominal_values={1: ['x', 'y', 'z']})


@pytest.mark.parametrize('d, side, pad', [(1, 1, 0), (16, 4, 0), (17, 5, 8), (19, 5, 6), (64, 8, 0), (65, 9, 16)])
def test_grid_shape(d, side, pad):
    assert grid_shape(d) == GridShape(side, side, pad)


def test_to_grid_is_row_major_with_zero_padding():
    grid = to_grid(np.arange(1, 6, dtype=float))
    np.testing.assert_array_equal(grid, [[[1, 2, 3], [4, 5, 0], [0, 0, 0]]])
    np.testing.assert_array_equal(from_grid(grid, 5), [1, 2, 3, 4, 5])


def test_to_grid_batch_matches_single_rows():
    rows = np.random.default_rng(3).random((4, 7))
    batch = to_grid_batch(rows)
    assert batch.shape == (4, 1, 3, 3)
    for i in range(4):
        np.testing.assert_array_equal(batch[i], to_grid(rows[i]))


def test_impute_uses_fit_rows_only():
    ds = _with_missing()
    filled = impute_missing(ds, fit_rows=[0, 1, 2, 4])
    assert filled.instances[2, 0] == pytest.approx(3.0)  # mean of 1, 3, 5; the 100 row is excluded
    assert filled.instances[3, 1] == 2.0                 # mode of codes 0, 2, 2, 1
    assert not np.isnan(filled.instances).any()
    np.testing.assert_array_equal(filled.missing_mask, ds.missing_mask)


def test_nominal_mode_ties_pick_lowest_code():
    ds = _with_missing()
    filled = impute_missing(ds, fit_rows=[0, 1, 4])  # codes 0, 2, 1 each once
    assert filled.instances[3, 1] == 0.0


def test_impute_all_missing_column():
    ds = _with_missing()
    with pytest.raises(AllMissingColumn, match='num'):
        impute_missing(ds, fit_rows=[2])


def test_impute_without_missing_is_identity(separable):
    assert impute_missing(separable, range(separable.n)) is separable


def test_normalize_minmax_fits_train_only():
    train = Dataset('t', [[0.0, 5.0], [10.0, 5.0]], [0, 1], ['a', 'b'], ['x', 'y'])
    test = Dataset('t', [[20.0, 7.0]], [0], ['a', 'b'], ['x', 'y'])
    scaled_train, [scaled_test], scaling = normalize_minmax(train, [test])
    np.testing.assert_array_equal(scaled_train.instances, [[0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(scaled_test.instances, [[2.0, 0.0]])  # constant column maps to 0
    np.testing.assert_array_equal(scaling.minimum, [0.0, 5.0])


def test_normalize_requires_imputation():
    with pytest.raises(DatasetError, match='impute'):
        normalize_minmax(_with_missing(), [])


def test_stratified_kfold_balances_classes_and_sizes():
    labels = np.array([0] * 17 + [1] * 9 + [2] * 5)
    plan = stratified_kfold(labels, 5, seed=11)
    sizes = plan.fold_sizes()
    assert sizes.sum() == labels.size
    assert sizes.max() - sizes.min() <= 1
    for cls in range(3):
        per_fold = np.bincount(plan.assignments[labels == cls], minlength=5)
        assert per_fold.max() - per_fold.min() <= 1
    for fold in range(5):
        train, test = plan.train_test(fold)
        assert np.intersect1d(train, test).size == 0
        assert train.size + test.size == labels.size


@pytest.mark.parametrize('seed', range(50))
def test_fold_plans_partition_random_label_vectors(seed):
    rng = np.random.default_rng(seed)
    n_classes = int(rng.integers(2, 6))
    labels = rng.integers(0, n_classes, int(rng.integers(10, 200)))
    k = int(rng.integers(2, min(10, labels.size) + 1))
    plan = stratified_kfold(labels, k, seed=seed)

    tests = [plan.train_test(fold)[1] for fold in range(k)]
    np.testing.assert_array_equal(np.sort(np.concatenate(tests)), np.arange(labels.size))
    for cls in np.unique(labels):
        members = labels == cls
        per_fold = np.bincount(plan.assignments[members], minlength=k)
        assert np.all(np.abs(per_fold - members.sum() / k) <= 1)


def test_stratified_kfold_is_seeded():
    labels = np.repeat([0, 1], 20)
    a = stratified_kfold(labels, 4, seed=1).assignments
    np.testing.assert_array_equal(a, stratified_kfold(labels, 4, seed=1).assignments)
    assert not np.array_equal(a, stratified_kfold(labels, 4, seed=2).assignments)


def test_leave_one_out_and_bad_k():
    labels = np.array([0, 0, 0, 1, 1, 1])
    plan = stratified_kfold(labels, 6, seed=0)
    np.testing.assert_array_equal(plan.fold_sizes(), np.ones(6))
    with pytest.raises(KTooLarge):
        stratified_kfold(labels, 7, seed=0)
    with pytest.raises(DatasetError, match='at least 2'):
        stratified_kfold(labels, 1, seed=0)


def test_preprocessor_applies_training_statistics():
    ds = _with_missing()
    prep = Preprocessor.fit(ds, fit_rows=[0, 1, 2, 4])
    out = prep.transform(ds)
    assert prep.fill[0] == pytest.approx(3.0)
    # fitted on rows 0, 1, 2, 4: column 0 spans [1, 5] after imputation
    assert out.instances[0, 0] == 0.0
    assert out.instances[4, 0] == 1.0
    assert out.instances[3, 0] == pytest.approx(99 / 4)

    again = Preprocessor.from_dict(prep.to_dict())
    np.testing.assert_array_equal(again.transform(ds).instances, out.instances)


def test_preprocessor_rejects_other_widths(separable):
    prep = Preprocessor.fit(separable)
    with pytest.raises(DatasetError, match='expected 9 attributes'):
        prep.transform(Dataset('w', np.zeros((2, 3)), [0, 1], ['a', 'b', 'c'], ['x', 'y']))
