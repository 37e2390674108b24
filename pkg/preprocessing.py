"""
Preprocessing fitted on training rows only: imputation, min-max scaling,
grid reshape for convolution, and stratified fold assignment.
"""

import math
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dataset import Dataset, DatasetError, NOMINAL
import seeding

logger = logging.getLogger('dcnnfrf.data')


class AllMissingColumn(DatasetError):
    pass


class KTooLarge(DatasetError):
    pass


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int
    pad_count: int


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def train_test(self, fold: int) -> Tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass
class MinMaxScaling:
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, instances: np.ndarray) -> np.ndarray:
        span = self.maximum - self.minimum
        constant = span == 0
        scaled = (instances - self.minimum) / np.where(constant, 1.0, span)
        scaled[:, constant] = 0.0
        return scaled


def _fill_values(ds: Dataset, fit_rows: np.ndarray, columns: Sequence[int]) -> np.ndarray:
    """Mean (numeric) or smallest-code mode (nominal) of each column over fit_rows."""
    fit_values = ds.instances[fit_rows]
    fit_missing = ds.missing_mask[fit_rows]
    fills = np.zeros(len(columns), dtype=np.float64)
    for k, j in enumerate(columns):
        observed = fit_values[~fit_missing[:, j], j]
        if observed.size == 0:
            raise AllMissingColumn(
                f"{ds.name}: attribute '{ds.attribute_names[j]}' has no observed values in the fitting rows")
        if ds.attribute_kinds[j] == NOMINAL:
            codes, counts = np.unique(observed, return_counts=True)
            fills[k] = codes[np.argmax(counts)]
        else:
            fills[k] = observed.mean()
    return fills


def impute_missing(ds: Dataset, fit_rows: Sequence[int]) -> Dataset:
    """Fill missing cells with the fit_rows mean (numeric) or mode (nominal codes)."""
    fit_rows = np.asarray(fit_rows, dtype=np.int64)
    if fit_rows.size == 0:
        raise DatasetError(f"{ds.name}: imputation needs at least one fitting row")
    if not ds.missing_mask.any():
        return ds

    columns = np.flatnonzero(ds.missing_mask.any(axis=0))
    fills = _fill_values(ds, fit_rows, columns)
    filled = ds.instances.copy()
    for j, fill in zip(columns, fills):
        filled[ds.missing_mask[:, j], j] = fill

    logger.debug(f"🩹 Imputed {ds.missing_count} missing cells in {ds.name} from {fit_rows.size} rows")
    return ds.with_instances(filled)


def normalize_minmax(train: Dataset, others: List[Dataset]) -> Tuple[Dataset, List[Dataset], MinMaxScaling]:
    """Scale every attribute so the training values span [0, 1]; constant attributes become 0."""
    if np.isnan(train.instances).any():
        raise DatasetError(f"{train.name}: impute missing values before scaling")
    scaling = MinMaxScaling(train.instances.min(axis=0), train.instances.max(axis=0))
    scaled_train = train.with_instances(scaling.apply(train.instances))
    scaled_others = [ds.with_instances(scaling.apply(ds.instances)) for ds in others]
    return scaled_train, scaled_others, scaling


def grid_shape(d: int) -> GridShape:
    if d < 1:
        raise DatasetError(f"cannot build a grid for d={d}")
    side = math.isqrt(d - 1) + 1  # ceil(sqrt(d)) without float rounding
    return GridShape(height=side, width=side, pad_count=side * side - d)


def to_grid(instance: np.ndarray) -> np.ndarray:
    """Place a length-d row on a zero-padded ceil(sqrt(d)) square, row-major; returns (1, s, s)."""
    instance = np.asarray(instance, dtype=np.float64).ravel()
    shape = grid_shape(instance.size)
    cells = np.zeros(shape.height * shape.width, dtype=np.float64)
    cells[:instance.size] = instance
    return cells.reshape(1, shape.height, shape.width)


def to_grid_batch(instances: np.ndarray) -> np.ndarray:
    """Vectorised ``to_grid`` over the rows of an n x d matrix; returns (n, 1, s, s)."""
    instances = np.asarray(instances, dtype=np.float64)
    n, d = instances.shape
    shape = grid_shape(d)
    cells = np.zeros((n, shape.height * shape.width), dtype=np.float64)
    cells[:, :d] = instances
    return cells.reshape(n, 1, shape.height, shape.width)


def from_grid(grid: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(grid).reshape(-1)[:d].copy()


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then deal each class round-robin over the folds.

    The dealing position carries over from one class to the next, so fold
    sizes also differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if k < 2:
        raise DatasetError(f"fold count must be at least 2, got {k}")
    if k > n:
        raise KTooLarge(f"cannot split {n} instances into {k} folds")

    rng = seeding.derive_rng(seed, seeding.FOLDS)
    order = rng.permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = order[labels[order] == cls]
        assignments[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    return FoldPlan(k=k, assignments=assignments, seed=seed)


@dataclass
class Preprocessor:
    """Imputation fills plus min-max bounds fitted on one set of rows, reusable on new data."""
    fill: np.ndarray
    scaling: MinMaxScaling

    @classmethod
    def fit(cls, ds: Dataset, fit_rows: Optional[Sequence[int]] = None) -> 'Preprocessor':
        rows = np.arange(ds.n) if fit_rows is None else np.asarray(fit_rows, dtype=np.int64)
        if rows.size == 0:
            raise DatasetError(f"{ds.name}: preprocessing needs at least one fitting row")
        fill = _fill_values(ds, rows, range(ds.d))
        imputed = cls._impute(ds.instances[rows], ds.missing_mask[rows], fill)
        return cls(fill=fill, scaling=MinMaxScaling(imputed.min(axis=0), imputed.max(axis=0)))

    @staticmethod
    def _impute(instances: np.ndarray, missing: np.ndarray, fill: np.ndarray) -> np.ndarray:
        return np.where(missing, fill[None, :], instances)

    def transform(self, ds: Dataset) -> Dataset:
        if ds.d != self.fill.size:
            raise DatasetError(f"{ds.name}: expected {self.fill.size} attributes, got {ds.d}")
        imputed = self._impute(ds.instances, ds.missing_mask, self.fill)
        return ds.with_instances(self.scaling.apply(imputed))

    def to_dict(self) -> dict:
        return {'fill': self.fill.tolist(),
                'minimum': self.scaling.minimum.tolist(),
                'maximum': self.scaling.maximum.tolist()}

    @classmethod
    def from_dict(cls, settings: dict) -> 'Preprocessor':
        return cls(fill=np.asarray(settings['fill'], dtype=np.float64),
                   scaling=MinMaxScaling(np.asarray(settings['minimum'], dtype=np.float64),
                                         np.asarray(settings['maximum'], dtype=np.float64)))
