import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dataset import Dataset, write_arff  # noqa: E402


def make_separable(n_per_class=10, d=9, n_classes=3, seed=0, name='toy'):
    """Class k rows sit around level k on every attribute, with small noise."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for k in range(n_classes):
        rows.append(k + 0.1 * rng.standard_normal((n_per_class, d)))
        labels += [k] * n_per_class
    return Dataset(
        name=name,
        instances=np.vstack(rows),
        labels=np.array(labels),
        attribute_names=[f"a{j}" for j in range(d)],
        class_names=[f"c{k}" for k in range(n_classes)],
    )


@pytest.fixture
def separable():
    return make_separable()


@pytest.fixture
def separable_arff(tmp_path, separable):
    path = tmp_path / 'toy.arff'
    write_arff(separable, str(path))
    return str(path)


@pytest.fixture
def separable_csv(tmp_path, separable):
    path = tmp_path / 'toy.csv'
    frame = pd.DataFrame(separable.instances, columns=separable.attribute_names)
    frame['class'] = [separable.class_names[y] for y in separable.labels]
    frame.to_csv(path, index=False)
    return str(path)


@pytest.fixture
def write_text(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding='utf-8')
        return str(path)
    return _write
