import os

import numpy as np
import pytest

import experiment_runner
from dataset import write_arff
from dcnn import DivergedLoss
from experiment_runner import (BUILTIN_PIPELINES, PipelineSpec, EvaluationError, cross_validate, run_fold,
                               load_manifest, pairwise_tests, run_experiment_suite, dataset_notes)
from metrics_collector import EvalReport
from preprocessing import stratified_kfold
from conftest import make_separable

REPO = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))

FOREST_ONLY = PipelineSpec('frf-raw', 'frf-raw', forest={'n_trees': 7}, mtry_policy='formula')
SMOKE = PipelineSpec('dcnn+frf', 'dcnn+frf',
                     network={'preset': 'smoke', 'epochs': 2, 'batch_size': 5, 'learning_rate': 0.1},
                     forest={'n_trees': 5}, mtry_policy='formula')


def test_pipeline_spec_from_manifest_entries():
    assert PipelineSpec.from_dict('frf-raw') is BUILTIN_PIPELINES['frf-raw']
    tuned = PipelineSpec.from_dict({'base': 'dcnn+frf', 'name': 'fast', 'network': 'smoke'})
    assert (tuned.name, tuned.kind, tuned.network, tuned.mtry_policy) == ('fast', 'dcnn+frf', {'preset': 'smoke'},
                                                                         'reference-table')
    with pytest.raises(EvaluationError, match='unknown pipeline'):
        PipelineSpec.from_dict('svm')
    with pytest.raises(EvaluationError, match='unknown settings'):
        PipelineSpec.from_dict({'kind': 'frf-raw', 'colour': 'red'})
    with pytest.raises(EvaluationError, match='needs network settings'):
        PipelineSpec('bare', 'standalone-dcnn')


def test_builtin_standalone_network_fits_small_grids():
    config = BUILTIN_PIPELINES['standalone-dcnn'].network_config(seed=1)
    assert str(config.conv_layers[0]) == '20-5-5-2-2'
    assert config.input_upsample == 'auto'


def test_forest_cross_validation_accounts_for_every_row():
    ds = make_separable(n_per_class=12)
    report = cross_validate(ds, FOREST_ONLY, k=4, seed=3, progress=False)
    confusion = np.array(report.confusion)
    np.testing.assert_array_equal(confusion.sum(axis=1), ds.class_counts())
    assert sum(report.fold_sizes) == ds.n
    assert report.mean_accuracy == pytest.approx(report.pooled_accuracy(), abs=1e-12)
    assert report.random_features == 4
    assert report.completed and not report.failed_folds

    again = cross_validate(ds, FOREST_ONLY, k=4, seed=3, progress=False)
    assert again.to_dict() == report.to_dict()


def test_leave_one_out():
    ds = make_separable(n_per_class=3, n_classes=2)
    report = cross_validate(ds, FOREST_ONLY, k=6, seed=0, progress=False)
    assert report.folds == 6
    assert report.fold_sizes == [1] * 6


def test_network_pipeline_cross_validation():
    ds = make_separable()
    report = cross_validate(ds, SMOKE, k=3, seed=5, progress=False)
    assert report.completed
    assert np.array(report.confusion).sum() == ds.n
    assert report.random_features == 4  # 8 dense features
    assert 'dense=8' in report.config_fingerprint
    assert all(rates == [0.1] for rates in report.learning_rates)


def test_whole_dataset_network_is_trained_once():
    ds = make_separable()
    report = cross_validate(ds, SMOKE, k=3, seed=5, whole_dataset_network=True, progress=False)
    assert report.completed
    assert any('whole dataset' in note for note in report.notes)


def test_test_rows_never_influence_training():
    ds = make_separable()
    plan = stratified_kfold(ds.labels, 3, seed=1)
    train_rows, test_rows = plan.train_test(0)
    clean = run_fold(ds, train_rows, test_rows, SMOKE, seed=2, fold=0, progress=False)

    instances = ds.instances.copy()
    instances[test_rows[0]] = 1e6
    poisoned = run_fold(ds.with_instances(instances), train_rows, test_rows, SMOKE, seed=2, fold=0, progress=False)

    for name in clean.network.params:
        np.testing.assert_array_equal(clean.network.params[name], poisoned.network.params[name])
    for a, b in zip(clean.forest.trees, poisoned.forest.trees):
        np.testing.assert_array_equal(a.threshold, b.threshold)


def test_diverged_folds_are_reported_not_raised(monkeypatch):
    def always_diverge(ds, config, retries=2, progress=False):
        raise DivergedLoss("loss became nan", learning_rate=config.learning_rate, epoch=1)

    monkeypatch.setattr(experiment_runner, 'train_with_retry', always_diverge)
    report = cross_validate(make_separable(), SMOKE, k=3, seed=1, progress=False)
    assert report.failed_folds == [0, 1, 2]
    assert not report.completed
    assert np.isnan(report.mean_accuracy)
    assert all(np.isnan(a) for a in report.per_fold_accuracy)
    assert any('loss became nan' in note for note in report.notes)


def _cell(dataset, pipeline, accuracies, mean):
    return EvalReport(dataset=dataset, pipeline=pipeline, seed=1, folds=len(accuracies),
                      per_fold_accuracy=accuracies, fold_sizes=[10] * len(accuracies), mean_accuracy=mean,
                      train_time_seconds=0.0, confusion=[[1]], class_names=['a'], config_fingerprint='',
                      n_instances=10, n_attributes=1)


def test_pairwise_tests_per_dataset_and_pooled():
    reports = [_cell('d1', 'A', [0.9, float('nan'), 0.7], 0.8), _cell('d1', 'B', [0.8, 0.8, 0.4], 0.7),
               _cell('d2', 'A', [0.5, 0.6, 0.7], 0.6), _cell('d2', 'B', [0.5, 0.5, 0.5], 0.4)]
    tests = pairwise_tests(reports, ['A', 'B'], ['d1', 'd2'])
    assert [t.scope for t in tests] == ['d1', 'd2', 'all datasets']
    assert tests[0].result.df == 1
    assert tests[1].result.df == 2
    assert tests[2].result.df == 1


def test_pairwise_tests_record_constant_differences():
    reports = [_cell('d1', 'A', [1.0, 0.5], 0.75), _cell('d1', 'B', [0.5, 0.0], 0.25)]
    [test] = pairwise_tests(reports, ['A', 'B'], ['d1'])
    assert test.result is None
    assert 'undefined' in test.problem


def test_dataset_notes():
    [note] = dataset_notes('japanese-vowels')
    assert 'time series' in note
    assert dataset_notes('segment') == []


def test_replication_manifest():
    manifest = load_manifest(os.path.join(REPO, 'manifests', 'replication.yaml'))
    assert len(manifest.datasets) == 9
    assert [p.name for p in manifest.pipelines] == ['dcnn+frf', 'standalone-dcnn']
    assert manifest.folds == 5
    assert manifest.datasets[0].path == os.path.join(REPO, 'data', 'lymphoma.arff')


@pytest.mark.parametrize('text, message', [
    ('name: empty\n', 'no datasets'),
    ('datasets: [a.arff]\n', 'no pipelines'),
    ('datasets: [a.arff]\npipelines: [frf-raw, frf-raw]\n', 'unique'),
    ('datasets: [a.arff]\npipelines: [boosting]\n', 'unknown pipeline'),
])
def test_bad_manifests(write_text, text, message):
    with pytest.raises(EvaluationError, match=message):
        load_manifest(write_text('m.yaml', text))


SUITE = """name: tiny
folds: 3
seeds: [11]
datasets:
  - {path: toy.arff, name: toy}
  - {path: absent.arff}
pipelines:
  - {name: few-trees, kind: frf-raw, forest: {n_trees: 3}}
  - {name: more-trees, kind: frf-raw, forest: {n_trees: 9}}
"""


def test_suite_writes_a_reproducible_bundle(tmp_path, write_text):
    ds = make_separable(n_per_class=9, name='toy')
    write_arff(ds, str(tmp_path / 'toy.arff'))
    manifest = write_text('tiny.yaml', SUITE)

    first = run_experiment_suite(manifest, str(tmp_path / 'run1'), progress=False)
    second = run_experiment_suite(manifest, str(tmp_path / 'run2'), progress=False)

    assert len(first.reports) == 2
    assert len(first.tests) == 1 and first.tests[0].scope == 'toy'
    assert [(f.dataset, f.pipeline) for f in first.failures] == [('absent.arff', 'few-trees'),
                                                                  ('absent.arff', 'more-trees')]
    assert first.any_succeeded

    for name in ['tables.md', 'ttests.json', 'cells/toy__few-trees__seed11.json',
                 'cells/toy__more-trees__seed11.json']:
        assert (tmp_path / 'run1' / name).read_bytes() == (tmp_path / 'run2' / name).read_bytes(), name
    assert (tmp_path / 'run1' / 'timings.json').exists()
    tables = (tmp_path / 'run1' / 'tables.md').read_text(encoding='utf-8')
    assert '## few-trees' in tables and '## Failed cells' in tables
    assert 'Time (s)' not in tables and '`timings.md`' in tables
