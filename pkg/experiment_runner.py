"""
Cross-validation of the three pipelines and the experiment suite that
produces the report bundle.

Pipelines
    standalone-dcnn  network trained on the grid-shaped rows, softmax head predicts
    dcnn+frf         network trained, dense-layer features fed to the fast random forest
    frf-raw          fast random forest on the normalised raw attributes

Report bundle (``out_dir``)
    cells/<dataset>__<pipeline>__seed<seed>.json   one EvalReport per cell
    tables.md      per-pipeline result tables and the paired t-test matrix
    ttests.json    the same t-tests, machine-readable
    timings.json   wall-clock seconds per cell and fold
    timings.md     wall-clock table
Everything except the two timing files is byte-identical across reruns.
"""

import os
import time
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import psutil
import yaml
from tqdm import tqdm

import seeding
from config_loader import (FOLDS, SEED, MTRY_POLICY, REFERENCE_RESULTS, DATASET_NOTES, REPORT_DIR,
                           DIVERGED_RETRIES, PROGRESS_BARS)
from dataset import Dataset, DatasetError, load_dataset
from preprocessing import Preprocessor, impute_missing, normalize_minmax, stratified_kfold
from dcnn import NetworkConfig, NetworkError, DivergedLoss, TrainedNetwork, train_with_retry, extract_features, \
    predict_dcnn
from fast_forest import ForestConfig, ForestError, NoOobVotes, Forest, fit_forest, predict_forest, oob_error, \
    resolve_mtry
from metrics_collector import (EvalReport, EvaluationError, MetricsCollector, accuracy, confusion_matrix,
                               weighted_mean_accuracy)
from significance import TTestResult, ZeroVariance, paired_ttest

logger = logging.getLogger('dcnnfrf.eval')

STANDALONE_DCNN = 'standalone-dcnn'
DCNN_FRF = 'dcnn+frf'
FRF_RAW = 'frf-raw'
PIPELINE_KINDS = (STANDALONE_DCNN, DCNN_FRF, FRF_RAW)

# component tags under seeding.CELL
_NETWORK = 0
_FOREST = 1
_WHOLE_DATASET = -1

PIPELINE_ERRORS = (DatasetError, NetworkError, ForestError, EvaluationError)


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    kind: str
    network: Optional[Dict] = None
    forest: Dict = field(default_factory=dict)
    mtry_policy: Union[str, int, None] = MTRY_POLICY

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise EvaluationError(f"pipeline '{self.name}': unknown kind '{self.kind}' "
                                  f"(expected one of {', '.join(PIPELINE_KINDS)})")
        if self.kind != FRF_RAW and not self.network:
            raise EvaluationError(f"pipeline '{self.name}': a {self.kind} pipeline needs network settings")

    @property
    def uses_network(self) -> bool:
        return self.kind != FRF_RAW

    @property
    def uses_forest(self) -> bool:
        return self.kind != STANDALONE_DCNN

    def network_config(self, seed: int) -> NetworkConfig:
        return NetworkConfig.from_dict({**self.network, 'seed': seed})

    def forest_config(self, n_features: int, dataset_name: str, seed: int) -> ForestConfig:
        mtry = resolve_mtry(self.mtry_policy, n_features, dataset_name)
        return ForestConfig(**{**self.forest, 'mtry': mtry, 'seed': seed})

    @classmethod
    def from_dict(cls, settings: Union[str, Dict]) -> 'PipelineSpec':
        if isinstance(settings, str):
            return builtin_pipeline(settings)
        settings = dict(settings)
        base = settings.pop('base', None)
        spec = builtin_pipeline(base) if base else None
        name = settings.pop('name', None) or (spec.name if spec else settings.get('kind'))
        kind = settings.pop('kind', spec.kind if spec else None)
        network = settings.pop('network', spec.network if spec else None)
        if isinstance(network, str):
            network = {'preset': network}
        forest = settings.pop('forest', spec.forest if spec else {}) or {}
        mtry = settings.pop('mtry', spec.mtry_policy if spec else MTRY_POLICY)
        if settings:
            raise EvaluationError(f"pipeline '{name}': unknown settings {', '.join(sorted(settings))}")
        return cls(name=name, kind=kind, network=network, forest=dict(forest), mtry_policy=mtry)


BUILTIN_PIPELINES = {
    STANDALONE_DCNN: PipelineSpec(STANDALONE_DCNN, STANDALONE_DCNN,
                                  network={'preset': 'paper-large', 'input_upsample': 'auto'}),
    DCNN_FRF: PipelineSpec(DCNN_FRF, DCNN_FRF, network={'preset': 'paper-small'}, mtry_policy='reference-table'),
    FRF_RAW: PipelineSpec(FRF_RAW, FRF_RAW, mtry_policy='formula'),
}


def builtin_pipeline(name: str) -> PipelineSpec:
    if name not in BUILTIN_PIPELINES:
        raise EvaluationError(f"unknown pipeline '{name}' (known: {', '.join(BUILTIN_PIPELINES)})")
    return BUILTIN_PIPELINES[name]


def _lookup_by_dataset(table: Dict, dataset_name: str):
    key = dataset_name.lower()
    for name, value in table.items():
        if name in key:
            return value
    return None


def dataset_notes(dataset_name: str) -> List[str]:
    note = _lookup_by_dataset(DATASET_NOTES, dataset_name)
    return [f"{dataset_name}: {note}"] if note else []


# --- one fold ---

@dataclass
class FoldOutcome:
    fold: int
    test_size: int
    predictions: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None
    accuracy: float = float('nan')
    seconds: float = 0.0
    oob: Optional[float] = None
    mtry: Optional[int] = None
    learning_rates: List[float] = field(default_factory=list)
    network: Optional[TrainedNetwork] = None
    forest: Optional[Forest] = None
    failure: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


def _fit_forest_stage(pipeline: PipelineSpec, train_x: np.ndarray, train_y: np.ndarray, n_classes: int,
                      dataset_name: str, seed: int, threads: Optional[int], outcome: FoldOutcome) -> Forest:
    cfg = pipeline.forest_config(train_x.shape[1], dataset_name, seed)
    forest = fit_forest(train_x, train_y, cfg, n_classes=n_classes, threads=threads, dataset_name=dataset_name)
    outcome.mtry = forest.config.mtry
    try:
        outcome.oob = oob_error(forest, train_y).error
    except NoOobVotes:
        logger.warning(f"⚠️ {dataset_name} fold {outcome.fold}: no out-of-bag rows, OOB error unavailable")
    return forest


def run_fold(ds: Dataset, train_rows: np.ndarray, test_rows: np.ndarray, pipeline: PipelineSpec, seed: int,
             fold: int, threads: Optional[int] = None, progress: bool = PROGRESS_BARS,
             retries: int = DIVERGED_RETRIES) -> FoldOutcome:
    """Fit the pipeline on train_rows and score it on test_rows.

    Imputation and scaling statistics come from train_rows only.
    """
    outcome = FoldOutcome(fold=fold, test_size=int(test_rows.size))
    imputed = impute_missing(ds, train_rows)
    train_ds, [test_ds], _ = normalize_minmax(imputed.subset(train_rows), [imputed.subset(test_rows)])
    name = f"{ds.name}[fold {fold}]"

    started = time.perf_counter()
    try:
        if pipeline.uses_network:
            config = pipeline.network_config(seeding.derive_seed(seed, seeding.CELL, fold, _NETWORK))
            outcome.network, outcome.learning_rates = train_with_retry(train_ds, config, retries=retries,
                                                                        progress=progress)
        if pipeline.kind == DCNN_FRF:
            train_x = extract_features(outcome.network, train_ds).values
            outcome.forest = _fit_forest_stage(pipeline, train_x, train_ds.labels, ds.c, ds.name,
                                               seeding.derive_seed(seed, seeding.CELL, fold, _FOREST),
                                               threads, outcome)
        elif pipeline.kind == FRF_RAW:
            outcome.forest = _fit_forest_stage(pipeline, train_ds.instances, train_ds.labels, ds.c, ds.name,
                                               seeding.derive_seed(seed, seeding.CELL, fold, _FOREST),
                                               threads, outcome)
    except DivergedLoss as e:
        outcome.seconds = time.perf_counter() - started
        outcome.failure = f"fold {fold}: {e}"
        logger.error(f"❌ {name} diverged after {retries} retries")
        return outcome
    outcome.seconds = time.perf_counter() - started

    if pipeline.kind == STANDALONE_DCNN:
        outcome.predictions = predict_dcnn(outcome.network, test_ds)
    elif pipeline.kind == DCNN_FRF:
        outcome.predictions = predict_forest(outcome.forest, extract_features(outcome.network, test_ds).values)
    else:
        outcome.predictions = predict_forest(outcome.forest, test_ds.instances)
    outcome.truth = test_ds.labels
    outcome.accuracy = accuracy(outcome.predictions, outcome.truth)
    logger.debug(f"📊 {name} {pipeline.name}: accuracy {outcome.accuracy:.4f} in {outcome.seconds:.2f}s")
    return outcome


def _whole_dataset_folds(ds: Dataset, pipeline: PipelineSpec, plan, seed: int, threads: Optional[int],
                          progress: bool, retries: int) -> List[FoldOutcome]:
    """Network trained once on every row, then only the forest stage is cross-validated."""
    whole = Preprocessor.fit(ds).transform(ds)
    config = pipeline.network_config(seeding.derive_seed(seed, seeding.CELL, _WHOLE_DATASET, _NETWORK))
    started = time.perf_counter()
    try:
        network, rates = train_with_retry(whole, config, retries=retries, progress=progress)
    except DivergedLoss as e:
        return [FoldOutcome(fold=f, test_size=int(plan.train_test(f)[1].size), failure=f"whole-dataset network: {e}")
                for f in range(plan.k)]
    network_seconds = time.perf_counter() - started
    features = extract_features(network, whole).values

    outcomes = []
    for fold in range(plan.k):
        train_rows, test_rows = plan.train_test(fold)
        outcome = FoldOutcome(fold=fold, test_size=int(test_rows.size), network=network, learning_rates=rates)
        started = time.perf_counter()
        if pipeline.kind == DCNN_FRF:
            outcome.forest = _fit_forest_stage(pipeline, features[train_rows], ds.labels[train_rows], ds.c, ds.name,
                                               seeding.derive_seed(seed, seeding.CELL, fold, _FOREST),
                                               threads, outcome)
            outcome.predictions = predict_forest(outcome.forest, features[test_rows])
        else:
            outcome.predictions = predict_dcnn(network, whole.subset(test_rows))
        outcome.seconds = time.perf_counter() - started + (network_seconds if fold == 0 else 0.0)
        outcome.truth = ds.labels[test_rows]
        outcome.accuracy = accuracy(outcome.predictions, outcome.truth)
        outcomes.append(outcome)
    return outcomes


def cross_validate(ds: Dataset, pipeline: PipelineSpec, k: int = FOLDS, seed: int = SEED,
                   threads: Optional[int] = None, whole_dataset_network: bool = False,
                   progress: bool = PROGRESS_BARS, retries: int = DIVERGED_RETRIES) -> EvalReport:
    """Stratified k-fold evaluation of one pipeline on one dataset."""
    plan = stratified_kfold(ds.labels, k, seed)
    logger.info(f"🔁 {k}-fold CV of {pipeline.name} on {ds.name} (n={ds.n}, d={ds.d}, c={ds.c}, seed={seed})")

    if whole_dataset_network and pipeline.uses_network:
        outcomes = _whole_dataset_folds(ds, pipeline, plan, seed, threads, progress, retries)
    else:
        outcomes = []
        for fold in range(k):
            train_rows, test_rows = plan.train_test(fold)
            outcomes.append(run_fold(ds, train_rows, test_rows, pipeline, seed, fold, threads, progress, retries))
    return build_report(ds, pipeline, seed, outcomes, whole_dataset_network and pipeline.uses_network)


def build_report(ds: Dataset, pipeline: PipelineSpec, seed: int, outcomes: Sequence[FoldOutcome],
                 whole_dataset_network: bool = False) -> EvalReport:
    confusion = np.zeros((ds.c, ds.c), dtype=np.int64)
    notes = dataset_notes(ds.name)
    if whole_dataset_network:
        notes.append("network trained once on the whole dataset before cross-validating the forest stage")
    for outcome in outcomes:
        if outcome.failed:
            notes.append(outcome.failure)
            continue
        confusion += confusion_matrix(outcome.predictions, outcome.truth, ds.c)
        if len(outcome.learning_rates) > 1:
            tried = ' -> '.join(f"{lr:g}" for lr in outcome.learning_rates)
            notes.append(f"fold {outcome.fold}: loss diverged, learning rate reduced {tried}")
    if whole_dataset_network:
        notes = list(dict.fromkeys(notes))

    scored = [o for o in outcomes if not o.failed]
    oobs = [o.oob for o in scored if o.oob is not None]
    network_cfg = next((o.network.config for o in scored if o.network is not None), None)
    fingerprint = [f"pipeline={pipeline.kind}"]
    if network_cfg is not None:
        fingerprint.append(network_cfg.fingerprint())
    if pipeline.uses_forest and scored:
        fingerprint.append(scored[0].forest.config.fingerprint())

    per_fold = [o.accuracy for o in outcomes]
    sizes = [o.test_size for o in outcomes]
    return EvalReport(
        dataset=ds.name,
        pipeline=pipeline.name,
        seed=seed,
        folds=len(outcomes),
        per_fold_accuracy=per_fold,
        fold_sizes=sizes,
        mean_accuracy=weighted_mean_accuracy([o.accuracy for o in scored], [o.test_size for o in scored]),
        train_time_seconds=float(sum(o.seconds for o in outcomes)),
        confusion=confusion.tolist(),
        class_names=list(ds.class_names),
        config_fingerprint=' | '.join(fingerprint),
        n_instances=ds.n,
        n_attributes=ds.d,
        random_features=scored[0].mtry if scored and pipeline.uses_forest else None,
        oob_error=float(np.mean(oobs)) if oobs else None,
        per_fold_time=[o.seconds for o in outcomes],
        per_fold_oob=[o.oob for o in outcomes],
        failed_folds=[o.fold for o in outcomes if o.failed],
        learning_rates=[list(o.learning_rates) for o in outcomes],
        notes=notes,
    )


# --- manifest and suite ---

@dataclass
class DatasetEntry:
    path: str
    class_attribute: Optional[str] = None
    name: Optional[str] = None


@dataclass
class Manifest:
    name: str
    datasets: List[DatasetEntry]
    pipelines: List[PipelineSpec]
    folds: int = FOLDS
    seeds: List[int] = field(default_factory=lambda: [SEED])
    threads: Optional[int] = None
    whole_dataset_network: bool = False


def load_manifest(path: str) -> Manifest:
    """Read an experiment manifest; dataset paths are relative to the manifest file."""
    with open(path, 'r', encoding='utf-8') as f:
        settings = yaml.safe_load(f) or {}
    if not isinstance(settings, dict):
        raise EvaluationError(f"{path}: expected a mapping at the top level")

    base = os.path.dirname(os.path.abspath(path))
    datasets = []
    for entry in settings.get('datasets') or []:
        if isinstance(entry, str):
            entry = {'path': entry}
        if 'path' not in entry:
            raise EvaluationError(f"{path}: every dataset needs a 'path'")
        full = os.path.normpath(os.path.join(base, entry['path']))
        datasets.append(DatasetEntry(path=full, class_attribute=entry.get('class'), name=entry.get('name')))
    pipelines = [PipelineSpec.from_dict(p) for p in settings.get('pipelines') or []]
    if not datasets:
        raise EvaluationError(f"{path}: manifest lists no datasets")
    if not pipelines:
        raise EvaluationError(f"{path}: manifest lists no pipelines")
    if len({p.name for p in pipelines}) != len(pipelines):
        raise EvaluationError(f"{path}: pipeline names must be unique")

    seeds = settings.get('seeds', [settings.get('seed', SEED)])
    return Manifest(name=settings.get('name', os.path.splitext(os.path.basename(path))[0]),
                    datasets=datasets, pipelines=pipelines, folds=int(settings.get('folds', FOLDS)),
                    seeds=[int(s) for s in seeds], threads=settings.get('threads'),
                    whole_dataset_network=bool(settings.get('whole_dataset_network', False)))


@dataclass
class CellFailure:
    dataset: str
    pipeline: str
    seed: Optional[int]
    message: str


@dataclass
class PairTest:
    scope: str
    first: str
    second: str
    result: Optional[TTestResult] = None
    problem: Optional[str] = None

    def to_dict(self) -> Dict:
        return {'scope': self.scope, 'first': self.first, 'second': self.second,
                'result': self.result.to_dict() if self.result else None, 'problem': self.problem}


@dataclass
class SuiteResult:
    reports: List[EvalReport]
    failures: List[CellFailure]
    tests: List[PairTest]
    tables_path: str

    @property
    def any_succeeded(self) -> bool:
        return any(r.completed for r in self.reports)


def _log_run_metadata(manifest: Manifest, threads: Optional[int]) -> None:
    memory = psutil.Process().memory_info().rss / (1024 * 1024)
    logger.info(f"🖥️ {manifest.name}: {len(manifest.datasets)} datasets x {len(manifest.pipelines)} pipelines x "
                f"{len(manifest.seeds)} seeds; cpus {psutil.cpu_count(logical=False)} physical / "
                f"{psutil.cpu_count()} logical, threads {threads or 1}, rss {memory:.0f} MB")


def _pair_accuracies(first: List[EvalReport], second: List[EvalReport]) -> Tuple[np.ndarray, np.ndarray]:
    by_seed = {r.seed: r for r in second}
    a, b = [], []
    for report in first:
        other = by_seed.get(report.seed)
        if other is None:
            continue
        a.extend(report.per_fold_accuracy)
        b.extend(other.per_fold_accuracy)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    keep = np.isfinite(a) & np.isfinite(b)
    return a[keep], b[keep]


def _run_pair_test(scope: str, first: str, second: str, a: np.ndarray, b: np.ndarray) -> PairTest:
    test = PairTest(scope=scope, first=first, second=second)
    try:
        test.result = paired_ttest(a, b)
    except (ZeroVariance, EvaluationError) as e:
        test.problem = str(e)
    return test


def pairwise_tests(reports: List[EvalReport], pipelines: Sequence[str], datasets: Sequence[str]) -> List[PairTest]:
    """Per dataset, every pipeline pair over matched fold accuracies; then a pooled test over dataset means."""
    tests = []
    for dataset in datasets:
        for first, second in combinations(pipelines, 2):
            a, b = _pair_accuracies([r for r in reports if r.dataset == dataset and r.pipeline == first],
                                    [r for r in reports if r.dataset == dataset and r.pipeline == second])
            if a.size:
                tests.append(_run_pair_test(dataset, first, second, a, b))

    for first, second in combinations(pipelines, 2):
        a, b = [], []
        for dataset in datasets:
            means_a = [r.mean_accuracy for r in reports if r.dataset == dataset and r.pipeline == first]
            means_b = [r.mean_accuracy for r in reports if r.dataset == dataset and r.pipeline == second]
            if means_a and means_b and np.all(np.isfinite(means_a + means_b)):
                a.append(float(np.mean(means_a)))
                b.append(float(np.mean(means_b)))
        if len(a) >= 2:
            tests.append(_run_pair_test('all datasets', first, second, np.asarray(a), np.asarray(b)))
    return tests


def _markdown(frame: pd.DataFrame) -> str:
    header = '| ' + ' | '.join(str(c) for c in frame.columns) + ' |'
    rule = '|' + '|'.join('---' for _ in frame.columns) + '|'
    rows = ['| ' + ' | '.join(str(v) for v in row) + ' |' for row in frame.itertuples(index=False)]
    return '\n'.join([header, rule] + rows)


def _fmt(value, pattern: str) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return '-'
    return format(value, pattern)


def results_table(reports: List[EvalReport], pipeline: PipelineSpec, multiple_seeds: bool) -> pd.DataFrame:
    reference = REFERENCE_RESULTS.get(pipeline.kind, {})
    rows = []
    for r in reports:
        row = {'Dataset': r.dataset}
        if multiple_seeds:
            row['Seed'] = r.seed
        row.update({
            'Attributes': r.n_attributes,
            'Instances': r.n_instances,
            'Random Features': _fmt(r.random_features, 'd'),
            'OOB error': _fmt(r.oob_error, '.4f'),
            'Accuracy %': _fmt(100.0 * r.mean_accuracy, '.2f'),
            'Reference accuracy %': _fmt(_lookup_by_dataset(reference, r.dataset), '.2f'),
        })
        rows.append(row)
    return pd.DataFrame(rows)


def tests_table(tests: List[PairTest]) -> pd.DataFrame:
    rows = []
    for test in tests:
        res = test.result
        rows.append({
            'Scope': test.scope,
            'Pair': f"{test.first} vs {test.second}",
            't': _fmt(res.t if res else None, '.4f'),
            'df': res.df if res else '-',
            'p': _fmt(res.p_value if res else None, '.4f'),
            'Significant at 0.05': ('yes' if res.significant_at_05 else 'no') if res else test.problem,
        })
    return pd.DataFrame(rows)


def write_tables(path: str, manifest: Manifest, reports: List[EvalReport], tests: List[PairTest],
                 failures: List[CellFailure]) -> None:
    lines = [f"# {manifest.name}", "",
             f"{manifest.folds}-fold stratified cross-validation, seeds {', '.join(map(str, manifest.seeds))}"
             + (", network trained on all rows" if manifest.whole_dataset_network else ""), "",
             "Wall-clock times per cell and fold are in `timings.md` and `timings.json`.", ""]
    multiple_seeds = len(manifest.seeds) > 1
    for pipeline in manifest.pipelines:
        cell_reports = [r for r in reports if r.pipeline == pipeline.name]
        lines += [f"## {pipeline.name}", ""]
        lines += [_markdown(results_table(cell_reports, pipeline, multiple_seeds)) if cell_reports
                  else "No completed cells.", ""]
        notes = sorted({n for r in cell_reports for n in r.notes})
        if notes:
            lines += [f"- {n}" for n in notes] + [""]
    lines += ["## Paired t-tests", ""]
    lines += [_markdown(tests_table(tests)) if tests else "Fewer than two pipelines with matched folds.", ""]
    if failures:
        lines += ["## Failed cells", ""]
        lines += [f"- {f.dataset} / {f.pipeline} / seed {f.seed}: {f.message}" for f in failures] + [""]
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines))


def write_timings(path: str, reports: List[EvalReport]) -> None:
    frame = pd.DataFrame([{'Dataset': r.dataset, 'Pipeline': r.pipeline, 'Seed': r.seed,
                           'Time (s)': f"{r.train_time_seconds:.2f}"} for r in reports])
    with open(path, 'w', encoding='utf-8') as f:
        f.write("# Wall-clock training time\n\n" + (_markdown(frame) if len(frame) else "No cells.") + "\n")


def run_experiment_suite(manifest_path: str, out_dir: Optional[str] = None, threads: Optional[int] = None,
                         whole_dataset_network: Optional[bool] = None, progress: bool = PROGRESS_BARS) -> SuiteResult:
    """Run every (dataset, pipeline, seed) cell of a manifest and write the report bundle."""
    manifest = load_manifest(manifest_path)
    if whole_dataset_network is not None:
        manifest.whole_dataset_network = whole_dataset_network
    threads = threads or manifest.threads
    out_dir = out_dir or REPORT_DIR
    collector = MetricsCollector(out_dir)
    _log_run_metadata(manifest, threads)

    failures: List[CellFailure] = []
    dataset_names = []
    cells = tqdm(total=len(manifest.datasets) * len(manifest.pipelines) * len(manifest.seeds),
                 desc=manifest.name, unit="cell", disable=not progress)
    for entry in manifest.datasets:
        try:
            ds = load_dataset(entry.path, entry.class_attribute)
        except (DatasetError, FileNotFoundError) as e:
            logger.error(f"❌ Could not load {entry.path}: {e}")
            for pipeline in manifest.pipelines:
                failures.append(CellFailure(entry.name or os.path.basename(entry.path), pipeline.name, None, str(e)))
            cells.update(len(manifest.pipelines) * len(manifest.seeds))
            continue
        if entry.name:
            ds.name = entry.name
        dataset_names.append(ds.name)
        for pipeline in manifest.pipelines:
            for seed in manifest.seeds:
                try:
                    report = cross_validate(ds, pipeline, manifest.folds, seed, threads,
                                            manifest.whole_dataset_network, progress=False)
                    collector.add_report(report)
                    if not report.completed:
                        failures.append(CellFailure(ds.name, pipeline.name, seed, "every fold failed"))
                except PIPELINE_ERRORS as e:
                    logger.error(f"❌ {ds.name} / {pipeline.name} / seed {seed}: {e}")
                    failures.append(CellFailure(ds.name, pipeline.name, seed, str(e)))
                cells.update(1)
    cells.close()

    reports = collector.reports
    tests = pairwise_tests(reports, [p.name for p in manifest.pipelines], dataset_names)
    tables_path = os.path.join(out_dir, 'tables.md')
    write_tables(tables_path, manifest, reports, tests, failures)
    with open(os.path.join(out_dir, 'ttests.json'), 'w', encoding='utf-8') as f:
        json.dump([t.to_dict() for t in tests], f, indent=2, sort_keys=True)
    collector.save_timings()
    write_timings(os.path.join(out_dir, 'timings.md'), reports)
    logger.info(f"✅ {len(reports)} cells reported, {len(failures)} failed; tables in {tables_path}")
    return SuiteResult(reports=reports, failures=failures, tests=tests, tables_path=tables_path)
