"""
Command-line entry point.

    python main.py inspect data/pendigits.arff
    python main.py train-dcnn data/segment.arff --preset paper-small --out segment.ckpt
    python main.py extract segment.ckpt data/segment.arff --out segment_features.csv
    python main.py train-frf segment_features.csv --trees 100 --mtry 5 --out segment_forest.json
    python main.py predict data/segment.arff --checkpoint segment.ckpt --forest segment_forest.json
    python main.py experiment manifests/replication.yaml
    python main.py ttest --a 0.97,0.98,0.96 --b 0.95,0.97,0.96

Exit codes: 0 success, 1 bad input (file, config, data), 2 internal error.
"""

import sys
import json
import time
import logging
import argparse
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import psutil
import yaml

from config_loader import LOG_FILE, LOG_LEVEL, PROGRESS_BARS, SEED, THREADS, MTRY_POLICY, REPORT_DIR
from dataset import Dataset, DatasetError, load_dataset
from preprocessing import Preprocessor, grid_shape, impute_missing
from dcnn import (NetworkConfig, NetworkError, train, validate_shape_chain, extract_features, predict_dcnn,
                  save_checkpoint, load_checkpoint)
from fast_forest import (ForestConfig, ForestError, NoOobVotes, fit_forest, predict_forest, oob_error,
                         importance_report, resolve_mtry, save_forest, load_forest)
from metrics_collector import EvaluationError, accuracy, load_report
from significance import paired_ttest, critical_t
from experiment_runner import run_experiment_suite

logger = logging.getLogger('dcnnfrf.cli')

USER_ERRORS = (DatasetError, NetworkError, ForestError, EvaluationError, FileNotFoundError, yaml.YAMLError)

level_map = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR
}


def setup_logging(verbose: bool = False, json_mode: bool = False) -> None:
    # --json keeps stdout for records only
    level = logging.DEBUG if verbose else level_map.get(LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s [%(levelname)s] %(message)s',
        handlers=[
            logging.FileHandler(LOG_FILE, encoding='utf-8'),
            logging.StreamHandler(sys.stderr if json_mode else sys.stdout)
        ],
        force=True
    )


class Output:
    """Human-readable lines, or one JSON record per command with --json."""

    def __init__(self, json_mode: bool):
        self.json_mode = json_mode

    def emit(self, record: Dict, lines: List[str]) -> None:
        if self.json_mode:
            print(json.dumps(record, sort_keys=True, default=_json_default))
        else:
            for line in lines:
                print(line)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def _progress(args) -> bool:
    return PROGRESS_BARS and not args.json and sys.stderr.isatty()


def _threads(args) -> int:
    return args.threads or THREADS or psutil.cpu_count(logical=False) or 1


def _seed(args) -> int:
    return SEED if args.seed is None else args.seed


def _upsample(text: str):
    if text == 'auto':
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a positive integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"upsample factor must be at least 1, got {value}")
    return value


def _mtry(text: str):
    if text in ('formula', 'reference-table'):
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'formula', 'reference-table' or an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"mtry must be at least 1, got {value}")
    return value


def _accuracies(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _forest_matrix(ds: Dataset) -> np.ndarray:
    """Forest input: missing cells imputed over all rows, no scaling."""
    return impute_missing(ds, np.arange(ds.n)).instances


# --- commands ---

def cmd_inspect(args, out: Output) -> int:
    ds = load_dataset(args.dataset, args.class_attribute)
    grid = grid_shape(ds.d)
    counts = dict(zip(ds.class_names, ds.class_counts().tolist()))
    record = {'command': 'inspect', 'dataset': ds.name, 'n': ds.n, 'd': ds.d, 'c': ds.c,
              'class_counts': counts, 'missing_cells': ds.missing_count,
              'grid': [grid.height, grid.width], 'pad_count': grid.pad_count}
    lines = [f"📂 {ds.name}: n={ds.n}, d={ds.d}, c={ds.c}",
             f"   missing cells: {ds.missing_count}",
             f"   grid: {grid.height}x{grid.width} ({grid.pad_count} padding cells)",
             "   class counts:"] + [f"     {name}: {count}" for name, count in counts.items()]
    out.emit(record, lines)
    return 0


def _network_config(args) -> NetworkConfig:
    overrides = {'epochs': args.epochs, 'learning_rate': args.learning_rate, 'batch_size': args.batch_size,
                 'input_upsample': args.upsample, 'seed': _seed(args)}
    if args.config:
        with open(args.config, 'r', encoding='utf-8') as f:
            settings = yaml.safe_load(f) or {}
        if not isinstance(settings, dict):
            raise NetworkError(f"{args.config}: expected a mapping of network settings")
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return NetworkConfig.from_dict(settings)
    return NetworkConfig.from_preset(args.preset, **overrides)


def cmd_train(args, out: Output) -> int:
    ds = load_dataset(args.dataset, args.class_attribute)
    config = _network_config(args)
    validate_shape_chain(config, grid_shape(ds.d))
    preprocessor = Preprocessor.fit(ds)

    started = time.perf_counter()
    net = train(preprocessor.transform(ds), config, progress=_progress(args))
    seconds = time.perf_counter() - started
    net.preprocessor = preprocessor
    net.class_names = list(ds.class_names)
    net.nominal_values = dict(ds.nominal_values)
    save_checkpoint(net, args.out)

    record = {'command': 'train-dcnn', 'dataset': ds.name, 'checkpoint': args.out, 'config': config.to_dict(),
              'upsample': net.upsample, 'parameters': net.parameter_count(),
              'final_loss': net.loss_history[-1], 'seconds': seconds}
    out.emit(record, [f"🧠 {config.fingerprint()}",
                      f"   final loss {net.loss_history[-1]:.6f} after {config.epochs} epochs in {seconds:.2f}s",
                      f"💾 checkpoint: {args.out}"])
    return 0


def cmd_extract(args, out: Output) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset, args.class_attribute).recode_nominals(net.nominal_values)
    preprocessor = net.preprocessor or Preprocessor.fit(ds)
    features = extract_features(net, preprocessor.transform(ds))

    frame = pd.DataFrame(features.values, columns=[f"f{j}" for j in range(features.cols)])
    frame['class'] = [ds.class_names[label] for label in ds.labels]
    frame.to_csv(args.out, index=False)
    out.emit({'command': 'extract', 'dataset': ds.name, 'rows': features.rows, 'cols': features.cols,
              'output': args.out},
             [f"✅ {features.rows} x {features.cols} features from the {features.source} written to {args.out}"])
    return 0


def cmd_forest(args, out: Output) -> int:
    ds = load_dataset(args.input, args.class_attribute)
    mtry = resolve_mtry(args.mtry or MTRY_POLICY, ds.d, ds.name)
    cfg = ForestConfig(n_trees=args.trees, mtry=mtry, min_leaf=args.min_leaf, max_depth=args.max_depth,
                       seed=_seed(args))
    forest = fit_forest(_forest_matrix(ds), ds.labels, cfg, n_classes=ds.c, threads=_threads(args),
                        dataset_name=ds.name)
    forest.class_names = list(ds.class_names)
    forest.nominal_values = dict(ds.nominal_values)
    save_forest(forest, args.out)

    try:
        oob = oob_error(forest, ds.labels)
        oob_value, oob_line = oob.error, f"📊 OOB error {oob.error:.4f} over {oob.evaluated_rows} rows"
    except NoOobVotes:
        oob_value, oob_line = None, "⚠️ no out-of-bag rows, OOB error unavailable"
    report = importance_report(forest, ds.attribute_names)
    if args.importance:
        report.to_csv(args.importance, index=False)
    top = report.head(10)

    record = {'command': 'train-frf', 'dataset': ds.name, 'model': args.out, 'trees': cfg.n_trees, 'mtry': mtry,
              'oob_error': oob_value,
              'importance': [{'attribute': a, 'importance': float(v)} for a, v in zip(top.attribute, top.importance)]}
    lines = [f"🌲 {cfg.fingerprint()} on {ds.name}", oob_line, "   top attributes:"]
    lines += [f"     {a}: {v:.4f}" for a, v in zip(top.attribute, top.importance)]
    lines.append(f"💾 forest: {args.out}")
    out.emit(record, lines)
    return 0


def _model_classes(net, forest, ds: Dataset) -> List[str]:
    """Class names the model's output indices refer to; the predict file's own only for old model files."""
    if forest is not None:
        return forest.class_names or ds.class_names
    return net.class_names or ds.class_names


def cmd_predict(args, out: Output) -> int:
    if not args.checkpoint and not args.forest:
        raise EvaluationError("predict needs --checkpoint, --forest or both")
    ds = load_dataset(args.dataset, args.class_attribute)
    forest = load_forest(args.forest) if args.forest else None
    net = load_checkpoint(args.checkpoint) if args.checkpoint else None
    model_classes = _model_classes(net, forest, ds)
    if net is not None:
        ds = ds.recode_nominals(net.nominal_values)
        inputs = (net.preprocessor or Preprocessor.fit(ds)).transform(ds)
        if forest is not None:
            predictions = predict_forest(forest, extract_features(net, inputs).values)
        else:
            predictions = predict_dcnn(net, inputs)
    else:
        ds = ds.recode_nominals(forest.nominal_values)
        predictions = predict_forest(forest, _forest_matrix(ds))

    if predictions.max() >= len(model_classes):
        raise EvaluationError(f"{args.dataset}: model predicts class {predictions.max()} "
                              f"but only {len(model_classes)} class names are known")
    names = [model_classes[p] for p in predictions]
    actual = [ds.class_names[y] for y in ds.labels]
    codes = {name: i for i, name in enumerate(model_classes)}
    score = accuracy(predictions, [codes.get(name, -1) for name in actual])
    if args.out:
        pd.DataFrame({'row': np.arange(ds.n), 'predicted': names, 'actual': actual}).to_csv(args.out, index=False)
    record = {'command': 'predict', 'dataset': ds.name, 'predictions': names, 'accuracy': score,
              'output': args.out}
    lines = [] if args.out else [f"{i},{name}" for i, name in enumerate(names)]
    lines.append(f"📊 accuracy against the file's labels: {100 * score:.2f}%")
    out.emit(record, lines)
    return 0


def cmd_experiment(args, out: Output) -> int:
    result = run_experiment_suite(args.manifest, out_dir=args.out, threads=_threads(args),
                                  whole_dataset_network=True if args.whole_dataset_network else None, progress=_progress(args))
    record = {'command': 'experiment', 'tables': result.tables_path, 'cells': len(result.reports),
              'failures': [f.__dict__ for f in result.failures]}
    lines = [f"📊 {len(result.reports)} cells reported, {len(result.failures)} failed",
             f"   tables: {result.tables_path}"]
    out.emit(record, lines)
    return 0 if result.any_succeeded else 1


def cmd_ttest(args, out: Output) -> int:
    if args.reports:
        first, second = (load_report(p) for p in args.reports)
        a, b = first.per_fold_accuracy, second.per_fold_accuracy
    elif args.a is not None and args.b is not None:
        a, b = args.a, args.b
    else:
        raise EvaluationError("ttest needs --a and --b, or --reports FIRST SECOND")
    result = paired_ttest(a, b)
    crit = critical_t(result.df)
    record = {'command': 'ttest', **result.to_dict(), 'critical_t_05': crit}
    out.emit(record, [f"t = {result.t:.4f}, df = {result.df}, p = {result.p_value:.4f} "
                      f"(|t| critical at 0.05: {crit:.3f})",
                      f"mean difference {result.mean_difference:.6f}; "
                      f"{'significant' if result.significant_at_05 else 'not significant'} at 0.05"])
    return 0


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument('--seed', type=int, default=default(None), help=f"run seed (default {SEED})")
    parser.add_argument('--threads', type=int, default=default(None),
                        help="worker threads for tree growing (default: physical cores)")
    parser.add_argument('--json', action='store_true', default=default(False),
                        help="print one JSON record on stdout; logs go to stderr")
    parser.add_argument('--verbose', action='store_true', default=default(False), help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dcnnfrf',
                                     description="Convolutional feature extraction + fast random forest classifier.")
    _add_global_flags(parser, suppress=False)
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    def add(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text, description=help_text)
        _add_global_flags(sub, suppress=True)
        sub.set_defaults(handler=handler)
        return sub

    sub = add('inspect', cmd_inspect, "Summarise a dataset: size, classes, missing cells, grid shape.")
    sub.add_argument('dataset', help="ARFF or CSV file")
    sub.add_argument('--class', dest='class_attribute', help="class attribute/column (default: last nominal / last)")

    sub = add('train-dcnn', cmd_train, "Train the convolutional network on a whole dataset and save a checkpoint.")
    sub.add_argument('dataset', help="ARFF or CSV file")
    sub.add_argument('--class', dest='class_attribute', help="class attribute/column")
    group = sub.add_mutually_exclusive_group()
    group.add_argument('--preset', default='paper-small', help="network preset from config.json (default paper-small)")
    group.add_argument('--config', help="YAML network config file")
    sub.add_argument('--epochs', type=int, help="override the epoch count")
    sub.add_argument('--learning-rate', type=float, help="override the learning rate")
    sub.add_argument('--batch-size', type=int, help="override the minibatch size")
    sub.add_argument('--upsample', type=_upsample, help="input upsampling factor or 'auto'")
    sub.add_argument('--out', required=True, help="checkpoint path")

    sub = add('extract', cmd_extract, "Write dense-layer features of a dataset to CSV (f0..f{k-1},class).")
    sub.add_argument('checkpoint', help="checkpoint from train-dcnn")
    sub.add_argument('dataset', help="ARFF or CSV file")
    sub.add_argument('--class', dest='class_attribute', help="class attribute/column")
    sub.add_argument('--out', required=True, help="feature CSV path")

    sub = add('train-frf', cmd_forest, "Fit the fast random forest on features or raw attributes.")
    sub.add_argument('input', help="feature CSV from extract, or any ARFF/CSV dataset")
    sub.add_argument('--class', dest='class_attribute', help="class attribute/column")
    sub.add_argument('--trees', type=int, default=ForestConfig().n_trees, help="number of trees")
    sub.add_argument('--mtry', type=_mtry, help="attributes per split: integer, 'formula' or 'reference-table'")
    sub.add_argument('--min-leaf', type=int, default=ForestConfig().min_leaf, help="minimum leaf weight")
    sub.add_argument('--max-depth', type=int, default=ForestConfig().max_depth, help="depth limit (default none)")
    sub.add_argument('--importance', help="write the attribute importance table to this CSV")
    sub.add_argument('--out', required=True, help="forest model path (JSON)")

    sub = add('predict', cmd_predict, "Predict class names with a checkpoint, a forest, or both chained.")
    sub.add_argument('dataset', help="ARFF or CSV file")
    sub.add_argument('--class', dest='class_attribute', help="class attribute/column")
    sub.add_argument('--checkpoint', help="checkpoint from train-dcnn")
    sub.add_argument('--forest', help="forest model from train-frf")
    sub.add_argument('--out', help="write row,predicted,actual CSV here instead of printing")

    sub = add('experiment', cmd_experiment, "Run a cross-validation manifest and write the report bundle.")
    sub.add_argument('manifest', help="experiment manifest (YAML)")
    sub.add_argument('--out', default=REPORT_DIR, help=f"report directory (default {REPORT_DIR})")
    sub.add_argument('--whole-dataset-network', action='store_true',
                     help="train the network once on all rows, cross-validate only the forest stage")

    sub = add('ttest', cmd_ttest, "Two-sided paired t-test of two accuracy samples.")
    sub.add_argument('--a', type=_accuracies, help="comma-separated accuracies of the first pipeline")
    sub.add_argument('--b', type=_accuracies, help="comma-separated accuracies of the second pipeline")
    sub.add_argument('--reports', nargs=2, metavar=('FIRST', 'SECOND'),
                     help="two report JSON files; their per-fold accuracies are paired")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.json)
    out = Output(args.json)
    try:
        return args.handler(args, out)
    except USER_ERRORS as e:
        logger.error(f"❌ {e}")
        if args.json:
            print(json.dumps({'command': args.command, 'error': str(e), 'exit_code': 1}, sort_keys=True))
        return 1
    except Exception as e:
        logger.exception(f"❌ Internal error in {args.command}: {e}")
        if args.json:
            print(json.dumps({'command': args.command, 'error': str(e), 'exit_code': 2}, sort_keys=True))
        return 2


if __name__ == '__main__':
    sys.exit(main())
