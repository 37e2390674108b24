"""
Tabular dataset container plus ARFF / CSV readers and an ARFF writer.

Only the ARFF subset used by the benchmark files is understood:
@relation, numeric/real/integer and {nominal} attributes, dense @data rows,
'?' for missing cells and '%' comment lines. Keywords are case-insensitive.
"""

import os
import re
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger('dcnnfrf.data')

NUMERIC = 'numeric'
NOMINAL = 'nominal'
MISSING_TOKEN = '?'

_ATTRIBUTE_RE = re.compile(r"^@attribute\s+('[^']*'|\"[^\"]*\"|\S+)\s+(.+)$", re.IGNORECASE)
_NUMERIC_TYPES = ('numeric', 'real', 'integer')


class DatasetError(ValueError):
    """Base class for dataset parsing and validation failures."""


class MalformedHeader(DatasetError):
    pass


class UnknownNominalValue(DatasetError):
    pass


class RowArityMismatch(DatasetError):
    pass


class InvalidValue(DatasetError):
    pass


class EmptyFile(DatasetError):
    pass


@dataclass
class Dataset:
    """n x d real-valued instances, class indices and attribute metadata.

    Missing cells hold NaN until imputation and are flagged in ``missing_mask``.
    Nominal non-class attributes are integer codes into ``nominal_values[j]``.
    """
    name: str
    instances: np.ndarray
    labels: np.ndarray
    attribute_names: List[str]
    class_names: List[str]
    missing_mask: np.ndarray = None
    attribute_kinds: List[str] = None
    nominal_values: Dict[int, List[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.instances.ndim != 2:
            raise DatasetError(f"{self.name}: instances must be a 2-D matrix, got shape {self.instances.shape}")
        n, d = self.instances.shape
        if self.missing_mask is None:
            self.missing_mask = np.zeros((n, d), dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.attribute_kinds is None:
            self.attribute_kinds = [NUMERIC] * d

        if n < 1 or d < 1:
            raise DatasetError(f"{self.name}: need at least one instance and one attribute (got n={n}, d={d})")
        if len(self.class_names) < 2:
            raise DatasetError(f"{self.name}: need at least two classes, got {self.class_names}")
        if self.labels.shape != (n,):
            raise DatasetError(f"{self.name}: {len(self.labels)} labels for {n} instances")
        if len(self.attribute_names) != d or len(self.attribute_kinds) != d:
            raise DatasetError(f"{self.name}: attribute metadata does not match {d} columns")
        if self.missing_mask.shape != (n, d):
            raise DatasetError(f"{self.name}: missing mask shape {self.missing_mask.shape} != {(n, d)}")
        c = len(self.class_names)
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise DatasetError(f"{self.name}: label index outside [0, {c})")
        if not np.all(np.isfinite(self.instances[~self.missing_mask])):
            raise DatasetError(f"{self.name}: non-finite value in an observed cell")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def d(self) -> int:
        return self.instances.shape[1]

    @property
    def c(self) -> int:
        return len(self.class_names)

    @property
    def missing_count(self) -> int:
        return int(self.missing_mask.sum())

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.c)

    def subset(self, rows: Sequence[int]) -> 'Dataset':
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            name=self.name,
            instances=self.instances[rows].copy(),
            labels=self.labels[rows].copy(),
            attribute_names=list(self.attribute_names),
            class_names=list(self.class_names),
            missing_mask=self.missing_mask[rows].copy(),
            attribute_kinds=list(self.attribute_kinds),
            nominal_values=dict(self.nominal_values),
        )

    def with_instances(self, instances: np.ndarray, missing_mask: Optional[np.ndarray] = None) -> 'Dataset':
        """Same metadata and labels over a replacement instance matrix."""
        return Dataset(
            name=self.name,
            instances=instances,
            labels=self.labels.copy(),
            attribute_names=list(self.attribute_names),
            class_names=list(self.class_names),
            missing_mask=self.missing_mask.copy() if missing_mask is None else missing_mask,
            attribute_kinds=list(self.attribute_kinds),
            nominal_values=dict(self.nominal_values),
        )

    def recode_nominals(self, tables: Dict[int, List[str]]) -> 'Dataset':
        """Re-express nominal attribute codes against another file's value tables.

        Codes depend on the values a file declares (ARFF) or contains (CSV),
        so a model trained on one file needs its own tables applied to the next.
        """
        if not tables:
            return self
        instances = self.instances.copy()
        nominal_values = dict(self.nominal_values)
        for j, values in sorted(tables.items()):
            if j >= self.d or j not in self.nominal_values:
                raise UnknownNominalValue(
                    f"{self.name}: attribute {j} was nominal in the training data but is not nominal here")
            target = {v: k for k, v in enumerate(values)}
            column = instances[:, j]
            observed = ~self.missing_mask[:, j]
            recoded = []
            for code in column[observed]:
                value = self.nominal_values[j][int(code)]
                if value not in target:
                    raise UnknownNominalValue(
                        f"{self.name}: value '{value}' of attribute '{self.attribute_names[j]}' "
                        f"was not seen in training")
                recoded.append(target[value])
            column[observed] = recoded
            nominal_values[j] = list(values)
        recoded_ds = self.with_instances(instances)
        recoded_ds.nominal_values = nominal_values
        return recoded_ds


def _unquote(token: str) -> str:
    token = token.strip()
    if len(token) >= 2 and token[0] == token[-1] and token[0] in ("'", '"'):
        return token[1:-1]
    return token


def _split_fields(text: str) -> List[str]:
    """Comma-separated fields; commas inside single or double quotes do not split."""
    if "'" not in text and '"' not in text:
        return text.split(',')
    fields, current, quote = [], [], None
    for ch in text:
        if quote:
            if ch == quote:
                quote = None
        elif ch in ("'", '"') and not ''.join(current).strip():
            quote = ch
        elif ch == ',':
            fields.append(''.join(current))
            current = []
            continue
        current.append(ch)
    fields.append(''.join(current))
    return fields


def _parse_nominal_spec(spec: str, path: str, line_no: int) -> List[str]:
    spec = spec.strip()
    if not (spec.startswith('{') and spec.endswith('}')):
        raise MalformedHeader(f"{path}:{line_no}: unsupported attribute type '{spec}'")
    values = [_unquote(v) for v in _split_fields(spec[1:-1])]
    values = [v for v in values if v != '']
    if not values:
        raise MalformedHeader(f"{path}:{line_no}: nominal attribute declares no values")
    return values


def _read_arff_header(lines, path):
    relation = None
    attributes = []  # (name, kind, values)
    data_start = None
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith('%'):
            continue
        lowered = line.lower()
        if lowered.startswith('@relation'):
            parts = line.split(None, 1)
            relation = _unquote(parts[1]) if len(parts) > 1 else ''
        elif lowered.startswith('@attribute'):
            match = _ATTRIBUTE_RE.match(line)
            if match is None:
                raise MalformedHeader(f"{path}:{line_no}: cannot parse attribute declaration")
            name = _unquote(match.group(1))
            type_spec = match.group(2).strip()
            if type_spec.lower() in _NUMERIC_TYPES:
                attributes.append((name, NUMERIC, None))
            else:
                attributes.append((name, NOMINAL, _parse_nominal_spec(type_spec, path, line_no)))
        elif lowered.startswith('@data'):
            data_start = line_no
            break
        else:
            raise MalformedHeader(f"{path}:{line_no}: unexpected header line '{line[:40]}'")

    if relation is None:
        raise MalformedHeader(f"{path}: missing @relation")
    if not attributes:
        raise MalformedHeader(f"{path}: missing @attribute declarations")
    if data_start is None:
        raise MalformedHeader(f"{path}: missing @data section")
    return relation, attributes, data_start


def _pick_class_index(attributes, class_attribute, path) -> int:
    if class_attribute is not None:
        for j, (name, _, _) in enumerate(attributes):
            if name == class_attribute:
                if attributes[j][1] != NOMINAL:
                    raise MalformedHeader(f"{path}: class attribute '{class_attribute}' is not nominal")
                return j
        raise MalformedHeader(f"{path}: class attribute '{class_attribute}' not declared")
    for j in range(len(attributes) - 1, -1, -1):
        if attributes[j][1] == NOMINAL:
            return j
    raise MalformedHeader(f"{path}: no nominal attribute to use as class")


def load_arff(path: str, class_attribute: Optional[str] = None) -> Dataset:
    """Parse an ARFF file into a Dataset."""
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()

    relation, attributes, data_start = _read_arff_header(lines, path)
    class_idx = _pick_class_index(attributes, class_attribute, path)
    class_names = attributes[class_idx][2]
    class_lookup = {v: k for k, v in enumerate(class_names)}
    feature_idx = [j for j in range(len(attributes)) if j != class_idx]
    lookups = {j: {v: k for k, v in enumerate(attributes[j][2])}
                for j in feature_idx if attributes[j][1] == NOMINAL}

    rows, mask_rows, labels = [], [], []
    dropped = 0
    for line_no in range(data_start + 1, len(lines) + 1):
        line = lines[line_no - 1].strip()
        if not line or line.startswith('%'):
            continue
        if line.startswith('{'):
            raise MalformedHeader(f"{path}:{line_no}: sparse ARFF rows are not supported")
        cells = [_unquote(c) for c in _split_fields(line)]
        if len(cells) != len(attributes):
            raise RowArityMismatch(
                f"{path}:{line_no}: expected {len(attributes)} values, found {len(cells)}")

        class_cell = cells[class_idx]
        if class_cell == MISSING_TOKEN:
            dropped += 1
            continue
        if class_cell not in class_lookup:
            raise UnknownNominalValue(
                f"{path}:{line_no}: class value '{class_cell}' not in {class_names}")

        values, missing = [], []
        for j in feature_idx:
            cell = cells[j]
            if cell == MISSING_TOKEN:
                values.append(np.nan)
                missing.append(True)
                continue
            missing.append(False)
            if j in lookups:
                if cell not in lookups[j]:
                    raise UnknownNominalValue(
                        f"{path}:{line_no}: value '{cell}' not declared for attribute '{attributes[j][0]}'")
                values.append(float(lookups[j][cell]))
            else:
                try:
                    values.append(float(cell))
                except ValueError:
                    raise InvalidValue(
                        f"{path}:{line_no}: '{cell}' is not numeric for attribute '{attributes[j][0]}'")
        rows.append(values)
        mask_rows.append(missing)
        labels.append(class_lookup[class_cell])

    if dropped:
        logger.warning(f"⚠️ {path}: dropped {dropped} rows with a missing class value")
    if not rows:
        raise EmptyFile(f"{path}: no data rows")

    d = len(feature_idx)
    dataset = Dataset(
        name=relation or os.path.splitext(os.path.basename(path))[0],
        instances=np.array(rows, dtype=np.float64).reshape(len(rows), d),
        labels=np.array(labels, dtype=np.int64),
        attribute_names=[attributes[j][0] for j in feature_idx],
        class_names=list(class_names),
        missing_mask=np.array(mask_rows, dtype=bool).reshape(len(rows), d),
        attribute_kinds=[attributes[j][1] for j in feature_idx],
        nominal_values={k: list(attributes[j][2]) for k, j in enumerate(feature_idx) if j in lookups},
    )
    logger.info(f"📂 Loaded {path}: n={dataset.n}, d={dataset.d}, c={dataset.c}, missing={dataset.missing_count}")
    return dataset


def _sorted_values(values) -> List[str]:
    """Sort distinct tokens numerically when they all parse as numbers."""
    distinct = list(dict.fromkeys(values))
    try:
        return sorted(distinct, key=float)
    except ValueError:
        return sorted(distinct)


def load_csv(path: str, class_column: Optional[str] = None) -> Dataset:
    """Parse a headed CSV file; the last column is the class unless ``class_column`` names one."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True, index_col=False)
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path}: file is empty")
    except pd.errors.ParserError as e:
        raise RowArityMismatch(f"{path}: {e}")

    if frame.shape[0] == 0:
        raise EmptyFile(f"{path}: header present but no data rows")
    short = frame.isna().any(axis=1)
    if short.any():
        row = int(np.flatnonzero(short.to_numpy())[0])
        raise RowArityMismatch(f"{path}:{row + 2}: row has fewer values than the header")

    frame.columns = [str(c).strip() for c in frame.columns]
    frame = frame.apply(lambda col: col.str.strip())
    if class_column is None:
        class_column = frame.columns[-1]
    elif class_column not in frame.columns:
        raise MalformedHeader(f"{path}: class column '{class_column}' not in header")

    class_cells = frame[class_column]
    keep = class_cells != ''
    if not keep.all():
        logger.warning(f"⚠️ {path}: dropped {int((~keep).sum())} rows with an empty class cell")
        frame = frame[keep].reset_index(drop=True)
        class_cells = frame[class_column]
    if frame.shape[0] == 0:
        raise EmptyFile(f"{path}: no labelled rows")

    class_names = _sorted_values(class_cells.tolist())
    class_lookup = {v: k for k, v in enumerate(class_names)}

    feature_columns = [c for c in frame.columns if c != class_column]
    n, d = frame.shape[0], len(feature_columns)
    instances = np.full((n, d), np.nan, dtype=np.float64)
    missing = np.zeros((n, d), dtype=bool)
    kinds, nominal_values = [], {}
    for j, column in enumerate(feature_columns):
        cells = frame[column]
        empty = (cells == '') | (cells == MISSING_TOKEN)
        missing[:, j] = empty.to_numpy()
        numeric = pd.to_numeric(cells[~empty], errors='coerce')
        if not numeric.isna().any():
            kinds.append(NUMERIC)
            instances[~missing[:, j], j] = numeric.to_numpy(dtype=np.float64)
        else:
            kinds.append(NOMINAL)
            values = _sorted_values(cells[~empty].tolist())
            nominal_values[j] = values
            codes = {v: k for k, v in enumerate(values)}
            instances[~missing[:, j], j] = [codes[v] for v in cells[~empty]]

    dataset = Dataset(
        name=os.path.splitext(os.path.basename(path))[0],
        instances=instances,
        labels=np.array([class_lookup[v] for v in class_cells], dtype=np.int64),
        attribute_names=feature_columns,
        class_names=class_names,
        missing_mask=missing,
        attribute_kinds=kinds,
        nominal_values=nominal_values,
    )
    logger.info(f"📂 Loaded {path}: n={dataset.n}, d={dataset.d}, c={dataset.c}, missing={dataset.missing_count}")
    return dataset


def load_dataset(path: str, class_attribute: Optional[str] = None) -> Dataset:
    """Dispatch on file extension."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    extension = os.path.splitext(path)[1].lower()
    if extension == '.arff':
        return load_arff(path, class_attribute)
    if extension in ('.csv', '.txt'):
        return load_csv(path, class_attribute)
    raise DatasetError(f"{path}: unsupported extension '{extension}' (expected .arff or .csv)")


def _quote(token: str) -> str:
    if token and not re.search(r"[\s,{}%'\"]", token):
        return token
    quote = '"' if "'" in token else "'"
    return f"{quote}{token}{quote}"


def _nominal_type(values: Sequence[str]) -> str:
    return '{' + ','.join(_quote(v) for v in values) + '}'


def write_arff(ds: Dataset, path: str) -> None:
    """Write ``ds`` in the ARFF subset understood by ``load_arff``.

    Numeric cells use repr() so the float64 values survive a reload bit-for-bit.
    The class attribute is written last, renamed if a feature is already called 'class'.
    """
    class_attribute = 'class'
    while class_attribute in ds.attribute_names:
        class_attribute += '_'
    lines = [f"@relation {_quote(ds.name)}", ""]
    for j, name in enumerate(ds.attribute_names):
        if ds.attribute_kinds[j] == NOMINAL:
            lines.append(f"@attribute {_quote(name)} {_nominal_type(ds.nominal_values[j])}")
        else:
            lines.append(f"@attribute {_quote(name)} numeric")
    lines.append(f"@attribute {class_attribute} {_nominal_type(ds.class_names)}")
    lines.extend(["", "@data"])

    for i in range(ds.n):
        cells = []
        for j in range(ds.d):
            if ds.missing_mask[i, j]:
                cells.append(MISSING_TOKEN)
            elif ds.attribute_kinds[j] == NOMINAL:
                cells.append(_quote(ds.nominal_values[j][int(ds.instances[i, j])]))
            else:
                cells.append(repr(float(ds.instances[i, j])))
        cells.append(_quote(ds.class_names[ds.labels[i]]))
        lines.append(','.join(cells))

    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')
    logger.debug(f"💾 Wrote {ds.n} rows to {path}")
