"""Annotation datasets: in-memory representation, CSV/JSON ingestion and
writing, redundancy subsampling and instance-level splits.

Ground-truth labels are deliberately *not* part of :class:`AnnotationDataset`.
They live in :class:`GroundTruth`, which only evaluation code consumes, so
nothing on the training path can read them by accident.

In multi-label mode every annotation also names a task (a label in the
catalog); the latent unit is then the pair (instance, task).  Units are
numbered ``instance * num_tasks + task``, which reduces to the instance index
in the ordinary single-label case.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class Instance:
    instance_id: str
    features: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Predictor:
    predictor_id: str
    representation: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Annotation:
    instance_id: str
    predictor_id: str
    hard_label: int
    soft_label: Optional[np.ndarray] = None
    task: Optional[str] = None


def _int_array(values):
    return np.asarray(values, dtype=np.int64).reshape(-1)


@dataclass(frozen=True, eq=False)
class AnnotationDataset:
    num_classes: int
    instance_ids: tuple
    predictor_ids: tuple
    ann_instance: np.ndarray
    ann_predictor: np.ndarray
    ann_label: np.ndarray
    soft_labels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    predictor_features: Optional[np.ndarray] = None
    class_names: tuple = ()
    ann_task: Optional[np.ndarray] = None
    task_names: Optional[tuple] = None
    name: str = "dataset"

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("instance_ids", tuple(str(i) for i in self.instance_ids))
        set_("predictor_ids", tuple(str(p) for p in self.predictor_ids))
        set_("ann_instance", _int_array(self.ann_instance))
        set_("ann_predictor", _int_array(self.ann_predictor))
        set_("ann_label", _int_array(self.ann_label))
        if not self.class_names:
            set_("class_names", tuple(str(k) for k in range(self.num_classes)))
        else:
            set_("class_names", tuple(str(c) for c in self.class_names))
        if self.task_names is not None:
            set_("task_names", tuple(str(t) for t in self.task_names))
            task = self.ann_task if self.ann_task is not None else np.zeros(len(self.ann_label))
            set_("ann_task", _int_array(task))
        else:
            set_("ann_task", None)
        for key in ("soft_labels", "features", "predictor_features"):
            value = getattr(self, key)
            if value is not None:
                value = np.array(value, dtype=np.float64)
                value.setflags(write=False)
                set_(key, value)
        for key in ("ann_instance", "ann_predictor", "ann_label", "ann_task"):
            value = getattr(self, key)
            if value is not None:
                value.setflags(write=False)
        self._validate()

    def _validate(self):
        c = self.num_classes
        if c < 2:
            raise ValidationError(f"need at least 2 classes, got {c}")
        if len(self.class_names) != c:
            raise ValidationError(f"class catalog has {len(self.class_names)} names for {c} classes")
        n, m, a = self.num_instances, self.num_predictors, len(self.ann_label)
        if len(set(self.instance_ids)) != n:
            raise ValidationError("duplicate instance ids")
        if len(set(self.predictor_ids)) != m:
            raise ValidationError("duplicate predictor ids")
        if not (len(self.ann_instance) == len(self.ann_predictor) == a):
            raise ValidationError("annotation arrays have different lengths")
        if a:
            if self.ann_instance.min() < 0 or self.ann_instance.max() >= n:
                raise ValidationError("annotation references an unknown instance")
            if self.ann_predictor.min() < 0 or self.ann_predictor.max() >= m:
                raise ValidationError("annotation references an unknown predictor")
            bad = np.flatnonzero((self.ann_label < 0) | (self.ann_label >= c))
            if bad.size:
                raise ValidationError(
                    f"annotation {bad[0]} has label {self.ann_label[bad[0]]} outside [0, {c})"
                )
        if self.ann_task is not None:
            t = len(self.task_names)
            if t < 1:
                raise ValidationError("multi-label dataset needs at least one task")
            if len(self.ann_task) != a or (a and (self.ann_task.min() < 0 or self.ann_task.max() >= t)):
                raise ValidationError("annotation references an unknown task")
        keys = self.ann_unit * m + self.ann_predictor
        if np.unique(keys).size != a:
            raise ValidationError("duplicate (instance, predictor) annotation pair")
        if self.soft_labels is not None:
            s = self.soft_labels
            if s.shape != (a, c):
                raise ValidationError(f"soft labels must have shape {(a, c)}, got {s.shape}")
            if np.any(s < -SIMPLEX_TOL) or np.any(np.abs(s.sum(axis=1) - 1) > SIMPLEX_TOL):
                raise ValidationError("soft label is not a probability vector")
            if a:
                top = s.max(axis=1)
                hit = s[np.arange(a), self.ann_label]
                if np.any(hit < top - SIMPLEX_TOL):
                    raise ValidationError("soft label argmax disagrees with hard label")
        for key, rows in (("features", n), ("predictor_features", m)):
            value = getattr(self, key)
            if value is None:
                continue
            if value.ndim != 2 or value.shape[0] != rows:
                raise ValidationError(f"{key} must have one row per entity, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValidationError(f"{key} contains non-finite values")

    @property
    def num_instances(self):
        return len(self.instance_ids)

    @property
    def num_predictors(self):
        return len(self.predictor_ids)

    @property
    def num_annotations(self):
        return len(self.ann_label)

    @property
    def multi_label(self):
        return self.task_names is not None

    @property
    def num_tasks(self):
        return len(self.task_names) if self.multi_label else 1

    @property
    def num_units(self):
        return self.num_instances * self.num_tasks

    @property
    def ann_unit(self):
        if self.ann_task is None:
            return self.ann_instance
        return self.ann_instance * self.num_tasks + self.ann_task

    @property
    def ann_predictor_unit(self):
        if self.ann_task is None:
            return self.ann_predictor
        return self.ann_predictor * self.num_tasks + self.ann_task

    def annotation_counts(self):
        """Number of annotations per unit."""
        return np.bincount(self.ann_unit, minlength=self.num_units)

    def instances(self):
        for i, iid in enumerate(self.instance_ids):
            yield Instance(iid, None if self.features is None else self.features[i])

    def predictors(self):
        for j, pid in enumerate(self.predictor_ids):
            rep = None if self.predictor_features is None else self.predictor_features[j]
            yield Predictor(pid, rep)

    def annotations(self):
        for a in range(self.num_annotations):
            yield Annotation(
                self.instance_ids[self.ann_instance[a]],
                self.predictor_ids[self.ann_predictor[a]],
                int(self.ann_label[a]),
                None if self.soft_labels is None else self.soft_labels[a],
                None if self.ann_task is None else self.task_names[self.ann_task[a]],
            )

    def replace(self, **changes):
        fields = dict(
            num_classes=self.num_classes, instance_ids=self.instance_ids,
            predictor_ids=self.predictor_ids, ann_instance=self.ann_instance,
            ann_predictor=self.ann_predictor, ann_label=self.ann_label,
            soft_labels=self.soft_labels, features=self.features,
            predictor_features=self.predictor_features, class_names=self.class_names,
            ann_task=self.ann_task, task_names=self.task_names, name=self.name,
        )
        fields.update(changes)
        return AnnotationDataset(**fields)

    def select_annotations(self, index):
        """Dataset restricted to the given annotation rows (order preserved)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        index = np.sort(index)
        return self.replace(
            ann_instance=self.ann_instance[index],
            ann_predictor=self.ann_predictor[index],
            ann_label=self.ann_label[index],
            soft_labels=None if self.soft_labels is None else self.soft_labels[index],
            ann_task=None if self.ann_task is None else self.ann_task[index],
        )

    def without_annotations(self):
        return self.select_annotations(np.zeros(0, dtype=np.int64))

    def select_instances(self, index):
        """Dataset over a subset of instances; their annotations follow them."""
        index = np.sort(np.asarray(index, dtype=np.int64))
        remap = np.full(self.num_instances, -1, dtype=np.int64)
        remap[index] = np.arange(index.size)
        keep = np.flatnonzero(remap[self.ann_instance] >= 0)
        sub = self.select_annotations(keep)
        return sub.replace(
            instance_ids=tuple(self.instance_ids[i] for i in index),
            ann_instance=remap[sub.ann_instance],
            features=None if self.features is None else self.features[index],
        )

    def equals(self, other, atol=1e-12):
        """Field-for-field comparison (floats within ``atol``)."""
        if not isinstance(other, AnnotationDataset):
            return False
        scalars = ("num_classes", "instance_ids", "predictor_ids", "class_names", "task_names")
        if any(getattr(self, k) != getattr(other, k) for k in scalars):
            return False
        for k in ("ann_instance", "ann_predictor", "ann_label", "ann_task"):
            x, y = getattr(self, k), getattr(other, k)
            if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
                return False
        for k in ("soft_labels", "features", "predictor_features"):
            x, y = getattr(self, k), getattr(other, k)
            if (x is None) != (y is None):
                return False
            if x is not None and (x.shape != y.shape or not np.allclose(x, y, rtol=0, atol=atol)):
                return False
        return True


@dataclass
class GroundTruth:
    """True labels keyed by ``(instance_id, task)``; task is ``""`` for
    single-label data.  Only evaluation code should touch this."""

    labels: dict = field(default_factory=dict)

    def aligned(self, dataset):
        """Unit-ordered label array, ``-1`` where no truth is known."""
        out = np.full(dataset.num_units, -1, dtype=np.int64)
        tasks = dataset.task_names if dataset.multi_label else ("",)
        for i, iid in enumerate(dataset.instance_ids):
            for t, task in enumerate(tasks):
                label = self.labels.get((iid, task))
                if label is not None:
                    out[i * len(tasks) + t] = label
        return out

    @classmethod
    def from_array(cls, dataset, labels):
        tasks = dataset.task_names if dataset.multi_label else ("",)
        out = {}
        for u, label in enumerate(np.asarray(labels)):
            if label >= 0:
                out[(dataset.instance_ids[u // len(tasks)], tasks[u % len(tasks)])] = int(label)
        return cls(out)


# ---------------------------------------------------------------------------
# Reading


def _read_records(path, ragged_ok=False):
    """Yield ``(line_number, header, row_dict)``; CSV or a JSON array of records.

    With ``ragged_ok`` a CSV row of the wrong width is yielded with the key
    ``__ragged__`` set instead of raising.
    """
    path = os.fspath(path)
    if path.lower().endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            try:
                records = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", path, exc.lineno) from exc
        if not isinstance(records, list):
            raise ParseError("expected a JSON array of records", path)
        header = list(records[0].keys()) if records else []
        for n, rec in enumerate(records, start=1):
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", path, n)
            yield n, header, {k: ("" if v is None else v) for k, v in rec.items()}
        return
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file (missing header)", path, 1) from None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                if ragged_ok:
                    yield line, header, {"__ragged__": True}
                    continue
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line)
            yield line, header, dict(zip(header, (c.strip() for c in row)))


def _vector_columns(header, prefix):
    cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
    expected = [f"{prefix}{k}" for k in range(len(cols))]
    if sorted(cols, key=lambda h: int(h[len(prefix):])) != expected:
        raise ParseError(f"columns {prefix}0..{prefix}{len(cols) - 1} must be contiguous")
    return expected


def _float(value, path, line, what):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"{what}: cannot parse {value!r} as a number", path, line) from None
    if not np.isfinite(out):
        raise ParseError(f"{what}: non-finite value {value!r}", path, line)
    return out


def _read_table(path, id_field, prefix):
    """Read an id + vector file.  Returns (ids, matrix or None)."""
    ids, rows = [], []
    columns = None
    for line, header, rec in _read_records(path, ragged_ok=True):
        if rec.get("__ragged__"):
            raise ValidationError(f"{path}:{line}: ragged vector (row width differs from header)")
        if columns is None:
            if id_field not in header:
                raise ParseError(f"missing {id_field!r} column", path, 1)
            try:
                columns = _vector_columns(header, prefix)
            except ParseError as exc:
                raise ParseError(str(exc), path, 1) from None
        missing = [c for c in columns if c not in rec]
        if missing or id_field not in rec:
            raise ParseError(f"record lacks fields {missing or [id_field]}", path, line)
        if any(rec.get(c, "") == "" for c in columns) or len(rec) - 1 != len(columns):
            raise ValidationError(f"{path}:{line}: ragged vector (expected {len(columns)} values)")
        ids.append(str(rec[id_field]))
        rows.append([_float(rec[c], path, line, c) for c in columns])
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate {id_field}")
    if not columns:
        return ids, None
    return ids, np.array(rows, dtype=np.float64).reshape(len(ids), len(columns))


def _is_int(text):
    try:
        int(text)
    except (TypeError, ValueError):
        return False
    return True


def load_dataset(annotations_path, features_path=None, predictors_path=None,
                 num_classes=None, class_names=None, name=None):
    """Read and validate an annotation dataset.

    Class labels are mapped to indices as follows: with ``class_names`` given,
    by lookup in that catalog; if every label is an integer literal, the label
    *is* the index (``num_classes`` then bounds it); otherwise labels are
    catalogued in first-seen order.
    """
    path = os.fspath(annotations_path)
    raw = []
    soft_cols = None
    has_task = False
    for line, header, rec in _read_records(path):
        if soft_cols is None:
            for req in ("instance_id", "predictor_id", "label"):
                if req not in header:
                    raise ParseError(f"missing {req!r} column", path, 1)
            try:
                soft_cols = _vector_columns(header, "p_")
            except ParseError as exc:
                raise ParseError(str(exc), path, 1) from None
            has_task = "task" in header
        for req in ("instance_id", "predictor_id", "label"):
            if str(rec.get(req, "")) == "":
                raise ParseError(f"empty {req!r} field", path, line)
        soft = None
        if soft_cols:
            if any(str(rec.get(c, "")) == "" for c in soft_cols):
                raise ParseError("soft-label columns are all-or-none", path, line)
            soft = [_float(rec[c], path, line, c) for c in soft_cols]
        task = str(rec.get("task", "")) if has_task else None
        if has_task and task == "":
            raise ParseError("empty 'task' field", path, line)
        raw.append((line, str(rec["instance_id"]), str(rec["predictor_id"]), str(rec["label"]), soft, task))

    labels = [r[3] for r in raw]
    if class_names is not None:
        catalog = [str(c) for c in class_names]
        lookup = {c: k for k, c in enumerate(catalog)}
        if num_classes is not None and num_classes != len(catalog):
            raise ValidationError("num_classes disagrees with class_names")
        num_classes = len(catalog)
    elif labels and all(_is_int(x) for x in labels):
        if num_classes is None:
            num_classes = max(2, max(int(x) for x in labels) + 1)
        catalog = [str(k) for k in range(num_classes)]
        lookup = None
    else:
        catalog = list(dict.fromkeys(labels))
        if num_classes is None:
            num_classes = max(2, len(catalog))
        if len(catalog) > num_classes:
            raise ValidationError(
                f"{path}: found {len(catalog)} distinct labels but num_classes={num_classes}"
            )
        catalog += [f"unused_{k}" for k in range(len(catalog), num_classes)]
        lookup = {c: k for k, c in enumerate(catalog)}

    if soft_cols and len(soft_cols) != num_classes:
        raise ValidationError(f"{path}: {len(soft_cols)} soft-label columns for {num_classes} classes")

    def index_of(text, line):
        if lookup is None:
            k = int(text)
        elif text in lookup:
            k = lookup[text]
        else:
            raise ValidationError(f"{path}:{line}: unknown class label {text!r}")
        if not 0 <= k < num_classes:
            raise ValidationError(f"{path}:{line}: label {k} outside [0, {num_classes})")
        return k

    if features_path is not None:
        instance_ids, features = _read_table(features_path, "instance_id", "f_")
    else:
        instance_ids = list(dict.fromkeys(r[1] for r in raw))
        features = None
    if predictors_path is not None:
        predictor_ids, pred_features = _read_table(predictors_path, "predictor_id", "r_")
    else:
        predictor_ids = list(dict.fromkeys(r[2] for r in raw))
        pred_features = None
    task_names = list(dict.fromkeys(r[5] for r in raw)) if has_task else None

    inst_index = {iid: i for i, iid in enumerate(instance_ids)}
    pred_index = {pid: j for j, pid in enumerate(predictor_ids)}
    task_index = {t: k for k, t in enumerate(task_names or [])}
    ai, ap, al, at, soft = [], [], [], [], []
    seen = set()
    for line, iid, pid, lab, s, task in raw:
        if iid not in inst_index:
            raise ValidationError(f"{path}:{line}: instance {iid!r} has no features row")
        if pid not in pred_index:
            raise ValidationError(f"{path}:{line}: predictor {pid!r} has no representation row")
        key = (iid, pid, task)
        if key in seen:
            raise ValidationError(f"{path}:{line}: duplicate annotation pair ({iid}, {pid})")
        seen.add(key)
        k = index_of(lab, line)
        if s is not None:
            s = np.asarray(s)
            if np.any(s < -SIMPLEX_TOL) or abs(s.sum() - 1) > SIMPLEX_TOL:
                raise ValidationError(f"{path}:{line}: soft label is not on the simplex")
            if s[k] < s.max() - SIMPLEX_TOL:
                raise ValidationError(f"{path}:{line}: soft label argmax disagrees with label")
            soft.append(s)
        ai.append(inst_index[iid])
        ap.append(pred_index[pid])
        al.append(k)
        at.append(task_index.get(task, 0))

    return AnnotationDataset(
        num_classes=num_classes,
        instance_ids=tuple(instance_ids),
        predictor_ids=tuple(predictor_ids),
        ann_instance=np.array(ai, dtype=np.int64),
        ann_predictor=np.array(ap, dtype=np.int64),
        ann_label=np.array(al, dtype=np.int64),
        soft_labels=np.array(soft).reshape(len(soft), num_classes) if soft_cols else None,
        features=features,
        predictor_features=pred_features,
        class_names=tuple(catalog),
        ann_task=np.array(at, dtype=np.int64) if has_task else None,
        task_names=tuple(task_names) if has_task else None,
        name=name or os.path.splitext(os.path.basename(path))[0],
    )


def load_ground_truth(path, dataset=None):
    """Read an ``instance_id,label[,task]`` file.  With ``dataset`` given,
    labels are mapped through its class catalog."""
    lookup = None
    if dataset is not None:
        lookup = {c: k for k, c in enumerate(dataset.class_names)}
    labels = {}
    for line, header, rec in _read_records(path):
        if "instance_id" not in rec or "label" not in rec:
            raise ParseError("ground truth needs instance_id and label", path, line)
        text = str(rec["label"])
        if lookup is not None:
            if text not in lookup:
                raise ValidationError(f"{path}:{line}: unknown class label {text!r}")
            k = lookup[text]
        elif _is_int(text):
            k = int(text)
        else:
            raise ValidationError(f"{path}:{line}: non-integer label without a class catalog")
        labels[(str(rec["instance_id"]), str(rec.get("task", "")))] = k
    return GroundTruth(labels)


# ---------------------------------------------------------------------------
# Writing


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_dataset(dataset, directory):
    """Write ``annotations.csv``, ``features.csv`` and ``predictors.csv``.

    The features/predictors files are always written, possibly with only the
    id column, so instance and predictor order survive a round trip.
    """
    os.makedirs(directory, exist_ok=True)
    c = dataset.num_classes
    header = ["instance_id", "predictor_id", "label"]
    if dataset.multi_label:
        header.append("task")
    if dataset.soft_labels is not None:
        header += [f"p_{k}" for k in range(c)]
    rows = []
    for a in range(dataset.num_annotations):
        row = [dataset.instance_ids[dataset.ann_instance[a]],
               dataset.predictor_ids[dataset.ann_predictor[a]],
               dataset.class_names[dataset.ann_label[a]]]
        if dataset.multi_label:
            row.append(dataset.task_names[dataset.ann_task[a]])
        if dataset.soft_labels is not None:
            row += [_fmt(p) for p in dataset.soft_labels[a]]
        rows.append(row)
    paths = {
        "annotations": os.path.join(directory, "annotations.csv"),
        "features": os.path.join(directory, "features.csv"),
        "predictors": os.path.join(directory, "predictors.csv"),
    }
    _write_csv(paths["annotations"], header, rows)
    for key, ids, table, id_field, prefix in (
        ("features", dataset.instance_ids, dataset.features, "instance_id", "f_"),
        ("predictors", dataset.predictor_ids, dataset.predictor_features, "predictor_id", "r_"),
    ):
        width = 0 if table is None else table.shape[1]
        _write_csv(
            paths[key],
            [id_field] + [f"{prefix}{k}" for k in range(width)],
            [[ident] + ([] if table is None else [_fmt(v) for v in table[n]])
             for n, ident in enumerate(ids)],
        )
    return paths


def write_ground_truth(truth, dataset, path):
    header = ["instance_id", "label"] + (["task"] if dataset.multi_label else [])
    labels = truth.aligned(dataset)
    tasks = dataset.task_names if dataset.multi_label else ("",)
    rows = []
    for u, k in enumerate(labels):
        if k < 0:
            continue
        row = [dataset.instance_ids[u // len(tasks)], dataset.class_names[k]]
        if dataset.multi_label:
            row.append(tasks[u % len(tasks)])
        rows.append(row)
    _write_csv(path, header, rows)
    return path


# ---------------------------------------------------------------------------
# Resampling


def subsample_redundancy(dataset, max_per_instance, seed):
    """Keep at most ``max_per_instance`` annotations per unit, chosen uniformly
    without replacement."""
    if max_per_instance < 1:
        raise ValueError("max_per_instance must be >= 1")
    rng = np.random.default_rng(seed)
    units = dataset.ann_unit
    order = np.argsort(units, kind="stable")
    bounds = np.flatnonzero(np.diff(units[order])) + 1
    keep = []
    for group in np.split(order, bounds):
        if group.size > max_per_instance:
            group = rng.choice(group, size=max_per_instance, replace=False)
        keep.append(group)
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    if keep.size == dataset.num_annotations:
        return dataset
    return dataset.select_annotations(keep)


def train_eval_split(dataset, fraction, seed):
    """Disjoint instance-level split; annotations follow their instances."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = dataset.num_instances
    n_train = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.select_instances(perm[:n_train]), dataset.select_instances(perm[n_train:])
