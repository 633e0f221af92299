"""Synthetic crowdsourcing data drawn from the model's generative story.

Instances are isotropic Gaussian clusters (one per class), every predictor has
a fixed confusion matrix, and each observed label is drawn from the row of
that matrix selected by the true class.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AnnotationDataset, GroundTruth, write_dataset, write_ground_truth
from .errors import ValidationError

ORACLE_CORRECT = "oracle_correct"
ORACLE_WRONG = "oracle_wrong"


@dataclass
class PredictorGroup:
    """``count`` predictors sharing a confusion profile: either a diagonal
    strength (scalar, or one value per class) or an explicit C x C matrix."""

    count: int = 1
    diagonal: object = None
    confusion: list = None

    def matrix(self, num_classes):
        if self.confusion is not None:
            return np.asarray(self.confusion, dtype=np.float64)
        diag = np.broadcast_to(np.asarray(0.7 if self.diagonal is None else self.diagonal,
                                          dtype=np.float64), (num_classes,))
        off = (1.0 - diag) / (num_classes - 1)
        m = np.repeat(off[:, None], num_classes, axis=1)
        m[np.arange(num_classes), np.arange(num_classes)] = diag
        return m


@dataclass
class SyntheticSpec:
    num_instances: int
    num_classes: int = 2
    predictors: list = field(default_factory=lambda: [PredictorGroup(count=5)])
    feature_dim: int = None
    class_separation: float = 4.0
    redundancy: int = None
    label_probability: float = None
    latent_dim: int = 4
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        self.predictors = [g if isinstance(g, PredictorGroup) else PredictorGroup(**g)
                           for g in self.predictors]
        if self.feature_dim is None:
            self.feature_dim = self.num_classes
        problems = self.problems()
        if problems:
            raise ValidationError("invalid synthetic spec: " + "; ".join(problems))

    @property
    def num_predictors(self):
        return sum(g.count for g in self.predictors)

    def problems(self):
        out = []
        if self.num_instances < 1:
            out.append("num_instances: must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes: must be >= 2")
        if self.num_predictors < 1:
            out.append("predictors: need at least one predictor")
        if self.feature_dim < self.num_classes:
            out.append("feature_dim: must be >= num_classes")
        if self.latent_dim < 1:
            out.append("latent_dim: must be >= 1")
        if self.redundancy is not None and self.label_probability is not None:
            out.append("redundancy/label_probability: give at most one")
        if self.redundancy is not None and not 1 <= self.redundancy <= max(self.num_predictors, 1):
            out.append("redundancy: must lie in [1, number of predictors]")
        if self.label_probability is not None and not 0 <= self.label_probability <= 1:
            out.append("label_probability: must lie in [0, 1]")
        for n, g in enumerate(self.predictors):
            if self.num_classes < 2:
                break
            if g.count < 0:
                out.append(f"predictors[{n}].count: must be >= 0")
                continue
            try:
                m = g.matrix(self.num_classes)
            except ValueError:
                out.append(f"predictors[{n}]: diagonal must be a scalar or one value per class")
                continue
            if m.shape != (self.num_classes, self.num_classes):
                out.append(f"predictors[{n}].confusion: must be {self.num_classes}x{self.num_classes}")
            elif np.any(m < 0) or np.any(m > 1) or not np.allclose(m.sum(axis=1), 1.0):
                out.append(f"predictors[{n}]: confusion rows must be probability vectors")
        return out

    def confusions(self):
        return np.concatenate([np.repeat(g.matrix(self.num_classes)[None], g.count, axis=0)
                               for g in self.predictors if g.count > 0])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError("invalid synthetic spec: unknown fields " + ", ".join(unknown))
        if "num_instances" not in d:
            raise ValidationError("invalid synthetic spec: num_instances is required")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"invalid synthetic spec: {exc}") from None

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sample_dataset(spec):
    """Draw a dataset; returns ``(dataset, truth)``."""
    rng = np.random.default_rng(spec.seed)
    n, c, m = spec.num_instances, spec.num_classes, spec.num_predictors
    y = rng.integers(c, size=n)
    means = np.zeros((c, spec.feature_dim))
    means[np.arange(c), np.arange(c)] = spec.class_separation / np.sqrt(2.0)
    features = means[y] + rng.standard_normal((n, spec.feature_dim))

    if spec.redundancy is not None:
        picks = [np.sort(rng.choice(m, size=spec.redundancy, replace=False)) for _ in range(n)]
        ann_i = np.repeat(np.arange(n), spec.redundancy)
        ann_j = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
    else:
        p = 1.0 if spec.label_probability is None else spec.label_probability
        ann_i, ann_j = np.nonzero(rng.random((n, m)) < p)

    rows = spec.confusions()[ann_j, y[ann_i]]
    u = rng.random(ann_i.size)
    labels = (u[:, None] >= np.cumsum(rows, axis=1)[:, :-1]).sum(axis=1)

    dataset = AnnotationDataset(
        num_classes=c,
        instance_ids=tuple(f"x{i}" for i in range(n)),
        predictor_ids=tuple(f"p{j}" for j in range(m)),
        ann_instance=ann_i, ann_predictor=ann_j, ann_label=labels,
        features=features, name=spec.name,
    )
    return dataset, GroundTruth.from_array(dataset, y)


def add_oracles(dataset, truth):
    """Append an always-correct and an always-wrong predictor (wrong label =
    true label + 1 mod C) that annotate every unit."""
    if truth is None:
        raise ValidationError("oracles need ground truth")
    labels = truth.aligned(dataset)
    if np.any(labels < 0):
        raise ValidationError("oracles need a true label for every instance")
    c = dataset.num_classes
    units = np.arange(dataset.num_units)
    tasks = dataset.num_tasks
    m = dataset.num_predictors
    new_labels = np.concatenate([labels, (labels + 1) % c])
    soft = None
    if dataset.soft_labels is not None:
        soft = np.vstack([dataset.soft_labels, np.eye(c)[new_labels]])
    pred_features = None
    if dataset.predictor_features is not None:
        pred_features = np.vstack([dataset.predictor_features,
                                   np.zeros((2, dataset.predictor_features.shape[1]))])
    return dataset.replace(
        predictor_ids=dataset.predictor_ids + (ORACLE_CORRECT, ORACLE_WRONG),
        ann_instance=np.concatenate([dataset.ann_instance, units // tasks, units // tasks]),
        ann_predictor=np.concatenate([dataset.ann_predictor, np.full(units.size, m),
                                      np.full(units.size, m + 1)]),
        ann_label=np.concatenate([dataset.ann_label, new_labels]),
        ann_task=None if not dataset.multi_label else np.concatenate(
            [dataset.ann_task, units % tasks, units % tasks]),
        soft_labels=soft,
        predictor_features=pred_features,
    )


def write_synthetic(spec, out_dir):
    """Sample and write annotation, feature, predictor and truth files."""
    dataset, truth = sample_dataset(spec)
    paths = write_dataset(dataset, out_dir)
    paths["ground_truth"] = write_ground_truth(truth, dataset, os.path.join(out_dir, "ground_truth.csv"))
    return paths
