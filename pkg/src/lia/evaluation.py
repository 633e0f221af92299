"""Accuracy, competence summaries, run reports, redundancy sweeps and
predictor-embedding export."""

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from .baselines import majority_vote, two_stage_train
from .data import GroundTruth, subsample_redundancy
from .em import EmConfig, e_step, run_em
from .errors import ConfigurationError, LiaError, ValidationError
from .model import ModelConfig, build_confusions, ground_truth

METHODS = ("lia", "lia-e", "lia-ml", "maj", "maj-star", "maj-star-e")
SWEEP_HEADER = ["dataset", "method", "redundancy", "mean_acc", "std_err", "repeats"]
VOLATILE_FIELDS = ("created", "wall_clock_seconds")


def _truth_array(truth, dataset=None):
    if isinstance(truth, GroundTruth):
        if dataset is None:
            raise ValueError("a GroundTruth needs the dataset to align against")
        return truth.aligned(dataset)
    return np.asarray(truth, dtype=np.int64)


def accuracy(predictions, truth, dataset=None):
    """Fraction of units whose predicted class matches the truth.

    ``predictions`` is either a label vector or a matrix of per-class scores
    (argmax, ties to the lowest index).  Every unit must have a true label.
    """
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    y = _truth_array(truth, dataset)
    if pred.shape != y.shape:
        raise ValidationError(f"{pred.shape[0]} predictions for {y.shape[0]} true labels")
    if y.size == 0:
        raise ValidationError("no units to evaluate")
    if np.any(y < 0):
        raise ValidationError(f"{int(np.sum(y < 0))} units have no true label")
    return float(np.mean(pred == y))


# ---------------------------------------------------------------------------
# Competence


@dataclass
class CompetenceScores:
    predictor_ids: tuple
    scores: np.ndarray          # nan for predictors without annotations
    flagged: tuple = ()         # ids excluded for lack of annotations

    def as_dict(self):
        return {pid: float(s) for pid, s in zip(self.predictor_ids, self.scores)
                if pid not in self.flagged}

    def ranking(self):
        """Scored predictor ids, best first."""
        d = self.as_dict()
        return sorted(d, key=lambda pid: -d[pid])


def estimate_competence_scores(params, config, dataset, posteriors=None):
    """Mean over each predictor's annotations of the posterior-weighted
    diagonal mass ``sum_k post[k] * Q[k, k]``."""
    if posteriors is None:
        posteriors = e_step(params, config, dataset)
    m = dataset.num_predictors
    scores = np.full(m, np.nan)
    if dataset.num_annotations:
        q = build_confusions(params, config, dataset).matrices
        diag = np.diagonal(q, axis1=1, axis2=2)
        mass = np.sum(posteriors[dataset.ann_unit] * diag, axis=1)
        counts = np.bincount(dataset.ann_predictor, minlength=m)
        totals = np.bincount(dataset.ann_predictor, weights=mass, minlength=m)
        seen = counts > 0
        scores[seen] = totals[seen] / counts[seen]
    flagged = tuple(pid for pid, s in zip(dataset.predictor_ids, scores) if np.isnan(s))
    return CompetenceScores(dataset.predictor_ids, scores, flagged)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class RunReport:
    method: str
    dataset: str
    accuracy: float
    seed: int
    redundancy: int = None
    trace: list = field(default_factory=list)
    competence: dict = field(default_factory=dict)
    flagged_predictors: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    created: str = ""
    error: str = None

    def __post_init__(self):
        if self.accuracy is not None and not (0.0 <= self.accuracy <= 1.0):
            raise ValidationError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def ok(self):
        return self.error is None

    def to_dict(self):
        return asdict(self)

    def comparable(self):
        """Dictionary without wall-clock fields, for reproducibility checks."""
        d = self.to_dict()
        for key in VOLATILE_FIELDS:
            d.pop(key)
        return d

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        return path

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def method_config(method, dataset, **overrides):
    """Model configuration implied by a method name (None for ``maj``)."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "maj":
        return None
    if method == "lia-ml":
        if not dataset.multi_label:
            raise ConfigurationError("lia-ml needs a dataset with a task column")
    elif dataset.multi_label:
        raise ConfigurationError(f"{method} is single-label; use lia-ml for multi-label data")
    embedding = method in ("lia-e", "maj-star-e")
    if not embedding and dataset.features is None:
        raise ConfigurationError(f"{method} needs instance features; use the -e variant")
    overrides = dict(overrides)
    predictor_mode = overrides.pop("predictor_mode", "auto")
    embedding_dim = overrides.pop("embedding_dim", 16)
    for key in ("instance_mode", "instance_dim", "num_instances", "num_predictors",
                "predictor_dim", "num_classes", "multi_label", "num_tasks"):
        overrides.pop(key, None)
    return ModelConfig.for_dataset(
        dataset, instance_mode="embedding" if embedding else "features",
        predictor_mode=predictor_mode, embedding_dim=embedding_dim, **overrides)


@dataclass
class RunResult:
    report: RunReport
    params: object = None
    config: ModelConfig = None
    posteriors: np.ndarray = None
    trace: object = None


def run_method(dataset, truth, method, em_config=None, model_overrides=None, redundancy=None):
    """Train (or aggregate) with ``method`` and evaluate against ``truth``
    (accuracy is None when ``truth`` is None)."""
    em_config = EmConfig() if em_config is None else em_config
    config = method_config(method, dataset, **(model_overrides or {}))
    y = None if truth is None else _truth_array(truth, dataset)
    start = time.perf_counter()
    result = RunResult(report=None, config=config)
    competence = None
    if method == "maj":
        post = majority_vote(dataset).probs
    elif method.startswith("maj-star"):
        params, _ = two_stage_train(dataset, config, em_config)
        post = ground_truth(params, config, dataset)
        result.params = params
    else:
        params, post, trace = run_em(dataset, config, em_config)
        competence = estimate_competence_scores(params, config, dataset, post)
        result.params, result.trace = params, trace
    result.posteriors = post
    result.report = RunReport(
        method=method, dataset=dataset.name, accuracy=None if y is None else accuracy(post, y), seed=em_config.seed,
        redundancy=redundancy,
        trace=[] if result.trace is None else result.trace.summary(),
        competence={} if competence is None else competence.as_dict(),
        flagged_predictors=[] if competence is None else list(competence.flagged),
        wall_clock_seconds=time.perf_counter() - start, created=_now(),
    )
    return result


# ---------------------------------------------------------------------------
# Redundancy sweeps


@dataclass
class SweepCell:
    method: str
    redundancy: int
    accuracies: list
    seeds: list
    failures: list = field(default_factory=list)

    @property
    def repeats(self):
        return len(self.accuracies)

    @property
    def mean(self):
        return float(np.mean(self.accuracies)) if self.accuracies else math.nan

    @property
    def std_err(self):
        if len(self.accuracies) < 2:
            return 0.0 if self.accuracies else math.nan
        return float(np.std(self.accuracies, ddof=1) / np.sqrt(len(self.accuracies)))

    @property
    def single_repeat(self):
        """Standard error is reported as 0 because it cannot be estimated."""
        return len(self.accuracies) == 1


@dataclass
class SweepResult:
    dataset: str
    cells: list
    reports: list

    @property
    def failed(self):
        return any(c.failures for c in self.cells)

    def rows(self):
        return [[self.dataset, c.method, c.redundancy, repr(c.mean), repr(c.std_err), c.repeats]
                for c in self.cells]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_HEADER)
            writer.writerows(self.rows())
        return path


def sweep_seeds(repeats, seed=0, seeds=None):
    if seeds is not None:
        seeds = [int(s) for s in seeds]
        if len(seeds) != repeats:
            raise ConfigurationError(f"{len(seeds)} seeds given for {repeats} repeats")
        return seeds
    return [seed + r for r in range(repeats)]


def redundancy_sweep(dataset, truth, levels, methods, repeats=1, seeds=None, em_config=None,
                     model_overrides=None, out_dir=None, seed=0):
    """Subsample to each redundancy level, train every method once per repeat
    and evaluate.  The repeat seed drives both the subsample and training.

    With ``out_dir`` every repeat's report is written to
    ``<out_dir>/<method>_r<level>_s<seed>.json``.
    """
    if not levels or any(int(k) < 1 for k in levels):
        raise ConfigurationError("redundancy levels must be integers >= 1")
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}")
    base = EmConfig() if em_config is None else em_config
    seed_list = sweep_seeds(repeats, seed, seeds)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    cells, reports = [], []
    for level in levels:
        level = int(level)
        for method in methods:
            cell = SweepCell(method, level, [], [])
            for s in seed_list:
                sub = subsample_redundancy(dataset, level, s)
                cfg = EmConfig(**{**base.to_dict(), "seed": s})
                try:
                    report = run_method(sub, truth, method, cfg, model_overrides, level).report
                    cell.accuracies.append(report.accuracy)
                    cell.seeds.append(s)
                except LiaError as exc:
                    report = RunReport(method=method, dataset=dataset.name, accuracy=None,
                                       seed=s, redundancy=level, created=_now(),
                                       error=f"{type(exc).__name__}: {exc}")
                    cell.failures.append({"seed": s, "error": report.error,
                                          "exit_code": exc.exit_code})
                reports.append(report)
                if out_dir:
                    report.to_json(os.path.join(out_dir, f"{method}_r{level}_s{s}.json"))
            cells.append(cell)
    return SweepResult(dataset.name, cells, reports)


def cell_from_reports(reports, method, redundancy):
    """Rebuild a sweep cell from stored per-repeat reports."""
    chosen = [r for r in reports if r.method == method and r.redundancy == redundancy]
    return SweepCell(method, redundancy,
                     [r.accuracy for r in chosen if r.ok], [r.seed for r in chosen if r.ok],
                     [{"seed": r.seed, "error": r.error} for r in chosen if not r.ok])


# ---------------------------------------------------------------------------
# Predictor embeddings


def error_rates(dataset, truth):
    """Empirical false-positive and false-negative rates per predictor for
    binary data (class 1 is positive); nan when undefined."""
    if dataset.num_classes != 2:
        raise ConfigurationError("false-positive/negative rates need exactly two classes")
    y = _truth_array(truth, dataset)[dataset.ann_unit]
    known = y >= 0
    m = dataset.num_predictors
    j, lab, y = dataset.ann_predictor[known], dataset.ann_label[known], y[known]
    neg = np.bincount(j, weights=(y == 0), minlength=m)
    pos = np.bincount(j, weights=(y == 1), minlength=m)
    fp = np.bincount(j, weights=(y == 0) & (lab == 1), minlength=m)
    fn = np.bincount(j, weights=(y == 1) & (lab == 0), minlength=m)
    with np.errstate(invalid="ignore", divide="ignore"):
        return fp / neg, fn / pos


def export_predictor_embeddings(params, config, dataset, path, truth=None):
    """CSV ``predictor_id,e_0,...`` (plus ``fp_rate,fn_rate`` for binary data
    with truth)."""
    if config.predictor_mode != "embedding" or params.predictor_embeddings is None:
        raise ConfigurationError("predictor embeddings exist only in embedding mode")
    table = params.predictor_embeddings
    header = ["predictor_id"] + [f"e_{k}" for k in range(table.shape[1])]
    rates = None
    if truth is not None and dataset.num_classes == 2:
        rates = error_rates(dataset, truth)
        header += ["fp_rate", "fn_rate"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j, pid in enumerate(dataset.predictor_ids):
            row = [pid] + [repr(float(v)) for v in table[j]]
            if rates is not None:
                row += [repr(float(rates[0][j])), repr(float(rates[1][j]))]
            writer.writerow(row)
    return path


def load_predictor_embeddings(path):
    """Returns ``(ids, embeddings, rates)``; ``rates`` is None when absent."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    emb_cols = [n for n, h in enumerate(header) if h.startswith("e_")]
    ids = tuple(r[0] for r in body)
    emb = np.array([[float(r[n]) for n in emb_cols] for r in body]).reshape(len(body), len(emb_cols))
    rates = None
    if "fp_rate" in header:
        a, b = header.index("fp_rate"), header.index("fn_rate")
        rates = (np.array([float(r[a]) for r in body]), np.array([float(r[b]) for r in body]))
    return ids, emb, rates
