"""Reference aggregators and the aggregate-then-train pipeline.

``two_stage_train`` fits only the ground-truth head (plus any instance or
label embeddings it reads) to aggregated soft labels.  The annotations are
stripped from the dataset before training starts, so the classifier never
sees them directly.
"""

from dataclasses import dataclass

import numpy as np

from .em import ascend, init_posteriors_majority
from .errors import ValidationError
from .model import backward, check_compatible, forward, init_parameters

TRAINABLE = ("theta", "instance_embeddings", "label_embeddings")


@dataclass
class AggregatedLabels:
    """Per-unit label distribution produced by an aggregator.  ``supported``
    marks units that had at least one annotation."""

    probs: np.ndarray
    method: str
    supported: np.ndarray = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValidationError("aggregated labels must be a 2-D array")
        if self.probs.size and (np.any(self.probs < 0)
                                or not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0, atol=1e-9)):
            raise ValidationError("aggregated label rows must lie on the simplex")
        if self.supported is None:
            self.supported = np.ones(len(self.probs), dtype=bool)
        self.supported = np.asarray(self.supported, dtype=bool)

    def hard(self):
        return self.probs.argmax(axis=1)


def majority_vote(dataset):
    """Soft majority vote; the same computation that initialises EM."""
    return AggregatedLabels(init_posteriors_majority(dataset), "maj",
                            dataset.annotation_counts() > 0)


def cross_entropy_objective(params, config, dataset, targets, batch):
    """Soft-label log-likelihood ``sum(targets * log h)`` over the batch and
    its gradient."""
    cache = forward(params, config, dataset, batch, need_confusion=False)
    t = targets[batch.units]
    value = float(np.sum(t * cache["log_h"]))
    return value, backward(params, config, dataset, cache, t)


def two_stage_train(dataset, model_config, em_config, aggregator=majority_vote,
                    params=None, iterations=None):
    """Aggregate the annotations, then train the ground-truth head on the
    aggregated labels.  Units without annotations carry no training signal.

    Returns ``(params, aggregated)``.  Only the ground-truth head and the
    embeddings feeding it change; the confusion networks keep their initial
    values.
    """
    check_compatible(model_config, dataset)
    aggregated = aggregator(dataset)
    if aggregated.probs.shape != (dataset.num_units, dataset.num_classes):
        raise ValidationError("aggregator output does not match the dataset")
    targets = np.where(aggregated.supported[:, None], aggregated.probs, 0.0)
    stripped = dataset.without_annotations()

    init_seq, batch_seq = np.random.SeedSequence(em_config.seed).spawn(2)
    if params is None:
        params = init_parameters(model_config, np.random.default_rng(init_seq))
    if iterations is None:
        iterations = em_config.m_step_iterations

    def objective(p, batch):
        return cross_entropy_objective(p, model_config, stripped, targets, batch)

    trained = ascend(params, objective, stripped, iterations, em_config.batch_size,
                     em_config.learning_rate, np.random.default_rng(batch_seq))
    return trained, aggregated
