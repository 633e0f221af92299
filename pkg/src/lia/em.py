"""Expectation-maximisation for the latent-truth model.

The loop is: majority-vote posteriors -> M-step -> (E-step -> M-step)* with
warm-started parameters, optionally followed by gradient ascent on the
marginal likelihood.  M-steps are a fixed number of AMSGrad steps on the
expected complete-data log-likelihood over shuffled unit batches.
"""

import csv
import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, NumericError
from .model import backward, check_compatible, forward, init_parameters, make_batch

TRACE_HEADER = ["iteration", "phase", "objective", "marginal_ll", "max_param_delta"]


@dataclass
class EmConfig:
    em_iterations: int = 10
    m_step_iterations: int = 1000
    batch_size: int = 1024
    learning_rate: float = 0.001
    fine_tune: bool = True
    fine_tune_iterations: int = 1000
    convergence_tolerance: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        problems = []
        for key in ("em_iterations", "m_step_iterations", "batch_size"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1")
        if self.fine_tune_iterations < 0:
            problems.append("fine_tune_iterations must be >= 0")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if problems:
            raise ConfigurationError("; ".join(problems), problems)

    def to_dict(self):
        return asdict(self)


@dataclass
class TraceRecord:
    iteration: int
    phase: str
    objective_before: float
    objective_after: float
    marginal_ll: float
    max_param_delta: float
    elapsed: float
    digest_in: str = ""
    digest_out: str = ""

    def summary(self):
        """Timestamp-free view used in reports."""
        d = asdict(self)
        d.pop("elapsed")
        return d


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    converged: bool = False

    def em_records(self):
        return [r for r in self.records if r.phase == "em"]

    def summary(self):
        return [r.summary() for r in self.records]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            for r in self.records:
                writer.writerow([r.iteration, r.phase, repr(r.objective_after),
                                 repr(r.marginal_ll), repr(r.max_param_delta)])
        return path


def params_digest(params):
    return hashlib.sha256(params.flat().tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Posteriors


def init_posteriors_majority(dataset):
    """(Soft) majority vote per unit; units without annotations are uniform."""
    c = dataset.num_classes
    u = dataset.num_units
    if dataset.soft_labels is not None:
        votes = dataset.soft_labels
    else:
        votes = np.zeros((dataset.num_annotations, c))
        votes[np.arange(dataset.num_annotations), dataset.ann_label] = 1.0
    totals = np.zeros((u, c))
    np.add.at(totals, dataset.ann_unit, votes)
    counts = dataset.annotation_counts()
    out = np.full((u, c), 1.0 / c)
    seen = counts > 0
    out[seen] = totals[seen] / counts[seen, None]
    return out


def _log_lambda(params, config, dataset, batch=None):
    batch = make_batch(dataset) if batch is None else batch
    cache = forward(params, config, dataset, batch)
    return cache["log_h"] + batch.unit_scatter @ cache["log_q_obs"]


def e_step(params, config, dataset):
    """Posterior p(y_u = k | annotations) for every unit, computed in the log
    domain."""
    check_compatible(config, dataset)
    log_lam = _log_lambda(params, config, dataset)
    log_norm = nn.logsumexp(log_lam, axis=1)
    if not np.all(np.isfinite(log_norm)):
        bad = int(np.flatnonzero(~np.isfinite(log_norm))[0])
        raise NumericError(f"posterior normaliser is not finite for unit {bad}", index=bad)
    return np.exp(log_lam - log_norm[:, None])


# ---------------------------------------------------------------------------
# Objectives


def _as_batch(dataset, batch):
    if batch is None:
        return make_batch(dataset)
    if hasattr(batch, "ann_pos"):
        return batch
    return make_batch(dataset, batch)


def m_step_objective(params, config, dataset, posteriors, batch=None):
    """Expected complete-data log-likelihood over the batch units and its
    gradient (a :class:`Parameters`)."""
    batch = _as_batch(dataset, batch)
    if batch.units.size == 0:
        raise ValueError("empty batch")
    cache = forward(params, config, dataset, batch)
    post = np.asarray(posteriors)[batch.units]
    post_ann = post[batch.ann_pos]
    value = float(np.sum(post * cache["log_h"]) + np.sum(post_ann * cache["log_q_obs"]))
    if not np.isfinite(value):
        raise NumericError("expected log-likelihood is not finite")
    return value, backward(params, config, dataset, cache, post, post_ann)


def marginal_objective(params, config, dataset, batch=None):
    """Marginal log-likelihood of the annotations over the batch and its gradient."""
    batch = _as_batch(dataset, batch)
    cache = forward(params, config, dataset, batch)
    if batch.annotations.size == 0:
        return 0.0, params.zeros_like()
    scores = cache["log_h"][batch.ann_pos] + cache["log_q_obs"]
    norm = nn.logsumexp(scores, axis=1)
    value = float(norm.sum())
    if not np.isfinite(value):
        raise NumericError("marginal log-likelihood is not finite")
    resp = np.exp(scores - norm[:, None])
    weight_h = batch.unit_scatter @ resp
    return value, backward(params, config, dataset, cache, weight_h, resp)


def marginal_likelihood(params, config, dataset):
    if dataset.num_annotations == 0:
        return 0.0
    batch = make_batch(dataset)
    cache = forward(params, config, dataset, batch)
    scores = cache["log_h"][batch.ann_pos] + cache["log_q_obs"]
    return float(nn.logsumexp(scores, axis=1).sum())


# ---------------------------------------------------------------------------
# Optimisation


def _batches(dataset, batch_size, rng):
    """Endless stream of unit batches; a single fixed batch when everything fits."""
    n = dataset.num_units
    if n <= batch_size:
        full = make_batch(dataset)
        while True:
            yield full
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield make_batch(dataset, np.sort(perm[start:start + batch_size]))


def ascend(params, objective, dataset, iterations, batch_size, learning_rate, rng):
    """Run ``iterations`` AMSGrad ascent steps on ``objective(params, batch)``
    with a fresh optimizer state.  Returns the final parameters."""
    if iterations == 0:
        return params
    flat = params.flat()
    state = nn.OptimizerState.fresh(flat.size, learning_rate)
    stream = _batches(dataset, batch_size, rng)
    current = params
    for _ in range(iterations):
        _, grads = objective(current, next(stream))
        flat, state = nn.amsgrad_step(state, flat, -grads.flat())
        current = params.with_flat(flat)
    return current


def m_step(params, config, dataset, posteriors, em_config, rng):
    def objective(p, batch):
        return m_step_objective(p, config, dataset, posteriors, batch)

    return ascend(params, objective, dataset, em_config.m_step_iterations,
                  em_config.batch_size, em_config.learning_rate, rng)


def fine_tune(params, config, dataset, em_config, trace=None, rng=None):
    """Gradient ascent on the marginal likelihood starting from ``params``."""
    if rng is None:
        rng = np.random.default_rng([em_config.seed, 2])
    start = time.perf_counter()
    before = marginal_likelihood(params, config, dataset)

    def objective(p, batch):
        return marginal_objective(p, config, dataset, batch)

    tuned = ascend(params, objective, dataset, em_config.fine_tune_iterations,
                   em_config.batch_size, em_config.learning_rate, rng)
    if trace is not None:
        after = marginal_likelihood(tuned, config, dataset)
        prev = trace.records[-1].elapsed if trace.records else 0.0
        trace.records.append(TraceRecord(
            iteration=len(trace.records), phase="fine_tune",
            objective_before=before, objective_after=after, marginal_ll=after,
            max_param_delta=float(np.max(np.abs(tuned.flat() - params.flat()), initial=0.0)),
            elapsed=prev + time.perf_counter() - start,
            digest_in=params_digest(params), digest_out=params_digest(tuned),
        ))
    return tuned


def run_em(dataset, model_config, em_config, init_posteriors=None, params=None):
    """Train the model with EM.  Returns ``(params, posteriors, trace)``.

    ``init_posteriors`` replaces the majority-vote initialisation (used to
    study the label-flip symmetry); ``params`` replaces the random start.
    """
    check_compatible(model_config, dataset)
    init_seq, batch_seq, tune_seq = np.random.SeedSequence(em_config.seed).spawn(3)
    if params is None:
        params = init_parameters(model_config, np.random.default_rng(init_seq))
    rng = np.random.default_rng(batch_seq)
    trace = TrainTrace()
    posteriors = init_posteriors_majority(dataset) if init_posteriors is None else np.asarray(init_posteriors)
    full = make_batch(dataset)
    clock = time.perf_counter()
    try:
        for it in range(em_config.em_iterations):
            if it > 0:
                posteriors = e_step(params, model_config, dataset)
            before, _ = m_step_objective(params, model_config, dataset, posteriors, full)
            new_params = m_step(params, model_config, dataset, posteriors, em_config, rng)
            after, _ = m_step_objective(new_params, model_config, dataset, posteriors, full)
            delta = float(np.max(np.abs(new_params.flat() - params.flat())))
            trace.records.append(TraceRecord(
                iteration=it, phase="em", objective_before=before, objective_after=after,
                marginal_ll=marginal_likelihood(new_params, model_config, dataset),
                max_param_delta=delta, elapsed=time.perf_counter() - clock,
                digest_in=params_digest(params), digest_out=params_digest(new_params),
            ))
            params = new_params
            if delta < em_config.convergence_tolerance:
                trace.converged = True
                break
        if em_config.fine_tune:
            params = fine_tune(params, model_config, dataset, em_config, trace,
                               rng=np.random.default_rng(tune_seq))
        posteriors = e_step(params, model_config, dataset)
    except NumericError as exc:
        exc.trace = trace
        raise
    return params, posteriors, trace
