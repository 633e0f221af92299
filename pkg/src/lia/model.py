"""The latent-truth model: ground-truth head, difficulty and competence
networks, embedding tables and per-pair confusion matrices.

For an instance ``x`` and predictor representation ``r``::

    h(x)      -> C logits              (MLP, softmax gives p(y | x))
    D = d(x)  -> C x C x L tensor      (MLP)
    K = c(r)  -> C x C x L tensor      (linear map)
    Q[k, l]   = softmax_l( sum_m D[k, l, m] * K[k, l, m] )

``Q[k, l]`` is the probability that the predictor says ``l`` when the truth
is ``k``.  When instances or predictors carry no features they are
represented by learned embedding rows.  In multi-label mode a learned label
embedding is appended to the inputs of all three functions.

:func:`forward` / :func:`backward` implement one differentiable pass over a
batch of units; the EM objectives are thin weightings on top of it.
"""

import json
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np
from scipy import sparse

from . import nn
from .errors import ConfigurationError, ShapeError

INSTANCE_MODES = ("features", "embedding")
PARAM_GROUPS = ("theta", "phi", "psi", "instance_embeddings",
                "predictor_embeddings", "label_embeddings")
CHECKPOINT_FORMAT = "lia-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    latent_dim: int = 4
    instance_mode: str = "features"
    instance_dim: int = 16          # feature width, or embedding size
    num_instances: int = 0          # embedding table rows (embedding mode)
    predictor_mode: str = "embedding"
    predictor_dim: int = 16
    num_predictors: int = 0
    h_hidden: tuple = (16, 16, 16, 16)
    d_hidden: tuple = (16, 16, 16, 16)
    activation: str = "leaky_relu"
    competence_form: str = "linear"
    multi_label: bool = False
    num_tasks: int = 1
    label_embedding_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "h_hidden", tuple(self.h_hidden))
        object.__setattr__(self, "d_hidden", tuple(self.d_hidden))
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        for mode_key in ("instance_mode", "predictor_mode"):
            if getattr(self, mode_key) not in INSTANCE_MODES:
                problems.append(f"{mode_key} must be one of {INSTANCE_MODES}")
        if self.instance_dim < 1 or self.predictor_dim < 1:
            problems.append("instance_dim and predictor_dim must be >= 1")
        if self.instance_mode == "embedding" and self.num_instances < 1:
            problems.append("embedding mode needs num_instances >= 1")
        if self.predictor_mode == "embedding" and self.num_predictors < 1:
            problems.append("embedding mode needs num_predictors >= 1")
        if self.competence_form != "linear":
            problems.append("competence_form must be 'linear'")
        if self.multi_label and (self.num_tasks < 1 or self.label_embedding_dim < 1):
            problems.append("multi-label mode needs num_tasks >= 1 and label_embedding_dim >= 1")
        if not self.multi_label and self.num_tasks != 1:
            problems.append("num_tasks must be 1 unless multi_label is on")
        if problems:
            raise ConfigurationError("; ".join(problems), problems)

    @property
    def label_dim(self):
        return self.label_embedding_dim if self.multi_label else 0

    @property
    def confusion_size(self):
        return self.num_classes * self.num_classes * self.latent_dim

    @cached_property
    def h_spec(self):
        return nn.MlpSpec(self.instance_dim + self.label_dim, self.h_hidden,
                          self.num_classes, self.activation)

    @cached_property
    def d_spec(self):
        return nn.MlpSpec(self.instance_dim + self.label_dim, self.d_hidden,
                          self.confusion_size, self.activation)

    @cached_property
    def c_spec(self):
        return nn.MlpSpec(self.predictor_dim + self.label_dim, (), self.confusion_size)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["h_hidden"] = list(self.h_hidden)
        d["d_hidden"] = list(self.d_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def for_dataset(cls, dataset, instance_mode="auto", predictor_mode="auto",
                    embedding_dim=16, multi_label=None, **kwargs):
        """Configuration sized for ``dataset``; ``auto`` modes use features
        when the dataset has them and learned embeddings otherwise."""
        if instance_mode == "auto":
            instance_mode = "features" if dataset.features is not None else "embedding"
        if predictor_mode == "auto":
            predictor_mode = "features" if dataset.predictor_features is not None else "embedding"
        if multi_label is None:
            multi_label = dataset.multi_label
        if instance_mode == "features":
            if dataset.features is None:
                raise ConfigurationError("instance_mode='features' but the dataset has no features")
            instance_dim = dataset.features.shape[1]
        else:
            instance_dim = embedding_dim
        if predictor_mode == "features":
            if dataset.predictor_features is None:
                raise ConfigurationError(
                    "predictor_mode='features' but the dataset has no predictor representations")
            predictor_dim = dataset.predictor_features.shape[1]
        else:
            predictor_dim = embedding_dim
        return cls(
            num_classes=dataset.num_classes,
            instance_mode=instance_mode, instance_dim=instance_dim,
            num_instances=dataset.num_instances,
            predictor_mode=predictor_mode, predictor_dim=predictor_dim,
            num_predictors=dataset.num_predictors,
            multi_label=bool(multi_label),
            num_tasks=dataset.num_tasks if multi_label else 1,
            **kwargs,
        )


def check_compatible(config, dataset):
    problems = []
    if config.num_classes != dataset.num_classes:
        problems.append(f"model has {config.num_classes} classes, dataset {dataset.num_classes}")
    if config.instance_mode == "features":
        if dataset.features is None:
            problems.append("model expects instance features; dataset has none")
        elif dataset.features.shape[1] != config.instance_dim:
            problems.append("instance feature width does not match the model")
    elif dataset.num_instances != config.num_instances:
        problems.append("instance count does not match the embedding table")
    if config.predictor_mode == "features":
        if dataset.predictor_features is None:
            problems.append("model expects predictor representations; dataset has none")
        elif dataset.predictor_features.shape[1] != config.predictor_dim:
            problems.append("predictor representation width does not match the model")
    elif dataset.num_predictors != config.num_predictors:
        problems.append("predictor count does not match the embedding table")
    if config.multi_label != dataset.multi_label:
        problems.append("multi-label setting differs between model and dataset")
    elif config.multi_label and config.num_tasks != dataset.num_tasks:
        problems.append("task count does not match the label embedding table")
    if problems:
        raise ConfigurationError("; ".join(problems), problems)


@dataclass
class Parameters:
    theta: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    instance_embeddings: np.ndarray = None
    predictor_embeddings: np.ndarray = None
    label_embeddings: np.ndarray = None

    def groups(self):
        return [(name, getattr(self, name)) for name in PARAM_GROUPS
                if getattr(self, name) is not None]

    def flat(self):
        return np.concatenate([a.ravel() for _, a in self.groups()])

    def with_flat(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        out, offset = {}, 0
        for name, a in self.groups():
            out[name] = vector[offset:offset + a.size].reshape(a.shape).copy()
            offset += a.size
        if offset != vector.size:
            raise ShapeError(f"flat vector has {vector.size} entries, expected {offset}")
        return replace(self, **out)

    def copy(self):
        return replace(self, **{name: a.copy() for name, a in self.groups()})

    def zeros_like(self):
        return replace(self, **{name: np.zeros_like(a) for name, a in self.groups()})

    @property
    def size(self):
        return sum(a.size for _, a in self.groups())

    def mask(self, names):
        """Flat 0/1 mask selecting the listed groups."""
        return np.concatenate([np.full(a.size, float(name in names)) for name, a in self.groups()])


def init_parameters(config, seed):
    rng = np.random.default_rng(seed)
    params = Parameters(
        theta=nn.init_mlp(config.h_spec, rng),
        phi=nn.init_mlp(config.d_spec, rng),
        psi=nn.init_mlp(config.c_spec, rng),
    )
    if config.instance_mode == "embedding":
        params.instance_embeddings = nn.init_table(config.num_instances, config.instance_dim, rng)
    if config.predictor_mode == "embedding":
        params.predictor_embeddings = nn.init_table(config.num_predictors, config.predictor_dim, rng)
    if config.multi_label:
        params.label_embeddings = nn.init_table(config.num_tasks, config.label_embedding_dim, rng)
    return params


# ---------------------------------------------------------------------------
# Inputs


def _all_units(dataset):
    return np.arange(dataset.num_units)


def instance_inputs(params, config, dataset, units):
    """Rows fed to the ground-truth and difficulty networks for ``units``."""
    units = np.asarray(units, dtype=np.int64)
    inst = units // config.num_tasks
    if config.instance_mode == "features":
        if dataset.features is None:
            raise ConfigurationError("model expects instance features; dataset has none")
        x = dataset.features[inst]
    else:
        x = params.instance_embeddings[inst]
    if x.shape[1] != config.instance_dim:
        raise ConfigurationError("instance representation width does not match the model")
    if config.multi_label:
        x = np.concatenate([x, params.label_embeddings[units % config.num_tasks]], axis=1)
    return x


def predictor_inputs(params, config, dataset, predictor_units):
    pu = np.asarray(predictor_units, dtype=np.int64)
    pred = pu // config.num_tasks
    if config.predictor_mode == "features":
        if dataset.predictor_features is None:
            raise ConfigurationError("model expects predictor representations; dataset has none")
        r = dataset.predictor_features[pred]
    else:
        r = params.predictor_embeddings[pred]
    if r.shape[1] != config.predictor_dim:
        raise ConfigurationError("predictor representation width does not match the model")
    if config.multi_label:
        r = np.concatenate([r, params.label_embeddings[pu % config.num_tasks]], axis=1)
    return r


def _check_mode(config, dataset):
    if config.multi_label != dataset.multi_label:
        raise ConfigurationError("multi-label setting differs between model and dataset")


# ---------------------------------------------------------------------------
# Model functions


def ground_truth(params, config, dataset, units=None):
    """p(y | x) for each requested unit, shape (n, C)."""
    _check_mode(config, dataset)
    units = _all_units(dataset) if units is None else units
    x = instance_inputs(params, config, dataset, units)
    return nn.softmax(nn.mlp_forward(config.h_spec, params.theta, x))


def difficulty(params, config, dataset, units=None):
    """Raw difficulty tensors, shape (n, C, C, L)."""
    _check_mode(config, dataset)
    units = _all_units(dataset) if units is None else units
    x = instance_inputs(params, config, dataset, units)
    c, L = config.num_classes, config.latent_dim
    return nn.mlp_forward(config.d_spec, params.phi, x).reshape(-1, c, c, L)


def competence_map(params, config, representations):
    """Apply the linear competence map to raw representation rows."""
    c, L = config.num_classes, config.latent_dim
    out = nn.mlp_forward(config.c_spec, params.psi, np.atleast_2d(representations))
    return out.reshape(-1, c, c, L)


def competence(params, config, dataset, predictor_units=None):
    """Competence tensors, shape (n, C, C, L); indices are predictor units
    (``predictor * num_tasks + task``)."""
    _check_mode(config, dataset)
    if predictor_units is None:
        predictor_units = np.arange(dataset.num_predictors * config.num_tasks)
    r = predictor_inputs(params, config, dataset, predictor_units)
    return competence_map(params, config, r)


def confusion_logits(difficulty_tensor, competence_tensor):
    d = np.asarray(difficulty_tensor, dtype=np.float64)
    k = np.asarray(competence_tensor, dtype=np.float64)
    if d.shape != k.shape or d.ndim < 3 or d.shape[-2] != d.shape[-3]:
        raise ShapeError(f"difficulty {d.shape} and competence {k.shape} must both be (..., C, C, L)")
    return np.einsum("...klm,...klm->...kl", d, k)


def assemble_confusion(difficulty_tensor, competence_tensor):
    """Row-stochastic confusion matrix from a difficulty/competence pair."""
    return nn.softmax(confusion_logits(difficulty_tensor, competence_tensor), axis=-1)


@dataclass
class ConfusionTensorBatch:
    instance: np.ndarray
    predictor: np.ndarray
    task: np.ndarray
    matrices: np.ndarray            # (A, C, C)
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {(int(i), int(j), int(t)): a for a, (i, j, t)
                        in enumerate(zip(self.instance, self.predictor, self.task))}

    def __len__(self):
        return len(self.matrices)

    def get(self, instance, predictor, task=0):
        return self.matrices[self._lookup[(instance, predictor, task)]]


def build_confusions(params, config, dataset):
    """One confusion matrix per observed annotation pair."""
    _check_mode(config, dataset)
    a = dataset.num_annotations
    c = config.num_classes
    task = dataset.ann_task if dataset.multi_label else np.zeros(a, dtype=np.int64)
    if a == 0:
        return ConfusionTensorBatch(dataset.ann_instance, dataset.ann_predictor, task,
                                    np.zeros((0, c, c)))
    d = difficulty(params, config, dataset)
    k = competence(params, config, dataset)
    q = assemble_confusion(d[dataset.ann_unit], k[dataset.ann_predictor_unit])
    return ConfusionTensorBatch(dataset.ann_instance, dataset.ann_predictor, task, q)


# ---------------------------------------------------------------------------
# Differentiable pass over a batch of units


@dataclass
class Batch:
    units: np.ndarray           # unit ids in the batch
    annotations: np.ndarray     # annotation rows whose unit is in the batch
    ann_pos: np.ndarray         # position of each annotation's unit in ``units``
    predictor_units: np.ndarray  # distinct predictor units touched
    ann_pred_pos: np.ndarray    # position of each annotation's predictor unit
    labels: np.ndarray          # observed class per annotation
    unit_scatter: object = None       # sparse (units x annotations) incidence
    predictor_scatter: object = None  # sparse (predictor units x annotations)


def make_batch(dataset, units=None):
    units = _all_units(dataset) if units is None else np.asarray(units, dtype=np.int64)
    pos = np.full(dataset.num_units, -1, dtype=np.int64)
    pos[units] = np.arange(units.size)
    ann_unit = dataset.ann_unit
    annotations = np.flatnonzero(pos[ann_unit] >= 0)
    pu = dataset.ann_predictor_unit[annotations]
    predictor_units, inverse = np.unique(pu, return_inverse=True)
    ann_pos = pos[ann_unit[annotations]]
    inverse = inverse.reshape(-1)
    a = annotations.size
    ones = np.ones(a)
    cols = np.arange(a)
    return Batch(units, annotations, ann_pos, predictor_units, inverse,
                 dataset.ann_label[annotations],
                 sparse.csr_matrix((ones, (ann_pos, cols)), shape=(units.size, a)),
                 sparse.csr_matrix((ones, (inverse, cols)), shape=(predictor_units.size, a)))


def forward(params, config, dataset, batch, need_confusion=True):
    """Evaluate log p(y | x) for the batch units and, if requested, the log
    confusion entries ``log Q[k, observed]`` for the batch annotations."""
    c, L = config.num_classes, config.latent_dim
    x = instance_inputs(params, config, dataset, batch.units)
    h_logits, h_cache = nn.forward_with_cache(config.h_spec, params.theta, x)
    cache = {"batch": batch, "h_logits": h_logits, "h_cache": h_cache,
             "log_h": nn.log_softmax(h_logits), "need_confusion": need_confusion}
    if not need_confusion or batch.annotations.size == 0:
        cache["need_confusion"] = False
        cache["log_q_obs"] = np.zeros((batch.annotations.size, c))
        return cache
    d_out, d_cache = nn.forward_with_cache(config.d_spec, params.phi, x)
    r = predictor_inputs(params, config, dataset, batch.predictor_units)
    k_out, k_cache = nn.forward_with_cache(config.c_spec, params.psi, r)
    d = d_out.reshape(-1, c, c, L)[batch.ann_pos]
    k = k_out.reshape(-1, c, c, L)[batch.ann_pred_pos]
    log_q = nn.log_softmax(np.einsum("aklm,aklm->akl", d, k), axis=-1)
    cache.update(d_cache=d_cache, k_cache=k_cache, d_ann=d, k_ann=k, log_q=log_q,
                 log_q_obs=log_q[np.arange(batch.annotations.size), :, batch.labels])
    return cache


def backward(params, config, dataset, cache, weight_h, weight_q=None):
    """Gradient of ``sum(weight_h * log_h) + sum(weight_q * log_q_obs)`` with
    respect to every parameter group, as a :class:`Parameters`."""
    batch = cache["batch"]
    c = config.num_classes
    grads = params.zeros_like()

    h_prob = np.exp(cache["log_h"])
    g_h = weight_h - weight_h.sum(axis=1, keepdims=True) * h_prob
    grads.theta, g_x = nn.backward_from_cache(config.h_spec, cache["h_cache"], g_h)

    g_r = None
    if cache["need_confusion"] and weight_q is not None:
        a = batch.annotations.size
        q = np.exp(cache["log_q"])
        onehot = np.zeros((a, c))
        onehot[np.arange(a), batch.labels] = 1.0
        g_logits = weight_q[:, :, None] * (onehot[:, None, :] - q)
        g_d = batch.unit_scatter @ (g_logits[..., None] * cache["k_ann"]).reshape(a, -1)
        g_k = batch.predictor_scatter @ (g_logits[..., None] * cache["d_ann"]).reshape(a, -1)
        grads.phi, g_xd = nn.backward_from_cache(config.d_spec, cache["d_cache"], g_d)
        g_x = g_x + g_xd
        grads.psi, g_r = nn.backward_from_cache(config.c_spec, cache["k_cache"], g_k)

    tasks = config.num_tasks
    if config.instance_mode == "embedding":
        np.add.at(grads.instance_embeddings, batch.units // tasks, g_x[:, :config.instance_dim])
    if config.multi_label:
        np.add.at(grads.label_embeddings, batch.units % tasks, g_x[:, config.instance_dim:])
    if g_r is not None:
        if config.predictor_mode == "embedding":
            np.add.at(grads.predictor_embeddings, batch.predictor_units // tasks,
                      g_r[:, :config.predictor_dim])
        if config.multi_label:
            np.add.at(grads.label_embeddings, batch.predictor_units % tasks,
                      g_r[:, config.predictor_dim:])
    return grads


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params, config, seed=None, em_iteration=None, extra=None):
    """JSON checkpoint.  Floats are written with ``repr`` precision, so a
    reload reproduces every parameter bit-for-bit."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "seed": seed,
        "em_iteration": em_iteration,
        "parameters": {name: {"shape": list(a.shape), "values": a.ravel().tolist()}
                       for name, a in params.groups()},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    return path


def load_checkpoint(path):
    """Returns ``(params, config, meta)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    config = ModelConfig.from_dict(doc["config"])
    arrays = {name: np.array(g["values"], dtype=np.float64).reshape(g["shape"])
              for name, g in doc["parameters"].items()}
    params = Parameters(**arrays)
    meta = {k: doc.get(k) for k in ("seed", "em_iteration", "extra")}
    return params, config, meta
