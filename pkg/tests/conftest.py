import numpy as np
import pytest

from lia.data import AnnotationDataset
from lia.model import ModelConfig, init_parameters


def tiny_dataset(num_instances=3, num_predictors=2, num_classes=2, feature_dim=3,
                 predictor_dim=None, seed=0, soft=False, tasks=None, density=1.0):
    """Random dataset where every instance has at least one annotation."""
    rng = np.random.default_rng(seed)
    t = 1 if tasks is None else tasks
    pairs = []
    for i in range(num_instances):
        for task in range(t):
            chosen = [j for j in range(num_predictors) if rng.random() < density]
            if not chosen:
                chosen = [int(rng.integers(num_predictors))]
            pairs += [(i, j, task) for j in chosen]
    ann_i, ann_j, ann_t = (np.array(x) for x in zip(*pairs))
    labels = rng.integers(num_classes, size=len(pairs))
    soft_labels = None
    if soft:
        soft_labels = rng.dirichlet(np.ones(num_classes), size=len(pairs))
        # move the largest entry onto the hard label
        top = soft_labels.argmax(axis=1)
        rows = np.arange(len(pairs))
        soft_labels[rows, top], soft_labels[rows, labels] = (soft_labels[rows, labels],
                                                             soft_labels[rows, top])
    return AnnotationDataset(
        num_classes=num_classes,
        instance_ids=[f"i{i}" for i in range(num_instances)],
        predictor_ids=[f"p{j}" for j in range(num_predictors)],
        ann_instance=ann_i, ann_predictor=ann_j, ann_label=labels,
        soft_labels=soft_labels,
        features=None if feature_dim is None else rng.standard_normal((num_instances, feature_dim)),
        predictor_features=None if predictor_dim is None else rng.standard_normal(
            (num_predictors, predictor_dim)),
        ann_task=None if tasks is None else ann_t,
        task_names=None if tasks is None else [f"t{k}" for k in range(tasks)],
        name="tiny",
    )


def small_model(dataset, seed=0, hidden=(5,), latent_dim=2, **kw):
    config = ModelConfig.for_dataset(dataset, h_hidden=hidden, d_hidden=hidden,
                                     latent_dim=latent_dim, embedding_dim=4, **kw)
    return config, init_parameters(config, seed)


@pytest.fixture
def dataset():
    return tiny_dataset()


@pytest.fixture
def model(dataset):
    return small_model(dataset)


# One line per acceptance criterion, filled in by test_acceptance.py and
# printed at the end of the session.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
