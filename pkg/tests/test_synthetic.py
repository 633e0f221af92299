import json

import numpy as np
import pytest

from lia.data import load_dataset, load_ground_truth
from lia.errors import ValidationError
from lia.synthetic import (ORACLE_CORRECT, ORACLE_WRONG, PredictorGroup, SyntheticSpec,
                           add_oracles, sample_dataset, write_synthetic)


def empirical_confusion(dataset, truth, predictors):
    y = truth.aligned(dataset)[dataset.ann_instance]
    mask = np.isin(dataset.ann_predictor, predictors)
    c = dataset.num_classes
    counts = np.zeros((c, c))
    np.add.at(counts, (y[mask], dataset.ann_label[mask]), 1)
    return counts / counts.sum(axis=1, keepdims=True), counts.sum(axis=1)


class TestSample:
    def test_identity_channel(self):
        spec = SyntheticSpec(num_instances=200, num_classes=3,
                             predictors=[PredictorGroup(4, 1.0)], label_probability=0.7, seed=1)
        ds, truth = sample_dataset(spec)
        np.testing.assert_array_equal(ds.ann_label, truth.aligned(ds)[ds.ann_instance])

    def test_uniform_channel(self):
        spec = SyntheticSpec(num_instances=10000, predictors=[PredictorGroup(1, 0.5)], seed=2)
        ds, truth = sample_dataset(spec)
        agree = np.mean(ds.ann_label == truth.aligned(ds)[ds.ann_instance])
        assert agree == pytest.approx(0.5, abs=0.02)

    def test_confusion_row(self):
        spec = SyntheticSpec(num_instances=20000,
                             predictors=[PredictorGroup(1, confusion=[[0.8, 0.2], [0.3, 0.7]])],
                             seed=3)
        ds, truth = sample_dataset(spec)
        freq, _ = empirical_confusion(ds, truth, [0])
        assert freq[0, 0] == pytest.approx(0.8, abs=0.02)
        assert freq[1, 1] == pytest.approx(0.7, abs=0.02)

    def test_three_standard_errors(self):
        conf = np.array([[0.6, 0.3, 0.1], [0.1, 0.8, 0.1], [0.25, 0.25, 0.5]])
        spec = SyntheticSpec(num_instances=10000, num_classes=3,
                             predictors=[PredictorGroup(3, confusion=conf.tolist())], seed=4)
        ds, truth = sample_dataset(spec)
        freq, n = empirical_confusion(ds, truth, [0, 1, 2])
        se = np.sqrt(conf * (1 - conf) / n[:, None])
        assert np.all(np.abs(freq - conf) <= 3 * se)

    def test_redundancy(self):
        spec = SyntheticSpec(num_instances=30, predictors=[PredictorGroup(5)], redundancy=3)
        ds, _ = sample_dataset(spec)
        np.testing.assert_array_equal(ds.annotation_counts(), 3)

    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(num_instances=50, predictors=[PredictorGroup(3)], seed=9)
        a, ta = sample_dataset(spec)
        b, tb = sample_dataset(spec)
        assert a.equals(b, atol=0) and ta == tb

    def test_seed_changes_draws_not_statistics(self):
        agreements = []
        for seed in range(3):
            spec = SyntheticSpec(num_instances=5000, predictors=[PredictorGroup(2, 0.7)], seed=seed)
            ds, truth = sample_dataset(spec)
            agreements.append(np.mean(ds.ann_label == truth.aligned(ds)[ds.ann_instance]))
        assert len(set(agreements)) == 3
        np.testing.assert_allclose(agreements, 0.7, atol=0.02)

    def test_clusters_separate_classes(self):
        spec = SyntheticSpec(num_instances=2000, class_separation=6.0, seed=0)
        ds, truth = sample_dataset(spec)
        y = truth.aligned(ds)
        means = np.array([ds.features[y == k].mean(axis=0) for k in range(2)])
        assert np.linalg.norm(means[0] - means[1]) == pytest.approx(6.0, rel=0.05)


class TestSpec:
    @pytest.mark.parametrize("kw", [
        {"num_instances": 0}, {"num_classes": 1}, {"predictors": []},
        {"redundancy": 9}, {"label_probability": 1.5},
        {"predictors": [{"count": 2, "diagonal": 1.2}]},
        {"predictors": [{"count": 1, "confusion": [[0.5, 0.6], [0.5, 0.5]]}]},
        {"feature_dim": 1},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            SyntheticSpec(**{"num_instances": 10, **kw})

    def test_lists_every_field(self):
        with pytest.raises(ValidationError) as info:
            SyntheticSpec(num_instances=0, num_classes=1, predictors=[])
        for name in ("num_instances", "num_classes", "predictors"):
            assert name in str(info.value)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            SyntheticSpec.from_dict({"num_instances": 5, "colour": "red"})

    def test_json_round_trip(self, tmp_path):
        spec = SyntheticSpec(num_instances=5, predictors=[PredictorGroup(2, [0.9, 0.6])], seed=3)
        (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
        assert SyntheticSpec.from_json(tmp_path / "s.json") == spec


class TestOracles:
    def test_agreement(self):
        spec = SyntheticSpec(num_instances=40, num_classes=3, predictors=[PredictorGroup(3)],
                             redundancy=2)
        ds, truth = sample_dataset(spec)
        with_oracles = add_oracles(ds, truth)
        assert with_oracles.num_predictors == ds.num_predictors + 2
        y = truth.aligned(with_oracles)[with_oracles.ann_instance]
        for pid, expected in ((ORACLE_CORRECT, 1.0), (ORACLE_WRONG, 0.0)):
            j = with_oracles.predictor_ids.index(pid)
            mask = with_oracles.ann_predictor == j
            assert mask.sum() == ds.num_instances
            assert np.mean(with_oracles.ann_label[mask] == y[mask]) == expected
        wrong = with_oracles.ann_label[with_oracles.ann_predictor == ds.num_predictors + 1]
        np.testing.assert_array_equal(wrong, (truth.aligned(ds) + 1) % 3)

    def test_missing_truth(self):
        ds, truth = sample_dataset(SyntheticSpec(num_instances=5))
        with pytest.raises(ValidationError):
            add_oracles(ds, None)
        partial = type(truth)({k: v for k, v in list(truth.labels.items())[:3]})
        with pytest.raises(ValidationError):
            add_oracles(ds, partial)


def test_write_synthetic(tmp_path):
    spec = SyntheticSpec(num_instances=10, predictors=[PredictorGroup(3)], redundancy=3, seed=5)
    paths = write_synthetic(spec, tmp_path)
    ds = load_dataset(paths["annotations"], paths["features"], paths["predictors"])
    assert ds.num_annotations == 30
    expected, truth = sample_dataset(spec)
    assert ds.equals(expected.replace(name=ds.name))
    np.testing.assert_array_equal(load_ground_truth(paths["ground_truth"], ds).aligned(ds),
                                  truth.aligned(expected))
