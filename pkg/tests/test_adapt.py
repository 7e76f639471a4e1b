import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import specklepc.adapt as adapt
from _tasks import shifted_gaussian_task
from specklepc.adapt import (PseudoLabelSet, SelfTrainConfig, UnlabeledSet, cbst_select, label_entropy,
                             pseudo_labels_from_proba, quasi_balanced_select, round_train_config, select,
                             self_train, spst_select, write_round_report, write_selection_csv)
from specklepc.classify import LabeledSet, TrainConfig, evaluate, model_to_bytes, train


def _pls_from_counts(counts, seed=0):
    """Confident set with the given per-class counts and random confidences in (0.8, 1)."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(counts)), counts)
    rng.shuffle(labels)
    conf = rng.uniform(0.81, 1.0, len(labels))
    return PseudoLabelSet(len(counts), 0.8, np.arange(len(labels)), labels, conf,
                          np.zeros(len(labels), dtype=bool))


def _random_proba(rng, n, k, sharp=4.0):
    return rng.dirichlet(np.full(k, 1.0 / sharp), size=n)


# --------------------------------------------------------------------------
# pseudo labels


def test_pseudo_label_rule():
    pls = pseudo_labels_from_proba(np.array([[0.9, 0.05, 0.05], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]), 0.8)
    assert pls.sample_index.tolist() == [0]
    assert pls.label.tolist() == [0]
    assert pls.confidence.tolist() == [0.9]
    assert pls.counts.tolist() == [1, 0, 0]


def test_confidence_equal_to_threshold_unassigned():
    pls = pseudo_labels_from_proba(np.array([[0.75, 0.25]]), 0.75)
    assert pls.total == 0


def test_empty_set_weights():
    pls = pseudo_labels_from_proba(np.full((3, 3), 1 / 3), 0.8)
    assert pls.total == 0
    np.testing.assert_array_equal(pls.weights, 1.0)
    assert spst_select(pls).selected_indices().size == 0
    assert quasi_balanced_select(pls).selected_indices().size == 0


# --------------------------------------------------------------------------
# selection rules


def test_qbst_worked_example():
    pls = quasi_balanced_select(_pls_from_counts([50, 30, 20]))
    np.testing.assert_allclose(pls.weights, [0.5, 0.7, 0.8], atol=1e-12)
    assert pls.selected_counts.tolist() == [25, 21, 16]


def test_qbst_balanced_classes():
    pls = quasi_balanced_select(_pls_from_counts([12] * 4))
    np.testing.assert_allclose(pls.weights, 0.75)
    assert pls.selected_counts.tolist() == [9] * 4


def test_qbst_single_class_floor():
    pls = quasi_balanced_select(_pls_from_counts([0, 40, 0]))
    assert pls.weights[1] == 0.0
    assert pls.selected_counts.tolist() == [0, 1, 0]
    # and it is the most confident sample
    assert pls.confidence[pls.selected][0] == pls.confidence.max()


def test_qbst_takes_most_confident_with_index_ties():
    labels = np.array([0, 0, 0, 0, 1, 1])
    conf = np.array([0.9, 0.95, 0.9, 0.85, 0.99, 0.9])
    pls = PseudoLabelSet(2, 0.8, np.array([3, 1, 2, 0, 4, 5]), labels, conf, np.zeros(6, dtype=bool))
    out = quasi_balanced_select(pls)  # L = (4, 2): quotas ceil(4 * 2/6) = 2, ceil(2 * 4/6) = 2
    # class 0: 0.95 (sample 1) then the 0.9 tie between samples 3 and 2 goes to sample 2
    assert sorted(out.selected_indices().tolist()) == [1, 2, 4, 5]


def test_spst_selects_everything():
    pls = spst_select(_pls_from_counts([5, 7, 1]))
    assert pls.selected.all()
    assert pls.selected_counts.tolist() == [5, 7, 1]


def test_cbst_examples():
    base = _pls_from_counts([50, 30, 20])
    assert cbst_select(base, 0.5).selected_counts.tolist() == [25, 15, 10]
    np.testing.assert_array_equal(cbst_select(base, 1.0).selected, spst_select(base).selected)
    sel = cbst_select(_pls_from_counts([33, 17, 9]), 0.3)
    frac = sel.selected_counts / np.array([33, 17, 9])
    assert np.all(frac >= 0.3) and np.all(frac - 0.3 < 1 / np.array([33, 17, 9]))
    with pytest.raises(ValueError):
        cbst_select(base, 0.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.5, 0.95))
def test_selection_invariants(seed, theta):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    proba = _random_proba(rng, int(rng.integers(1, 300)), k)
    pls = pseudo_labels_from_proba(proba, theta)
    assert np.all(pls.confidence > theta)
    np.testing.assert_array_equal(pls.label, proba[pls.sample_index].argmax(axis=1))
    assert pls.counts.sum() == pls.total
    q, s = quasi_balanced_select(pls), spst_select(pls)
    assert np.all(q.selected_counts <= s.selected_counts)
    nz = pls.counts > 0
    mu = pls.weights
    assert np.all((mu[nz] >= 0) & (mu[nz] < 1))
    expected = np.array([max(1, math.ceil(m * c)) if c else 0 for m, c in zip(mu, pls.counts)])
    # exact integer arithmetic may differ from the float product only when mu * L_k is an integer
    assert np.all(np.abs(q.selected_counts - expected) <= 1)
    ratio = q.selected_counts[nz] / pls.counts[nz]
    assert np.all(ratio - mu[nz] < 1 / pls.counts[nz] + 1e-12)
    assert np.all((ratio >= mu[nz] - 1e-12) | (q.selected_counts[nz] == 1))
    # selected samples are a subset of the confident ones
    assert set(q.selected_indices()) <= set(pls.sample_index)


@given(st.lists(st.integers(1, 500), min_size=2, max_size=10))
def test_mu_monotone(counts):
    pls = _pls_from_counts(counts)
    mu = pls.weights
    c = np.array(counts)
    for i in range(len(c)):
        for j in range(len(c)):
            if c[i] > c[j]:
                assert mu[i] < mu[j]


def test_label_entropy():
    assert label_entropy(np.array([0, 1, 2, 3]), 4) == pytest.approx(math.log(4))
    assert label_entropy(np.array([1, 1, 1]), 3) == 0.0
    assert label_entropy(np.array([], dtype=int), 3) == 0.0


# --------------------------------------------------------------------------
# config


def test_threshold_schedule():
    cfg = SelfTrainConfig()
    th = [cfg.threshold(i) for i in range(cfg.rounds)]
    assert th[0] == 0.8
    np.testing.assert_allclose(np.diff(th), 5e-3, rtol=0, atol=1e-15)
    assert np.all(np.diff(th) > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SelfTrainConfig(theta_0=1.0)
    with pytest.raises(ValueError):
        SelfTrainConfig(epsilon=-1e-3)
    with pytest.raises(ValueError):
        SelfTrainConfig(theta_0=0.9, epsilon=0.01, rounds=10)
    with pytest.raises(ValueError):
        SelfTrainConfig(method="nope")


# --------------------------------------------------------------------------
# loop


FAST = dict(inner_learning_rate=0.05, epochs_per_round=30)


def test_rounds_zero_returns_warmup():
    src, xt, _ = shifted_gaussian_task(0, n_target=200)
    tc = TrainConfig(epochs=20)
    res = self_train(src, UnlabeledSet(xt), SelfTrainConfig(rounds=0), tc, 4)
    assert res.model is res.warmup and res.rounds == []
    assert model_to_bytes(res.model) == model_to_bytes(train(src, tc, 4))


def test_no_shift_does_not_degrade():
    # target drawn from the source distribution; well-separated clusters
    src, _, _ = shifted_gaussian_task(1, shift=0.0, sep=4.0, n_source=300)
    perm = np.random.default_rng(0).permutation(len(src))
    train_idx, target_idx, test_idx = perm[:400], perm[400:800], perm[800:]
    tc = TrainConfig(epochs=50)
    warm = train(src.subset(train_idx), tc, 4)
    test = src.subset(test_idx)
    cfg = SelfTrainConfig(method="spst", epsilon=0.0, rounds=1, **FAST)
    res = self_train(src.subset(train_idx), UnlabeledSet(src.features[target_idx]), cfg, tc, 4, warmup=warm)
    assert not res.aborted
    assert evaluate(res.model, test)["accuracy"] >= evaluate(warm, test)["accuracy"] - 0.02


def test_round_models_trained_from_scratch_on_target_only(monkeypatch):
    src, xt, yt = shifted_gaussian_task(2, n_target=400)
    tc = TrainConfig(epochs=50)
    cfg = SelfTrainConfig(rounds=3, **FAST)
    calls = []
    real_train = adapt.train

    def spy(data, train_cfg, n_classes, *a, **kw):
        calls.append((data, train_cfg))
        return real_train(data, train_cfg, n_classes, *a, **kw)

    monkeypatch.setattr(adapt, "train", spy)
    res = self_train(src, UnlabeledSet(xt), cfg, tc, 4, eval_labels=yt)
    assert len(calls) == 1 + len(res.rounds)
    target_rows = {r.tobytes() for r in xt}
    source_rows = {r.tobytes() for r in src.features}
    for i, (data, train_cfg) in enumerate(calls[1:]):
        rows = {r.tobytes() for r in data.features}
        assert rows <= target_rows and not rows & source_rows
        assert len(data) == sum(res.rounds[i].selected_counts)
        assert train_cfg == round_train_config(cfg, tc, i)
        # a detached retraining on the same selected set reproduces the round model exactly
        again = real_train(LabeledSet(data.features, data.labels), train_cfg, 4, require_all_classes=False)
        if i == len(calls) - 2:
            np.testing.assert_array_equal(again.weights, res.model.weights)
    seeds = [c[1].seed for c in calls[1:]]
    assert len(set(seeds)) == len(seeds)


def test_round_reports_consistent():
    src, xt, yt = shifted_gaussian_task(3, n_target=500)
    cfg = SelfTrainConfig(rounds=4, **FAST)
    res = self_train(src, UnlabeledSet(xt), cfg, TrainConfig(epochs=50), 4, eval_labels=yt)
    for i, rep in enumerate(res.rounds):
        assert rep.theta == cfg.threshold(i)
        assert sum(rep.confident_counts) == rep.confident_total
        expected = [max(1, -(-(c * (rep.confident_total - c)) // rep.confident_total)) if c else 0
                    for c in rep.confident_counts]
        assert rep.selected_counts == expected
        assert 0 <= rep.pseudo_label_precision <= 1


def test_empty_selection_aborts_with_last_generator():
    src, xt, _ = shifted_gaussian_task(4, n_target=100)
    tc = TrainConfig(epochs=1)  # barely trained: nothing reaches 0.99
    res = self_train(src, UnlabeledSet(xt), SelfTrainConfig(theta_0=0.99, epsilon=0.0, rounds=3), tc, 4)
    assert res.aborted and len(res.rounds) == 1 and res.rounds[0].aborted
    assert res.model is res.warmup


def test_qbst_entropy_at_least_spst_on_imbalanced_target():
    src, xt, yt = shifted_gaussian_task(0)
    tc = TrainConfig(epochs=50)
    warm = train(src, tc, 4)
    ent = {}
    for method in ("qbst", "spst"):
        res = self_train(src, UnlabeledSet(xt), SelfTrainConfig(method=method, rounds=5, **FAST), tc, 4,
                         warmup=warm)
        assert not res.aborted
        ent[method] = [r.selected_entropy for r in res.rounds]
    assert all(q >= s for q, s in zip(ent["qbst"], ent["spst"]))


def test_select_dispatch():
    pls = _pls_from_counts([10, 5])
    assert select(pls, SelfTrainConfig(method="spst")).selected.all()
    assert select(pls, SelfTrainConfig(method="cbst", cbst_proportion=0.2)).selected_counts.tolist() == [2, 1]
    assert select(pls, SelfTrainConfig()).selected_counts.tolist() == [4, 4]


def test_report_and_csv_export(tmp_path):
    src, xt, yt = shifted_gaussian_task(5, n_target=200)
    res = self_train(src, UnlabeledSet(xt), SelfTrainConfig(rounds=2, **FAST), TrainConfig(epochs=30), 4,
                     eval_labels=yt)
    write_round_report(res.rounds, tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == len(res.rounds)
    rec = json.loads(lines[0])
    assert {"theta", "confident_total", "confident_counts", "selected_counts", "selected_entropy"} <= set(rec)
    pls = quasi_balanced_select(_pls_from_counts([3, 2]))
    write_selection_csv(pls, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "sample_index,label,confidence,selected" and len(rows) == 6
