import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_table
from ctphase.errors import ModelFormatError, TrainingError
from ctphase.features import FeatureTable
from ctphase.gbdt import (
    BoostedModel,
    Hyperparams,
    Tree,
    build_tree,
    find_best_split,
    grad_hess,
    load_model,
    mlogloss,
    save_model,
    softmax,
    train,
)
from oracles import brute_force_split, margins_by_traversal, node_rows, softmax_loss

FAST = Hyperparams(n_rounds=20)


# -- softmax / loss ----------------------------------------------------------


def test_softmax_uniform():
    assert np.allclose(softmax([0, 0, 0, 0]), 0.25, atol=0, rtol=0)


def test_softmax_closed_form():
    e = math.e
    expected = [e / (e + 3), 1 / (e + 3), 1 / (e + 3), 1 / (e + 3)]
    assert np.allclose(softmax([1, 0, 0, 0]), expected, rtol=1e-15, atol=0)


def test_softmax_large_margins_stable():
    p = softmax([1000.0, 0.0, -1000.0, 999.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1 / (1 + math.exp(-1)))


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(m, c):
    p = softmax(m)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.allclose(softmax(m + c), p, rtol=1e-9, atol=1e-15)


def test_mlogloss_examples():
    uniform = np.full((7, 4), 0.25)
    assert mlogloss(uniform, [0, 1, 2, 3, 3, 2, 1]) == pytest.approx(math.log(4), abs=1e-12)
    assert mlogloss(np.eye(4), [0, 1, 2, 3]) == 0.0
    p = np.array([[0.5, 0.5, 0, 0], [0.25, 0.25, 0.25, 0.25]])
    assert mlogloss(p, [0, 2]) == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-15)


def test_mlogloss_floor_and_empty():
    assert mlogloss(np.array([[1.0, 0, 0, 0]]), [1]) == pytest.approx(-math.log(1e-15))
    with pytest.raises(ValueError):
        mlogloss(np.zeros((0, 4)), [])


def test_grad_hess_examples():
    p = [0.25] * 4
    assert grad_hess(p, 2, 2) == (-0.75, 0.1875)
    assert grad_hess(p, 1, 2) == (0.25, 0.1875)


def test_grad_hess_finite_differences():
    rng = np.random.default_rng(1)
    step = 1e-5
    for _ in range(100):
        m = rng.normal(scale=1.5, size=4)
        label = int(rng.integers(4))
        p = softmax(m)
        for k in range(4):
            g, h = grad_hess(p, label, k)
            up, down = m.copy(), m.copy()
            up[k] += step
            down[k] -= step
            fd_g = (softmax_loss(list(up), label) - softmax_loss(list(down), label)) / (2 * step)
            assert abs(fd_g - g) <= 1e-6 * max(abs(g), abs(fd_g))
            fd_h = (grad_hess(softmax(up), label, k)[0] - grad_hess(softmax(down), label, k)[0]) / (2 * step)
            assert abs(fd_h - h) <= 1e-6 * max(abs(h), abs(fd_h))


# -- split finding -------------------------------------------------------------

X4 = np.array([[1.0], [2.0], [3.0], [4.0]])
G4 = np.array([-1.0, -1.0, 1.0, 1.0])


def test_no_gradient_no_split():
    assert find_best_split(X4, np.zeros(4), np.ones(4), Hyperparams()) is None


def test_separable_split():
    split = find_best_split(X4, G4, np.ones(4), Hyperparams())
    assert (split.feature, split.threshold, split.default_left) == (0, 2.5, True)
    assert split.gain == pytest.approx(4 / 3, rel=1e-15)
    oracle = brute_force_split(X4.tolist(), G4.tolist(), [1.0] * 4)
    assert oracle == (split.gain, 0, 2.5, True)


def test_missing_instance_joins_positive_side():
    X = np.vstack([X4, [[np.nan]]])
    g = np.append(G4, 1.0)
    split = find_best_split(X, g, np.ones(5), Hyperparams())
    assert (split.threshold, split.default_left) == (2.5, False)
    oracle = brute_force_split(X.tolist(), g.tolist(), [1.0] * 5)
    assert oracle[1:] == (0, 2.5, False)
    assert split.gain == oracle[0]


def test_min_child_weight_blocks_split():
    hp = Hyperparams(min_child_weight=2.5)
    assert find_best_split(X4, G4, np.ones(4), hp) is None


def test_gamma_blocks_split():
    assert find_best_split(X4, G4, np.ones(4), Hyperparams(gamma=2.0)) is None


def test_tie_prefers_lower_feature():
    X = np.hstack([X4, X4 * 10])
    split = find_best_split(X, G4, np.ones(4), Hyperparams())
    assert split.feature == 0


def test_all_missing_feature_has_no_candidates():
    X = np.full((4, 1), np.nan)
    assert find_best_split(X, G4, np.ones(4), Hyperparams()) is None


def _random_case(rng):
    n = int(rng.integers(2, 51))
    n_feat = int(rng.integers(1, 5))
    X = np.where(
        rng.random((n, n_feat)) < 0.5,
        rng.integers(0, 6, size=(n, n_feat)).astype(float),
        np.round(rng.normal(size=(n, n_feat)), 2),
    )
    X[rng.random((n, n_feat)) < 0.2] = np.nan
    return X


def test_find_best_split_matches_brute_force_continuous():
    rng = np.random.default_rng(7)
    for _ in range(300):
        X = _random_case(rng)
        g = rng.normal(size=len(X))
        h = rng.uniform(0.01, 1.0, size=len(X))
        hp = Hyperparams(reg_lambda=float(rng.choice([0.5, 1.0, 2.0])), min_child_weight=float(rng.choice([0.0, 0.5, 1.0])))
        got = find_best_split(X, g, h, hp)
        want = brute_force_split(X.tolist(), g.tolist(), h.tolist(), hp.reg_lambda, hp.gamma, hp.min_child_weight)
        if want is None:
            assert got is None
            continue
        assert (got.feature, got.threshold, got.default_left) == want[1:]
        assert got.gain == pytest.approx(want[0], rel=1e-9, abs=1e-12)


# -- trees ---------------------------------------------------------------------


def test_single_leaf_when_no_split():
    g = np.array([0.5, -0.25, 1.0])
    h = np.array([0.25, 0.25, 0.5])
    tree = build_tree(np.ones((3, 1)), g, h, Hyperparams(max_depth=1))
    assert tree.n_nodes == 1
    assert tree.value[0] == pytest.approx(-g.sum() / (h.sum() + 1.0), rel=1e-15)


def test_separable_tree_leaves():
    tree = build_tree(X4, G4, np.ones(4), Hyperparams())
    assert tree.n_nodes == 3
    assert tree.threshold[0] == 2.5
    assert tree.value[tree.left[0]] == pytest.approx(2 / 3, rel=1e-15)
    assert tree.value[tree.right[0]] == pytest.approx(-2 / 3, rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_tree_depth_bounded(seed, depth):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    X[rng.random(X.shape) < 0.2] = np.nan
    tree = build_tree(X, rng.normal(size=60), rng.uniform(0.1, 1, 60), Hyperparams(max_depth=depth, min_child_weight=0))
    assert tree.depth() <= depth


def test_tree_nodes_match_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(40):
        X = _random_case(rng)
        g = rng.normal(size=len(X))
        h = rng.uniform(0.05, 1.0, size=len(X))
        hp = Hyperparams(max_depth=3, min_child_weight=0.2)
        tree = build_tree(X, g, h, hp)
        nodes = tree.to_nodes()
        rows = node_rows(nodes, X.tolist())
        for i, node in enumerate(nodes):
            sub = rows[i]
            Xs = [X[r].tolist() for r in sub]
            want = brute_force_split(Xs, [g[r] for r in sub], [h[r] for r in sub], 1.0, 0.0, 0.2)
            if "leaf" in node:
                depth_ok = want is None or _depth_of(nodes, i) == hp.max_depth
                assert depth_ok
                expected = -sum(g[r] for r in sub) / (sum(h[r] for r in sub) + 1.0)
                assert node["leaf"] == pytest.approx(expected, rel=1e-12, abs=1e-15)
            else:
                assert (node["feature"], node["threshold"], node["default_left"]) == want[1:]


def _depth_of(nodes, target):
    def walk(i, d):
        if i == target:
            return d
        if "leaf" in nodes[i]:
            return None
        return walk(nodes[i]["left"], d + 1) or walk(nodes[i]["right"], d + 1)

    return walk(0, 0)


# -- training / prediction -----------------------------------------------------


def test_default_training_makes_800_trees(small_table):
    model = train(small_table)
    assert len(model.trees) == 800
    assert model.n_rounds == 200


def test_train_loss_non_increasing(small_table):
    model = train(small_table)
    losses = np.array(model.history["train_mlogloss"])
    assert np.all(np.diff(losses) <= 0)
    assert losses[-1] < losses[0]


def test_eval_curve_recorded(small_table):
    model = train(small_table.subset(range(80)), FAST, eval_table=small_table.subset(range(80, 120)))
    assert len(model.history["eval_mlogloss"]) == FAST.n_rounds


def test_train_errors():
    X = np.zeros((3, 16))
    one_class = FeatureTable(["a", "b", "c"], ["p", "p", "q"], [1, 1, 1], X)
    with pytest.raises(TrainingError, match="two distinct"):
        train(one_class, FAST)
    empty = FeatureTable([], [], [], np.zeros((0, 16)))
    with pytest.raises(TrainingError, match="empty"):
        train(empty, FAST)


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=0)
    with pytest.raises(ValueError):
        Hyperparams(max_depth=0)
    with pytest.raises(ValueError):
        Hyperparams(n_rounds=0)
    with pytest.raises(ValueError):
        Hyperparams(reg_lambda=-1)


def test_zero_round_model_predicts_uniform():
    model = BoostedModel(trees=[], hyperparams=Hyperparams())
    m = model.predict_margins(np.zeros(16))
    assert np.array_equal(m, np.zeros(4))
    assert np.allclose(model.predict_proba(np.zeros(16)), 0.25)


def _hand_model(default_left=True):
    split = Tree([0, -1, -1], [2.5, 0, 0], [default_left, False, False], [1, -1, -1], [2, -1, -1], [0, 2 / 3, -2 / 3])
    leaf0 = Tree([-1], [0], [False], [-1], [-1], [0.0])
    hp = Hyperparams(n_rounds=1)
    return BoostedModel(trees=[split, leaf0, leaf0, leaf0], hyperparams=hp)


def test_hand_built_tree_traversal():
    model = _hand_model()
    x = np.zeros(16)
    x[0] = 1.0
    assert model.predict_margins(x)[0] == 0.05 * (2 / 3)
    x[0] = 3.0
    assert model.predict_margins(x)[0] == 0.05 * (-2 / 3)


def test_missing_follows_stored_direction():
    x = np.full(16, np.nan)
    assert model_margin0(_hand_model(default_left=False), x) == 0.05 * (-2 / 3)
    assert model_margin0(_hand_model(default_left=True), x) == 0.05 * (2 / 3)


def model_margin0(model, x):
    return model.predict_margins(x)[0]


def test_predict_matches_traversal_oracle(small_table):
    model = train(small_table, FAST)
    doc = model.to_dict()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 16)) * 2
    X[rng.random(X.shape) < 0.3] = np.nan
    batch = model.predict_margins(X)
    for i, x in enumerate(X):
        assert batch[i].tolist() == margins_by_traversal(doc, x.tolist())


def test_monotone_transform_keeps_routing():
    table = random_table(80, seed=4, missing=0.2)
    X2 = table.X ** 3 + 5 * table.X  # strictly increasing, NaN stays NaN
    warped = FeatureTable(table.scan_ids, table.patient_ids, table.phases, X2)
    a, b = train(table, FAST), train(warped, FAST)
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.apply(table.X), tb.apply(X2))
    assert np.array_equal(a.predict(table.X), b.predict(X2))


# -- persistence ---------------------------------------------------------------


def test_save_load_roundtrip(tmp_path, small_table):
    model = train(small_table, FAST)
    save_model(model, tmp_path / "m.json")
    loaded = load_model(tmp_path / "m.json")
    X = np.random.default_rng(2).normal(size=(100, 16)) * 2
    X[::3, ::2] = np.nan
    assert np.max(np.abs(model.predict_margins(X) - loaded.predict_margins(X))) <= 1e-12
    assert loaded.organ_order == model.organ_order
    assert loaded.class_order == (0, 1, 2, 3)


def test_model_file_schema(tmp_path, small_table):
    save_model(train(small_table, FAST), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert {"schema_version", "hyperparams", "class_order", "organ_order", "base_margin", "trees"} <= set(doc)
    assert doc["base_margin"] == [0.0] * 4
    assert doc["trees"][5]["class"] == 1 and doc["trees"][5]["round"] == 1


def test_truncated_model_file(tmp_path, small_table):
    save_model(train(small_table, FAST), tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    (tmp_path / "m.json").write_text(text[: len(text) // 2])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("organ_order"),
        lambda d: d.update(schema_version=99),
        lambda d: d["trees"].pop(),
        lambda d: d["trees"][0]["nodes"][0].update(left=0),
        lambda d: d["trees"][0]["nodes"][0].update(feature=16),
    ],
)
def test_malformed_model_rejected(tmp_path, small_table, mutate):
    doc = train(small_table, FAST).to_dict()
    mutate(doc)
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")


def test_training_is_deterministic(tmp_path, small_table):
    save_model(train(small_table, FAST), tmp_path / "a.json")
    save_model(train(small_table, FAST), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
