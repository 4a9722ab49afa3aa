import itertools
import math

import numpy as np
import pytest

from vcrb_lab.boosting import Dataset, GBDTModel, TreeParams, load_model, predict_margin, train
from vcrb_lab.explain import (Condition, DecisionPath, InteractionMatrix, bootstrap_null, extract_paths, footrule,
                              interaction_matrix, max_footrule, order_k_interactions, rank_elements, rank_matrix,
                              read_matrix, shapley_interaction_values, shapley_interactions, upper_elements,
                              write_matrix)

NAMES = ("A", "B", "C")

HAND = {
    "ensemble_two_tree.json": [[0.25, 0.0625, 0.0], [0.0625, -0.5, 0.03125], [0.0, 0.03125, 0.0]],
    "ensemble_deep_path.json": [[0.03125, 0.1875, 0.03125], [0.1875, 0.0, 0.03125], [0.03125, 0.03125, 0.0]],
    "ensemble_three_trees.json": [[0.125, 0.25, 0.0], [0.25, -1.0, 0.0], [0.0, 0.0, 0.0]],
}


def path(features, c, w):
    return DecisionPath(tuple(Condition(f, 0.0, True, True) for f in features), c, w, 0, 0)


@pytest.mark.parametrize("name", sorted(HAND))
def test_fixture_matrices_by_hand(fixtures_dir, name):
    m = interaction_matrix(extract_paths(load_model(fixtures_dir / name)), NAMES)
    assert m.values.tolist() == HAND[name]
    assert np.array_equal(m.values, m.values.T)


def test_paths_of_two_tree_fixture(fixtures_dir):
    paths = extract_paths(load_model(fixtures_dir / "ensemble_two_tree.json"))
    got = [(p.tree_index, [(c.feature_id, c.threshold, c.goes_left) for c in p.conditions], p.contribution, p.support)
           for p in paths]
    assert got == [
        (0, [(0, 0.5, False)], 0.5, 0.5),
        (0, [(0, 0.5, True), (1, 1.0, True)], 1.0, 0.25),
        (0, [(0, 0.5, True), (1, 1.0, False)], -0.5, 0.25),
        (1, [(1, 0.0, True)], -1.0, 0.5),
        (1, [(1, 0.0, False), (2, 3.0, True)], 2.0, 0.125),
        (1, [(1, 0.0, False), (2, 3.0, False)], -0.5, 0.375),
    ]


def test_support_from_rows_sums_to_one_per_tree():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(100, 3)), rng.integers(0, 2, 100), NAMES)
    model = train(ds, TreeParams(iterations=4, max_depth=3))
    paths = extract_paths(model, ds)
    assert len(paths) == sum(len(t.leaves) for t in model.trees)
    for t in range(4):
        assert sum(p.support for p in paths if p.tree_index == t) == pytest.approx(1.0, abs=1e-9)


def test_stump_gives_two_paths():
    rng = np.random.default_rng(1)
    ds = Dataset(rng.normal(size=(50, 1)), rng.integers(0, 2, 50), ("A",))
    paths = extract_paths(train(ds, TreeParams(iterations=1, max_depth=1, min_samples_leaf=1)), ds)
    assert len(paths) == 2 and sum(p.support for p in paths) == pytest.approx(1.0)


def test_eq1_worked_examples():
    m = interaction_matrix([path([0], 2.0, 0.5), path([0], -1.0, 0.5)], NAMES)
    assert m["A", "A"] == 0.25 and m["A", "B"] == 0.0
    m = interaction_matrix([path([0, 1, 2], 1.0, 0.1)], NAMES)
    assert m["A", "B"] == m["A", "C"] == m["B", "C"] == pytest.approx(0.1)
    assert m["A", "A"] == 0.0


def test_order_k_partition(fixtures_dir):
    deep = extract_paths(load_model(fixtures_dir / "ensemble_deep_path.json"))
    assert order_k_interactions(deep, NAMES, 3)["A", "B"] == 0.03125
    assert order_k_interactions(deep, NAMES, 2)["A", "B"] == 0.5
    assert order_k_interactions(deep, NAMES, 1).values.tolist() == [[0.03125, 0, 0], [0, 0, 0], [0, 0, 0]]
    assert not order_k_interactions(deep, NAMES, 4).values.any()
    for name in ("ensemble_two_tree.json", "ensemble_three_trees.json"):
        paths = extract_paths(load_model(fixtures_dir / name))
        one, two = order_k_interactions(paths, NAMES, 1), order_k_interactions(paths, NAMES, 2)
        assert np.array_equal(np.diag(np.diag(one.values)), one.values)
        assert np.array_equal(one.values + two.values, interaction_matrix(paths, NAMES).values)


def test_matrix_is_invariant_to_tree_order(fixtures_dir):
    model = load_model(fixtures_dir / "ensemble_three_trees.json")
    flipped = GBDTModel(model.base_score, model.learning_rate, model.trees[::-1], model.feature_names)
    a = interaction_matrix(extract_paths(model), NAMES).values
    b = interaction_matrix(extract_paths(flipped), NAMES).values
    assert np.allclose(a, b, rtol=0, atol=1e-15)


# --------------------------------------------------------------------------- Shapley


def naive_shapley(model, background, x):
    """Full enumeration over all M features of the interventional game."""
    M = len(model.feature_names)

    def v(S):
        rows = background.copy()
        rows[:, list(S)] = x[list(S)]
        return predict_margin(model, rows).mean()

    cache = {S: v(S) for r in range(M + 1) for S in itertools.combinations(range(M), r)}
    val = lambda S: cache[tuple(sorted(S))]
    f = math.factorial
    phi = np.zeros(M)
    inter = np.zeros((M, M))
    for i in range(M):
        rest = [k for k in range(M) if k != i]
        for r in range(M):
            for S in itertools.combinations(rest, r):
                phi[i] += f(r) * f(M - r - 1) / f(M) * (val(S + (i,)) - val(S))
    for i, j in itertools.combinations(range(M), 2):
        rest = [k for k in range(M) if k not in (i, j)]
        for r in range(M - 1):
            for S in itertools.combinations(rest, r):
                w = f(r) * f(M - r - 2) / (2 * f(M - 1))
                inter[i, j] += w * (val(S + (i, j)) - val(S + (i,)) - val(S + (j,)) + val(S))
        inter[j, i] = inter[i, j]
    out = inter.copy()
    out[np.diag_indices(M)] = phi - inter.sum(axis=1)
    return out


def random_model(seed, M=None):
    rng = np.random.default_rng(seed)
    M = M or int(rng.integers(2, 7))
    X = rng.normal(size=(60, M))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = rng.integers(0, 2, 60)
    params = TreeParams(iterations=int(rng.integers(1, 5)), max_depth=int(rng.integers(1, 4)), min_samples_leaf=2,
                        learning_rate=0.5, l2_regularization=0.5)
    return train(Dataset(X, y, tuple(f"f{k}" for k in range(M))), params), X


@pytest.mark.parametrize("seed", range(12))
def test_shapley_matches_naive_enumeration(seed):
    model, X = random_model(seed)
    bg, ex = X[:15], X[15:18]
    fast = shapley_interaction_values(model, bg, ex)
    for r in range(len(ex)):
        assert np.allclose(fast[r], naive_shapley(model, bg, ex[r]), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_shapley_symmetry_and_efficiency(seed):
    model, X = random_model(100 + seed)
    bg, ex = X[:30], X[30:]
    vals = shapley_interaction_values(model, bg, ex)
    assert np.allclose(vals, vals.transpose(0, 2, 1), rtol=0, atol=1e-12)
    deviation = predict_margin(model, ex) - predict_margin(model, bg).mean()
    assert np.allclose(vals.sum(axis=(1, 2)), deviation, rtol=0, atol=1e-9)


def test_stump_has_no_interactions():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    model = train(Dataset(X, (X[:, 0] > 0).astype(int), ("A", "B")),
                  TreeParams(iterations=1, max_depth=1, min_samples_leaf=1))
    vals = shapley_interaction_values(model, X, X[:5])
    assert not vals[:, 0, 1].any() and not vals[:, 1, 1].any()
    assert vals[:, 0, 0] == pytest.approx(predict_margin(model, X[:5]) - predict_margin(model, X).mean())


def test_xor_tree_interacts():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(200, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    model = train(Dataset(X, y, ("A", "B")), TreeParams(iterations=5, max_depth=2, learning_rate=1.0))
    vals = shapley_interaction_values(model, X[:50], X[50:55])
    assert np.abs(vals[:, 0, 1]).min() > 0
    for r in range(5):
        assert np.allclose(vals[r], naive_shapley(model, X[:50], X[50 + r]), atol=1e-10)


def test_global_shapley_matrix_and_feature_cap():
    model, X = random_model(7, M=4)
    g = shapley_interactions(model, X[:20], X[20:30])
    per_row = shapley_interaction_values(model, X[:20], X[20:30])
    assert np.allclose(g.values, np.abs(per_row).mean(axis=0))
    assert (g.values >= 0).all()
    if len(model.used_features()) > 1:
        with pytest.raises(ValueError, match="max_features"):
            shapley_interactions(model, X[:5], X[:5], max_features=1)


# --------------------------------------------------------------------------- ranking and relatedness


def test_rank_examples():
    assert rank_elements(np.array([5.0, 4.0, 3.0])).tolist() == [1, 2, 3]
    assert rank_elements(np.ones(4)).tolist() == [1, 2, 3, 4]
    m = np.array([[0.1, -0.5, 0.2], [-0.5, 0.05, 0.3], [0.2, 0.3, 0.0]])
    # upper elements: .1 -.5 .2 .05 .3 0
    assert upper_elements(m).tolist() == [0.1, -0.5, 0.2, 0.05, 0.3, 0.0]
    assert rank_matrix(m).tolist() == [4, 1, 3, 5, 2, 6]


def test_footrule_examples():
    assert footrule([1, 2, 3], [1, 2, 3]) == 0
    assert footrule([1, 2, 3], [3, 2, 1]) == 4
    with pytest.raises(ValueError):
        footrule([1, 2], [1, 2, 3])


@pytest.mark.parametrize("n", range(1, 7))
def test_footrule_maximum_exhaustive(n):
    ident = list(range(1, n + 1))
    assert max(footrule(ident, p) for p in itertools.permutations(ident)) == max_footrule(n)


def test_bootstrap_null_determinism_and_constant():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    a, b = a + a.T, b + b.T
    r1, r2 = bootstrap_null(a, b, 100, seed=3), bootstrap_null(a, b, 100, seed=3)
    assert np.array_equal(r1.distances, r2.distances) and len(r1.distances) == 100
    c = np.full((4, 4), 2.0)
    assert not bootstrap_null(c, c, 50).distances.any()


def test_matrix_roundtrip(tmp_path):
    m = InteractionMatrix(("A", "B"), np.array([[0.1, 1 / 3], [1 / 3, -2.0]]))
    write_matrix(tmp_path / "m.tsv", m)
    back = read_matrix(tmp_path / "m.tsv")
    assert back.feature_names == m.feature_names and np.array_equal(back.values, m.values)
    assert m.restrict(["B"]).values.tolist() == [[-2.0]]
