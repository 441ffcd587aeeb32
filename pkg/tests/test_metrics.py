"""Metric kernels against independent brute-force oracles and worked cases."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.errors import ValidationError
from forge.metrics import (
    METRIC_IDS,
    EmbeddingSet,
    ExpressionMatrix,
    MetricReport,
    deg_recall,
    group_cosine_score,
    knn_accuracy,
    linear_probe,
    log_fold_change,
    metric_report,
    perturbation_consistency,
    pointwise_metrics,
    pr_auc,
    restrict,
    rmse,
    roc_auc,
    select_de_genes,
    spearman_decodability,
    spearman_rho,
    structural_integrity,
)

# ---------------------------------------------------------------------------
# brute-force oracles (loops and library routines, no shared code paths)


def oracle_pointwise(y, yhat):
    n, d = y.shape
    mse = sum(
        (y[i][j] - yhat[i][j]) ** 2 for i in range(n) for j in range(d)
    ) / (n * d)
    col_my = [sum(y[i][j] for i in range(n)) / n for j in range(d)]
    col_mp = [sum(yhat[i][j] for i in range(n)) / n for j in range(d)]
    yc = np.array([[y[i][j] - col_my[j] for j in range(d)] for i in range(n)])
    pc = np.array([[yhat[i][j] - col_mp[j] for j in range(d)] for i in range(n)])
    sst = float(np.sum(yc * yc))
    spp = float(np.sum(pc * pc))
    if sst == 0.0:
        return mse, None, None
    pcc = None
    if spp > 0.0:
        pcc = float(np.corrcoef(yc.ravel(), pc.ravel())[0, 1])
    sse = sum((y[i][j] - yhat[i][j]) ** 2 for i in range(n) for j in range(d))
    return mse, pcc, 1.0 - sse / sst


def oracle_roc_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def oracle_pr_auc(labels, scores):
    n_pos = sum(labels)
    if n_pos == 0:
        return None
    area = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for y, s in zip(labels, scores) if s >= t and y == 1)
        fp = sum(1 for y, s in zip(labels, scores) if s >= t and y == 0)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def oracle_rmse(truth, pred):
    pairs = [(t, p) for t, p in zip(truth, pred) if not math.isnan(p)]
    if not pairs:
        return None
    return math.sqrt(sum((t - p) ** 2 for t, p in pairs) / len(pairs))


def oracle_select_de(pert, ctrl, k, pseudo=1e-6):
    n_p, d = pert.shape
    n_c = ctrl.shape[0]
    mags = []
    for j in range(d):
        pm = sum(pert[i][j] for i in range(n_p)) / n_p
        cm = sum(ctrl[i][j] for i in range(n_c)) / n_c
        mags.append(abs(math.log2((pm + pseudo) / (cm + pseudo))))
    return sorted(range(d), key=lambda g: (-mags[g], g))[:k]


def oracle_knn(query, q_labels, ref, r_labels, k):
    n_q, n_r = query.shape[0], ref.shape[0]
    hits1 = hits5 = 0
    for i in range(n_q):
        dists = [float(np.sqrt(np.sum((query[i] - ref[j]) ** 2))) for j in range(n_r)]
        order = sorted(range(n_r), key=lambda j: (dists[j], j))[:k]
        tally = {}
        for j in order:
            cnt, tot = tally.get(r_labels[j], (0, 0.0))
            tally[r_labels[j]] = (cnt + 1, tot + dists[j])
        ranked = sorted(tally.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))
        if ranked[0][0] == q_labels[i]:
            hits1 += 1
        if q_labels[i] in [lab for lab, _ in ranked[:5]]:
            hits5 += 1
    return hits1 / n_q, hits5 / n_q


def oracle_structural_integrity(pred, act, batch_ids, control_mask):
    batches = sorted(set(batch_ids))
    d_sum = 0.0
    dmax_sum = 0.0
    for b in batches:
        rows = [i for i, lab in enumerate(batch_ids) if lab == b]
        ctrl = [i for i in rows if control_mask[i]]
        a_mean = np.mean([act[i] for i in ctrl], axis=0)
        p_mean = np.mean([pred[i] for i in ctrl], axis=0)
        a_tilde = np.array([act[i] - a_mean for i in rows])
        p_tilde = np.array([pred[i] - p_mean for i in rows])
        d_sum += math.sqrt(float(np.sum((p_tilde - a_tilde) ** 2))) / len(rows)
        dmax_sum += math.sqrt(float(np.sum(a_tilde**2))) / len(rows)
    d = d_sum / len(batches)
    d_max = 2.0 * dmax_sum / len(batches)
    if d_max == 0.0:
        return None
    return 1.0 - d / d_max


# ---------------------------------------------------------------------------
# oracle equivalence on random instances


def test_pointwise_metrics_match_oracle():
    rng = np.random.default_rng(11)
    for _ in range(40):
        n, d = int(rng.integers(2, 31)), int(rng.integers(2, 21))
        y = rng.normal(size=(n, d))
        yhat = rng.normal(size=(n, d))
        got = pointwise_metrics(y, yhat)
        want = oracle_pointwise(y, yhat)
        assert got[0] == pytest.approx(want[0], abs=1e-9)
        assert got[1] == pytest.approx(want[1], abs=1e-9)
        assert got[2] == pytest.approx(want[2], abs=1e-9)


def test_auc_match_oracle_exactly():
    rng = np.random.default_rng(12)
    for _ in range(60):
        n = int(rng.integers(2, 31))
        labels = [int(v) for v in rng.integers(0, 2, size=n)]
        if rng.random() < 0.5:
            scores = [float(v) / 4.0 for v in rng.integers(0, 5, size=n)]  # ties
        else:
            scores = [float(v) for v in rng.normal(size=n)]
        want_roc = oracle_roc_auc(labels, scores)
        got_roc = roc_auc(labels, scores)
        if want_roc is None:
            assert got_roc is None
        else:
            assert got_roc == want_roc
        want_pr = oracle_pr_auc(labels, scores)
        got_pr = pr_auc(labels, scores)
        if want_pr is None:
            assert got_pr is None
        else:
            assert got_pr == pytest.approx(want_pr, abs=1e-12)


def test_rmse_matches_oracle():
    rng = np.random.default_rng(13)
    for _ in range(40):
        n = int(rng.integers(1, 31))
        truth = [float(v) for v in rng.normal(size=n)]
        pred = [
            float("nan") if rng.random() < 0.2 else float(v)
            for v in rng.normal(size=n)
        ]
        want = oracle_rmse(truth, pred)
        got = rmse(truth, pred)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-9)


def test_select_de_genes_matches_oracle():
    rng = np.random.default_rng(14)
    for _ in range(40):
        n, d = int(rng.integers(2, 16)), int(rng.integers(2, 21))
        pert = rng.uniform(0.1, 5.0, size=(n, d))
        ctrl = rng.uniform(0.1, 5.0, size=(n, d))
        k = int(rng.integers(1, d + 1))
        assert select_de_genes(pert, ctrl, k=k) == oracle_select_de(pert, ctrl, k)


def test_knn_accuracy_matches_oracle():
    rng = np.random.default_rng(15)
    for _ in range(40):
        h = int(rng.integers(2, 9))
        n_r = int(rng.integers(2, 21))
        n_q = int(rng.integers(1, 11))
        ref = rng.normal(size=(n_r, h))
        query = rng.normal(size=(n_q, h))
        labs = [f"p{int(v)}" for v in rng.integers(0, 4, size=n_r)]
        q_labs = [f"p{int(v)}" for v in rng.integers(0, 4, size=n_q)]
        k = int(rng.integers(1, n_r + 1))
        got = knn_accuracy(
            EmbeddingSet(query, tuple(q_labs)), EmbeddingSet(ref, tuple(labs)), k=k
        )
        assert got == oracle_knn(query, q_labs, ref, labs, k)


def test_structural_integrity_matches_oracle():
    rng = np.random.default_rng(16)
    for _ in range(40):
        n, d = int(rng.integers(4, 21)), int(rng.integers(2, 11))
        act = rng.normal(size=(n, d))
        pred = rng.normal(size=(n, d))
        n_batches = int(rng.integers(1, 4))
        batch_ids = [f"b{int(v)}" for v in rng.integers(0, n_batches, size=n)]
        control_mask = [bool(v) for v in rng.integers(0, 2, size=n)]
        # every batch needs at least one control row
        for b in set(batch_ids):
            rows = [i for i, lab in enumerate(batch_ids) if lab == b]
            if not any(control_mask[i] for i in rows):
                control_mask[rows[0]] = True
        got = structural_integrity(pred, act, batch_ids, control_mask)
        want = oracle_structural_integrity(pred, act, batch_ids, control_mask)
        assert got == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# worked examples and edge handling


def test_pointwise_perfect_and_mean_predictors():
    truth = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert pointwise_metrics(truth, truth) == (0.0, pytest.approx(1.0), pytest.approx(1.0))
    # repeating the column means scores R2 = 0 and has undefined PCC
    means = np.tile(truth.mean(axis=0), (2, 1))
    mse, pcc, r2 = pointwise_metrics(truth, means)
    assert mse == pytest.approx(1.0)  # ((1-2)^2+(2-3)^2+(3-2)^2+(4-3)^2)/4
    assert pcc is None
    assert r2 == pytest.approx(0.0)


def test_pointwise_constant_truth_is_undefined():
    truth = np.full((3, 2), 5.0)
    mse, pcc, r2 = pointwise_metrics(truth, np.ones((3, 2)))
    assert mse == pytest.approx(16.0)
    assert pcc is None and r2 is None


def test_pointwise_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        pointwise_metrics(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValidationError):
        pointwise_metrics(np.ones((0, 2)), np.ones((0, 2)))
    a = ExpressionMatrix(np.ones((1, 2)), column_ids=("g1", "g2"))
    b = ExpressionMatrix(np.ones((1, 2)), column_ids=("g2", "g1"))
    with pytest.raises(ValidationError):
        pointwise_metrics(a, b)


def test_log_fold_change_and_de_selection():
    lfc = log_fold_change(np.array([4.0, 1.0]), np.array([1.0, 1.0]), pseudo=0.0)
    assert lfc == pytest.approx([2.0, 0.0])
    with pytest.raises(ValidationError):
        log_fold_change(np.array([0.0]), np.array([1.0]), pseudo=0.0)
    with pytest.raises(ValidationError):
        log_fold_change(np.array([1.0]), np.array([1.0, 2.0]))

    pert = np.array([[8.0, 2.0, 1.0]])
    ctrl = np.array([[1.0, 2.0, 4.0]])
    # |LFC| = (3, 0, 2) -> ranked genes 0, 2, 1
    assert select_de_genes(pert, ctrl, k=3, pseudo=0.0) == [0, 2, 1]
    assert select_de_genes(pert, ctrl, k=1, pseudo=0.0) == [0]
    # ties break toward the lower gene index
    tied = select_de_genes(np.array([[2.0, 2.0]]), np.array([[1.0, 1.0]]), k=2)
    assert tied == [0, 1]
    with pytest.raises(ValidationError):
        select_de_genes(pert, ctrl, k=0)
    with pytest.raises(ValidationError):
        select_de_genes(pert, ctrl, k=4)


def test_restrict_carries_identifiers():
    m = ExpressionMatrix(
        np.array([[1.0, 2.0, 3.0]]), row_ids=("c1",), column_ids=("g1", "g2", "g3")
    )
    sliced = restrict(m, [2, 0])
    assert sliced.values.tolist() == [[3.0, 1.0]]
    assert sliced.column_ids == ("g3", "g1")
    assert sliced.row_ids == ("c1",)
    with pytest.raises(ValidationError):
        restrict(m, [])
    with pytest.raises(ValidationError):
        restrict(m, [3])


def test_metric_report_registry():
    report = metric_report(
        np.array([[1.0, 2.0], [3.0, 4.0]]),
        np.array([[1.0, 2.0], [3.0, 4.0]]),
        de_genes=[1],
    )
    doc = report.to_json()
    assert list(doc) == ["mse", "pcc", "r2", "mse_de", "pcc_de", "r2_de"]
    assert doc["mse"] == 0.0 and doc["mse_de"] == 0.0
    assert report.get("pcc") == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        MetricReport({"bogus": 1.0})
    with pytest.raises(ValidationError):
        MetricReport({"mse": float("nan")})
    empty = MetricReport()
    assert "mse" not in empty
    assert set(METRIC_IDS) >= set(doc)


def test_roc_auc_examples():
    assert roc_auc([1, 0], [0.9, 0.1]) == 1.0
    assert roc_auc([1, 0], [0.1, 0.9]) == 0.0
    assert roc_auc([1, 0], [0.5, 0.5]) == 0.5
    assert roc_auc([1, 1], [0.2, 0.3]) is None
    assert roc_auc([0, 0], [0.2, 0.3]) is None
    with pytest.raises(ValidationError):
        roc_auc([1, 2], [0.1, 0.2])
    with pytest.raises(ValidationError):
        roc_auc([], [])


def test_pr_auc_examples():
    assert pr_auc([1, 0], [0.9, 0.1]) == 1.0
    # one uniform block: precision equals prevalence at full recall
    assert pr_auc([1, 0, 0, 0], [0.5, 0.5, 0.5, 0.5]) == pytest.approx(0.25)
    assert pr_auc([0, 0], [0.5, 0.1]) is None
    # worst ordering: the positive arrives last
    assert pr_auc([1, 0], [0.1, 0.9]) == pytest.approx(0.5)


def test_deg_recall_examples():
    assert deg_recall([1, 2, 3], [3, 2, 9]) == pytest.approx(2 / 3)
    assert deg_recall([1], []) == 0.0
    with pytest.raises(ValidationError):
        deg_recall([], [1])


def test_rmse_examples():
    assert rmse([1.0, 2.0, 3.0], [1.0, float("nan"), 5.0]) == pytest.approx(math.sqrt(2.0))
    assert rmse([1.0], [float("nan")]) is None
    with pytest.raises(ValidationError):
        rmse([float("nan")], [1.0])
    with pytest.raises(ValidationError):
        rmse([1.0, 2.0], [1.0])


def test_group_cosine_score_examples():
    same = np.array([[1.0, 0.0], [2.0, 0.0]])
    assert group_cosine_score(same) == pytest.approx(1.0)
    ortho = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert group_cosine_score(ortho) == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        group_cosine_score(np.array([[0.0, 0.0]]))


def test_perturbation_consistency_with_explicit_null():
    vectors = np.array(
        [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 1.0]]
    )
    labels = ("a", "a", "b", "b", "singleton")
    emb = EmbeddingSet(vectors, labels)
    # null far above S_p = 1.0 is impossible; pick a null below it
    c, pis = perturbation_consistency(emb, null_scores=[0.9] * 100)
    assert set(pis) == {"a", "b"}  # singleton group excluded
    assert pis["a"] == pytest.approx(1.0)  # S=1.0 >= every null value
    assert c == 0.0
    c2, pis2 = perturbation_consistency(emb, null_scores=[1.1] * 100)
    assert pis2["a"] == pytest.approx(0.01)  # floored at 1/k
    assert c2 == 1.0


def test_perturbation_consistency_permutation_null_is_seeded():
    rng = np.random.default_rng(7)
    emb = EmbeddingSet(
        rng.normal(size=(12, 4)) + 5.0,
        tuple(f"p{i % 3}" for i in range(12)),
    )
    first = perturbation_consistency(emb, null_count=50, seed=3)
    second = perturbation_consistency(emb, null_count=50, seed=3)
    assert first == second
    assert all(0.0 < v <= 1.0 for v in first[1].values())


def test_perturbation_consistency_all_singletons():
    emb = EmbeddingSet(np.eye(3), ("a", "b", "c"))
    assert perturbation_consistency(emb, null_scores=[0.5]) == (None, {})


def test_knn_tie_breaks_are_lexicographic():
    query = EmbeddingSet(np.array([[0.0, 0.0]]), ("x",))
    reference = EmbeddingSet(
        np.array([[1.0, 0.0], [0.0, 1.0]]), ("y", "x")
    )
    # counts tie 1-1 and distances tie 1.0-1.0; label "x" sorts first
    top1, top5 = knn_accuracy(query, reference, k=2)
    assert (top1, top5) == (1.0, 1.0)
    with pytest.raises(ValidationError):
        knn_accuracy(query, reference, k=3)
    with pytest.raises(ValidationError):
        knn_accuracy(query, EmbeddingSet(np.zeros((1, 3)), ("x",)), k=1)


def test_knn_self_reference_is_perfect():
    rng = np.random.default_rng(21)
    vectors = rng.normal(size=(9, 3))
    emb = EmbeddingSet(vectors, tuple(f"p{i % 3}" for i in range(9)))
    assert knn_accuracy(emb, emb, k=1) == (1.0, 1.0)


def test_linear_probe_separable_clusters():
    rng = np.random.default_rng(22)
    a = rng.normal(size=(10, 3)) * 0.05 + np.array([5.0, 0.0, 0.0])
    b = rng.normal(size=(10, 3)) * 0.05 + np.array([0.0, 5.0, 0.0])
    vectors = np.vstack([a, b])
    labels = tuple(["a"] * 10 + ["b"] * 10)
    emb = EmbeddingSet(vectors, labels)
    train = [0, 1, 2, 3, 4, 10, 11, 12, 13, 14]
    test = [5, 6, 7, 8, 9, 15, 16, 17, 18, 19]
    top1, top5 = linear_probe(emb, train, test)
    assert top1 == 1.0
    assert top5 == 1.0  # with C <= 5 classes, top-5 always covers the truth


def test_linear_probe_input_checks():
    emb = EmbeddingSet(np.eye(4), ("a", "a", "b", "c"))
    with pytest.raises(ValidationError):
        linear_probe(emb, [0, 1], [2])  # one training class
    with pytest.raises(ValidationError):
        linear_probe(emb, [0, 2], [])  # empty test split
    with pytest.raises(ValidationError):
        linear_probe(emb, [0, 2], [3])  # unseen test label


def test_spearman_rho_examples():
    assert spearman_rho([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman_rho([1, 1, 1], [1, 2, 3]) is None
    # tied block: average ranks give sqrt(0.9)
    assert spearman_rho([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(math.sqrt(0.9))
    with pytest.raises(ValidationError):
        spearman_rho([1.0], [2.0])


def test_spearman_decodability_linear_map_recovers_ranks():
    rng = np.random.default_rng(23)
    z = rng.normal(size=(12, 3))
    w = rng.normal(size=(3, 6))
    y = z @ w + rng.normal(size=(1, 6)) * 0.0 + 2.0
    emb = EmbeddingSet(z, tuple(f"p{i}" for i in range(12)))
    rho = spearman_decodability(emb, y, ridge=1e-9)
    assert rho == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValidationError):
        spearman_decodability(emb, y[:6], ridge=1e-9)
    with pytest.raises(ValidationError):
        spearman_decodability(emb, y, ridge=-1.0)


def test_structural_integrity_worked_example():
    act = np.array([[0.0, 0.0], [2.0, 2.0]])
    pred = np.zeros((2, 2))
    si = structural_integrity(pred, act, ["b1", "b1"], [True, False])
    assert si == pytest.approx(0.5)
    # a perfect prediction scores 1
    assert structural_integrity(act, act, ["b1", "b1"], [True, False]) == pytest.approx(1.0)
    # constant activity has no structure to preserve
    flat = np.ones((2, 2))
    assert structural_integrity(pred, flat, ["b1", "b1"], [True, False]) is None
    with pytest.raises(ValidationError):
        structural_integrity(pred, act, ["b1", "b2"], [True, False])


def test_embedding_set_validation():
    with pytest.raises(ValidationError):
        EmbeddingSet(np.ones((2, 2)), ("a",))
    with pytest.raises(ValidationError):
        EmbeddingSet(np.ones((2, 2)), ("a", ""))
    with pytest.raises(ValidationError):
        EmbeddingSet(np.array([[np.inf, 0.0]]), ("a",))
    with pytest.raises(ValidationError):
        EmbeddingSet(np.ones((2, 2)), ("a", "b"), batches=("x",))


def test_expression_matrix_validation():
    with pytest.raises(ValidationError):
        ExpressionMatrix(np.ones(3))
    with pytest.raises(ValidationError):
        ExpressionMatrix(np.ones((2, 2)), row_ids=("a",))
    with pytest.raises(ValidationError):
        ExpressionMatrix(np.array([[np.nan, 1.0]]))


# ---------------------------------------------------------------------------
# hypothesis invariants


@st.composite
def _binary_instances(draw):
    n = draw(st.integers(2, 20))
    labels = draw(
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
            lambda ls: 0 < sum(ls) < len(ls)
        )
    )
    scores = draw(
        st.lists(
            st.floats(-5, 5, allow_nan=False, allow_infinity=False),
            min_size=n,
            max_size=n,
        )
    )
    return labels, scores


@settings(max_examples=100, deadline=None)
@given(_binary_instances())
def test_roc_auc_label_flip_symmetry(instance):
    labels, scores = instance
    flipped = [1 - y for y in labels]
    assert roc_auc(flipped, scores) == pytest.approx(1.0 - roc_auc(labels, scores))


@settings(max_examples=100, deadline=None)
@given(_binary_instances())
def test_auc_bounds_and_monotone_invariance(instance):
    labels, scores = instance
    auc = roc_auc(labels, scores)
    assert 0.0 <= auc <= 1.0
    # scaling by a power of two is exact in floats, so ties are preserved
    rescaled = [4.0 * s for s in scores]
    assert roc_auc(labels, rescaled) == pytest.approx(auc)
    area = pr_auc(labels, scores)
    assert 0.0 < area <= 1.0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.floats(-100, 100, allow_nan=False, allow_infinity=False),
        min_size=1,
        max_size=24,
    )
)
def test_rmse_of_identical_vectors_is_zero(values):
    assert rmse(values, list(values)) == pytest.approx(0.0)
