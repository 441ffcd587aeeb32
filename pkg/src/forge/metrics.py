"""Numeric kernels for the evaluation suite.

Expression-space accuracy (MSE, PCC, R2, and their DE-gene-restricted
variants), latent-space probes (linear probe, perturbation consistency,
kNN label accuracy, Spearman decodability, structural integrity), and
classification scalars (ROC-AUC, PR-AUC, DEG recall, masked RMSE).

Conventions
-----------
- Matrices are rows = cells/samples, columns = genes/features.
- PCC and R2 center by the mean row vector (per-column means), so a
  predictor that just repeats the column means scores R2 = 0.
- A metric whose value does not exist for the given inputs is reported as
  ``None`` (an explicit "undefined" marker), never silently as 0.
- Every function is a pure, deterministic transformation of its inputs;
  reductions run in index-ascending order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_DE_K = 20
DEFAULT_DE_PSEUDO = 1e-6
DEFAULT_PROBE_LR = 0.1
DEFAULT_PROBE_ITERS = 500
DEFAULT_PROBE_L2 = 1e-4
DEFAULT_RIDGE = 1e-6
DEFAULT_NULL_COUNT = 500
DEFAULT_ALPHA = 0.05

METRIC_IDS = (
    "mse", "pcc", "r2",
    "mse_de", "pcc_de", "r2_de",
    "top1_lin", "top5_lin",
    "pert_cons",
    "top1_knn", "top5_knn",
    "spear_corr", "struct_int",
    "deg_recall", "roc_auc", "pr_auc", "rmse",
)


@dataclass
class ExpressionMatrix:
    """n x d expression values with row and column identifiers."""

    values: np.ndarray
    row_ids: Tuple[str, ...] = ()
    column_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("expression matrix must be 2-dimensional")
        self.row_ids = tuple(self.row_ids)
        self.column_ids = tuple(self.column_ids)
        if self.row_ids and len(self.row_ids) != self.values.shape[0]:
            raise ValidationError("row_ids length does not match matrix rows")
        if self.column_ids and len(self.column_ids) != self.values.shape[1]:
            raise ValidationError("column_ids length does not match matrix columns")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("expression matrix entries must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass
class EmbeddingSet:
    """n x h latent vectors with one perturbation label per row."""

    vectors: np.ndarray
    labels: Tuple[str, ...]
    batches: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValidationError("embedding set must be 2-dimensional")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("embedding entries must be finite")
        self.labels = tuple(str(x) for x in self.labels)
        if len(self.labels) != self.vectors.shape[0]:
            raise ValidationError("labels length does not match embedding rows")
        if any(not x for x in self.labels):
            raise ValidationError("labels must be non-empty strings")
        if self.batches is not None:
            self.batches = tuple(str(x) for x in self.batches)
            if len(self.batches) != self.vectors.shape[0]:
                raise ValidationError("batches length does not match embedding rows")


class MetricReport:
    """Closed-registry map of metric id to value (or None = undefined)."""

    def __init__(self, values: Optional[Dict[str, Optional[float]]] = None):
        self._values: Dict[str, Optional[float]] = {}
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, metric_id: str, value: Optional[float]) -> None:
        if metric_id not in METRIC_IDS:
            raise ValidationError(f"unknown metric id: {metric_id!r}")
        if value is not None:
            value = float(value)
            if not math.isfinite(value):
                raise ValidationError(f"metric {metric_id} must be finite or None")
        self._values[metric_id] = value

    def get(self, metric_id: str) -> Optional[float]:
        return self._values[metric_id]

    def __contains__(self, metric_id: str) -> bool:
        return metric_id in self._values

    def to_json(self) -> Dict[str, Optional[float]]:
        return {k: self._values[k] for k in METRIC_IDS if k in self._values}


MatrixLike = Union[ExpressionMatrix, np.ndarray, Sequence[Sequence[float]]]


def _values_of(m: MatrixLike) -> np.ndarray:
    if isinstance(m, ExpressionMatrix):
        return m.values
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValidationError("matrix input must be 2-dimensional")
    return arr


def _check_pair(truth: MatrixLike, pred: MatrixLike) -> Tuple[np.ndarray, np.ndarray]:
    y = _values_of(truth)
    yhat = _values_of(pred)
    if y.shape != yhat.shape:
        raise ValidationError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if (
        isinstance(truth, ExpressionMatrix)
        and isinstance(pred, ExpressionMatrix)
        and truth.column_ids
        and pred.column_ids
        and truth.column_ids != pred.column_ids
    ):
        raise ValidationError("column ids differ between compared matrices")
    return y, yhat


# ----------------------------------------------------------------------
# Expression-space accuracy
# ----------------------------------------------------------------------

def pointwise_metrics(
    truth: MatrixLike, pred: MatrixLike
) -> Tuple[float, Optional[float], Optional[float]]:
    """(MSE, PCC, R2) over all entries.

    PCC correlates the two matrices after removing each one's mean row;
    R2 is 1 - SSE/SST with SST measured about the truth's mean row.
    Zero variance makes pcc (and, for truth, r2) undefined.
    """
    y, yhat = _check_pair(truth, pred)
    if y.size == 0:
        raise ValidationError("cannot score an empty matrix")
    diff = y - yhat
    mse = float(np.mean(diff * diff))

    yc = y - y.mean(axis=0, keepdims=True)
    pc = yhat - yhat.mean(axis=0, keepdims=True)
    sst = float(np.sum(yc * yc))
    spp = float(np.sum(pc * pc))
    if sst == 0.0:
        return mse, None, None
    pcc: Optional[float] = None
    if spp > 0.0:
        pcc = float(np.sum(yc * pc) / math.sqrt(sst * spp))
    sse = float(np.sum(diff * diff))
    r2 = 1.0 - sse / sst
    return mse, pcc, r2


def log_fold_change(
    pert_mean: np.ndarray, ctrl_mean: np.ndarray, pseudo: float = DEFAULT_DE_PSEUDO
) -> np.ndarray:
    """Per-gene log2((pert + pseudo) / (ctrl + pseudo)) of mean profiles."""
    p = np.asarray(pert_mean, dtype=np.float64)
    c = np.asarray(ctrl_mean, dtype=np.float64)
    if p.shape != c.shape:
        raise ValidationError("mean profiles must have equal shape")
    if pseudo < 0:
        raise ValidationError("pseudocount must be non-negative")
    num = p + pseudo
    den = c + pseudo
    if np.any(num <= 0) or np.any(den <= 0):
        raise ValidationError("log fold change requires positive shifted means")
    return np.log2(num / den)


def select_de_genes(
    pert: MatrixLike,
    ctrl: MatrixLike,
    k: int = DEFAULT_DE_K,
    pseudo: float = DEFAULT_DE_PSEUDO,
) -> List[int]:
    """Top-k genes by |log fold change| of mean expression, ties by index."""
    p = _values_of(pert)
    c = _values_of(ctrl)
    if p.shape[1] != c.shape[1]:
        raise ValidationError("perturbed and control matrices must share columns")
    if (
        isinstance(pert, ExpressionMatrix)
        and isinstance(ctrl, ExpressionMatrix)
        and pert.column_ids
        and ctrl.column_ids
        and pert.column_ids != ctrl.column_ids
    ):
        raise ValidationError("column ids differ between perturbed and control")
    d = p.shape[1]
    if not (0 < k <= d):
        raise ValidationError(f"k must be in [1, {d}], got {k}")
    lfc = log_fold_change(p.mean(axis=0), c.mean(axis=0), pseudo)
    magnitude = np.abs(lfc)
    # Sort by descending |LFC|; numpy's stable sort keeps ascending index
    # order inside tied blocks.
    order = np.argsort(-magnitude, kind="stable")
    return [int(g) for g in order[:k]]


def restrict(m: MatrixLike, genes: Sequence[int]) -> ExpressionMatrix:
    """Column slice in the order listed, carrying ids along when present."""
    genes = list(genes)
    if not genes:
        raise ValidationError("gene selection must be non-empty")
    values = _values_of(m)
    d = values.shape[1]
    for g in genes:
        if not (0 <= int(g) < d):
            raise ValidationError(f"gene index {g} out of range [0, {d})")
    idx = [int(g) for g in genes]
    col_ids: Tuple[str, ...] = ()
    row_ids: Tuple[str, ...] = ()
    if isinstance(m, ExpressionMatrix):
        row_ids = m.row_ids
        if m.column_ids:
            col_ids = tuple(m.column_ids[g] for g in idx)
    return ExpressionMatrix(values[:, idx], row_ids=row_ids, column_ids=col_ids)


def metric_report(
    truth: MatrixLike, pred: MatrixLike, de_genes: Optional[Sequence[int]] = None
) -> MetricReport:
    """Pointwise metrics plus their DE-restricted variants in one report."""
    report = MetricReport()
    mse, pcc, r2 = pointwise_metrics(truth, pred)
    report.set("mse", mse)
    report.set("pcc", pcc)
    report.set("r2", r2)
    if de_genes is not None:
        mse_de, pcc_de, r2_de = pointwise_metrics(
            restrict(truth, de_genes), restrict(pred, de_genes)
        )
        report.set("mse_de", mse_de)
        report.set("pcc_de", pcc_de)
        report.set("r2_de", r2_de)
    return report


# ----------------------------------------------------------------------
# Latent-space probes
# ----------------------------------------------------------------------

def linear_probe(
    embeddings: EmbeddingSet,
    train_idx: Sequence[int],
    test_idx: Sequence[int],
    lr: float = DEFAULT_PROBE_LR,
    iters: int = DEFAULT_PROBE_ITERS,
    l2: float = DEFAULT_PROBE_L2,
) -> Tuple[float, float]:
    """Top-1/Top-5 accuracy of a softmax probe trained on the embeddings.

    Multinomial logistic regression fit by full-batch gradient descent
    with zero-initialized weights, so the result is deterministic. Top-5
    uses min(5, C) classes when fewer than five labels exist.
    """
    train_idx = np.asarray(list(train_idx), dtype=int)
    test_idx = np.asarray(list(test_idx), dtype=int)
    if test_idx.size == 0:
        raise ValidationError("test split must be non-empty")
    z = embeddings.vectors
    labels = embeddings.labels
    classes = sorted(set(labels[i] for i in train_idx))
    if len(classes) < 2:
        raise ValidationError("linear probe needs at least 2 training classes")
    class_index = {c: j for j, c in enumerate(classes)}
    for i in test_idx:
        if labels[i] not in class_index:
            raise ValidationError(f"test label {labels[i]!r} unseen in training")

    x = z[train_idx]
    y = np.array([class_index[labels[i]] for i in train_idx], dtype=int)
    n, h = x.shape
    c = len(classes)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((h, c))
    b = np.zeros(c)
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        grad = probs - onehot
        w -= lr * (x.T @ grad / n + l2 * w)
        b -= lr * grad.mean(axis=0)

    xt = z[test_idx]
    yt = np.array([class_index[labels[i]] for i in test_idx], dtype=int)
    logits = xt @ w + b
    top1 = float(np.mean(np.argmax(logits, axis=1) == yt))
    k = min(5, c)
    # Stable argsort on negated logits: ties resolve to the lower class index.
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top5 = float(np.mean([yt[i] in ranked[i] for i in range(len(yt))]))
    return top1, top5


def group_cosine_score(vectors: np.ndarray) -> float:
    """Mean pairwise cosine over a group, self-pairs included, /n^2."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValidationError("zero vector in consistency group")
    u = v / norms[:, None]
    sims = u @ u.T
    return float(sims.sum() / (v.shape[0] ** 2))


def perturbation_consistency(
    embeddings: EmbeddingSet,
    null_scores: Optional[Sequence[float]] = None,
    null_count: int = DEFAULT_NULL_COUNT,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
) -> Tuple[Optional[float], Dict[str, float]]:
    """Consistency rate C and per-perturbation empirical p-values.

    S_p is the self-inclusive mean pairwise cosine of group p. The p-value
    counts null scores <= S_p (floored at 1), divided by the null size.
    When no explicit null is given, a seeded label-permutation null is
    built: labels are shuffled null_count times and every shuffled group's
    S-value joins the null pool. Singleton groups are skipped with a
    warning and excluded from C's denominator.
    """
    groups: Dict[str, List[int]] = {}
    for i, lab in enumerate(embeddings.labels):
        groups.setdefault(lab, []).append(i)

    usable = {}
    for lab in sorted(groups):
        if len(groups[lab]) < 2:
            log.warning("consistency: skipping singleton group %r", lab)
            continue
        usable[lab] = groups[lab]
    if not usable:
        return None, {}

    if null_scores is None:
        if null_count < 1:
            raise ValidationError("null_count must be at least 1")
        rng = np.random.default_rng(seed)
        n = embeddings.vectors.shape[0]
        pool: List[float] = []
        sizes = [len(idx) for lab, idx in sorted(usable.items())]
        for _ in range(null_count):
            perm = rng.permutation(n)
            start = 0
            for size in sizes:
                pool.append(group_cosine_score(embeddings.vectors[perm[start:start + size]]))
                start += size
        null = np.asarray(pool, dtype=np.float64)
    else:
        null = np.asarray(list(null_scores), dtype=np.float64)
        if null.size == 0:
            raise ValidationError("null score list must be non-empty")

    k = null.size
    pis: Dict[str, float] = {}
    for lab, idx in sorted(usable.items()):
        s_p = group_cosine_score(embeddings.vectors[idx])
        count = int(np.sum(null <= s_p))
        pis[lab] = max(count, 1) / k
    c_rate = sum(1 for v in pis.values() if v < alpha) / len(pis)
    return c_rate, pis


def knn_accuracy(
    query: EmbeddingSet, reference: EmbeddingSet, k: Optional[int] = None
) -> Tuple[float, float]:
    """Top-1/Top-5 label accuracy by k-nearest-neighbor vote.

    k defaults to floor(sqrt(n_reference)), floored at 1. Neighbors are
    nearest by Euclidean distance (ties by reference index); the vote is
    won by the most frequent neighbor label, ties by smaller summed
    distance then lexicographic label order. Top-5 asks whether the true
    label is among the 5 highest-ranked neighbor labels.
    """
    if reference.vectors.shape[0] == 0:
        raise ValidationError("reference set must be non-empty")
    if query.vectors.shape[1] != reference.vectors.shape[1]:
        raise ValidationError("query/reference dimension mismatch")
    n_r = reference.vectors.shape[0]
    if k is None:
        k = max(1, int(math.isqrt(n_r)))
    if not (1 <= k <= n_r):
        raise ValidationError(f"k must be in [1, {n_r}]")

    # n_q x n_r squared distances; exact arithmetic per pair.
    diff = query.vectors[:, None, :] - reference.vectors[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))

    hits1 = 0
    hits5 = 0
    for i in range(query.vectors.shape[0]):
        order = np.lexsort((np.arange(n_r), dist[i]))[:k]
        tally: Dict[str, Tuple[int, float]] = {}
        for j in order:
            lab = reference.labels[j]
            cnt, total = tally.get(lab, (0, 0.0))
            tally[lab] = (cnt + 1, total + float(dist[i][j]))
        ranked = sorted(
            tally.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0])
        )
        if ranked[0][0] == query.labels[i]:
            hits1 += 1
        if query.labels[i] in [lab for lab, _ in ranked[:5]]:
            hits5 += 1
    n_q = query.vectors.shape[0]
    return hits1 / n_q, hits5 / n_q


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Spearman correlation of two vectors: Pearson on average ranks.

    Returns None when either side has zero rank variance.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("spearman inputs must be equal-length vectors")
    if x.size < 2:
        raise ValidationError("spearman needs at least 2 entries")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rxc = rx - rx.mean()
    ryc = ry - ry.mean()
    denom = math.sqrt(float(np.sum(rxc * rxc)) * float(np.sum(ryc * ryc)))
    if denom == 0.0:
        return None
    return float(np.sum(rxc * ryc) / denom)


def spearman_decodability(
    embeddings: EmbeddingSet, truth: MatrixLike, ridge: float = DEFAULT_RIDGE
) -> Optional[float]:
    """Mean per-sample Spearman between ridge-decoded and true expression.

    A linear decoder (with intercept) is fit from the embeddings to the
    expression matrix in closed form; each sample's decoded profile is
    rank-correlated with its true profile and the defined values are
    averaged. Samples with constant profiles are excluded with a warning.
    """
    if ridge < 0:
        raise ValidationError("ridge must be non-negative")
    y = _values_of(truth)
    z = embeddings.vectors
    if z.shape[0] != y.shape[0]:
        raise ValidationError("embedding rows must align with expression rows")
    if y.shape[1] < 2:
        raise ValidationError("decodability needs at least 2 genes")
    # Augment with an intercept column; a single ridge solve covers it.
    x = np.hstack([z, np.ones((z.shape[0], 1))])
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x.T @ y)
    decoded = x @ w

    rhos = []
    for i in range(y.shape[0]):
        rho = spearman_rho(decoded[i], y[i])
        if rho is None:
            log.warning("decodability: sample %d has constant ranks, skipped", i)
            continue
        rhos.append(rho)
    if not rhos:
        return None
    return float(np.mean(rhos))


def structural_integrity(
    pred: MatrixLike,
    act: MatrixLike,
    batch_ids: Sequence[str],
    control_mask: Sequence[bool],
) -> Optional[float]:
    """SI = 1 - D/D_max over batch-wise control-centered activity.

    Within each batch, both matrices are centered by their own control
    mean row; D averages per-batch normalized Frobenius gaps between the
    centered matrices, and D_max is twice the same functional applied to
    the actual activity alone. Returns None when D_max is zero.
    """
    p, a = _check_pair(pred, act)
    batch_ids = [str(x) for x in batch_ids]
    control_mask = np.asarray(list(control_mask), dtype=bool)
    if len(batch_ids) != a.shape[0] or control_mask.shape[0] != a.shape[0]:
        raise ValidationError("batch ids and control mask must match row count")

    batches = sorted(set(batch_ids))
    ids = np.asarray(batch_ids)
    d_sum = 0.0
    dmax_sum = 0.0
    for b in batches:
        rows = np.nonzero(ids == b)[0]
        ctrl = rows[control_mask[rows]]
        if ctrl.size == 0:
            raise ValidationError(f"batch {b!r} has no control rows")
        a_tilde = a[rows] - a[ctrl].mean(axis=0, keepdims=True)
        p_tilde = p[rows] - p[ctrl].mean(axis=0, keepdims=True)
        n_b = rows.size
        d_sum += np.linalg.norm(p_tilde - a_tilde) / n_b
        dmax_sum += np.linalg.norm(a_tilde) / n_b
    n_batches = len(batches)
    d = d_sum / n_batches
    d_max = 2.0 * dmax_sum / n_batches
    if d_max == 0.0:
        return None
    return 1.0 - d / d_max


# ----------------------------------------------------------------------
# Classification scalars
# ----------------------------------------------------------------------

def _check_binary(labels: Sequence[int], scores: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(list(labels))
    s = np.asarray(list(scores), dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValidationError("labels and scores must be equal-length vectors")
    if y.size == 0:
        raise ValidationError("labels must be non-empty")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be binary 0/1")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    return y.astype(int), s


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Exact pairwise AUC: (concordant + 0.5 * tied) / (pos * neg)."""
    y, s = _check_binary(labels, scores)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    # Rank-sum form of the pairwise count; average ranks handle ties exactly.
    ranks = rankdata(s, method="average")
    pos_rank_sum = float(ranks[y == 1].sum())
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def pr_auc(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Area under the precision-recall step curve, descending thresholds.

    Tied scores are consumed as one block; the area accumulates
    (recall_i - recall_{i-1}) * precision_i in exact rational arithmetic.
    """
    y, s = _check_binary(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.lexsort((np.arange(y.size), -s))
    area = Fraction(0)
    tp = 0
    fp = 0
    prev_recall = Fraction(0)
    i = 0
    n = y.size
    while i < n:
        j = i
        while j < n and s[order[j]] == s[order[i]]:
            j += 1
        for idx in order[i:j]:
            if y[idx] == 1:
                tp += 1
            else:
                fp += 1
        recall = Fraction(tp, n_pos)
        precision = Fraction(tp, tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


def deg_recall(true_de: Iterable[int], predicted_de: Iterable[int]) -> float:
    """|true ∩ predicted| / |true|."""
    true_set = set(int(g) for g in true_de)
    pred_set = set(int(g) for g in predicted_de)
    if not true_set:
        raise ValidationError("true DE set must be non-empty")
    return len(true_set & pred_set) / len(true_set)


def rmse(truth: Sequence[float], pred: Sequence[float]) -> Optional[float]:
    """Root mean squared error with NaN predictions masked out."""
    y = np.asarray(list(truth), dtype=np.float64)
    p = np.asarray(list(pred), dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValidationError("rmse inputs must be equal-length vectors")
    if np.any(np.isnan(y)):
        raise ValidationError("truth values must not be missing")
    keep = ~np.isnan(p)
    if not np.any(keep):
        return None
    diff = y[keep] - p[keep]
    return float(np.sqrt(np.mean(diff * diff)))
