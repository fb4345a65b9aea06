"""Score metrics (AUC, ROC, EER, HTER) and maximum mean discrepancy.

Scores are live-class probabilities; label 1 is live (positive), label 0 is
spoof. Acceptance means classifying as live, so FAR counts accepted spoofs
and FRR counts rejected lives.
"""

import numpy as np


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of live/spoof pairs ranked correctly.

    Computed from average ranks so ties count one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one live and one spoof score")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average the ranks inside each tie group
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc_pairs(scores, labels) -> float:
    """Pair-enumeration AUC oracle, O(n^2); verification only."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if len(pos_scores) == 0 or len(neg_scores) == 0:
        raise ValueError("AUC needs at least one live and one spoof score")
    total = 0.0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos_scores) * len(neg_scores))


def _rates(scores, labels, threshold: float):
    """(FAR, FRR) for the rule `live iff score >= threshold`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    accepted = scores >= threshold
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    far = float(np.sum(accepted & (labels == 0))) / n_neg
    frr = float(np.sum(~accepted & (labels == 1))) / n_pos
    return far, frr


def roc_points(scores, labels):
    """(FAR, TPR) pairs swept over all score thresholds, FAR ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    thresholds = np.concatenate(
        [[np.inf], np.unique(scores)[::-1]]
    )
    points = []
    for th in thresholds:
        far, frr = _rates(scores, labels, th)
        points.append((far, 1.0 - frr))
    return points


def eer_threshold(scores, labels):
    """Threshold where FAR and FRR cross, with its rates.

    Returns (threshold, far, frr) at the sweep point minimizing |FAR - FRR|;
    the first such point in descending-threshold order wins ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    candidates = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    best = None
    for th in candidates:
        far, frr = _rates(scores, labels, th)
        gap = abs(far - frr)
        if best is None or gap < best[0] - 1e-15:
            best = (gap, th, far, frr)
    _, th, far, frr = best
    return th, far, frr


def hter(scores, labels, threshold: float) -> float:
    """Half total error rate at a fixed threshold: (FAR + FRR) / 2."""
    far, frr = _rates(scores, labels, threshold)
    return 0.5 * (far + frr)


# ---------------------------------------------------------------------------
# maximum mean discrepancy


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples; 1.0 if degenerate."""
    pooled = np.concatenate([a, b], axis=0)
    d2 = _pairwise_sq_dists(pooled, pooled)
    upper = d2[np.triu_indices(len(pooled), k=1)]
    med = float(np.sqrt(np.median(upper))) if upper.size else 0.0
    return med if med > 0.0 else 1.0


def mmd(features_a, features_b, kernel: str = "linear",
        unbiased: bool = False) -> float:
    """Squared maximum mean discrepancy between two feature samples.

    The default is the biased V-statistic (mean-embedding distance), which
    is exactly zero for identical samples and, under the linear kernel,
    equals the squared mean difference. The unbiased U-statistic (diagonal
    terms removed) is available for completeness but can go negative.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be [N, D] with matching D")
    if kernel == "linear":
        kaa, kbb, kab = a @ a.T, b @ b.T, a @ b.T
    elif kernel == "rbf":
        width = median_bandwidth(a, b)
        denom = 2.0 * width * width
        kaa = np.exp(-_pairwise_sq_dists(a, a) / denom)
        kbb = np.exp(-_pairwise_sq_dists(b, b) / denom)
        kab = np.exp(-_pairwise_sq_dists(a, b) / denom)
    else:
        raise ValueError(f"unknown kernel: {kernel!r}")
    m, n = len(a), len(b)
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased estimate needs at least 2 per set")
        term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    else:
        term_a = kaa.mean()
        term_b = kbb.mean()
    return float(term_a + term_b - 2.0 * kab.mean())
