"""NumPy fallback for the compiled kernels in ``_kernels.pyx``.

Both implementations must agree on labels, anchors and metric values; the
test-suite runs them side by side.
"""

import numpy as np


def kmeans_1d(q, init_centers, max_iters=100, tol=1e-9):
    """Lloyd iterations on scalar data.

    Returns ``(labels, centers, sse_history, converged)``. Nearest-center ties go
    to the lowest center index. A cluster left empty by the assignment step is
    reseeded with the point farthest from its own center, taken from clusters
    that keep at least one other member.
    """
    q = np.ascontiguousarray(q, dtype=np.float64)
    centers = np.array(init_centers, dtype=np.float64)
    n, k = q.shape[0], centers.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    history = []
    converged = False
    for _ in range(max_iters):
        new_labels = np.argmin(np.abs(q[:, None] - centers[None, :]), axis=1).astype(np.int64)
        counts = np.bincount(new_labels, minlength=k)
        for c in range(k):
            if counts[c]:
                continue
            dist = np.abs(q - centers[new_labels])
            dist[counts[new_labels] < 2] = -1.0
            i = int(np.argmax(dist))
            counts[new_labels[i]] -= 1
            new_labels[i] = c
            counts[c] = 1
        sums = np.bincount(new_labels, weights=q, minlength=k)
        new_centers = sums / counts
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        resid = q - centers[new_labels]
        history.append(float(np.dot(resid, resid)))
        stable = bool(np.array_equal(new_labels, labels))
        labels = new_labels
        if stable or shift < tol:
            converged = True
            break
    return labels, centers, np.array(history, dtype=np.float64), converged


def nearest_indices(q, centers):
    """Index of the value in ``q`` nearest to each center (lowest index on ties)."""
    q = np.asarray(q, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    return np.argmin(np.abs(q[None, :] - centers[:, None]), axis=1).astype(np.int64)


def ranking_metrics(relevant):
    """Per-row AP, first-hit rank (0-based, -1 if none) and relevant count.

    ``relevant`` is a ``(queries, gallery)`` 0/1 matrix already in ranked order.
    """
    rel = np.asarray(relevant, dtype=np.uint8).astype(np.float64)
    if rel.ndim != 2:
        raise ValueError("relevant must be 2-D")
    n_rel = rel.sum(axis=1).astype(np.int64)
    ranks = np.arange(1, rel.shape[1] + 1, dtype=np.float64)
    hits = np.cumsum(rel, axis=1)
    prec_sum = np.sum(rel * hits / ranks, axis=1)
    ap = np.where(n_rel > 0, prec_sum / np.maximum(n_rel, 1), 0.0)
    first = np.where(n_rel > 0, np.argmax(rel > 0, axis=1), -1).astype(np.int64)
    return ap, first, n_rel
