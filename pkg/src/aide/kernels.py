"""Numeric hot kernels: pairwise IoU, greedy NMS, cosine scoring, and the
linear-softmax SGD loop.

Every kernel exists twice: a numba ``@njit`` build and a pure-numpy build
with identical signatures. The numba build is used when numba imports and
the environment variable ``AIDE_NUMBA`` is not set to ``0``/``false``/``off``;
otherwise the numpy build is used. ``BACKEND`` reports which one is active.
Within one backend all kernels are deterministic; across backends results
may differ by float summation order only.

Conventions: boxes are float64 ``(N, 4)`` arrays in xyxy order, features are
float64 ``(N, d)``, class labels are int64 row indices into the weight
matrix ``W`` of shape ``(num_classes, d)``.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "iou_matrix",
    "nms_keep",
    "cosine_scores",
    "softmax_ce_loss",
    "softmax_ce_grad",
    "sgd_train",
]


def _numba_wanted() -> bool:
    flag = os.environ.get("AIDE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


try:
    if _numba_wanted():
        from numba import njit

        HAS_NUMBA = True
    else:
        HAS_NUMBA = False
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------


def _iou_matrix_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _nms_keep_np(boxes: np.ndarray, iou_thresh: float) -> np.ndarray:
    # Boxes arrive pre-sorted in suppression priority order.
    n = boxes.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    if n == 0:
        return keep
    ious = _iou_matrix_np(boxes, boxes)
    for i in range(n):
        if not keep[i]:
            continue
        suppress = ious[i] > iou_thresh
        suppress[: i + 1] = False
        keep[suppress] = False
    return keep


def _cosine_scores_np(mat: np.ndarray, query: np.ndarray) -> np.ndarray:
    return mat @ query


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax_ce_loss_np(W: np.ndarray, X: np.ndarray, y: np.ndarray, weight_decay: float) -> float:
    logp = _log_softmax_np(X @ W.T)
    n = X.shape[0]
    ce = -logp[np.arange(n), y].mean()
    return float(ce + 0.5 * weight_decay * np.sum(W * W))


def _softmax_ce_grad_np(W: np.ndarray, X: np.ndarray, y: np.ndarray, weight_decay: float) -> np.ndarray:
    logits = X @ W.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    n = X.shape[0]
    p[np.arange(n), y] -= 1.0
    return (p.T @ X) / n + weight_decay * W


def _sgd_train_np(
    W: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    batch_idx: np.ndarray,
    lr: float,
    weight_decay: float,
) -> np.ndarray:
    W = W.copy()
    for t in range(batch_idx.shape[0]):
        rows = batch_idx[t]
        g = _softmax_ce_grad_np(W, X[rows], y[rows], weight_decay)
        W -= lr * g
    return W


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _iou_matrix_nb(a, b):  # pragma: no cover - exercised via dispatch
        n, m = a.shape[0], b.shape[0]
        out = np.zeros((n, m), dtype=np.float64)
        for i in range(n):
            ax1, ay1, ax2, ay2 = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
            area_a = (ax2 - ax1) * (ay2 - ay1)
            for j in range(m):
                ix1 = max(ax1, b[j, 0])
                iy1 = max(ay1, b[j, 1])
                ix2 = min(ax2, b[j, 2])
                iy2 = min(ay2, b[j, 3])
                iw = ix2 - ix1
                ih = iy2 - iy1
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
                union = area_a + area_b - inter
                if union > 0.0:
                    out[i, j] = inter / union
        return out

    @njit(cache=True)
    def _nms_keep_nb(boxes, iou_thresh):  # pragma: no cover
        n = boxes.shape[0]
        keep = np.ones(n, dtype=np.bool_)
        for i in range(n):
            if not keep[i]:
                continue
            ax1, ay1, ax2, ay2 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
            area_a = (ax2 - ax1) * (ay2 - ay1)
            for j in range(i + 1, n):
                if not keep[j]:
                    continue
                ix1 = max(ax1, boxes[j, 0])
                iy1 = max(ay1, boxes[j, 1])
                ix2 = min(ax2, boxes[j, 2])
                iy2 = min(ay2, boxes[j, 3])
                iw = ix2 - ix1
                ih = iy2 - iy1
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                area_b = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
                union = area_a + area_b - inter
                if union > 0.0 and inter / union > iou_thresh:
                    keep[j] = False
        return keep

    @njit(cache=True)
    def _cosine_scores_nb(mat, query):  # pragma: no cover
        n, d = mat.shape
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += mat[i, k] * query[k]
            out[i] = s
        return out

    @njit(cache=True)
    def _softmax_ce_loss_nb(W, X, y, weight_decay):  # pragma: no cover
        n, d = X.shape
        c = W.shape[0]
        total = 0.0
        for i in range(n):
            mx = -1e300
            for r in range(c):
                z = 0.0
                for k in range(d):
                    z += W[r, k] * X[i, k]
                if z > mx:
                    mx = z
            denom = 0.0
            zy = 0.0
            for r in range(c):
                z = 0.0
                for k in range(d):
                    z += W[r, k] * X[i, k]
                denom += np.exp(z - mx)
                if r == y[i]:
                    zy = z - mx
            total += np.log(denom) - zy
        reg = 0.0
        for r in range(c):
            for k in range(W.shape[1]):
                reg += W[r, k] * W[r, k]
        return total / n + 0.5 * weight_decay * reg

    @njit(cache=True)
    def _softmax_ce_grad_nb(W, X, y, weight_decay):  # pragma: no cover
        n, d = X.shape
        c = W.shape[0]
        grad = weight_decay * W.copy()
        logits = np.empty(c, dtype=np.float64)
        for i in range(n):
            mx = -1e300
            for r in range(c):
                z = 0.0
                for k in range(d):
                    z += W[r, k] * X[i, k]
                logits[r] = z
                if z > mx:
                    mx = z
            denom = 0.0
            for r in range(c):
                denom += np.exp(logits[r] - mx)
            for r in range(c):
                p = np.exp(logits[r] - mx) / denom
                if r == y[i]:
                    p -= 1.0
                coef = p / n
                for k in range(d):
                    grad[r, k] += coef * X[i, k]
        return grad

    @njit(cache=True)
    def _sgd_train_nb(W, X, y, batch_idx, lr, weight_decay):  # pragma: no cover
        W = W.copy()
        iters, bs = batch_idx.shape
        d = X.shape[1]
        xb = np.empty((bs, d), dtype=np.float64)
        yb = np.empty(bs, dtype=np.int64)
        for t in range(iters):
            for j in range(bs):
                row = batch_idx[t, j]
                for k in range(d):
                    xb[j, k] = X[row, k]
                yb[j] = y[row]
            g = _softmax_ce_grad_nb(W, xb, yb, weight_decay)
            for r in range(W.shape[0]):
                for k in range(d):
                    W[r, k] -= lr * g[r, k]
        return W


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    BACKEND = "numba"
    _iou_matrix_impl = _iou_matrix_nb
    _nms_keep_impl = _nms_keep_nb
    _cosine_scores_impl = _cosine_scores_nb
    _softmax_ce_loss_impl = _softmax_ce_loss_nb
    _softmax_ce_grad_impl = _softmax_ce_grad_nb
    _sgd_train_impl = _sgd_train_nb
else:
    BACKEND = "numpy"
    _iou_matrix_impl = _iou_matrix_np
    _nms_keep_impl = _nms_keep_np
    _cosine_scores_impl = _cosine_scores_np
    _softmax_ce_loss_impl = _softmax_ce_loss_np
    _softmax_ce_grad_impl = _softmax_ce_grad_np
    _sgd_train_impl = _sgd_train_np


def _as_f64(a, shape_hint: int) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if arr.ndim != shape_hint:
        raise ValueError(f"expected {shape_hint}-d array, got shape {arr.shape}")
    return arr


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of two xyxy box arrays, ``(N, 4) x (M, 4) -> (N, M)``."""
    a = _as_f64(a, 2).reshape(-1, 4)
    b = _as_f64(b, 2).reshape(-1, 4)
    return _iou_matrix_impl(a, b)


def nms_keep(boxes, iou_thresh: float) -> np.ndarray:
    """Greedy suppression keep-mask over boxes already sorted by priority."""
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64)).reshape(-1, 4)
    return _nms_keep_impl(boxes, float(iou_thresh))


def cosine_scores(mat, query) -> np.ndarray:
    """Dot products of unit-norm rows against a unit-norm query vector."""
    mat = _as_f64(mat, 2)
    query = _as_f64(query, 1)
    return _cosine_scores_impl(mat, query)


def softmax_ce_loss(W, X, y, weight_decay: float = 0.0) -> float:
    """Mean softmax cross-entropy plus 0.5 * wd * ||W||^2."""
    W = _as_f64(W, 2)
    X = _as_f64(X, 2)
    y = np.ascontiguousarray(np.asarray(y, dtype=np.int64))
    return float(_softmax_ce_loss_impl(W, X, y, float(weight_decay)))


def softmax_ce_grad(W, X, y, weight_decay: float = 0.0) -> np.ndarray:
    """Gradient of :func:`softmax_ce_loss` with respect to ``W``."""
    W = _as_f64(W, 2)
    X = _as_f64(X, 2)
    y = np.ascontiguousarray(np.asarray(y, dtype=np.int64))
    return _softmax_ce_grad_impl(W, X, y, float(weight_decay))


def sgd_train(W, X, y, batch_idx, lr: float, weight_decay: float) -> np.ndarray:
    """Run mini-batch SGD steps over precomputed batch index rows.

    ``batch_idx`` has shape ``(iterations, batch_size)``; drawing it outside
    the kernel keeps sampling identical across backends.
    """
    W = _as_f64(W, 2)
    X = _as_f64(X, 2)
    y = np.ascontiguousarray(np.asarray(y, dtype=np.int64))
    batch_idx = np.ascontiguousarray(np.asarray(batch_idx, dtype=np.int64))
    if batch_idx.ndim != 2:
        raise ValueError("batch_idx must be (iterations, batch_size)")
    if batch_idx.shape[0] == 0:
        return W.copy()
    return _sgd_train_impl(W, X, y, batch_idx, float(lr), float(weight_decay))
