"""Independent reference implementations used by the unit and acceptance tests."""
import math

import numpy as np


def brute_masked(Q, K, V, M):
    """Restrict each query to its admissible keys, then renormalize."""
    out = np.zeros((Q.shape[0], Q.shape[1], V.shape[2]))
    for h in range(Q.shape[0]):
        for i in range(Q.shape[1]):
            keep = np.flatnonzero(M[i])
            logits = np.array([Q[h, i] @ K[h, j] for j in keep]) / np.sqrt(Q.shape[2])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[h, i] = sum(wk * V[h, j] for wk, j in zip(w, keep))
    return out


def coverage(box, n=1000):
    """Anti-aliased raster: fraction of each of the n x n pixels covered by the box."""
    edges = np.arange(n + 1) / n

    def axis(lo, hi):
        return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None) * n

    return np.outer(axis(box[0], box[2]), axis(box[1], box[3]))


def raster_iou(a, b, n=1000):
    A, B = coverage(a, n), coverage(b, n)
    return np.minimum(A, B).sum() / np.maximum(A, B).sum()


def double_loop_cosine(vs):
    total, n = 0.0, 0
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            total += float(np.dot(vs[i], vs[j]) / (np.linalg.norm(vs[i]) * np.linalg.norm(vs[j])))
            n += 1
    return 100.0 * total / n


def naive_sigmoid(x, y, box, s):
    h0, w0, h1, w1 = box
    m1, m2 = (h0 + h1) / 2, (w0 + w1) / 2
    r = (x - m1) ** 2 / ((h1 - h0) / 2) ** 2 + (y - m2) ** 2 / ((w1 - w0) / 2) ** 2
    return 0.5 * (1.0 + math.tanh(0.5 * s * (1.0 - r)))
