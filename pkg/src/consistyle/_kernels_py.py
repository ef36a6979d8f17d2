"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Every reduction here runs in index-ascending order with float64
accumulators so results match the compiled backend bit for bit. numpy's
``sum`` switches to pairwise summation on contiguous runs, so patch-axis
sums go through ``cumsum`` (sequential by definition) and channel-axis
sums are explicit loops over channels.
"""
import numpy as np

NAME = "python"


def _ordered_sum(a):
    return np.cumsum(a, axis=0)[-1]


def channel_stats(x):
    x = np.ascontiguousarray(x, dtype=np.float32)
    n = x.shape[0]
    x64 = x.astype(np.float64)
    mean = _ordered_sum(x64) / n
    dev = x64 - mean
    var = _ordered_sum(dev * dev) / n
    return mean, np.sqrt(var)


def adain(x, y, eps):
    mx, sx = channel_stats(x)
    my, sy = channel_stats(y)
    t = (np.asarray(x, dtype=np.float64) - mx) / (sx + eps)
    return (sy * t + my).astype(np.float32)


def row_norms(x):
    x = np.asarray(x, dtype=np.float32)
    acc = np.zeros(x.shape[0], dtype=np.float64)
    for c in range(x.shape[1]):
        col = x[:, c].astype(np.float64)
        acc += col * col
    return np.sqrt(acc)


def cosine_argmax(targets, cands, tnorm, cnorm):
    """Best candidate row per target row under cosine similarity.

    Ties go to the lowest candidate row (first maximum wins).
    """
    t = np.asarray(targets, dtype=np.float32).astype(np.float64) / tnorm[:, None]
    c = np.asarray(cands, dtype=np.float32).astype(np.float64) / cnorm[:, None]
    sims = np.zeros((t.shape[0], c.shape[0]), dtype=np.float64)
    for k in range(t.shape[1]):
        sims += t[:, k, None] * c[None, :, k]
    idx = np.argmax(sims, axis=1)
    return idx.astype(np.int64), sims[np.arange(t.shape[0]), idx]


def softmax_rows(m):
    """Row softmax over the last axis; returns ``(out, bad_row)`` like the compiled kernel."""
    a = np.ascontiguousarray(m, dtype=np.float32)
    flat = a.reshape(-1, a.shape[-1])
    if flat.shape[1] == 0:
        return a.copy(), -1
    hi = flat.max(axis=1, keepdims=True)
    lo = flat.min(axis=1, keepdims=True)
    bad = ~(np.isfinite(hi) & np.isfinite(lo))[:, 0]
    if bad.any():
        return None, int(np.argmax(bad))
    e = np.exp(flat - hi)
    return (e / e.sum(axis=1, keepdims=True)).reshape(a.shape), -1
