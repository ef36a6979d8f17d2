"""Dense float32 numerics: softmax attention, AdaIN, channel statistics, Gram matrices.

Arrays are laid out patches-first: a single image's features are ``(N, d)``
with ``N = H * W`` patches in row-major grid order.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError

ADAIN_EPS = 1e-5


@dataclass(frozen=True)
class FeatureTensor:
    """A ``(B, N, d)`` float32 block tied to its ``(H, W)`` patch grid."""

    data: np.ndarray
    grid: tuple

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeError(f"FeatureTensor needs (B, N, d), got shape {data.shape}")
        h, w = self.grid
        if h * w != data.shape[1]:
            raise ShapeError(f"grid {h}x{w} does not cover N={data.shape[1]} patches")
        if not np.isfinite(data).all():
            raise NonFiniteError("FeatureTensor holds non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "grid", (int(h), int(w)))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def _as_matrix(x, name):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (patches, channels), got shape {x.shape}")
    return x


def softmax_rows(m):
    """Row-wise softmax over the last axis, stabilised by the row maximum."""
    m = np.asarray(m, dtype=np.float32)
    out, bad = kernels.softmax_rows(m)
    if bad >= 0:
        lead = np.unravel_index(bad, m.shape[:-1])
        where = f"row {lead[-1]}" + (f" of batch index {tuple(int(i) for i in lead[:-1])}"
                                     if len(lead) > 1 else "")
        raise NonFiniteError(f"non-finite entry in {where}")
    return out


def scaled_dot_attention(q, k, v):
    """softmax(Q K^T / sqrt(d)) V for ``(..., N_q, d)`` queries and ``(..., N_k, d)`` keys."""
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if q.ndim < 2 or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    # scaling Q (N_q x d) is cheaper than scaling the N_q x N_k logits
    scale = np.float32(1.0 / np.sqrt(q.shape[-1]))
    return softmax_rows((q * scale) @ np.swapaxes(k, -1, -2)) @ v


def split_heads(x, heads):
    """``(N, d)`` -> ``(heads, N, d // heads)``."""
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"{d} channels do not split into {heads} heads")
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def merge_heads(x):
    h, n, c = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * c))


def multihead_attention(q, k, v, heads):
    """Per-head attention on the flattened ``(N, heads * C)`` layout."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    out = scaled_dot_attention(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    return merge_heads(out)


def channel_stats(x):
    """Per-channel mean and population std over the patch axis."""
    x = _as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ShapeError("channel_stats needs at least one patch")
    mean, std = kernels.channel_stats(x)
    return ChannelStats(mean.astype(np.float32), std.astype(np.float32))


def adain(x, y, eps=ADAIN_EPS):
    """Renormalise ``x`` so each channel takes the mean and std of ``y``."""
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"adain channel mismatch: x {x.shape} vs y {y.shape}")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ShapeError("adain needs at least one patch in x and y")
    return kernels.adain(x, y, eps)


def concat_rows(blocks):
    return np.concatenate([np.asarray(b, dtype=np.float32) for b in blocks], axis=0)


def _gram64(f):
    f = _as_matrix(f, "F")
    if f.shape[0] == 0:
        raise ShapeError("gram_matrix needs at least one patch")
    f64 = f.astype(np.float64)
    return f64.T @ f64 / f.shape[0]


def gram_matrix(f):
    """Channel Gram matrix ``F^T F / N``."""
    return _gram64(f).astype(np.float32)


def gram_l2(f1, f2):
    """Frobenius distance between the Gram matrices of two feature maps."""
    f1 = _as_matrix(f1, "F1")
    f2 = _as_matrix(f2, "F2")
    if f1.shape[1] != f2.shape[1]:
        raise ShapeError(f"gram_l2 channel mismatch: {f1.shape} vs {f2.shape}")
    return float(np.linalg.norm(_gram64(f1) - _gram64(f2)))
