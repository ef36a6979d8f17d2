"""Network-free stand-ins for the automatic metrics.

``style_distance`` is the Gram-matrix L2 distance to the vanilla render of
the same image; ``subject_consistency`` replaces a learned perceptual
similarity with the cosine between mean-pooled subject features. Column
names carry a ``_proxy`` suffix so nobody reads them as the real metrics.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import gram_l2


def style_distance(final_features, vanilla_features):
    return gram_l2(final_features, vanilla_features)


def subject_consistency(features, masks):
    """B x B cosine similarity of mean-pooled masked features; the diagonal is 1."""
    pooled = []
    for i, f in enumerate(features):
        mask = masks[i]
        if mask.empty:
            raise ValueError(f"image {i} has an empty subject mask")
        v = np.asarray(f, dtype=np.float64)[mask.indices].mean(axis=0)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ShapeError(f"pooled subject feature of image {i} is zero")
        pooled.append(v / norm)
    p = np.stack(pooled)
    m = np.clip(p @ p.T, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return m


@dataclass(frozen=True)
class MetricsReport:
    gram_l2: tuple
    consistency: np.ndarray

    @property
    def per_image_consistency(self):
        b = len(self.gram_l2)
        if b == 1:
            return (1.0,)
        m = self.consistency
        return tuple(float((m[i].sum() - m[i, i]) / (b - 1)) for i in range(b))

    def summary(self):
        g = np.asarray(self.gram_l2)
        c = np.asarray(self.per_image_consistency)
        return {"gram_l2_proxy": (float(g.mean()), float(g.std())),
                "consistency_proxy": (float(c.mean()), float(c.std()))}

    def to_tsv(self):
        head = "image\tgram_l2_proxy\tgram_l2_proxy_sd\tconsistency_proxy\tconsistency_proxy_sd\n"
        rows = [f"{i}\t{g:.6f}\t-\t{c:.6f}\t-\n"
                for i, (g, c) in enumerate(zip(self.gram_l2, self.per_image_consistency))]
        s = self.summary()
        (gm, gs), (cm, cs) = s["gram_l2_proxy"], s["consistency_proxy"]
        rows.append(f"batch\t{gm:.6f}\t{gs:.6f}\t{cm:.6f}\t{cs:.6f}\n")
        return head + "".join(rows)


def build_report(final_features, vanilla_features, masks):
    g = tuple(style_distance(f, v) for f, v in zip(final_features, vanilla_features))
    return MetricsReport(g, subject_consistency(final_features, masks))


def read_tsv(text):
    """Parse a metrics table back into ``{row label: {column: value}}``."""
    lines = text.strip().splitlines()
    cols = lines[0].split("\t")
    out = {}
    for line in lines[1:]:
        vals = line.split("\t")
        out[vals[0]] = {c: (None if v == "-" else float(v)) for c, v in zip(cols[1:], vals[1:])}
    return out
