"""Subject masks from cross-attention maps and patch correspondences to anchor images."""
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArtifactError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.3


@dataclass(frozen=True)
class SubjectMask:
    image_index: int
    patch_indices: tuple
    grid: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.patch_indices)
        n = self.grid[0] * self.grid[1]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ShapeError(f"mask indices for image {self.image_index} not strictly ascending")
        if idx and (idx[0] < 0 or idx[-1] >= n):
            raise ShapeError(f"mask index out of range [0, {n}) for image {self.image_index}")
        object.__setattr__(self, "patch_indices", idx)

    @property
    def empty(self):
        return not self.patch_indices

    @property
    def indices(self):
        return np.asarray(self.patch_indices, dtype=np.int64)

    def __len__(self):
        return len(self.patch_indices)

    @classmethod
    def full(cls, image_index, grid):
        return cls(image_index, tuple(range(grid[0] * grid[1])), grid)


@dataclass(frozen=True)
class CorrespondenceMap:
    """For each subject patch of ``image_index``: the matched ``(anchor, patch)``.

    ``similarity`` is empty when the map was read back from text.
    """

    image_index: int
    patches: tuple
    entries: tuple
    similarity: tuple = field(default=())

    def __post_init__(self):
        if len(self.patches) != len(self.entries):
            raise ShapeError("correspondence entries must align with mask patches")

    def rows(self):
        """(target patches, anchor indices, anchor patches) as int arrays."""
        p = np.asarray(self.patches, dtype=np.int64)
        e = np.asarray(self.entries, dtype=np.int64).reshape(-1, 2)
        return p, e[:, 0], e[:, 1]


def extract_subject_mask(attn_map, grid, tau=DEFAULT_TAU, image_index=0):
    """Threshold a max-normalised subject-token attention map at ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    a = np.asarray(attn_map, dtype=np.float64).ravel()
    if a.size != grid[0] * grid[1]:
        raise ShapeError(f"attention map has {a.size} entries, grid {grid} needs {grid[0] * grid[1]}")
    if (a < 0).any() or not np.isfinite(a).all():
        raise ValueError("attention map entries must be finite and non-negative")
    peak = a.max()
    if peak <= 0:
        raise ValueError(f"no subject signal in attention map of image {image_index}")
    keep = np.flatnonzero(a / peak >= tau)
    return SubjectMask(image_index, tuple(keep.tolist()), tuple(grid))


def aggregate_attention(maps):
    """Elementwise mean of equal-length maps, summed in list order."""
    if not maps:
        raise ValueError("aggregate_attention needs at least one map")
    arrs = [np.asarray(m, dtype=np.float64).ravel() for m in maps]
    n = arrs[0].size
    acc = np.zeros(n)
    for a in arrs:
        if a.size != n:
            raise ShapeError(f"attention maps differ in length: {n} vs {a.size}")
        acc += a
    return (acc / len(arrs)).astype(np.float32)


def _subject_rows(features, mask, who):
    f = np.asarray(features, dtype=np.float32)
    if f.ndim != 2 or f.shape[0] != mask.grid[0] * mask.grid[1]:
        raise ShapeError(f"{who} features shape {f.shape} does not match grid {mask.grid}")
    rows = f[mask.indices]
    norms = kernels.row_norms(rows)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero-norm feature at patch {mask.patch_indices[zero[0]]} of {who}")
    return rows, norms


def _candidates(anchors, restrict):
    feats, norms, owners = [], [], []
    for a_feat, a_mask in sorted(anchors, key=lambda t: t[1].image_index):
        if a_mask.empty:
            raise ValueError(f"anchor {a_mask.image_index} has an empty subject mask")
        m = a_mask if restrict else SubjectMask.full(a_mask.image_index, a_mask.grid)
        rows, nrm = _subject_rows(a_feat, m, f"anchor {a_mask.image_index}")
        feats.append(rows)
        norms.append(nrm)
        owners.extend((a_mask.image_index, p) for p in m.patch_indices)
    return np.concatenate(feats), np.concatenate(norms), owners


def build_correspondence(target_features, target_mask, anchors, restrict_to_mask=True):
    """Match every target subject patch to its most similar anchor subject patch.

    ``anchors`` is a list of ``(features, mask)`` pairs; the anchor index is
    taken from each mask. Candidates from all anchors compete; cosine ties
    go to the lower anchor index, then the lower patch index.
    """
    if not anchors:
        raise ValueError("build_correspondence needs at least one anchor")
    d = np.asarray(target_features).shape[-1]
    for feat, _ in anchors:
        if np.asarray(feat).shape[-1] != d:
            raise ShapeError(f"anchor feature dim {np.asarray(feat).shape[-1]} != target dim {d}")
    cand, cnorm, owners = _candidates(anchors, restrict_to_mask)
    if target_mask.empty:
        return CorrespondenceMap(target_mask.image_index, (), (), ())
    rows, tnorm = _subject_rows(target_features, target_mask, f"image {target_mask.image_index}")
    idx, sim = kernels.cosine_argmax(rows, cand, tnorm, cnorm)
    entries = tuple(owners[j] for j in idx)
    return CorrespondenceMap(target_mask.image_index, target_mask.patch_indices, entries,
                             tuple(float(s) for s in sim))


def match_single_anchor(target_features, target_mask, anchor_features, anchor_mask,
                        restrict_to_mask=True):
    """One-anchor matcher; agrees exactly with ``build_correspondence`` on one anchor."""
    if anchor_mask.empty:
        raise ValueError(f"anchor {anchor_mask.image_index} has an empty subject mask")
    m = anchor_mask if restrict_to_mask else SubjectMask.full(anchor_mask.image_index, anchor_mask.grid)
    cand, cnorm = _subject_rows(anchor_features, m, f"anchor {anchor_mask.image_index}")
    if target_mask.empty:
        return CorrespondenceMap(target_mask.image_index, (), (), ())
    rows, tnorm = _subject_rows(target_features, target_mask, f"image {target_mask.image_index}")
    idx, sim = kernels.cosine_argmax(rows, cand, tnorm, cnorm)
    patches = m.indices[idx]
    entries = tuple((anchor_mask.image_index, int(p)) for p in patches)
    return CorrespondenceMap(target_mask.image_index, target_mask.patch_indices, entries,
                             tuple(float(s) for s in sim))


# text formats

_MASK_RE = re.compile(r"^image=(\d+) mask=([0-9,]*)$")
_MAP_RE = re.compile(r"^image=(\d+) map=(.*)$")
_ENTRY_RE = re.compile(r"^(\d+):(\d+)/(\d+)$")


def format_masks(masks):
    return "".join(
        f"image={m.image_index} mask={','.join(map(str, m.patch_indices))}\n"
        for m in sorted(masks, key=lambda m: m.image_index))


def format_maps(maps):
    lines = []
    for cm in sorted(maps, key=lambda c: c.image_index):
        body = ",".join(f"{p}:{a}/{q}" for p, (a, q) in zip(cm.patches, cm.entries))
        lines.append(f"image={cm.image_index} map={body}\n")
    return "".join(lines)


def _text_lines(text, path):
    offset = 0
    for line in text.splitlines(keepends=True):
        yield offset, line.rstrip("\n")
        offset += len(line.encode())


def parse_masks(text, grid, path="masks.txt"):
    out = {}
    for offset, line in _text_lines(text, path):
        if not line:
            continue
        m = _MASK_RE.match(line)
        if m is None:
            raise ArtifactError(path, offset, f"bad mask record {line[:40]!r}")
        idx = tuple(int(v) for v in m.group(2).split(",")) if m.group(2) else ()
        try:
            out[int(m.group(1))] = SubjectMask(int(m.group(1)), idx, tuple(grid))
        except ShapeError as exc:
            raise ArtifactError(path, offset, str(exc)) from exc
    return out


def parse_maps(text, path="maps.txt"):
    out = {}
    for offset, line in _text_lines(text, path):
        if not line:
            continue
        m = _MAP_RE.match(line)
        if m is None:
            raise ArtifactError(path, offset, f"bad map record {line[:40]!r}")
        patches, entries = [], []
        for item in filter(None, m.group(2).split(",")):
            e = _ENTRY_RE.match(item)
            if e is None:
                raise ArtifactError(path, offset, f"bad map entry {item!r}")
            patches.append(int(e.group(1)))
            entries.append((int(e.group(2)), int(e.group(3))))
        out[int(m.group(1))] = CorrespondenceMap(int(m.group(1)), tuple(patches), tuple(entries))
    return out
