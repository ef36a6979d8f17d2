"""Self-attention interventions: ConsiStyle and the four rival zero-shot schemes.

Each scheme has a *modification* stage that rewrites an image's own Q/K/V
(or hidden state, or latent) and a *crossing* stage that extends an
image's K/V dictionary with rows imported from other images. Within one batch half, every image
is modified first; crossing then reads the modified tensors.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Optional

import numpy as np

from .errors import ShapeError
from .tensor import adain, concat_rows

log = logging.getLogger(__name__)

SCHEMES = ("vanilla", "consistyle", "consistory", "cross-image", "style-aligned", "illusign")
NEEDS_CORRESPONDENCE = ("consistyle", "consistory")
NEEDS_DISTINCT_ANCHOR = ("cross-image", "illusign")


@dataclass(frozen=True)
class StepWindow:
    """Half-open range of sampling steps ``[lo, hi)``."""

    lo: int
    hi: int

    def __contains__(self, step):
        return self.lo <= step < self.hi

    def __len__(self):
        return max(0, self.hi - self.lo)

    def __iter__(self):
        return iter(range(self.lo, self.hi))


def gating_window(lo_frac, hi_frac, n):
    """``[ceil(lo * n), ceil(hi * n))`` computed in exact rational arithmetic."""
    lo = Fraction(str(lo_frac)) * n
    hi = Fraction(str(hi_frac)) * n
    return StepWindow(math.ceil(lo), math.ceil(hi))


@dataclass(frozen=True)
class AttentionState:
    """Per-image self-attention tensors for one batch half at one layer.

    ``q``, ``k``, ``v`` and ``hidden`` are tuples of ``(N, d)`` arrays; after
    crossing, ``k[i]`` and ``v[i]`` may carry more than ``N`` rows.
    """

    q: tuple
    k: tuple
    v: tuple
    hidden: tuple
    latent: tuple = ()
    heads: int = 1

    def __post_init__(self):
        b = len(self.q)
        if not (len(self.k) == len(self.v) == b):
            raise ShapeError("q, k, v must hold one tensor per image")
        for i in range(b):
            if self.k[i].shape[0] != self.v[i].shape[0]:
                raise ShapeError(f"image {i}: K rows {self.k[i].shape[0]} != V rows {self.v[i].shape[0]}")
            if self.q[i].shape[1] % self.heads:
                raise ShapeError(f"{self.q[i].shape[1]} channels do not split into {self.heads} heads")

    @property
    def batch(self):
        return len(self.q)

    def with_image(self, i, **tensors):
        out = {}
        for name, val in tensors.items():
            seq = list(getattr(self, name))
            seq[i] = val
            out[name] = tuple(seq)
        return replace(self, **out)


@dataclass(frozen=True)
class SchemeSpec:
    scheme: str
    anchor_indices: tuple = (0,)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEMES)}")
        object.__setattr__(self, "anchor_indices", tuple(int(a) for a in self.anchor_indices))
        if self.scheme != "vanilla" and not self.anchor_indices:
            raise ValueError(f"scheme {self.scheme} needs at least one anchor")

    @property
    def anchor(self):
        return self.anchor_indices[0]

    def validate(self, batch):
        bad = [a for a in self.anchor_indices if not 0 <= a < batch]
        if bad:
            raise ValueError(f"anchor indices {bad} outside batch of {batch}")
        if self.scheme in NEEDS_DISTINCT_ANCHOR and batch > 1 and len(self.anchor_indices) >= batch:
            raise ValueError(f"{self.scheme} needs at least one image distinct from its anchor")

    def targets(self, batch):
        """Images that receive anchor-driven rewrites."""
        return [i for i in range(batch) if i not in self.anchor_indices]


@dataclass(frozen=True)
class Components:
    """ConsiStyle component switches."""

    qk_inject: bool = True
    qk_parts: str = "qk"
    vsd_inject: bool = True
    crossing: bool = True
    adain_in_crossing: bool = True
    qk_guided_only: bool = True
    vsd_both_halves: bool = True
    crossing_both_halves: bool = True

    def __post_init__(self):
        if self.qk_parts not in ("qk", "q", "k"):
            raise ValueError(f"qk_parts must be qk, q or k, got {self.qk_parts!r}")


@dataclass(frozen=True)
class InterventionContext:
    step: int
    total_steps: int
    layer_id: str
    guided: bool
    masks: Mapping = field(default_factory=dict)
    corr: Mapping = field(default_factory=dict)
    value_store: Optional[object] = None
    anchors: tuple = (0,)
    qk_window: StepWindow = StepWindow(0, 0)
    vsd_window: StepWindow = StepWindow(0, 0)
    vsd_layer: str = "up.16"
    components: Components = Components()

    def __post_init__(self):
        if not 0 <= self.step < self.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.total_steps})")

    @property
    def qk_active(self):
        c = self.components
        return (c.qk_inject and self.step in self.qk_window
                and (self.guided or not c.qk_guided_only))

    @property
    def vsd_active(self):
        c = self.components
        return (c.vsd_inject and self.step in self.vsd_window and self.layer_id == self.vsd_layer
                and (self.guided or c.vsd_both_halves))

    @property
    def crossing_active(self):
        c = self.components
        return c.crossing and (self.guided or c.crossing_both_halves)


def _mask_rows(ctx, j, n):
    mask = ctx.masks.get(j)
    if mask is None:
        raise KeyError(f"no subject mask for image {j}")
    idx = mask.indices
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise ShapeError(f"mask of image {j} indexes patch {idx[-1]} outside [0, {n})")
    return idx


def _corr_rows(ctx, i, n):
    cm = ctx.corr.get(i)
    if cm is None:
        raise KeyError(f"no correspondence map for image {i}")
    p, a, q = cm.rows()
    if p.size and (p.max() >= n or q.max() >= n):
        raise ShapeError(f"correspondence of image {i} indexes outside [0, {n})")
    return p, a, q


def _gather(blocks, anchors, patches):
    """Row ``r`` of the result is ``blocks[anchors[r]][patches[r]]``."""
    out = np.empty((len(patches), blocks[0].shape[1]), dtype=np.float32)
    for a in np.unique(anchors):
        sel = anchors == a
        out[sel] = blocks[a][patches[sel]]
    return out


def inject_qk(state, ctx, image_i, parts=None):
    """Overwrite the subject rows of Q_i and K_i with their mapped anchor rows.

    Gated: returns ``state`` untouched outside the Q/K window or on the
    unguided half (unless the guided-only rule is switched off).
    """
    if not ctx.qk_active:
        return state
    parts = parts or ctx.components.qk_parts
    mask = ctx.masks.get(image_i)
    if mask is not None and mask.empty:
        log.warning("image %d has an empty subject mask; Q/K injection skipped", image_i)
        return state
    if image_i not in ctx.corr:
        if image_i in ctx.anchors:
            return state
        raise KeyError(f"no correspondence map for image {image_i}")
    n = state.q[image_i].shape[0]
    p, a, q = _corr_rows(ctx, image_i, n)
    if p.size == 0:
        return state
    upd = {}
    if "q" in parts:
        new_q = state.q[image_i].copy()
        new_q[p] = _gather(state.q, a, q)
        upd["q"] = new_q
    if "k" in parts:
        new_k = state.k[image_i].copy()
        new_k[p] = _gather(state.k, a, q)
        upd["k"] = new_k
    return state.with_image(image_i, **upd)


def inject_vsd(state, ctx, image_i):
    """Replace V_i wholesale by the vanilla-pass value recorded for this step and layer."""
    if not ctx.vsd_active:
        return state
    if ctx.value_store is None:
        raise KeyError("V_sd injection enabled but no value store attached")
    key = (ctx.step, ctx.layer_id, image_i)
    try:
        stored = ctx.value_store.get(*key)
    except KeyError:
        raise KeyError(f"value store has no entry for (step, layer, image) = {key}; "
                       "phase-1 recording and phase-3 windows disagree") from None
    v = stored.data[1 if ctx.guided else 0]
    if v.shape != state.v[image_i].shape:
        raise ShapeError(f"stored V {v.shape} does not match live V {state.v[image_i].shape}")
    return state.with_image(image_i, v=v)


def cross_attention_components(state, ctx, image_i, adain_guard=True):
    """Extended (K, V) for image i: own rows in place, other images' subject rows around them.

    Imported value blocks are renormalised onto V_i's channel statistics
    unless ``adain_guard`` is off.
    """
    k_blocks, v_blocks = [], []
    k_i, v_i = state.k[image_i], state.v[image_i]
    for j in range(state.batch):
        if j == image_i:
            k_blocks.append(k_i)
            v_blocks.append(v_i)
            continue
        idx = _mask_rows(ctx, j, state.k[j].shape[0])
        if idx.size == 0:
            continue
        vj = state.v[j][idx]
        k_blocks.append(state.k[j][idx])
        v_blocks.append(adain(vj, v_i) if adain_guard else vj)
    if len(k_blocks) == 1:
        return k_i, v_i
    return concat_rows(k_blocks), concat_rows(v_blocks)


# per-scheme modification / crossing

def _modify(spec, state, ctx, i):
    s = spec.scheme
    if s == "consistyle":
        state = inject_qk(state, ctx, i)
        if ctx.components.vsd_inject:
            state = inject_vsd(state, ctx, i)
        return state
    if i in spec.anchor_indices:
        return state
    a = spec.anchor
    if s == "cross-image":
        return state.with_image(i, k=state.k[a], v=state.v[a])
    if s == "style-aligned":
        return state.with_image(i, q=adain(state.q[i], state.q[a]), k=adain(state.k[i], state.k[a]))
    if s == "illusign":
        q = state.q[i] + np.float32(0.5) * state.q[a]
        return state.with_image(i, q=q, k=state.k[a], v=state.v[a])
    return state


def _cross(spec, state, ctx, i):
    s = spec.scheme
    if s == "consistyle":
        if not ctx.crossing_active:
            return state
        k, v = cross_attention_components(state, ctx, i, ctx.components.adain_in_crossing)
        return state.with_image(i, k=k, v=v)
    if s == "consistory":
        ks, vs = [state.k[i]], [state.v[i]]
        for j in range(state.batch):
            if j != i:
                idx = _mask_rows(ctx, j, state.k[j].shape[0])
                ks.append(state.k[j][idx])
                vs.append(state.v[j][idx])
        return state.with_image(i, k=concat_rows(ks), v=concat_rows(vs))
    if s == "style-aligned" and i not in spec.anchor_indices:
        a = spec.anchor
        return state.with_image(i, k=concat_rows([state.k[i], state.k[a]]),
                                v=concat_rows([state.v[i], state.v[a]]))
    return state


def _check(spec, ctx, batch):
    spec.validate(batch)
    if spec.scheme in NEEDS_CORRESPONDENCE:
        missing = [i for i in spec.targets(batch) if i not in ctx.corr]
        if missing and (spec.scheme == "consistory" or ctx.components.qk_inject):
            raise KeyError(f"scheme {spec.scheme} needs correspondence maps for images {missing}")


def rewrite_batch(spec, state, ctx):
    """Apply a scheme to every image of one batch half."""
    if spec.scheme == "vanilla":
        return state
    _check(spec, ctx, state.batch)
    mod = state
    for i in range(state.batch):
        mod = mod.with_image(i, **_own(_modify(spec, state, ctx, i), i))
    out = mod
    for i in range(state.batch):
        out = out.with_image(i, **_own(_cross(spec, mod, ctx, i), i))
    return out


def apply_scheme(spec, state, ctx, image_i):
    """Rewrite image ``image_i`` as the scheme dictates; other images are returned as given."""
    if spec.scheme == "vanilla":
        return state
    full = rewrite_batch(spec, state, ctx)
    return state.with_image(image_i, **_own(full, image_i))


def _own(state, i):
    return {"q": state.q[i], "k": state.k[i], "v": state.v[i]}


def rewrite_hidden(spec, hidden, ctx):
    """Post-attention hidden-state rewrite (Consistory): h_i[s_i] <- h_a[C_a(s_i)]."""
    if spec.scheme != "consistory":
        return hidden
    out = list(hidden)
    for i in spec.targets(len(hidden)):
        n = hidden[i].shape[0]
        p, a, q = _corr_rows(ctx, i, n)
        if p.size:
            h = hidden[i].copy()
            h[p] = _gather(hidden, a, q)
            out[i] = h
    return out


def rewrite_latents(spec, latents):
    """Pre-step latent rewrite (Cross-Image Attention): z_i <- AdaIN(z_i, z_a)."""
    if spec.scheme != "cross-image":
        return latents
    out = list(latents)
    for i in spec.targets(len(latents)):
        out[i] = adain(latents[i], latents[spec.anchor])
    return out
