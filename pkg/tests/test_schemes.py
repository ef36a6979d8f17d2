import numpy as np
import pytest

from consistyle.correspondence import CorrespondenceMap, SubjectMask
from consistyle.schemes import (SCHEMES, AttentionState, Components, InterventionContext,
                                SchemeSpec, StepWindow, apply_scheme, cross_attention_components,
                                gating_window, inject_qk, inject_vsd, rewrite_batch, rewrite_hidden,
                                rewrite_latents)
from consistyle.store import ValueStore
from consistyle.tensor import channel_stats, multihead_attention, scaled_dot_attention

GRID = (4, 4)
N = 16


def make_state(r, b=3, n=N, d=8, heads=2):
    t = lambda: tuple(r.normal(size=(n, d)).astype(np.float32) for _ in range(b))
    return AttentionState(t(), t(), t(), t(), heads=heads)


def ctx(**kw):
    base = dict(step=3, total_steps=20, layer_id="up.4", guided=True,
                qk_window=StepWindow(2, 6), vsd_window=StepWindow(2, 6), vsd_layer="up.4")
    base.update(kw)
    return InterventionContext(**base)


def masks_for(b, r, n=N):
    return {i: SubjectMask(i, tuple(sorted(r.choice(n, int(r.integers(1, n)), replace=False).tolist())), GRID)
            for i in range(b)}


def identity_corr(i, a, mask):
    return CorrespondenceMap(i, mask.patch_indices, tuple((a, p) for p in mask.patch_indices))


@pytest.mark.parametrize("n,lo,hi", [(50, 5, 15), (10, 1, 3), (25, 3, 8), (33, 4, 10), (100, 10, 30)])
def test_gating_window(n, lo, hi):
    w = gating_window(0.1, 0.3, n)
    assert (w.lo, w.hi) == (lo, hi)
    assert list(w) == list(range(lo, hi))


def test_window_nonempty_and_in_range():
    for n in range(10, 400):
        w = gating_window(0.1, 0.3, n)
        assert 0 <= w.lo < w.hi <= n


def test_inject_qk_toy_map():
    r = np.random.default_rng(0)
    st = make_state(r, b=2, n=4, d=2, heads=1)
    m = SubjectMask(1, (0, 3), (2, 2))
    cm = CorrespondenceMap(1, (0, 3), ((0, 2), (0, 1)))
    out = inject_qk(st, ctx(masks={1: m}, corr={1: cm}), 1)
    for name in ("q", "k"):
        want = getattr(st, name)[1].copy()
        want[0] = getattr(st, name)[0][2]
        want[3] = getattr(st, name)[0][1]
        np.testing.assert_array_equal(getattr(out, name)[1], want)
    assert out.v[1] is st.v[1]
    assert out.q[0] is st.q[0]


def test_inject_qk_parts_and_gating():
    r = np.random.default_rng(1)
    st = make_state(r)
    masks = masks_for(3, r)
    corr = {i: identity_corr(i, 0, masks[i]) for i in (1, 2)}
    c = ctx(masks=masks, corr=corr)
    only_k = inject_qk(st, c, 1, parts="k")
    assert only_k.q[1] is st.q[1] and only_k.k[1] is not st.k[1]
    for gated in (ctx(masks=masks, corr=corr, step=1), ctx(masks=masks, corr=corr, step=6),
                  ctx(masks=masks, corr=corr, guided=False),
                  ctx(masks=masks, corr=corr, components=Components(qk_inject=False))):
        assert inject_qk(st, gated, 1) is st
    unguided = ctx(masks=masks, corr=corr, guided=False, components=Components(qk_guided_only=False))
    assert inject_qk(st, unguided, 1) is not st


def test_inject_qk_empty_mask_and_missing_map(caplog):
    r = np.random.default_rng(2)
    st = make_state(r, b=2)
    c = ctx(masks={0: SubjectMask(0, (1,), GRID), 1: SubjectMask(1, (), GRID)}, corr={})
    assert inject_qk(st, c, 1) is st
    assert "empty subject mask" in caplog.text
    with pytest.raises(KeyError):
        inject_qk(st, ctx(masks={1: SubjectMask(1, (2,), GRID)}, corr={}), 1)
    # the anchor has no map and is left alone
    assert inject_qk(st, ctx(masks={0: SubjectMask(0, (2,), GRID)}, corr={}), 0) is st


def test_inject_qk_full_mask_identity_and_anchor_fixed_point():
    r = np.random.default_rng(3)
    st = make_state(r, b=2)
    full = SubjectMask.full(1, GRID)
    out = inject_qk(st, ctx(masks={1: full}, corr={1: identity_corr(1, 0, full)}), 1)
    np.testing.assert_array_equal(out.q[1], st.q[0])
    np.testing.assert_array_equal(out.k[1], st.k[0])
    a_full = SubjectMask.full(0, GRID)
    same = inject_qk(st, ctx(masks={0: a_full}, corr={0: identity_corr(0, 0, a_full)}), 0)
    np.testing.assert_array_equal(same.q[0], st.q[0])
    np.testing.assert_array_equal(same.k[0], st.k[0])


def test_inject_qk_locality_random():
    r = np.random.default_rng(4)
    for _ in range(30):
        b = int(r.integers(2, 5))
        st = make_state(r, b=b)
        masks = masks_for(b, r)
        corr = {i: CorrespondenceMap(i, masks[i].patch_indices,
                                     tuple((0, int(r.integers(N))) for _ in masks[i].patch_indices))
                for i in range(1, b)}
        i = int(r.integers(1, b))
        out = inject_qk(st, ctx(masks=masks, corr=corr), i)
        keep = np.setdiff1d(np.arange(N), masks[i].indices)
        for name in ("q", "k"):
            np.testing.assert_array_equal(getattr(out, name)[i][keep], getattr(st, name)[i][keep])


def _store(r, b=2, d=8):
    store = ValueStore(StepWindow(2, 6), "up.4", GRID)
    for s in range(2, 6):
        for i in range(b):
            store.put(s, "up.4", i, r.normal(size=(2, N, d)).astype(np.float32))
    return store


def test_inject_vsd():
    r = np.random.default_rng(5)
    st = make_state(r, b=2)
    store = _store(r)
    for guided, half in ((True, 1), (False, 0)):
        out = inject_vsd(st, ctx(value_store=store, guided=guided), 1)
        np.testing.assert_array_equal(out.v[1], store.get(3, "up.4", 1).data[half])
        assert out.q[1] is st.q[1] and out.k[1] is st.k[1]
    assert inject_vsd(st, ctx(value_store=store, step=6), 1) is st
    assert inject_vsd(st, ctx(value_store=store, layer_id="down.4"), 1) is st
    assert inject_vsd(st, ctx(value_store=store, guided=False,
                              components=Components(vsd_both_halves=False)), 1) is st
    gap = ValueStore(StepWindow(2, 6), "up.4", GRID)
    with pytest.raises(KeyError, match="windows disagree"):
        inject_vsd(st, ctx(value_store=gap), 1)


def test_crossing_shapes_and_stats():
    r = np.random.default_rng(6)
    one = make_state(r, b=1)
    k, v = cross_attention_components(one, ctx(masks={0: SubjectMask(0, (1,), GRID)}), 0)
    assert k is one.k[0] and v is one.v[0]
    st = make_state(r, b=2)
    st = st.with_image(1, v=(st.v[1] * 4 + 10).astype(np.float32))
    masks = {0: SubjectMask(0, (0, 1), GRID), 1: SubjectMask(1, (2, 5, 7), GRID)}
    k, v = cross_attention_components(st, ctx(masks=masks), 0)
    assert k.shape == v.shape == (N + 3, 8)
    np.testing.assert_array_equal(k[:N], st.k[0])
    np.testing.assert_array_equal(k[N:], st.k[1][[2, 5, 7]])
    si, sb = channel_stats(st.v[0]), channel_stats(v[N:])
    np.testing.assert_allclose(sb.mean, si.mean, atol=1e-4)
    np.testing.assert_allclose(sb.std, si.std, atol=1e-4)
    _, raw = cross_attention_components(st, ctx(masks=masks), 0, adain_guard=False)
    np.testing.assert_array_equal(raw[N:], st.v[1][[2, 5, 7]])
    gap = np.abs(channel_stats(raw[N:]).mean - si.mean)
    assert (gap > 1.0).all()
    out = multihead_attention(st.q[0], k, v, 2)
    assert out.shape == (N, 8)
    w = scaled_dot_attention(st.q[0], k, np.eye(N + 3, dtype=np.float32))
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)
    with pytest.raises(Exception):
        cross_attention_components(make_state(r, b=2, n=4), ctx(masks=masks), 0)


def test_vanilla_is_identity():
    r = np.random.default_rng(7)
    st = make_state(r)
    assert rewrite_batch(SchemeSpec("vanilla"), st, ctx()) is st
    assert apply_scheme(SchemeSpec("vanilla"), st, ctx(), 1) is st


def test_style_aligned():
    r = np.random.default_rng(8)
    st = make_state(r)
    out = rewrite_batch(SchemeSpec("style-aligned", (0,)), st, ctx())
    for i in (1, 2):
        for name in ("q",):
            s_out, s_a = channel_stats(getattr(out, name)[i]), channel_stats(getattr(st, name)[0])
            np.testing.assert_allclose(s_out.mean, s_a.mean, atol=1e-4)
            np.testing.assert_allclose(s_out.std, s_a.std, atol=1e-4)
        assert out.k[i].shape == (2 * N, 8)
        np.testing.assert_array_equal(out.k[i][N:], st.k[0])
        np.testing.assert_array_equal(out.v[i], np.concatenate([st.v[i], st.v[0]]))
        np.testing.assert_allclose(channel_stats(out.k[i][:N]).mean, channel_stats(st.k[0]).mean, atol=1e-4)
    assert out.q[0] is st.q[0] and out.k[0] is st.k[0]


def test_illusign():
    r = np.random.default_rng(9)
    st = make_state(r)
    out = rewrite_batch(SchemeSpec("illusign", (0,)), st, ctx())
    for i in (1, 2):
        np.testing.assert_array_equal(out.q[i], st.q[i] + np.float32(0.5) * st.q[0])
        np.testing.assert_array_equal(out.k[i], st.k[0])
        np.testing.assert_array_equal(out.v[i], st.v[0])
    assert out.q[0] is st.q[0]


def test_cross_image():
    r = np.random.default_rng(10)
    st = make_state(r)
    out = rewrite_batch(SchemeSpec("cross-image", (0,)), st, ctx())
    for i in (1, 2):
        np.testing.assert_array_equal(out.k[i], st.k[0])
        np.testing.assert_array_equal(out.v[i], st.v[0])
        np.testing.assert_array_equal(out.q[i], st.q[i])
    z = [r.normal(size=(N, 4)).astype(np.float32) * (i + 1) for i in range(3)]
    zz = rewrite_latents(SchemeSpec("cross-image", (0,)), z)
    assert zz[0] is z[0]
    for i in (1, 2):
        np.testing.assert_allclose(channel_stats(zz[i]).std, channel_stats(z[0]).std, atol=1e-4)
    assert rewrite_latents(SchemeSpec("consistyle"), z) is z


def test_consistory():
    r = np.random.default_rng(11)
    st = make_state(r)
    masks = masks_for(3, r)
    corr = {i: identity_corr(i, 0, masks[i]) for i in (1, 2)}
    out = rewrite_batch(SchemeSpec("consistory", (0,)), st, ctx(masks=masks, corr=corr))
    for i in range(3):
        extra = sum(len(masks[j]) for j in range(3) if j != i)
        assert out.k[i].shape[0] == out.v[i].shape[0] == N + extra
    # raw values, no AdaIN on the imported block
    np.testing.assert_array_equal(out.v[0][N:N + len(masks[1])], st.v[1][masks[1].indices])
    hidden = [h.copy() for h in st.hidden]
    h2 = rewrite_hidden(SchemeSpec("consistory", (0,)), hidden, ctx(masks=masks, corr=corr))
    for i in (1, 2):
        np.testing.assert_array_equal(h2[i][masks[i].indices], st.hidden[0][masks[i].indices])
        keep = np.setdiff1d(np.arange(N), masks[i].indices)
        np.testing.assert_array_equal(h2[i][keep], st.hidden[i][keep])
    np.testing.assert_array_equal(h2[0], st.hidden[0])
    with pytest.raises(KeyError):
        rewrite_batch(SchemeSpec("consistory", (0,)), st, ctx(masks=masks, corr={}))


def test_consistyle_full_rewrite():
    r = np.random.default_rng(12)
    st = make_state(r, b=2)
    store = _store(r)
    masks = masks_for(2, r)
    corr = {1: identity_corr(1, 0, masks[1])}
    c = ctx(masks=masks, corr=corr, value_store=store)
    out = rewrite_batch(SchemeSpec("consistyle", (0,)), st, c)
    idx = masks[1].indices
    np.testing.assert_array_equal(out.q[1][idx], st.q[0][idx])
    # blocks follow image order, so image 0's subject rows come first
    own = slice(len(masks[0]), len(masks[0]) + N)
    np.testing.assert_array_equal(out.k[1][own][idx], st.k[0][idx])
    np.testing.assert_array_equal(out.k[1][:len(masks[0])], st.k[0][masks[0].indices])
    np.testing.assert_array_equal(out.v[1][own], store.get(3, "up.4", 1).data[1])
    assert out.k[1].shape[0] == N + len(masks[0])
    with pytest.raises(KeyError):
        rewrite_batch(SchemeSpec("consistyle", (0,)), st, ctx(masks=masks, corr={}, value_store=store))
    # all components off: nothing changes
    off = Components(qk_inject=False, vsd_inject=False, crossing=False)
    same = rewrite_batch(SchemeSpec("consistyle", (0,)), st, ctx(masks=masks, components=off))
    for name in ("q", "k", "v"):
        for i in range(2):
            assert getattr(same, name)[i] is getattr(st, name)[i]


def test_separability_under_relabeling():
    r = np.random.default_rng(13)
    st = make_state(r, b=4)
    empty = {i: SubjectMask(i, (), GRID) for i in range(4)}
    spec = SchemeSpec("consistyle", (0,))
    comp = Components(qk_inject=False, vsd_inject=False)
    out = rewrite_batch(spec, st, ctx(masks=empty, components=comp))
    perm = [0, 3, 1, 2]
    pst = AttentionState(*(tuple(getattr(st, n)[p] for p in perm) for n in ("q", "k", "v", "hidden")),
                         heads=st.heads)
    pout = rewrite_batch(spec, pst, ctx(masks=empty, components=comp))
    for new, old in enumerate(perm):
        np.testing.assert_array_equal(multihead_attention(pout.q[new], pout.k[new], pout.v[new], 2),
                                      multihead_attention(out.q[old], out.k[old], out.v[old], 2))


def test_spec_validation():
    assert len(SCHEMES) == 6
    with pytest.raises(ValueError):
        SchemeSpec("bogus")
    with pytest.raises(ValueError):
        SchemeSpec("illusign", (0, 1)).validate(2)
    with pytest.raises(ValueError):
        SchemeSpec("consistyle", (3,)).validate(2)
    with pytest.raises(ValueError):
        InterventionContext(step=5, total_steps=5, layer_id="x", guided=True)
    with pytest.raises(ValueError):
        Components(qk_parts="v")
