"""The three generation phases and the on-disk run tree.

1. vanilla pass: record V at the top decoder self-attention layer inside
   the V_sd window, plus the final-step features used as style references;
2. correspondence pass: attention crossing only (bootstrapped with
   full-image masks), subject masks from the subject-token cross-attention,
   and patch correspondences from intermediate features;
3. final pass: the configured scheme with every enabled component.

Each phase reads what it needs from the run directory, so running the
phases one by one produces the same tree as ``run_all``.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .correspondence import (SubjectMask, aggregate_attention, build_correspondence,
                             extract_subject_mask, format_maps, format_masks, parse_maps,
                             parse_masks)
from .errors import ArtifactError, ConsiStyleError, PhaseError
from .metrics import build_report
from .schemes import (Components, InterventionContext, SchemeSpec, rewrite_batch,
                      rewrite_hidden, rewrite_latents)
from .store import ValueStore
from .toydiff import CaptureLog, ToyDenoiser, decode_grayscale, embed_prompt, sample

log = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "phase\tstep\tlayer\timage\tkind\tpath\n"


class SchemeHooks:
    """Hook chain that applies one scheme at the mask-resolution self-attention layers."""

    def __init__(self, spec, cfg, components, masks=None, corr=None, store=None, grid=(16, 16)):
        self.spec = spec
        self.cfg = cfg
        self.components = components
        self.masks = dict(masks or {})
        self.corr = dict(corr or {})
        self.store = store
        self.grid = tuple(grid)
        self.vsd_layer = f"up.{grid[0]}"

    def context(self, info):
        return InterventionContext(
            step=info.step, total_steps=info.total_steps, layer_id=info.layer_id,
            guided=info.guided, masks=self.masks, corr=self.corr, value_store=self.store,
            anchors=self.spec.anchor_indices, qk_window=self.cfg.qk_steps,
            vsd_window=self.cfg.vsd_steps, vsd_layer=self.vsd_layer, components=self.components)

    def pre_step(self, info, latents):
        return rewrite_latents(self.spec, latents)

    def self_attention(self, info, state):
        if tuple(info.grid) != self.grid or self.spec.scheme == "vanilla":
            return state
        return rewrite_batch(self.spec, state, self.context(info))

    def post_attention(self, info, outs):
        if tuple(info.grid) != self.grid or self.spec.scheme != "consistory":
            return outs
        return rewrite_hidden(self.spec, outs, self.context(info))


def _prompts(cfg):
    dc = cfg.denoiser_config()
    return [embed_prompt(t, s, cfg.weight_seed, dc.embed_dim)
            for t, s in zip(cfg.prompt_tokens, cfg.subject_pos)]


def _model(cfg):
    return ToyDenoiser(cfg.denoiser_config())


@dataclass
class Phase1Result:
    store: ValueStore
    latents: list
    features: list


@dataclass
class Phase2Result:
    masks: dict
    maps: dict
    features: list
    attention: list


def phase1_vanilla(cfg, model=None):
    model = model or _model(cfg)
    dc = model.cfg
    top = dc.top_decoder_layer
    vsd = cfg.vsd_steps
    last = cfg.steps - 1
    cap = CaptureLog({
        "value": lambda s, l: l == top and s in vsd,
        "features": lambda s, l: s == last,
    })
    res = sample(model, _prompts(cfg), cfg.sampling_seed, cfg.steps, cfg.guidance,
                 hooks=None, capture=cap, stress=cfg.stress)
    store = ValueStore(vsd, top, dc.latent_grid)
    for (step, layer, image), v in cap.stacked("value").items():
        store.put(step, layer, image, v)
    feats = [cap.get("features", last, top, i) for i in range(cfg.batch)]
    return Phase1Result(store, res.latents, feats)


def phase2_correspondence(cfg, model=None):
    model = model or _model(cfg)
    dc = model.cfg
    grid = tuple(dc.latent_grid)
    top = dc.top_decoder_layer
    high = dc.high_res_layers
    qk = cfg.qk_steps
    fstep = cfg.feature_step
    cap = CaptureLog({
        "xattn": lambda s, l: l in high and s in qk,
        "dift": lambda s, l: s == fstep,
    })
    full = {i: SubjectMask.full(i, grid) for i in range(cfg.batch)}
    hooks = SchemeHooks(SchemeSpec("consistyle", cfg.anchors), cfg,
                        Components(qk_inject=False, vsd_inject=False, crossing=True,
                                   adain_in_crossing=True),
                        masks=full, grid=grid)
    # later steps feed nothing this phase records
    until = max(qk.hi, fstep + 1)
    sample(model, _prompts(cfg), cfg.sampling_seed, cfg.steps, cfg.guidance,
           hooks=hooks, capture=cap, stress=cfg.stress, until=until)

    masks, attention = {}, []
    for i in range(cfg.batch):
        maps = [cap.get("xattn", s, l, i)[h] for s in qk for l in high for h in range(dc.heads)]
        agg = aggregate_attention(maps)
        attention.append(agg)
        m = extract_subject_mask(agg, grid, cfg.tau, image_index=i)
        if m.empty:
            raise ConsiStyleError(
                f"empty subject mask for image {i} (max attention {float(agg.max()):.4g}); "
                f"tau={cfg.tau} is too high")
        masks[i] = m
    feats = [cap.get("dift", fstep, top, i) for i in range(cfg.batch)]
    anchors = [(feats[a], masks[a]) for a in cfg.anchors]
    corr = {}
    for i in range(cfg.batch):
        if i in cfg.anchors:
            continue
        corr[i] = build_correspondence(feats[i], masks[i], anchors,
                                       restrict_to_mask=cfg.corr_search == "mask")
    return Phase2Result(masks, corr, feats, attention)


def phase3_final(cfg, store, masks, maps, model=None, capture=None):
    """Final pass with the configured scheme; returns ``(latents, final features)``."""
    model = model or _model(cfg)
    dc = model.cfg
    top = dc.top_decoder_layer
    last = cfg.steps - 1
    cap = capture if capture is not None else CaptureLog()
    cap.requests.setdefault("features", lambda s, l: s == last)
    spec = SchemeSpec(cfg.scheme, cfg.anchors)
    hooks = SchemeHooks(spec, cfg, cfg.components(), masks=masks, corr=maps, store=store,
                        grid=dc.latent_grid)
    res = sample(model, _prompts(cfg), cfg.sampling_seed, cfg.steps, cfg.guidance,
                 hooks=hooks, capture=cap, stress=cfg.stress)
    feats = [cap.get("features", last, top, i) for i in range(cfg.batch)]
    return res.latents, feats


# on-disk run tree

class RunDir:
    """Output tree ``<root>/<run-id>/`` and its manifest."""

    def __init__(self, root, cfg):
        self.cfg = cfg
        self.path = Path(root) / cfg.run_id()

    def p(self, *parts):
        return self.path.joinpath(*parts)

    def begin(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self.p("config.resolved").write_text(self.cfg.resolved_text())

    def write_tensor(self, rel, array):
        tensorio.save(self.p(rel), array)

    def write_pgm(self, rel, img):
        path = self.p(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        h, w = img.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())

    def update_manifest(self, phase, rows):
        path = self.p(MANIFEST)
        kept = []
        if path.exists():
            for line in path.read_text().splitlines()[1:]:
                if line and not line.startswith(phase + "\t"):
                    kept.append(line)
        new = ["\t".join(str(x) for x in (phase,) + tuple(r)) for r in rows]
        order = {"phase1": 0, "phase2": 1, "phase3": 2}
        lines = sorted(kept + new, key=lambda l: (order.get(l.split("\t")[0], 9), l))
        path.write_text(MANIFEST_HEADER + "".join(l + "\n" for l in lines))


def _guard(phase, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ArtifactError, PhaseError):
        raise
    except Exception as exc:
        raise PhaseError(phase, exc) from exc


def run_phase1(cfg, root, model=None, result=None):
    """Run (or reuse ``result`` of) the vanilla pass and write its part of the tree."""
    rd = RunDir(root, cfg)
    rd.begin()
    r = result or _guard("phase1", phase1_vanilla, cfg, model)
    grid = tuple(cfg.latent_grid)
    r.store.save(rd.p("store"))
    rows = [(s, l, i, "value", f"store/{Path(n).name}")
            for (s, l, i), n in ((k, f"step{k[0]:03d}_{k[1]}_img{k[2]}.csty") for k in r.store.keys())]
    top = r.store.layer
    for i in range(cfg.batch):
        rd.write_tensor(f"latents/vanilla_{i}.csty", r.latents[i])
        rd.write_tensor(f"features/style_ref_{i}.csty", r.features[i])
        rd.write_pgm(f"images/vanilla_{i}.pgm", decode_grayscale(r.latents[i], grid))
        rows += [(cfg.steps - 1, "-", i, "latent", f"latents/vanilla_{i}.csty"),
                 (cfg.steps - 1, top, i, "style_ref", f"features/style_ref_{i}.csty"),
                 (cfg.steps - 1, "-", i, "image", f"images/vanilla_{i}.pgm")]
    rd.update_manifest("phase1", rows)
    return r


def run_phase2(cfg, root, model=None, result=None):
    rd = RunDir(root, cfg)
    rd.begin()
    r = result or _guard("phase2", phase2_correspondence, cfg, model)
    rd.p("masks.txt").write_text(format_masks(r.masks.values()))
    rd.p("maps.txt").write_text(format_maps(r.maps.values()))
    top = f"up.{cfg.latent_grid[0]}"
    rows = []
    for i in range(cfg.batch):
        rd.write_tensor(f"features/dift_{i}.csty", r.features[i])
        rd.write_tensor(f"features/xattn_{i}.csty", r.attention[i])
        rows += [(cfg.feature_step, top, i, "dift", f"features/dift_{i}.csty"),
                 (cfg.qk_steps.lo, "high-res", i, "xattn_mean", f"features/xattn_{i}.csty")]
    rows += [("-", "-", "-", "masks", "masks.txt"), ("-", "-", "-", "maps", "maps.txt")]
    rd.update_manifest("phase2", rows)
    return r


def load_phase_inputs(cfg, root):
    rd = RunDir(root, cfg)
    for need in ("store/index.tsv", "masks.txt", "maps.txt"):
        if not rd.p(need).exists():
            raise ArtifactError(rd.p(need), 0, "missing; run phase1 and phase2 first")
    store = ValueStore.load(rd.p("store"))
    masks = parse_masks(rd.p("masks.txt").read_text(), cfg.latent_grid, rd.p("masks.txt"))
    maps = parse_maps(rd.p("maps.txt").read_text(), rd.p("maps.txt"))
    refs = [tensorio.load(rd.p(f"features/style_ref_{i}.csty")) for i in range(cfg.batch)]
    return store, masks, maps, refs


def run_phase3(cfg, root, model=None):
    rd = RunDir(root, cfg)
    rd.begin()
    store, masks, maps, refs = load_phase_inputs(cfg, root)
    latents, feats = _guard("phase3", phase3_final, cfg, store, masks, maps, model)
    grid = tuple(cfg.latent_grid)
    top = store.layer
    rows = []
    for i in range(cfg.batch):
        rd.write_tensor(f"latents/final_{i}.csty", latents[i])
        rd.write_tensor(f"features/final_{i}.csty", feats[i])
        rd.write_pgm(f"images/final_{i}.pgm", decode_grayscale(latents[i], grid))
        rows += [(cfg.steps - 1, "-", i, "latent", f"latents/final_{i}.csty"),
                 (cfg.steps - 1, top, i, "features", f"features/final_{i}.csty"),
                 (cfg.steps - 1, "-", i, "image", f"images/final_{i}.pgm")]
    report = _guard("phase3", build_report, feats, refs, masks)
    rd.p("metrics.tsv").write_text(report.to_tsv())
    rows.append(("-", "-", "-", "metrics", "metrics.tsv"))
    rd.update_manifest("phase3", rows)
    return latents, feats, report


@dataclass
class RunArtifacts:
    path: Path
    vanilla_latents: list
    latents: list
    images: list
    store: ValueStore
    masks: dict
    maps: dict
    metrics: object


def run_all(cfg, root, model=None, phase1=None, phase2=None):
    """All three phases into ``<root>/<run-id>/``.

    ``phase1``/``phase2`` accept precomputed results; both phases ignore the
    scheme and component toggles, so variants of one base config share them.
    """
    model = model or _model(cfg)
    p1 = run_phase1(cfg, root, model, phase1)
    p2 = run_phase2(cfg, root, model, phase2)
    latents, _, report = run_phase3(cfg, root, model)
    grid = tuple(cfg.latent_grid)
    return RunArtifacts(RunDir(root, cfg).path, p1.latents, latents,
                        [decode_grayscale(z, grid) for z in latents], p1.store, p2.masks,
                        p2.maps, report)
