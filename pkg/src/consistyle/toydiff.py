"""A miniature seeded latent denoiser and a deterministic DDIM-style sampler.

Weights are random (He-style scaling) and never trained: the network only
has to move realistic tensors through self-attention, text cross-attention
and classifier-free guidance so the interventions have something to act on.

Layout: ``down.H`` (H x W, channels[0]) -> ``mid.H/2`` (H/2 x W/2,
channels[1]) -> ``up.H`` (H x W, channels[0]). Each level has one
transformer block (self-attention, text cross-attention, feed-forward).
``up.H`` is the highest-resolution decoder block.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import HookError, ShapeError
from .schemes import AttentionState
from .tensor import multihead_attention, softmax_rows, split_heads

MIN_STEPS = 10
NULL_TOKEN = 0
# sharpens text cross-attention so subject-token maps are spatially selective
CROSS_GAIN = 2.5


@dataclass(frozen=True)
class DenoiserConfig:
    latent_grid: tuple = (16, 16)
    channels: tuple = (32, 64)
    heads: int = 4
    latent_channels: int = 4
    embed_dim: int = 32
    weight_seed: int = 0
    sigma_max: float = 8.0
    sigma_min: float = 0.05

    def __post_init__(self):
        h, w = self.latent_grid
        for side in (h, w):
            if side < 8 or side & (side - 1):
                raise ValueError(f"latent grid sides must be powers of two >= 8, got {self.latent_grid}")
        if len(self.channels) != 2:
            raise ValueError("exactly two channel levels are supported")
        for c in self.channels:
            if c % self.heads:
                raise ValueError(f"{c} channels not divisible by {self.heads} heads")

    @property
    def n_patches(self):
        return self.latent_grid[0] * self.latent_grid[1]

    @property
    def layers(self):
        h, w = self.latent_grid
        return {f"down.{h}": (h, w), f"mid.{h // 2}": (h // 2, w // 2), f"up.{h}": (h, w)}

    @property
    def top_decoder_layer(self):
        return f"up.{self.latent_grid[0]}"

    @property
    def high_res_layers(self):
        return tuple(k for k, g in self.layers.items() if g == tuple(self.latent_grid))


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: tuple
    vectors: np.ndarray
    subject_token_pos: int


@dataclass(frozen=True)
class SchedulerState:
    total_steps: int
    sigmas: np.ndarray

    def __post_init__(self):
        s = self.sigmas
        if len(s) != self.total_steps or (s <= 0).any() or (np.diff(s) >= 0).any():
            raise ValueError("sigma schedule must be strictly decreasing, positive, length n")

    def sigma(self, step):
        return float(self.sigmas[step])

    def sigma_next(self, step):
        return float(self.sigmas[step + 1]) if step + 1 < self.total_steps else 0.0


def make_schedule(n, sigma_max=8.0, sigma_min=0.05):
    if n < MIN_STEPS:
        raise ValueError(f"need at least {MIN_STEPS} sampling steps, got {n}")
    return SchedulerState(n, np.linspace(sigma_max, sigma_min, n))


@dataclass(frozen=True)
class LayerCall:
    """Where a hook is being invoked: step, layer and batch half."""

    step: int
    total_steps: int
    layer_id: str
    grid: tuple
    guided: bool


def embed_prompt(tokens, subject_pos, seed, dim=32):
    """Token vectors drawn from a hash-to-Gaussian table keyed by ``(seed, token)``."""
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise ValueError("prompt needs at least one token")
    if not 0 <= subject_pos < len(tokens):
        raise ValueError(f"subject token position {subject_pos} outside prompt of {len(tokens)} tokens")
    vecs = np.stack([
        np.random.default_rng(np.random.SeedSequence([int(seed), 1, t])).standard_normal(dim)
        for t in tokens
    ]).astype(np.float32)
    return PromptEmbedding(tokens, vecs, int(subject_pos))


def cfg_combine(uncond_pred, cond_pred, scale):
    u = np.asarray(uncond_pred, dtype=np.float32)
    c = np.asarray(cond_pred, dtype=np.float32)
    if u.shape != c.shape:
        raise ShapeError(f"cfg halves disagree: {u.shape} vs {c.shape}")
    return u + np.float32(scale) * (c - u)


def initial_latents(seed, batch, cfg):
    return [
        np.random.default_rng(np.random.SeedSequence([int(seed), 2, i]))
        .standard_normal((cfg.n_patches, cfg.latent_channels)).astype(np.float32)
        for i in range(batch)
    ]


class CaptureLog:
    """Collects tapped tensors. ``requests`` maps a tap kind to ``pred(step, layer)``.

    Kinds: ``value`` (V entering attention), ``xattn`` (per-head subject
    cross-attention map, guided half only), ``dift`` (hidden state entering
    the top decoder block), ``features`` (top decoder block output).
    """

    def __init__(self, requests=None):
        self.requests = dict(requests or {})
        self.entries = {}

    def wants(self, kind, step, layer):
        pred = self.requests.get(kind)
        return pred is not None and pred(step, layer)

    def record(self, kind, step, layer, image, guided, array):
        self.entries[(kind, step, layer, image, bool(guided))] = np.array(array, dtype=np.float32)

    def get(self, kind, step, layer, image, guided=True):
        return self.entries[(kind, step, layer, image, guided)]

    def select(self, kind, guided=None):
        return {k[1:]: v for k, v in sorted(self.entries.items(), key=lambda kv: kv[0][1:])
                if k[0] == kind and (guided is None or k[4] == guided)}

    def stacked(self, kind):
        """``(step, layer, image) -> (2, ...)`` array with unguided then guided half."""
        out = {}
        for (k, step, layer, image, guided), arr in self.entries.items():
            if k == kind and guided:
                u = self.entries.get((k, step, layer, image, False))
                if u is not None:
                    out[(step, layer, image)] = np.stack([u, arr])
        return dict(sorted(out.items()))


def _silu(x):
    return x / (np.float32(1.0) + np.exp(-x))


def _gelu(x):
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(
        np.float32(0.7978845608) * (x + np.float32(0.044715) * x * x * x)))


def _norm(x):
    m = x.mean(axis=-1, keepdims=True)
    v = ((x - m) ** 2).mean(axis=-1, keepdims=True)
    return (x - m) / np.sqrt(v + np.float32(1e-5))


class ToyDenoiser:
    def __init__(self, cfg=None):
        self.cfg = cfg or DenoiserConfig()
        self.w = self._init_weights()

    def _init_weights(self):
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.weight_seed), 0]))
        c0, c1 = cfg.channels
        w = {}

        def lin(name, fan_in, fan_out, gain=1.0):
            w[name] = (rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))).astype(np.float32)

        lin("in", cfg.latent_channels, c0)
        lin("t1", c0, c0, np.sqrt(2))
        lin("t2", c0, c0)
        w["conv_down"] = (rng.standard_normal((9, c0, c0)) * np.sqrt(2 / (9 * c0)) * 0.5).astype(np.float32)
        lin("down", c0, c1)
        lin("up", c1, c0)
        w["conv_up"] = (rng.standard_normal((9, c0, c0)) * np.sqrt(2 / (9 * c0)) * 0.5).astype(np.float32)
        for layer, c in zip(cfg.layers, (c0, c1, c0)):
            for p in ("q", "k", "v"):
                lin(f"{layer}.self.{p}", c, c)
            lin(f"{layer}.self.o", c, c, 0.5)
            lin(f"{layer}.cross.q", c, c, CROSS_GAIN)
            lin(f"{layer}.cross.k", cfg.embed_dim, c, CROSS_GAIN)
            lin(f"{layer}.cross.v", cfg.embed_dim, c)
            lin(f"{layer}.cross.o", c, c, 0.5)
            lin(f"{layer}.ff1", c, 2 * c, np.sqrt(2))
            lin(f"{layer}.ff2", 2 * c, c, 0.5)
        lin("out", c0, cfg.latent_channels, 0.5)
        return w

    def _conv3x3(self, x, weight, grid):
        b, n, c = x.shape
        h, wd = grid
        pad = np.zeros((b, h + 2, wd + 2, c), dtype=np.float32)
        pad[:, 1:-1, 1:-1] = x.reshape(b, h, wd, c)
        out = np.zeros((b, h, wd, weight.shape[2]), dtype=np.float32)
        for k in range(9):
            dy, dx = divmod(k, 3)
            out += pad[:, dy:dy + h, dx:dx + wd] @ weight[k]
        return out.reshape(b, n, -1)

    def _time_embedding(self, sigma):
        c0 = self.cfg.channels[0]
        half = c0 // 2
        freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
        arg = 0.25 * np.log(sigma) * 100.0 * freqs
        emb = np.concatenate([np.sin(arg), np.cos(arg)]).astype(np.float32)
        return _silu(emb @ self.w["t1"]) @ self.w["t2"]

    def _transformer(self, h, layer, call, texts, hooks, capture, stress):
        cfg = self.cfg
        w = self.w
        x = _norm(h)
        q = x @ w[f"{layer}.self.q"]
        k = x @ w[f"{layer}.self.k"]
        v = x @ w[f"{layer}.self.v"]
        nb = h.shape[0] // 2
        if stress is not None:
            img, shift = stress
            for j in (img, img + nb):
                v[j] += np.float32(shift) * v[j].std(axis=0)
        attn_out = np.empty_like(h)
        for half, guided in ((0, False), (1, True)):
            sl = slice(half * nb, (half + 1) * nb)
            info = LayerCall(call.step, call.total_steps, layer, cfg.layers[layer], guided)
            state = AttentionState(tuple(q[sl]), tuple(k[sl]), tuple(v[sl]), tuple(h[sl]), heads=cfg.heads)
            if hooks is not None:
                state = _call_hook(hooks.self_attention, info, state)
            if capture is not None and capture.wants("value", call.step, layer):
                for i in range(nb):
                    capture.record("value", call.step, layer, i, guided, state.v[i])
            outs = [multihead_attention(state.q[i], state.k[i], state.v[i], cfg.heads) for i in range(nb)]
            if hooks is not None:
                outs = _call_hook(hooks.post_attention, info, outs)
            attn_out[sl] = np.stack(outs)
        h = h + attn_out @ w[f"{layer}.self.o"]

        x = _norm(h)
        q = x @ w[f"{layer}.cross.q"]
        cross = np.empty_like(h)
        want_map = capture is not None and capture.wants("xattn", call.step, layer)
        for j in range(h.shape[0]):
            emb = texts[j]
            kt = emb.vectors @ w[f"{layer}.cross.k"]
            vt = emb.vectors @ w[f"{layer}.cross.v"]
            qh = split_heads(q[j], cfg.heads)
            kh = split_heads(kt, cfg.heads)
            vh = split_heads(vt, cfg.heads)
            probs = softmax_rows((qh @ kh.transpose(0, 2, 1)) * np.float32(1 / np.sqrt(qh.shape[-1])))
            cross[j] = (probs @ vh).transpose(1, 0, 2).reshape(h.shape[1], -1)
            if want_map and j >= nb:
                capture.record("xattn", call.step, layer, j - nb, True, probs[:, :, emb.subject_token_pos])
        h = h + cross @ w[f"{layer}.cross.o"]
        return h + _gelu(_norm(h) @ w[f"{layer}.ff1"]) @ w[f"{layer}.ff2"]

    def predict(self, latents, step, sched, texts, hooks=None, capture=None, stress=None):
        """Noise prediction for a stacked ``(2B, N, c)`` batch: unguided half first."""
        cfg = self.cfg
        w = self.w
        hgrid = tuple(cfg.latent_grid)
        lgrid = (hgrid[0] // 2, hgrid[1] // 2)
        down, mid, up = cfg.layers
        sigma = sched.sigma(step)
        call = LayerCall(step, sched.total_steps, "", hgrid, True)
        nb = latents.shape[0] // 2

        x = latents / np.float32(np.sqrt(sigma * sigma + 1.0))
        temb = self._time_embedding(sigma)
        h = x @ w["in"]
        h = h + self._conv3x3(_silu(_norm(h)), w["conv_down"], hgrid) + temb
        h = self._transformer(h, down, call, texts, hooks, capture, stress)
        skip = h

        b, n, c = h.shape
        pooled = h.reshape(b, lgrid[0], 2, lgrid[1], 2, c).mean(axis=(2, 4)).reshape(b, -1, c)
        h = pooled @ w["down"]
        h = self._transformer(h, mid, call, texts, hooks, capture, stress)

        c1 = h.shape[2]
        grid_l = h.reshape(b, lgrid[0], lgrid[1], c1)
        h = np.repeat(np.repeat(grid_l, 2, axis=1), 2, axis=2).reshape(b, n, c1) @ w["up"] + skip
        if capture is not None and capture.wants("dift", step, up):
            for i in range(nb):
                capture.record("dift", step, up, i, True, h[nb + i])
        h = h + self._conv3x3(_silu(_norm(h)), w["conv_up"], hgrid)
        h = self._transformer(h, up, call, texts, hooks, capture, stress)
        if capture is not None and capture.wants("features", step, up):
            for i in range(nb):
                capture.record("features", step, up, i, True, h[nb + i])
        # Gaussian-data optimal denoiser keeps the trajectory at unit scale;
        # the network supplies the structured residual on top
        prior = latents * np.float32(sigma / (sigma * sigma + 1.0))
        return prior + _norm(h) @ w["out"]

    def denoise_step(self, latents, step, sched, cond, uncond, guidance,
                     hooks=None, capture=None, stress=None):
        """One deterministic (eta = 0) update of every latent in the batch."""
        z = np.stack(latents)
        texts = [uncond] * len(latents) + list(cond)
        eps = self.predict(np.concatenate([z, z]), step, sched, texts, hooks, capture, stress)
        nb = len(latents)
        eps = cfg_combine(eps[:nb], eps[nb:], guidance)
        sigma, sigma_next = sched.sigma(step), sched.sigma_next(step)
        x0 = z - np.float32(sigma) * eps
        z_next = x0 + np.float32(sigma_next) * eps
        return list(z_next.astype(np.float32))


def _call_hook(fn, info, payload):
    try:
        return fn(info, payload)
    except HookError:
        raise
    except Exception as exc:
        raise HookError(info.step, info.layer_id, exc) from exc


@dataclass
class SampleResult:
    latents: list
    capture: CaptureLog = field(default_factory=CaptureLog)


def sample(model, prompts, seed, steps, guidance=7.5, hooks=None, capture=None, stress=None,
           until=None):
    """Run the full sampling loop from seeded noise; returns final latents and the capture log.

    ``prompts`` are conditional ``PromptEmbedding`` objects, one per image.
    ``stress`` is an optional ``(image, shift)`` pair that adds ``shift``
    channel standard deviations to that image's self-attention values.
    ``until`` stops the loop after that many steps (the schedule still
    spans ``steps``).
    """
    cfg = model.cfg
    sched = make_schedule(steps, cfg.sigma_max, cfg.sigma_min)
    capture = capture if capture is not None else CaptureLog()
    uncond = embed_prompt((NULL_TOKEN,), 0, cfg.weight_seed, cfg.embed_dim)
    z = [l * np.float32(sched.sigma(0)) for l in initial_latents(seed, len(prompts), cfg)]
    for step in range(steps if until is None else min(until, steps)):
        if hooks is not None:
            z = _call_hook(hooks.pre_step,
                           LayerCall(step, steps, "latent", tuple(cfg.latent_grid), True), z)
        z = model.denoise_step(z, step, sched, prompts, uncond, guidance, hooks, capture, stress)
    return SampleResult(z, capture)


class NullHooks:
    """Hook chain that changes nothing; ``sample(hooks=NullHooks())`` equals ``hooks=None``."""

    def pre_step(self, info, latents):
        return latents

    def self_attention(self, info, state):
        return state

    def post_attention(self, info, outs):
        return outs


def decode_grayscale(latent, grid, upscale=8):
    """Fixed linear latent -> 8-bit grayscale map, nearest-upscaled for viewing."""
    weights = np.array([0.4, 0.3, 0.2, 0.1], dtype=np.float32)[: latent.shape[1]]
    g = latent @ weights
    img = np.clip((g + 3.0) / 6.0 * 255.0, 0, 255).round().astype(np.uint8).reshape(grid)
    return np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
