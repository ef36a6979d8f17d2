"""Run configuration: a flat ``key = value`` text file with ``[section]`` headers.

Keys are addressed as ``section.key``; a bare key is accepted when it is
unambiguous (``steps=9`` means ``run.steps=9``). Overrides apply after the
file. Prompt keys are per image: ``prompts.tokens.<i>`` and
``prompts.subject.<i>``.
"""
import hashlib
import re
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError
from .schemes import SCHEMES, Components, gating_window
from .toydiff import MIN_STEPS, DenoiserConfig

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}

# canonical key -> RunConfig field
KEYS = {
    "run.batch": "batch",
    "run.steps": "steps",
    "run.guidance": "guidance",
    "run.anchors": "anchors",
    "run.tau": "tau",
    "run.scheme": "scheme",
    "run.qk_window": "qk_window",
    "run.vsd_window": "vsd_window",
    "run.dift_step": "dift_step",
    "run.corr_search": "corr_search",
    "seeds.weights": "weight_seed",
    "seeds.sampling": "sampling_seed",
    "model.latent_grid": "latent_grid",
    "model.channels": "channels",
    "model.heads": "heads",
    "toggles.qk_inject": "qk_inject",
    "toggles.qk_parts": "qk_parts",
    "toggles.vsd_inject": "vsd_inject",
    "toggles.crossing": "crossing",
    "toggles.adain_in_crossing": "adain_in_crossing",
    "toggles.qk_guided_only": "qk_guided_only",
    "toggles.vsd_both_halves": "vsd_both_halves",
    "toggles.crossing_both_halves": "crossing_both_halves",
    "stress.image": "stress_image",
    "stress.shift": "stress_shift",
}
_PROMPT_RE = re.compile(r"^prompts\.(tokens|subject)\.(\d+)$")


def default_tokens(i):
    return (3, 5, 11, 20 + i, 30 + i, 7)


DEFAULT_SUBJECT_POS = 2


@dataclass(frozen=True)
class RunConfig:
    batch: int = 2
    steps: int = 50
    guidance: float = 7.5
    anchors: tuple = (0,)
    tau: float = 0.3
    scheme: str = "consistyle"
    qk_window: tuple = (Fraction(1, 10), Fraction(3, 10))
    vsd_window: tuple = (Fraction(1, 10), Fraction(3, 10))
    dift_step: int = -1
    corr_search: str = "mask"
    weight_seed: int = 0
    sampling_seed: int = 0
    latent_grid: tuple = (16, 16)
    channels: tuple = (32, 64)
    heads: int = 4
    qk_inject: bool = True
    qk_parts: str = "qk"
    vsd_inject: bool = True
    crossing: bool = True
    adain_in_crossing: bool = True
    qk_guided_only: bool = True
    vsd_both_halves: bool = True
    crossing_both_halves: bool = True
    stress_image: int = -1
    stress_shift: float = 0.0
    prompt_tokens: tuple = ()
    subject_pos: tuple = ()

    def __post_init__(self):
        if not self.prompt_tokens:
            object.__setattr__(self, "prompt_tokens", tuple(default_tokens(i) for i in range(self.batch)))
        if not self.subject_pos:
            object.__setattr__(self, "subject_pos", (DEFAULT_SUBJECT_POS,) * self.batch)

    def validate(self):
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        need(self.batch >= 1, "run.batch", "must be >= 1")
        need(self.steps >= MIN_STEPS, "run.steps", f"must be >= {MIN_STEPS}")
        need(self.guidance >= 0, "run.guidance", "must be >= 0")
        need(len(self.anchors) >= 1, "run.anchors", "needs at least one anchor")
        need(len(set(self.anchors)) == len(self.anchors), "run.anchors", "anchors must be distinct")
        need(all(0 <= a < self.batch for a in self.anchors), "run.anchors",
             f"anchors must lie in [0, {self.batch})")
        need(0 < self.tau < 1, "run.tau", "must lie in (0, 1)")
        need(self.scheme in SCHEMES, "run.scheme", f"must be one of {'|'.join(SCHEMES)}")
        for key, (lo, hi) in (("run.qk_window", self.qk_window), ("run.vsd_window", self.vsd_window)):
            need(0 <= lo < hi <= 1, key, "needs 0 <= lo < hi <= 1")
            need(len(gating_window(lo, hi, self.steps)) > 0, key, f"empty window at {self.steps} steps")
        need(-1 <= self.dift_step < self.steps, "run.dift_step", f"must be -1 or in [0, {self.steps})")
        need(self.corr_search in ("mask", "all"), "run.corr_search", "must be mask|all")
        need(self.qk_parts in ("qk", "q", "k"), "toggles.qk_parts", "must be qk|q|k")
        need(-1 <= self.stress_image < self.batch, "stress.image", f"must be -1 or in [0, {self.batch})")
        need(len(self.prompt_tokens) == self.batch, "prompts.tokens", f"need one prompt per image ({self.batch})")
        for i, (toks, pos) in enumerate(zip(self.prompt_tokens, self.subject_pos)):
            need(len(toks) >= 1, f"prompts.tokens.{i}", "prompt needs at least one token")
            need(all(t >= 0 for t in toks), f"prompts.tokens.{i}", "token ids must be >= 0")
            need(0 <= pos < len(toks), f"prompts.subject.{i}", f"must index into {len(toks)} tokens")
        if self.scheme in ("cross-image", "illusign") and self.batch > 1:
            need(len(self.anchors) < self.batch, "run.anchors",
                 f"{self.scheme} needs an image distinct from the anchor")
        try:
            DenoiserConfig(latent_grid=self.latent_grid, channels=self.channels, heads=self.heads)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
        return self

    # derived pieces

    def denoiser_config(self):
        return DenoiserConfig(latent_grid=self.latent_grid, channels=self.channels,
                              heads=self.heads, weight_seed=self.weight_seed)

    def components(self):
        return Components(
            qk_inject=self.qk_inject, qk_parts=self.qk_parts, vsd_inject=self.vsd_inject,
            crossing=self.crossing, adain_in_crossing=self.adain_in_crossing,
            qk_guided_only=self.qk_guided_only, vsd_both_halves=self.vsd_both_halves,
            crossing_both_halves=self.crossing_both_halves)

    @property
    def qk_steps(self):
        return gating_window(*self.qk_window, self.steps)

    @property
    def vsd_steps(self):
        return gating_window(*self.vsd_window, self.steps)

    @property
    def feature_step(self):
        return self.steps // 4 if self.dift_step < 0 else self.dift_step

    @property
    def stress(self):
        return None if self.stress_image < 0 or self.stress_shift == 0 else (self.stress_image, self.stress_shift)

    def with_overrides(self, **kw):
        return replace(self, **kw).validate()

    # canonical text

    def items(self):
        for key, name in KEYS.items():
            yield key, _render(getattr(self, name))
        for i in range(self.batch):
            yield f"prompts.tokens.{i}", _render(self.prompt_tokens[i])
            yield f"prompts.subject.{i}", str(self.subject_pos[i])

    def resolved_text(self):
        lines, section = [], None
        for key, value in self.items():
            sec, _, rest = key.partition(".")
            if sec != section:
                lines.append(("\n" if lines else "") + f"[{sec}]")
                section = sec
            lines.append(f"{rest}={value}")
        return "\n".join(lines) + "\n"

    def run_id(self):
        digest = hashlib.sha256(self.resolved_text().encode()).hexdigest()[:10]
        return f"{self.scheme}-{digest}"


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    if isinstance(v, Fraction):
        return str(float(v)) if v.denominator in (1, 2, 4, 5, 8, 10, 20, 25, 50, 100) else str(v)
    return str(v)


def _parse_value(key, name, raw):
    default = getattr(RunConfig(), name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        if name in ("qk_window", "vsd_window"):
            lo, hi = (Fraction(p.strip()) for p in raw.split(","))
            return (lo, hi)
        parts = [p.strip() for p in raw.replace("x", ",").split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(key, f"invalid value {raw!r}") from None


def canonical_key(key, section=None):
    key = key.strip()
    full = f"{section}.{key}" if section and not key.startswith(f"{section}.") else key
    if full in KEYS or _PROMPT_RE.match(full):
        return full
    if "." in key and (key in KEYS or _PROMPT_RE.match(key)):
        return key
    bare = [k for k in KEYS if k.split(".", 1)[1] == key]
    if len(bare) == 1 and section is None:
        return bare[0]
    if _PROMPT_RE.match(f"prompts.{key}") and section is None:
        return f"prompts.{key}"
    raise ConfigError(full, "unknown key")


def _read_pairs(text):
    pairs, section = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, value = line.split("=", 1)
        pairs.append((canonical_key(key, section), value))
    return pairs


def build_config(pairs):
    values, tokens, subjects = {}, {}, {}
    for key, raw in pairs:
        m = _PROMPT_RE.match(key)
        if m:
            idx = int(m.group(2))
            if m.group(1) == "tokens":
                tokens[idx] = _parse_value(key, "channels", raw)
            else:
                subjects[idx] = _parse_value(key, "steps", raw)
        else:
            values[KEYS[key]] = _parse_value(key, KEYS[key], raw)
    batch = values.get("batch", RunConfig.batch)
    if batch < 1:
        raise ConfigError("run.batch", "must be >= 1")
    for idx in list(tokens) + list(subjects):
        if idx >= batch:
            raise ConfigError(f"prompts.*.{idx}", f"image index outside batch of {batch}")
    values["prompt_tokens"] = tuple(tokens.get(i, default_tokens(i)) for i in range(batch))
    values["subject_pos"] = tuple(subjects.get(i, DEFAULT_SUBJECT_POS) for i in range(batch))
    return RunConfig(**values).validate()


def parse_config(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from None
        pairs.extend(_read_pairs(text))
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(ov, "override must be key=value")
        key, value = ov.split("=", 1)
        pairs.append((canonical_key(key), value))
    return build_config(pairs)


def parse_text(text, overrides=()):
    pairs = _read_pairs(text)
    for ov in overrides:
        key, value = ov.split("=", 1)
        pairs.append((canonical_key(key), value))
    return build_config(pairs)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))
