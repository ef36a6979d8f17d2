"""Command-line entry point.

    consistyle <command> [--config PATH] [--out DIR] [--set key=value]...

Exit codes: 0 success, 1 runtime error, 2 configuration error,
3 corrupt or unreadable artifact.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels, tensorio
from .config import parse_config
from .correspondence import parse_maps, parse_masks
from .errors import ArtifactError, ConfigError
from .metrics import read_tsv
from .pipeline import (_model, phase1_vanilla, phase2_correspondence, run_all, run_phase1,
                       run_phase2, run_phase3)
from .schemes import SCHEMES
from .store import INDEX, ValueStore

log = logging.getLogger("consistyle")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ARTIFACT = 0, 1, 2, 3

ABLATIONS = {
    "no-adain": {"adain_in_crossing": False},
    "keys-only": {"qk_parts": "k"},
    "queries-only": {"qk_parts": "q"},
    "no-qk": {"qk_inject": False},
    "no-vsd": {"vsd_inject": False},
    "no-crossing": {"crossing": False},
}


def _summary_row(label, run_id, report):
    s = report.summary()
    (gm, gs), (cm, cs) = s["gram_l2_proxy"], s["consistency_proxy"]
    return f"{label}\t{run_id}\t{gm:.6f}\t{gs:.6f}\t{cm:.6f}\t{cs:.6f}\n"


TABLE_HEADER = "{}\trun_id\tgram_l2_proxy\tgram_l2_proxy_sd\tconsistency_proxy\tconsistency_proxy_sd\n"


def cmd_run(cfg, out):
    art = run_all(cfg, out)
    print(art.path)
    return art


def cmd_ablate(cfg, out):
    """Base config plus every single-component ablation; writes ``ablation.tsv``."""
    base = cfg.with_overrides(scheme="consistyle")
    model = _model(base)
    p1 = phase1_vanilla(base, model)
    p2 = phase2_correspondence(base, model)
    variants = [("base", base)] + [(name, base.with_overrides(**kw)) for name, kw in ABLATIONS.items()]
    rows = []
    for name, vcfg in variants:
        art = run_all(vcfg, out, model, p1, p2)
        rows.append(_summary_row(name, vcfg.run_id(), art.metrics))
        log.info("ablation %s -> %s", name, art.path)
    table = TABLE_HEADER.format("variant") + "".join(rows)
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "ablation.tsv").write_text(table)
    print(table, end="")
    return table


def cmd_compare_schemes(cfg, out):
    """Every scheme on shared seeds, phases 1-2 and all; writes ``schemes.tsv``."""
    model = _model(cfg)
    p1 = phase1_vanilla(cfg, model)
    p2 = phase2_correspondence(cfg, model)
    rows = []
    for scheme in SCHEMES:
        scfg = cfg.with_overrides(scheme=scheme)
        art = run_all(scfg, out, model, p1, p2)
        rows.append(_summary_row(scheme, scfg.run_id(), art.metrics))
    table = TABLE_HEADER.format("scheme") + "".join(rows)
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "schemes.tsv").write_text(table)
    print(table, end="")
    return table


def _describe_tensor(path):
    a = tensorio.load(path)
    dims = "x".join(str(d) for d in a.shape)
    stats = f"min={a.min():.6g} max={a.max():.6g} mean={a.mean():.6g}" if a.size else "empty"
    return f"tensor {path}\n  dims {dims}\n  {stats}\n  sha256 {tensorio.checksum(path)}\n"


def _describe_store(root):
    store = ValueStore.load(root)
    w = store.window
    lines = [f"value store {root}",
             f"  layer {store.layer}  grid {store.grid[0]}x{store.grid[1]}",
             f"  window [{w.lo}, {w.hi})  ({len(w)} steps)",
             f"  entries {len(store)}"]
    images = sorted({k[2] for k in store.keys()})
    for i in images:
        steps = [k[0] for k in store.keys() if k[2] == i]
        lines.append(f"  image {i}: steps {steps[0]}..{steps[-1]} ({len(steps)})")
    missing = [(s, i) for s in w for i in images if (s, store.layer, i) not in store]
    lines.append(f"  coverage {'complete' if not missing else f'missing {missing}'}")
    for key in store.keys():
        name = f"step{key[0]:03d}_{key[1]}_img{key[2]}.csty"
        lines.append(f"  {name}  {'x'.join(map(str, store.get(*key).shape))}  "
                     f"{tensorio.checksum(Path(root) / name)}")
    return "\n".join(lines) + "\n"


def _describe_manifest(path):
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].split("\t") != ["phase", "step", "layer", "image", "kind", "path"]:
        raise ArtifactError(path, 0, "not a manifest (bad header)")
    counts = {}
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != 6:
            raise ArtifactError(path, offset, "manifest row needs 6 fields")
        counts[(parts[0], parts[4])] = counts.get((parts[0], parts[4]), 0) + 1
        offset += len(line.encode()) + 1
    out = [f"manifest {path}", f"  rows {len(lines) - 1}"]
    out += [f"  {ph} {kind}: {n}" for (ph, kind), n in sorted(counts.items())]
    return "\n".join(out) + "\n"


def _describe_masks(path):
    text = Path(path).read_text()
    first = text.split("\n", 1)[0]
    if " map=" in first:
        maps = parse_maps(text, path)
        return f"maps {path}\n" + "".join(
            f"  image {i}: {len(m.patches)} matched patches, anchors "
            f"{sorted({a for a, _ in m.entries})}\n" for i, m in sorted(maps.items()))
    masks = parse_masks(text, (1 << 30, 1), path)
    return f"masks {path}\n" + "".join(
        f"  image {i}: {len(m)} subject patches\n" for i, m in sorted(masks.items()))


def cmd_inspect(path):
    path = Path(path)
    if path.is_dir():
        if (path / INDEX).exists():
            return _describe_store(path)
        parts = []
        if (path / "config.resolved").exists():
            parts.append(f"run {path}\n")
        if (path / "store" / INDEX).exists():
            parts.append(_describe_store(path / "store"))
        for name in ("masks.txt", "maps.txt"):
            if (path / name).exists():
                parts.append(_describe_masks(path / name))
        if (path / "manifest.tsv").exists():
            parts.append(_describe_manifest(path / "manifest.tsv"))
        if (path / "metrics.tsv").exists():
            rows = read_tsv((path / "metrics.tsv").read_text())
            parts.append("metrics\n" + "".join(
                f"  {k}: gram_l2_proxy={v['gram_l2_proxy']:.4f} "
                f"consistency_proxy={v['consistency_proxy']:.4f}\n" for k, v in rows.items()))
        if not parts:
            raise ArtifactError(path, 0, "directory holds no recognised artifacts")
        return "".join(parts)
    if not path.exists():
        raise ArtifactError(path, 0, "no such file")
    head = path.read_bytes()[:4]
    if path.name == INDEX:
        return _describe_store(path.parent)
    if path.suffix == ".csty" or head == b"CSTY":
        return _describe_tensor(path)
    if path.suffix == ".tsv" and head == b"phas":
        return _describe_manifest(path)
    if head == b"imag":
        return _describe_masks(path)
    raise ArtifactError(path, 0, "unrecognised artifact type")


def build_parser():
    p = argparse.ArgumentParser(
        prog="consistyle",
        description="Consistent-subject, style-diverse generation on a seeded toy denoiser.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "run": "all three phases",
        "phase1": "vanilla pass: record V_sd values and style references",
        "phase2": "correspondence pass: subject masks and anchor patch maps",
        "phase3": "final pass with the configured scheme (needs phase1 + phase2 output)",
        "ablate": "base run plus the six single-component ablations",
        "compare-schemes": "all six schemes on shared seeds",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="key=value config file (defaults when omitted)")
        sp.add_argument("--out", default="out", help="output root (default: out)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    sp = sub.add_parser("inspect", help="describe a store, manifest, mask/map file, tensor or run dir")
    sp.add_argument("path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        if args.command == "inspect":
            print(cmd_inspect(args.path), end="")
            return EXIT_OK
        cfg = parse_config(args.config, args.overrides)
        if args.command == "run":
            cmd_run(cfg, args.out)
        elif args.command == "phase1":
            run_phase1(cfg, args.out)
        elif args.command == "phase2":
            run_phase2(cfg, args.out)
        elif args.command == "phase3":
            run_phase3(cfg, args.out)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.out)
        elif args.command == "compare-schemes":
            cmd_compare_schemes(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
