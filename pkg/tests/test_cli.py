import subprocess
import sys

import pytest

from consistyle import cli, tensorio
from consistyle.config import parse_config

from .helpers import tree_hashes

FAST = ["--set", "steps=10", "--set", "batch=3"]


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("run", "phase1", "phase2", "phase3", "ablate", "compare-schemes", "inspect"):
        assert cmd in out


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--out", str(tmp_path), "--set", "steps=9"]) == 2
    assert "run.steps" in capsys.readouterr().err
    assert cli.main(["run", "--out", str(tmp_path), "--set", "nonsense=1"]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert cli.main(["phase3", "--out", str(tmp_path), *FAST]) == 3
    bad = tmp_path / "bad.csty"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert cli.main(["inspect", str(bad)]) == 3
    assert "byte 0" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run_phase1", boom)
    assert cli.main(["phase1", "--out", str(tmp_path), *FAST]) == 1


def test_run_and_inspect(tmp_path, capsys):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("")
    assert cli.main(["run", "--config", str(cfgfile), "--out", str(tmp_path), *FAST]) == 0
    cfg = parse_config(cfgfile, ["steps=10", "batch=3"])
    root = tmp_path / cfg.run_id()
    capsys.readouterr()
    assert cli.main(["inspect", str(root / "store")]) == 0
    out = capsys.readouterr().out
    assert "window [1, 3)" in out and "entries 6" in out and "coverage complete" in out
    assert cli.main(["inspect", str(root / "latents/final_0.csty")]) == 0
    out = capsys.readouterr().out
    assert "dims 256x4" in out and tensorio.checksum(root / "latents/final_0.csty") in out
    assert cli.main(["inspect", str(root / "manifest.tsv")]) == 0
    assert "phase1 value: 6" in capsys.readouterr().out
    assert cli.main(["inspect", str(root / "masks.txt")]) == 0
    assert "image 2:" in capsys.readouterr().out
    assert cli.main(["inspect", str(root / "maps.txt")]) == 0
    assert "matched patches" in capsys.readouterr().out
    assert cli.main(["inspect", str(root)]) == 0
    assert "batch: gram_l2_proxy" in capsys.readouterr().out
    (root / "latents/final_0.csty").write_bytes(b"CSTY\x01\x00\x00\x00")
    assert cli.main(["inspect", str(root / "latents/final_0.csty")]) == 3


def test_phases_separately_equal_run(tmp_path):
    assert cli.main(["run", "--out", str(tmp_path / "a"), *FAST]) == 0
    for phase in ("phase1", "phase2", "phase3"):
        assert cli.main([phase, "--out", str(tmp_path / "b"), *FAST]) == 0
    assert tree_hashes(tmp_path / "a") == tree_hashes(tmp_path / "b")


def test_compare_schemes(tmp_path, capsys):
    assert cli.main(["compare-schemes", "--out", str(tmp_path / "x"), *FAST]) == 0
    table = (tmp_path / "x" / "schemes.tsv").read_text()
    rows = table.splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["vanilla", "consistyle", "consistory",
                                                "cross-image", "style-aligned", "illusign"]
    assert rows[0].split("\t")[2] == "0.000000"
    assert cli.main(["compare-schemes", "--out", str(tmp_path / "y"), *FAST]) == 0
    assert (tmp_path / "y" / "schemes.tsv").read_text() == table


def test_ablate(tmp_path):
    assert cli.main(["ablate", "--out", str(tmp_path), *FAST]) == 0
    rows = (tmp_path / "ablation.tsv").read_text().splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["base", "no-adain", "keys-only", "queries-only",
                                                "no-qk", "no-vsd", "no-crossing"]
    run_dirs = [p for p in tmp_path.iterdir() if p.is_dir()]
    assert len(run_dirs) == 7


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "consistyle", "run", "--out", str(tmp_path),
                          "--set", "tau=2"], capture_output=True, text=True)
    assert res.returncode == 2
    assert "run.tau" in res.stderr
