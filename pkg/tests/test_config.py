from fractions import Fraction

import pytest

from consistyle.config import RunConfig, canonical_key, parse_config, parse_text
from consistyle.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    cfg = parse_config(p)
    assert (cfg.steps, cfg.batch, cfg.tau) == (50, 2, 0.3)
    assert cfg.qk_window == cfg.vsd_window == (Fraction(1, 10), Fraction(3, 10))
    assert cfg == parse_config(None)
    assert (cfg.vsd_steps.lo, cfg.vsd_steps.hi) == (5, 15)
    assert cfg.feature_step == 12


def test_sections_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n[run]\nbatch = 4\nsteps=20\n\n[toggles]\nadain_in_crossing=false\n"
                 "[prompts]\ntokens.1 = 1,2,3\nsubject.1 = 0\n")
    cfg = parse_config(p, ["anchors=0,1", "run.tau=0.4", "seeds.sampling=9"])
    assert (cfg.batch, cfg.steps, cfg.adain_in_crossing) == (4, 20, False)
    assert cfg.anchors == (0, 1) and cfg.tau == 0.4 and cfg.sampling_seed == 9
    assert cfg.prompt_tokens[1] == (1, 2, 3) and cfg.subject_pos[1] == 0


@pytest.mark.parametrize("override,key", [
    ("steps=9", "run.steps"),
    ("tau=0", "run.tau"),
    ("tau=1.5", "run.tau"),
    ("anchors=2", "run.anchors"),
    ("scheme=magic", "run.scheme"),
    ("qk_window=0.3,0.1", "run.qk_window"),
    ("vsd_window=0.301,0.302", "run.vsd_window"),
    ("bogus=1", "bogus"),
    ("steps=ten", "run.steps"),
    ("qk_inject=maybe", "toggles.qk_inject"),
    ("channels=30,64", "model"),
    ("corr_search=some", "run.corr_search"),
])
def test_rejections_name_the_key(override, key):
    with pytest.raises(ConfigError) as info:
        parse_config(None, [override])
    assert info.value.key == key


def test_distinct_anchor_schemes_need_a_target():
    with pytest.raises(ConfigError):
        parse_config(None, ["scheme=illusign", "anchors=0,1"])
    assert parse_config(None, ["scheme=illusign", "batch=1"]).batch == 1


def test_resolved_text_roundtrip():
    cfg = parse_config(None, ["batch=3", "qk_window=0.2,0.5", "guidance=5"])
    again = parse_text(cfg.resolved_text())
    assert again == cfg
    assert again.run_id() == cfg.run_id()
    assert cfg.run_id().startswith("consistyle-")
    assert cfg.with_overrides(adain_in_crossing=False).run_id() != cfg.run_id()


def test_canonical_key():
    assert canonical_key("steps") == "run.steps"
    assert canonical_key("weights", "seeds") == "seeds.weights"
    with pytest.raises(ConfigError):
        canonical_key("nope")


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.cfg")
    p = tmp_path / "c.cfg"
    p.write_text("[run]\njust words\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config(p)
    p.write_text("[prompts]\ntokens.5=1,2\n")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_stress_property():
    assert RunConfig().stress is None
    assert RunConfig(stress_image=1, stress_shift=5.0).stress == (1, 5.0)
