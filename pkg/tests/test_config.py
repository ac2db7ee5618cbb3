import pytest
from hypothesis import given, settings, strategies as st

from chunkflow.config import SCHEMA, Config, load, parse
from chunkflow.errors import ConfigError

word = st.text("abcdefghijklmnopqrstuvwxyz0123456789_./-", min_size=1, max_size=12)
VALUES = {
    "int": st.integers(-10 ** 9, 10 ** 9),
    "float": st.floats(allow_nan=False),
    "str": st.one_of(st.just(""), word),
    "bool": st.booleans(),
    "ints": st.lists(st.integers(0, 10 ** 6), max_size=5).map(tuple),
    "strs": st.lists(word, max_size=4).map(tuple),
}


@st.composite
def configs(draw):
    cfg = Config()
    for sec, keys in SCHEMA.items():
        for key, (kind, _, _) in keys.items():
            if draw(st.booleans()):
                cfg.values[sec][key] = draw(VALUES[kind])
    return cfg


@settings(max_examples=60, deadline=None)
@given(configs())
def test_echo_parse_roundtrip(cfg):
    again = parse(cfg.echo())
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_defaults():
    cfg = parse("")
    assert cfg.get("train.rho") == 0.7
    assert cfg.get("train.sigma0") == 0.3
    assert cfg.get("eval.nfe_list") == (1, 5, 10, 40)
    assert cfg["model"]["hidden"] == (256, 256)
    assert cfg.echo().count("\n# ") >= sum(len(k) for k in SCHEMA.values())


def test_values_and_comments():
    cfg = parse("# top\n[train]\n  rho = 0.25\n\n[eval]\nnfe_list = 2, 3\not_fallback = no\n")
    assert cfg.get("train.rho") == 0.25
    assert cfg.get("eval.nfe_list") == (2, 3)
    assert cfg.get("eval.ot_fallback") is False


@pytest.mark.parametrize("text,line,needle", [
    ("[train]\nrhoo = 1\n", 2, "unknown key"),
    ("[train]\nrho = 1\n[bogus]\n", 3, "unknown section"),
    ("rho = 1\n", 1, "before any"),
    ("[train]\n\nsteps = many\n", 3, "bad value"),
    ("[train]\nsteps\n", 2, "expected"),
    ("[train\n", 1, "malformed"),
])
def test_errors_carry_line_numbers(text, line, needle):
    with pytest.raises(ConfigError, match=f"cfg.ini:{line}: .*{needle}"):
        parse(text, "cfg.ini")


def test_set_and_load(tmp_path):
    cfg = Config()
    cfg.set("train.steps", "12")
    assert cfg.get("train.steps") == 12
    with pytest.raises(ConfigError):
        cfg.set("train.nope", 1)
    with pytest.raises(ConfigError):
        cfg.set("eval.ot_fallback", "maybe")
    p = tmp_path / "c.ini"
    p.write_text(cfg.echo())
    assert load(p) == cfg
    with pytest.raises(ConfigError):
        load(tmp_path / "absent.ini")


def test_digest_tracks_values():
    a, b = Config(), Config()
    assert a.digest() == b.digest() and len(a.digest()) == 8
    b.set("run.seed", 1)
    assert a.digest() != b.digest()
