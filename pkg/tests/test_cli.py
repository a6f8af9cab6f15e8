import pytest
from hypothesis import given, settings, strategies as st

from ddsim.cli import main
from ddsim.config import (
    ConfigError,
    Mode,
    ScenarioConfig,
    load_config,
    parse_config,
    serialize_config,
)
from ddsim.metrics import CSV_HEADER


def test_empty_config_is_default(tmp_path):
    p = tmp_path / "empty.conf"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == ScenarioConfig()
    assert (cfg.devices, cfg.attacker_fraction, cfg.mode) == (500, 0.2, Mode.BOTH)


def test_comments_and_whitespace():
    cfg = parse_config("# scenario\n\n  devices = 12  # inline\nmode=Centralized\n")
    assert cfg.devices == 12 and cfg.mode is Mode.CENTRALIZED


def test_range_error_names_key():
    with pytest.raises(ConfigError, match="attacker_fraction"):
        parse_config("attacker_fraction=1.5\n")


@pytest.mark.parametrize("text,needle", [
    ("devices=10\nbogus=1\n", "x.conf:2: unknown key 'bogus'"),
    ("devices=10\ndevices=11\n", "x.conf:2: duplicate key"),
    ("\n\nperiod_ms\n", "x.conf:3: expected key=value"),
    ("seed=abc\n", "x.conf:1: seed"),
    ("route_mix=0.5,0.2,0.2\n", "route_mix"),
    ("period_ms=5000\nduration_ms=6000\n", "duration_ms"),
])
def test_parse_errors(text, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "x.conf")
    assert needle in str(exc.value)


fractions = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@st.composite
def configs(draw):
    a = draw(st.integers(0, 10))
    b = draw(st.integers(0, 10 - a))
    period = draw(st.integers(1, 5000))
    return ScenarioConfig(
        seed=draw(st.integers(0, 2 ** 64 - 1)),
        mode=draw(st.sampled_from(list(Mode))),
        devices=draw(st.integers(1, 10_000)),
        attacker_fraction=draw(fractions),
        malicious_share_of_attackers=draw(fractions),
        route_mix=(a / 10, b / 10, (10 - a - b) / 10),
        period_ms=period,
        duration_ms=draw(st.integers(2 * period, 20 * period)),
        header_bits=tuple(draw(st.lists(st.integers(1, 32).map(lambda x: 8 * x), min_size=1,
                                        max_size=4))),
        patch_efficacy=draw(fractions),
        graph_build_ms=draw(st.integers(0, 50)),
        size_digest_report=draw(st.integers(0, 512)),
    )


@settings(max_examples=150)
@given(configs())
def test_serialize_round_trip(cfg):
    text = serialize_config(cfg)
    back = parse_config(text)
    assert back == cfg
    assert serialize_config(back) == text


def test_cli_compare_smoke(tmp_path, capsys):
    assert main(["compare", "--devices", "40", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "cost of operation reduction" in out and "overhead reduction" in out
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert [line.split(",")[0] for line in lines[1:]] == ["centralized", "distributed"]
    assert (tmp_path / "compare_deltas.csv").exists()


def test_cli_sweep_default_points(tmp_path):
    conf = tmp_path / "short.conf"
    conf.write_text("duration_ms=4000\nattacker_fraction=0\n")
    assert main(["sweep", "--config", str(conf), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()[1:]
    assert len(rows) == 20
    keys = [(int(r.split(",")[1]), r.split(",")[0]) for r in rows]
    assert keys == sorted(keys)
    assert sorted({k[0] for k in keys}) == list(range(50, 501, 50))


def test_cli_sweep_points_and_mode(tmp_path):
    assert main(["sweep", "--points", "5,3", "--mode", "distributed",
                 "--devices", "9", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()[1:]
    assert [r.split(",")[:2] for r in rows] == [["distributed", "3"], ["distributed", "5"]]


def test_cli_run_deterministic(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["run", "--seed", "7", "--devices", "30", "--out", str(d), "--transcript"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    for mode in ("centralized", "distributed"):
        name = f"transcript-{mode}.tsv"
        assert (a / name).read_bytes() == (b / name).read_bytes()

    monkeypatch.setenv("DDS_SIM_OUT", str(tmp_path / "env"))
    assert main(["run", "--seed", "7", "--devices", "30"]) == 0
    assert (tmp_path / "env" / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("attacker_fraction=1.5\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "attacker_fraction" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.conf")]) == 1
    with pytest.raises(SystemExit):
        main(["run", "--mode", "sideways"])
