import hashlib
import json
import math

import numpy as np
import pytest

from qrmsim import cli
from qrmsim.errors import ConfigError
from qrmsim.integrator import simulate
from qrmsim.mechanism import CHANNELS

SHORT = {"sim": {"t_end": 0.02, "record_stride": 100}}


def _write_config(tmp_path, doc):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_empty_document_gives_defaults():
    cfg = cli.parse_config("{}")
    assert cfg.links["crank"].mass == 0.5
    assert cfg.couplings["01"].stiffness == 1e5
    assert cfg.drive.rate == 5.0
    assert cfg.sim.t_end == 10.0
    assert cfg.sim.dt == 5e-6
    assert cfg.geometry.pivot_distance == 0.4


def test_single_override():
    cfg = cli.parse_config('{"drive": {"rate": 10}}')
    assert cfg.drive.rate == 10.0
    assert cfg.drive.K_C == 100.0 and cfg.drive.R_C == 100.0


def test_link_length_follows_geometry():
    cfg = cli.parse_config('{"geometry": {"crank_radius": 0.15}}')
    assert cfg.links["crank"].lx == 0.15
    cfg = cli.parse_config('{"links": {"rod": {"lx": 0.5}}}')
    assert cfg.geometry.rod_length == 0.5


@pytest.mark.parametrize(
    "doc, path",
    [
        ('{"geometry": {"pivot_distance": 0.1}}', "geometry"),
        ('{"drive": {"rat": 1}}', "drive.rat"),
        ('{"links": {"crank": {"mass": -1}}}', "links.crank.mass"),
        ('{"couplings": {"01": {"stiffness": "big"}}}', "couplings.01.stiffness"),
        ('{"sim": {"record_stride": 1.5}}', "sim.record_stride"),
        ('{"sim": {"dt": 3e-3, "t_end": 1.0}}', "sim"),
        ('{"nonsense": 1}', "config.nonsense"),
        ('{"gravity": [0, 1]}', "gravity"),
        ('{"links": {"rod": {"lx": 0.5}}, "geometry": {"rod_length": 0.45}}', "links.rod.lx"),
        ("{not json", "malformed"),
    ],
)
def test_config_errors_name_the_key(doc, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        cli.parse_config(doc)


def test_run_writes_csv_and_sidecar(tmp_path):
    out = tmp_path / "run.csv"
    assert cli.main(["run", "--config", _write_config(tmp_path, SHORT), "--out", str(out)]) == 0
    raw = out.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == ",".join(c[0] for c in CHANNELS)
    first = dict(zip(lines[0].split(","), map(float, lines[1].split(","))))
    assert first["t"] == 0.0 and first["w1z"] == 0.0 and first["Tc"] == 500.0
    for name, v in first.items():
        if name.startswith("F"):
            assert abs(v) <= 1e-9
    meta = json.loads((tmp_path / "run.meta.json").read_text())
    assert meta["kind"] == "run"
    assert {c["name"]: c["unit"] for c in meta["columns"]}["FO1x"] == "N"
    assert meta["config"]["sim"]["t_end"] == 0.02
    assert "ON the named link" in meta["sign_convention"]


def test_csv_values_round_trip_exactly(tmp_path):
    out = tmp_path / "run.csv"
    cfg = cli.parse_config(SHORT)
    cli.run(cfg, out)
    m, s0 = cfg.build()
    table = simulate(m, s0, cfg.sim).table
    cols, _ = cli.read_table(out)
    for i, c in enumerate(CHANNELS):
        assert cols[c[0]].tobytes() == table[:, i].tobytes()


def test_rerun_is_byte_identical(tmp_path):
    cfg = _write_config(tmp_path, SHORT)
    cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a.csv")])
    cli.main(["run", "--config", cfg, "--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_oracle_and_analyze(tmp_path):
    out = tmp_path / "oracle.csv"
    assert cli.main(["oracle", "-n", "3600", "--out", str(out)]) == 0
    cols, meta = cli.read_table(out)
    assert cols["slider_x"][0] == pytest.approx(0.4, abs=1e-15)
    assert meta["kind"] == "oracle"
    rep_path = tmp_path / "rep.json"
    assert cli.main(["analyze", str(out), "--cutoff", "0", "--out", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    assert set(rep) == {
        "forward_duration_s", "return_duration_s", "time_ratio", "theoretical_time_ratio",
        "stroke_length_m", "reversal_times_s",
    }
    assert rep["time_ratio"] == pytest.approx(2.0, rel=5e-3)
    assert rep["theoretical_time_ratio"] == pytest.approx(2.0)
    assert rep["stroke_length_m"] == pytest.approx(0.7, abs=1e-5)


def test_oracle_two_samples(tmp_path):
    out = tmp_path / "o.csv"
    cli.main(["oracle", "-n", "2", "--out", str(out)])
    cols, _ = cli.read_table(out)
    np.testing.assert_allclose(cols["theta"], [math.pi / 2, 3 * math.pi / 2])


def test_analyze_sine(tmp_path):
    t = np.linspace(0, 6, 6001)
    rows = np.column_stack([t, 0.4 + 0.35 * np.sin(2 * math.pi * t / 1.5)])
    path = tmp_path / "sine.csv"
    cli.write_table(path, [("t", "s", ""), ("rC5x", "m", "")], rows, "test", cli.RunConfig())
    rep = cli.analyze(path, 0.0, tmp_path / "sine.json")
    assert rep["time_ratio"] == pytest.approx(1.0, abs=1e-6)


def test_analyze_refuses_csv_without_sidecar(tmp_path, capsys):
    path = tmp_path / "bare.csv"
    path.write_text("t,rC5x\n0.0,0.1\n")
    assert cli.main(["analyze", str(path)]) == 1
    assert "sidecar" in capsys.readouterr().err


def test_run_then_analyze_leaves_csv_untouched(tmp_path):
    out = tmp_path / "run.csv"
    cli.main(["run", "--config", _write_config(tmp_path, {"sim": {"t_end": 2.0}}), "--out", str(out)])
    before = hashlib.sha256(out.read_bytes()).hexdigest()
    meta_before = (tmp_path / "run.meta.json").read_bytes()
    assert cli.main(["analyze", str(out), "--cutoff", "0"]) == 0
    assert hashlib.sha256(out.read_bytes()).hexdigest() == before
    assert (tmp_path / "run.meta.json").read_bytes() == meta_before
    assert (tmp_path / "run.report.json").exists()


def test_plot_svg(tmp_path):
    out = tmp_path / "run.csv"
    cli.main(["run", "--config", _write_config(tmp_path, SHORT), "--out", str(out)])
    svg = tmp_path / "f.svg"
    assert cli.main(["plot", str(out), "FO1x", "FO1y", "--x", "t", "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
    svg2 = tmp_path / "tc.svg"
    assert cli.main(["plot", str(out), "Tc", "--x", "crank_angle_unwrapped", "--out", str(svg2)]) == 0
    assert cli.main(["plot", str(out), "nope", "--out", str(svg)]) == 1


def test_plot_needs_channels(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["plot", str(tmp_path / "x.csv")])
    assert exc.value.code == 2


def test_run_reports_blow_up(tmp_path, capsys):
    doc = {"sim": {"t_end": 0.05, "record_stride": 100}, "drive": {"rate": 1e9}}
    assert cli.main(["run", "--config", _write_config(tmp_path, doc), "--out", str(tmp_path / "r.csv")]) == 1
    assert "exceeded" in capsys.readouterr().err
    assert not (tmp_path / "r.csv").exists()
