"""Command line tests, driven through main() with real files."""

from __future__ import annotations

import json
import subprocess
import sys
import threading
import urllib.request

import numpy as np
import pytest

from seqannot.cli import main
from seqannot.evaluation import SweepSpec, replay_metrics, sweep
from seqannot.pipeline import PipelineParams
from seqannot.providers import SimConfig, parse_records, simulate_records
from seqannot.pupil import GrayImage, write_pgm

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

SIM = {"length": 240, "seed": 5, "presence_rate": 0.88}
PARAMS = {
    "delta_min": 0.3,
    "c_min": 15.0,
    "v_u_min": 3.0,
    "context_radius": 2,
    "retrain_interval": 20000,
    "smoothing_alpha": 1.0,
}


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def test_simulate_writes_a_parseable_deterministic_stream(tmp_path, capsys):
    config = write_json(tmp_path / "sim.json", SIM)
    out = tmp_path / "a.records"
    assert main(["simulate", "--config", config, "--out", str(out)]) == 0
    assert "wrote 240 records" in capsys.readouterr().out
    stream = parse_records(out.read_text())
    assert len(stream) == 240
    again = tmp_path / "b.records"
    main(["simulate", "--config", config, "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_replay_reports_the_oracle_metrics(tmp_path, capsys):
    config = write_json(tmp_path / "sim.json", SIM)
    records = tmp_path / "run.records"
    main(["simulate", "--config", config, "--out", str(records)])
    params = write_json(tmp_path / "params.json", PARAMS)
    out = tmp_path / "metrics.json"
    code = main(
        ["replay", "--records", str(records), "--params", params,
         "--out", str(out), "--seed-frames", "40"]
    )
    assert code == 0
    got = json.loads(out.read_text())
    want = replay_metrics(
        simulate_records(SimConfig(**SIM)),
        None,
        PipelineParams.from_dict(PARAMS),
        seed_frames=40,
    )
    assert got == json.loads(json.dumps(want.to_dict()))
    assert not out.with_suffix(".png").exists()


def test_replay_plot_renders_a_figure(tmp_path):
    config = write_json(tmp_path / "sim.json", SIM)
    records = tmp_path / "run.records"
    main(["simulate", "--config", config, "--out", str(records)])
    params = write_json(tmp_path / "params.json", PARAMS)
    out = tmp_path / "metrics.json"
    main(
        ["replay", "--records", str(records), "--params", params,
         "--out", str(out), "--seed-frames", "40", "--plot"]
    )
    assert out.with_suffix(".png").read_bytes()[:8] == PNG_MAGIC


def sweep_spec_payload():
    return {
        "config": SIM,
        "delta_grid": [0.2, 0.4],
        "c_min_grid": [15.0],
        "v_u_min_grid": [1.5, 3.0],
        "seed_frames": 40,
    }


def test_sweep_writes_csv_and_figure_matching_the_library(tmp_path):
    spec = write_json(tmp_path / "sweep.json", sweep_spec_payload())
    out = tmp_path / "tradeoff.csv"
    assert main(["sweep", "--spec", spec, "--out", str(out)]) == 0
    want = sweep(
        SweepSpec(
            config=SimConfig(**SIM),
            delta_grid=(0.2, 0.4),
            c_min_grid=(15.0,),
            v_u_min_grid=(1.5, 3.0),
            seed_frames=40,
        )
    )
    assert out.read_text() == want.to_csv()
    assert out.with_suffix(".png").read_bytes()[:8] == PNG_MAGIC


def test_sweep_runs_are_byte_identical(tmp_path):
    spec = write_json(tmp_path / "sweep.json", sweep_spec_payload())
    first = tmp_path / "one.csv"
    second = tmp_path / "two.csv"
    main(["sweep", "--spec", spec, "--out", str(first), "--no-plot"])
    main(["sweep", "--spec", spec, "--out", str(second), "--no-plot"])
    assert first.read_bytes() == second.read_bytes()
    assert not first.with_suffix(".png").exists()


def test_sweep_accepts_a_records_file(tmp_path):
    config = write_json(tmp_path / "sim.json", SIM)
    records = tmp_path / "fixed.records"
    main(["simulate", "--config", config, "--out", str(records)])
    spec = write_json(
        tmp_path / "sweep.json",
        {"records": "fixed.records", "delta_grid": [0.3], "seed_frames": 40},
    )
    out = tmp_path / "tradeoff.csv"
    assert main(["sweep", "--spec", spec, "--out", str(out), "--no-plot"]) == 0
    rows = out.read_text().strip().split("\n")
    assert len(rows) == 2


def test_pupil_detect_prints_center_and_area(tmp_path, capsys):
    data = np.full((40, 40), 0.9)
    yy, xx = np.mgrid[0:40, 0:40]
    data[(xx - 20) ** 2 + (yy - 18) ** 2 <= 36] = 0.05
    image = tmp_path / "eye.pgm"
    write_pgm(GrayImage.from_array(data), image)
    polygon = tmp_path / "poly.txt"
    polygon.write_text("0,0\n40,0\n40,40\n0,40\n")
    assert main(["pupil-detect", str(image), "--polygon", str(polygon)]) == 0
    x, y, area = capsys.readouterr().out.split()
    assert abs(float(x) - 20) <= 1.0 and abs(float(y) - 18) <= 1.0
    assert int(area) >= 100


def test_pupil_detect_reports_no_pupil(tmp_path, capsys):
    data = np.full((40, 40), 0.9)
    data[18:22, 5:35] = 0.05
    image = tmp_path / "bar.pgm"
    write_pgm(GrayImage.from_array(data), image)
    polygon = tmp_path / "poly.txt"
    polygon.write_text("0,0\n40,0\n40,40\n0,40\n")
    assert main(["pupil-detect", str(image), "--polygon", str(polygon)]) == 0
    assert capsys.readouterr().out.strip() == "no-pupil"


@pytest.mark.parametrize(
    "argv, message",
    [
        (["simulate", "--config", "missing.json", "--out", "x"], "cannot read"),
        (["replay", "--records", "missing", "--params", "missing", "--out", "x"],
         "cannot read"),
    ],
)
def test_missing_inputs_fail_cleanly(tmp_path, capsys, argv, message):
    assert main(argv) == 1
    assert message in capsys.readouterr().err


def test_bad_config_key_is_reported(tmp_path, capsys):
    config = write_json(tmp_path / "sim.json", dict(SIM, typo=1))
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "x")]) == 1
    assert "typo" in capsys.readouterr().err


def test_serve_binds_and_answers_progress(tmp_path):
    config = write_json(tmp_path / "sim.json", SIM)
    records = tmp_path / "run.records"
    main(["simulate", "--config", config, "--out", str(records)])
    params = write_json(tmp_path / "params.json", PARAMS)
    proc = subprocess.Popen(
        [sys.executable, "-u", "-m", "seqannot", "serve",
         "--records", str(records), "--params", params, "--port", "0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    killer = threading.Timer(30, proc.kill)
    killer.start()
    try:
        line = proc.stdout.readline()
        assert "serving annotation queue on http://" in line, line
        port = int(line.split("http://127.0.0.1:")[1].split()[0])
        with urllib.request.urlopen(f"http://127.0.0.1:{port}/api/progress") as resp:
            snapshot = json.loads(resp.read())
        assert snapshot["state"] == "idle"
        stream = parse_records(records.read_text())
        assert snapshot["total_frames"] == int(stream.present.sum())
        assert (tmp_path / "run.records.journal").name in line
    finally:
        killer.cancel()
        proc.terminate()
        proc.wait(timeout=10)


def test_module_entry_point_runs(tmp_path):
    config = tmp_path / "sim.json"
    config.write_text(json.dumps(SIM))
    out = tmp_path / "run.records"
    proc = subprocess.run(
        [sys.executable, "-m", "seqannot", "simulate",
         "--config", str(config), "--out", str(out)],
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
