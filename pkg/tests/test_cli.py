import json
import re
import shutil
import subprocess
import sys

import numpy as np
import pytest

from retinatrack import cli, io
from retinatrack.canonical import load_space
from retinatrack.config import ConfigError, load_config

SMALL = ["frames_per_trial=6", "target_grid=3", "sim_trials=30", "bench_frames=10",
         "steering_yaw=0.5", "steering_pitch=-0.25"]


def write_config(path, seed=11, extra=()):
    lines = [f"seed = {seed}"] + [f"{k} = {v}" for k, v in (e.split("=", 1) for e in extra)]
    path.write_text("\n".join(lines) + "\n")
    return path


def run_all(run, config):
    steps = [["phantom"], ["build-space"], ["track"], ["eval"], ["simulate", "--kind", "noise"],
             ["simulate", "--kind", "edge-removal"], ["bench"]]
    for s in steps:
        code = cli.main(s + ["--run", str(run), "--config", str(config)])
        assert code == 0, s


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base / "cfg.txt", extra=SMALL)
    a, b = base / "a", base / "b"
    run_all(a, cfg)
    run_all(b, cfg)
    return a, b


def test_outputs_present(pipeline):
    a, _ = pipeline
    man = io.read_manifest(a / "manifest.json")
    assert len(man["scan"]["frames"]) == 25 and len(list((a / "scan").glob("*.pgm"))) == 25
    assert len(man["trials"]) == 3
    for name in ["space.json", "edges.csv", "space.svg", "phantom.pgm", "config.txt",
                 "results/stats.csv", "results/coverage.csv", "results/coverage.svg",
                 "results/error_cdf.svg", "results/simulate_noise.csv", "results/simulate_noise.svg",
                 "results/simulate_edge_removal.csv", "results/bench.csv", "results/bench.svg",
                 "results/track_trial0.csv", "results/track_trial2.csv"]:
        assert (a / name).exists(), name


def test_config_echo(pipeline):
    a, _ = pipeline
    cfg = load_config(a / "config.txt")
    assert cfg.seed == 11 and cfg.frames_per_trial == 6 and cfg.steering_yaw == 0.5


def test_space_origin(pipeline):
    sp = load_space(pipeline[0] / "space.json")
    assert sp.node_positions[sp.central_node].tolist() == [0.0, 0.0]


def test_reruns_are_byte_identical(pipeline):
    a, b = pipeline
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv") if p.name != "bench.csv")
    assert len(csvs) >= 7
    for rel in csvs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for rel in ["manifest.json", "space.json", "scan/scan_07.pgm", "trial_1/frame_0003.pgm"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_random_targets_in_range(pipeline):
    man = io.read_manifest(pipeline[0] / "manifest.json")
    t = [tr for tr in man["trials"] if tr["pattern"] == "random"][0]
    g = np.array([[f["true_gaze"]["yaw"], f["true_gaze"]["pitch"]] for f in t["frames"]])
    assert np.all(np.abs(g) <= 5.0)


def test_tracking_results(pipeline):
    for tid in range(3):
        est, truth, _ = io.read_track_csv(pipeline[0] / f"results/track_trial{tid}.csv")
        assert all(e.valid for e in est)
        err = [np.hypot(e.yaw - t.yaw, e.pitch - t.pitch) for e, t in zip(est, truth)]
        assert max(err) < 0.05  # steering trials too: the offset is added back


def test_noise_csv_rows(pipeline):
    rows = io.read_csv(pipeline[0] / "results/simulate_noise.csv")
    assert [float(r["noise_std"]) for r in rows] == [1.0, 2.0, 5.0, 10.0]


def test_edge_removal_csv(pipeline):
    rows = io.read_csv(pipeline[0] / "results/simulate_edge_removal.csv")
    assert len(rows) == 40 and all(r["connected"] == "1" for r in rows)


def test_build_time_reported(tmp_path, pipeline, capsys):
    run = tmp_path / "r"
    shutil.copytree(pipeline[0], run)
    assert cli.main(["build-space", "--run", str(run)]) == 0
    out = capsys.readouterr().out
    secs = float(re.search(r"([0-9.]+) s$", out.strip()).group(1))
    assert secs < 10.0


def test_eval_perfect_tracking(tmp_path):
    p = tmp_path / "track_perfect.csv"
    rows = [[f"f{k}", y, q, y, q, 50, 40.0, 1] for k, (y, q) in
            enumerate([(0.5, 1.0), (-2.0, 3.25), (4.0, -4.0)])]
    io.write_csv(p, io.TRACK_COLUMNS, rows)
    assert cli.main(["eval", "--run", str(tmp_path), "--set", "seed=1", "--results", str(p)]) == 0
    stats = io.read_csv(tmp_path / "results/stats.csv")
    for r in stats:
        assert all(float(r[k]) == 0.0 for k in ("mean", "std", "e50", "e75", "e95"))


def test_unknown_flag(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["track", "--run", str(tmp_path), "--bogus"])
    assert exc.value.code == 2


def test_unknown_flag_subprocess(tmp_path):
    r = subprocess.run([sys.executable, "-m", "retinatrack", "bench", "--run", str(tmp_path), "--nope"],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


@pytest.mark.parametrize("sets", [[], ["seed=1", "nonsense=3"], ["seed=1", "tau=-1"],
                                  ["seed=1", "phantom_width=500"], ["seed=x"]])
def test_config_errors(tmp_path, sets):
    args = ["simulate", "--kind", "noise", "--run", str(tmp_path / "r")]
    for s in sets:
        args += ["--set", s]
    assert cli.main(args) == 2


def test_config_file_without_section(tmp_path):
    p = write_config(tmp_path / "c.txt", seed=5, extra=["noise_stds=1,2"])
    cfg = load_config(p, ["tau=2.5"])
    assert cfg.seed == 5 and cfg.noise_stds == (1.0, 2.0) and cfg.tau == 2.5
    with pytest.raises(ConfigError):
        load_config(p, ["justakey"])


def test_missing_inputs_are_pipeline_failures(tmp_path):
    assert cli.main(["build-space", "--run", str(tmp_path), "--set", "seed=1"]) == 3


def test_disconnected_build_fails(tmp_path, pipeline, capsys):
    run = tmp_path / "broken"
    shutil.copytree(pipeline[0], run)
    man = io.read_manifest(run / "manifest.json")
    cols = man["scan"]["cols"]
    for k, e in enumerate(man["scan"]["frames"]):
        if k % cols == 1:
            io.write_pgm(run / e["path"], np.full((207, 253), 0.5))
    assert cli.main(["build-space", "--run", str(run)]) == 3
    err = capsys.readouterr().err
    listed = re.findall(r"edge (\d+): (\d+) -> (\d+)", err)
    assert len(listed) == 14
    assert all(int(a) % cols == 1 or int(b) % cols == 1 for _, a, b in listed)
