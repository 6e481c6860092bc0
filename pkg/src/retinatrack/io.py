"""On-disk formats: 8-bit binary PGM frames, the dataset manifest and result CSVs."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .gaze import GazeEstimate
from .phantom import Frame, GazeAngle

MANIFEST_VERSION = 1

TRACK_COLUMNS = ["frame_id", "yaw_est", "pitch_est", "yaw_true", "pitch_true",
                 "n_matches", "total_score", "valid"]


def write_pgm(path, intensity: np.ndarray) -> None:
    """Save an intensity field in [0, 1] as 8-bit binary PGM (P5)."""
    img = np.round(np.clip(intensity, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected a greyscale PGM, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64) / 255.0


def fmt(x: float) -> str:
    """Fixed-precision float formatting used for every CSV we emit."""
    return f"{x:.6f}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_track_csv(path, frames: Sequence[Frame], estimates: Sequence[GazeEstimate]) -> None:
    rows = []
    for f, e in zip(frames, estimates):
        tg = f.true_gaze
        rows.append([f.frame_id, e.yaw, e.pitch,
                     tg.yaw if tg else float("nan"), tg.pitch if tg else float("nan"),
                     e.n_matches, e.total_score, int(e.valid)])
    write_csv(path, TRACK_COLUMNS, rows)


def read_track_csv(path) -> tuple[list[GazeEstimate], list[GazeAngle], list[str]]:
    est, truth, ids = [], [], []
    for r in read_csv(path):
        missing = set(TRACK_COLUMNS) - set(r)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        est.append(GazeEstimate(float(r["yaw_est"]), float(r["pitch_est"]), int(r["n_matches"]),
                                float(r["total_score"]), r["valid"] == "1"))
        truth.append(GazeAngle(float(r["yaw_true"]), float(r["pitch_true"])))
        ids.append(r["frame_id"])
    return est, truth, ids


def write_manifest(path, manifest: dict) -> None:
    doc = dict(manifest)
    doc["version"] = MANIFEST_VERSION
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    return doc


def frame_entry(frame: Frame, rel_path: str, trial_id, appearance: dict) -> dict:
    g = frame.true_gaze
    return {"frame_id": frame.frame_id, "path": rel_path, "trial_id": trial_id,
            "true_gaze": None if g is None else {"yaw": g.yaw, "pitch": g.pitch},
            "appearance": appearance}


def load_frame(run_dir, entry: dict) -> Frame:
    g = entry.get("true_gaze")
    gaze = None if g is None else GazeAngle(float(g["yaw"]), float(g["pitch"]))
    return Frame(read_pgm(Path(run_dir) / entry["path"]), gaze, entry["frame_id"])
