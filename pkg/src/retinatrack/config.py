"""Run configuration: a flat ``key = value`` text file plus command-line overrides."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from . import phantom as ph
from .gaze import TrackerConfig
from .matching import ConsensusParams

_SECTION = "run"


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    # phantom
    vessel_density: float = 0.5
    phantom_width: int = 1200
    phantom_height: int = 1100
    frame_width: int = ph.FRAME_WIDTH
    frame_height: int = ph.FRAME_HEIGHT
    # calibration
    ppd_x: float = ph.PPD_X
    ppd_y: float = ph.PPD_Y
    steering_yaw: float = 0.0
    steering_pitch: float = 0.0
    # grid scan
    grid_rows: int = 5
    grid_cols: int = 5
    spacing_deg: float = 2.5
    # appearance (per frame: gamma in 1 +/- jitter, blur uniform in [0, blur_max])
    gamma_jitter: float = 0.1
    noise_std: float = 0.02
    blur_max: float = 0.5
    vignette: float = 0.0
    # test sequences; each trial is "grid" or "random", "+steer" enables pupil steering
    trials: tuple[str, ...] = ("grid", "grid+steer", "random+steer")
    frames_per_trial: int = 100
    target_grid: int = 7
    range_deg: float = ph.GAZE_RANGE_DEG
    # matching / tracking
    tau: float = 3.0
    min_matches: int = 4
    inlier_cut: float = 0.5
    epsilon: float = 10.0
    use_enhancement: bool = False
    # evaluation / simulation
    coverage_thresholds: tuple[float, ...] = (0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.45, 0.6, 1.0)
    noise_stds: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)
    sim_trials: int = 200
    edge_noise_std: float = 0.5
    bench_frames: int = 100

    @property
    def calibration(self) -> ph.Calibration:
        return ph.Calibration(self.ppd_x, self.ppd_y, (self.steering_yaw, self.steering_pitch))

    @property
    def consensus(self) -> ConsensusParams:
        return ConsensusParams(self.tau, self.min_matches, self.inlier_cut)

    def tracker(self, steering: bool = False) -> TrackerConfig:
        return TrackerConfig(self.calibration, self.consensus, self.use_enhancement, steering)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frame_width, self.frame_height

    @property
    def phantom_size(self) -> tuple[int, int]:
        return self.phantom_width, self.phantom_height

    def trial_specs(self) -> list[tuple[str, bool]]:
        out = []
        for t in self.trials:
            pattern, _, flag = t.partition("+")
            out.append((pattern, flag == "steer"))
        return out

    def validate(self) -> "RunConfig":
        try:
            cal = self.calibration
            ph.AppearanceParams(1.0, self.noise_std, self.blur_max, self.vignette)
            ConsensusParams(self.tau, self.min_matches, self.inlier_cut)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 <= self.gamma_jitter < 1.0:
            raise ConfigError("gamma_jitter must be in [0, 1)")
        if not 0.0 <= self.vessel_density <= 1.0:
            raise ConfigError("vessel_density must be in [0, 1]")
        need_w, need_h = ph.required_size(self.frame_size, self.range_deg, cal)
        if self.phantom_width < need_w or self.phantom_height < need_h:
            raise ConfigError(f"phantom {self.phantom_width}x{self.phantom_height} does not cover "
                              f"+/-{self.range_deg} deg (need {need_w}x{need_h})")
        half_x = (self.grid_cols - 1) / 2 * self.spacing_deg
        half_y = (self.grid_rows - 1) / 2 * self.spacing_deg
        if (self.frame_width + 2 * half_x * self.ppd_x >= self.phantom_width - 2
                or self.frame_height + 2 * half_y * self.ppd_y >= self.phantom_height - 2):
            raise ConfigError("grid scan exceeds phantom coverage")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("grid must have at least one row and column")
        for pattern, _ in self.trial_specs():
            if pattern not in ("grid", "random"):
                raise ConfigError(f"unknown trial pattern {pattern!r}")
        if self.frames_per_trial < 1 or self.target_grid < 1:
            raise ConfigError("frames_per_trial and target_grid must be >= 1")
        if self.sim_trials < 30:
            raise ConfigError("sim_trials must be >= 30")
        return self

    def to_text(self) -> str:
        lines = [f"[{_SECTION}]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _converter(f: dataclasses.Field):
    t = f.type
    if "tuple[float" in t:
        return _floats
    if "tuple[str" in t:
        return _strs
    return {"int": int, "float": float, "bool": _bool, "str": str}[t]


def parse_pairs(pairs: dict) -> dict:
    known = {f.name: f for f in fields(RunConfig)}
    out = {}
    for k, raw in pairs.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            out[k] = _converter(known[k])(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}") from None
    return out


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``path`` (optional) then apply ``key=value`` overrides; ``seed`` is mandatory."""
    pairs: dict[str, str] = {}
    if path is not None:
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = f"[{_SECTION}]\n" + text
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in cp.sections():
            pairs.update(cp[sec])
    for item in overrides:
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        pairs[k.strip()] = v.strip()
    values = parse_pairs(pairs)
    if "seed" not in values:
        raise ConfigError("config must set 'seed'")
    return RunConfig(**values).validate()
