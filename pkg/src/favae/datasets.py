"""Synthetic reaching-trajectory datasets with exact ground-truth factors.

Two generators:

* ``gen_2d_reaching`` — 20 trajectories from (0, 0) to one of two goals,
  curved inward or outward at five curvature levels (2 x 2 x 5).
* ``gen_2d_wavy`` — 400 trajectories built from two half-segments; goal
  position shapes the whole curve while shape/curvature factors act on one
  half only (4 x 2 x 2 x 5 x 5).

Curves are quadratic Beziers with a perpendicular control-point offset of
0.08 per curvature level; wavy halves add a sine perturbation whose phase
encodes the shape factor, under a 4*s*(1-s) envelope so segment endpoints
stay exact.  Generation is a pure function of (T, generator version) and
both datasets enumerate every factor combination exactly once.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FTDS"
FORMAT_VERSION = 1

REACHING_VERSION = "2d-reaching/1"
WAVY_VERSION = "2d-wavy/1"

GOALS = (np.array([-0.1, 1.0]), np.array([+0.1, 1.0]))
WAVY_GOALS = (np.array([-0.2, 1.0]), np.array([-0.1, 1.0]),
              np.array([+0.1, 1.0]), np.array([+0.2, 1.0]))
CURVE_OFFSET_PER_LEVEL = 0.08
WAVE_AMPLITUDE = 0.08


class DatasetFormatError(ValueError):
    """Raised when a dataset file is truncated, corrupt, or incompatible."""


@dataclass(frozen=True)
class FactorValue:
    factor_index: int
    level: int
    description: str


@dataclass
class Trajectory:
    points: np.ndarray  # [T, 2] float32
    factors: tuple[FactorValue, ...]

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(f.level for f in self.factors)


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    t_steps: int
    factor_names: tuple[str, ...]
    factor_cardinalities: tuple[int, ...]
    version: str

    def __len__(self) -> int:
        return len(self.trajectories)

    def sequences(self) -> np.ndarray:
        """All trajectories as a [N, 2, T] channels-first array."""
        return np.stack([tr.points.T for tr in self.trajectories])

    def factor_levels(self) -> np.ndarray:
        """Ground-truth factor levels as an int [N, K] array."""
        return np.array([tr.levels for tr in self.trajectories], dtype=np.int64)


def _bezier(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, s: np.ndarray) -> np.ndarray:
    s = s[:, None]
    return (1 - s) ** 2 * p0 + 2 * s * (1 - s) * p1 + s**2 * p2


def _left_normal(v: np.ndarray) -> np.ndarray:
    n = np.array([-v[1], v[0]])
    return n / np.linalg.norm(n)


def _reaching_curve(goal: np.ndarray, inward: bool, level: int, t_steps: int) -> np.ndarray:
    p0 = np.zeros(2)
    chord = goal - p0
    normal = _left_normal(chord)
    toward_center = np.array([-np.sign(goal[0]), 0.0])
    if normal @ toward_center < 0:
        normal = -normal
    if not inward:
        normal = -normal
    control = (p0 + goal) / 2 + CURVE_OFFSET_PER_LEVEL * (level + 1) * normal
    s = np.linspace(0.0, 1.0, t_steps)
    return _bezier(p0, control, goal, s)


def gen_2d_reaching(t_steps: int) -> TrajectoryDataset:
    """All 20 factor combinations of goal side x curve side x curvature level.

    Every trajectory starts at exactly (0, 0) and ends exactly at its goal.
    """
    if t_steps < 2:
        raise ValueError(f"t_steps must be >= 2, got {t_steps}")
    names = ("goal", "curve_side", "curvature")
    cards = (2, 2, 5)
    side_desc = ("inward", "outward")
    trajectories = []
    for g_level, goal in enumerate(GOALS):
        for s_level, inward in enumerate((True, False)):
            for c_level in range(5):
                pts = _reaching_curve(goal, inward, c_level, t_steps)
                factors = (
                    FactorValue(0, g_level, f"goal x={goal[0]:+.1f}"),
                    FactorValue(1, s_level, side_desc[s_level]),
                    FactorValue(2, c_level, f"curvature {c_level + 1}"),
                )
                trajectories.append(Trajectory(pts.astype(np.float32), factors))
    return TrajectoryDataset(trajectories, t_steps, names, cards, REACHING_VERSION)


def _wavy_half(start: np.ndarray, end: np.ndarray, curvature_level: int,
               shape_level: int, s: np.ndarray) -> np.ndarray:
    chord = end - start
    normal = _left_normal(chord)
    control = (start + end) / 2 + CURVE_OFFSET_PER_LEVEL * (curvature_level + 1) * normal
    base = _bezier(start, control, end, s)
    phase = np.pi * shape_level
    envelope = 4.0 * s * (1.0 - s)  # exactly zero at both segment ends
    wave = WAVE_AMPLITUDE * np.sin(2 * np.pi * s + phase) * envelope
    return base + wave[:, None] * normal


def gen_2d_wavy(t_steps: int) -> TrajectoryDataset:
    """All 400 combinations of goal x half-shapes x half-curvatures.

    The goal factor moves the midpoint and endpoint, so it shapes the whole
    trajectory; shape/curvature factors of one half leave the other half
    bit-identical.  The two halves join C0-continuously at the midpoint.
    """
    if t_steps < 4 or t_steps % 2 != 0:
        raise ValueError(f"t_steps must be even and >= 4, got {t_steps}")
    names = ("goal", "shape_half1", "shape_half2", "curvature_half1", "curvature_half2")
    cards = (4, 2, 2, 5, 5)
    half = t_steps // 2
    s_first = np.linspace(0.0, 1.0, half)
    s_second = np.linspace(0.0, 1.0, half + 1)[1:]
    origin = np.zeros(2)
    trajectories = []
    for g_level, goal in enumerate(WAVY_GOALS):
        mid = goal / 2
        for sh1 in range(2):
            for sh2 in range(2):
                for c1 in range(5):
                    for c2 in range(5):
                        first = _wavy_half(origin, mid, c1, sh1, s_first)
                        second = _wavy_half(mid, goal, c2, sh2, s_second)
                        pts = np.concatenate([first, second])
                        factors = (
                            FactorValue(0, g_level, f"goal x={goal[0]:+.1f}"),
                            FactorValue(1, sh1, f"1st-half shape {sh1}"),
                            FactorValue(2, sh2, f"2nd-half shape {sh2}"),
                            FactorValue(3, c1, f"1st-half curvature {c1 + 1}"),
                            FactorValue(4, c2, f"2nd-half curvature {c2 + 1}"),
                        )
                        trajectories.append(Trajectory(pts.astype(np.float32), factors))
    return TrajectoryDataset(trajectories, t_steps, names, cards, WAVY_VERSION)


GENERATORS = {
    "2d-reaching": gen_2d_reaching,
    "2d-wavy": gen_2d_wavy,
}


# ---------------------------------------------------------------------------
# serialization: self-describing header + little-endian payload
# ---------------------------------------------------------------------------

def save_dataset(ds: TrajectoryDataset, path: str | Path) -> None:
    """Write the versioned binary format (lossless round-trip)."""
    meta = {
        "version": ds.version,
        "t_steps": ds.t_steps,
        "n_trajectories": len(ds),
        "n_channels": 2,
        "factor_names": list(ds.factor_names),
        "factor_cardinalities": list(ds.factor_cardinalities),
        "factor_descriptions": [[f.description for f in tr.factors]
                                for tr in ds.trajectories],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    points = np.stack([tr.points for tr in ds.trajectories]).astype("<f4")
    levels = ds.factor_levels().astype("<i2")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(points.tobytes())
        fh.write(levels.tobytes())


def _read_exact(fh: io.BufferedReader, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return buf


def load_dataset(path: str | Path) -> TrajectoryDataset:
    """Read a file written by :func:`save_dataset`, validating everything."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise DatasetFormatError("not a trajectory dataset file (bad magic)")
        (fmt,) = struct.unpack("<H", _read_exact(fh, 2, "format version"))
        if fmt != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported format version {fmt}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "header"))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"corrupt header: {exc}") from exc
        n = meta["n_trajectories"]
        t_steps = meta["t_steps"]
        k = len(meta["factor_names"])
        points = np.frombuffer(
            _read_exact(fh, n * t_steps * 2 * 4, "points"), dtype="<f4"
        ).reshape(n, t_steps, 2)
        levels = np.frombuffer(
            _read_exact(fh, n * k * 2, "factor levels"), dtype="<i2"
        ).reshape(n, k)
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after dataset payload")
    if not np.all(np.isfinite(points)):
        raise DatasetFormatError("dataset contains non-finite coordinates")
    cards = meta["factor_cardinalities"]
    if np.any(levels < 0) or np.any(levels >= np.array(cards)[None, :]):
        raise DatasetFormatError("factor level outside declared cardinality")
    descriptions = meta["factor_descriptions"]
    trajectories = []
    for i in range(n):
        factors = tuple(
            FactorValue(j, int(levels[i, j]), descriptions[i][j]) for j in range(k)
        )
        trajectories.append(Trajectory(np.array(points[i]), factors))
    return TrajectoryDataset(
        trajectories, t_steps, tuple(meta["factor_names"]), tuple(cards),
        meta["version"],
    )


def export_csv(ds: TrajectoryDataset, path: str | Path) -> None:
    """Plain-text export: one row per time step, factor levels per trajectory."""
    with open(path, "w", newline="") as fh:
        header = ["traj_id", "t", "x", "y"] + list(ds.factor_names)
        fh.write(",".join(header) + "\n")
        for tid, tr in enumerate(ds.trajectories):
            suffix = "," + ",".join(str(lv) for lv in tr.levels)
            for step, (x, y) in enumerate(tr.points):
                fh.write(f"{tid},{step},{float(x)!r},{float(y)!r}{suffix}\n")
