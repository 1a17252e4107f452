"""Dataset ingestion, windowed featurization, retargeting, synthetic data.

On-disk format: a directory with ``manifest.json`` listing trajectories and
one CSV per agent per trajectory (header row, fixed column order). The
observed agent streams 3 arm joints (shoulder, elbow, wrist) as 3D
positions with the shoulder as origin; the generated agent streams joint
angles. Features are sliding windows of 5 frames: positions plus
frame-to-frame deltas for the observed agent (5 x 3 x 6 = 90 wide),
stacked joint angles for the generated agent (5 x n_joints).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from comotion.errors import DataError
from comotion.kin import KinematicChain, default_arm_chain

H_COLUMNS = [
    f"{joint}_{ax}" for joint in ("shoulder", "elbow", "wrist") for ax in "xyz"
]


@dataclass
class TrajectoryPair:
    """Time-aligned streams of the observed (h) and generated (r) agents."""

    label: str
    h_frames: np.ndarray  # (T, 9) shoulder/elbow/wrist xyz, shoulder origin
    r_frames: np.ndarray  # (T, n_r) joint angles (or task-space values)
    rate: float = 20.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h_frames = np.asarray(self.h_frames, dtype=np.float64)
        self.r_frames = np.asarray(self.r_frames, dtype=np.float64)
        if self.h_frames.shape[0] != self.r_frames.shape[0]:
            raise DataError(
                f"trajectory {self.label!r}: agents have different lengths "
                f"({self.h_frames.shape[0]} vs {self.r_frames.shape[0]})"
            )
        if not (np.all(np.isfinite(self.h_frames)) and np.all(np.isfinite(self.r_frames))):
            raise DataError(f"trajectory {self.label!r} contains non-finite values")

    @property
    def length(self) -> int:
        return self.h_frames.shape[0]


@dataclass
class Dataset:
    pairs: list[TrajectoryPair]
    w: int = 5
    rate: float = 20.0
    assignment: list[str] | None = None  # "train"/"test" per pair

    @property
    def labels(self) -> list[str]:
        return sorted({p.label for p in self.pairs})

    def by_label(self, label: str, subset: str | None = None) -> list[TrajectoryPair]:
        out = []
        for i, p in enumerate(self.pairs):
            if p.label != label:
                continue
            if subset is not None and (self.assignment or [])[i] != subset:
                continue
            out.append(p)
        return out

    def subset(self, which: str) -> list[TrajectoryPair]:
        if self.assignment is None:
            raise DataError("dataset has no train/test assignment; call split first")
        return [p for p, a in zip(self.pairs, self.assignment) if a == which]


def window_features(frames: np.ndarray, w: int, kind: str) -> np.ndarray:
    """Sliding windows of width ``w``, stride 1.

    kind "positions": each frame contributes, per joint, its 3 positions
    followed by its 3 deltas (first frame's delta is zero), giving
    w * n_joints * 6 columns. kind "joints": plain stacking, w * n_cols.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    if kind == "positions":
        if T < w + 1:
            raise DataError(f"need at least {w + 1} frames for position windows, got {T}")
        deltas = np.zeros_like(frames)
        deltas[1:] = frames[1:] - frames[:-1]
        n_joints = frames.shape[1] // 3
        per_frame = np.empty((T, n_joints * 6))
        for j in range(n_joints):
            per_frame[:, 6 * j : 6 * j + 3] = frames[:, 3 * j : 3 * j + 3]
            per_frame[:, 6 * j + 3 : 6 * j + 6] = deltas[:, 3 * j : 3 * j + 3]
    elif kind == "joints":
        if T < w:
            raise DataError(f"need at least {w} frames for joint windows, got {T}")
        per_frame = frames
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    n_win = T - w + 1
    width = per_frame.shape[1]
    out = np.empty((n_win, w * width))
    for i in range(w):
        out[:, i * width : (i + 1) * width] = per_frame[i : i + n_win]
    return out


def pair_features(pair: TrajectoryPair, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (h windows, r windows) for one trajectory."""
    return (
        window_features(pair.h_frames, w, "positions"),
        window_features(pair.r_frames, w, "joints"),
    )


def downsample(pair: TrajectoryPair, target_hz: float) -> TrajectoryPair:
    """Uniform index subsampling to (approximately) ``target_hz``."""
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz > pair.rate:
        raise ValueError(f"target {target_hz} Hz exceeds source {pair.rate} Hz")
    if target_hz == pair.rate:
        return pair
    T = pair.length
    ratio = pair.rate / target_hz
    n_out = math.ceil(T / ratio)
    idx = np.floor(np.arange(n_out) * ratio).astype(int)
    meta = dict(pair.meta)
    for key, val in pair.meta.items():
        if isinstance(val, np.ndarray) and val.shape[:1] == (T,):
            meta[key] = val[idx]
        elif key in ("contact_start", "contact_end"):
            meta[key] = int(np.searchsorted(idx, val))
    return TrajectoryPair(
        pair.label, pair.h_frames[idx], pair.r_frames[idx], target_hz, meta
    )


# ---------------------------------------------------------------------------
# skeleton-to-joint retargeting
# ---------------------------------------------------------------------------


def retarget_skeleton(
    h_frames: np.ndarray, chain: KinematicChain | None = None
) -> np.ndarray:
    """Shoulder pitch/yaw/roll and elbow angle from 3D arm positions.

    Frames follow the x-forward / y-left / z-up convention with the
    shoulder at the origin. The roll convention places the elbow axis
    normal to the plane spanned by upper arm and forearm; a straight arm
    (degenerate plane) gets roll 0. Outputs are clamped to chain limits.
    """
    chain = chain or default_arm_chain()
    frames = np.asarray(h_frames, dtype=np.float64).reshape(-1, 3, 3)
    out = np.empty((frames.shape[0], 4))
    for t, (shoulder, elbow, wrist) in enumerate(frames):
        upper = elbow - shoulder
        fore = wrist - elbow
        len_u, len_f = np.linalg.norm(upper), np.linalg.norm(fore)
        if len_u < 1e-9 or len_f < 1e-9:
            raise DataError(f"zero-length limb segment at frame {t}")
        u = upper / len_u
        f = fore / len_f
        pitch = math.atan2(-u[2], u[0])
        yaw = math.asin(np.clip(u[1], -1.0, 1.0))
        elbow_angle = math.acos(np.clip(u @ f, -1.0, 1.0))
        normal = np.cross(u, f)
        n_norm = np.linalg.norm(normal)
        if n_norm < 1e-9:
            roll = 0.0
        else:
            # express the bend-plane normal in the pre-roll shoulder frame
            ry = _roty(pitch)
            rz = _rotz(yaw)
            n_local = (ry @ rz).T @ (normal / n_norm)
            roll = math.atan2(-n_local[1], n_local[2])
        out[t] = (pitch, yaw, roll, elbow_angle)
    return chain.clamp(out)


def _roty(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rotz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# synthetic coupled interactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthInteraction:
    """Parametric reach-hold-retract interaction with coupled agents."""

    name: str = "greeting"
    n_traj: int = 40
    length: int = 100
    noise: float = 0.05


@dataclass(frozen=True)
class SynthSpec:
    interactions: tuple[SynthInteraction, ...] = (SynthInteraction(),)
    rate: float = 20.0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        inter = tuple(SynthInteraction(**i) for i in d.get("interactions", [{}]))
        return cls(inter, float(d.get("rate", 20.0)))


_REST = {"elbow": np.array([0.02, -0.09, -0.26]), "wrist": np.array([0.04, -0.08, -0.52])}
_EXT = {"elbow": np.array([0.24, -0.10, -0.10]), "wrist": np.array([0.50, -0.12, 0.02])}

# generated-agent joint curves, affine in (a*phase, oscillation)
_R_BASE = np.array([-1.1, 0.15, -0.10, 0.25])
_R_PHASE = np.array([1.5, 0.45, -0.50, 0.90])
_R_OSC = np.array([0.0, 0.0, 0.0, 0.20])


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def synth_generate(spec: SynthSpec, rng: np.random.Generator) -> Dataset:
    """Coupled pairs where the generated agent is an affine function of the
    observed agent's (jittered) phase plus i.i.d. noise."""
    if not spec.interactions:
        raise ValueError("empty synthetic spec")
    pairs = []
    for inter in spec.interactions:
        for _ in range(inter.n_traj):
            pairs.append(_one_trajectory(inter, spec.rate, rng))
    return Dataset(pairs, rate=spec.rate)


def _one_trajectory(
    inter: SynthInteraction, rate: float, rng: np.random.Generator
) -> TrajectoryPair:
    T = inter.length
    t = np.arange(T)
    t1 = int(rng.uniform(0.32, 0.42) * T)
    t2 = int(rng.uniform(0.62, 0.72) * T)
    amp = 1.0 + rng.uniform(-0.15, 0.15)
    phase = np.empty(T)
    phase[:t1] = _smoothstep(t[:t1] / t1)
    phase[t1:t2] = 1.0
    phase[t2:] = _smoothstep((T - 1 - t[t2:]) / (T - 1 - t2))
    osc = np.zeros(T)
    hold = slice(t1, t2)
    u_hold = (t[hold] - t1) / max(t2 - t1, 1)
    osc[hold] = np.sin(4.0 * np.pi * u_hold)
    aphase = amp * phase

    h = np.zeros((T, 9))
    h[:, 3:6] = _REST["elbow"] + aphase[:, None] * (_EXT["elbow"] - _REST["elbow"])
    h[:, 6:9] = _REST["wrist"] + aphase[:, None] * (_EXT["wrist"] - _REST["wrist"])
    h[:, 8] += 0.05 * amp * osc
    r = _R_BASE + aphase[:, None] * _R_PHASE + osc[:, None] * _R_OSC
    if inter.noise > 0:
        h = h + inter.noise * rng.standard_normal(h.shape)
        r = r + inter.noise * rng.standard_normal(r.shape)
    meta = {
        "aphase": aphase,
        "osc": osc,
        "contact_start": t1,
        "contact_end": t2,
        "amp": amp,
    }
    return TrajectoryPair(inter.name, h, r, rate, meta)


# ---------------------------------------------------------------------------
# persistence and splitting
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(dataset.pairs):
        h_name = f"traj{i:04d}_h.csv"
        r_name = f"traj{i:04d}_r.csv"
        _write_csv(path / h_name, H_COLUMNS, pair.h_frames)
        r_cols = [f"q{j + 1}" for j in range(pair.r_frames.shape[1])]
        _write_csv(path / r_name, r_cols, pair.r_frames)
        meta = {
            k: v for k, v in pair.meta.items() if not isinstance(v, np.ndarray)
        }
        entries.append({"label": pair.label, "h": h_name, "r": r_name, "meta": meta})
    manifest = {"rate": dataset.rate, "w": dataset.w, "trajectories": entries}
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _write_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) for x in row])


def _read_csv(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = [[float(x) for x in row] for row in reader]
    except (ValueError, StopIteration) as exc:
        raise DataError(f"malformed CSV {path}: {exc}") from None
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise DataError(f"malformed CSV {path}: ragged rows")
    return arr


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from None
    pairs = []
    for entry in manifest["trajectories"]:
        pairs.append(
            TrajectoryPair(
                entry["label"],
                _read_csv(path / entry["h"]),
                _read_csv(path / entry["r"]),
                float(manifest.get("rate", 20.0)),
                dict(entry.get("meta", {})),
            )
        )
    return Dataset(pairs, w=int(manifest.get("w", 5)), rate=float(manifest.get("rate", 20.0)))


def split(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Deterministic stratified train/test assignment.

    Per label, round(fraction * n) trajectories go to train (kept within
    one of the target and never the full label when it has two or more).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    assignment = ["test"] * len(dataset.pairs)
    for label in dataset.labels:
        idx = [i for i, p in enumerate(dataset.pairs) if p.label == label]
        order = rng.permutation(len(idx))
        n_train = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_train = min(max(n_train, 1), len(idx) - 1)
        for j in order[:n_train]:
            assignment[idx[j]] = "train"
    return replace(dataset, assignment=assignment)
