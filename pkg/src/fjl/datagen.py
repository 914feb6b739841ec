"""Synthetic patient exercise data and IK-derived robot guidance targets.

Each patient performs each exercise as a parametric curve, scaled down by
their impairment and perturbed by tremor. The robot guidance target is the
unimpaired (expert) version of the same motion, tracked by the 12-joint arm
with damped-least-squares IK. Windows of ``P`` patient poses are paired with
the robot end-effector position and velocity at the window's last step.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .kinematics import ArmModel, ik_track
from .records import EXERCISES, SPEED_LIMIT, ObservationWindow, PatientPose, RobotTarget

log = logging.getLogger(__name__)

WORKSPACE_CENTER = np.array([0.45, 0.0, 0.25])
TRUNK_PIVOT = np.array([0.10, 0.0, 0.25])
DATASET_MAGIC = b"FJLDS1"
FORCE_NOTE = "j_f is a proxy: J^T (gain * e), a virtual spring on the tracking error"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    amplitude_scale: float = 1.0
    tremor_std: float = 0.0
    period: float = 4.0
    reach: float = 0.3

    def __post_init__(self):
        if not 0 < self.amplitude_scale <= 1:
            raise ValueError(f"{self.patient_id}: amplitude_scale must be in (0, 1]")
        if self.tremor_std < 0:
            raise ValueError(f"{self.patient_id}: tremor_std must be >= 0")
        if self.period <= 0 or self.reach <= 0:
            raise ValueError(f"{self.patient_id}: period and reach must be > 0")

    @property
    def amplitude(self):
        return self.reach * self.amplitude_scale


@dataclass(frozen=True)
class DatagenConfig:
    n_patients: int = 20
    exercises: tuple = EXERCISES
    duration_s: float = 60.0
    rate_hz: float = 50.0
    window_p: int = 16
    stride: int = 2
    amplitude_range: tuple = (0.25, 1.0)
    tremor_range: tuple = (0.0, 0.02)
    period_range: tuple = (3.0, 6.0)
    reach_range: tuple = (0.15, 0.6)
    speed_limit: float = SPEED_LIMIT
    store_joint_states: bool = False

    def __post_init__(self):
        object.__setattr__(self, "exercises", tuple(self.exercises))
        bad = [e for e in self.exercises if e not in EXERCISES]
        if bad:
            raise ValueError(f"unknown exercise {bad[0]!r}; expected one of {EXERCISES}")
        if self.n_patients <= 0 or self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("n_patients, duration_s and rate_hz must be positive")
        if self.window_p <= 0 or self.stride <= 0:
            raise ValueError("window_p and stride must be positive")


def make_profiles(n_patients, seed, cfg=DatagenConfig()):
    rng = np.random.default_rng([seed, 0xA11])
    profiles = []
    for i in range(n_patients):
        profiles.append(
            PatientProfile(
                patient_id=f"P{i:03d}",
                amplitude_scale=float(rng.uniform(*cfg.amplitude_range)),
                tremor_std=float(rng.uniform(*cfg.tremor_range)),
                period=float(rng.uniform(*cfg.period_range)),
                reach=float(rng.uniform(*cfg.reach_range)),
            )
        )
    return profiles


# -- motion curves -----------------------------------------------------------


def exercise_curve(exercise, times, amplitude, period):
    """Noise-free forearm positions (T, 3) for one exercise.

    ``amplitude`` is the peak-to-peak extent along the exercise's main axis.
    """
    phi = 2.0 * np.pi * np.asarray(times, dtype=np.float64) / period
    A = amplitude
    cx, cy, cz = WORKSPACE_CENTER
    if exercise == "arm_lifting":
        x = cx - 0.15 * A * (1.0 - np.cos(phi))
        y = np.full_like(phi, cy)
        z = cz - 0.5 * A * np.cos(phi)
    elif exercise == "lateral_tilt":
        x = np.full_like(phi, cx)
        y = cy + 0.5 * A * np.sin(phi)
        z = cz - 0.2 * A * np.sin(phi) ** 2
    elif exercise == "trunk_rotation":
        radius = cx - TRUNK_PIVOT[0]
        psi = 0.5 * (A / radius) * np.sin(phi)
        x = TRUNK_PIVOT[0] + radius * np.cos(psi)
        y = TRUNK_PIVOT[1] + radius * np.sin(psi)
        z = np.full_like(phi, cz)
    elif exercise == "pelvis_rotation":
        x = cx + 0.25 * A * np.sin(phi)
        y = cy - 0.5 * A * np.cos(phi)
        z = cz + 0.05 * A * np.sin(2.0 * phi)
    else:
        raise ValueError(f"unknown exercise {exercise!r}")
    return np.stack([x, y, z], axis=1)


def tangent_quaternions(positions):
    """Unit quaternions (qx, qy, qz, qw) turning +x onto the motion direction."""
    d = np.gradient(positions, axis=0) if len(positions) > 1 else np.zeros_like(positions)
    quats = np.empty((len(positions), 4))
    last = np.array([1.0, 0.0, 0.0])
    x_axis = np.array([1.0, 0.0, 0.0])
    for i, v in enumerate(d):
        n = np.linalg.norm(v)
        u = v / n if n > 1e-12 else last
        last = u
        w = 1.0 + u @ x_axis
        if w < 1e-9:
            q = np.array([0.0, 0.0, 1.0, 0.0])
        else:
            q = np.array([*np.cross(x_axis, u), w])
        quats[i] = q / np.linalg.norm(q)
    # One more pass pins the norm to the last ulp.
    return quats / np.linalg.norm(quats, axis=1, keepdims=True)


class PoseSequence:
    """Array-backed sequence of :class:`PatientPose`."""

    def __init__(self, times, poses):
        self.times = np.asarray(times, dtype=np.float64)
        self.poses = np.asarray(poses, dtype=np.float64)
        if self.poses.shape != (len(self.times), 7):
            raise ValueError(f"poses must be (T, 7), got {self.poses.shape}")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i):
        row = self.poses[i]
        return PatientPose(float(self.times[i]), tuple(row[:3]), tuple(row[3:]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def positions(self):
        return self.poses[:, :3]


def _times(duration_s, rate_hz):
    n = int(round(duration_s * rate_hz))
    if n < 1:
        raise ValueError("duration too short for the sampling rate")
    return np.arange(n) / rate_hz


def generate_human_trajectory(exercise, profile, duration_s, rate_hz, seed):
    if duration_s <= 0 or rate_hz <= 0:
        raise ValueError("duration and rate must be positive")
    if not isinstance(profile, PatientProfile):
        raise TypeError("profile must be a PatientProfile")
    times = _times(duration_s, rate_hz)
    clean = exercise_curve(exercise, times, profile.amplitude, profile.period)
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, profile.tremor_std, size=clean.shape) if profile.tremor_std else clean
    quats = tangent_quaternions(clean)
    return PoseSequence(times, np.concatenate([noisy, quats], axis=1))


def expert_trajectory(exercise, profile, duration_s, rate_hz):
    """The unimpaired motion the robot guides towards (full amplitude, no tremor)."""
    times = _times(duration_s, rate_hz)
    return exercise_curve(exercise, times, profile.reach, profile.period)


# -- trajectories and datasets -----------------------------------------------


@dataclass
class Trajectory:
    patient_id: str
    exercise: str
    times: np.ndarray
    poses: np.ndarray  # (T, 7) patient input
    targets: np.ndarray  # (T, 6) robot end-effector position and velocity
    reached: np.ndarray  # (T,) bool
    joints: dict = field(default=None, repr=False)  # j_i, j_v, j_f: (T, 12)

    def __len__(self):
        return len(self.times)

    def equals(self, other):
        if (self.patient_id, self.exercise) != (other.patient_id, other.exercise):
            return False
        arrays = ("times", "poses", "targets", "reached")
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        if (self.joints is None) != (other.joints is None):
            return False
        return self.joints is None or all(
            np.array_equal(self.joints[k], other.joints[k]) for k in self.joints
        )


def robot_targets(end_effector, times):
    """Stack positions with central-difference velocities."""
    if len(times) > 1:
        vel = np.gradient(end_effector, times, axis=0)
    else:
        vel = np.zeros_like(end_effector)
    return np.concatenate([end_effector, vel], axis=1)


def track_trajectory(patient_id, exercise, human, guidance, arm=None, keep_joints=False):
    """Run IK along ``guidance`` (T, 3) and pair it with the human poses."""
    arm = arm or ArmModel()
    times = human.times
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    track = ik_track(arm, guidance, dt=dt)
    joints = None
    if keep_joints:
        joints = {"j_i": track.j_i, "j_v": track.j_v, "j_f": track.j_f}
    return Trajectory(
        patient_id,
        exercise,
        times,
        human.poses,
        robot_targets(track.end_effector, times),
        track.reached.copy(),
        joints,
    )


def simulate_patient(profile, cfg, seed, arm=None, patient_index=0):
    """All exercise trajectories for one patient."""
    out = []
    for k, exercise in enumerate(cfg.exercises):
        ex_seed = np.random.SeedSequence([seed, patient_index, k])
        human = generate_human_trajectory(exercise, profile, cfg.duration_s, cfg.rate_hz, ex_seed)
        guidance = expert_trajectory(exercise, profile, cfg.duration_s, cfg.rate_hz)
        out.append(
            track_trajectory(
                profile.patient_id, exercise, human, guidance, arm, cfg.store_joint_states
            )
        )
    return out


def window_index(trajectories, P, stride, speed_limit=SPEED_LIMIT):
    """``(traj, end)`` pairs for every valid window.

    A window is valid when every step in it reached its IK target and the
    target speed at its last step respects ``speed_limit``.
    """
    rows = []
    for k, traj in enumerate(trajectories):
        n = len(traj)
        if n < P:
            log.warning("%s/%s: %d steps < window %d, skipped", traj.patient_id, traj.exercise, n, P)
            continue
        bad = ~traj.reached | (np.linalg.norm(traj.targets[:, 3:], axis=1) > speed_limit)
        # bad_count[e] = number of bad steps in the window ending at e
        csum = np.concatenate([[0], np.cumsum(bad)])
        ends = np.arange(P - 1, n, stride)
        bad_count = csum[ends + 1] - csum[ends + 1 - P]
        ends = ends[bad_count == 0]
        rows.append(np.stack([np.full(len(ends), k), ends], axis=1))
    if not rows:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(rows).astype(np.int64)


class Dataset:
    """Windows over a list of trajectories.

    ``index`` rows are ``(trajectory, end step)``; subsets share the
    trajectory list and only narrow the index.
    """

    def __init__(self, trajectories, window_p, stride, rate_hz, profiles=(), index=None, speed_limit=SPEED_LIMIT):
        self.trajectories = list(trajectories)
        self.window_p = int(window_p)
        self.stride = int(stride)
        self.rate_hz = float(rate_hz)
        self.profiles = list(profiles)
        self.speed_limit = float(speed_limit)
        if index is None:
            index = window_index(self.trajectories, self.window_p, self.stride, speed_limit)
        self.index = np.asarray(index, dtype=np.int64).reshape(-1, 2)
        self._flat = None

    def __len__(self):
        return len(self.index)

    def _flat_arrays(self):
        if self._flat is None:
            offsets = np.concatenate([[0], np.cumsum([len(t) for t in self.trajectories])])
            poses = np.concatenate([t.poses for t in self.trajectories]) if self.trajectories else np.zeros((0, 7))
            targets = np.concatenate([t.targets for t in self.trajectories]) if self.trajectories else np.zeros((0, 6))
            self._flat = (offsets, poses, targets)
        return self._flat

    def _rows(self, sel):
        return self.index if sel is None else self.index[np.asarray(sel)]

    def inputs(self, sel=None):
        """Window poses, shape (n, P, 7)."""
        offsets, poses, _ = self._flat_arrays()
        rows = self._rows(sel)
        ends = offsets[rows[:, 0]] + rows[:, 1]
        return poses[ends[:, None] + np.arange(1 - self.window_p, 1)[None, :]]

    def targets(self, sel=None):
        """Robot targets, shape (n, 6)."""
        offsets, _, targets = self._flat_arrays()
        rows = self._rows(sel)
        return targets[offsets[rows[:, 0]] + rows[:, 1]]

    def window(self, i):
        k, end = self.index[i]
        traj = self.trajectories[k]
        sl = slice(end - self.window_p + 1, end + 1)
        return ObservationWindow(traj.poses[sl], traj.times[sl], traj.patient_id, traj.exercise)

    def target(self, i):
        return RobotTarget.from_vector(self.targets([i])[0])

    def pair(self, i):
        return self.window(i), self.target(i)

    def end_times(self, sel=None):
        rows = self._rows(sel)
        return np.array([self.trajectories[k].times[e] for k, e in rows])

    def patient_ids(self):
        names = np.array([t.patient_id for t in self.trajectories], dtype=object)
        return names[self.index[:, 0]] if len(self.index) else np.array([], dtype=object)

    def exercises(self):
        names = np.array([t.exercise for t in self.trajectories], dtype=object)
        return names[self.index[:, 0]] if len(self.index) else np.array([], dtype=object)

    def exercise_counts(self):
        labels = self.exercises()
        return {e: int(np.count_nonzero(labels == e)) for e in EXERCISES if np.any(labels == e)}

    def subset(self, sel):
        sel = np.asarray(sel)
        if sel.dtype == bool:
            sel = np.flatnonzero(sel)
        sel = sel.astype(np.int64, copy=False)
        return Dataset(
            self.trajectories,
            self.window_p,
            self.stride,
            self.rate_hz,
            self.profiles,
            self.index[sel],
            self.speed_limit,
        )

    def equals(self, other):
        return (
            self.window_p == other.window_p
            and self.stride == other.stride
            and self.rate_hz == other.rate_hz
            and self.profiles == other.profiles
            and np.array_equal(self.index, other.index)
            and len(self.trajectories) == len(other.trajectories)
            and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
        )


def build_dataset(trajectories, P, stride, rate_hz=None, profiles=(), speed_limit=SPEED_LIMIT):
    if rate_hz is None:
        t0 = next((t for t in trajectories if len(t) > 1), None)
        rate_hz = 1.0 / float(t0.times[1] - t0.times[0]) if t0 is not None else 1.0
    return Dataset(trajectories, P, stride, rate_hz, profiles, speed_limit=speed_limit)


def generate_dataset(cfg=DatagenConfig(), seed=0, arm=None):
    profiles = make_profiles(cfg.n_patients, seed, cfg)
    trajectories = []
    for i, profile in enumerate(profiles):
        trajectories.extend(simulate_patient(profile, cfg, seed, arm, i))
    return build_dataset(trajectories, cfg.window_p, cfg.stride, cfg.rate_hz, profiles, cfg.speed_limit)


def split_by_patient(dataset, test_fraction=0.2, seed=0):
    """Seeded patient-level split; no trajectory straddles train and test."""
    patients = sorted({t.patient_id for t in dataset.trajectories})
    rng = np.random.default_rng([seed, 0x5E1])
    order = rng.permutation(len(patients))
    n_test = max(1, int(round(test_fraction * len(patients)))) if len(patients) > 1 else 0
    test_ids = {patients[i] for i in order[:n_test]}
    is_test = np.array([pid in test_ids for pid in dataset.patient_ids()], dtype=bool)
    return dataset.subset(~is_test), dataset.subset(is_test)


# -- serialization -----------------------------------------------------------

_JOINT_KEYS = ("j_i", "j_v", "j_f")


def _header(dataset):
    store_joints = bool(dataset.trajectories) and all(t.joints is not None for t in dataset.trajectories)
    return {
        "format": "FJLDS1",
        "window_p": dataset.window_p,
        "stride": dataset.stride,
        "rate_hz": dataset.rate_hz,
        "speed_limit": dataset.speed_limit,
        "exercise_labels": list(EXERCISES),
        "counts": {
            "trajectories": len(dataset.trajectories),
            "windows": len(dataset),
            "per_exercise": dataset.exercise_counts(),
        },
        "profiles": [asdict(p) for p in dataset.profiles],
        "trajectories": [
            {"patient_id": t.patient_id, "exercise": t.exercise, "length": len(t)}
            for t in dataset.trajectories
        ],
        "joint_states": store_joints,
        "force_record": FORCE_NOTE if store_joints else None,
        "index": dataset.index.tolist(),
    }


def dataset_bytes(dataset):
    header = _header(dataset)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack(">I", len(text)), text]
    for t in dataset.trajectories:
        blocks = [t.times, t.poses, t.targets, t.reached.astype(np.float64)]
        if header["joint_states"]:
            blocks += [t.joints[k] for k in _JOINT_KEYS]
        for b in blocks:
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_dataset(dataset, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(dataset))


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DatasetFormatError("unexpected end of payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def floats(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def dataset_from_bytes(buf):
    r = _Reader(buf)
    if bytes(r.take(len(DATASET_MAGIC))) != DATASET_MAGIC:
        raise DatasetFormatError("bad magic: not an FJLDS1 dataset file")
    (n,) = struct.unpack(">I", r.take(4))
    try:
        header = json.loads(bytes(r.take(n)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt header: {exc}") from None
    if header.get("format") != "FJLDS1":
        raise DatasetFormatError(f"unsupported dataset version {header.get('format')!r}")
    trajectories = []
    for meta in header["trajectories"]:
        T_ = meta["length"]
        times = r.floats((T_,))
        poses = r.floats((T_, 7))
        targets = r.floats((T_, 6))
        reached = r.floats((T_,)) != 0
        joints = None
        if header["joint_states"]:
            joints = {k: r.floats((T_, 12)) for k in _JOINT_KEYS}
        trajectories.append(
            Trajectory(meta["patient_id"], meta["exercise"], times, poses, targets, reached, joints)
        )
    if r.pos != len(r.buf):
        raise DatasetFormatError("trailing bytes after payload")
    profiles = [PatientProfile(**p) for p in header["profiles"]]
    return Dataset(
        trajectories,
        header["window_p"],
        header["stride"],
        header["rate_hz"],
        profiles,
        np.array(header["index"], dtype=np.int64).reshape(-1, 2),
        header["speed_limit"],
    )


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# -- CSV import --------------------------------------------------------------

CSV_COLUMNS = ("t", "x", "y", "z", "qx", "qy", "qz", "qw")


def read_pose_csv(path, warn_tol=1e-3, error_tol=0.1):
    """Read one trajectory with columns t,x,y,z,qx,qy,qz,qw.

    Quaternions are renormalized; deviations above ``warn_tol`` are logged and
    above ``error_tol`` rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetFormatError(f"{path}: missing columns {missing}")
        rows = [[float(row[c]) for c in CSV_COLUMNS] for row in reader]
    if not rows:
        raise DatasetFormatError(f"{path}: no rows")
    data = np.array(rows)
    quats = data[:, 4:8]
    norms = np.linalg.norm(quats, axis=1)
    dev = np.abs(norms - 1.0)
    worst = int(np.argmax(dev))
    if dev[worst] > error_tol:
        raise DatasetFormatError(
            f"{path}: row {worst + 1} quaternion norm {norms[worst]:.6f} is not a rotation"
        )
    if dev[worst] > warn_tol:
        log.warning("%s: quaternion norms off by up to %.2e, renormalizing", path, dev[worst])
    data[:, 4:8] = quats / norms[:, None]
    return PoseSequence(data[:, 0], data[:, 1:8])


def trajectory_from_csv(path, patient_id, exercise, arm=None, keep_joints=False):
    """Imported poses with the robot tracking the recorded forearm positions."""
    if exercise not in EXERCISES:
        raise ValueError(f"unknown exercise {exercise!r}")
    human = read_pose_csv(path)
    return track_trajectory(patient_id, exercise, human, human.positions, arm, keep_joints)
