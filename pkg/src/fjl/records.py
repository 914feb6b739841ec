"""Plain value records shared across the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EXERCISES = ("arm_lifting", "lateral_tilt", "trunk_rotation", "pelvis_rotation")
SPEED_LIMIT = 2.0  # m/s


@dataclass(frozen=True)
class PatientPose:
    t: float
    position: tuple
    orientation: tuple  # (qx, qy, qz, qw)

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"orientation must be a unit quaternion, got {self.orientation}")

    def vector(self):
        return np.array([*self.position, *self.orientation], dtype=np.float64)


@dataclass(frozen=True)
class ObservationWindow:
    """``P`` consecutive poses; ``poses`` is (P, 7), ``times`` is (P,)."""

    poses: np.ndarray
    times: np.ndarray
    patient_id: str
    exercise: str

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        times = np.asarray(self.times, dtype=np.float64)
        if poses.ndim != 2 or poses.shape[1] != 7 or times.shape != (poses.shape[0],):
            raise ValueError(f"window poses must be (P, 7) with matching times, got {poses.shape}")
        if self.exercise not in EXERCISES:
            raise ValueError(f"unknown exercise {self.exercise!r}")
        if len(times) > 2:
            gaps = np.diff(times)
            if np.max(np.abs(gaps - gaps[0])) > 1e-9:
                raise ValueError("window time gaps are not uniform")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True)
class RobotTarget:
    position: tuple
    velocity: tuple

    def __post_init__(self):
        v = np.asarray(self.vector(), dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("robot target must be finite")

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(tuple(v[:3]), tuple(v[3:6]))

    def vector(self):
        return np.array([*self.position, *self.velocity], dtype=np.float64)

    def within_speed_limit(self, limit=SPEED_LIMIT):
        return float(np.linalg.norm(self.velocity)) <= limit
