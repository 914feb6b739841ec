"""Serial 12-joint arm: forward kinematics and damped-least-squares tracking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_JOINTS = 12


class KinematicsError(ValueError):
    pass


def _default_axes():
    z, y = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])
    return np.array([z if k % 2 == 0 else y for k in range(N_JOINTS)])


def _default_limits():
    lim = np.tile([-2.6, 2.6], (N_JOINTS, 1))
    lim[0] = [-np.pi, np.pi]
    return lim


@dataclass(frozen=True)
class ArmModel:
    """Revolute chain; link k extends along the local x axis after joint k."""

    link_lengths: np.ndarray = field(default_factory=lambda: np.full(N_JOINTS, 1.0 / N_JOINTS))
    joint_axes: np.ndarray = field(default_factory=_default_axes)
    joint_limits: np.ndarray = field(default_factory=_default_limits)

    def __post_init__(self):
        lengths = np.asarray(self.link_lengths, dtype=np.float64)
        axes = np.asarray(self.joint_axes, dtype=np.float64)
        limits = np.asarray(self.joint_limits, dtype=np.float64)
        if lengths.shape != (N_JOINTS,) or np.any(lengths <= 0):
            raise KinematicsError(f"need {N_JOINTS} positive link lengths")
        if axes.shape != (N_JOINTS, 3) or not np.allclose(np.linalg.norm(axes, axis=1), 1.0):
            raise KinematicsError(f"need {N_JOINTS} unit joint axes")
        if limits.shape != (N_JOINTS, 2) or np.any(limits[:, 0] >= limits[:, 1]):
            raise KinematicsError("joint limits must satisfy min < max")
        for name, arr in (("link_lengths", lengths), ("joint_axes", axes), ("joint_limits", limits)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_joints(self):
        return N_JOINTS

    @property
    def reach(self):
        return float(self.link_lengths.sum())

    def within_limits(self, q):
        q = np.asarray(q)
        return bool(np.all(q >= self.joint_limits[:, 0]) and np.all(q <= self.joint_limits[:, 1]))

    def clamp(self, q):
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    def default_pose(self):
        """A bent, non-singular starting configuration."""
        q = np.zeros(N_JOINTS)
        q[1::2] = 0.35 * np.array([-1, 1, 1, 1, -1, 1])[: len(q[1::2])]
        q[2::2] = 0.1
        return self.clamp(q)


def _rotations(axes, angles):
    """Rodrigues rotation matrices, one per (axis, angle) pair: (n, 3, 3)."""
    c, s = np.cos(angles), np.sin(angles)
    C = 1.0 - c
    x, y, z = axes[:, 0], axes[:, 1], axes[:, 2]
    R = np.empty((len(angles), 3, 3))
    R[:, 0, 0] = c + x * x * C
    R[:, 0, 1] = x * y * C - z * s
    R[:, 0, 2] = x * z * C + y * s
    R[:, 1, 0] = y * x * C + z * s
    R[:, 1, 1] = c + y * y * C
    R[:, 1, 2] = y * z * C - x * s
    R[:, 2, 0] = z * x * C - y * s
    R[:, 2, 1] = z * y * C + x * s
    R[:, 2, 2] = c + z * z * C
    return R


def _chain(arm, q):
    """Joint origins (13 x 3, last is end effector) and world joint axes."""
    local = _rotations(arm.joint_axes, q)
    frames = np.empty((N_JOINTS + 1, 3, 3))  # frames[k] = orientation before joint k
    frames[0] = np.eye(3)
    for k in range(N_JOINTS):
        frames[k + 1] = frames[k] @ local[k]
    axes = np.einsum("kij,kj->ki", frames[:-1], arm.joint_axes)
    origins = np.zeros((N_JOINTS + 1, 3))
    np.cumsum(frames[1:, :, 0] * arm.link_lengths[:, None], axis=0, out=origins[1:])
    return origins, axes


def forward_kinematics(arm, angles, check_limits=True):
    """Return ``(end_effector, joint_positions)`` for 12 joint angles.

    ``joint_positions`` holds the world position of each joint origin.
    """
    q = np.asarray(angles, dtype=np.float64)
    if q.shape != (N_JOINTS,):
        raise KinematicsError(f"expected {N_JOINTS} joint angles, got shape {q.shape}")
    if check_limits and not arm.within_limits(q):
        raise KinematicsError("joint angles outside limits")
    origins, _ = _chain(arm, q)
    return origins[-1].copy(), origins[:-1].copy()


def position_jacobian(arm, q):
    """3 x 12 Jacobian of the end-effector position."""
    origins, axes = _chain(arm, np.asarray(q, dtype=np.float64))
    return np.cross(axes, origins[-1] - origins[:-1]).T, origins[-1]


@dataclass
class IkResult:
    q: np.ndarray
    position: np.ndarray
    error: float
    iterations: int
    reached: bool


def _dls(arm, target, q, lam2, tol, n_iter, max_step, max_joint_step):
    J, p = position_jacobian(arm, q)
    e = target - p
    err = float(np.linalg.norm(e))
    best = (err, q, p)
    it = 0
    while err >= tol and it < n_iter:
        step = e * (max_step / err) if err > max_step else e
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(3), step)
        nq = np.linalg.norm(dq)
        if nq > max_joint_step:
            dq *= max_joint_step / nq
        q = arm.clamp(q + dq)
        J, p = position_jacobian(arm, q)
        e = target - p
        err = float(np.linalg.norm(e))
        it += 1
        if err < best[0]:
            best = (err, q, p)
    return best, it


def ik_solve(
    arm, target, q0, damping=0.05, tol=1e-3, max_iter=200, max_step=0.1, max_joint_step=0.1
):
    """Damped least squares: dq = J^T (J J^T + damping^2 I)^-1 e, clamped to limits.

    The task error fed to each update is capped at ``max_step`` metres and
    the joint step at ``max_joint_step`` radians. If half the iteration
    budget passes without convergence the solve restarts once from ``q0``
    with the base joint turned towards the target. The best configuration
    seen is returned.
    """
    target = np.asarray(target, dtype=np.float64)
    q0 = arm.clamp(np.asarray(q0, dtype=np.float64))
    lam2 = damping * damping
    best, it = _dls(arm, target, q0, lam2, tol, max_iter // 2, max_step, max_joint_step)
    if best[0] >= tol and it < max_iter:
        p0, _ = forward_kinematics(arm, q0, check_limits=False)
        q1 = q0.copy()
        q1[0] += np.arctan2(target[1], target[0]) - np.arctan2(p0[1], p0[0])
        q1[0] = (q1[0] + np.pi) % (2 * np.pi) - np.pi
        second, it2 = _dls(
            arm, target, arm.clamp(q1), lam2, tol, max_iter - it, max_step, max_joint_step
        )
        it += it2
        if second[0] < best[0]:
            best = second
    err, q, p = best
    return IkResult(q, p.copy(), err, it, err < tol)


@dataclass(frozen=True)
class RobotState:
    j_f: np.ndarray  # (12,) joint torque proxy
    j_p: np.ndarray  # (12, 3) joint positions in space
    j_i: np.ndarray  # (12,) joint angles
    j_v: np.ndarray  # (12,) joint velocities
    reached: bool = True


@dataclass
class TrackResult:
    """Per-timestep arrays from :func:`ik_track`."""

    j_i: np.ndarray  # (T, 12)
    j_v: np.ndarray  # (T, 12)
    j_f: np.ndarray  # (T, 12)
    j_p: np.ndarray  # (T, 12, 3)
    end_effector: np.ndarray  # (T, 3)
    errors: np.ndarray  # (T,)
    reached: np.ndarray  # (T,) bool
    iterations: np.ndarray  # (T,) int

    def __len__(self):
        return len(self.j_i)

    def __getitem__(self, i):
        return RobotState(self.j_f[i], self.j_p[i], self.j_i[i], self.j_v[i], bool(self.reached[i]))

    def states(self):
        return [self[i] for i in range(len(self))]


def ik_track(arm, targets, q0=None, dt=0.02, gain=100.0, damping=0.05, tol=1e-3, max_iter=200):
    """Track a sequence of 3-d targets, warm-starting each solve from the last.

    A solve that misses from the warm start is repeated once from the rest pose.

    The force record is a virtual-spring proxy: ``J^T (gain * e)`` where ``e``
    is the error between the target and the pose held from the previous step.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    q = arm.default_pose() if q0 is None else np.asarray(q0, dtype=np.float64)
    if not arm.within_limits(q):
        raise KinematicsError("initial joint angles outside limits")
    n = len(targets)
    j_i = np.empty((n, N_JOINTS))
    j_f = np.empty((n, N_JOINTS))
    j_p = np.empty((n, N_JOINTS, 3))
    ee = np.empty((n, 3))
    errors = np.empty(n)
    reached = np.empty(n, dtype=bool)
    iters = np.empty(n, dtype=np.int64)
    for t, target in enumerate(targets):
        J, p = position_jacobian(arm, q)
        j_f[t] = J.T @ (gain * (target - p))
        res = ik_solve(arm, target, q, damping, tol, max_iter)
        if not res.reached:
            # a warm start far from the target can stall; retry from the rest pose
            cold = ik_solve(arm, target, arm.default_pose(), damping, tol, max_iter)
            if cold.error < res.error:
                res = cold
        q = res.q
        j_i[t] = q
        ee[t], j_p[t] = forward_kinematics(arm, q)
        errors[t] = res.error
        reached[t] = res.reached
        iters[t] = res.iterations
    if n > 1:
        j_v = np.gradient(j_i, dt, axis=0)
    else:
        j_v = np.zeros_like(j_i)
    return TrackResult(j_i, j_v, j_f, j_p, ee, errors, reached, iters)
