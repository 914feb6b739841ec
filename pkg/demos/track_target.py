"""Drive the simulated arm along a circle and report tracking error."""

import numpy as np

from fjl.kinematics import ArmModel, forward_kinematics, ik_track


def main():
    arm = ArmModel()
    t = np.linspace(0, 2 * np.pi, 60)
    radius = 0.5 * arm.reach
    path = np.stack([radius * np.cos(t), radius * np.sin(t), 0.2 * arm.reach * np.ones_like(t)], axis=1)
    track = ik_track(arm, path)
    err = [np.linalg.norm(forward_kinematics(arm, q)[0] - p) for q, p in zip(track.j_i, path)]
    print(f"{len(path)} targets, {int(track.reached.sum())} reached, worst error {max(err):.2e} m")
    print(f"joints within limits: {all(arm.within_limits(q) for q in track.j_i)}")


if __name__ == "__main__":
    main()
