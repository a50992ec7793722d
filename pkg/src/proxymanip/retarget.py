"""Retargeting proxy trajectories onto a planar serial arm.

Exploration frames map the proxy position straight onto the end effector
(orientation free); at the phase transition the end effector snaps to the
attached grasp pose; interaction frames then follow the grasp point as the
object moves, orientation constrained. Inverse kinematics is damped least
squares, warm-started frame to frame so the solution stays on one elbow
branch. A kinematic replay drives the object from the retargeted end-effector
trace to confirm the arm actually reproduces task success.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env2d
from .env2d import (FREE_BODY, PRISMATIC, REVOLUTE, ObjectModel, Phase,
                    TaskSpec, WorldState, grasp_point_world)
from .numcore import ConfigurationError

IK_POS_TOL = 1e-6
IK_ORI_TOL = 1e-4
IK_MAX_ITERS = 500
IK_DAMPING = 1e-3
IK_STEP_CAP = 0.3
CONTINUITY_LIMIT = 0.2  # rad per joint between consecutive frames


class OutOfReachError(ValueError):
    """Target outside the arm's reachable annulus."""


class IkConvergenceError(RuntimeError):
    """Damped-least-squares iteration did not converge."""


@dataclass(frozen=True)
class ArmModel:
    base_position: tuple[float, float] = (0.0, -0.45)
    link_lengths: tuple[float, ...] = (0.4, 0.4, 0.2)
    joint_limits: tuple[tuple[float, float], ...] = (
        (-2.967, 2.967), (-2.967, 2.967), (-2.967, 2.967))

    def __post_init__(self):
        if len(self.link_lengths) < 2:
            raise ConfigurationError("arm needs at least two links")
        if len(self.joint_limits) != len(self.link_lengths):
            raise ConfigurationError("one joint limit pair per link")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ConfigurationError("degenerate joint limits")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def inner_reach(self) -> float:
        longest = max(self.link_lengths)
        return max(0.0, 2.0 * longest - self.reach)


def default_arm() -> ArmModel:
    return ArmModel()


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def forward_kinematics(arm: ArmModel, joint_angles) -> tuple[np.ndarray, float]:
    """End-effector position and orientation of the planar chain."""
    q = np.asarray(joint_angles, dtype=float)
    if q.shape != (arm.n_joints,):
        raise ConfigurationError(
            f"expected {arm.n_joints} joint angles, got shape {q.shape}")
    cum = np.cumsum(q)
    pos = np.asarray(arm.base_position, dtype=float).copy()
    for l, c in zip(arm.link_lengths, cum):
        pos = pos + l * np.array([math.cos(c), math.sin(c)])
    return pos, float(cum[-1])


def jacobian(arm: ArmModel, joint_angles, with_orientation: bool) -> np.ndarray:
    q = np.asarray(joint_angles, dtype=float)
    cum = np.cumsum(q)
    cols = []
    for j in range(arm.n_joints):
        dx = dy = 0.0
        for i in range(j, arm.n_joints):
            dx -= arm.link_lengths[i] * math.sin(cum[i])
            dy += arm.link_lengths[i] * math.cos(cum[i])
        cols.append((dx, dy))
    jac = np.array(cols).T  # (2, n)
    if with_orientation:
        jac = np.vstack([jac, np.ones(arm.n_joints)])
    return jac


def _clip_to_limits(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    lo = np.array([l for l, _ in arm.joint_limits])
    hi = np.array([h for _, h in arm.joint_limits])
    return np.clip(q, lo, hi)


def _dls_solve(arm: ArmModel, target: np.ndarray,
               target_orientation: float | None, q0: np.ndarray):
    """One damped-least-squares descent; returns the solution or None."""
    q = _clip_to_limits(arm, q0.copy())
    with_ori = target_orientation is not None
    lam2 = IK_DAMPING * IK_DAMPING
    residual = math.inf
    for _ in range(IK_MAX_ITERS):
        pos, ori = forward_kinematics(arm, q)
        err_pos = target - pos
        residual = float(np.hypot(*err_pos))
        pos_ok = residual < IK_POS_TOL
        if with_ori:
            err_ori = wrap_angle(target_orientation - ori)
            if pos_ok and abs(err_ori) < IK_ORI_TOL:
                return q, residual
            err = np.array([err_pos[0], err_pos[1], err_ori])
        else:
            if pos_ok:
                return q, residual
            err = err_pos
        jac = jacobian(arm, q, with_ori)
        gram = jac @ jac.T + lam2 * np.eye(jac.shape[0])
        dq = jac.T @ np.linalg.solve(gram, err)
        biggest = float(np.abs(dq).max())
        if biggest > IK_STEP_CAP:
            dq *= IK_STEP_CAP / biggest
        q = _clip_to_limits(arm, q + dq)
    return None, residual


def _restart_guesses(arm: ArmModel, target: np.ndarray) -> list[np.ndarray]:
    """Deterministic fallback seeds: shoulder pointed at the target with the
    elbow folded either way."""
    rel = target - np.asarray(arm.base_position)
    heading = math.atan2(rel[1], rel[0])
    guesses = []
    for elbow in (0.7, -0.7, 1.8, -1.8):
        g = np.zeros(arm.n_joints)
        g[0] = heading
        if arm.n_joints > 1:
            g[1] = elbow
        guesses.append(g)
    return guesses


def inverse_kinematics(arm: ArmModel, target_position,
                       target_orientation: float | None = None,
                       initial_guess=None) -> np.ndarray:
    """Damped-least-squares IK with per-iteration step cap and joint-limit
    clamping.

    The warm start is attempted first so a continuous target path stays on
    one elbow branch; deterministic restarts only run if it stalls.
    """
    target = np.asarray(target_position, dtype=float)
    dist = float(np.hypot(*(target - np.asarray(arm.base_position))))
    if dist > arm.reach + 1e-9 or dist < arm.inner_reach - 1e-9:
        raise OutOfReachError(
            f"target {target.tolist()} at distance {dist:.4f} outside "
            f"reach [{arm.inner_reach:.4f}, {arm.reach:.4f}]")
    if initial_guess is None:
        q0 = np.zeros(arm.n_joints)
    else:
        q0 = np.asarray(initial_guess, dtype=float)
    best_residual = math.inf
    for guess in [q0] + _restart_guesses(arm, target):
        q, residual = _dls_solve(arm, target, target_orientation, guess)
        if q is not None:
            return q
        best_residual = min(best_residual, residual)
    raise IkConvergenceError(
        f"no convergence in {IK_MAX_ITERS} iterations from any start; "
        f"best position residual {best_residual:.3e}")


def snap_to_grasp(state: WorldState, obj: ObjectModel) -> tuple[np.ndarray, float]:
    """Grasp pose the end effector aligns to at the phase transition."""
    if state.attachment is None:
        raise ConfigurationError("no attachment recorded at transition")
    return grasp_point_world(obj, state.object_q, state.attachment)


# ---------------------------------------------------------------------------
# Trajectory retargeting
# ---------------------------------------------------------------------------

@dataclass
class RetargetedTrajectory:
    task_name: str
    joint_angles: list[np.ndarray]
    ee_poses: list[tuple[np.ndarray, float | None]]
    phase_markers: list[int]          # output indices of snap frames
    frames: list[dict]                # interchange rows
    events: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.joint_angles)

    def discontinuities(self) -> list:
        return [e for e in self.events if e[0] == "discontinuity"]


def _frame_target(frame: dict, obj: ObjectModel):
    """IK target for one recorded proxy frame."""
    q = np.asarray(frame["object_q"], dtype=float)
    if frame["phase"] == int(Phase.INTERACTION):
        pos, ang = grasp_point_world(obj, q, frame["attachment"])
        return pos, wrap_angle(ang)
    return np.asarray(frame["proxy_pos"], dtype=float), None


def retarget_trajectory(traj: dict, arm: ArmModel,
                        obj: ObjectModel) -> RetargetedTrajectory:
    """Convert a recorded proxy trajectory to a joint-space arm trajectory.

    Frames follow the proxy directly while exploring; a snap frame with
    constrained orientation is inserted at the phase transition; interaction
    frames track the attached grasp point as the object moves. Joint jumps
    above the continuity limit are flagged (the intentional snap itself is
    exempt, it is already marked).
    """
    frames_in = traj["frames"]
    if not frames_in:
        raise ConfigurationError("empty trajectory")
    out = RetargetedTrajectory(traj.get("task", "unknown"), [], [], [], [])
    # start from a ready pose facing the first target, elbow down
    rel0 = (np.asarray(frames_in[0]["proxy_pos"], dtype=float)
            - np.asarray(arm.base_position))
    guess = np.zeros(arm.n_joints)
    guess[0] = math.atan2(rel0[1], rel0[0])
    if arm.n_joints > 1:
        guess[1] = 0.7
    prev_q = None
    prev_was_snap = False

    def solve(index, target, orientation):
        nonlocal guess
        try:
            q = inverse_kinematics(arm, target, orientation, guess)
        except (OutOfReachError, IkConvergenceError) as exc:
            raise type(exc)(f"frame {index}: {exc}") from exc
        guess = q
        return q

    def emit(t, q, target, orientation, snap=False):
        nonlocal prev_q, prev_was_snap
        pos, ori = forward_kinematics(arm, q)
        # the snap is a marked alignment event, so the jumps into and out of
        # it are intentional and exempt from the continuity check
        if prev_q is not None and not prev_was_snap and not snap:
            jump = float(np.abs(q - prev_q).max())
            if jump >= CONTINUITY_LIMIT:
                out.events.append(["discontinuity", len(out.joint_angles),
                                   round(jump, 6)])
        out.joint_angles.append(q)
        out.ee_poses.append((pos, None if orientation is None else ori))
        out.frames.append({
            "t": t,
            "proxy_pos": [float(v) for v in target],
            "phase": 1 if orientation is not None else 0,
            "object_q": None,
            "joints": [float(v) for v in q],
            "ee_pose": [float(pos[0]), float(pos[1]),
                        float(ori) if orientation is not None else None],
        })
        prev_q = q
        prev_was_snap = snap

    last_phase = int(Phase.EXPLORATION)
    for idx, frame in enumerate(frames_in):
        phase = frame["phase"]
        if phase == int(Phase.INTERACTION) and last_phase == int(Phase.EXPLORATION):
            # transition: align with the grasp pose before tracking the object
            snap_state = WorldState(
                time_step=frame["t"],
                proxy_pos=np.asarray(frame["proxy_pos"], dtype=float),
                proxy_vel=np.zeros(2),
                object_q=np.asarray(frame["object_q"], dtype=float),
                object_qdot=np.zeros(len(frame["object_q"])),
                phase=Phase.INTERACTION,
                attachment=frame["attachment"],
            )
            pos, ang = snap_to_grasp(snap_state, obj)
            q = solve(idx, pos, wrap_angle(ang))
            out.phase_markers.append(len(out.joint_angles))
            emit(frame["t"], q, pos, wrap_angle(ang), snap=True)
        target, orientation = _frame_target(frame, obj)
        q = solve(idx, target, orientation)
        emit(frame["t"], q, target, orientation)
        out.frames[-1]["object_q"] = list(frame["object_q"])
        last_phase = phase
    return out


# ---------------------------------------------------------------------------
# Kinematic replay of a retargeted trajectory
# ---------------------------------------------------------------------------

def _object_q_from_ee(obj: ObjectModel, ee_pos: np.ndarray,
                      ee_ori: float | None, attachment: int,
                      prev_q: np.ndarray) -> np.ndarray:
    """Invert the grasp map: which object configuration puts the attached
    grasp point at the end-effector pose."""
    gp = obj.grasp_points[attachment]
    if obj.kind == PRISMATIC:
        rel = ee_pos - np.asarray(obj.origin) - np.asarray(gp.position)
        q = float(np.dot(np.asarray(obj.axis), rel))
        lo, hi = obj.limits
        return np.array([min(max(q, lo), hi)])
    if obj.kind == REVOLUTE:
        rel = ee_pos - np.asarray(obj.origin)
        base_ang = math.atan2(gp.position[1], gp.position[0])
        q = wrap_angle(math.atan2(rel[1], rel[0]) - base_ang)
        lo, hi = obj.limits
        return np.array([min(max(q, lo), hi)])
    theta = (ee_ori - gp.angle) if ee_ori is not None else float(prev_q[2])
    c, s = math.cos(theta), math.sin(theta)
    offset = np.array([gp.position[0] * c - gp.position[1] * s,
                       gp.position[0] * s + gp.position[1] * c])
    pos = ee_pos - offset
    (xlo, xhi), (ylo, yhi) = obj.limits
    return np.array([min(max(pos[0], xlo), xhi),
                     min(max(pos[1], ylo), yhi), theta])


def replay_retargeted(retargeted: RetargetedTrajectory, task: TaskSpec,
                      arm: ArmModel) -> bool:
    """Drive the object from the retargeted arm motion alone and check task
    success: the end effector (via FK of the output joints) stands in for the
    proxy, and the attached object follows it through the grasp map."""
    obj = task.object
    q = np.array(task.start_q, dtype=float)
    attachment = None
    for row in retargeted.frames:
        ee_pos, ee_ori = forward_kinematics(arm, np.asarray(row["joints"]))
        if row["phase"] == 1:
            if attachment is None:
                attachment = _nearest_grasp(obj, q, ee_pos)
            q = _object_q_from_ee(obj, ee_pos, ee_ori, attachment, q)
    final = WorldState(0, np.zeros(2), np.zeros(2), q,
                       np.zeros_like(q), Phase.INTERACTION, attachment)
    return env2d.is_success(final, task)


def _nearest_grasp(obj: ObjectModel, q: np.ndarray, point: np.ndarray) -> int:
    best, best_d = 0, None
    for i in range(len(obj.grasp_points)):
        gp, _ = grasp_point_world(obj, q, i)
        d = float(np.hypot(*(point - gp)))
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def arm_to_dict(arm: ArmModel) -> dict:
    return {
        "base_position": list(arm.base_position),
        "link_lengths": list(arm.link_lengths),
        "joint_limits": [list(l) for l in arm.joint_limits],
    }


def arm_from_dict(doc: dict) -> ArmModel:
    return ArmModel(
        base_position=tuple(doc["base_position"]),
        link_lengths=tuple(doc["link_lengths"]),
        joint_limits=tuple(tuple(l) for l in doc["joint_limits"]),
    )


def save_trajectory(path, traj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(traj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_trajectory(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def retargeted_to_dict(retargeted: RetargetedTrajectory, arm: ArmModel) -> dict:
    return {
        "task": retargeted.task_name,
        "arm": arm_to_dict(arm),
        "frames": retargeted.frames,
        "events": retargeted.events,
        "phase_markers": retargeted.phase_markers,
    }
