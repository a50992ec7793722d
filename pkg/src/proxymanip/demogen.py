"""Scripted-expert demonstration generator.

Closed-loop experts solve each catalogued task by seeking the grasp point and
then driving the object toward its target. Rollouts are rendered into clips
(optionally without the agent glyph, the masked variant used for
representation pre-training), subsampled, and persisted as PGM frames plus
JSON metadata. Per-clip seeds derive from the master seed by splitmix, so a
dataset regenerates bitwise identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env2d, render
from .env2d import (FREE_BODY, PRISMATIC, REVOLUTE, Phase, ProxyAction,
                    TaskSpec, WorldConfig, WorldState)
from .numcore import ConfigurationError, derive_seed
from .render import AGENT_STYLES, FrameImage, camera_spec

FRAME_SUBSAMPLE = 4
MIN_CLIP_FRAMES = 8
START_JITTER = 0.1
DEFAULT_CAMERA_CYCLE = ("front", "left", "right")


class ExpertFailure(RuntimeError):
    """An expert did not reach success within the horizon; the task or expert
    is misconfigured."""


def goal_marker(task: TaskSpec) -> np.ndarray:
    """World position marking the task target in every rendered frame: the
    primary grasp point at the target configuration."""
    pos, _ = env2d.grasp_point_world(task.object, np.array(task.target_q), 0)
    return pos


def goal_state(task: TaskSpec) -> WorldState:
    """A world state with the object posed at the task target."""
    cfg = task.world_config()
    s = env2d.reset(cfg, task, seed=0)
    s.object_q = np.array(task.target_q, dtype=float)
    return s


# ---------------------------------------------------------------------------
# Scripted experts
# ---------------------------------------------------------------------------

def _nearest_grasp_index(task: TaskSpec, proxy_pos: np.ndarray) -> int:
    best, best_d = 0, None
    for i in range(len(task.object.grasp_points)):
        gp, _ = env2d.grasp_point_world(task.object, np.array(task.start_q), i)
        d = float(np.hypot(*(proxy_pos - gp)))
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def scripted_expert(task: TaskSpec):
    """Closed-loop expert policy for one task.

    Returns ``policy(state) -> ProxyAction``: PD-seek the grasp point during
    exploration, then push the object along its solution direction until the
    success predicate fires.
    """
    obj = task.object
    target = np.array(task.target_q, dtype=float)
    grasp_choice: dict[str, int] = {}

    def policy(state: WorldState) -> ProxyAction:
        if state.phase == Phase.EXPLORATION:
            if "idx" not in grasp_choice:
                grasp_choice["idx"] = _nearest_grasp_index(task, state.proxy_pos)
            gp, _ = env2d.grasp_point_world(obj, state.object_q, grasp_choice["idx"])
            return ProxyAction(tuple(gp), (0.0, 0.0))
        if obj.kind == PRISMATIC:
            err = float(target[0] - state.object_q[0])
            f = np.asarray(obj.axis) * np.clip(8.0 * err, -6.0, 6.0)
        elif obj.kind == REVOLUTE:
            gp, _ = env2d.grasp_point_world(obj, state.object_q, state.attachment)
            r = gp - np.asarray(obj.origin)
            tangent = np.array([-r[1], r[0]]) / max(float(np.hypot(*r)), 1e-9)
            err = float(target[0] - state.object_q[0])
            f = tangent * np.clip(3.0 * err, -5.0, 5.0)
        else:
            pos = state.object_q[:2]
            vel = state.object_qdot[:2]
            f = (12.0 * (target[:2] - pos) - 6.0 * vel
                 - obj.inertia * np.asarray(task.gravity))
            f = np.clip(f, -18.0, 18.0)
        return ProxyAction((0.0, 0.0), (float(f[0]), float(f[1])))

    return policy


@dataclass
class EpisodeRecord:
    states: list[WorldState]        # length T+1, last one is the end state
    actions: np.ndarray             # (T, 4): a_p then a_f, inactive head zero
    success: bool


def run_expert_episode(task: TaskSpec, config: WorldConfig, seed: int,
                       noise_scale: float = 0.0) -> EpisodeRecord:
    """Roll one expert episode; raises ExpertFailure if the horizon runs out."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 1)))
    policy = scripted_expert(task)
    state = env2d.reset(config, task, seed)
    states = [state]
    actions = []
    for _ in range(config.episode_horizon):
        act = policy(state)
        a_p = np.asarray(act.desired_pos, dtype=float)
        a_f = np.asarray(act.force, dtype=float)
        if noise_scale > 0.0:
            a_p = a_p + rng.normal(0.0, noise_scale * config.arena_half, 2)
            a_f = a_f + rng.normal(0.0, noise_scale * config.force_max, 2)
        if state.phase == Phase.EXPLORATION:
            recorded = np.array([a_p[0], a_p[1], 0.0, 0.0])
        else:
            recorded = np.array([0.0, 0.0, a_f[0], a_f[1]])
        state, _ = env2d.step(state, ProxyAction(tuple(a_p), tuple(a_f)),
                              config, task)
        states.append(state)
        actions.append(recorded)
        if env2d.is_success(state, task):
            return EpisodeRecord(states, np.array(actions), True)
    raise ExpertFailure(
        f"expert for {task.name!r} missed success in {config.episode_horizon} steps "
        f"(final q={states[-1].object_q})")


# ---------------------------------------------------------------------------
# Clips and datasets
# ---------------------------------------------------------------------------

@dataclass
class Clip:
    clip_id: str
    task_name: str
    camera_id: str
    frames: list[FrameImage]
    states: list[dict]              # per-frame summaries, includes the obs vector
    actions: np.ndarray             # (n_c, 4); last row is zero padding
    success: bool

    @property
    def n_c(self) -> int:
        return len(self.frames)


@dataclass
class DemoDataset:
    clips: list[Clip]
    style: str
    seed: int
    index: dict[str, list[int]]     # task name -> clip positions

    @property
    def N(self) -> int:
        return len(self.clips)


def _state_summary(state: WorldState, obj: env2d.ObjectModel) -> dict:
    return {
        "time_step": state.time_step,
        "proxy_pos": [float(v) for v in state.proxy_pos],
        "proxy_vel": [float(v) for v in state.proxy_vel],
        "object_q": [float(v) for v in state.object_q],
        "object_qdot": [float(v) for v in state.object_qdot],
        "phase": int(state.phase),
        "attachment": state.attachment,
        "obs": [float(v) for v in env2d.observe(state, obj)],
    }


def episode_to_clip(task: TaskSpec, record: EpisodeRecord, clip_id: str,
                    camera_id: str, style: str,
                    subsample: int = FRAME_SUBSAMPLE) -> Clip:
    """Render an episode into a clip, keeping every ``subsample``-th frame and
    always the final (success) frame."""
    keep = list(range(0, len(record.states), subsample))
    if keep[-1] != len(record.states) - 1:
        keep.append(len(record.states) - 1)
    if len(keep) < MIN_CLIP_FRAMES:
        raise ConfigurationError(
            f"clip {clip_id} would have {len(keep)} frames; "
            f"expert episodes must yield at least {MIN_CLIP_FRAMES}")
    spec = camera_spec(camera_id)
    marker = goal_marker(task)
    frames, summaries, acts = [], [], []
    for t in keep:
        st = record.states[t]
        frames.append(render.render(st, task.object, spec, style,
                                    marker_pos=marker))
        summaries.append(_state_summary(st, task.object))
        if t < len(record.actions):
            acts.append(record.actions[t])
        else:
            acts.append(np.zeros(4))
    return Clip(clip_id, task.name, camera_id, frames, summaries,
                np.array(acts), record.success)


def generate_dataset(tasks: list[TaskSpec], clips_per_task: int,
                     noise_scale: float, style: str, seed: int,
                     cameras: tuple[str, ...] = DEFAULT_CAMERA_CYCLE,
                     start_jitter: float = START_JITTER,
                     out_dir: str | Path | None = None) -> DemoDataset:
    """Expert clips for every task, with seeded action noise and jittered
    start poses. Deterministic for a fixed seed; optionally persisted."""
    if style not in AGENT_STYLES:
        raise ConfigurationError(f"unknown agent style {style!r}")
    if clips_per_task < 1:
        raise ConfigurationError("clips_per_task must be >= 1")
    clips: list[Clip] = []
    index: dict[str, list[int]] = {}
    for ti, task in enumerate(tasks):
        cfg = task.world_config(start_jitter=start_jitter)
        for ci in range(clips_per_task):
            clip_seed = derive_seed(seed, ti, ci)
            record = run_expert_episode(task, cfg, clip_seed, noise_scale)
            clip_id = f"{task.name}_{ci:04d}"
            camera_id = cameras[ci % len(cameras)]
            clip = episode_to_clip(task, record, clip_id, camera_id, style)
            index.setdefault(task.name, []).append(len(clips))
            clips.append(clip)
    dataset = DemoDataset(clips, style, seed, index)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    return dataset


def save_dataset(dataset: DemoDataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "style": dataset.style,
        "seed": dataset.seed,
        "tasks": sorted(dataset.index),
        "clip_ids": [c.clip_id for c in dataset.clips],
    }
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for clip in dataset.clips:
        cdir = root / f"clip_{clip.clip_id}"
        cdir.mkdir(exist_ok=True)
        cmeta = {
            "task": clip.task_name,
            "camera": clip.camera_id,
            "n_c": clip.n_c,
            "success": clip.success,
            "states": clip.states,
            "actions": [[float(v) for v in row] for row in clip.actions],
        }
        with open(cdir / "meta.json", "w") as fh:
            json.dump(cmeta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for i, frame in enumerate(clip.frames):
            render.write_pgm(cdir / render.frame_filename(i), frame.pixels)


def load_dataset(root: str | Path) -> DemoDataset:
    root = Path(root)
    with open(root / "meta.json") as fh:
        meta = json.load(fh)
    clips: list[Clip] = []
    index: dict[str, list[int]] = {}
    for clip_id in meta["clip_ids"]:
        cdir = root / f"clip_{clip_id}"
        with open(cdir / "meta.json") as fh:
            cmeta = json.load(fh)
        spec = camera_spec(cmeta["camera"])
        frames = [FrameImage(spec, render.read_pgm(cdir / render.frame_filename(i)))
                  for i in range(cmeta["n_c"])]
        clip = Clip(clip_id, cmeta["task"], cmeta["camera"], frames,
                    cmeta["states"], np.array(cmeta["actions"]), cmeta["success"])
        index.setdefault(clip.task_name, []).append(len(clips))
        clips.append(clip)
    return DemoDataset(clips, meta["style"], meta["seed"], index)


# ---------------------------------------------------------------------------
# Time-contrastive sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TcnSample:
    clip_index: int
    i: int
    j: int
    k: int
    neg_clip_index: int
    l: int


def sample_tcn_batch(dataset: DemoDataset, batch_size: int,
                     seed: int) -> list[TcnSample]:
    """Temporally ordered triplets plus one cross-clip negative per element.

    The anchor clip is drawn uniformly among clips with at least 3 frames;
    i < j < k are distinct frame indices of that clip; the negative frame
    comes from a uniformly chosen different clip.
    """
    if dataset.N < 2:
        raise ConfigurationError("need at least two clips for negatives")
    eligible = [ci for ci, c in enumerate(dataset.clips) if c.n_c >= 3]
    if not eligible:
        raise ConfigurationError("no clip has 3 or more frames")
    rng = np.random.Generator(np.random.PCG64(seed))
    batch = []
    for _ in range(batch_size):
        ci = eligible[int(rng.integers(len(eligible)))]
        clip = dataset.clips[ci]
        i, j, k = sorted(int(v) for v in
                         rng.choice(clip.n_c, size=3, replace=False))
        while True:
            ni = int(rng.integers(dataset.N))
            if ni != ci:
                break
        l = int(rng.integers(dataset.clips[ni].n_c))
        batch.append(TcnSample(ci, i, j, k, ni, l))
    return batch
