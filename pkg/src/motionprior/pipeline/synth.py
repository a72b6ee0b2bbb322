"""Procedural motion clips for the toy humanoid.

Stands in for a licensed motion-capture corpus. Clips are periodic
full-body motions (walking, running, turning, waving, squatting, jumping
jacks) with randomized timing, amplitude, heading and body shape. Frames
follow the SMPL joint order and the +y up, +z forward convention of the
toy model.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import rotconv
from ..body import SMPL_JOINT_NAMES, MotionSequence

MOTION_KINDS = ("walk", "run", "turn", "wave", "squat", "jacks")
PELVIS_HEIGHT = 0.93

_J = {name: i for i, name in enumerate(SMPL_JOINT_NAMES)}


def _Rx(a):
    return _stack_rot(a, "x")


def _Ry(a):
    return _stack_rot(a, "y")


def _Rz(a):
    return _stack_rot(a, "z")


def _stack_rot(a, axis):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    if axis == "x":
        rows = [[i, o, o], [o, c, -s], [o, s, c]]
    elif axis == "y":
        rows = [[c, o, s], [o, i, o], [-s, o, c]]
    else:
        rows = [[c, -s, o], [s, c, o], [o, o, i]]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def synth_motion(kind, duration, fps, rng, n_joints=24, n_betas=10, source_id=""):
    """One procedural clip of ``duration`` seconds sampled at ``fps``."""
    T = int(round(duration * fps))
    t = np.arange(T) / fps
    R = np.broadcast_to(np.eye(3), (T, 24, 3, 3)).copy()
    freq = rng.uniform(0.7, 1.1)
    phase = rng.uniform(0, 2 * np.pi)
    w = 2 * np.pi * freq * t + phase
    heading0 = rng.uniform(0, 2 * np.pi)
    heading = np.full(T, heading0)
    speed = 0.0
    height = np.full(T, PELVIS_HEIGHT)
    shoulder_drop = rng.uniform(1.1, 1.35)
    lsh = _Rz(np.full(T, -shoulder_drop))
    rsh = _Rz(np.full(T, shoulder_drop))
    lel = rel = np.broadcast_to(np.eye(3), (T, 3, 3))

    if kind in ("walk", "run", "turn"):
        run = kind == "run"
        amp = rng.uniform(0.35, 0.5) * (1.4 if run else 1.0)
        speed = rng.uniform(0.9, 1.4) * (2.0 if run else 1.0)
        if run:
            w = 2 * np.pi * (freq * 1.4) * t + phase
        if kind == "turn":
            heading = heading0 + rng.choice([-1, 1]) * rng.uniform(0.3, 0.8) * t
        hip_l, hip_r = -amp * np.sin(w), amp * np.sin(w)
        knee_amp = amp * (1.8 if run else 1.3)
        knee_l = knee_amp * np.clip(np.sin(w - 1.2), 0, None)
        knee_r = knee_amp * np.clip(np.sin(w + np.pi - 1.2), 0, None)
        R[:, _J["left_hip"]] = _Rx(hip_l)
        R[:, _J["right_hip"]] = _Rx(hip_r)
        R[:, _J["left_knee"]] = _Rx(knee_l)
        R[:, _J["right_knee"]] = _Rx(knee_r)
        R[:, _J["left_ankle"]] = _Rx(-0.3 * amp * np.sin(w + 0.5))
        R[:, _J["right_ankle"]] = _Rx(0.3 * amp * np.sin(w + 0.5))
        arm = 0.8 * amp
        lsh = _Rx(arm * np.sin(w)) @ lsh
        rsh = _Rx(-arm * np.sin(w)) @ rsh
        bend = rng.uniform(0.2, 0.5) * (2.5 if run else 1.0)
        lel = _Ry(-(bend + 0.2 * np.sin(w)))
        rel = _Ry(bend - 0.2 * np.sin(w))
        R[:, _J["spine1"]] = _Ry(0.1 * np.sin(w)) @ _Rx(np.full(T, 0.15 if run else 0.03))
        height = PELVIS_HEIGHT - 0.02 + 0.025 * np.cos(2 * w) * (1.5 if run else 1.0)
    elif kind == "wave":
        side = rng.choice([-1, 1])
        raise_angle = rng.uniform(0.3, 0.9)
        wave = 0.5 * np.sin(2 * np.pi * freq * 1.5 * t + phase)
        up = _Rz(np.full(T, side * raise_angle))
        el = _Ry(np.full(T, side * 1.2)) @ _Rz(side * (0.6 + wave))
        if side > 0:
            lsh, lel = up, el
        else:
            rsh, rel = up, el
        R[:, _J["spine2"]] = _Rz(0.08 * np.sin(w))
        R[:, _J["neck"]] = _Ry(0.2 * np.sin(0.5 * w))
    elif kind == "squat":
        depth = rng.uniform(0.6, 1.2)
        s = 0.5 * depth * (1 - np.cos(w))
        R[:, _J["left_hip"]] = _Rx(-s)
        R[:, _J["right_hip"]] = _Rx(-s)
        R[:, _J["left_knee"]] = _Rx(2 * s)
        R[:, _J["right_knee"]] = _Rx(2 * s)
        R[:, _J["left_ankle"]] = _Rx(-s)
        R[:, _J["right_ankle"]] = _Rx(-s)
        R[:, _J["spine1"]] = _Rx(0.4 * s)
        lsh = _Rx(-0.8 * s) @ lsh
        rsh = _Rx(-0.8 * s) @ rsh
        height = PELVIS_HEIGHT - 0.43 * (1 - np.cos(s))
    elif kind == "jacks":
        s = 0.5 * (1 - np.cos(w))
        R[:, _J["left_hip"]] = _Rz(0.35 * s)
        R[:, _J["right_hip"]] = _Rz(-0.35 * s)
        lsh = _Rz(np.full(T, -shoulder_drop) + 2.2 * s)
        rsh = _Rz(np.full(T, shoulder_drop) - 2.2 * s)
        height = PELVIS_HEIGHT + 0.08 * np.sin(np.pi * s)
    else:
        raise ValueError(f"unknown motion kind {kind!r}")

    R[:, _J["left_shoulder"]] = lsh
    R[:, _J["right_shoulder"]] = rsh
    R[:, _J["left_elbow"]] = lel
    R[:, _J["right_elbow"]] = rel
    # Small idiosyncratic sway on the remaining joints.
    for name in ("spine2", "spine3", "neck", "head", "left_collar", "right_collar",
                 "left_wrist", "right_wrist"):
        a = rng.uniform(0.02, 0.08)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        osc = a * np.sin(w * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))
        R[:, _J[name]] = rotconv.aa_to_matrix(osc[:, None] * axis) @ R[:, _J[name]]

    R[:, 0] = _Ry(heading) @ _Ry(0.05 * np.sin(w))
    if speed:
        step = speed / fps
        dirs = np.stack([np.sin(heading), np.zeros(T), np.cos(heading)], -1)
        pos = np.concatenate([np.zeros((1, 3)), np.cumsum(dirs[:-1] * step, 0)])
    else:
        pos = np.zeros((T, 3))
    start = np.array([rng.uniform(-1, 1), 0.0, rng.uniform(-1, 1)])
    transl = pos + start
    transl[:, 1] = height
    theta = rotconv.matrix_to_aa(R[:, :n_joints])
    beta = np.clip(rng.normal(0.0, 0.8, n_betas), -2.0, 2.0)
    return MotionSequence(theta, transl, beta, fps, source_id or kind)


def synth_dataset(n, window=40, fps=10.0, seed=0, kinds=MOTION_KINDS, n_joints=24):
    """``n`` clips of exactly ``window`` frames, cycling through ``kinds``."""
    rng = np.random.default_rng(seed)
    return [synth_motion(kinds[i % len(kinds)], window / fps, fps, rng, n_joints,
                         source_id=f"{kinds[i % len(kinds)]}_{i:04d}") for i in range(n)]


def write_source_corpus(root, n_per_subset=12, subsets=("toyA", "toyB", "toyC"), seed=0,
                        native_fps=(30, 60, 120, 25), duration=(3.0, 14.0)):
    """Write an AMASS-style corpus of ``.npz`` files, one directory per subset.

    Each file holds ``poses`` (T, 72), ``trans`` (T, 3), ``betas`` (10,) and
    ``mocap_framerate``.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    paths = []
    for subset in subsets:
        (root / subset).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_subset):
            kind = MOTION_KINDS[int(rng.integers(len(MOTION_KINDS)))]
            fps = float(native_fps[int(rng.integers(len(native_fps)))])
            seq = synth_motion(kind, float(rng.uniform(*duration)), fps, rng,
                               source_id=f"{subset}/{kind}_{i:03d}")
            path = root / subset / f"{kind}_{i:03d}.npz"
            np.savez(path, poses=seq.theta.reshape(len(seq), -1), trans=seq.transl,
                     betas=seq.beta, mocap_framerate=np.array(fps))
            paths.append(path)
    return paths
