"""Synthetic sensors driven by a posed body model.

A virtual depth camera (pinhole, z-buffer rasterized) yields dense point
clouds and, by keeping every ``stride``-th row and column, LiDAR-like
sparse scans. Virtual IMUs attached to mesh vertices report kinematic
acceleration (no gravity term) and the global orientation of the joint
that dominates the vertex's skinning weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import body
from .body import MotionSequence
from .exceptions import EmptyObservationError, InvalidArgumentError, LoadError

MODALITIES = ("depth_pc", "lidar", "imu")


@dataclass
class Camera:
    """Pinhole camera. ``rotation`` maps camera axes to world (columns are x right, y down, z forward)."""

    rotation: np.ndarray
    position: np.ndarray
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        R = self.rotation
        if not (np.allclose(R.T @ R, np.eye(3), atol=1e-6) and abs(np.linalg.det(R) - 1) < 1e-6):
            raise InvalidArgumentError("camera rotation must be a proper rotation matrix")

    def to_camera(self, pts):
        return (np.asarray(pts) - self.position) @ self.rotation

    def to_world(self, pts_cam):
        return pts_cam @ self.rotation.T + self.position

    def project(self, pts_cam):
        """Camera-frame points -> (u, v) pixel coordinates (column, row)."""
        z = pts_cam[..., 2]
        return np.stack([self.fx * pts_cam[..., 0] / z + self.cx,
                         self.fy * pts_cam[..., 1] / z + self.cy], -1)

    def backproject(self, rows, cols, depth):
        x = (cols - self.cx) * depth / self.fx
        y = (rows - self.cy) * depth / self.fy
        return self.to_world(np.stack([x, y, depth], -1))

    def to_dict(self):
        d = asdict(self)
        d["rotation"] = self.rotation.tolist()
        d["position"] = self.position.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def look_at(position, target, up=(0.0, 1.0, 0.0), **intrinsics):
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Camera(np.stack([x, y, z], axis=1), position, **intrinsics)


@dataclass
class SensorConfig:
    width: int = 640
    height: int = 480
    focal: float = 525.0
    camera_radius: float = 3.0
    camera_height: float = 1.2
    near: float = 0.05
    depth_points: int = 1024
    lidar_points: int = 256
    lidar_stride: int = 5
    imu_root_relative: bool = False


def mid_root(seq, model=None):
    """Root position at the middle frame (frame ceil(T/2) counting from one)."""
    t = math.ceil(len(seq) / 2) - 1
    if model is None:
        return seq.transl[t].copy()
    joints, _ = body.pose_joints(model, seq.frame(t))
    return joints[0]


def sample_camera(seq, rng, model=None, config=None):
    """Camera on a circle around the mid-sequence root, at a random azimuth, facing it."""
    if len(seq) == 0:
        raise InvalidArgumentError("cannot place a camera for an empty sequence")
    config = config or SensorConfig()
    target = mid_root(seq, model)
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    position = np.array([target[0] + config.camera_radius * math.sin(azimuth),
                         config.camera_height,
                         target[2] + config.camera_radius * math.cos(azimuth)])
    return look_at(position, target, fx=config.focal, fy=config.focal,
                   cx=(config.width - 1) / 2, cy=(config.height - 1) / 2,
                   width=config.width, height=config.height)


@dataclass
class DepthImage:
    depth: np.ndarray  # (H, W), 0 where nothing was hit
    camera: Camera

    @property
    def hits(self):
        return self.depth > 0


def render_depth(vertices, faces, camera, near=0.05):
    """Z-buffer rasterization of a triangle mesh; depth is the camera-frame z."""
    H, W = camera.height, camera.width
    zbuf = np.full((H, W), np.inf)
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    if len(vertices) and len(faces):
        vc = camera.to_camera(vertices)
        uv = camera.project(vc)
        tri_z = vc[faces, 2]
        keep = (tri_z > near).all(1)
        tri_uv = uv[faces[keep]]
        tri_iz = 1.0 / tri_z[keep]
        lo = np.floor(tri_uv.min(1)).astype(np.int64) + 1
        hi = np.floor(tri_uv.max(1)).astype(np.int64)
        lo = np.maximum(lo - 1, 0)
        hi = np.minimum(hi, [W - 1, H - 1])
        visible = (lo <= hi).all(1)
        for (p0, p1, p2), iz, (u0, v0), (u1, v1) in zip(
                tri_uv[visible], tri_iz[visible], lo[visible], hi[visible]):
            area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
            if abs(area) < 1e-12:
                continue
            us = np.arange(u0, u1 + 1, dtype=np.float64)
            vs = np.arange(v0, v1 + 1, dtype=np.float64)[:, None]
            w0 = ((p1[0] - us) * (p2[1] - vs) - (p1[1] - vs) * (p2[0] - us)) / area
            w1 = ((p2[0] - us) * (p0[1] - vs) - (p2[1] - vs) * (p0[0] - us)) / area
            w2 = 1.0 - w0 - w1
            inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
            if not inside.any():
                continue
            # Perspective-correct depth: interpolate 1/z in screen space.
            z = 1.0 / (w0 * iz[0] + w1 * iz[1] + w2 * iz[2])
            block = zbuf[v0:v1 + 1, u0:u1 + 1]
            np.copyto(block, np.minimum(block, z), where=inside)
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return DepthImage(depth, camera)


@dataclass
class PointCloudFrame:
    points: np.ndarray  # (P, 3) world coordinates
    pixels: np.ndarray = None  # (P, 2) source (row, col)


def _sample_hits(img, rows, cols, n, rng):
    if len(rows) == 0:
        raise EmptyObservationError("depth image has no valid pixels")
    idx = rng.choice(len(rows), size=n, replace=len(rows) < n)
    r, c = rows[idx], cols[idx]
    pts = img.camera.backproject(r.astype(np.float64), c.astype(np.float64), img.depth[r, c])
    return PointCloudFrame(pts, np.stack([r, c], -1))


def candidate_pixels(img, stride=1):
    rows, cols = np.nonzero(img.hits)
    if stride > 1:
        keep = (rows % stride == 0) & (cols % stride == 0)
        rows, cols = rows[keep], cols[keep]
    return rows, cols


def depth_to_pointcloud(img, n=1024, rng=None):
    """Back-project hit pixels and draw ``n`` of them (with replacement only if fewer hits)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows, cols = candidate_pixels(img)
    return _sample_hits(img, rows, cols, n, rng)


def lidar_sparsify(img, stride=5, n=256, rng=None):
    """Keep pixels on every ``stride``-th row and column, then sample ``n`` points."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows, cols = candidate_pixels(img, stride)
    return _sample_hits(img, rows, cols, n, rng)


@dataclass
class ImuFrame:
    acc: np.ndarray  # (S, 3) m/s^2
    ori: np.ndarray  # (S, 3, 3) global orientation


def finite_difference_acceleration(pos, fps):
    """Second differences along axis 0 scaled by fps^2, one-sided at the ends."""
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape[0] < 3:
        raise InvalidArgumentError("acceleration needs at least three frames")
    acc = np.empty_like(pos)
    acc[1:-1] = pos[2:] - 2 * pos[1:-1] + pos[:-2]
    acc[0] = pos[2] - 2 * pos[1] + pos[0]
    acc[-1] = pos[-1] - 2 * pos[-2] + pos[-3]
    return acc * fps ** 2


def simulate_imu(seq, model, vertex_ids=None, root_relative=False):
    """Accelerations (T, S, 3) and orientations (T, S, 3, 3) of virtual IMUs."""
    if len(seq) < 3:
        raise InvalidArgumentError("IMU simulation needs at least three frames")
    vertex_ids = tuple(vertex_ids or model.imu_vertices)
    if not vertex_ids or max(vertex_ids) >= model.n_vertices:
        raise InvalidArgumentError(f"IMU vertex ids {vertex_ids} are invalid for this body model")
    R = body.sequence_rotmats(seq)
    with torch.no_grad():
        verts, _ = body.skin(model, R, seq.transl, seq.beta, return_joints=True)
        _, grots = body.forward_kinematics(model, R, seq.transl, seq.beta)
    pos = verts.numpy()[:, list(vertex_ids)]
    acc = finite_difference_acceleration(pos, seq.fps)
    dominant = model.skin_weights[list(vertex_ids)].argmax(1)
    ori = grots.numpy()[:, dominant]
    if root_relative:
        root_ori = ori[:, -1:]
        acc = np.einsum("tsba,tsb->tsa", np.broadcast_to(root_ori, ori.shape), acc - acc[:, -1:])
        ori = np.swapaxes(root_ori, -1, -2) @ ori
    return acc, ori


@dataclass
class SensorClip:
    """One modality's observation sequence paired with its source motion.

    ``points`` is (T, P, 3) for point-cloud modalities; ``acc`` (T, 6, 3)
    and ``ori`` (T, 6, 3, 3) for IMU. ``flags`` marks frames that had no
    valid observation and were filled from the nearest valid frame.
    """

    modality: str
    source: MotionSequence
    seed: int = 0
    points: np.ndarray = None
    acc: np.ndarray = None
    ori: np.ndarray = None
    camera: Camera = None
    flags: np.ndarray = None
    clip_id: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        arr = self.points if self.points is not None else self.acc
        return arr.shape[0]

    @property
    def frames(self):
        if self.modality == "imu":
            return [ImuFrame(a, o) for a, o in zip(self.acc, self.ori)]
        return [PointCloudFrame(p) for p in self.points]

    def imu_features(self):
        """(T, 72): per sensor acceleration followed by the flattened orientation."""
        T, S = self.acc.shape[:2]
        return np.concatenate([self.acc, self.ori.reshape(T, S, 9)], -1).reshape(T, S * 12)

    def save(self, path, header=None):
        arrays = {"theta": self.source.theta, "transl": self.source.transl, "beta": self.source.beta}
        for key in ("points", "acc", "ori"):
            if getattr(self, key) is not None:
                arrays[key] = getattr(self, key)
        arrays = {k: np.asarray(v, dtype="<f4") for k, v in arrays.items()}
        arrays["flags"] = np.asarray(self.flags if self.flags is not None else np.zeros(len(self), bool),
                                     dtype="|u1")
        meta = {"modality": self.modality, "seed": self.seed, "clip_id": self.clip_id,
                "source_id": self.source.source_id, "fps": self.source.fps,
                "camera": self.camera.to_dict() if self.camera else None, **self.meta}
        if header:
            meta["provenance"] = header
        np.savez(path, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with np.load(path) as npz:
                meta = json.loads(str(npz["meta"]))
                arr = {k: npz[k] for k in npz.files if k != "meta"}
        except Exception as exc:
            raise LoadError(f"cannot read clip {path}: {exc}") from exc
        source = MotionSequence(arr["theta"].astype(np.float64), arr["transl"].astype(np.float64),
                                arr["beta"].astype(np.float64), meta["fps"], meta["source_id"])
        camera = Camera.from_dict(meta["camera"]) if meta.get("camera") else None
        extra = {k: v for k, v in meta.items()
                 if k not in ("modality", "seed", "clip_id", "source_id", "fps", "camera")}
        return cls(meta["modality"], source, meta["seed"],
                   arr.get("points", None), arr.get("acc", None), arr.get("ori", None),
                   camera, arr["flags"].astype(bool), meta["clip_id"], extra)


def _fill_invalid(frames, flags):
    valid = np.flatnonzero(~flags)
    if len(valid) == 0:
        raise EmptyObservationError("no frame of the clip produced a valid observation")
    for t in np.flatnonzero(flags):
        frames[t] = frames[valid[np.abs(valid - t).argmin()]]
    return frames


def generate_clip(seq, modality, model, config=None, seed=0, clip_id=""):
    """Deterministic synthetic observation of ``seq`` for one modality."""
    if modality not in MODALITIES:
        raise InvalidArgumentError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    config = config or SensorConfig()
    rng = np.random.default_rng(seed)
    if modality == "imu":
        acc, ori = simulate_imu(seq, model, root_relative=config.imu_root_relative)
        return SensorClip("imu", seq, seed, acc=acc, ori=ori, flags=np.zeros(len(seq), bool),
                          clip_id=clip_id)
    camera = sample_camera(seq, rng, model, config)
    verts = body.sequence_vertices(model, seq)
    n = config.depth_points if modality == "depth_pc" else config.lidar_points
    frames, flags = [], np.zeros(len(seq), bool)
    for t in range(len(seq)):
        img = render_depth(verts[t], model.faces, camera, config.near)
        try:
            if modality == "depth_pc":
                pc = depth_to_pointcloud(img, n, rng)
            else:
                pc = lidar_sparsify(img, config.lidar_stride, n, rng)
            frames.append(pc.points)
        except EmptyObservationError:
            flags[t] = True
            frames.append(None)
    frames = _fill_invalid(frames, flags)
    return SensorClip(modality, seq, seed, points=np.stack(frames), camera=camera, flags=flags,
                      clip_id=clip_id)
