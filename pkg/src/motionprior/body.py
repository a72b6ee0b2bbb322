"""Skinned parametric body model.

Shape blending, forward kinematics and linear blend skinning with the
shape -> regress -> pose ordering used by SMPL. No pose-corrective
blendshapes. A small deterministic humanoid (``make_toy_model``) that
follows SMPL's 24-joint kinematic tree lets everything run without
licensed assets.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rotconv
from .exceptions import InvalidArgumentError, LoadError

logger = logging.getLogger(__name__)

SMPL_JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Sensor sites on the SMPL mesh: left arm, right arm, left leg, right leg, head, root.
SMPL_IMU_VERTICES = (1962, 5431, 1096, 4583, 412, 3021)
IMU_SITE_NAMES = ("left_arm", "right_arm", "left_leg", "right_leg", "head", "root")

# Rest joint positions of the toy humanoid (meters, y up, +x to the body's left).
_TOY_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00], [0.09, -0.08, 0.00], [-0.09, -0.08, 0.00], [0.00, 0.11, -0.01],
    [0.10, -0.46, 0.01], [-0.10, -0.46, 0.01], [0.00, 0.25, 0.01], [0.10, -0.86, -0.02],
    [-0.10, -0.86, -0.02], [0.00, 0.31, 0.02], [0.12, -0.92, 0.11], [-0.12, -0.92, 0.11],
    [0.00, 0.51, -0.02], [0.08, 0.42, -0.01], [-0.08, 0.42, -0.01], [0.00, 0.60, 0.03],
    [0.18, 0.44, -0.02], [-0.18, 0.44, -0.02], [0.44, 0.44, -0.03], [-0.44, 0.44, -0.03],
    [0.69, 0.44, -0.02], [-0.69, 0.44, -0.02], [0.78, 0.44, -0.02], [-0.78, 0.44, -0.02],
])
# Tube radius of the segment ending at each joint (segment parent -> joint).
_TOY_RADII = np.array([
    0.10, 0.09, 0.09, 0.12, 0.065, 0.065, 0.12, 0.045, 0.045, 0.13, 0.04, 0.04,
    0.05, 0.06, 0.06, 0.05, 0.055, 0.055, 0.045, 0.045, 0.035, 0.035, 0.03, 0.03,
])
# Leaf extensions: joint -> (direction, length, radius).
_TOY_LEAF_EXT = {
    15: ((0.0, 1.0, 0.0), 0.20, 0.09),
    10: ((0.0, -0.04, 1.0), 0.08, 0.035),
    11: ((0.0, -0.04, 1.0), 0.08, 0.035),
    22: ((1.0, 0.0, 0.0), 0.09, 0.03),
    23: ((-1.0, 0.0, 0.0), 0.09, 0.03),
}
# Toy stand-ins for the SMPL sensor sites: (segment end joint, ring, around).
_TOY_IMU_SITES = ((20, 1, 0), (21, 1, 0), (7, 1, 0), (8, 1, 0), ("head", 1, 0), (3, 0, 4))


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Template mesh plus the linear maps that pose and shape it.

    Attributes
    ----------
    template_vertices : (N, 3) rest vertices in meters.
    faces : (F, 3) triangle vertex indices.
    shape_basis : (N, 3, B) displacement per unit shape coefficient.
    joint_regressor : (J, N) with rows summing to one.
    skin_weights : (N, J) nonnegative, rows summing to one.
    parents : (J,) parent index per joint, -1 for the root.
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    joint_regressor: np.ndarray
    skin_weights: np.ndarray
    parents: np.ndarray
    joint_names: tuple = ()
    imu_vertices: tuple = SMPL_IMU_VERTICES
    name: str = "body"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for attr in ("template_vertices", "faces", "shape_basis", "joint_regressor",
                     "skin_weights", "parents"):
            arr = np.array(getattr(self, attr), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        validate_model(self)

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.parents.shape[0]

    @property
    def n_betas(self):
        return self.shape_basis.shape[2]

    def tensors(self, dtype=torch.float32):
        """Torch views of the arrays, cached per dtype."""
        if dtype not in self._cache:
            self._cache[dtype] = {
                "template": torch.tensor(self.template_vertices, dtype=dtype),
                "shapedirs": torch.tensor(self.shape_basis, dtype=dtype),
                "regressor": torch.tensor(self.joint_regressor, dtype=dtype),
                "weights": torch.tensor(self.skin_weights, dtype=dtype),
            }
        return self._cache[dtype]

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.template_vertices, self.faces, self.shape_basis,
                    self.joint_regressor, self.skin_weights, self.parents):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def validate_model(model):
    J, N = model.joint_regressor.shape
    if model.template_vertices.shape != (N, 3):
        raise InvalidArgumentError("template_vertices must be (N, 3) matching the regressor")
    if model.shape_basis.ndim != 3 or model.shape_basis.shape[:2] != (N, 3):
        raise InvalidArgumentError("shape_basis must be (N, 3, B)")
    if model.skin_weights.shape != (N, J):
        raise InvalidArgumentError("skin_weights must be (N, J)")
    if model.parents.shape != (J,):
        raise InvalidArgumentError("parents must have one entry per joint")
    if not np.allclose(model.joint_regressor.sum(1), 1.0, atol=1e-6):
        raise InvalidArgumentError("joint_regressor rows must sum to 1")
    if (model.skin_weights < 0).any() or not np.allclose(model.skin_weights.sum(1), 1.0, atol=1e-6):
        raise InvalidArgumentError("skin_weights rows must be nonnegative and sum to 1")
    parents = model.parents
    if parents[0] != -1 or (parents[1:] < 0).any():
        raise InvalidArgumentError("parents must form a single-rooted tree with joint 0 as root")
    if (parents[1:] >= np.arange(1, J)).any():
        raise InvalidArgumentError("parents must precede children (acyclic tree)")


@dataclass
class PoseState:
    theta: np.ndarray  # (J, 3) local axis-angle, joint 0 is the global orientation
    x: np.ndarray  # (3,) root translation
    beta: np.ndarray  # (B,)


@dataclass
class MotionSequence:
    """A motion clip: per-frame local joint rotations, root translation and one shape."""

    theta: np.ndarray  # (T, J, 3) axis-angle
    transl: np.ndarray  # (T, 3)
    beta: np.ndarray  # (B,)
    fps: float = 10.0
    source_id: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.transl = np.asarray(self.transl, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.theta.ndim != 3 or self.theta.shape[2] != 3:
            raise InvalidArgumentError("theta must be (T, J, 3)")
        if self.transl.shape != (self.theta.shape[0], 3):
            raise InvalidArgumentError("transl must be (T, 3) with the same T as theta")
        if self.beta.ndim != 1:
            raise InvalidArgumentError("beta must be a vector shared by all frames")

    def __len__(self):
        return self.theta.shape[0]

    @property
    def n_joints(self):
        return self.theta.shape[1]

    def frame(self, t):
        return PoseState(self.theta[t], self.transl[t], self.beta)

    def slice(self, start, stop):
        return MotionSequence(self.theta[start:stop], self.transl[start:stop], self.beta,
                              self.fps, self.source_id)

    @classmethod
    def from_frames(cls, frames, fps=10.0, source_id=""):
        beta = np.asarray(frames[0].beta)
        for f in frames:
            if not np.array_equal(np.asarray(f.beta), beta):
                raise InvalidArgumentError("all frames of a sequence must share beta")
        return cls(np.stack([f.theta for f in frames]), np.stack([f.x for f in frames]),
                   beta, fps, source_id)


def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def shape_blend(model, beta):
    """Rest vertices for shape ``beta`` (..., B) -> (..., N, 3)."""
    dtype = beta.dtype if isinstance(beta, torch.Tensor) else torch.float64
    beta = _as_tensor(beta, dtype)
    if beta.shape[-1] != model.n_betas:
        raise InvalidArgumentError(f"beta has length {beta.shape[-1]}, model expects {model.n_betas}")
    t = model.tensors(dtype)
    return t["template"] + torch.einsum("...b,nkb->...nk", beta, t["shapedirs"])


def rest_joints(model, beta):
    t = model.tensors(beta.dtype)
    return torch.einsum("jn,...nk->...jk", t["regressor"], shape_blend(model, beta))


def _global_transforms(model, rotmats, transl, joints_rest):
    """Compose per-joint global rotations and positions along the kinematic tree."""
    parents = model.parents
    rots = [rotmats[..., 0, :, :]]
    pos = [joints_rest[..., 0, :] + transl]
    for j in range(1, model.n_joints):
        p = parents[j]
        offset = joints_rest[..., j, :] - joints_rest[..., p, :]
        rots.append(rots[p] @ rotmats[..., j, :, :])
        pos.append(pos[p] + (rots[p] @ offset[..., None])[..., 0])
    return torch.stack(rots, -3), torch.stack(pos, -2)


def forward_kinematics(model, rotmats, transl, beta):
    """Posed joints and global joint rotations.

    Parameters
    ----------
    rotmats : (..., J, 3, 3) local joint rotations.
    transl : (..., 3) root translation.
    beta : (..., B) shape coefficients, broadcast against the leading dims.

    Returns
    -------
    joints : (..., J, 3)
    global_rots : (..., J, 3, 3)
    """
    dtype = rotmats.dtype
    transl = _as_tensor(transl, dtype)
    beta = _as_tensor(beta, dtype)
    jr = rest_joints(model, beta)
    jr = jr.expand(*rotmats.shape[:-3], *jr.shape[-2:])
    global_rots, joints = _global_transforms(model, rotmats, transl, jr)
    return joints, global_rots


def skin(model, rotmats, transl, beta, return_joints=False):
    """Linear blend skinning: (..., J, 3, 3) rotations -> (..., N, 3) vertices."""
    dtype = rotmats.dtype
    transl = _as_tensor(transl, dtype)
    beta = _as_tensor(beta, dtype)
    t = model.tensors(dtype)
    v_shaped = shape_blend(model, beta)
    jr = torch.einsum("jn,...nk->...jk", t["regressor"], v_shaped)
    lead = rotmats.shape[:-3]
    jr = jr.expand(*lead, *jr.shape[-2:])
    v_shaped = v_shaped.expand(*lead, *v_shaped.shape[-2:])
    global_rots, joints = _global_transforms(model, rotmats, transl, jr)
    # Joint transforms relative to the rest pose: v -> G_rot (v - rest_j) + posed_j
    offsets = joints - (global_rots @ jr[..., None])[..., 0]
    w = t["weights"]
    blended_rot = torch.einsum("nj,...jab->...nab", w, global_rots)
    blended_off = torch.einsum("nj,...ja->...na", w, offsets)
    verts = (blended_rot @ v_shaped[..., None])[..., 0] + blended_off
    if return_joints:
        return verts, joints
    return verts


def sequence_rotmats(seq, dtype=torch.float64):
    return rotconv.aa_to_matrix(torch.as_tensor(seq.theta, dtype=dtype))


def sequence_joints(model, seq, dtype=torch.float64):
    """Posed joints (T, J, 3) and global rotations (T, J, 3, 3) as numpy arrays."""
    with torch.no_grad():
        joints, grots = forward_kinematics(model, sequence_rotmats(seq, dtype),
                                           seq.transl, seq.beta)
    return joints.numpy(), grots.numpy()


def sequence_vertices(model, seq, dtype=torch.float64):
    with torch.no_grad():
        verts = skin(model, sequence_rotmats(seq, dtype), seq.transl, seq.beta)
    return verts.numpy()


def pose_joints(model, pose):
    """FK for a single :class:`PoseState`."""
    R = rotconv.aa_to_matrix(torch.as_tensor(np.asarray(pose.theta), dtype=torch.float64))
    with torch.no_grad():
        joints, grots = forward_kinematics(model, R, pose.x, pose.beta)
    return joints.numpy(), grots.numpy()


# ---------------------------------------------------------------------------
# Toy humanoid
# ---------------------------------------------------------------------------

def _frame_for(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    return d, u, w


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def make_toy_model(n_joints=24, n_rings=3, n_around=6):
    """Deterministic tube-mesh humanoid on the first ``n_joints`` SMPL joints.

    Each segment (parent -> joint, plus short extensions at head, hands and
    feet) is a capped tube of ``n_rings`` rings of ``n_around`` vertices. The
    joint regressor averages the ring centered on each joint, so it
    reproduces the rest joints exactly. Skin weights fall off with distance
    to the rigid part each joint drives. The ten shape directions are global
    scale, leg length, arm length, torso length, shoulder width, hip width,
    limb girth, torso girth, head size and a forward lean of the chest.
    """
    if not 2 <= n_joints <= 24:
        raise InvalidArgumentError("n_joints must be in [2, 24]")
    parents = np.array(SMPL_PARENTS[:n_joints])
    joints = _TOY_REST_JOINTS[:n_joints]
    children = {j: [c for c in range(n_joints) if parents[c] == j] for j in range(n_joints)}

    segments = []  # (start, end, radius, owner_joint, end_joint or None)
    for j in range(1, n_joints):
        segments.append((joints[parents[j]], joints[j], _TOY_RADII[j], parents[j], j))
    for j in range(n_joints):
        if children[j] and j != 0:
            continue
        if j in _TOY_LEAF_EXT:
            d, length, r = _TOY_LEAF_EXT[j]
            d = np.asarray(d) / np.linalg.norm(d)
        elif j == 0 and not children[j]:
            d, length, r = np.array([0.0, 1.0, 0.0]), 0.15, 0.1
        elif not children[j]:
            p = parents[j]
            d = joints[j] - joints[p]
            d = d / np.linalg.norm(d)
            length, r = 0.08, _TOY_RADII[j] * 0.8
        else:
            continue
        segments.append((joints[j], joints[j] + length * d, r, j, None))

    verts, faces, seg_of_vertex, ring_index = [], [], [], {}
    around = 2 * np.pi * np.arange(n_around) / n_around
    for s, (a, b, r, owner, end_joint) in enumerate(segments):
        d, u, w = _frame_for(b - a)
        base = len(verts)
        for k in range(n_rings):
            c = a + (b - a) * k / (n_rings - 1)
            for phi in around:
                verts.append(c + r * (np.cos(phi) * u + np.sin(phi) * w))
                seg_of_vertex.append(s)
        ring_index[s] = base
        cap0, cap1 = len(verts), len(verts) + 1
        verts.append(a - 0.5 * r * d)
        verts.append(b + 0.5 * r * d)
        seg_of_vertex += [s, s]
        for k in range(n_rings - 1):
            for i in range(n_around):
                i2 = (i + 1) % n_around
                v00 = base + k * n_around + i
                v01 = base + k * n_around + i2
                v10 = base + (k + 1) * n_around + i
                v11 = base + (k + 1) * n_around + i2
                faces.append((v00, v10, v11))
                faces.append((v00, v11, v01))
        last = base + (n_rings - 1) * n_around
        for i in range(n_around):
            i2 = (i + 1) % n_around
            faces.append((cap0, base + i2, base + i))
            faces.append((cap1, last + i, last + i2))
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    seg_of_vertex = np.array(seg_of_vertex)
    N = len(verts)

    regressor = np.zeros((n_joints, N))
    for s, (a, b, r, owner, end_joint) in enumerate(segments):
        if end_joint is not None:
            last = ring_index[s] + (n_rings - 1) * n_around
            regressor[end_joint, last:last + n_around] = 1.0 / n_around
    root_seg = next(s for s, seg in enumerate(segments) if seg[3] == 0)
    regressor[0, ring_index[root_seg]:ring_index[root_seg] + n_around] = 1.0 / n_around

    # Each joint drives the segments it owns (from itself to its children).
    dist = np.full((N, n_joints), np.inf)
    for s, (a, b, r, owner, end_joint) in enumerate(segments):
        dist[:, owner] = np.minimum(dist[:, owner], _point_segment_distance(verts, a, b))
    logits = -(dist / 0.05) ** 2
    own = np.array([segments[s][3] for s in seg_of_vertex])
    logits[np.arange(N), own] += 2.0
    logits -= logits.max(1, keepdims=True)
    weights = np.exp(logits)
    weights[weights < 1e-3 * weights.max(1, keepdims=True)] = 0.0
    weights /= weights.sum(1, keepdims=True)

    shape_basis = _toy_shape_basis(verts, segments, seg_of_vertex, joints)
    imu = _toy_imu_vertices(segments, ring_index, n_around)
    return BodyModel(verts, faces, shape_basis, regressor, weights, parents,
                     joint_names=SMPL_JOINT_NAMES[:n_joints], imu_vertices=imu,
                     name=f"toy{n_joints}")


@functools.lru_cache(maxsize=None)
def default_toy_model():
    """Shared instance of the default toy humanoid (models are immutable)."""
    return make_toy_model()


def _toy_shape_basis(verts, segments, seg_of_vertex, joints):
    N = len(verts)
    basis = np.zeros((N, 3, 10))
    y, x = verts[:, 1], verts[:, 0]
    seg_center = np.array([(s[0] + s[1]) / 2 for s in segments])[seg_of_vertex]
    radial = verts - seg_center
    is_leg = seg_center[:, 1] < -0.05
    is_arm = np.abs(seg_center[:, 0]) > 0.17
    is_torso = ~is_leg & ~is_arm
    basis[:, :, 0] = 0.05 * verts
    basis[:, 1, 1] = np.where(is_leg, 0.04 * np.clip(y + 0.08, -1.0, 0.0) / 0.84, 0.0)
    basis[:, 0, 2] = np.where(is_arm, 0.04 * np.sign(x) * np.clip(np.abs(x) - 0.18, 0.0, None) / 0.6, 0.0)
    basis[:, 1, 3] = np.where(y > 0, 0.03 * np.clip(y, 0.0, 0.6) / 0.6, 0.0)
    basis[:, 0, 4] = np.where((y > 0.3), 0.02 * np.sign(x) * np.clip(np.abs(x) / 0.2, 0.0, 1.0), 0.0)
    basis[:, 0, 5] = np.where((y < 0.1) & (y > -0.2), 0.02 * np.sign(x), 0.0)
    basis[:, :, 6] = np.where((is_leg | is_arm)[:, None], 0.15 * radial, 0.0)
    basis[:, :, 7] = np.where(is_torso[:, None], 0.12 * radial, 0.0)
    head_c = np.array([0.0, 0.7, 0.03])
    basis[:, :, 8] = np.where((y > 0.55)[:, None], 0.1 * (verts - head_c), 0.0)
    basis[:, 2, 9] = np.where(y > 0.2, 0.02 * np.clip(y - 0.2, 0.0, 0.4) / 0.4, 0.0)
    return basis


def _toy_imu_vertices(segments, ring_index, n_around):
    out = []
    for end, ring, k in _TOY_IMU_SITES:
        match = None
        for s, seg in enumerate(segments):
            if end == "head" and seg[4] is None and seg[3] == 15:
                match = s
            elif seg[4] == end:
                match = s
        if match is None:
            return ()
        out.append(ring_index[match] + ring * n_around + k)
    return tuple(out)


# ---------------------------------------------------------------------------
# SMPL-format loader
# ---------------------------------------------------------------------------

SMPL_FIELDS = {
    "v_template": "template vertices (6890, 3)",
    "f": "faces (F, 3)",
    "shapedirs": "shape basis (6890, 3, >=10)",
    "J_regressor": "joint regressor (24, 6890), dense or scipy-sparse",
    "weights": "skinning weights (6890, 24)",
    "kintree_table": "kinematic tree (2, 24); row 0 holds parents",
}


def load_model(path, n_betas=10, strict=True):
    """Load an SMPL-format model from ``.npz`` or an unpickled-plain ``.pkl``.

    Fields read: see :data:`SMPL_FIELDS`. ``posedirs`` is ignored.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"model file not found: {path}")
    try:
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=True) as npz:
                data = {k: npz[k] for k in npz.files}
        else:
            with open(path, "rb") as fh:
                data = pickle.load(fh, encoding="latin1")
    except Exception as exc:
        raise LoadError(f"cannot parse model file {path}: {exc}") from exc

    arrays = {}
    for key, desc in SMPL_FIELDS.items():
        if key not in data:
            raise LoadError(f"model file {path} is missing field '{key}' ({desc})")
        value = data[key]
        if hasattr(value, "toarray"):
            value = value.toarray()
        elif isinstance(value, np.ndarray) and value.dtype == object and value.shape == ():
            inner = value.item()
            value = inner.toarray() if hasattr(inner, "toarray") else np.asarray(inner)
        try:
            arrays[key] = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise LoadError(f"field '{key}' is not numeric: {exc}") from exc
    if "posedirs" in data:
        logger.warning("ignoring pose-corrective blendshapes in %s", path)

    v = arrays["v_template"]
    N = v.shape[0]
    J = arrays["J_regressor"].shape[0]
    expected = {
        "v_template": (N, 3), "J_regressor": (J, N), "weights": (N, J), "kintree_table": (2, J),
    }
    for key, shape in expected.items():
        if arrays[key].shape != shape:
            raise LoadError(f"field '{key}' has shape {arrays[key].shape}, expected {shape}")
    if arrays["shapedirs"].ndim != 3 or arrays["shapedirs"].shape[:2] != (N, 3) \
            or arrays["shapedirs"].shape[2] < n_betas:
        raise LoadError(f"field 'shapedirs' has shape {arrays['shapedirs'].shape}, "
                        f"expected ({N}, 3, >={n_betas})")
    if arrays["f"].ndim != 2 or arrays["f"].shape[1] != 3:
        raise LoadError(f"field 'f' has shape {arrays['f'].shape}, expected (F, 3)")
    if strict and (N, J) != (6890, 24):
        raise LoadError(f"expected an SMPL model with 6890 vertices and 24 joints, got {N} and {J}")
    parents = arrays["kintree_table"][0].astype(np.int64)
    parents[0] = -1
    try:
        return BodyModel(v, arrays["f"].astype(np.int64), arrays["shapedirs"][:, :, :n_betas],
                         arrays["J_regressor"], arrays["weights"], parents,
                         joint_names=SMPL_JOINT_NAMES[:J] if J == 24 else (),
                         imu_vertices=SMPL_IMU_VERTICES, name=path.stem)
    except InvalidArgumentError as exc:
        raise LoadError(f"invalid model in {path}: {exc}") from exc
