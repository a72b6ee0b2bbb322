"""Rotation conversions: axis-angle, rotation matrices, 6D, quaternions.

All functions operate on the trailing dimensions and broadcast over any
leading batch shape. They accept torch tensors (gradients flow where the
math is smooth) or array-likes; numpy in gives numpy out.
"""
import functools
import math

import numpy as np
import torch

from .exceptions import DegenerateRotationError, InvalidArgumentError

_EPS = 1e-12


def _numpy_io(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, torch.Tensor) for a in args):
            return fn(*args, **kwargs)
        out = fn(*(torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in args), **kwargs)
        return out.numpy() if isinstance(out, torch.Tensor) else out
    return wrapper


@_numpy_io
def aa_to_matrix(aa):
    """Rodrigues formula. ``aa`` has shape (..., 3); returns (..., 3, 3)."""
    if not torch.isfinite(aa).all():
        raise InvalidArgumentError("axis-angle input contains non-finite values")
    theta2 = (aa * aa).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    # Taylor expansions keep the map smooth (and differentiable) at zero.
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    K = _skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


def _skew(v):
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([
        torch.stack([o, -z, y], -1),
        torch.stack([z, o, -x], -1),
        torch.stack([-y, x, o], -1),
    ], -2)


@_numpy_io
def matrix_to_6d(R):
    """First two columns of ``R``, concatenated: (..., 3, 3) -> (..., 6)."""
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


@_numpy_io
def sixd_to_matrix(d, check=True):
    """Gram-Schmidt decoding of a 6D rotation: (..., 6) -> (..., 3, 3).

    The columns of the result are ``c1 = a1/|a1|``, ``c2`` the normalized
    component of ``a2`` orthogonal to ``c1`` and ``c3 = c1 x c2``.
    """
    a1, a2 = d[..., :3], d[..., 3:6]
    n1 = a1.norm(dim=-1, keepdim=True)
    c1 = a1 / n1.clamp_min(_EPS)
    r2 = a2 - (c1 * a2).sum(-1, keepdim=True) * c1
    n2 = r2.norm(dim=-1, keepdim=True)
    if check:
        scale = torch.maximum(n1, a2.norm(dim=-1, keepdim=True)).clamp_min(1.0)
        bad = (n1 <= 1e-9 * scale) | (n2 <= 1e-9 * scale) | ~torch.isfinite(n1 + n2)
        if bad.any():
            idx = tuple(int(i) for i in torch.nonzero(bad[..., 0])[0])
            raise DegenerateRotationError(
                f"degenerate 6D rotation at index {idx}: zero or parallel triples", index=idx)
    c2 = r2 / n2.clamp_min(_EPS)
    c3 = torch.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


@_numpy_io
def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    m = R
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    # Shepperd's method: pick the largest of (w, x, y, z) to divide by.
    cands = torch.stack([
        tr, m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2],
        m[..., 1, 1] - m[..., 0, 0] - m[..., 2, 2],
        m[..., 2, 2] - m[..., 0, 0] - m[..., 1, 1]], -1)
    k = cands.argmax(-1)
    s = torch.sqrt((1.0 + cands.gather(-1, k[..., None])[..., 0]).clamp_min(_EPS)) * 2.0
    q0 = torch.stack([0.25 * s, (m[..., 2, 1] - m[..., 1, 2]) / s,
                      (m[..., 0, 2] - m[..., 2, 0]) / s, (m[..., 1, 0] - m[..., 0, 1]) / s], -1)
    q1 = torch.stack([(m[..., 2, 1] - m[..., 1, 2]) / s, 0.25 * s,
                      (m[..., 0, 1] + m[..., 1, 0]) / s, (m[..., 0, 2] + m[..., 2, 0]) / s], -1)
    q2 = torch.stack([(m[..., 0, 2] - m[..., 2, 0]) / s, (m[..., 0, 1] + m[..., 1, 0]) / s,
                      0.25 * s, (m[..., 1, 2] + m[..., 2, 1]) / s], -1)
    q3 = torch.stack([(m[..., 1, 0] - m[..., 0, 1]) / s, (m[..., 0, 2] + m[..., 2, 0]) / s,
                      (m[..., 1, 2] + m[..., 2, 1]) / s, 0.25 * s], -1)
    q = torch.stack([q0, q1, q2, q3], -2).gather(
        -2, k[..., None, None].expand(*k.shape, 1, 4))[..., 0, :]
    q = torch.where(q[..., :1] < 0, -q, q)
    return q / q.norm(dim=-1, keepdim=True)


@_numpy_io
def quat_to_matrix(q):
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


@_numpy_io
def matrix_to_aa(R):
    """Inverse of :func:`aa_to_matrix` with the angle wrapped into [0, pi].

    At an angle of exactly pi the axis sign is ambiguous; the first nonzero
    axis component is made positive.
    """
    q = matrix_to_quat(R)
    w, v = q[..., :1], q[..., 1:]
    vn = v.norm(dim=-1, keepdim=True)
    angle = 2.0 * torch.atan2(vn, w)
    axis = v / vn.clamp_min(_EPS)
    at_pi = w[..., 0] < 1e-12
    if at_pi.any():
        mag = axis.abs() > 1e-9
        first = mag.float().argmax(-1, keepdim=True)
        sign = torch.sign(axis.gather(-1, first))
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        axis = torch.where(at_pi[..., None], axis * sign, axis)
    return torch.where(vn > 0, axis * angle, torch.zeros_like(v))


@_numpy_io
def geodesic_angle(R1, R2):
    """Angle in radians of the relative rotation ``R1^T R2``.

    Evaluated as ``atan2(sin, cos)`` of the relative rotation; this equals
    ``arccos((trace - 1) / 2)`` but stays accurate near 0 and pi, where
    the arccos form loses about half of the significant digits.
    """
    R = R1.transpose(-1, -2) @ R2
    cos = ((R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0) / 2.0).clamp(-1.0, 1.0)
    axis = torch.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], -1)
    sin = (axis.norm(dim=-1) / 2.0).clamp(max=1.0)
    return torch.atan2(sin, cos)


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
