"""Network-facing motion parameters.

Each frame becomes the flattened 6D joint rotations followed by a
translation block: by default the frame-to-frame root displacement pushed
through a small learned expander so that it carries as many channels as
the rotations.
"""
from __future__ import annotations

import enum

import numpy as np
import torch
from torch import nn

from . import rotconv
from .body import MotionSequence
from .exceptions import DegenerateRotationError


class TranslationRepr(str, enum.Enum):
    DELTA_144 = "delta_144"
    DELTA_3 = "delta_3"
    ABS_144 = "abs_144"
    ABS_3 = "abs_3"

    @property
    def is_delta(self):
        return self.value.startswith("delta")

    @property
    def is_expanded(self):
        return self.value.endswith("144")


class DeltaExpander(nn.Module):
    """Two-layer perceptron lifting a 3-vector translation to ``out_dim`` channels.

    The input is multiplied by ``in_scale`` first: per-frame displacements
    are centimetre-sized and would otherwise be drowned out by the unit-scale
    rotation channels they are concatenated with.
    """

    def __init__(self, out_dim=144, hidden=144, zero_init=False, in_scale=10.0):
        super().__init__()
        self.out_dim = out_dim
        self.in_scale = in_scale
        self.net = nn.Sequential(nn.Linear(3, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
        if zero_init:
            for p in self.parameters():
                nn.init.zeros_(p)

    def forward(self, dx):
        return self.net(dx * self.in_scale)


def compute_delta_x(x):
    """Per-frame root displacement in the global frame; the first frame is zero."""
    if isinstance(x, torch.Tensor):
        return torch.cat([torch.zeros_like(x[..., :1, :]), x[..., 1:, :] - x[..., :-1, :]], dim=-2)
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([np.zeros_like(x[..., :1, :]), x[..., 1:, :] - x[..., :-1, :]], axis=-2)


def integrate_delta_x(dx, anchor):
    """Inverse of :func:`compute_delta_x`: ``x_t = anchor + sum_{s<=t} dx_s``."""
    if isinstance(dx, torch.Tensor):
        anchor = torch.as_tensor(anchor, dtype=dx.dtype)
        return anchor.unsqueeze(-2) + torch.cumsum(dx, dim=-2)
    dx = np.asarray(dx, dtype=np.float64)
    return np.asarray(anchor, dtype=np.float64)[..., None, :] + np.cumsum(dx, axis=-2)


def translation_width(repr, n_joints, expanded_dim=None):
    repr = TranslationRepr(repr)
    if repr.is_expanded:
        return expanded_dim or 6 * n_joints
    return 3


def params_width(repr, n_joints, expanded_dim=None):
    return 6 * n_joints + translation_width(repr, n_joints, expanded_dim)


def translation_target(transl, repr):
    """The raw 3-vector the network models for ``repr``: Δx or absolute x."""
    return compute_delta_x(transl) if TranslationRepr(repr).is_delta else transl


def encode_motion(rot6d, transl, expander, repr=TranslationRepr.DELTA_144):
    """Assemble motion parameters from tensors.

    rot6d : (..., T, J*6); transl : (..., T, 3) absolute root translation.
    """
    repr = TranslationRepr(repr)
    raw = translation_target(transl, repr)
    block = expander(raw) if repr.is_expanded else raw
    return torch.cat([rot6d, block], dim=-1)


def sequence_rot6d(seq, dtype=torch.float64):
    R = rotconv.aa_to_matrix(torch.as_tensor(seq.theta, dtype=dtype))
    return rotconv.matrix_to_6d(R).flatten(-2)


def build_motion_params(seq, expander, repr=TranslationRepr.DELTA_144, dtype=None):
    """Motion parameters (T, width) for one :class:`MotionSequence`."""
    if dtype is None:
        dtype = next(expander.parameters()).dtype
    rot6d = sequence_rot6d(seq, dtype)
    transl = torch.as_tensor(seq.transl, dtype=dtype)
    return encode_motion(rot6d, transl, expander, repr)


def decode_rotations(theta_6d):
    """(..., T, J*6) -> (..., T, J, 3, 3), naming (frame, joint) on failure."""
    d = theta_6d.reshape(*theta_6d.shape[:-1], -1, 6)
    try:
        return rotconv.sixd_to_matrix(d)
    except DegenerateRotationError as exc:
        idx = exc.index or ()
        where = f"frame {idx[-2]}, joint {idx[-1]}" if len(idx) >= 2 else str(idx)
        raise DegenerateRotationError(f"degenerate 6D rotation at {where}", index=idx) from exc


def params_to_pose(theta_6d, dx, beta, anchor, fps=10.0, source_id="", repr=TranslationRepr.DELTA_144):
    """Decode network outputs into a :class:`MotionSequence`.

    ``dx`` is the per-frame displacement for delta representations or the
    absolute translation for absolute ones (``anchor`` is then ignored).
    """
    theta_6d = torch.as_tensor(theta_6d).detach().double()
    dx = torch.as_tensor(dx).detach().double()
    R = decode_rotations(theta_6d)
    theta = rotconv.matrix_to_aa(R).numpy()
    if TranslationRepr(repr).is_delta:
        # Frame 1 sits at the anchor; its displacement is zero by definition.
        steps = dx.numpy().copy()
        steps[..., 0, :] = 0.0
        transl = integrate_delta_x(steps, np.asarray(anchor, dtype=np.float64))
    else:
        transl = dx.numpy()
    return MotionSequence(theta, transl, np.asarray(beta, dtype=np.float64), fps, source_id)
