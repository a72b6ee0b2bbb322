"""Reconstruction and distribution losses shared by prior and reuse training."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .. import body
from ..motrep import TranslationRepr, compute_delta_x, decode_rotations, integrate_delta_x


@dataclass
class LossWeights:
    theta: float = 1.0
    dtheta: float = 1.0
    x: float = 1.0
    dx: float = 1.0
    joints: float = 1.0
    verts: float = 1.0
    kl: float = 1e-3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def _sq(a, b, group):
    """Squared norm over the last ``group`` channels, averaged over everything else."""
    d = (a - b) ** 2
    d = d.reshape(*d.shape[:-1], -1, group).sum(-1)
    return d.mean()


def pose_loss(pred6d, gt6d):
    return _sq(pred6d, gt6d, 6)


def angular_velocity_loss(pred6d, gt6d):
    return _sq(pred6d[..., 1:, :] - pred6d[..., :-1, :], gt6d[..., 1:, :] - gt6d[..., :-1, :], 6)


def translation_loss(pred_x, gt_x):
    return _sq(pred_x, gt_x, 3)


def point_loss(pred, gt):
    return _sq(pred, gt, 3)


@dataclass
class MotionTarget:
    """Ground-truth batch in tensor form.

    rot6d (B, T, 6J), rotmats (B, T, J, 3, 3), transl (B, T, 3), beta (B, K).
    ``joints``/``verts`` are filled lazily from the body model.
    """

    rot6d: torch.Tensor
    rotmats: torch.Tensor
    transl: torch.Tensor
    beta: torch.Tensor
    joints: torch.Tensor = None
    verts: torch.Tensor = None

    def geometry(self, model, need_verts=True):
        if self.joints is None or (need_verts and self.verts is None):
            with torch.no_grad():
                b = self.beta[:, None, :]
                if need_verts:
                    self.verts, self.joints = body.skin(model, self.rotmats, self.transl, b,
                                                        return_joints=True)
                else:
                    self.joints, _ = body.forward_kinematics(model, self.rotmats, self.transl, b)
        return self.joints, self.verts


def recon_loss(pred6d, pred_trans, target, model, weights, repr=TranslationRepr.DELTA_144,
               beta=None, anchor=None):
    """Weighted reconstruction loss and its per-term breakdown.

    ``pred_trans`` is Δx for delta representations, absolute x otherwise.
    ``beta`` (B, K) shapes the predicted body for joints/vertices (defaults to
    the ground-truth shape); ``anchor`` (B, 3) roots the integrated trajectory
    (defaults to the ground-truth first-frame translation).
    """
    repr = TranslationRepr(repr)
    if repr.is_delta:
        pred_dx = pred_trans
        if anchor is None:
            anchor = target.transl[:, 0]
        # The first displacement is zero by construction; x_1 = anchor.
        pred_x = integrate_delta_x(torch.cat([torch.zeros_like(pred_dx[:, :1]), pred_dx[:, 1:]], 1),
                                   anchor)
    else:
        pred_x = pred_trans
        pred_dx = compute_delta_x(pred_x)
    gt_dx = compute_delta_x(target.transl)

    terms = {
        "theta": pose_loss(pred6d, target.rot6d),
        "dtheta": angular_velocity_loss(pred6d, target.rot6d),
        "x": translation_loss(pred_x, target.transl),
        "dx": translation_loss(pred_dx, gt_dx),
    }
    need_geom = weights.joints > 0 or weights.verts > 0
    if need_geom:
        gt_joints, gt_verts = target.geometry(model, need_verts=weights.verts > 0)
        R = decode_rotations(pred6d)
        b = (target.beta if beta is None else beta)[:, None, :]
        if weights.verts > 0:
            verts, joints = body.skin(model, R, pred_x, b, return_joints=True)
            terms["verts"] = point_loss(verts, gt_verts)
        else:
            joints, _ = body.forward_kinematics(model, R, pred_x, b)
            terms["verts"] = torch.zeros((), dtype=pred6d.dtype)
        terms["joints"] = point_loss(joints, gt_joints)
    else:
        terms["joints"] = terms["verts"] = torch.zeros((), dtype=pred6d.dtype)
    total = sum(getattr(weights, k) * v for k, v in terms.items())
    return total, terms
