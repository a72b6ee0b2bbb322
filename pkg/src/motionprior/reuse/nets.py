"""Adapter networks that map sensor observations into a frozen prior's latent space."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..exceptions import InvalidArgumentError
from ..prior.nets import MLP, GaussianHead, TemporalTransformer, kl_divergence

IMU_SENSORS = 6
IMU_WIDTH = IMU_SENSORS * (3 + 9)


class PointNetEncoder(nn.Module):
    """Shared per-point perceptron followed by a max-pool over points.

    (..., P, 3) -> (..., out_dim). Points are expressed relative to the
    centre of their bounding box, and the box centre and extent join the
    pooled feature, so the frame's position reaches the output directly.
    Every step is a max or min over points, so both permutation and
    duplication leave the output unchanged.
    """

    def __init__(self, out_dim=64, hidden=(32, 64)):
        super().__init__()
        layers, width = [], 3
        for h in hidden:
            layers += [nn.Linear(width, h), nn.GELU()]
            width = h
        self.pointwise = nn.Sequential(*layers)
        self.head = nn.Linear(width + 6, out_dim)

    def forward(self, points):
        if points.shape[-2] == 0:
            raise InvalidArgumentError("point-cloud frame has no points")
        hi, lo = points.amax(-2), points.amin(-2)
        center = 0.5 * (hi + lo)
        pooled = self.pointwise(points - center.unsqueeze(-2)).amax(-2)
        return self.head(torch.cat([pooled, center, hi - lo], -1))


class ImuEncoder(nn.Module):
    """Two-layer perceptron on the 72-wide frame (acceleration and flattened orientation per sensor).

    Accelerations are divided by ``acc_scale`` so both halves of the input
    have comparable magnitudes.
    """

    def __init__(self, out_dim=64, hidden=128, acc_scale=30.0):
        super().__init__()
        self.acc_scale = acc_scale
        self.mlp = MLP(IMU_WIDTH, hidden, out_dim)

    def forward(self, frames):
        if frames.shape[-1] != IMU_WIDTH:
            raise InvalidArgumentError(f"IMU frames must be {IMU_WIDTH} wide, got {frames.shape[-1]}")
        f = frames.reshape(*frames.shape[:-1], IMU_SENSORS, 12)
        f = torch.cat([f[..., :3] / self.acc_scale, f[..., 3:]], -1)
        return self.mlp(f.flatten(-2))


def beta_weights(n_betas=10, dtype=torch.float64):
    """Linearly decaying weights (n, n-1, ..., 1) / n: 1.0 down to 0.1 for ten coefficients."""
    return torch.arange(n_betas, 0, -1, dtype=dtype) / n_betas


def beta_loss(beta, beta_hat):
    """Weighted squared shape error, summed over coefficients and averaged over the batch."""
    beta = torch.as_tensor(beta)
    beta_hat = torch.as_tensor(beta_hat, dtype=beta.dtype)
    if beta.shape != beta_hat.shape:
        raise InvalidArgumentError(f"shape vectors differ: {tuple(beta.shape)} vs {tuple(beta_hat.shape)}")
    w = beta_weights(beta.shape[-1], beta.dtype)
    return (w * (beta - beta_hat) ** 2).sum(-1).mean()


def reuse_kl(p_target, p_pred):
    """KL(p_target || p_pred): the frozen prior's distribution comes first."""
    if p_target.mean.shape != p_pred.mean.shape:
        raise InvalidArgumentError("latent distributions have different shapes")
    return kl_divergence(p_target, p_pred)


class ReuseNet(nn.Module):
    """Input encoder, latent mapper, shape estimator and (for point clouds) an anchor head.

    The anchor head reads the mapper's first-frame context (which has seen
    the whole clip) and predicts the first-frame root position relative to
    the first-frame point centroid, which is subtracted from the input.
    """

    def __init__(self, modality, latent_dim, feature_dim=64, n_layers=2, n_heads=4, ff_dim=128,
                 window=40, n_betas=10, pointnet_hidden=(32, 64), imu_hidden=128, logvar_init=0.0):
        super().__init__()
        self.modality = modality
        self.window = window
        self.feature_dim = feature_dim
        if modality == "imu":
            self.input_encoder = ImuEncoder(feature_dim, imu_hidden)
            self.anchor_head = None
        elif modality in ("depth_pc", "lidar"):
            self.input_encoder = PointNetEncoder(feature_dim, tuple(pointnet_hidden))
            self.anchor_head = MLP(latent_dim, latent_dim, 3, zero_last=True)
        else:
            raise InvalidArgumentError(f"unknown modality {modality!r}")
        self.mapper = TemporalTransformer(feature_dim, latent_dim, n_layers, n_heads, ff_dim,
                                          max(512, window))
        self.latent_head = GaussianHead(latent_dim, latent_dim, latent_dim, logvar_init=logvar_init)
        self.shape_estimator = MLP(window * feature_dim, feature_dim, n_betas)

    def encode_input(self, x):
        return self.input_encoder(x)

    def context(self, feats):
        return self.mapper(feats)

    def map_latent(self, feats, context=None):
        return self.latent_head(self.context(feats) if context is None else context)

    def estimate_shape(self, feats):
        if feats.shape[-2] != self.window:
            raise InvalidArgumentError(f"shape estimator expects {self.window} frames, got {feats.shape[-2]}")
        return self.shape_estimator(feats.flatten(-2))

    def estimate_anchor(self, feats, context=None):
        if self.anchor_head is None:
            return None
        h = self.context(feats) if context is None else context
        return self.anchor_head(h[..., 0, :])

    def forward(self, x):
        feats = self.encode_input(x)
        h = self.context(feats)
        return self.map_latent(feats, h), self.estimate_shape(feats), self.estimate_anchor(feats, h)


def first_frame_centroid(points):
    """Mean of the first frame's points, invariant to point order down to the last bit.

    Each coordinate is sorted before summation so a shuffled cloud yields the
    identical float result.
    """
    points = np.asarray(points)
    return np.sort(points[..., 0, :, :], axis=-2).mean(-2)
