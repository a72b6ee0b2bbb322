from .estimator import MotionEstimator, check_clips, clip_inputs
from .nets import (IMU_WIDTH, ImuEncoder, PointNetEncoder, ReuseNet, beta_loss, beta_weights,
                   first_frame_centroid, reuse_kl)

__all__ = [
    "IMU_WIDTH", "ImuEncoder", "MotionEstimator", "PointNetEncoder", "ReuseNet", "beta_loss",
    "beta_weights", "check_clips", "clip_inputs", "first_frame_centroid", "reuse_kl",
]
