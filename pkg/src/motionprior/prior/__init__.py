from .estimator import MotionPrior, draw_masks, params_digest, slerp_baseline, stack_targets
from .losses import LossWeights, MotionTarget, recon_loss
from .nets import GaussianSeq, PriorNet, kl_divergence, make_gaussian, sample

__all__ = [
    "GaussianSeq", "LossWeights", "MotionPrior", "MotionTarget", "PriorNet", "draw_masks",
    "kl_divergence", "make_gaussian", "params_digest", "recon_loss", "sample",
    "slerp_baseline", "stack_targets",
]
