"""Training and inference for sensor adapters on top of a frozen :class:`MotionPrior`."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..exceptions import ConfigError, InvalidArgumentError, LoadError, NumericalError
from ..motrep import params_to_pose
from ..prior.estimator import lr_factor, stack_targets
from ..prior.losses import LossWeights, MotionTarget, recon_loss
from ..prior.nets import GaussianSeq, sample
from ..sensim import MODALITIES, SensorClip
from .nets import ReuseNet, beta_loss, first_frame_centroid, reuse_kl

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "motionprior.reuse"
CHECKPOINT_VERSION = 1


def check_clips(clips, modality, window=None):
    if isinstance(clips, SensorClip):
        clips = [clips]
    clips = list(clips)
    if not clips:
        raise InvalidArgumentError("no clips given")
    for i, c in enumerate(clips):
        if not isinstance(c, SensorClip):
            raise InvalidArgumentError(f"item {i} is {type(c).__name__}, expected SensorClip")
        if c.modality != modality:
            raise InvalidArgumentError(f"clip {i} is {c.modality!r}, adapter expects {modality!r}")
        if c.source is None or len(c.source) != len(c):
            raise InvalidArgumentError(f"clip {i} is not paired with a motion of matching length")
        if window is not None and len(c) != window:
            raise InvalidArgumentError(f"clip {i} has {len(c)} frames, expected {window}")
    return clips


def clip_inputs(clips, modality, center=True):
    """Network inputs as a float64 array plus the per-clip centering offsets (or None)."""
    if modality == "imu":
        return np.stack([c.imu_features() for c in clips]), None
    pts = np.stack([np.asarray(c.points, dtype=np.float64) for c in clips])
    if pts.shape[-2] == 0:
        raise InvalidArgumentError("point-cloud clip has empty frames")
    if not center:
        return pts, np.zeros((len(clips), 3))
    offset = first_frame_centroid(pts)
    return pts - offset[:, None, None, :], offset


class MotionEstimator(BaseEstimator):
    """Sensor-to-motion estimator that reuses a trained, frozen motion prior.

    Only the adapter (input encoder, latent mapper, shape estimator and
    anchor head) is optimized. ``loss_weights.kl`` weights the alignment of
    the adapter's latent distribution with the prior head's distribution on
    the paired ground-truth motion.
    """

    def __init__(self, prior=None, modality="depth_pc", feature_dim=64, n_layers=2, n_heads=4,
                 ff_dim=128, lr=1e-3, n_epochs=500, batch_size=8, decay_epochs=None,
                 loss_weights=None, beta_weight=1.0, center_points=True,
                 pointnet_hidden=(32, 64), imu_hidden=128, logvar_init=0.0, seed=0,
                 grad_clip=1.0, checkpoint_path=None, log_path=None, verbose=False):
        self.prior = prior
        self.modality = modality
        self.feature_dim = feature_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.lr = lr
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.decay_epochs = decay_epochs
        self.loss_weights = loss_weights
        self.beta_weight = beta_weight
        self.center_points = center_points
        self.pointnet_hidden = pointnet_hidden
        self.imu_hidden = imu_hidden
        self.logvar_init = logvar_init
        self.seed = seed
        self.grad_clip = grad_clip
        self.checkpoint_path = checkpoint_path
        self.log_path = log_path
        self.verbose = verbose

    def _check_prior(self):
        if self.prior is None:
            raise ConfigError("a trained MotionPrior is required")
        check_is_fitted(self.prior, "net_")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        return self.prior

    def _weights(self):
        w = self.loss_weights
        if w is None:
            return LossWeights()
        return w if isinstance(w, LossWeights) else LossWeights(**w)

    def _build_net(self):
        prior = self.prior
        torch.manual_seed(self.seed)
        net = ReuseNet(self.modality, prior.latent_dim, self.feature_dim, self.n_layers,
                       self.n_heads, self.ff_dim, prior.window, prior._model().n_betas,
                       self.pointnet_hidden, self.imu_hidden, self.logvar_init)
        return net.to(prior._torch_dtype())

    def _anchor(self, net, feats, context, offset, target_x0):
        """World-frame first root position used to integrate the decoded displacements."""
        if self.modality == "imu":
            # IMU signals carry no absolute position: the root starts at the reference.
            return target_x0
        return offset + net.estimate_anchor(feats, context)

    def fit(self, X, y=None):
        prior = self._check_prior().freeze()
        clips = check_clips(X, self.modality, prior.window)
        model = prior._model()
        dtype = prior._torch_dtype()
        weights = self._weights()
        frozen_before = prior.param_hash()

        sources = [c.source for c in clips]
        target = stack_targets(sources, dtype)
        target.geometry(model, need_verts=weights.verts > 0)
        # Alignment targets: frozen encoder + prior head on clean ground-truth motion.
        no_mask = torch.zeros(len(sources), prior.window, dtype=torch.bool)
        _, p_target = prior.encode_distributions(sources, mask=no_mask)
        inputs, offset = clip_inputs(clips, self.modality, self.center_points)
        inputs = torch.as_tensor(inputs, dtype=dtype)
        offset = None if offset is None else torch.as_tensor(offset, dtype=dtype)

        self.net_ = self._build_net()
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        d1, d2 = self._decay()
        n = len(clips)
        self.history_ = []
        step = 0
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            for epoch in range(self.n_epochs):
                lr = self.lr * lr_factor(epoch, d1, d2)
                for group in opt.param_groups:
                    group["lr"] = lr
                perm = torch.randperm(n, generator=gen)
                for start in range(0, n, self.batch_size):
                    idx = perm[start:start + self.batch_size]
                    record = self._step(inputs[idx], None if offset is None else offset[idx],
                                        _subset(target, idx),
                                        GaussianSeq(p_target.mean[idx], p_target.logvar[idx]),
                                        weights, opt, gen)
                    step += 1
                    record.update(step=step, epoch=epoch, lr=lr)
                    self.history_.append(record)
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                    if not np.isfinite(record["loss"]):
                        raise NumericalError(f"non-finite adapter loss at step {step}",
                                             {"step": step, "epoch": epoch, "lr": lr})
                if self.verbose and (epoch % 50 == 0 or epoch == self.n_epochs - 1):
                    logger.info("epoch %d loss %.5f", epoch, self.history_[-1]["loss"])
        finally:
            if log_fh:
                log_fh.close()
        if prior.param_hash() != frozen_before:
            raise RuntimeError("frozen prior parameters changed during adapter training")
        self.prior_hash_ = frozen_before
        self.n_steps_ = step
        if self.checkpoint_path:
            self.save(self.checkpoint_path)
        return self

    def _decay(self):
        if self.decay_epochs is not None:
            return tuple(self.decay_epochs)
        return round(0.6 * self.n_epochs), round(0.85 * self.n_epochs)

    def _step(self, x, offset, target, p_target, weights, opt, gen):
        net, prior_net = self.net_, self.prior.net_
        net.train()
        feats = net.encode_input(x)
        h = net.context(feats)
        p_pred = net.map_latent(feats, h)
        beta_hat = net.estimate_shape(feats)
        anchor = self._anchor(net, feats, h, offset, target.transl[:, 0])
        z = sample(p_pred, gen)
        rot6d, trans = prior_net.decode(z)
        loss_recon, terms = recon_loss(rot6d, trans, target, self.prior._model(), weights,
                                       prior_net.translation_repr, beta=beta_hat, anchor=anchor)
        kl = reuse_kl(p_target, p_pred)
        lb = beta_loss(target.beta, beta_hat)
        loss = loss_recon + weights.kl * kl + self.beta_weight * lb
        opt.zero_grad()
        loss.backward()
        if any(p.grad is not None for p in prior_net.parameters()):
            raise RuntimeError("gradient reached a frozen prior parameter")
        if self.grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), self.grad_clip)
        opt.step()
        record = {"loss": loss.item(), "L_recon": loss_recon.item(), "L_kl": kl.item(),
                  "L_beta": lb.item()}
        record.update({f"L_{k}": v.item() for k, v in terms.items()})
        return record

    # -- inference --------------------------------------------------------

    def _forward_means(self, clips):
        dtype = self.prior._torch_dtype()
        inputs, offset = clip_inputs(clips, self.modality, self.center_points)
        net = self.net_
        net.eval()
        with torch.no_grad():
            feats = net.encode_input(torch.as_tensor(inputs, dtype=dtype))
            h = net.context(feats)
            p = net.map_latent(feats, h)
            beta_hat = net.estimate_shape(feats)
            x0 = torch.as_tensor(np.stack([c.source.transl[0] for c in clips]), dtype=dtype)
            off = None if offset is None else torch.as_tensor(offset, dtype=dtype)
            anchor = self._anchor(net, feats, h, off, x0)
            rot6d, trans = self.prior.net_.decode(p.mean)
        return p, rot6d, trans, beta_hat, anchor

    def transform(self, X):
        """Adapter latent means, (n_clips, T, latent_dim)."""
        check_is_fitted(self, "net_")
        clips = check_clips(X, self.modality, self.prior.window)
        return self._forward_means(clips)[0].mean.numpy()

    def predict(self, X, beta=None):
        """Estimated :class:`MotionSequence` per clip, decoded from the latent means.

        ``beta`` selects the body shape used for the output: None for the
        estimated shape, ``"source"`` for each clip's ground-truth shape, or
        an array of shape (n_clips, n_betas).
        """
        check_is_fitted(self, "net_")
        clips = check_clips(X, self.modality, self.prior.window)
        _, rot6d, trans, beta_hat, anchor = self._forward_means(clips)
        if beta is None:
            betas = beta_hat.double().numpy()
        elif isinstance(beta, str) and beta == "source":
            betas = np.stack([c.source.beta for c in clips])
        else:
            betas = np.asarray(beta, dtype=np.float64).reshape(len(clips), -1)
        repr = self.prior.net_.translation_repr
        return [params_to_pose(r, t, b, a.double().numpy(), c.source.fps, c.clip_id or c.source.source_id,
                               repr=repr)
                for r, t, b, a, c in zip(rot6d, trans, betas, anchor, clips)]

    def estimate_shape(self, X):
        check_is_fitted(self, "net_")
        clips = check_clips(X, self.modality, self.prior.window)
        return self._forward_means(clips)[3].double().numpy()

    # -- persistence ------------------------------------------------------

    def get_config(self):
        params = self.get_params(deep=False)
        params.pop("prior")
        if isinstance(params.get("loss_weights"), LossWeights):
            params["loss_weights"] = vars(params["loss_weights"]).copy()
        params["pointnet_hidden"] = list(params["pointnet_hidden"])
        return params

    def save(self, path):
        check_is_fitted(self, "net_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                   "config": self.get_config(), "prior_hash": self.prior_hash_,
                   "net": self.net_.state_dict(), "step": getattr(self, "n_steps_", None)}
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path, prior):
        """Restore an adapter; fails if ``prior`` is not the one it was trained against."""
        path = Path(path)
        if not path.exists():
            raise LoadError(f"adapter checkpoint not found: {path}")
        try:
            ckpt = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise LoadError(f"cannot read adapter checkpoint {path}: {exc}") from exc
        if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
            raise LoadError(f"{path} is not a supported adapter checkpoint")
        actual = prior.param_hash()
        if actual != ckpt["prior_hash"]:
            raise LoadError(f"adapter {path} was trained against prior {ckpt['prior_hash'][:12]}, "
                            f"but the supplied prior is {actual[:12]}")
        config = dict(ckpt["config"])
        config.pop("checkpoint_path", None)
        est = cls(prior=prior.freeze(), **config)
        est.net_ = est._build_net()
        est.net_.load_state_dict(ckpt["net"])
        est.prior_hash_ = actual
        est.n_steps_ = ckpt.get("step")
        return est


def _subset(target, idx):
    return MotionTarget(target.rot6d[idx], target.rotmats[idx], target.transl[idx], target.beta[idx],
                        target.joints[idx], None if target.verts is None else target.verts[idx])
