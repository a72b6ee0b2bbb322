"""Estimator wrapper around :class:`PriorNet`: training, reconstruction, inbetweening."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .. import rotconv
from ..body import MotionSequence, default_toy_model
from ..exceptions import InvalidArgumentError, LoadError, NumericalError
from ..motrep import params_to_pose, sequence_rot6d, translation_target
from ..validation import check_sequences
from .losses import LossWeights, MotionTarget, recon_loss
from .nets import GaussianSeq, PriorNet, kl_divergence, sample

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "motionprior.prior"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def stack_targets(seqs, dtype):
    theta = torch.as_tensor(np.stack([s.theta for s in seqs]), dtype=torch.float64)
    R = rotconv.aa_to_matrix(theta)
    return MotionTarget(
        rot6d=rotconv.matrix_to_6d(R).flatten(-2).to(dtype),
        rotmats=R.to(dtype),
        transl=torch.as_tensor(np.stack([s.transl for s in seqs]), dtype=dtype),
        beta=torch.as_tensor(np.stack([s.beta for s in seqs]), dtype=dtype),
    )


def lr_factor(epoch, decay1, decay2):
    if epoch >= decay2:
        return 0.1
    if epoch >= decay1:
        return 0.25
    return 1.0


def draw_masks(batch, T, ratio, generator):
    """Bernoulli(ratio) frame masks; rows that hide every frame are redrawn."""
    mask = torch.rand(batch, T, generator=generator) < ratio
    while True:
        full = mask.all(-1)
        if not full.any():
            return mask
        mask[full] = torch.rand(int(full.sum()), T, generator=generator) < ratio


def params_digest(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class MotionPrior(TransformerMixin, BaseEstimator):
    """Per-frame latent motion prior.

    ``fit`` trains the VAE on equal-length :class:`MotionSequence` windows.
    ``transform`` returns the prior-head latent means per sequence and
    ``inverse_transform`` decodes latents back into sequences.

    Parameters
    ----------
    body_model : BodyModel, optional
        Defaults to the toy humanoid.
    latent_dim, n_layers, n_heads, ff_dim : int
        Transformer sizes shared by encoder and decoder.
    mask_ratio : float
        Bernoulli probability of hiding a frame from the encoder in training.
    decay_epochs : (int, int), optional
        Epochs at which the learning rate drops to lr/4 and lr/10. Defaults
        to 60% and 85% of ``n_epochs``.
    """

    def __init__(self, body_model=None, window=40, latent_dim=64, n_layers=4, n_heads=4,
                 ff_dim=512, mask_ratio=0.3, lr=1e-4, n_epochs=100, batch_size=8,
                 decay_epochs=None, loss_weights=None, translation_repr="delta_144",
                 seed=0, dtype="float32", checkpoint_path=None, checkpoint_every=0,
                 log_path=None, grad_clip=1.0, logvar_init=0.0, verbose=False):
        self.body_model = body_model
        self.window = window
        self.latent_dim = latent_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.mask_ratio = mask_ratio
        self.lr = lr
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.decay_epochs = decay_epochs
        self.loss_weights = loss_weights
        self.translation_repr = translation_repr
        self.seed = seed
        self.dtype = dtype
        self.checkpoint_path = checkpoint_path
        self.checkpoint_every = checkpoint_every
        self.log_path = log_path
        self.grad_clip = grad_clip
        self.logvar_init = logvar_init
        self.verbose = verbose

    # -- construction -----------------------------------------------------

    def _model(self):
        return default_toy_model() if self.body_model is None else self.body_model

    def _torch_dtype(self):
        return _DTYPES[self.dtype]

    def _weights(self):
        w = self.loss_weights
        if w is None:
            return LossWeights()
        return w if isinstance(w, LossWeights) else LossWeights(**w)

    def _build_net(self):
        torch.manual_seed(self.seed)
        net = PriorNet(self._model().n_joints, self.latent_dim, self.n_layers, self.n_heads,
                       self.ff_dim, self.translation_repr, max_len=max(512, self.window),
                       logvar_init=self.logvar_init)
        return net.to(self._torch_dtype())

    def _decay(self):
        if self.decay_epochs is not None:
            return tuple(self.decay_epochs)
        return round(0.6 * self.n_epochs), round(0.85 * self.n_epochs)

    # -- training ---------------------------------------------------------

    def fit(self, X, y=None, resume_from=None):
        model = self._model()
        seqs = check_sequences(X, n_joints=model.n_joints, n_betas=model.n_betas, length=self.window)
        dtype = self._torch_dtype()
        weights = self._weights()
        target = stack_targets(seqs, dtype)
        target.geometry(model, need_verts=weights.verts > 0)

        self.net_ = self._build_net()
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        start_epoch, step = 0, 0
        self.history_ = []
        if resume_from is not None:
            ckpt = _load_checkpoint(resume_from)
            self.net_.load_state_dict(ckpt["net"])
            opt.load_state_dict(ckpt["optimizer"])
            gen.set_state(ckpt["generator"])
            start_epoch, step = ckpt["epoch"], ckpt["step"]
        d1, d2 = self._decay()
        n = len(seqs)
        log_fh = open(self.log_path, "a") if self.log_path else None
        try:
            for epoch in range(start_epoch, self.n_epochs):
                lr = self.lr * lr_factor(epoch, d1, d2)
                for group in opt.param_groups:
                    group["lr"] = lr
                perm = torch.randperm(n, generator=gen)
                for start in range(0, n, self.batch_size):
                    idx = perm[start:start + self.batch_size]
                    record = self._step(target, idx, weights, opt, gen)
                    step += 1
                    record.update(step=step, epoch=epoch, lr=lr)
                    self.history_.append(record)
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                    if not np.isfinite(record["loss"]):
                        snapshot = {"step": step, "epoch": epoch, "lr": lr,
                                    "terms": {k: record[k] for k in record if k.startswith("L_")}}
                        if self.log_path:
                            Path(str(self.log_path) + ".nan.json").write_text(json.dumps(snapshot))
                        raise NumericalError(f"non-finite loss at step {step}", snapshot)
                if self.verbose and (epoch % 50 == 0 or epoch == self.n_epochs - 1):
                    logger.info("epoch %d loss %.5f", epoch, self.history_[-1]["loss"])
                if self.checkpoint_path and self.checkpoint_every and \
                        (epoch + 1) % self.checkpoint_every == 0:
                    self._save(self.checkpoint_path, opt, gen, epoch + 1, step)
        finally:
            if log_fh:
                log_fh.close()
        if self.checkpoint_path:
            self._save(self.checkpoint_path, opt, gen, self.n_epochs, step)
        tail = [h["kl_post_per_dim"] for h in self.history_[-10:]]
        if tail and np.mean(tail) < 1e-3:
            warnings.warn("posterior KL per latent dim fell below 1e-3 nats (possible collapse)")
        self.n_steps_ = step
        return self

    def _step(self, target, idx, weights, opt, gen):
        net = self.net_
        net.train()
        B, T = len(idx), target.rot6d.shape[1]
        sub = MotionTarget(target.rot6d[idx], target.rotmats[idx], target.transl[idx],
                           target.beta[idx], target.joints[idx],
                           None if target.verts is None else target.verts[idx])
        mask = draw_masks(B, T, self.mask_ratio, gen) if self.mask_ratio > 0 else None
        m = net.motion_params(sub.rot6d, sub.transl)
        rot6d, trans, q, p = net(m, mask, gen)
        loss_recon, terms = recon_loss(rot6d, trans, sub, self._model(), weights, net.translation_repr)
        kl = kl_divergence(q, p)
        loss = loss_recon + weights.kl * kl
        opt.zero_grad()
        loss.backward()
        if self.grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), self.grad_clip)
        opt.step()
        with torch.no_grad():
            std_normal = GaussianSeq(torch.zeros_like(q.mean), torch.zeros_like(q.logvar))
            kl_post = kl_divergence(q, std_normal) / q.mean.shape[-1]
        record = {"loss": loss.item(), "L_recon": loss_recon.item(), "L_kl": kl.item(),
                  "kl_post_per_dim": float(kl_post)}
        record.update({f"L_{k}": v.item() for k, v in terms.items()})
        return record

    # -- persistence ------------------------------------------------------

    def get_config(self):
        params = self.get_params(deep=False)
        params.pop("body_model")
        w = params.get("loss_weights")
        if isinstance(w, LossWeights):
            params["loss_weights"] = vars(w).copy()
        return params

    def _save(self, path, opt=None, gen=None, epoch=None, step=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.get_config(),
            "seed": self.seed,
            "body_model": self._model().fingerprint(),
            "net": self.net_.state_dict(),
            "optimizer": opt.state_dict() if opt else None,
            "generator": gen.get_state() if gen else None,
            "epoch": epoch,
            "step": step,
            "param_hash": self.param_hash(),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    def save(self, path):
        check_is_fitted(self, "net_")
        self._save(path, epoch=self.n_epochs, step=getattr(self, "n_steps_", None))

    @classmethod
    def load(cls, path, body_model=None):
        ckpt = _load_checkpoint(path)
        config = dict(ckpt["config"])
        est = cls(body_model=body_model, **config)
        if body_model is not None and ckpt.get("body_model") not in (None, body_model.fingerprint()):
            raise LoadError(f"checkpoint {path} was trained with a different body model")
        est.net_ = est._build_net()
        est.net_.load_state_dict(ckpt["net"])
        est.n_steps_ = ckpt.get("step")
        return est

    def param_hash(self):
        check_is_fitted(self, "net_")
        return params_digest(self.net_)

    def freeze(self):
        """Disable gradients on every prior parameter (reuse phase)."""
        check_is_fitted(self, "net_")
        self.net_.eval()
        for p in self.net_.parameters():
            p.requires_grad_(False)
            p.grad = None
        return self

    # -- inference --------------------------------------------------------

    def _motion_params(self, seqs):
        dtype = self._torch_dtype()
        rot6d = torch.stack([sequence_rot6d(s, torch.float64) for s in seqs]).to(dtype)
        transl = torch.as_tensor(np.stack([s.transl for s in seqs]), dtype=dtype)
        return self.net_.motion_params(rot6d, transl)

    def encode_distributions(self, seqs, mask=None):
        """Posterior and prior Gaussians for a batch of sequences."""
        check_is_fitted(self, "net_")
        with torch.no_grad():
            m = self._motion_params(seqs)
            feats = self.net_.encode(m, mask)
            return self.net_.posterior(m, feats, mask), self.net_.prior_dist(feats)

    def transform(self, X, mask=None):
        """Prior-head latent means, (n_sequences, T, latent_dim)."""
        seqs = check_sequences(X, n_joints=self._model().n_joints)
        _, p = self.encode_distributions(seqs, mask)
        return p.mean.numpy()

    def decode(self, z):
        check_is_fitted(self, "net_")
        z = torch.as_tensor(z, dtype=self._torch_dtype())
        squeeze = z.dim() == 2
        with torch.no_grad():
            rot6d, trans = self.net_.decode(z[None] if squeeze else z)
        return (rot6d[0], trans[0]) if squeeze else (rot6d, trans)

    def inverse_transform(self, Z, beta=None, anchor=None, fps=10.0):
        Z = np.asarray(Z)
        if Z.ndim == 2:
            Z = Z[None]
        rot6d, trans = self.decode(Z)
        K = self._model().n_betas
        beta = np.zeros(K) if beta is None else np.asarray(beta)
        anchor = np.zeros(3) if anchor is None else np.asarray(anchor)
        return [params_to_pose(r, t, beta, anchor, fps, repr=self.net_.translation_repr)
                for r, t in zip(rot6d, trans)]

    def reconstruct(self, seq, mask=None, sample_latent=False, seed=0):
        """Encode -> prior head -> decode, anchored at the first ground-truth translation.

        Uses prior-head means unless ``sample_latent`` is set.
        """
        check_is_fitted(self, "net_")
        check_sequences([seq], n_joints=self._model().n_joints)
        if mask is not None:
            mask = torch.as_tensor(np.asarray(mask, dtype=bool))[None]
        with torch.no_grad():
            m = self._motion_params([seq])
            return self._decode_from_params(m, mask, seq.beta, seq.transl[0], seq.fps,
                                            seq.source_id, sample_latent, seed)

    def _decode_from_params(self, m, mask, beta, anchor, fps, source_id, sample_latent, seed):
        net = self.net_
        net.eval()
        feats = net.encode(m, mask)
        p = net.prior_dist(feats)
        z = sample(p, torch.Generator().manual_seed(seed)) if sample_latent else p.mean
        rot6d, trans = net.decode(z)
        return params_to_pose(rot6d[0], trans[0], beta, anchor, fps, source_id,
                              repr=net.translation_repr)

    def inbetween(self, keyframes, T=None, anchor=None, beta=None, passthrough=True,
                  sample_latent=False, seed=0, fps=10.0):
        """Fill the frames missing from ``keyframes`` ({frame index: PoseState}).

        Known frames are fed to the encoder and every other frame is hidden
        with the key-padding mask. With ``passthrough`` the known frames are
        copied into the output and the decoded trajectory is corrected
        piecewise-linearly so it meets each known root position.
        """
        check_is_fitted(self, "net_")
        T = T or self.window
        frames, poses = _check_keyframes(keyframes, T, anchor)
        model = self._model()
        if beta is None:
            beta = np.asarray(poses[0].beta)
        known_x = np.stack([np.asarray(p.x, dtype=np.float64) for p in poses])
        if anchor is None:
            anchor = known_x[0] if frames[0] == 0 else np.zeros(3)
        anchor = np.asarray(anchor, dtype=np.float64)

        dtype = self._torch_dtype()
        J = model.n_joints
        theta = np.zeros((T, J, 3))
        x = np.zeros((T, 3))
        for t, p in zip(frames, poses):
            theta[t] = p.theta
            x[t] = p.x
        mask = np.ones(T, dtype=bool)
        mask[frames] = False

        repr = self.net_.translation_repr
        with torch.no_grad():
            rot6d = sequence_rot6d(MotionSequence(theta, x, beta), torch.float64).to(dtype)
            # Same dtype and arithmetic as the training inputs, so a fully
            # observed sequence yields exactly the reconstruction parameters.
            xt = torch.as_tensor(x, dtype=dtype)
            if repr.is_delta:
                raw = torch.zeros_like(xt)
                for prev, t in zip(frames[:-1], frames[1:]):
                    step = xt[t] - xt[prev]
                    # Average velocity across a gap.
                    raw[t] = step if t - prev == 1 else step / (t - prev)
            else:
                raw = translation_target(xt, repr)
            block = self.net_.expander(raw) if repr.is_expanded else raw
            m = torch.cat([rot6d, block], -1)[None]
            tmask = torch.as_tensor(mask)[None] if mask.any() else None
            out = self._decode_from_params(m, tmask, beta, anchor, fps, "inbetween",
                                           sample_latent, seed)
        if not passthrough:
            return out
        theta_out, x_out = out.theta.copy(), out.transl.copy()
        resid = known_x - x_out[frames]
        corr = np.stack([np.interp(np.arange(T), frames, resid[:, k]) for k in range(3)], -1)
        x_out = x_out + corr
        for t, p in zip(frames, poses):
            theta_out[t] = p.theta
            x_out[t] = p.x
        return MotionSequence(theta_out, x_out, beta, fps, "inbetween")


def _check_keyframes(keyframes, T, anchor):
    if not keyframes:
        raise InvalidArgumentError("inbetweening needs at least one known frame")
    frames = sorted(int(t) for t in keyframes)
    if frames[0] < 0 or frames[-1] >= T:
        raise InvalidArgumentError(f"keyframe indices must lie in [0, {T})")
    if frames[0] != 0 and anchor is None:
        raise InvalidArgumentError("frame 0 must be given (or an explicit anchor supplied)")
    return frames, [keyframes[t] for t in frames]


def _load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not a motion-prior checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def slerp_baseline(keyframes, T, fps=10.0):
    """Per-joint quaternion SLERP between neighbouring keyframes, linear root translation.

    Frames before the first or after the last keyframe hold the nearest keyframe.
    """
    from scipy.spatial.transform import Rotation, Slerp

    frames = sorted(int(t) for t in keyframes)
    if len(frames) < 2:
        raise InvalidArgumentError("SLERP needs at least two keyframes")
    poses = [keyframes[t] for t in frames]
    J = np.asarray(poses[0].theta).shape[0]
    times = np.clip(np.arange(T), frames[0], frames[-1])
    theta = np.zeros((T, J, 3))
    for j in range(J):
        rots = Rotation.from_rotvec(np.stack([np.asarray(p.theta)[j] for p in poses]))
        theta[:, j] = Slerp(frames, rots)(times).as_rotvec()
    for t, p in zip(frames, poses):
        theta[t] = p.theta
    xs = np.stack([np.asarray(p.x, dtype=np.float64) for p in poses])
    transl = np.stack([np.interp(times, frames, xs[:, k]) for k in range(3)], -1)
    return MotionSequence(theta, transl, np.asarray(poses[0].beta), fps, "slerp")
