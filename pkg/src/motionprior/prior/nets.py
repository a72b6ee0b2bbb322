"""Transformer VAE over motion parameters with one latent per frame."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from ..exceptions import InvalidArgumentError
from ..motrep import DeltaExpander, TranslationRepr, params_width

LOGVAR_MIN, LOGVAR_MAX = -15.0, 15.0


class GaussianSeq(NamedTuple):
    """Diagonal Gaussian per timestep; both fields are (..., T, D_z)."""

    mean: torch.Tensor
    logvar: torch.Tensor


def make_gaussian(mean, logvar):
    return GaussianSeq(mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))


def sample(g, generator=None):
    """Reparameterized draw ``mean + exp(logvar/2) * eps``."""
    eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype, device=g.mean.device)
    return g.mean + torch.exp(0.5 * g.logvar) * eps


def kl_divergence(q, p):
    """KL(q || p) for diagonal Gaussians, summed over latent dims, averaged over frames and batch."""
    kl = 0.5 * (p.logvar - q.logvar
                + (torch.exp(q.logvar) + (q.mean - p.mean) ** 2) * torch.exp(-p.logvar) - 1.0)
    return kl.sum(-1).mean()


def sinusoidal_embedding(length, dim, dtype=torch.float32):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class MLP(nn.Sequential):
    """Two linear layers with a GELU in between."""

    def __init__(self, in_dim, hidden, out_dim, zero_last=False):
        super().__init__(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
        if zero_last:
            nn.init.zeros_(self[2].weight)
            nn.init.zeros_(self[2].bias)


class GaussianHead(nn.Module):
    def __init__(self, in_dim, hidden, latent_dim, zero_last=False, logvar_init=0.0):
        super().__init__()
        self.mlp = MLP(in_dim, hidden, 2 * latent_dim, zero_last=zero_last)
        if logvar_init:
            with torch.no_grad():
                self.mlp[2].bias[latent_dim:] += logvar_init

    def forward(self, h):
        mean, logvar = self.mlp(h).chunk(2, dim=-1)
        return make_gaussian(mean, logvar)


class SelfAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        if dim % n_heads:
            raise InvalidArgumentError(f"model dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_padding_mask=None):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, D // self.n_heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // self.n_heads)
        if key_padding_mask is not None:
            # Masked positions are excluded as keys only; every position still queries.
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, T, D))


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim, n_heads, ff_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = MLP(dim, ff_dim, dim)

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask)
        return x + self.ff(self.norm2(x))


class TemporalTransformer(nn.Module):
    """Input projection + sinusoidal positions + a stack of attention layers."""

    def __init__(self, in_dim, dim, n_layers, n_heads, ff_dim, max_len=512):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim)
        self.layers = nn.ModuleList([TransformerLayer(dim, n_heads, ff_dim) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(dim)
        self.register_buffer("pos", sinusoidal_embedding(max_len, dim), persistent=False)

    def forward(self, x, key_padding_mask=None):
        T = x.shape[-2]
        h = self.proj(x) + self.pos[:T].to(x.dtype)
        for layer in self.layers:
            h = layer(h, key_padding_mask)
        return self.norm(h)


class PriorNet(nn.Module):
    """Encoder, posterior/prior heads, decoder and translation expander.

    ``encode`` maps motion parameters (B, T, W) to features z'. The posterior
    head sees ``[M_t, z'_t]``, the prior head sees ``z'_t`` alone. The
    decoder is a self-attention stack over the latents with separate
    rotation (6J) and translation (3) output heads.
    """

    def __init__(self, n_joints=24, latent_dim=256, n_layers=4, n_heads=4, ff_dim=512,
                 translation_repr=TranslationRepr.DELTA_144, expander_hidden=None,
                 expanded_dim=None, max_len=512, logvar_init=0.0):
        super().__init__()
        self.n_joints = n_joints
        self.latent_dim = latent_dim
        self.translation_repr = TranslationRepr(translation_repr)
        self.in_width = params_width(self.translation_repr, n_joints, expanded_dim)
        exp_dim = expanded_dim or 6 * n_joints
        self.expander = DeltaExpander(exp_dim, expander_hidden or exp_dim)
        self.encoder = TemporalTransformer(self.in_width, latent_dim, n_layers, n_heads, ff_dim, max_len)
        self.posterior_head = GaussianHead(self.in_width + latent_dim, latent_dim, latent_dim,
                                           logvar_init=logvar_init)
        self.prior_head = GaussianHead(latent_dim, latent_dim, latent_dim, logvar_init=logvar_init)
        self.decoder = TemporalTransformer(latent_dim, latent_dim, n_layers, n_heads, ff_dim, max_len)
        self.rot_head = nn.Linear(latent_dim, 6 * n_joints)
        self.trans_head = nn.Linear(latent_dim, 3)
        # Start near the rest pose with zero root motion so the integrated
        # trajectory and body-model losses begin at a sensible scale.
        with torch.no_grad():
            self.rot_head.weight.mul_(0.1)
            self.rot_head.bias.copy_(torch.tensor([1.0, 0, 0, 0, 1.0, 0]).repeat(n_joints))
            nn.init.zeros_(self.trans_head.weight)
            nn.init.zeros_(self.trans_head.bias)

    def motion_params(self, rot6d, transl):
        from ..motrep import encode_motion
        return encode_motion(rot6d, transl, self.expander, self.translation_repr)

    def encode(self, m, mask=None):
        """Features z' (B, T, D_z). ``mask`` (B, T) is True on hidden frames."""
        m, mask = _mask_inputs(m, mask)
        return self.encoder(m, mask)

    def posterior(self, m, feats, mask=None):
        m, _ = _mask_inputs(m, mask)
        return self.posterior_head(torch.cat([m, feats], dim=-1))

    def prior_dist(self, feats):
        return self.prior_head(feats)

    def decode(self, z):
        h = self.decoder(z)
        return self.rot_head(h), self.trans_head(h)

    def forward(self, m, mask=None, generator=None):
        feats = self.encode(m, mask)
        q = self.posterior(m, feats, mask)
        p = self.prior_dist(feats)
        z = sample(q, generator)
        rot6d, trans = self.decode(z)
        return rot6d, trans, q, p


def _mask_inputs(m, mask):
    if mask is None:
        return m, None
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.dim() == 1:
        mask = mask.expand(m.shape[:-1])
    if mask.all(-1).any():
        raise InvalidArgumentError("temporal mask hides every frame of a sequence")
    # Hidden frames are zero-filled too, so nothing leaks through their own queries.
    return m.masked_fill(mask[..., None], 0.0), mask
