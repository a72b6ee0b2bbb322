import numpy as np
import pytest
import torch
from sklearn.base import clone

from motionprior.body import BodyModel, MotionSequence, PoseState
from motionprior.exceptions import InvalidArgumentError, LoadError, NumericalError
from motionprior.prior import (LossWeights, MotionPrior, PriorNet, draw_masks,
                               kl_divergence, make_gaussian, recon_loss, slerp_baseline, stack_targets)
from motionprior.prior import estimator as prior_estimator
from motionprior.prior.losses import _sq
from motionprior.prior.nets import SelfAttention


def small_prior(**kw):
    args = dict(latent_dim=16, n_layers=1, n_heads=2, ff_dim=32, lr=1e-3, n_epochs=3,
                batch_size=2, seed=0)
    args.update(kw)
    return MotionPrior(**args)


def chain4():
    verts = np.array([[0.0, 0, 0], [0, 0.5, 0], [0, 1.0, 0], [0.3, 1.2, 0]])
    basis = np.zeros((4, 3, 10))
    basis[:, 1, 0] = [0, 0.05, 0.1, 0.1]
    return BodyModel(verts, np.array([[0, 1, 2], [1, 2, 3]]), basis, np.eye(4), np.eye(4),
                     np.array([-1, 0, 1, 2]))


def test_kl_closed_form_matches_monte_carlo():
    g = torch.Generator().manual_seed(0)
    q = make_gaussian(torch.randn(1, 1, 4, generator=g, dtype=torch.float64),
                      torch.randn(1, 1, 4, generator=g, dtype=torch.float64) * 0.5)
    p = make_gaussian(torch.randn(1, 1, 4, generator=g, dtype=torch.float64),
                      torch.randn(1, 1, 4, generator=g, dtype=torch.float64) * 0.5)
    dq = torch.distributions.Normal(q.mean, torch.exp(0.5 * q.logvar))
    dp = torch.distributions.Normal(p.mean, torch.exp(0.5 * p.logvar))
    z = dq.sample((200_000,))
    mc = (dq.log_prob(z) - dp.log_prob(z)).sum(-1).mean()
    closed = kl_divergence(q, p)
    assert closed.item() == pytest.approx(mc.item(), rel=0.02)
    assert closed.item() == pytest.approx(torch.distributions.kl_divergence(dq, dp).sum().item(), rel=1e-12)


def test_kl_reduction_and_zero():
    q = make_gaussian(torch.randn(3, 5, 8), torch.randn(3, 5, 8))
    assert kl_divergence(q, q).item() == pytest.approx(0.0, abs=1e-6)
    p = make_gaussian(torch.zeros(3, 5, 8), torch.zeros(3, 5, 8))
    per = 0.5 * (torch.exp(q.logvar) + q.mean ** 2 - 1 - q.logvar).sum(-1)
    assert kl_divergence(q, p).item() == pytest.approx(per.mean().item(), rel=1e-5)


def test_logvar_clamped():
    g = make_gaussian(torch.zeros(2), torch.tensor([-100.0, 100.0]))
    assert g.logvar.tolist() == [-15.0, 15.0]


def test_attention_ignores_masked_keys():
    torch.manual_seed(0)
    attn = SelfAttention(8, 2).double()
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    mask = torch.tensor([[False, True, False, True, False, False]])
    y = attn(x, mask)
    x2 = x.clone()
    x2[0, [1, 3]] = torch.randn(2, 8, dtype=torch.float64) * 10
    y2 = attn(x2, mask)
    # Unmasked queries see no change when only masked keys differ.
    torch.testing.assert_close(y[0, [0, 2, 4, 5]], y2[0, [0, 2, 4, 5]], atol=1e-12, rtol=0)


def test_masked_frames_do_not_leak():
    torch.manual_seed(0)
    net = PriorNet(n_joints=4, latent_dim=8, n_layers=2, n_heads=2, ff_dim=16).double().eval()
    m = torch.randn(1, 5, net.in_width, dtype=torch.float64)
    mask = torch.tensor([[False, True, True, False, False]])
    m2 = m.clone()
    m2[0, 1:3] += torch.randn(2, net.in_width, dtype=torch.float64)
    f1, f2 = net.encode(m, mask), net.encode(m2, mask)
    torch.testing.assert_close(f1, f2, atol=1e-12, rtol=0)
    with pytest.raises(InvalidArgumentError):
        net.encode(m, torch.ones(1, 5, dtype=torch.bool))


def test_draw_masks():
    g = torch.Generator().manual_seed(0)
    masks = draw_masks(2000, 4, 0.3, g)
    assert not masks.all(-1).any()
    assert masks.float().mean().item() == pytest.approx(0.3, abs=0.02)


def test_lr_schedule():
    f = prior_estimator.lr_factor
    assert [f(e, 6, 9) for e in (0, 5, 6, 8, 9)] == [1.0, 1.0, 0.25, 0.25, 0.1]
    assert small_prior(n_epochs=100)._decay() == (60, 85)


def test_sq_reduction():
    a = torch.arange(12.0).reshape(1, 2, 6)
    b = torch.zeros(1, 2, 6)
    # Sum over each group of six, mean over the remaining axes.
    assert _sq(a, b, 6).item() == pytest.approx(((a[0, 0] ** 2).sum() + (a[0, 1] ** 2).sum()).item() / 2)
    assert _sq(a, b, 3).item() == pytest.approx((a ** 2).sum().item() / 4)


def test_recon_loss_zero_at_ground_truth(toy_windows, toy_model):
    target = stack_targets(toy_windows[:2], torch.float64)
    dx = torch.cat([torch.zeros_like(target.transl[:, :1]), target.transl.diff(dim=1)], 1)
    total, terms = recon_loss(target.rot6d, dx, target, toy_model, LossWeights())
    assert total.item() == pytest.approx(0.0, abs=1e-12)
    assert set(terms) == {"theta", "dtheta", "x", "dx", "joints", "verts"}


def test_prior_net_gradients_match_finite_differences():
    model = chain4()
    torch.manual_seed(0)
    net = PriorNet(n_joints=4, latent_dim=8, n_layers=1, n_heads=2, ff_dim=16).double()
    rng = np.random.default_rng(0)
    seqs = [MotionSequence(rng.normal(size=(4, 4, 3)) * 0.3, np.cumsum(rng.normal(size=(4, 3)) * 0.1, 0),
                           rng.normal(size=10) * 0.2) for _ in range(2)]
    target = stack_targets(seqs, torch.float64)
    mask = torch.tensor([[False, True, False, False], [False, False, False, True]])
    w = LossWeights()

    def loss_fn(weight):
        m = net.motion_params(target.rot6d, target.transl)

        def run(m):
            feats = net.encode(m, mask)
            q, p = net.posterior(m, feats, mask), net.prior_dist(feats)
            eps = torch.sin(torch.arange(q.mean.numel(), dtype=torch.float64)).view_as(q.mean)
            z = q.mean + torch.exp(0.5 * q.logvar) * eps
            rot6d, trans = net.decode(z)
            total, _ = recon_loss(rot6d, trans, target, model, w)
            return total + w.kl * kl_divergence(q, p)

        return _with_param(net, "rot_head.weight", weight, lambda: run(m))

    weight = net.rot_head.weight.detach().clone().requires_grad_()
    assert torch.autograd.gradcheck(loss_fn, (weight,), eps=1e-6, atol=1e-6, rtol=1e-4)


def _with_param(net, name, value, fn):
    mod_name, attr = name.rsplit(".", 1)
    mod = net.get_submodule(mod_name)
    orig = mod._parameters[attr]
    del mod._parameters[attr]
    setattr(mod, attr, value)
    try:
        return fn()
    finally:
        delattr(mod, attr)
        mod._parameters[attr] = orig


def test_fit_transform_shapes_and_clone(toy_windows):
    est = small_prior(window=40).fit(toy_windows)
    Z = est.transform(toy_windows)
    assert Z.shape == (4, 40, 16)
    assert np.isfinite(Z).all()
    rec = est.inverse_transform(Z[0], beta=toy_windows[0].beta, anchor=toy_windows[0].transl[0])[0]
    assert rec.theta.shape == (40, 24, 3)
    np.testing.assert_allclose(rec.transl[0], toy_windows[0].transl[0])
    c = clone(est)
    assert not hasattr(c, "net_") and c.get_params() == est.get_params()


def test_fit_rejects_bad_input(toy_windows):
    with pytest.raises(InvalidArgumentError):
        small_prior().fit([])
    with pytest.raises(InvalidArgumentError):
        small_prior().fit([toy_windows[0].slice(0, 10)])


def test_deterministic_training_and_resume(toy_windows, tmp_path):
    kw = dict(n_epochs=4, decay_epochs=(2, 3))
    a = small_prior(**kw).fit(toy_windows)
    b = small_prior(**kw).fit(toy_windows)
    assert a.param_hash() == b.param_hash()
    half = small_prior(n_epochs=2, decay_epochs=(2, 3), checkpoint_path=tmp_path / "half.pt").fit(toy_windows)
    assert half.param_hash() != a.param_hash()
    resumed = small_prior(**kw).fit(toy_windows, resume_from=tmp_path / "half.pt")
    assert resumed.param_hash() == a.param_hash()


def test_save_load_round_trip(toy_windows, toy_model, tmp_path):
    est = small_prior().fit(toy_windows)
    est.save(tmp_path / "p.pt")
    back = MotionPrior.load(tmp_path / "p.pt", body_model=toy_model)
    assert back.param_hash() == est.param_hash()
    np.testing.assert_array_equal(back.transform(toy_windows), est.transform(toy_windows))
    with pytest.raises(LoadError):
        MotionPrior.load(tmp_path / "absent.pt")
    with pytest.raises(LoadError, match="different body model"):
        MotionPrior.load(tmp_path / "p.pt", body_model=chain4())


def test_freeze_disables_gradients(toy_windows):
    est = small_prior(n_epochs=1).fit(toy_windows).freeze()
    assert not any(p.requires_grad for p in est.net_.parameters())


def test_non_finite_loss_raises(toy_windows, monkeypatch, tmp_path):
    real = prior_estimator.recon_loss

    def broken(*args, **kwargs):
        total, terms = real(*args, **kwargs)
        return total * float("nan"), terms

    monkeypatch.setattr(prior_estimator, "recon_loss", broken)
    log = tmp_path / "log.jsonl"
    with pytest.raises(NumericalError) as err:
        small_prior(log_path=log).fit(toy_windows)
    assert err.value.snapshot["step"] == 1
    assert (tmp_path / "log.jsonl.nan.json").exists()


def test_inbetween_passthrough(toy_windows):
    est = small_prior(n_epochs=1).fit(toy_windows)
    seq = toy_windows[1]
    keys = {t: seq.frame(t) for t in (0, 10, 39)}
    out = est.inbetween(keys)
    assert len(out) == 40
    for t in keys:
        np.testing.assert_array_equal(out.theta[t], seq.theta[t])
        np.testing.assert_array_equal(out.transl[t], seq.transl[t])
    with pytest.raises(InvalidArgumentError):
        est.inbetween({5: seq.frame(5)})
    with pytest.raises(InvalidArgumentError):
        est.inbetween({})


def test_slerp_baseline_against_scipy():
    from scipy.spatial.transform import Rotation, Slerp
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3, 3)) * 0.5
    keys = {0: PoseState(a, np.zeros(3), np.zeros(10)), 4: PoseState(b, np.array([4.0, 0, 0]), np.zeros(10))}
    out = slerp_baseline(keys, 5)
    for j in range(3):
        ref = Slerp([0, 4], Rotation.from_rotvec([a[j], b[j]]))([2]).as_rotvec()[0]
        np.testing.assert_allclose(out.theta[2, j], ref, atol=1e-12)
    np.testing.assert_allclose(out.transl[:, 0], [0, 1, 2, 3, 4])
