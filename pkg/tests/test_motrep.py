import numpy as np
import pytest
import torch

from motionprior import motrep, rotconv
from motionprior.body import MotionSequence
from motionprior.exceptions import DegenerateRotationError
from motionprior.motrep import (DeltaExpander, build_motion_params, compute_delta_x,
                                integrate_delta_x, params_to_pose)


def random_seq(seed, T=12, J=24):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(T, J, 3)) * 0.5
    transl = np.cumsum(rng.normal(size=(T, 3)) * 0.05, 0)
    return MotionSequence(theta, transl, rng.normal(size=10), 10.0, f"s{seed}")


def test_delta_examples():
    assert np.abs(compute_delta_x(np.ones((5, 3)) * 2.5)).max() == 0
    x = np.stack([np.arange(4.0), np.zeros(4), np.zeros(4)], -1)
    np.testing.assert_array_equal(compute_delta_x(x), [[0, 0, 0], [1, 0, 0], [1, 0, 0], [1, 0, 0]])


def test_integrate_examples():
    a = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(integrate_delta_x(np.zeros((4, 3)), a), np.tile(a, (4, 1)))
    ramp = integrate_delta_x(np.ones((4, 3)), np.zeros(3))
    np.testing.assert_array_equal(ramp[:, 0], [1, 2, 3, 4])


def test_delta_round_trip_exact(rng):
    x = rng.normal(size=(30, 3))
    np.testing.assert_allclose(integrate_delta_x(compute_delta_x(x), x[0]), x, atol=1e-12)
    xt = torch.as_tensor(x)
    back = integrate_delta_x(compute_delta_x(xt), xt[0])
    np.testing.assert_allclose(back.numpy(), x, atol=1e-12)


def test_zero_motion_params():
    seq = MotionSequence(np.zeros((3, 24, 3)), np.zeros((3, 3)), np.zeros(10))
    m = build_motion_params(seq, DeltaExpander(zero_init=True))
    assert m.shape == (3, 288)
    np.testing.assert_array_equal(m[:, :144].detach().numpy(), np.tile([1.0, 0, 0, 0, 1, 0], (3, 24)))
    assert m[:, 144:].abs().max() == 0


@pytest.mark.parametrize("repr, width", [("delta_144", 288), ("abs_144", 288), ("delta_3", 147), ("abs_3", 147)])
def test_widths(repr, width):
    m = build_motion_params(random_seq(0, T=5), DeltaExpander().double(), repr)
    assert m.shape == (5, width)
    assert motrep.params_width(repr, 24) == width


def test_rotation_block_matches_composition():
    seq = random_seq(1, T=4)
    m = build_motion_params(seq, DeltaExpander().double())
    ref = rotconv.matrix_to_6d(rotconv.aa_to_matrix(seq.theta)).reshape(4, 144)
    np.testing.assert_allclose(m[:, :144].detach().numpy(), ref, atol=1e-12)


def test_delta_block_ignores_offset():
    seq = random_seq(2, T=6)
    shifted = MotionSequence(seq.theta, seq.transl + [3.0, -1.0, 0.5], seq.beta)
    exp = DeltaExpander().double()
    a, b = build_motion_params(seq, exp), build_motion_params(shifted, exp)
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(100))
def test_build_decode_round_trip(seed):
    seq = random_seq(seed, T=8)
    exp = DeltaExpander().double()
    m = build_motion_params(seq, exp, "delta_3")
    back = params_to_pose(m[:, :144], m[:, 144:], seq.beta, seq.transl[0])
    R, R2 = rotconv.aa_to_matrix(seq.theta), rotconv.aa_to_matrix(back.theta)
    assert rotconv.geodesic_angle(R, R2).max() < 1e-6
    np.testing.assert_allclose(back.transl, seq.transl, atol=1e-9)


def test_decode_scale_and_anchor():
    seq = random_seq(3, T=5)
    m = build_motion_params(seq, DeltaExpander().double(), "delta_3").detach()
    a = params_to_pose(m[:, :144], m[:, 144:], seq.beta, np.zeros(3))
    b = params_to_pose(2 * m[:, :144], m[:, 144:], seq.beta, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-9)
    np.testing.assert_allclose(b.transl - a.transl, np.tile([1.0, 2.0, 3.0], (5, 1)), atol=1e-12)


def test_decode_degenerate_names_frame_and_joint():
    d = torch.tensor([1.0, 0, 0, 0, 1, 0]).repeat(3, 24).double()
    d[1, 6 * 5: 6 * 6] = torch.tensor([1.0, 0, 0, 2, 0, 0])
    with pytest.raises(DegenerateRotationError, match="frame 1, joint 5"):
        params_to_pose(d, torch.zeros(3, 3), np.zeros(10), np.zeros(3))


def test_expander_gradient_finite_differences():
    exp = DeltaExpander(out_dim=12, hidden=8).double()
    seq = random_seq(4, T=5, J=2)

    params = list(exp.parameters())
    # Finite differences on a flattened copy of the expander weights.
    flat = torch.nn.utils.parameters_to_vector(params).detach().clone().requires_grad_()

    def g(flat):
        out, i = [], 0
        for p in params:
            out.append(flat[i:i + p.numel()].view_as(p))
            i += p.numel()
        rot6d = motrep.sequence_rot6d(seq)
        dx = compute_delta_x(torch.as_tensor(seq.transl)) * exp.in_scale
        h = torch.nn.functional.gelu(dx @ out[0].T + out[1])
        block = h @ out[2].T + out[3]
        return (torch.cat([rot6d, block], -1) ** 2).sum()

    assert torch.autograd.gradcheck(g, (flat,), eps=1e-6, atol=1e-6, rtol=1e-4)
    # The module's own autograd agrees with the functional rewrite.
    exp.zero_grad()
    (build_motion_params(seq, exp) ** 2).sum().backward()
    auto = torch.cat([p.grad.reshape(-1) for p in params])
    ref = torch.autograd.grad(g(flat), flat)[0]
    torch.testing.assert_close(auto, ref, atol=1e-9, rtol=1e-7)
