import numpy as np
import pytest
import torch

from motionprior import body, rotconv
from motionprior.body import BodyModel, forward_kinematics, load_model, shape_blend, skin
from motionprior.exceptions import InvalidArgumentError, LoadError

from conftest import random_rotations


def chain_model(n=3, n_betas=2):
    """Serial chain whose vertices sit on the joints and follow them one-hot."""
    verts = np.array([[0.0, i, 0.0] for i in range(n)]) + [0.1, 0.2, 0.3]
    basis = np.zeros((n, 3, n_betas))
    basis[1, 1, 0] = 0.1
    return BodyModel(verts, np.array([[0, 1, 2]]), basis, np.eye(n), np.eye(n),
                     np.arange(-1, n - 1), name="chain")


def fk(model, theta, x, beta):
    R = rotconv.aa_to_matrix(torch.as_tensor(theta, dtype=torch.float64))
    joints, grots = forward_kinematics(model, R, x, beta)
    return joints.numpy(), grots.numpy()


def test_shape_blend_examples():
    m = chain_model()
    np.testing.assert_array_equal(shape_blend(m, np.zeros(2)).numpy(), m.template_vertices)
    moved = shape_blend(m, np.array([1.0, 0.0])).numpy() - m.template_vertices
    np.testing.assert_allclose(moved[1], [0, 0.1, 0])
    assert np.abs(np.delete(moved, 1, axis=0)).max() == 0


def test_shape_blend_linear(toy_model, rng):
    beta = rng.normal(size=10)
    t = toy_model.template_vertices
    d1 = shape_blend(toy_model, beta).numpy() - t
    d2 = shape_blend(toy_model, 2 * beta).numpy() - t
    np.testing.assert_allclose(d2, 2 * d1, atol=1e-12)


def test_shape_blend_rejects_wrong_length(toy_model):
    with pytest.raises(InvalidArgumentError):
        shape_blend(toy_model, np.zeros(3))


def test_fk_identity_pose_gives_rest_joints(toy_model, rng):
    beta = rng.normal(size=10) * 0.5
    joints, _ = fk(toy_model, np.zeros((24, 3)), np.zeros(3), beta)
    rest = toy_model.joint_regressor @ shape_blend(toy_model, beta).numpy()
    np.testing.assert_allclose(joints, rest, atol=1e-12)


def test_fk_two_joint_example():
    m = BodyModel(np.array([[0.0, 0, 0], [0, 1, 0]]), np.zeros((0, 3), int), np.zeros((2, 3, 1)),
                  np.eye(2), np.eye(2), np.array([-1, 0]))
    joints, _ = fk(m, [[0, 0, np.pi / 2], [0, 0, 0]], np.zeros(3), np.zeros(1))
    np.testing.assert_allclose(joints[1], [-1, 0, 0], atol=1e-12)


def test_fk_matches_hand_rolled_chain():
    m = chain_model()
    R = random_rotations(3, seed=5)
    x = np.array([0.3, -0.2, 1.0])
    rest = m.template_vertices
    # Sequential composition written out joint by joint.
    G0 = R[0]
    p0 = rest[0] + x
    G1 = G0 @ R[1]
    p1 = p0 + G0 @ (rest[1] - rest[0])
    p2 = p1 + G1 @ (rest[2] - rest[1])
    joints, grots = forward_kinematics(m, torch.as_tensor(R), x, np.zeros(2))
    np.testing.assert_allclose(joints.numpy(), [p0, p1, p2], atol=1e-9)
    np.testing.assert_allclose(grots.numpy()[2], G1 @ R[2], atol=1e-9)


def test_translation_equivariance(toy_model, rng):
    theta = rng.normal(size=(24, 3)) * 0.3
    beta = rng.normal(size=10) * 0.3
    x = np.array([0.5, -1.0, 2.0])
    R = rotconv.aa_to_matrix(torch.as_tensor(theta))
    v0, j0 = skin(toy_model, R, np.zeros(3), beta, return_joints=True)
    v1, j1 = skin(toy_model, R, x, beta, return_joints=True)
    np.testing.assert_allclose(j1.numpy(), j0.numpy() + x, atol=1e-12)
    np.testing.assert_allclose(v1.numpy(), v0.numpy() + x, atol=1e-12)


def test_skin_rest_pose(toy_model, rng):
    beta = rng.normal(size=10) * 0.5
    R = torch.eye(3, dtype=torch.float64).expand(24, 3, 3)
    np.testing.assert_allclose(skin(toy_model, R, np.zeros(3), beta).numpy(),
                               shape_blend(toy_model, beta).numpy(), atol=1e-12)


def test_skin_one_hot_is_rigid():
    m = chain_model()
    R = torch.as_tensor(random_rotations(3, seed=9))
    x = np.array([0.1, 0.0, -0.4])
    verts = skin(m, R, x, np.zeros(2)).numpy()
    joints, grots = forward_kinematics(m, R, x, np.zeros(2))
    rest = m.template_vertices
    for j in range(3):
        expected = grots[j].numpy() @ (rest[j] - rest[j]) + joints[j].numpy()
        np.testing.assert_allclose(verts[j], expected, atol=1e-9)


def test_skin_one_hot_vertex_in_toy_model(toy_model, rng):
    # Any vertex bound entirely to one joint moves with that joint's global transform.
    w = toy_model.skin_weights
    rows = np.where(w.max(1) > 1 - 1e-12)[0]
    if len(rows) == 0:
        pytest.skip("toy model has no one-hot vertices")
    theta = rng.normal(size=(24, 3)) * 0.4
    R = rotconv.aa_to_matrix(torch.as_tensor(theta))
    verts, joints = skin(toy_model, R, np.zeros(3), np.zeros(10), return_joints=True)
    _, grots = forward_kinematics(toy_model, R, np.zeros(3), np.zeros(10))
    rest_j = toy_model.joint_regressor @ toy_model.template_vertices
    for n in rows[:20]:
        j = w[n].argmax()
        expected = grots[j].numpy() @ (toy_model.template_vertices[n] - rest_j[j]) + joints[j].numpy()
        np.testing.assert_allclose(verts[n].numpy(), expected, atol=1e-9)


def test_global_root_rotation_is_rigid(toy_model, rng):
    theta = rng.normal(size=(24, 3)) * 0.3
    beta = rng.normal(size=10) * 0.3
    R = rotconv.aa_to_matrix(torch.as_tensor(theta))
    R0 = torch.as_tensor(random_rotations(1, seed=4)[0])
    R2 = R.clone()
    R2[0] = R0 @ R[0]
    v, j = skin(toy_model, R, np.zeros(3), beta, return_joints=True)
    v2, j2 = skin(toy_model, R2, np.zeros(3), beta, return_joints=True)
    root = j[0]
    np.testing.assert_allclose(j2.numpy(), ((j - root) @ R0.T + root).numpy(), atol=1e-6)
    np.testing.assert_allclose(v2.numpy(), ((v - root) @ R0.T + root).numpy(), atol=1e-6)


def test_outputs_differentiable(toy_model):
    g = torch.Generator().manual_seed(0)
    d6 = (torch.tensor([1.0, 0, 0, 0, 1, 0]).repeat(24, 1) + 0.2 * torch.randn(24, 6, generator=g))
    d6 = d6.double().requires_grad_()
    x = torch.randn(3, generator=g, dtype=torch.float64, requires_grad=True)
    beta = torch.randn(10, generator=g, dtype=torch.float64, requires_grad=True)

    def f(d6, x, beta):
        verts, joints = skin(toy_model, rotconv.sixd_to_matrix(d6), x, beta, return_joints=True)
        return verts[::40], joints

    assert torch.autograd.gradcheck(f, (d6, x, beta), eps=1e-5, atol=1e-8, rtol=1e-4)


def test_toy_model_deterministic_and_valid():
    a, b = body.make_toy_model(), body.make_toy_model()
    for attr in ("template_vertices", "faces", "shape_basis", "joint_regressor", "skin_weights", "parents"):
        np.testing.assert_array_equal(getattr(a, attr), getattr(b, attr))
    assert a.fingerprint() == b.fingerprint()
    assert a.n_joints == 24 and a.n_betas == 10
    v = a.template_vertices
    assert np.isfinite(v).all()
    assert (v.max(0) - v.min(0)).max() < 2.0
    np.testing.assert_allclose(a.skin_weights.sum(1), 1.0, atol=1e-9)
    np.testing.assert_allclose(a.joint_regressor.sum(1), 1.0, atol=1e-9)


def test_invalid_model_rejected():
    m = chain_model()
    with pytest.raises(InvalidArgumentError):
        BodyModel(m.template_vertices, m.faces, m.shape_basis, m.joint_regressor * 2, m.skin_weights, m.parents)
    with pytest.raises(InvalidArgumentError):
        BodyModel(m.template_vertices, m.faces, m.shape_basis, m.joint_regressor, m.skin_weights,
                  np.array([-1, 2, 0]))


def smpl_asset(tmp_path, **drop):
    rng = np.random.default_rng(0)
    N, J = 6890, 24
    reg = np.zeros((J, N))
    reg[np.arange(J), np.arange(J) * 10] = 1.0
    weights = np.zeros((N, J))
    weights[np.arange(N), np.arange(N) % J] = 1.0
    fields = {"v_template": rng.normal(size=(N, 3)), "f": np.array([[0, 1, 2], [2, 3, 4]]),
              "shapedirs": rng.normal(size=(N, 3, 12)) * 0.01, "J_regressor": reg,
              "weights": weights, "kintree_table": np.stack([np.array(body.SMPL_PARENTS), np.arange(J)]),
              "posedirs": np.zeros((N, 3, 4))}
    for k in drop:
        fields.pop(k)
    path = tmp_path / "model.npz"
    np.savez(path, **fields)
    return path, fields


def test_load_model_round_trip(tmp_path):
    path, fields = smpl_asset(tmp_path)
    m = load_model(path)
    assert (m.n_vertices, m.n_joints, m.n_betas) == (6890, 24, 10)
    R = torch.eye(3, dtype=torch.float64).expand(24, 3, 3)
    np.testing.assert_allclose(skin(m, R, np.zeros(3), np.zeros(10)).numpy(), fields["v_template"], atol=1e-6)


def test_load_model_errors(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        load_model(tmp_path / "absent.npz")
    path, _ = smpl_asset(tmp_path, weights=None)
    with pytest.raises(LoadError, match="weights"):
        load_model(path)
    good, _ = smpl_asset(tmp_path)
    raw = good.read_bytes()
    trunc = tmp_path / "trunc.npz"
    trunc.write_bytes(raw[: len(raw) // 3])
    with pytest.raises(LoadError):
        load_model(trunc)
