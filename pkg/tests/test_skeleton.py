import numpy as np
import pytest
import torch

from holdfield.geometry import DTYPE, ScaledRigid, inverse_apply
from holdfield.meshmetrics import TriMesh
from holdfield.skeleton import (
    HandState,
    Skeleton,
    blend_inverse,
    build_default_skeleton,
    forward_kinematics,
    forward_lbs,
    inverse_lbs,
    pose_hand,
    posed_joints,
    read_skeleton,
    roundtrip_error,
    skin_weights,
    template_sdf,
    write_skeleton,
)

EYE4 = torch.eye(4, dtype=DTYPE)


def chain() -> Skeleton:
    """Two unit bones along +x; bone 1 hangs off the joint at (1, 0, 0)."""
    template = TriMesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
        [[0, 1, 3], [1, 2, 3]],
    )
    weights = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.6, 0.4]]
    return Skeleton(
        (-1, 0), [[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [1, 0, 0]], [0.1, 0.1], template, weights, k=2
    )


def single_bone() -> Skeleton:
    template = TriMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    return Skeleton((-1,), [[0, 0, 0]], [[1, 0, 0]], [0.1], template, [[1.0]] * 3, k=2)


def state(theta, root: ScaledRigid | None = None, beta=None) -> HandState:
    theta = torch.as_tensor(theta, dtype=DTYPE)
    beta = torch.ones(theta.shape[0], dtype=DTYPE) if beta is None else beta
    return HandState(theta, torch.as_tensor(beta, dtype=DTYPE), root or ScaledRigid.identity())


@pytest.fixture(scope="module")
def hand() -> Skeleton:
    return build_default_skeleton()


def test_rest_pose_bones_are_identity():
    bones = forward_kinematics(chain(), HandState.rest(2))
    assert torch.allclose(bones, EYE4.expand(2, 4, 4))


def test_root_translation_propagates_rigidly():
    root = ScaledRigid(np.eye(3), [0.0, 0.0, 5.0])
    for bone in forward_kinematics(chain(), state(np.zeros((2, 3)), root)):
        assert torch.allclose(bone[:3, :3], torch.eye(3, dtype=DTYPE))
        assert bone[:3, 3].tolist() == [0.0, 0.0, 5.0]


def test_child_rotation_about_its_joint():
    hs = state([[0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]])
    out = forward_lbs(chain(), hs, [[2.0, 0.0, 0.0]], [[0.0, 1.0]])
    assert torch.allclose(out, torch.tensor([[1.0, 1.0, 0.0]], dtype=DTYPE), atol=1e-12)


def test_posed_joints_include_leaf_tips():
    joints = posed_joints(chain(), HandState.rest(2))
    assert joints.tolist() == [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]
    scaled = posed_joints(chain(), state(np.zeros((2, 3)), beta=[2.0, 1.0]))
    assert scaled[1].tolist() == [2.0, 0.0, 0.0]


def test_one_hot_weights_apply_single_bone():
    root = ScaledRigid.from_axis_angle([0.0, 0.3, 0.0], [1.0, 2.0, 3.0])
    hs = state([[0.1, 0.2, -0.3], [0.0, 0.4, 0.2]], root)
    bones = forward_kinematics(chain(), hs)
    p = torch.tensor([[0.3, -0.2, 0.5]], dtype=DTYPE)
    out = forward_lbs(chain(), hs, p, [[0.0, 1.0]])
    expected = (bones[1, :3, :3] @ p[0]) + bones[1, :3, 3]
    assert torch.allclose(out[0], expected)


def test_skin_weights_at_vertex_and_partition_of_unity():
    sk = chain()
    at_vertex = skin_weights(sk, [[1.0, 1.0, 0.0]])
    assert torch.allclose(at_vertex, torch.tensor([[0.6, 0.4]], dtype=DTYPE), atol=1e-5)
    rng = np.random.default_rng(1)
    w = skin_weights(sk, rng.uniform(-1.0, 3.0, size=(10_000, 3)))
    assert bool((w >= 0).all())
    assert float((w.sum(-1) - 1.0).abs().max()) < 1e-9


def test_skin_weights_symmetric_midpoint():
    template = TriMesh([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 5.0, 0.0]], [[0, 1, 2]])
    sk = Skeleton(
        (-1, 0),
        [[0, 0, 0], [1, 0, 0]],
        [[1, 0, 0], [1, 0, 0]],
        [0.1, 0.1],
        template,
        [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]],
        k=2,
    )
    w = skin_weights(sk, [[1.0, 0.0, 0.0]])
    assert torch.allclose(w, torch.tensor([[0.5, 0.5]], dtype=DTYPE), atol=1e-12)


def test_single_bone_skeleton():
    sk = single_bone()
    root = ScaledRigid.from_axis_angle([0.4, -0.1, 0.7], [0.5, -1.0, 2.0])
    hs = state(np.zeros((1, 3)), root)
    p = torch.tensor([[0.3, 0.8, -0.4], [2.0, 1.0, 1.0]], dtype=DTYPE)
    assert torch.allclose(skin_weights(sk, p), torch.ones(2, 1, dtype=DTYPE))
    assert torch.allclose(inverse_lbs(sk, hs, p), inverse_apply(root, p), atol=1e-12)
    x = torch.tensor([[0.1, 0.2, 0.3]], dtype=DTYPE)
    back = inverse_lbs(sk, hs, forward_lbs(sk, hs, x, [[1.0]]))
    assert float((back - x).abs().max()) < 1e-9


def test_inverse_lbs_is_identity_at_rest():
    p = torch.tensor([[0.5, 0.3, 0.2], [1.4, 0.6, -0.1]], dtype=DTYPE)
    assert torch.allclose(inverse_lbs(chain(), HandState.rest(2), p), p)


def test_blend_inverse_of_half_translation():
    shift = EYE4.clone()
    shift[2, 3] = 2.0
    bones = torch.stack([EYE4, shift])
    x, valid = blend_inverse(bones, torch.tensor([[0.5, 0.5]], dtype=DTYPE), [[0.0, 0.0, 1.0]])
    assert bool(valid.all())
    assert torch.allclose(x, torch.zeros(1, 3, dtype=DTYPE))


def test_hand_state_validation():
    with pytest.raises(ValueError, match="beta outside"):
        state(np.zeros((2, 3)), beta=[3.0, 1.0])
    with pytest.raises(ValueError, match="unit scale"):
        state(np.zeros((2, 3)), ScaledRigid(np.eye(3), [0.0, 0.0, 0.0], 2.0))
    with pytest.raises(ValueError, match="2 bones, skeleton 1"):
        forward_kinematics(single_bone(), HandState.rest(2))


def test_skeleton_validation():
    template = TriMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    with pytest.raises(ValueError, match="only root"):
        Skeleton((0,), [[0, 0, 0]], [[1, 0, 0]], [0.1], template, [[1.0]] * 3)
    with pytest.raises(ValueError, match="sum to 1"):
        Skeleton((-1,), [[0, 0, 0]], [[1, 0, 0]], [0.1], template, [[0.5]] * 3)


def test_default_template_distance(hand):
    assert hand.n_bones == 5
    assert len(hand.tip_vertex_ids) == len(hand.leaf_bones)
    # middle of the palm bone, far from the finger capsules
    on_axis = template_sdf(hand, [[-0.4, 0.0, 0.0]])
    assert float(on_axis[0]) == pytest.approx(-0.35, abs=1e-2)
    on_surface = template_sdf(hand, hand.template.vertices[:5])
    assert float(on_surface.abs().max()) < 1e-6
    far = template_sdf(hand, [[20.0, 0.0, 0.0]])
    assert float(far[0]) > 15.0


def test_default_skeleton_round_trip_error_is_small(hand):
    assert roundtrip_error(hand, HandState.rest(hand.n_bones)) < 1e-9
    theta = torch.zeros(hand.n_bones, 3, dtype=DTYPE)
    theta[2, 2] = 0.4
    bent = HandState(theta, torch.ones(5, dtype=DTYPE), ScaledRigid.identity())
    assert roundtrip_error(hand, bent) < 0.1


def test_posed_vertices_follow_forward_lbs(hand):
    hs = HandState(
        0.2 * torch.ones(hand.n_bones, 3, dtype=DTYPE),
        torch.ones(hand.n_bones, dtype=DTYPE),
        ScaledRigid.from_axis_angle([0.0, 0.5, 0.0], [1.0, 0.0, 0.0]),
    )
    posed = pose_hand(hand, hs)
    direct = forward_lbs(hand, hs, hand.canonical_vertices, hand.weight_table)
    assert torch.allclose(posed.vertices, direct)


def test_skeleton_manifest_round_trip(tmp_path):
    sk = chain()
    entry = write_skeleton(sk, tmp_path)
    back = read_skeleton(entry, tmp_path)
    assert back.parents == sk.parents
    assert np.allclose(back.template.vertices, sk.template.vertices)
    assert np.allclose(back.template_weights, sk.template_weights, atol=1e-6)
    assert entry["weight_query"] == "posed"
