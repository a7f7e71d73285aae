import numpy as np
import pytest
import torch
import trimesh

from holdfield.errors import DegenerateMesh
from holdfield.geometry import DTYPE, Camera, apply, project
from holdfield.meshmetrics import TriMesh
from holdfield.refine import (
    ContactSpec,
    RefineProblem,
    RefineSettings,
    align_init,
    contact_gate,
    loss_contact,
    loss_mask,
    loss_reproj,
    refine_poses,
    resample_labels,
    soft_rasterize,
)
from holdfield.skeleton import HandState, build_default_skeleton, pose_hand, posed_joints


def camera(width: int = 16) -> Camera:
    eye, target = (0.0, 0.0, -4.0), (0.0, 0.0, 0.0)
    return Camera.look_at(eye, target, focal=2.5 * width, width=width, height=width)


def grasp_problem(object_offset=(0.0, 0.0, 0.0), **overrides):
    """One frame whose observations are exact for the rest hand and an identity object."""
    sk = build_default_skeleton()
    hs = HandState.rest(sk.n_bones)
    cam = Camera.look_at((0.5, 0.0, -10.0), (0.5, 0.0, 0.0), focal=100.0, width=64, height=64)
    tips = pose_hand(sk, hs).vertices[list(sk.tip_vertex_ids)]
    rng = np.random.default_rng(0)
    extra = torch.as_tensor(rng.normal(0.0, 0.4, size=(12, 3)) + [1.5, -0.5, 0.0], dtype=DTYPE)
    cloud = torch.cat([tips, extra])
    translation = torch.tensor(object_offset, dtype=DTYPE)[None]
    kwargs = dict(
        skeleton=sk,
        cameras=(cam,),
        theta=torch.zeros(1, sk.n_bones, 3, dtype=DTYPE),
        hand_rotations=torch.eye(3, dtype=DTYPE)[None],
        hand_translations=torch.zeros(1, 3, dtype=DTYPE),
        object_rotations=torch.eye(3, dtype=DTYPE)[None],
        object_translations=translation,
        beta=torch.ones(sk.n_bones, dtype=DTYPE),
        scale=1.0,
        object_cloud=cloud,
        contact=ContactSpec.for_skeleton(sk),
        joints_2d=project(cam, posed_joints(sk, hs))[None],
        cloud_2d=project(cam, cloud)[None],
    )
    kwargs.update(overrides)
    return RefineProblem(**kwargs), cloud


def test_contact_examples():
    spec = ContactSpec((0,))
    assert float(loss_contact([[0.0, 0.0, 1.0]], [[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]], spec)) == 1.0
    obj = torch.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], dtype=DTYPE)
    hand = torch.tensor([[4.0, 5.0, 6.0], [9.0, 9.0, 9.0], [1.0, 2.0, 3.0]], dtype=DTYPE)
    assert float(loss_contact(hand, obj, ContactSpec((0, 2)))) == 0.0


def test_contact_matches_brute_force():
    sphere = trimesh.creation.uv_sphere(radius=0.7, count=[10, 10])
    obj = torch.as_tensor(np.asarray(sphere.vertices), dtype=DTYPE)
    assert 80 <= len(obj) <= 120
    hand = torch.tensor([[1.0, 0.2, 0.1], [-0.3, 1.4, 0.0], [0.0, 0.0, -2.0]], dtype=DTYPE)
    spec = ContactSpec((0, 1, 2))
    expected = sum(min(float(torch.linalg.vector_norm(h - o)) for o in obj) for h in hand)
    assert float(loss_contact(hand, obj, spec)) == pytest.approx(expected, rel=1e-12)


def test_contact_spec_validation():
    with pytest.raises(ValueError, match="at least one"):
        ContactSpec(())
    with pytest.raises(ValueError, match="out of range"):
        loss_contact([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], ContactSpec((3,)))


def test_soft_rasterize_inside_and_outside():
    big = [[-2.0, -2.0, 0.0], [2.0, -2.0, 0.0], [0.0, 2.0, 0.0]]
    sil = soft_rasterize(big, [[0, 1, 2]], camera())
    assert sil.shape == (16, 16)
    assert float(sil[8, 8]) > 0.99
    corner = [[-0.3, -0.3, 0.0], [-0.2, -0.3, 0.0], [-0.25, -0.2, 0.0]]
    sil = soft_rasterize(corner, [[0, 1, 2]], camera())
    assert float(sil[15, 15]) < 1e-3
    assert float(sil.min()) >= 0.0 and float(sil.max()) <= 1.0


def test_soft_rasterize_sharpness_limit():
    big = [[-2.0, -2.0, 0.0], [2.0, -2.0, 0.0], [0.0, 2.0, 0.0]]
    sil = soft_rasterize(big, [[0, 1, 2]], camera(), sharpness=1e-4)
    assert float(sil[8, 8]) == pytest.approx(1.0, abs=1e-9)


def test_soft_rasterize_rejects_degenerate_mesh():
    flat = [[0.0, 0.0, 0.0], [0.1, 0.1, 0.0], [0.2, 0.2, 0.0]]
    with pytest.raises(DegenerateMesh):
        soft_rasterize(flat, [[0, 1, 2]], camera())


def test_soft_rasterize_gradient_matches_finite_differences():
    tri = torch.tensor(
        [[-0.5, -0.4, 0.0], [0.6, -0.3, 0.0], [0.0, 0.5, 0.0]], dtype=DTYPE, requires_grad=True
    )

    def coverage(v):
        return soft_rasterize(v, [[0, 1, 2]], camera(8), sharpness=0.1).sum()

    assert torch.autograd.gradcheck(coverage, (tri,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_mask_examples():
    labels = np.array([[0, 1], [2, 2]])
    hand = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=DTYPE)
    obj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=DTYPE)
    assert float(loss_mask(hand, obj, labels)) == 0.0
    # the hand extends behind the object pixel; that pixel is not penalised
    occluded = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=DTYPE)
    assert float(loss_mask(occluded, obj, labels)) == 0.0


def test_mask_checkerboard_against_uniform_silhouette():
    labels = np.indices((4, 4)).sum(axis=0) % 2 * 2
    half = torch.full((4, 4), 0.5, dtype=DTYPE)
    assert float(loss_mask(half, None, labels)) == pytest.approx(0.5)


def test_mask_ignores_excluded_pixels():
    labels = np.array([[0, 1, 255], [2, 0, 1]])
    base = torch.tensor([[0.8, 0.1, 0.2], [0.3, 0.6, 0.4]], dtype=DTYPE)
    changed = base.clone()
    changed[0, 1], changed[0, 2], changed[1, 2] = 0.9, 0.0, 1.0
    obj = torch.zeros(2, 3, dtype=DTYPE)
    expected = float(loss_mask(changed, obj, labels))
    assert float(loss_mask(base, obj, labels)) == pytest.approx(expected)
    with pytest.raises(ValueError, match="silhouette"):
        loss_mask(torch.zeros(3, 3, dtype=DTYPE), None, labels)


def test_resample_labels_nearest():
    labels = np.array([[0, 1], [2, 255]])
    up = resample_labels(labels, 4, 4)
    assert up.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 255, 255], [2, 2, 255, 255]]


def test_reproj_examples():
    cam = camera(64)
    points = torch.tensor([[0.1, 0.2, 0.0], [-0.3, 0.1, 0.5], [0.2, -0.2, -0.5]], dtype=DTYPE)
    exact = project(cam, points)
    assert float(loss_reproj(points, exact, cam)) == 0.0
    assert float(loss_reproj(points, exact + torch.tensor([2.0, 0.0], dtype=DTYPE), cam)) == (
        pytest.approx(2.0)
    )
    noisy = exact + torch.tensor([[1.0, 1.0], [0.0, 3.0], [-4.0, 0.0]], dtype=DTYPE)
    assert float(loss_reproj(points, noisy, cam)) == pytest.approx((2.0**0.5 + 3.0 + 4.0) / 3.0)


def test_problem_validation():
    with pytest.raises(ValueError, match="frames"):
        grasp_problem(hand_translations=torch.zeros(2, 3, dtype=DTYPE))
    with pytest.raises(ValueError, match="scale"):
        grasp_problem(scale=0.0)


def test_align_init_keeps_exact_poses():
    problem, _ = grasp_problem()
    result = align_init(problem)
    assert result.final_terms["energy_contact"] < 1e-9
    assert result.final_terms["energy_reproj"] < 1e-9
    solved = result.problem
    assert torch.allclose(solved.hand_translations, problem.hand_translations, atol=1e-4)
    assert torch.allclose(solved.object_translations, problem.object_translations, atol=1e-4)
    assert solved.scale == pytest.approx(1.0, abs=1e-4)
    assert torch.allclose(solved.beta, problem.beta, atol=1e-4)


def test_contact_gate_skips_distant_objects():
    near, _ = grasp_problem()
    assert contact_gate(near).tolist() == [True]
    far, _ = grasp_problem(object_offset=(0.0, 10.0, 0.0))
    assert contact_gate(far).tolist() == [False]


def test_refine_poses_requires_object_mesh():
    problem, _ = grasp_problem()
    with pytest.raises(ValueError, match="object mesh"):
        refine_poses(problem)


def test_refine_poses_recovers_object_shift_monotonically():
    sphere = trimesh.creation.icosphere(subdivisions=1, radius=0.3)
    mesh = TriMesh(sphere.vertices, sphere.faces)
    problem, cloud = grasp_problem(object_offset=(0.4, 0.0, 0.0), object_mesh=mesh)
    settings = RefineSettings(grasp_gate=0.0, max_iters=300)
    result = refine_poses(problem, settings)
    energies = [r["energy_total"] for r in result.history if r["accepted"]]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert result.final_terms["energy_total"] < result.initial_terms["energy_total"]
    moved = apply(result.problem.object_pose(0), cloud)
    before = float((apply(problem.object_pose(0), cloud) - cloud).norm(dim=-1).mean())
    after = float((moved - cloud).norm(dim=-1).mean())
    assert after < 0.5 * before
    assert result.provenance["stage"] == "refine"


def test_align_init_never_trades_reprojection_for_contact():
    offset = (0.0, 0.6, 0.0)
    exact, cloud = grasp_problem()
    shifted = project(exact.cameras[0], cloud + torch.tensor(offset, dtype=DTYPE))
    problem, _ = grasp_problem(object_offset=offset, cloud_2d=shifted[None])
    records = []
    result = align_init(problem, on_iteration=records.append)
    before = result.initial_terms["energy_reproj"]
    assert result.initial_terms["energy_contact"] > 1.0
    assert result.final_terms["energy_reproj"] <= 1.05 * before + 1e-9
    # contact alone would have pulled the poses outside the bound
    assert any(r["energy_reproj"] > 1.05 * before + 1e-9 for r in records if r["accepted"])
    assert not result.converged
    kept = result.problem.object_translations
    assert torch.allclose(kept, problem.object_translations, atol=1e-3)


def test_align_init_recovers_object_scale():
    problem, _ = grasp_problem(scale=2.0)
    result = align_init(problem, RefineSettings(w_reproj=1.0, max_iters=1000))
    assert result.problem.scale == pytest.approx(1.0, rel=0.05)
    assert result.final_terms["energy_reproj"] < result.initial_terms["energy_reproj"]
