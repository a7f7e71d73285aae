import numpy as np
import pytest
import torch
import trimesh

from holdfield.fields import CANONICAL_BOUND, Sphere
from holdfield.geometry import DTYPE, RayBundle
from holdfield.losses import (
    FAR_THRESHOLD,
    IGNORE_LABEL,
    FarRaySets,
    LossWeights,
    Ramp,
    far_ray_sets,
    loss_eikonal,
    loss_rgb,
    loss_sdf,
    loss_segm,
    loss_sparse,
    sdf_prior_points,
    total_loss,
)
from holdfield.meshmetrics import TriMesh
from holdfield.rendering import RenderOutput
from holdfield.skeleton import build_default_skeleton, template_sdf


class ScaledSphere:
    def __init__(self, factor: float = 1.0, offset: float = 0.0):
        self.factor = factor
        self.offset = offset

    def sdf(self, x):
        return self.factor * Sphere(0.5).sdf(x) + self.offset


class TemplateField:
    def __init__(self, sk, offset: float = 0.0):
        self.sk = sk
        self.offset = offset

    def sdf(self, x):
        return template_sdf(self.sk, x) + self.offset


def masks_output(mask_hand, mask_object) -> RenderOutput:
    n = len(mask_hand)
    zeros = torch.zeros(n, dtype=DTYPE)
    rgb = torch.zeros(n, 3, dtype=DTYPE)
    return RenderOutput(
        rgb,
        rgb,
        zeros,
        torch.tensor(mask_hand, dtype=DTYPE),
        torch.tensor(mask_object, dtype=DTYPE),
        rgb,
        zeros,
    )


def test_rgb_examples():
    target = torch.rand(4, 3, dtype=DTYPE)
    assert float(loss_rgb(target, target)) == 0.0
    assert float(loss_rgb(target + 0.1, target)) == pytest.approx(0.3)
    shifted = target.clone()
    shifted[2, 0] += 0.2
    assert float(loss_rgb(shifted, target)) == pytest.approx(0.05)


def test_rgb_mask_drops_rays():
    color = torch.zeros(3, 3, dtype=DTYPE)
    target = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [5.0, 5.0, 5.0]], dtype=DTYPE)
    mask = torch.tensor([True, True, False])
    assert float(loss_rgb(color, target, mask)) == pytest.approx(0.5)
    assert float(loss_rgb(color, target, torch.zeros(3, dtype=torch.bool))) == 0.0


def test_segm_examples():
    labels = torch.tensor([0, 1, 2])
    exact = torch.eye(3, dtype=DTYPE)
    assert float(loss_segm(exact, labels)) == 0.0
    uniform = torch.full((1, 3), 1.0 / 3.0, dtype=DTYPE)
    assert float(loss_segm(uniform, torch.tensor([0]))) == pytest.approx(4.0 / 3.0)


def test_segm_ignores_unlabelled_rays():
    classes = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
    assert float(loss_segm(classes, torch.tensor([0, IGNORE_LABEL]))) == 0.0
    assert float(loss_segm(classes, torch.tensor([IGNORE_LABEL, IGNORE_LABEL]))) == 0.0


def test_segm_is_permutation_symmetric():
    gen = torch.Generator().manual_seed(2)
    classes = torch.softmax(torch.randn(6, 3, generator=gen, dtype=DTYPE), -1)
    labels = torch.tensor([0, 1, 2, 2, 1, 0])
    perm = torch.tensor([3, 5, 0, 1, 4, 2])
    assert float(loss_segm(classes[perm], labels[perm])) == pytest.approx(
        float(loss_segm(classes, labels))
    )


def test_sdf_examples():
    sk = build_default_skeleton()
    points = sdf_prior_points(sk, 64, seed=0)
    assert float(loss_sdf(TemplateField(sk), sk, points)) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_sdf(TemplateField(sk, 0.1), sk, points)) == pytest.approx(0.1)
    target = template_sdf(sk, points)
    assert float(loss_sdf(ScaledSphere(), sk, points, target)) == pytest.approx(
        float((Sphere(0.5).sdf(points) - target).abs().mean())
    )


def test_sdf_prior_points_mix_uniform_and_shell():
    sk = build_default_skeleton()
    points = sdf_prior_points(sk, 200, seed=3)
    assert points.shape == (200, 3)
    assert float(points[:100].abs().max()) <= CANONICAL_BOUND
    shell = template_sdf(sk, points[100:]).abs()
    assert float(shell.median()) < 0.1


def test_eikonal_examples():
    rng = np.random.default_rng(0)
    points = torch.as_tensor(rng.uniform(0.2, 1.5, size=(32, 3)), dtype=DTYPE)
    assert float(loss_eikonal([(ScaledSphere(), points)])) < 1e-10
    assert float(loss_eikonal([(ScaledSphere(2.0), points)])) == pytest.approx(1.0)
    both = loss_eikonal([(ScaledSphere(), points), (ScaledSphere(2.0), points)])
    assert float(both) == pytest.approx(0.5)
    assert float(loss_eikonal([])) == 0.0


def test_sparse_examples():
    sets = FarRaySets(torch.ones(4, dtype=torch.bool), torch.zeros(4, dtype=torch.bool))
    out = masks_output([0.4, 0.0, 0.0, 0.0], [0.9, 0.9, 0.9, 0.9])
    loss, empty = loss_sparse(out, sets)
    assert float(loss) == pytest.approx(0.1)
    assert not empty
    none = FarRaySets(torch.zeros(4, dtype=torch.bool), torch.zeros(4, dtype=torch.bool))
    loss, empty = loss_sparse(out, none)
    assert float(loss) == 0.0
    assert empty


def test_far_ray_sets_threshold():
    sphere = trimesh.creation.icosphere(subdivisions=3, radius=0.5)
    mesh = TriMesh(sphere.vertices, sphere.faces)
    origins = torch.tensor(
        [[-3.0, 0.5 + FAR_THRESHOLD - 1e-3, 0.0], [-3.0, 2.0, 0.0]], dtype=DTYPE
    )
    directions = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=DTYPE)
    near = torch.zeros(2, dtype=DTYPE)
    far = torch.full((2,), 6.0, dtype=DTYPE)
    sets = far_ray_sets(RayBundle(origins, directions), near, far, mesh, None)
    assert sets.hand.tolist() == [False, True]
    assert sets.object.tolist() == [False, False]


def test_total_loss_examples():
    zero = torch.zeros((), dtype=DTYPE)
    weights = LossWeights().at(0, 10)
    assert float(total_loss({k: zero for k in ("rgb", "segm", "sdf")}, weights).total) == 0.0
    only_rgb = total_loss({"rgb": torch.ones((), dtype=DTYPE)}, dict.fromkeys(weights, 0.0))
    assert float(only_rgb.total) == 1.0
    terms = {k: torch.ones((), dtype=DTYPE) for k in ("rgb", "segm", "sdf", "sparse", "eikonal")}
    first = total_loss(terms, LossWeights().at(0, 10))
    last = total_loss(terms, LossWeights().at(9, 10))
    assert float(first.total) == pytest.approx(1.0 + 1.0 + 0.1 + 0.0 + 0.1)
    assert float(last.total) == pytest.approx(1.0 + 0.1 + 1.0 + 0.5 + 0.1)
    record = last.to_record()
    assert record["lambda_segm"] == pytest.approx(0.1)
    assert record["loss_rgb"] == 1.0


def test_schedule_is_monotone():
    weights = LossWeights()
    curve = [weights.at(e, 20) for e in range(20)]
    assert all(b["segm"] <= a["segm"] for a, b in zip(curve, curve[1:]))
    assert all(b["sdf"] >= a["sdf"] for a, b in zip(curve, curve[1:]))
    assert all(b["sparse"] >= a["sparse"] for a, b in zip(curve, curve[1:]))
    assert weights.at(0, 1)["segm"] == 1.0


def test_schedule_validation_and_dict_form():
    with pytest.raises(ValueError, match="must not increase"):
        LossWeights(segm=Ramp(0.1, 1.0))
    with pytest.raises(ValueError, match="nonnegative"):
        LossWeights(eikonal=Ramp(-0.1, -0.1))
    raw = {"segm": [2.0, 0.5], "sdf": [0.0, 0.3], "sparse": [0.0, 0.0], "eikonal": [0.2, 0.2]}
    assert LossWeights.from_dict(raw).to_dict() == raw
