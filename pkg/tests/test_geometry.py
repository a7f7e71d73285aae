import math

import numpy as np
import pytest
import torch

from holdfield.errors import BehindCamera, InvalidTransform, OutOfBounds
from holdfield.geometry import (
    DTYPE,
    Camera,
    ScaledRigid,
    apply,
    axis_angle_to_matrix,
    cast_ray,
    cast_rays,
    inverse_apply,
    matrix_to_axis_angle,
    pixel_centers,
    project,
    sphere_intersect,
)

RZ90 = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
RY180 = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]


def pinhole(extrinsics: ScaledRigid | None = None) -> Camera:
    return Camera(100.0, 100.0, 50.0, 50.0, 100, 100, extrinsics or ScaledRigid.identity())


def random_transform(rng: np.random.Generator) -> ScaledRigid:
    return ScaledRigid.from_axis_angle(
        rng.normal(size=3), rng.normal(size=3), float(rng.uniform(0.2, 3.0))
    )


def test_apply_examples():
    assert apply(ScaledRigid.identity(), [1.0, 2.0, 3.0]).tolist() == [1.0, 2.0, 3.0]
    t = ScaledRigid(np.eye(3), [0.0, 0.0, 1.0], 2.0)
    assert apply(t, [1.0, 0.0, 0.0]).tolist() == [2.0, 0.0, 1.0]
    r = ScaledRigid(RZ90, [0.0, 0.0, 0.0])
    assert torch.allclose(apply(r, [1.0, 0.0, 0.0]), torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE))


def test_inverse_apply_examples():
    t = ScaledRigid(np.eye(3), [0.0, 0.0, 1.0], 2.0)
    assert inverse_apply(t, [2.0, 0.0, 1.0]).tolist() == [1.0, 0.0, 0.0]
    r = ScaledRigid(RZ90, [1.0, 0.0, 0.0], 0.5)
    out = inverse_apply(r, [1.0, 0.5, 0.0])
    assert torch.allclose(out, torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE), atol=1e-12)


def test_apply_inverse_round_trip_and_composition():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b = random_transform(rng), random_transform(rng)
        p = torch.as_tensor(rng.normal(size=(5, 3)), dtype=DTYPE)
        assert (inverse_apply(a, apply(a, p)) - p).abs().max() < 1e-9
        assert (apply(a, inverse_apply(a, p)) - p).abs().max() < 1e-9
        assert (apply(a, apply(b, p)) - apply(a.compose(b), p)).abs().max() < 1e-9
        assert (apply(a.inverse(), apply(a, p)) - p).abs().max() < 1e-9


def test_axis_angle_round_trip_and_small_angle():
    aa = torch.tensor([0.3, -0.2, 0.9], dtype=DTYPE)
    assert torch.allclose(matrix_to_axis_angle(axis_angle_to_matrix(aa)), aa, atol=1e-12)
    near_zero = axis_angle_to_matrix(torch.tensor([1e-6, 0.0, 0.0], dtype=DTYPE))
    assert torch.allclose(near_zero, torch.eye(3, dtype=DTYPE), atol=1e-5)


def test_validate_rejects_bad_rotations():
    with pytest.raises(InvalidTransform, match="orthonormal"):
        ScaledRigid(2.0 * torch.eye(3, dtype=DTYPE), [0.0, 0.0, 0.0]).validate()
    with pytest.raises(InvalidTransform, match="determinant"):
        ScaledRigid(np.diag([1.0, 1.0, -1.0]), [0.0, 0.0, 0.0]).validate()
    with pytest.raises(InvalidTransform, match="scale"):
        ScaledRigid(np.eye(3), [0.0, 0.0, 0.0], -1.0).validate()


def test_project_examples():
    cam = pinhole()
    assert project(cam, [0.0, 0.0, 1.0]).tolist() == [50.0, 50.0]
    assert project(cam, [0.5, 0.0, 1.0]).tolist() == [100.0, 50.0]
    with pytest.raises(BehindCamera):
        project(pinhole(ScaledRigid(RY180, [0.0, 0.0, 0.0])), [0.0, 0.0, 1.0])


def test_cast_ray_examples():
    cam = pinhole()
    ray = cast_ray(cam, [50.0, 50.0])
    assert torch.allclose(ray.direction, cam.forward)
    corner = cast_ray(cam, [0.0, 0.0]).direction
    expected = torch.tensor([-0.5, -0.5, 1.0], dtype=DTYPE)
    assert torch.allclose(corner, expected / expected.norm(), atol=1e-12)
    with pytest.raises(OutOfBounds):
        cast_ray(cam, [101.0, 10.0])
    with pytest.raises(OutOfBounds):
        cast_ray(cam, [100.0, 10.0])
    with pytest.raises(OutOfBounds):
        cast_rays(cam, [[10.0, 100.0]])
    assert cast_ray(cam, [99.999, 99.999]).direction.shape == (3,)


def test_project_inverts_cast_rays():
    cam = Camera.look_at((3.0, -4.0, 2.0), (0.0, 0.0, 0.0), focal=70.0, width=64, height=48)
    pixels = pixel_centers(64, 48)
    bundle = cast_rays(cam, pixels)
    points = bundle.origins + 2.5 * bundle.directions
    assert (project(cam, points) - pixels).abs().max() < 1e-6


def test_look_at_centres_target():
    cam = Camera.look_at((0.0, 0.0, -5.0), (0.0, 0.0, 0.0), focal=50.0, width=32, height=32)
    assert torch.allclose(project(cam, [0.0, 0.0, 0.0]), torch.tensor([16.0, 16.0], dtype=DTYPE))
    assert torch.allclose(cam.center, torch.tensor([0.0, 0.0, -5.0], dtype=DTYPE))


def test_camera_dict_round_trip():
    cam = Camera.look_at((1.0, 2.0, 5.0), (0.0, 0.0, 0.0), focal=60.0, width=40, height=30)
    back = Camera.from_dict(cam.to_dict())
    assert (back.width, back.height, back.fx) == (40, 30, 60.0)
    assert torch.allclose(back.extrinsics.rotation, cam.extrinsics.rotation, atol=1e-12)


def test_pixel_centers_row_major():
    px = pixel_centers(3, 2)
    assert px.shape == (6, 2)
    assert px[0].tolist() == [0.5, 0.5]
    assert px[1].tolist() == [1.5, 0.5]
    assert px[3].tolist() == [0.5, 1.5]


def test_sphere_intersect():
    origins = torch.tensor([[0.0, 0.0, -5.0], [0.0, 4.0, -5.0]], dtype=DTYPE)
    directions = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
    t_enter, t_exit, hit = sphere_intersect(origins, directions, 3.0)
    assert hit.tolist() == [True, False]
    assert math.isclose(float(t_enter[0]), 2.0)
    assert math.isclose(float(t_exit[0]), 8.0)
