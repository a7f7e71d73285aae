"""Spatial value types: scaled rigid transforms, pinhole cameras and rays.

Everything is float64 torch so pose parameters can be differentiated through
``apply``, ``inverse_apply`` and ``project``. Right-handed coordinates; cameras
look down +z with image v growing along camera +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from holdfield.errors import BehindCamera, InvalidTransform, OutOfBounds

DTYPE = torch.float64
ORTHO_TOL = 1e-9


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    return torch.stack(
        [
            torch.stack([zero, -v[..., 2], v[..., 1]], -1),
            torch.stack([v[..., 2], zero, -v[..., 0]], -1),
            torch.stack([-v[..., 1], v[..., 0], zero], -1),
        ],
        -2,
    )


def axis_angle_to_matrix(aa) -> torch.Tensor:
    """Rodrigues formula for ``(..., 3)`` axis-angle vectors, Taylor-expanded near zero."""
    aa = as_tensor(aa)
    theta2 = (aa * aa).sum(-1)[..., None, None]
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    k = skew(aa)
    eye = torch.eye(3, dtype=DTYPE).expand(k.shape)
    return eye + a * k + b * (k @ k)


def matrix_to_axis_angle(rotation) -> torch.Tensor:
    """Inverse of :func:`axis_angle_to_matrix` (not differentiable)."""
    r = as_tensor(rotation).detach().cpu().numpy()
    return as_tensor(Rotation.from_matrix(r).as_rotvec())


@dataclass(frozen=True, eq=False)
class ScaledRigid:
    """``p -> scale * rotation @ p + translation``."""

    rotation: torch.Tensor
    translation: torch.Tensor
    scale: torch.Tensor = field(default_factory=lambda: torch.tensor(1.0, dtype=DTYPE))

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", as_tensor(self.rotation))
        object.__setattr__(self, "translation", as_tensor(self.translation))
        object.__setattr__(self, "scale", as_tensor(self.scale).reshape(()))

    @classmethod
    def identity(cls) -> ScaledRigid:
        return cls(torch.eye(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_axis_angle(cls, axis_angle, translation, scale=1.0) -> ScaledRigid:
        return cls(axis_angle_to_matrix(axis_angle), translation, scale)

    @classmethod
    def from_matrix(cls, matrix) -> ScaledRigid:
        m = as_tensor(matrix)
        linear = m[:3, :3]
        scale = torch.linalg.det(linear).abs() ** (1.0 / 3.0)
        return cls(linear / scale, m[:3, 3], scale)

    def validate(self, tol: float = ORTHO_TOL) -> ScaledRigid:
        r = self.rotation.detach()
        if not torch.isfinite(r).all() or not torch.isfinite(self.translation).all():
            raise InvalidTransform("transform has non-finite entries")
        if (r.T @ r - torch.eye(3, dtype=DTYPE)).abs().max() > tol:
            raise InvalidTransform("rotation is not orthonormal")
        if abs(float(torch.linalg.det(r)) - 1.0) > tol:
            raise InvalidTransform("rotation determinant is not +1")
        if float(self.scale) <= 0.0:
            raise InvalidTransform(f"scale must be positive, got {float(self.scale)}")
        return self

    def matrix(self) -> torch.Tensor:
        top = torch.cat([self.scale * self.rotation, self.translation[:, None]], dim=1)
        bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=DTYPE)
        return torch.cat([top, bottom], dim=0)

    def compose(self, other: ScaledRigid) -> ScaledRigid:
        """``self ∘ other``: apply ``other`` first."""
        return ScaledRigid(
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
            self.scale * other.scale,
        )

    def inverse(self) -> ScaledRigid:
        rt = self.rotation.T
        return ScaledRigid(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def detach(self) -> ScaledRigid:
        return ScaledRigid(
            self.rotation.detach(), self.translation.detach(), self.scale.detach()
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.detach().tolist(),
            "translation": self.translation.detach().tolist(),
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ScaledRigid:
        return cls(raw["rotation"], raw["translation"], raw.get("scale", 1.0))


def apply(t: ScaledRigid, p) -> torch.Tensor:
    p = as_tensor(p)
    return t.scale * (p @ t.rotation.T) + t.translation


def inverse_apply(t: ScaledRigid, p) -> torch.Tensor:
    p = as_tensor(p)
    return ((p - t.translation) @ t.rotation) / t.scale


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: ScaledRigid = field(default_factory=ScaledRigid.identity)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )
        self.extrinsics.validate()
        if abs(float(self.extrinsics.scale) - 1.0) > ORTHO_TOL:
            raise InvalidTransform("camera extrinsics must have unit scale")

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        *,
        focal: float,
        width: int,
        height: int,
        up=(0.0, -1.0, 0.0),
    ) -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rotation = np.stack([x, y, z])
        return cls(
            fx=focal,
            fy=focal,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            extrinsics=ScaledRigid(rotation, -rotation @ eye),
        )

    @property
    def center(self) -> torch.Tensor:
        r = self.extrinsics.rotation
        return -(r.T @ self.extrinsics.translation)

    @property
    def forward(self) -> torch.Tensor:
        return self.extrinsics.rotation[2]

    def resized(self, width: int, height: int) -> Camera:
        """Same viewing frustum sampled at a different resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
            extrinsics=self.extrinsics,
        )

    def to_dict(self) -> dict:
        return {
            "intrinsics": {
                "fx": self.fx,
                "fy": self.fy,
                "cx": self.cx,
                "cy": self.cy,
                "width": self.width,
                "height": self.height,
            },
            "extrinsics": self.extrinsics.matrix().tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> Camera:
        intr = raw["intrinsics"]
        return cls(
            fx=float(intr["fx"]),
            fy=float(intr["fy"]),
            cx=float(intr["cx"]),
            cy=float(intr["cy"]),
            width=int(intr["width"]),
            height=int(intr["height"]),
            extrinsics=ScaledRigid.from_matrix(raw["extrinsics"]),
        )


def to_camera_frame(cam: Camera, p) -> torch.Tensor:
    return apply(cam.extrinsics, p)


def project(cam: Camera, p) -> torch.Tensor:
    """Pixel coordinates ``(..., 2)`` of world points ``(..., 3)``."""
    pc = to_camera_frame(cam, p)
    z = pc[..., 2]
    if bool((z <= 0).any()):
        raise BehindCamera(f"{int((z <= 0).sum())} point(s) at or behind the camera plane")
    u = cam.fx * pc[..., 0] / z + cam.cx
    v = cam.fy * pc[..., 1] / z + cam.cy
    return torch.stack([u, v], dim=-1)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    near: float = 0.0
    far: float = 100.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.near < self.far:
            raise ValueError(
                f"ray bounds must satisfy 0 <= near < far, got {self.near}, {self.far}"
            )

    def at(self, t) -> torch.Tensor:
        return self.origin + as_tensor(t)[..., None] * self.direction

    def bundle(self) -> RayBundle:
        return RayBundle(self.origin[None], self.direction[None])


@dataclass(frozen=True, eq=False)
class RayBundle:
    """``R`` rays; ``pixels`` keeps the image coordinates they were cast through."""

    origins: torch.Tensor
    directions: torch.Tensor
    pixels: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, index) -> RayBundle:
        return RayBundle(
            self.origins[index],
            self.directions[index],
            None if self.pixels is None else self.pixels[index],
        )


def _check_pixels(cam: Camera, pixels: torch.Tensor) -> None:
    u, v = pixels[..., 0], pixels[..., 1]
    outside = (u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)
    if bool(outside.any()):
        raise OutOfBounds(f"pixel outside {cam.width}x{cam.height} image")


def cast_rays(cam: Camera, pixels) -> RayBundle:
    pixels = as_tensor(pixels).reshape(-1, 2)
    _check_pixels(cam, pixels)
    local = torch.stack(
        [
            (pixels[:, 0] - cam.cx) / cam.fx,
            (pixels[:, 1] - cam.cy) / cam.fy,
            torch.ones(pixels.shape[0], dtype=DTYPE),
        ],
        dim=-1,
    )
    local = local / torch.linalg.vector_norm(local, dim=-1, keepdim=True)
    directions = local @ cam.extrinsics.rotation
    origins = cam.center.expand(pixels.shape[0], 3)
    return RayBundle(origins, directions, pixels)


def cast_ray(cam: Camera, pixel, near: float = 0.0, far: float = 100.0) -> Ray:
    bundle = cast_rays(cam, pixel)
    return Ray(bundle.origins[0], bundle.directions[0], near, far)


def pixel_centers(width: int, height: int) -> torch.Tensor:
    """Row-major ``(H*W, 2)`` pixel-center coordinates."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=DTYPE) + 0.5,
        torch.arange(width, dtype=DTYPE) + 0.5,
        indexing="ij",
    )
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=-1)


def sphere_intersect(
    origins: torch.Tensor, directions: torch.Tensor, radius: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Entry/exit depths of unit-direction rays against an origin-centred sphere."""
    b = (origins * directions).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    t_enter = torch.clamp(-b - root, min=0.0)
    t_exit = torch.clamp(-b + root, min=0.0)
    return t_enter, t_exit, hit & (t_exit > t_enter)
