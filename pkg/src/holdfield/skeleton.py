"""Articulated capsule-chain hand.

Bones form a tree rooted at the palm. Forward kinematics turns a :class:`HandState`
into one canonical-to-observation transform per bone; skinning blends them with
weights looked up from the K nearest template vertices. The template mesh doubles
as the signed-distance prior for the hand field.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import torch
import trimesh
from scipy.spatial import cKDTree

from holdfield.autodiff import probe_generator, register_probe
from holdfield.errors import SingularBlend
from holdfield.fields import Capsule, Union
from holdfield.geometry import DTYPE, ScaledRigid, as_tensor, axis_angle_to_matrix
from holdfield.meshmetrics import TriMesh, marching_cubes, read_obj, signed_distance, write_obj

logger = logging.getLogger(__name__)

BETA_RANGE = (0.5, 2.0)
SINGULAR_DET = 1e-12
WEIGHT_EPS = 1e-6
WEIGHT_QUERY = "posed"


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Skeleton:
    """Bone tree plus canonical template.

    ``rest_offsets[0]`` is the root joint position; every other offset is relative
    to the parent joint. ``tails`` run from each joint to the end of its bone.
    """

    parents: tuple[int, ...]
    rest_offsets: np.ndarray
    tails: np.ndarray
    radii: np.ndarray
    template: TriMesh
    template_weights: np.ndarray
    tip_vertex_ids: tuple[int, ...] = ()
    k: int = 4
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        parents = tuple(int(p) for p in self.parents)
        if not parents or parents[0] != -1 or any(p < 0 for p in parents[1:]):
            raise ValueError("bone 0 must be the only root")
        if any(p >= i for i, p in enumerate(parents) if i):
            raise ValueError("parents must precede their children")
        n_b = len(parents)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64).reshape(n_b, 3)
        tails = np.asarray(self.tails, dtype=np.float64).reshape(n_b, 3)
        radii = np.asarray(self.radii, dtype=np.float64).reshape(n_b)
        weights = np.asarray(self.template_weights, dtype=np.float64)
        if weights.shape != (len(self.template.vertices), n_b):
            raise ValueError(
                f"template weights must be {len(self.template.vertices)}x{n_b}, "
                f"got {weights.shape}"
            )
        if (weights < 0).any():
            raise ValueError("template weights must be nonnegative")
        sums = weights.sum(axis=1)
        if np.abs(sums - 1.0).max(initial=0.0) > 1e-4:
            raise ValueError("template weights must sum to 1 per vertex")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        tips = tuple(int(i) for i in self.tip_vertex_ids)
        if any(i < 0 or i >= len(self.template.vertices) for i in tips):
            raise ValueError("tip vertex id out of range")
        names = tuple(self.names) or tuple(f"bone{i}" for i in range(n_b))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "tails", tails)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "template_weights", weights / sums[:, None])
        object.__setattr__(self, "tip_vertex_ids", tips)
        object.__setattr__(self, "names", names)

    @property
    def n_bones(self) -> int:
        return len(self.parents)

    @cached_property
    def rest_joints(self) -> np.ndarray:
        joints = np.zeros((self.n_bones, 3))
        for i, p in enumerate(self.parents):
            joints[i] = self.rest_offsets[i] + (joints[p] if p >= 0 else 0.0)
        return joints

    @cached_property
    def leaf_bones(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_bones) if i not in self.parents)

    @property
    def n_joints(self) -> int:
        return self.n_bones + len(self.leaf_bones)

    def capsules(self) -> list[Capsule]:
        return [
            Capsule(tuple(j), tuple(j + t), float(r))
            for j, t, r in zip(self.rest_joints, self.tails, self.radii, strict=True)
        ]

    @cached_property
    def canonical_vertices(self) -> torch.Tensor:
        return torch.as_tensor(self.template.vertices, dtype=DTYPE)

    @cached_property
    def canonical_tree(self) -> cKDTree:
        return cKDTree(self.template.vertices)

    @cached_property
    def weight_table(self) -> torch.Tensor:
        return torch.as_tensor(self.template_weights, dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class HandState:
    theta: torch.Tensor
    beta: torch.Tensor
    root: ScaledRigid

    def __post_init__(self) -> None:
        theta = as_tensor(self.theta).reshape(-1, 3)
        beta = as_tensor(self.beta).reshape(-1)
        if theta.shape[0] != beta.shape[0]:
            raise ValueError(f"theta has {theta.shape[0]} bones, beta has {beta.shape[0]}")
        if not bool(torch.isfinite(theta).all()):
            raise ValueError("theta must be finite")
        lo, hi = BETA_RANGE
        if bool((beta < lo).any()) or bool((beta > hi).any()):
            raise ValueError(f"beta outside [{lo}, {hi}]: {beta.detach().tolist()}")
        if abs(float(self.root.scale) - 1.0) > 1e-12:
            raise ValueError("hand root transform must have unit scale")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def rest(cls, n_bones: int, root: ScaledRigid | None = None) -> HandState:
        return cls(
            torch.zeros(n_bones, 3, dtype=DTYPE),
            torch.ones(n_bones, dtype=DTYPE),
            root or ScaledRigid.identity(),
        )

    def detach(self) -> HandState:
        return HandState(self.theta.detach(), self.beta.detach(), self.root.detach())

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.detach().tolist(),
            "beta": self.beta.detach().tolist(),
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> HandState:
        return cls(
            as_tensor(raw["theta"]), as_tensor(raw["beta"]), ScaledRigid.from_dict(raw["root"])
        )


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------
def _homogeneous(rotation: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    top = torch.cat([rotation, translation.reshape(3, 1)], dim=1)
    bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=DTYPE)
    return torch.cat([top, bottom], dim=0)


def _translation(t) -> torch.Tensor:
    return _homogeneous(torch.eye(3, dtype=DTYPE), as_tensor(t))


def _joint_frames(sk: Skeleton, hs: HandState) -> list[torch.Tensor]:
    if hs.theta.shape[0] != sk.n_bones:
        raise ValueError(f"hand state has {hs.theta.shape[0]} bones, skeleton {sk.n_bones}")
    local = axis_angle_to_matrix(hs.theta)
    zero = torch.zeros(3, dtype=DTYPE)
    frames: list[torch.Tensor] = []
    for i, p in enumerate(sk.parents):
        rot = _homogeneous(local[i], zero)
        if p < 0:
            frame = hs.root.matrix() @ _translation(sk.rest_offsets[i]) @ rot
        else:
            frame = frames[p] @ _translation(hs.beta[p] * as_tensor(sk.rest_offsets[i])) @ rot
        frames.append(frame)
    return frames


def forward_kinematics(sk: Skeleton, hs: HandState) -> torch.Tensor:
    """Per-bone 4x4 canonical-to-observation transforms, shape ``(n_b, 4, 4)``."""
    bones = []
    for i, frame in enumerate(_joint_frames(sk, hs)):
        scale = torch.diag(torch.cat([hs.beta[i].reshape(1).expand(3), torch.ones(1, dtype=DTYPE)]))
        bones.append(frame @ scale @ _translation(-sk.rest_joints[i]))
    return torch.stack(bones)


def posed_joints(sk: Skeleton, hs: HandState) -> torch.Tensor:
    """Joint heads of every bone followed by the tips of leaf bones; joint 0 is the root."""
    frames = _joint_frames(sk, hs)
    heads = [f[:3, 3] for f in frames]
    tips = [
        frames[i][:3, :3] @ (hs.beta[i] * as_tensor(sk.tails[i])) + frames[i][:3, 3]
        for i in sk.leaf_bones
    ]
    return torch.stack(heads + tips)


# ---------------------------------------------------------------------------
# Skinning
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class PosedHand:
    """Bone transforms and posed template vertices for one frame."""

    bones: torch.Tensor
    vertices: torch.Tensor
    tree: cKDTree

    @property
    def mesh_vertices(self) -> np.ndarray:
        return self.vertices.detach().numpy()


def pose_hand(sk: Skeleton, hs: HandState) -> PosedHand:
    bones = forward_kinematics(sk, hs)
    vertices = blend_apply(bones, sk.weight_table, sk.canonical_vertices)
    return PosedHand(bones, vertices, cKDTree(vertices.detach().numpy()))


def posed_template(sk: Skeleton, hs: HandState) -> TriMesh:
    return TriMesh(pose_hand(sk, hs).mesh_vertices, sk.template.faces)


def skin_weights(sk: Skeleton, points, posed: PosedHand | None = None) -> torch.Tensor:
    """Inverse-distance blend of the weights of the K nearest template vertices.

    With ``posed`` the neighbours are searched among the posed template vertices;
    without it, among the canonical ones.
    """
    points = as_tensor(points).reshape(-1, 3)
    vertices = posed.vertices if posed is not None else sk.canonical_vertices
    tree = posed.tree if posed is not None else sk.canonical_tree
    k = min(sk.k, len(sk.template.vertices))
    _, idx = tree.query(points.detach().numpy(), k=k)
    idx = torch.as_tensor(np.asarray(idx).reshape(points.shape[0], k), dtype=torch.long)
    offsets = points[:, None, :] - vertices[idx]
    sq = (offsets * offsets).sum(-1)
    dist = torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), 0.0)
    inv = 1.0 / (dist + WEIGHT_EPS)
    inv = inv / inv.sum(-1, keepdim=True)
    return (inv[..., None] * sk.weight_table[idx]).sum(1)


def blend(bones: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nb,bij->nij", as_tensor(weights).reshape(-1, bones.shape[0]), bones)


def blend_apply(bones: torch.Tensor, weights: torch.Tensor, points) -> torch.Tensor:
    matrices = blend(bones, weights)
    points = as_tensor(points).reshape(-1, 3)
    return torch.einsum("nij,nj->ni", matrices[:, :3, :3], points) + matrices[:, :3, 3]


def blend_inverse(
    bones: torch.Tensor, weights: torch.Tensor, points, *, strict: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """Solve ``(sum_i w_i B_i) x = p`` per point.

    Returns the canonical points and a validity mask. With ``strict`` any blended
    matrix with ``|det| < 1e-12`` raises :class:`SingularBlend`; otherwise those rows
    are solved against the identity and flagged invalid.
    """
    matrices = blend(bones, weights)
    linear, offset = matrices[:, :3, :3], matrices[:, :3, 3]
    valid = torch.linalg.det(linear).abs() >= SINGULAR_DET
    if not bool(valid.all()):
        if strict:
            raise SingularBlend(f"{int((~valid).sum())} blended transforms are singular")
        eye = torch.eye(3, dtype=DTYPE).expand_as(linear)
        linear = torch.where(valid[:, None, None], linear, eye)
    rhs = as_tensor(points).reshape(-1, 3) - offset
    x = torch.linalg.solve(linear, rhs.unsqueeze(-1)).squeeze(-1)
    return x, valid


def forward_lbs(sk: Skeleton, hs: HandState, points, weights) -> torch.Tensor:
    return blend_apply(forward_kinematics(sk, hs), weights, points)


def inverse_lbs(sk: Skeleton, hs: HandState, points, posed: PosedHand | None = None):
    """Map observed points to canonical space with weights taken at the observed points."""
    posed = posed or pose_hand(sk, hs)
    weights = skin_weights(sk, points, posed)
    x, _ = blend_inverse(posed.bones, weights, points, strict=True)
    return x


def inverse_lbs_masked(
    sk: Skeleton, hs: HandState, points, posed: PosedHand | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    posed = posed or pose_hand(sk, hs)
    weights = skin_weights(sk, points, posed)
    return blend_inverse(posed.bones, weights, points, strict=False)


def roundtrip_error(sk: Skeleton, hs: HandState) -> float:
    """Largest canonical error of template vertices pushed through forward then inverse LBS."""
    with torch.no_grad():
        posed = pose_hand(sk, hs)
        back = inverse_lbs(sk, hs, posed.vertices, posed)
        return float(torch.linalg.vector_norm(back - sk.canonical_vertices, dim=-1).max())


def template_sdf(sk: Skeleton, points) -> torch.Tensor:
    return signed_distance(points, sk.template)


# ---------------------------------------------------------------------------
# Template construction
# ---------------------------------------------------------------------------
def _project_to_surface(shape: Union, vertices: np.ndarray, iterations: int = 3) -> np.ndarray:
    v = torch.as_tensor(vertices, dtype=DTYPE)
    for _ in range(iterations):
        v = v.detach().requires_grad_(True)
        d = shape.sdf(v)
        (g,) = torch.autograd.grad(d.sum(), v)
        n = g / torch.linalg.vector_norm(g, dim=-1, keepdim=True).clamp(min=1e-12)
        v = v - d[:, None] * n
    return v.detach().numpy()


def build_template(capsules: list[Capsule], cell_size: float) -> TriMesh:
    """Marching cubes on the capsule union, one Loop subdivision, then surface projection."""
    shape = Union(tuple(capsules))
    ends = np.array([c.a for c in capsules] + [c.b for c in capsules], dtype=np.float64)
    pad = max(c.radius for c in capsules) + 2.0 * cell_size
    lo, hi = float(ends.min()) - pad, float(ends.max()) + pad
    resolution = int(math.ceil((hi - lo) / cell_size)) + 1
    coarse = marching_cubes(shape.sdf, resolution, (lo, hi))
    vertices, faces = trimesh.remesh.subdivide_loop(coarse.vertices, coarse.faces, iterations=1)
    vertices = _project_to_surface(shape, np.asarray(vertices))
    return TriMesh(vertices, np.asarray(faces)).cleaned().oriented_outward()


def bone_weights(vertices: np.ndarray, capsules: list[Capsule], temperature: float = 0.03):
    """Softmax over negative distance to each bone segment, quantised to float32."""
    v = torch.as_tensor(vertices, dtype=DTYPE)
    dist = torch.stack([Capsule(c.a, c.b, 0.0).sdf(v) for c in capsules], dim=-1)
    weights = torch.softmax(-dist / temperature, dim=-1).numpy()
    weights = weights.astype(np.float32).astype(np.float64)
    return weights / weights.sum(axis=1, keepdims=True)


def _tip_vertices(vertices: np.ndarray, weights: np.ndarray, capsules, leaves) -> tuple[int, ...]:
    owner = weights.argmax(axis=1)
    tips = []
    for i in leaves:
        a, b = np.asarray(capsules[i].a), np.asarray(capsules[i].b)
        axis = (b - a) / np.linalg.norm(b - a)
        candidates = np.flatnonzero(owner == i)
        tips.append(int(candidates[np.argmax((vertices[candidates] - a) @ axis)]))
    return tuple(tips)


def skeleton_from_capsules(
    parents, rest_offsets, tails, radii, *, names=(), cell_size: float = 0.1, k: int = 4
) -> Skeleton:
    offsets = np.asarray(rest_offsets, dtype=np.float64)
    joints = np.zeros_like(offsets)
    for i, p in enumerate(parents):
        joints[i] = offsets[i] + (joints[p] if p >= 0 else 0.0)
    capsules = [
        Capsule(tuple(j), tuple(j + np.asarray(t, dtype=np.float64)), float(r))
        for j, t, r in zip(joints, tails, radii, strict=True)
    ]
    template = build_template(capsules, cell_size)
    weights = bone_weights(template.vertices, capsules)
    leaves = [i for i in range(len(parents)) if i not in parents]
    tips = _tip_vertices(template.vertices, weights, capsules, leaves)
    return Skeleton(tuple(parents), offsets, tails, radii, template, weights, tips, k, tuple(names))


DEFAULT_BONES = {
    "names": ("palm", "index_proximal", "index_distal", "thumb_proximal", "thumb_distal"),
    "parents": (-1, 0, 1, 0, 3),
    "rest_offsets": (
        (-0.9, 0.0, 0.0),
        (1.0, 0.15, 0.0),
        (0.55, 0.0, 0.0),
        (0.5, -0.3, 0.0),
        (0.45, -0.15, 0.0),
    ),
    "tails": (
        (1.0, 0.0, 0.0),
        (0.55, 0.0, 0.0),
        (0.45, 0.0, 0.0),
        (0.45, -0.15, 0.0),
        (0.45, 0.0, 0.0),
    ),
    "radii": (0.35, 0.13, 0.11, 0.13, 0.11),
}


@lru_cache(maxsize=4)
def build_default_skeleton(cell_size: float = 0.1) -> Skeleton:
    """Palm plus index and thumb chains of two bones each."""
    sk = skeleton_from_capsules(
        DEFAULT_BONES["parents"],
        DEFAULT_BONES["rest_offsets"],
        DEFAULT_BONES["tails"],
        DEFAULT_BONES["radii"],
        names=DEFAULT_BONES["names"],
        cell_size=cell_size,
    )
    logger.info("default skeleton: %d template vertices", len(sk.template.vertices))
    return sk


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------
def write_skeleton(sk: Skeleton, directory: Path) -> dict:
    """Write the template OBJ and weight table; return the manifest entry."""
    directory = Path(directory)
    write_obj(directory / "template.obj", sk.template)
    np.asarray(sk.template_weights, dtype="<f4").tofile(directory / "template_weights.bin")
    return {
        "names": list(sk.names),
        "parents": list(sk.parents),
        "rest_offsets": sk.rest_offsets.tolist(),
        "tails": sk.tails.tolist(),
        "radii": sk.radii.tolist(),
        "k": sk.k,
        "tip_vertex_ids": list(sk.tip_vertex_ids),
        "template": "template.obj",
        "weights": "template_weights.bin",
        "weight_query": WEIGHT_QUERY,
    }


def read_skeleton(raw: dict, directory: Path) -> Skeleton:
    directory = Path(directory)
    template = read_obj(directory / raw["template"])
    n_b = len(raw["parents"])
    weights = np.fromfile(directory / raw["weights"], dtype="<f4").astype(np.float64)
    return Skeleton(
        tuple(raw["parents"]),
        np.asarray(raw["rest_offsets"]),
        np.asarray(raw["tails"]),
        np.asarray(raw["radii"]),
        template,
        weights.reshape(-1, n_b),
        tuple(raw["tip_vertex_ids"]),
        int(raw["k"]),
        tuple(raw["names"]),
    )


# ---------------------------------------------------------------------------
# Gradient probes
# ---------------------------------------------------------------------------
def _probe_chain() -> Skeleton:
    template = TriMesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
        [[0, 1, 3], [1, 2, 3]],
    )
    weights = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.6, 0.4]]
    return Skeleton(
        (-1, 0),
        [[0, 0, 0], [1, 0, 0]],
        [[1, 0, 0], [1, 0, 0]],
        [0.1, 0.1],
        template,
        weights,
        (2,),
        k=2,
    )


@register_probe("skeleton.forward_kinematics_wrt_theta")
def _probe_fk():
    sk = _probe_chain()
    g = probe_generator("skeleton.forward_kinematics_wrt_theta")
    theta = (0.3 * torch.randn(2, 3, generator=g, dtype=DTYPE)).requires_grad_(True)
    beta = torch.tensor([1.1, 0.9], dtype=DTYPE)
    root = ScaledRigid.from_axis_angle([0.1, -0.2, 0.3], [0.5, 0.0, 1.0])
    return (lambda th: posed_joints(sk, HandState(th, beta, root))), (theta,)


@register_probe("skeleton.inverse_lbs_wrt_points_and_theta")
def _probe_inverse_lbs():
    sk = _probe_chain()
    g = probe_generator("skeleton.inverse_lbs_wrt_points_and_theta")
    theta = (0.2 * torch.randn(2, 3, generator=g, dtype=DTYPE)).requires_grad_(True)
    # points well away from template vertices so the neighbour set is stable
    points = torch.tensor([[0.5, 0.3, 0.2], [1.4, 0.6, -0.1]], dtype=DTYPE).requires_grad_(True)

    def fn(p, th):
        return inverse_lbs(sk, HandState(th, torch.ones(2, dtype=DTYPE), ScaledRigid.identity()), p)

    return fn, (points, theta)
