"""Training losses and their epoch schedule.

Every sum over rays or samples is a mean, so magnitudes do not depend on the
batch size. Label ids follow the class order of the renderer: 0 hand, 1 object,
2 background, 255 ignored.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from holdfield.autodiff import probe_generator, register_probe
from holdfield.fields import CANONICAL_BOUND, CanonicalField, FieldArchitecture, TrainableField
from holdfield.geometry import DTYPE, RayBundle, as_tensor
from holdfield.meshmetrics import TriMesh
from holdfield.rendering import RenderOutput
from holdfield.skeleton import Skeleton, template_sdf

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
N_CLASSES = 3
FAR_THRESHOLD = 0.1
SHELL_SIGMA = 0.05
SCHEDULED = ("segm", "sdf", "sparse", "eikonal")


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Ramp:
    """Linear interpolation from ``start`` at the first epoch to ``end`` at the last."""

    start: float
    end: float

    def at(self, progress: float) -> float:
        progress = min(max(progress, 0.0), 1.0)
        return self.start + (self.end - self.start) * progress


@dataclass(frozen=True)
class LossWeights:
    segm: Ramp = Ramp(1.0, 0.1)
    sdf: Ramp = Ramp(0.1, 1.0)
    sparse: Ramp = Ramp(0.0, 0.5)
    eikonal: Ramp = Ramp(0.1, 0.1)

    def __post_init__(self) -> None:
        for name in SCHEDULED:
            ramp = getattr(self, name)
            if ramp.start < 0 or ramp.end < 0:
                raise ValueError(f"lambda_{name} must be nonnegative")
        if self.segm.end > self.segm.start:
            raise ValueError("lambda_segm must not increase over training")
        if self.sdf.end < self.sdf.start or self.sparse.end < self.sparse.start:
            raise ValueError("lambda_sdf and lambda_sparse must not decrease over training")

    def at(self, epoch: int, epochs: int) -> dict[str, float]:
        progress = epoch / (epochs - 1) if epochs > 1 else 0.0
        return {name: getattr(self, name).at(progress) for name in SCHEDULED}

    @classmethod
    def from_dict(cls, raw: dict) -> LossWeights:
        return cls(**{k: Ramp(float(v[0]), float(v[1])) for k, v in raw.items()})

    def to_dict(self) -> dict:
        return {k: [getattr(self, k).start, getattr(self, k).end] for k in SCHEDULED}


# ---------------------------------------------------------------------------
# Image terms
# ---------------------------------------------------------------------------
def _masked_mean(per_ray: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return per_ray.mean() if per_ray.numel() else per_ray.sum()
    if not bool(mask.any()):
        return (per_ray * 0.0).sum()
    return per_ray[mask].mean()


def loss_rgb(color, target, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over rays of the channel-summed absolute error."""
    return _masked_mean((as_tensor(color) - as_tensor(target)).abs().sum(-1), mask)


def one_hot_labels(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    labels = torch.as_tensor(labels, dtype=torch.long)
    valid = labels != IGNORE_LABEL
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    return torch.nn.functional.one_hot(safe, N_CLASSES).to(DTYPE), valid


def loss_segm(classes, labels) -> torch.Tensor:
    """Mean L1 between rendered class probabilities and one-hot labels; ignored rays dropped."""
    target, valid = one_hot_labels(labels)
    return _masked_mean((as_tensor(classes) - target).abs().sum(-1), valid)


# ---------------------------------------------------------------------------
# Shape priors
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class SdfPrior:
    """Canonical sample set with precomputed template distances."""

    points: torch.Tensor
    target: torch.Tensor

    def batch(self, count: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(rng.choice(len(self.points), size=count, replace=False))
        return self.points[idx], self.target[idx]


def sdf_prior_points(
    sk: Skeleton, count: int, seed: int, shell_sigma: float = SHELL_SIGMA
) -> torch.Tensor:
    """Half uniform in the canonical box, half a Gaussian shell around the template."""
    rng = np.random.default_rng(seed)
    n_uniform = count // 2
    uniform = rng.uniform(-CANONICAL_BOUND, CANONICAL_BOUND, size=(n_uniform, 3))
    surface = sk.template.sample(count - n_uniform, seed=seed)
    shell = surface + rng.normal(0.0, shell_sigma, size=surface.shape)
    return torch.as_tensor(np.concatenate([uniform, shell]), dtype=DTYPE)


def build_sdf_prior(sk: Skeleton, count: int, seed: int) -> SdfPrior:
    points = sdf_prior_points(sk, count, seed)
    return SdfPrior(points, template_sdf(sk, points))


def loss_sdf(
    hand_field: CanonicalField, sk: Skeleton, points, target: torch.Tensor | None = None
) -> torch.Tensor:
    points = as_tensor(points)
    if target is None:
        target = template_sdf(sk, points)
    return (hand_field.sdf(points) - target).abs().mean()


def eikonal_points(count: int, rng: np.random.Generator, bound: float = CANONICAL_BOUND):
    return torch.as_tensor(rng.uniform(-bound, bound, size=(count, 3)), dtype=DTYPE)


def loss_eikonal(pairs: Iterable[tuple[CanonicalField, torch.Tensor]]) -> torch.Tensor:
    """Mean ``(|grad f| - 1)^2`` over every (field, points) pair, gradients kept in the graph."""
    residuals = []
    for f, points in pairs:
        x = as_tensor(points).detach().requires_grad_(True)
        d = f.sdf(x)
        (g,) = torch.autograd.grad(d.sum(), x, create_graph=True)
        residuals.append((torch.linalg.vector_norm(g, dim=-1) - 1.0) ** 2)
    if not residuals:
        return torch.zeros((), dtype=DTYPE)
    return torch.cat(residuals).mean()


# ---------------------------------------------------------------------------
# Sparsity
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FarRaySets:
    hand: torch.Tensor
    object: torch.Tensor

    @property
    def empty(self) -> bool:
        return not bool(self.hand.any()) and not bool(self.object.any())


def _far_from(mesh: TriMesh | None, points: np.ndarray, spacing: float, tau: float) -> np.ndarray:
    """True where every point of a ray provably stays farther than ``tau`` from ``mesh``.

    The nearest-vertex distance minus the longest edge bounds the distance to the
    surface from below; half the ray step bounds the gap between samples.
    """
    n_rays = points.shape[0]
    if mesh is None or not len(mesh.faces):
        return np.zeros(n_rays, dtype=bool)
    dist, _ = cKDTree(mesh.vertices).query(points.reshape(-1, 3))
    closest = dist.reshape(n_rays, -1).min(axis=1)
    return closest - mesh.max_edge_length() - 0.5 * spacing > tau


def far_ray_sets(
    bundle: RayBundle,
    near: torch.Tensor,
    far: torch.Tensor,
    hand_mesh: TriMesh | None,
    object_mesh: TriMesh | None,
    tau: float = FAR_THRESHOLD,
    spacing: float = 0.02,
) -> FarRaySets:
    """Rays whose segment ``[near, far]`` never comes within ``tau`` of the posed meshes."""
    near, far = near.detach(), far.detach()
    steps = int(np.ceil(float((far - near).max()) / spacing)) + 1 if len(bundle) else 1
    u = torch.linspace(0.0, 1.0, steps, dtype=DTYPE)
    t = near[:, None] + u * (far - near)[:, None]
    points = (bundle.origins[:, None, :] + t[..., None] * bundle.directions[:, None, :]).detach()
    points = points.numpy()
    step = float((far - near).max()) / max(steps - 1, 1) if len(bundle) else spacing
    return FarRaySets(
        torch.as_tensor(_far_from(hand_mesh, points, step, tau)),
        torch.as_tensor(_far_from(object_mesh, points, step, tau)),
    )


def loss_sparse(out: RenderOutput, sets: FarRaySets) -> tuple[torch.Tensor, bool]:
    """Mean amodal probability over far rays, hand and object terms added.

    Returns the loss and whether both far sets were empty.
    """
    zero = (out.mask_hand * 0.0).sum()
    hand = out.mask_hand[sets.hand].mean() if bool(sets.hand.any()) else zero
    obj = out.mask_object[sets.object].mean() if bool(sets.object.any()) else zero
    if sets.empty:
        logger.info("both far-ray sets are empty")
    return hand + obj, sets.empty


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------
@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    empty_far_set: bool = False
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        record = {"total": float(self.total.detach())}
        record.update({f"loss_{k}": float(v.detach()) for k, v in self.terms.items()})
        record.update({f"lambda_{k}": v for k, v in self.weights.items()})
        record["empty_far_set"] = self.empty_far_set
        record.update(self.diagnostics)
        return record


def total_loss(
    terms: dict[str, torch.Tensor], weights: dict[str, float], empty_far_set: bool = False
) -> LossBreakdown:
    """``rgb + sum_k lambda_k * term_k``; missing terms count as zero."""
    zero = torch.zeros((), dtype=DTYPE)
    total = terms.get("rgb", zero)
    for name, weight in weights.items():
        if name in terms:
            total = total + weight * terms[name]
    return LossBreakdown(total, dict(terms), dict(weights), empty_far_set)


# ---------------------------------------------------------------------------
# Gradient probes
# ---------------------------------------------------------------------------
@register_probe("losses.rgb_wrt_color")
def _probe_rgb():
    g = probe_generator("losses.rgb_wrt_color")
    color = torch.rand(5, 3, generator=g, dtype=DTYPE).requires_grad_(True)
    # offsets keep every residual away from the kink at zero
    target = color.detach() + 0.05 + 0.1 * torch.rand(5, 3, generator=g, dtype=DTYPE)
    return (lambda c: loss_rgb(c, target)), (color,)


@register_probe("losses.segm_wrt_classes")
def _probe_segm():
    g = probe_generator("losses.segm_wrt_classes")
    classes = (0.1 + 0.8 * torch.rand(4, 3, generator=g, dtype=DTYPE)).requires_grad_(True)
    labels = torch.tensor([0, 2, IGNORE_LABEL, 1])
    return (lambda s: loss_segm(s, labels)), (classes,)


@register_probe("losses.sdf_wrt_field_params")
def _probe_sdf():
    f = TrainableField(FieldArchitecture(width=8, hidden_layers=2, frequencies=2), seed=11)
    g = probe_generator("losses.sdf_wrt_field_params")
    points = torch.rand(6, 3, generator=g, dtype=DTYPE) - 0.5
    target = f.sdf(points).detach() + 0.3
    w = f.sdf_head.weight.detach().clone().requires_grad_(True)

    class _Functional:
        def __init__(self, w):
            self.w = w

        def sdf(self, x):
            return torch.func.functional_call(f, {"sdf_head.weight": self.w}, (x,)).d

    return (lambda w: loss_sdf(_Functional(w), None, points, target)), (w,)


@register_probe("losses.eikonal_wrt_field_params")
def _probe_eikonal():
    f = TrainableField(FieldArchitecture(width=8, hidden_layers=2, frequencies=2), seed=12)
    g = probe_generator("losses.eikonal_wrt_field_params")
    points = torch.rand(6, 3, generator=g, dtype=DTYPE) - 0.5
    w = f.layers[0].weight.detach().clone().requires_grad_(True)

    class _Functional:
        def __init__(self, w):
            self.w = w

        def sdf(self, x):
            return torch.func.functional_call(f, {"layers.0.weight": self.w}, (x,)).d

    return (lambda w: loss_eikonal([(_Functional(w), points)])), (w,)


@register_probe("losses.sparse_wrt_masks")
def _probe_sparse():
    g = probe_generator("losses.sparse_wrt_masks")
    masks = torch.rand(2, 6, generator=g, dtype=DTYPE).requires_grad_(True)
    sets = FarRaySets(
        torch.tensor([True, False, True, True, False, False]),
        torch.tensor([False, True, False, True, True, False]),
    )

    def fn(masks):
        zeros = torch.zeros(6, dtype=DTYPE)
        rgb = zeros[:, None].expand(6, 3)
        out = RenderOutput(rgb, rgb, zeros, masks[0], masks[1], rgb, zeros)
        return loss_sparse(out, sets)[0]

    return fn, (masks,)
