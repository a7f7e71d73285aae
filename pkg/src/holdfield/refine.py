"""Mesh-based pose alignment and refinement.

Two stages share one energy: a contact term pulling fingertip vertices onto the
object, an occlusion-aware silhouette term from a soft rasterizer, and a 2D
reprojection term anchoring hand joints and object points to their image
positions. ``align_init`` runs before any field training and only moves
translations, hand shape and object scale; ``refine_poses`` runs on the
extracted object mesh and moves every pose variable.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from holdfield.autodiff import ParamSet, descend, probe_generator, register_probe
from holdfield.errors import DegenerateMesh
from holdfield.geometry import (
    DTYPE,
    Camera,
    ScaledRigid,
    apply,
    as_tensor,
    axis_angle_to_matrix,
    pixel_centers,
    project,
)
from holdfield.losses import IGNORE_LABEL
from holdfield.meshmetrics import TriMesh
from holdfield.rendering import HAND, OBJECT
from holdfield.skeleton import (
    BETA_RANGE,
    HandState,
    Skeleton,
    blend_apply,
    forward_kinematics,
    posed_joints,
)

logger = logging.getLogger(__name__)

RASTER_SIZE = 128
RASTER_SHARPNESS = 1e-2
CULL_SIGMAS = 7.0
DEGENERATE_AREA = 1e-12
GRASP_GATE = 2.0
REPROJ_TOLERANCE = 0.05


# ---------------------------------------------------------------------------
# Energies
# ---------------------------------------------------------------------------
def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    return torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), 0.0)


@dataclass(frozen=True)
class ContactSpec:
    """Hand template vertices that touch the object during a grasp."""

    tip_vertex_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.tip_vertex_ids)
        if not ids:
            raise ValueError("contact spec needs at least one tip vertex")
        if min(ids) < 0:
            raise ValueError(f"negative tip vertex id in {ids}")
        object.__setattr__(self, "tip_vertex_ids", ids)

    @classmethod
    def for_skeleton(cls, sk: Skeleton) -> ContactSpec:
        return cls(sk.tip_vertex_ids)


def loss_contact(hand_vertices, object_vertices, spec: ContactSpec) -> torch.Tensor:
    """Sum over tip vertices of the distance to the nearest object vertex."""
    hand = as_tensor(hand_vertices).reshape(-1, 3)
    obj = as_tensor(object_vertices).reshape(-1, 3)
    if hand.shape[0] == 0 or obj.shape[0] == 0:
        raise ValueError("contact needs nonempty hand and object vertex sets")
    if max(spec.tip_vertex_ids) >= hand.shape[0]:
        raise ValueError(
            f"tip vertex id {max(spec.tip_vertex_ids)} out of range for {hand.shape[0]} vertices"
        )
    tips = hand[list(spec.tip_vertex_ids)]
    _, idx = cKDTree(obj.detach().numpy()).query(tips.detach().numpy())
    nearest = obj[torch.as_tensor(np.asarray(idx), dtype=torch.long)]
    return _safe_norm(tips - nearest).sum()


def _candidate_pairs(lo: np.ndarray, hi: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Every (face, pixel) pair whose pixel lies in the face's inclusive pixel box."""
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    face = np.repeat(np.arange(len(counts)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    offset = np.arange(int(counts.sum())) - start
    px = lo[face, 0] + offset % nx[face]
    py = lo[face, 1] + offset // nx[face]
    return face, py * width + px


def _signed_distance_2d(tri: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Distance from ``p`` to the triangle boundary, positive inside."""
    edge = tri.roll(-1, dims=1) - tri
    rel = p[:, None, :] - tri
    length2 = (edge * edge).sum(-1)
    t = ((rel * edge).sum(-1) / length2).clamp(0.0, 1.0)
    diff = rel - t[..., None] * edge
    dist = _safe_norm(diff.reshape(-1, 2)).reshape(diff.shape[:2]).min(-1).values
    cross = edge[..., 0] * rel[..., 1] - edge[..., 1] * rel[..., 0]
    inside = (cross >= 0).all(-1) | (cross <= 0).all(-1)
    return torch.where(inside, dist, -dist)


def soft_rasterize(
    vertices, faces, camera: Camera, sharpness: float = RASTER_SHARPNESS
) -> torch.Tensor:
    """Soft silhouette ``(H, W)`` of a triangle mesh seen by ``camera``.

    Each face covers a pixel with probability ``sigmoid(d / (sharpness * W))``
    where ``d`` is the signed pixel distance to the projected face; coverage
    combines as ``1 - prod(1 - p)``. Pairs further than a few sharpness widths
    outside a face's box are skipped.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv = project(camera, as_tensor(vertices).reshape(-1, 3))
    tri = uv[torch.as_tensor(faces)]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    area2 = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]).detach().abs()
    keep = area2 > DEGENERATE_AREA
    if not bool(keep.any()):
        raise DegenerateMesh(f"all {len(faces)} projected faces have zero area")
    tri = tri[keep]

    width, height = camera.width, camera.height
    sigma = sharpness * width
    margin = CULL_SIGMAS * sigma
    pts = tri.detach().numpy()
    lo = np.ceil(pts.min(1) - margin - 0.5).astype(np.int64)
    hi = np.floor(pts.max(1) + margin - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    face, pixel = _candidate_pairs(lo, hi, width)

    log_uncovered = torch.zeros(width * height, dtype=DTYPE)
    if len(face):
        centers = pixel_centers(width, height)[torch.as_tensor(pixel)]
        d = _signed_distance_2d(tri[torch.as_tensor(face)], centers)
        terms = F.logsigmoid(-d / sigma)
        log_uncovered = log_uncovered.index_add(0, torch.as_tensor(pixel), terms)
    return (1.0 - torch.exp(log_uncovered)).reshape(height, width)


def resample_labels(labels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resampling of a label map."""
    labels = np.asarray(labels)
    rows = (np.arange(height) * labels.shape[0]) // height
    cols = (np.arange(width) * labels.shape[1]) // width
    return labels[rows[:, None], cols[None, :]]


def loss_mask(sil_hand, sil_object, labels) -> torch.Tensor:
    """Per-entity mean L1 between silhouette and label mask.

    Pixels labelled as the other entity, or ignored, do not contribute, so an
    entity hidden behind the other one is never penalised for its amodal extent.
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    total = torch.zeros((), dtype=DTYPE)
    for sil, own, other in ((sil_hand, HAND, OBJECT), (sil_object, OBJECT, HAND)):
        if sil is None:
            continue
        sil = as_tensor(sil)
        if sil.shape != labels.shape:
            raise ValueError(f"silhouette {tuple(sil.shape)} vs labels {tuple(labels.shape)}")
        keep = (labels != other) & (labels != IGNORE_LABEL)
        if not bool(keep.any()):
            continue
        target = (labels == own).to(DTYPE)
        total = total + (sil - target).abs()[keep].mean()
    return total


def loss_reproj(points, targets, camera: Camera) -> torch.Tensor:
    """Mean pixel distance between projected points and their 2D targets."""
    uv = project(camera, as_tensor(points).reshape(-1, 3))
    targets = as_tensor(targets).reshape(-1, 2)
    if uv.shape != targets.shape:
        raise ValueError(f"{uv.shape[0]} points vs {targets.shape[0]} targets")
    return _safe_norm(uv - targets).mean()


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RefineSettings:
    w_contact: float = 1.0
    w_mask: float = 10.0
    w_reproj: float = 0.01
    lr: float = 1e-2
    max_iters: int = 100
    rel_tol: float = 1e-7
    grasp_gate: float = GRASP_GATE
    raster_size: int = RASTER_SIZE
    sharpness: float = RASTER_SHARPNESS
    hand_silhouette: bool = True

    def __post_init__(self) -> None:
        if min(self.w_contact, self.w_mask, self.w_reproj) < 0:
            raise ValueError("energy weights must be nonnegative")
        if self.lr <= 0 or self.max_iters < 0:
            raise ValueError("lr must be positive and max_iters nonnegative")
        if self.raster_size < 1 or self.sharpness <= 0:
            raise ValueError("raster_size and sharpness must be positive")


@dataclass(frozen=True, eq=False)
class RefineProblem:
    """Per-frame poses and global shape variables plus the fixed observations.

    ``object_cloud`` is the canonical point cloud whose projections are
    ``cloud_2d``; ``object_mesh`` is the canonical mesh extracted from the
    object field, absent before pretraining.
    """

    skeleton: Skeleton
    cameras: tuple[Camera, ...]
    theta: torch.Tensor
    hand_rotations: torch.Tensor
    hand_translations: torch.Tensor
    object_rotations: torch.Tensor
    object_translations: torch.Tensor
    beta: torch.Tensor
    scale: float
    object_cloud: torch.Tensor
    contact: ContactSpec
    joints_2d: torch.Tensor | None = None
    cloud_2d: torch.Tensor | None = None
    labels: tuple[np.ndarray, ...] | None = None
    object_mesh: TriMesh | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "cameras", tuple(self.cameras))
        for name in (
            "theta",
            "hand_rotations",
            "hand_translations",
            "object_rotations",
            "object_translations",
            "beta",
            "object_cloud",
        ):
            object.__setattr__(self, name, as_tensor(getattr(self, name)).detach())
        for name in ("joints_2d", "cloud_2d"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, as_tensor(value).detach())
        object.__setattr__(self, "scale", float(self.scale))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(np.asarray(x) for x in self.labels))

        n = len(self.cameras)
        per_frame = {
            "theta": self.theta,
            "hand_rotations": self.hand_rotations,
            "hand_translations": self.hand_translations,
            "object_rotations": self.object_rotations,
            "object_translations": self.object_translations,
            "joints_2d": self.joints_2d,
            "cloud_2d": self.cloud_2d,
            "labels": self.labels,
        }
        for name, value in per_frame.items():
            if value is not None and len(value) != n:
                raise ValueError(f"{name} has {len(value)} frames, expected {n}")
        if self.theta.shape[1:] != (self.skeleton.n_bones, 3):
            raise ValueError(f"theta must be (F, {self.skeleton.n_bones}, 3)")
        if self.beta.shape != (self.skeleton.n_bones,):
            raise ValueError(f"beta must have {self.skeleton.n_bones} entries")
        if self.scale <= 0:
            raise ValueError(f"object scale must be positive, got {self.scale}")
        if self.cloud_2d is not None and self.cloud_2d.shape[1] != self.object_cloud.shape[0]:
            raise ValueError("cloud_2d and object_cloud disagree on point count")

    @property
    def n_frames(self) -> int:
        return len(self.cameras)

    def hand_root(self, f: int) -> ScaledRigid:
        return ScaledRigid(self.hand_rotations[f], self.hand_translations[f])

    def object_pose(self, f: int) -> ScaledRigid:
        return ScaledRigid(self.object_rotations[f], self.object_translations[f], self.scale)

    def hand_state(self, f: int) -> HandState:
        return HandState(self.theta[f], self.beta, self.hand_root(f))

    def contact_vertices(self) -> torch.Tensor:
        if self.object_mesh is not None:
            return as_tensor(self.object_mesh.vertices)
        return self.object_cloud

    def to_dict(self) -> dict:
        return {
            "hand": [self.hand_state(f).to_dict() for f in range(self.n_frames)],
            "object": [self.object_pose(f).to_dict() for f in range(self.n_frames)],
            "beta": self.beta.tolist(),
            "scale": self.scale,
        }


@dataclass(frozen=True, eq=False)
class _Variables:
    params: ParamSet
    rotations: bool

    @classmethod
    def of(cls, problem: RefineProblem, rotations: bool) -> _Variables:
        ps = ParamSet()
        n = problem.n_frames
        if rotations:
            ps.add("hand_rotation", torch.zeros(n, 3, dtype=DTYPE), "pose")
            ps.add("object_rotation", torch.zeros(n, 3, dtype=DTYPE), "pose")
        ps.add("hand_translation", problem.hand_translations.clone(), "pose")
        ps.add("object_translation", problem.object_translations.clone(), "pose")
        ps.add("beta", problem.beta.clone(), "global")
        ps.add("log_scale", torch.tensor([np.log(problem.scale)], dtype=DTYPE), "global")
        return cls(ps, rotations)

    def beta(self) -> torch.Tensor:
        return self.params["beta"].clamp(*BETA_RANGE)

    def scale(self) -> torch.Tensor:
        return torch.exp(self.params["log_scale"][0])

    def hand_root(self, problem: RefineProblem, f: int) -> ScaledRigid:
        rotation = problem.hand_rotations[f]
        if self.rotations:
            rotation = axis_angle_to_matrix(self.params["hand_rotation"][f]) @ rotation
        return ScaledRigid(rotation, self.params["hand_translation"][f])

    def object_pose(self, problem: RefineProblem, f: int) -> ScaledRigid:
        rotation = problem.object_rotations[f]
        if self.rotations:
            rotation = axis_angle_to_matrix(self.params["object_rotation"][f]) @ rotation
        return ScaledRigid(rotation, self.params["object_translation"][f], self.scale())

    def solved(self, problem: RefineProblem) -> RefineProblem:
        with torch.no_grad():
            hands = [self.hand_root(problem, f) for f in range(problem.n_frames)]
            objects = [self.object_pose(problem, f) for f in range(problem.n_frames)]
            return replace(
                problem,
                hand_rotations=torch.stack([h.rotation for h in hands]),
                hand_translations=torch.stack([h.translation for h in hands]),
                object_rotations=torch.stack([o.rotation for o in objects]),
                object_translations=torch.stack([o.translation for o in objects]),
                beta=self.beta().clone(),
                scale=float(self.scale()),
            )


def contact_gate(problem: RefineProblem, threshold: float = GRASP_GATE) -> np.ndarray:
    """Frames whose initial fingertip-to-object distance is below ``threshold``."""
    spec = problem.contact
    canonical = problem.contact_vertices()
    gate = np.zeros(problem.n_frames, dtype=bool)
    with torch.no_grad():
        for f in range(problem.n_frames):
            bones = forward_kinematics(problem.skeleton, problem.hand_state(f))
            sk = problem.skeleton
            hand = blend_apply(bones, sk.weight_table, sk.canonical_vertices)
            tips = hand[list(spec.tip_vertex_ids)].numpy()
            obj = apply(problem.object_pose(f), canonical).numpy()
            dist, _ = cKDTree(obj).query(tips)
            gate[f] = float(np.min(dist)) < threshold
    return gate


def _frame_terms(
    problem: RefineProblem,
    variables: _Variables,
    f: int,
    settings: RefineSettings,
    *,
    contact: bool,
    mask: bool,
) -> dict[str, torch.Tensor]:
    sk = problem.skeleton
    hs = HandState(problem.theta[f], variables.beta(), variables.hand_root(problem, f))
    bones = forward_kinematics(sk, hs)
    hand = blend_apply(bones, sk.weight_table, sk.canonical_vertices)
    pose = variables.object_pose(problem, f)
    camera = problem.cameras[f]
    zero = torch.zeros((), dtype=DTYPE)
    terms = {"contact": zero, "mask": zero, "reproj": zero}

    if contact:
        obj = apply(pose, problem.contact_vertices())
        terms["contact"] = loss_contact(hand, obj, problem.contact)

    reproj = zero
    if problem.joints_2d is not None:
        reproj = reproj + loss_reproj(posed_joints(sk, hs), problem.joints_2d[f], camera)
    if problem.cloud_2d is not None:
        cloud = apply(pose, problem.object_cloud)
        reproj = reproj + loss_reproj(cloud, problem.cloud_2d[f], camera)
    terms["reproj"] = reproj

    if mask and problem.labels is not None and problem.object_mesh is not None:
        size = settings.raster_size
        raster_cam = camera.resized(size, size)
        labels = resample_labels(problem.labels[f], size, size)
        sil_hand = None
        if settings.hand_silhouette:
            sil_hand = soft_rasterize(hand, sk.template.faces, raster_cam, settings.sharpness)
        obj_vertices = apply(pose, problem.object_mesh.vertices)
        sil_object = soft_rasterize(
            obj_vertices, problem.object_mesh.faces, raster_cam, settings.sharpness
        )
        terms["mask"] = loss_mask(sil_hand, sil_object, labels)
    return terms


def _energy_fn(
    problem: RefineProblem,
    variables: _Variables,
    settings: RefineSettings,
    gate: np.ndarray,
    *,
    mask: bool,
) -> Callable[[], tuple[torch.Tensor, dict[str, float]]]:
    weights = {
        "contact": settings.w_contact,
        "mask": settings.w_mask if mask else 0.0,
        "reproj": settings.w_reproj,
    }

    def energy() -> tuple[torch.Tensor, dict[str, float]]:
        sums = {name: torch.zeros((), dtype=DTYPE) for name in weights}
        for f in range(problem.n_frames):
            terms = _frame_terms(
                problem, variables, f, settings, contact=bool(gate[f]), mask=mask
            )
            for name in sums:
                sums[name] = sums[name] + terms[name]
        means = {name: value / problem.n_frames for name, value in sums.items()}
        total = sum(weights[name] * means[name] for name in weights)
        record = {f"energy_{name}": float(value) for name, value in means.items()}
        record["energy_total"] = float(total)
        return total, record

    return energy


@dataclass
class RefineResult:
    problem: RefineProblem
    stage: str
    converged: bool
    iterations: int
    energy: float
    initial_terms: dict[str, float] = field(default_factory=dict)
    final_terms: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @property
    def provenance(self) -> dict:
        return {"stage": self.stage, "iterations": self.iterations, "converged": self.converged}


def _solve(
    problem: RefineProblem,
    settings: RefineSettings,
    *,
    stage: str,
    rotations: bool,
    mask: bool,
    gate: np.ndarray,
    on_iteration: Callable[[dict], None] | None,
    admissible: Callable[[dict, dict], bool] | None = None,
) -> RefineResult:
    """Run the descent; with ``admissible`` the returned iterate must satisfy it.

    ``admissible(initial_terms, terms)`` is checked on every accepted iterate. When
    the last iterate fails it, the latest admissible one is restored (or the input
    poses if none was) and the result is flagged as not converged.
    """
    variables = _Variables.of(problem, rotations)
    energy_fn = _energy_fn(problem, variables, settings, gate, mask=mask)
    with torch.no_grad():
        _, initial = energy_fn()
    logger.info(
        "%s: %d frames, initial energy %.6g", stage, problem.n_frames, initial["energy_total"]
    )
    start = variables.params.flatten()
    best = start

    def log_iteration(record: dict) -> None:
        nonlocal best
        record = {"stage": stage, **record}
        logger.debug("%s iteration %d: %s", stage, record["iteration"], record)
        if admissible is not None and record["accepted"] and admissible(initial, record):
            best = variables.params.flatten()
        if on_iteration:
            on_iteration(record)

    outcome = descend(
        energy_fn,
        variables.params,
        lr=settings.lr,
        max_iters=settings.max_iters,
        rel_tol=settings.rel_tol,
        on_iteration=log_iteration,
    )
    converged = outcome.converged
    with torch.no_grad():
        total, final = energy_fn()
    if admissible is not None and not admissible(initial, final):
        variables.params.assign(best)
        with torch.no_grad():
            total, final = energy_fn()
        converged = False
        logger.warning(
            "%s: last iterate violates its bound, keeping %s",
            stage,
            "the input poses" if best is start else "the best admissible iterate",
        )
    elif not converged:
        logger.warning("%s did not converge after %d iterations", stage, outcome.iterations)
    solved = variables.solved(problem)
    logger.info(
        "%s: energy %.6g -> %.6g in %d iterations",
        stage,
        initial["energy_total"],
        final["energy_total"],
        outcome.iterations,
    )
    return RefineResult(
        solved,
        stage,
        converged,
        outcome.iterations,
        float(total),
        initial,
        final,
        outcome.history,
    )


def _reproj_within_tolerance(initial: dict, terms: dict) -> bool:
    before, after = initial["energy_reproj"], terms["energy_reproj"]
    return after <= (1.0 + REPROJ_TOLERANCE) * before or after - before <= 1e-9


def align_init(
    problem: RefineProblem,
    settings: RefineSettings | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> RefineResult:
    """Fit per-frame translations, hand shape and object scale; rotations stay fixed.

    Contact is applied in every frame against the object point cloud. The
    returned poses never raise the reprojection error by more than
    ``REPROJ_TOLERANCE``; when the descent ends outside that bound the latest
    iterate inside it is kept and ``converged`` is False.
    """
    settings = settings or RefineSettings()
    aligned = replace(problem, object_mesh=None)
    gate = np.ones(problem.n_frames, dtype=bool)
    result = _solve(
        aligned,
        settings,
        stage="align",
        rotations=False,
        mask=False,
        gate=gate,
        on_iteration=on_iteration,
        admissible=_reproj_within_tolerance,
    )
    result.problem = replace(result.problem, object_mesh=problem.object_mesh)
    return result


def refine_poses(
    problem: RefineProblem,
    settings: RefineSettings | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> RefineResult:
    """Refine every pose variable against contact, silhouettes and reprojection."""
    settings = settings or RefineSettings()
    if problem.object_mesh is None:
        raise ValueError("pose refinement needs the extracted object mesh")
    gate = contact_gate(problem, settings.grasp_gate)
    logger.info("contact active in %d/%d frames", int(gate.sum()), problem.n_frames)
    return _solve(
        problem,
        settings,
        stage="refine",
        rotations=True,
        mask=True,
        gate=gate,
        on_iteration=on_iteration,
    )


# ---------------------------------------------------------------------------
# Gradient probes
# ---------------------------------------------------------------------------
@register_probe("refine.contact_wrt_vertices")
def _probe_contact():
    g = probe_generator("refine.contact_wrt_vertices")
    hand = torch.randn(6, 3, generator=g, dtype=DTYPE).requires_grad_(True)
    obj = (2.0 + torch.randn(20, 3, generator=g, dtype=DTYPE)).requires_grad_(True)
    spec = ContactSpec((1, 4))
    return (lambda h, o: loss_contact(h, o, spec)), (hand, obj)


@register_probe("refine.soft_rasterize_wrt_vertices", rtol=1e-3, atol=1e-5)
def _probe_raster():
    camera = Camera.look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], focal=12.0, width=8, height=8)
    faces = [[0, 1, 2]]
    vertices = torch.tensor(
        [[-0.9, -0.7, 0.1], [1.1, -0.4, 0.0], [0.2, 1.0, -0.2]], dtype=DTYPE
    ).requires_grad_(True)
    return (lambda v: soft_rasterize(v, faces, camera, sharpness=0.1)), (vertices,)


@register_probe("refine.mask_wrt_silhouettes")
def _probe_mask():
    g = probe_generator("refine.mask_wrt_silhouettes")
    labels = np.array([[0, 1, 2, 255], [2, 0, 1, 0], [1, 2, 0, 2]], dtype=np.uint8)
    # values kept away from the 0/1 targets where |x| has a kink
    hand = (0.2 + 0.6 * torch.rand(3, 4, generator=g, dtype=DTYPE)).requires_grad_(True)
    obj = (0.2 + 0.6 * torch.rand(3, 4, generator=g, dtype=DTYPE)).requires_grad_(True)
    return (lambda h, o: loss_mask(h, o, labels)), (hand, obj)


@register_probe("refine.reproj_wrt_points")
def _probe_reproj():
    g = probe_generator("refine.reproj_wrt_points")
    camera = Camera.look_at([0.0, 0.0, -5.0], [0.0, 0.0, 0.0], focal=50.0, width=64, height=64)
    points = (0.5 * torch.randn(5, 3, generator=g, dtype=DTYPE)).requires_grad_(True)
    targets = 32.0 + 4.0 * torch.randn(5, 2, generator=g, dtype=DTYPE)
    return (lambda p: loss_reproj(p, targets, camera)), (points,)
