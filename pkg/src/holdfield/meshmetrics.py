"""Surface extraction, alignment and reconstruction metrics.

Units follow the scene convention (1 unit = 1 cm): chamfer distances are in
cm², F-score thresholds in cm, MPJPE in mm.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import mcubes
import numpy as np
import polars as pl
import torch
import trimesh
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from holdfield.errors import DegenerateMesh, EmptyLevelSet
from holdfield.geometry import DTYPE, ScaledRigid, apply, as_tensor

logger = logging.getLogger(__name__)

EVAL_SAMPLES = 30_000
CHAMFER_CONVENTION = (
    "cd: symmetric mean of squared nearest-neighbour distances, "
    "(mean_a d(a,B)^2 + mean_b d(b,A)^2) / 2, in cm^2"
)


# ---------------------------------------------------------------------------
# Mesh container
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError(f"face index out of range for {len(v)} vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> TriMesh:
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces))

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(self.vertices, self.faces, process=False)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def max_edge_length(self) -> float:
        tri = self.vertices[self.faces]
        edges = tri - np.roll(tri, 1, axis=1)
        return float(np.linalg.norm(edges, axis=2).max()) if len(tri) else 0.0

    def cleaned(self, min_area: float = 1e-14) -> TriMesh:
        """Drop zero-area faces and vertices no face references."""
        keep = self.face_areas() > min_area
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(self.vertices[used], remap[faces])

    def oriented_outward(self) -> TriMesh:
        """Flip winding when the enclosed signed volume is negative."""
        if self.to_trimesh().volume < 0:
            return TriMesh(self.vertices, self.faces[:, ::-1].copy())
        return self

    def sample(self, count: int = EVAL_SAMPLES, seed: int = 0) -> np.ndarray:
        if not len(self.faces):
            raise DegenerateMesh("cannot sample a mesh without faces")
        points, _ = trimesh.sample.sample_surface(self.to_trimesh(), count, seed=seed)
        return np.asarray(points, dtype=np.float64)

    def transformed(self, t: ScaledRigid) -> TriMesh:
        verts = apply(t.detach(), self.vertices).numpy()
        return TriMesh(verts, self.faces)

    def translated(self, offset) -> TriMesh:
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)


def read_obj(path: Path) -> TriMesh:
    mesh = trimesh.load(Path(path), file_type="obj", process=False, force="mesh")
    return TriMesh.from_trimesh(mesh)


def read_mesh(path: Path) -> TriMesh:
    """Any mesh format trimesh reads (OBJ, PLY, STL)."""
    return TriMesh.from_trimesh(trimesh.load(Path(path), process=False, force="mesh"))


def write_obj(path: Path, mesh: TriMesh) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = trimesh.exchange.obj.export_obj(
        mesh.to_trimesh(), include_normals=False, include_color=False, digits=10
    )
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------
def evaluate_grid(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    resolution: int,
    bounds: tuple[float, float],
    chunk: int = 65_536,
) -> np.ndarray:
    axis = torch.linspace(bounds[0], bounds[1], resolution, dtype=DTYPE)
    xx, yy, zz = torch.meshgrid(axis, axis, axis, indexing="ij")
    points = torch.stack([xx.reshape(-1), yy.reshape(-1), zz.reshape(-1)], dim=-1)
    values = torch.empty(points.shape[0], dtype=DTYPE)
    with torch.no_grad():
        for start in range(0, points.shape[0], chunk):
            values[start : start + chunk] = field_fn(points[start : start + chunk])
    return values.reshape(resolution, resolution, resolution).numpy()


def marching_cubes(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    resolution: int = 64,
    bounds: tuple[float, float] = (-2.0, 2.0),
) -> TriMesh:
    """Zero level set of ``field_fn`` sampled on a ``resolution``³ grid over ``bounds``³."""
    volume = evaluate_grid(field_fn, resolution, bounds)
    if not np.isfinite(volume).all():
        raise ValueError("field is not finite on the extraction grid")
    if not (volume.min() < 0.0 < volume.max()):
        raise EmptyLevelSet(f"no sign change on the {resolution}^3 grid")
    vertices, triangles = mcubes.marching_cubes(volume, 0.0)
    lo, hi = bounds
    vertices = vertices / (resolution - 1.0) * (hi - lo) + lo
    mesh = TriMesh(vertices, triangles.astype(np.int64)).cleaned()
    if not len(mesh.faces):
        raise EmptyLevelSet("level set produced only degenerate faces")
    return mesh.oriented_outward()


def cell_diagonal(resolution: int, bounds: tuple[float, float]) -> float:
    return math.sqrt(3.0) * (bounds[1] - bounds[0]) / (resolution - 1)


# ---------------------------------------------------------------------------
# Point-to-mesh queries
# ---------------------------------------------------------------------------
def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    return num / torch.where(den == 0, torch.ones_like(den), den)


def closest_points_on_triangles(
    p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, c: torch.Tensor
) -> torch.Tensor:
    """Closest point on each triangle to each point, broadcasting ``(N,1,3)`` vs ``(1,F,3)``."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = (ab * ap).sum(-1), (ac * ap).sum(-1)
    d3, d4 = (ab * bp).sum(-1), (ac * bp).sum(-1)
    d5, d6 = (ab * cp).sum(-1), (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom = _safe_div(torch.ones_like(va), va + vb + vc)
    result = a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None]

    # Voronoi regions, lowest priority first so earlier tests win
    w_bc = _safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    result = torch.where(on_bc[..., None], b + w_bc[..., None] * (c - b), result)

    w_ac = _safe_div(d2, d2 - d6)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result = torch.where(on_ac[..., None], a + w_ac[..., None] * ac, result)

    result = torch.where(((d6 >= 0) & (d5 <= d6))[..., None], c.expand_as(result), result)

    v_ab = _safe_div(d1, d1 - d3)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result = torch.where(on_ab[..., None], a + v_ab[..., None] * ab, result)

    result = torch.where(((d3 >= 0) & (d4 <= d3))[..., None], b.expand_as(result), result)
    result = torch.where(((d1 <= 0) & (d2 <= 0))[..., None], a.expand_as(result), result)
    return result


def point_mesh_distance(points, mesh: TriMesh, chunk: int = 4096) -> torch.Tensor:
    """Unsigned distance from each point to the nearest triangle.

    The nearest mesh vertex bounds the answer, so only faces whose bounding
    sphere reaches within that bound are tested exactly.
    """
    points = as_tensor(points).detach().reshape(-1, 3)
    p = points.numpy()
    faces = np.asarray(mesh.faces, dtype=np.int64)
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    tri = vertices[faces]
    centers = tri.mean(axis=1)
    radius = float(np.linalg.norm(tri - centers[:, None], axis=-1).max())

    bound, _ = cKDTree(vertices[np.unique(faces)]).query(p)
    out = torch.as_tensor(bound, dtype=DTYPE).clone()
    tree = cKDTree(centers)
    tri = torch.as_tensor(tri, dtype=DTYPE)
    for start in range(0, len(p), chunk):
        stop = min(start + chunk, len(p))
        hits = tree.query_ball_point(p[start:stop], bound[start:stop] + radius + 1e-12)
        counts = np.array([len(h) for h in hits], dtype=np.int64)
        if not counts.any():
            continue
        owner = torch.as_tensor(np.repeat(np.arange(start, stop), counts))
        face = torch.as_tensor(np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]))
        q, t = points[owner], tri[face]
        closest = closest_points_on_triangles(q, t[:, 0], t[:, 1], t[:, 2])
        d = torch.linalg.vector_norm(q - closest, dim=-1)
        out = out.scatter_reduce(0, owner, d, reduce="amin")
    return out


def winding_number(points, mesh: TriMesh, chunk: int = 256) -> torch.Tensor:
    """Generalised winding number; ~1 inside a closed outward-oriented mesh, ~0 outside."""
    points = as_tensor(points).detach()
    tri = torch.as_tensor(mesh.vertices[mesh.faces], dtype=DTYPE)
    out = torch.empty(points.shape[0], dtype=DTYPE)
    for start in range(0, points.shape[0], chunk):
        rel = tri[None] - points[start : start + chunk, None, None, :]
        a, b, c = rel[..., 0, :], rel[..., 1, :], rel[..., 2, :]
        la, lb, lc = (torch.linalg.vector_norm(v, dim=-1) for v in (a, b, c))
        det = (a * torch.cross(b, c, dim=-1)).sum(-1)
        den = la * lb * lc + (a * b).sum(-1) * lc + (b * c).sum(-1) * la + (c * a).sum(-1) * lb
        out[start : start + chunk] = (2.0 * torch.atan2(det, den)).sum(-1) / (4.0 * math.pi)
    return out


def signed_distance(points, mesh: TriMesh) -> torch.Tensor:
    """Point-to-mesh distance, negative inside."""
    dist = point_mesh_distance(points, mesh)
    inside = winding_number(points, mesh) > 0.5
    return torch.where(inside, -dist, dist)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------
@dataclass
class IcpResult:
    transform: ScaledRigid
    aligned: TriMesh
    residual: float
    converged: bool
    iterations: int


def _similarity_guess(src: np.ndarray, tgt: np.ndarray, rotation: np.ndarray, scale: bool):
    cs, ct = src.mean(0), tgt.mean(0)
    s = 1.0
    if scale:
        spread_t = ((tgt - ct) ** 2).sum(1).mean()
        spread_s = max(((src - cs) ** 2).sum(1).mean(), 1e-18)
        s = math.sqrt(spread_t / spread_s)
    m = np.eye(4)
    m[:3, :3] = s * rotation
    m[:3, 3] = ct - s * rotation @ cs
    return m


def _apply_h(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ matrix[:3, :3].T + matrix[:3, 3]


def icp_align(
    source: TriMesh,
    target: TriMesh,
    allow_scale: bool = True,
    *,
    restarts: int = 10,
    samples: int = 4000,
    max_iterations: int = 100,
    tolerance: float = 1e-6,
    seed: int = 0,
) -> IcpResult:
    """Similarity ICP with a Procrustes solve per iteration and rotation restarts."""
    src = source.sample(samples, seed)
    tgt = target.sample(samples, seed)
    tree = cKDTree(tgt)
    starts = [np.eye(3)]
    starts += list(Rotation.random(restarts, random_state=seed).as_matrix())

    best: tuple[float, np.ndarray, bool, int] | None = None
    for rotation in starts:
        matrix = _similarity_guess(src, tgt, rotation, allow_scale)
        converged, iterations = False, 0
        for iterations in range(1, max_iterations + 1):
            _, index = tree.query(_apply_h(matrix, src))
            update, _, _ = trimesh.registration.procrustes(
                src, tgt[index], reflection=False, translation=True, scale=allow_scale
            )
            delta = float(np.abs(update - matrix).max())
            matrix = update
            if delta < tolerance:
                converged = True
                break
        dist, _ = tree.query(_apply_h(matrix, src))
        residual = float(np.mean(dist**2))
        if best is None or residual < best[0]:
            best = (residual, matrix, converged, iterations)

    residual, matrix, converged, iterations = best
    if not converged:
        logger.warning("ICP hit %d iterations without converging", max_iterations)
    transform = ScaledRigid.from_matrix(matrix)
    return IcpResult(transform, source.transformed(transform), residual, converged, iterations)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def _nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return d_ab, d_ba


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d_ab, d_ba = _nearest(np.asarray(a), np.asarray(b))
    return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))


def precision_recall(a: np.ndarray, b: np.ndarray, threshold: float) -> tuple[float, float]:
    d_ab, d_ba = _nearest(np.asarray(a), np.asarray(b))
    return float(np.mean(d_ab < threshold)), float(np.mean(d_ba < threshold))


def fscore(a: np.ndarray, b: np.ndarray, threshold: float) -> float:
    precision, recall = precision_recall(a, b, threshold)
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def mpjpe(pred, gt, root: int = 0) -> float:
    """Root-relative mean joint error; joints in cm, result in mm."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"joint arrays differ in shape: {pred.shape} vs {gt.shape}")
    rel_pred = pred - pred[..., root : root + 1, :]
    rel_gt = gt - gt[..., root : root + 1, :]
    return 10.0 * float(np.linalg.norm(rel_pred - rel_gt, axis=-1).mean())


def cd_h(
    pred_meshes: list[TriMesh],
    gt_meshes: list[TriMesh],
    pred_roots,
    gt_roots,
    samples: int = EVAL_SAMPLES,
    seed: int = 0,
) -> list[float]:
    """Per-frame hand-relative chamfer; average the list for the sequence value."""
    out = []
    for pm, gm, pr, gr in zip(pred_meshes, gt_meshes, pred_roots, gt_roots, strict=True):
        a = pm.translated(-np.asarray(pr)).sample(samples, seed)
        b = gm.translated(-np.asarray(gr)).sample(samples, seed)
        out.append(chamfer(a, b))
    return out


@dataclass
class MetricReport:
    cd: float
    f5: float
    f10: float
    mpjpe: float | None = None
    cd_h: float | None = None
    recall5: float | None = None
    frames: list[dict] = field(default_factory=list)
    header: str = CHAMFER_CONVENTION

    def __post_init__(self) -> None:
        if self.f5 > self.f10 + 1e-9:
            raise ValueError(f"F5 ({self.f5}) exceeds F10 ({self.f10})")

    def to_dict(self, digits: int = 6) -> dict:
        def rounded(value):
            if value is None or isinstance(value, int):
                return value
            return round(float(value), digits)

        return {
            "header": self.header,
            "cd": rounded(self.cd),
            "f5": rounded(self.f5),
            "f10": rounded(self.f10),
            "mpjpe": rounded(self.mpjpe),
            "cd_h": rounded(self.cd_h),
            "recall5": rounded(self.recall5),
            "frames": [{k: rounded(v) for k, v in row.items()} for row in self.frames],
        }

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def object_metrics(
    pred: TriMesh,
    gt: TriMesh,
    *,
    align: bool = True,
    samples: int = EVAL_SAMPLES,
    seed: int = 0,
) -> dict[str, float]:
    """CD, F5, F10 and recall at 0.5 after optional similarity ICP onto ``gt``."""
    if align:
        pred = icp_align(pred, gt, allow_scale=True, seed=seed).aligned
    a, b = pred.sample(samples, seed), gt.sample(samples, seed)
    _, recall5 = precision_recall(a, b, 0.5)
    return {
        "cd": chamfer(a, b),
        "f5": fscore(a, b, 0.5),
        "f10": fscore(a, b, 1.0),
        "recall5": 100.0 * recall5,
    }


def frame_table(rows: list[dict]) -> pl.DataFrame:
    return pl.DataFrame(rows).sort("frame")


def build_report(object_scores: dict[str, float], frame_rows: list[dict]) -> MetricReport:
    """Combine sequence-level object scores with a per-frame MPJPE / CD_h table."""
    mean_mpjpe = mean_cd_h = None
    frames: list[dict] = []
    if frame_rows:
        table = frame_table(frame_rows)
        means = table.select(pl.col("mpjpe").mean(), pl.col("cd_h").mean()).row(0, named=True)
        mean_mpjpe, mean_cd_h = means["mpjpe"], means["cd_h"]
        frames = table.to_dicts()
    return MetricReport(
        cd=object_scores["cd"],
        f5=object_scores["f5"],
        f10=object_scores["f10"],
        recall5=object_scores.get("recall5"),
        mpjpe=mean_mpjpe,
        cd_h=mean_cd_h,
        frames=frames,
    )
