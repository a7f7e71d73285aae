"""SceneDataset container and its on-disk layout.

One dataset directory holds a JSON manifest plus the files it points to::

    manifest.json
    frames/000/color.png   frames/000/labels.png   frames/000/depth.pfm
    cloud.ply              gt_object.ply
    skeleton/template.obj  skeleton/template_weights.bin
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import imageio.v3 as iio
import numpy as np
import trimesh

from holdfield.geometry import Camera, ScaledRigid
from holdfield.losses import IGNORE_LABEL
from holdfield.meshmetrics import TriMesh, read_mesh
from holdfield.rendering import HAND, read_pfm, read_png, write_pfm, write_png
from holdfield.skeleton import HandState, Skeleton, read_skeleton, write_skeleton

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
LABEL_VALUES = (0, 1, 2, IGNORE_LABEL)


@dataclass(frozen=True, eq=False)
class PoseSet:
    """Per-frame hand states and object poses (``{R_o, t_o, s}``)."""

    hands: tuple[HandState, ...]
    objects: tuple[ScaledRigid, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "hands", tuple(self.hands))
        object.__setattr__(self, "objects", tuple(self.objects))
        if len(self.hands) != len(self.objects):
            raise ValueError(f"{len(self.hands)} hand states vs {len(self.objects)} object poses")

    def __len__(self) -> int:
        return len(self.hands)

    def with_object_frame(self, frame: ScaledRigid) -> PoseSet:
        """Object poses re-expressed for canonical coordinates mapped by ``frame``."""
        return PoseSet(self.hands, tuple(o.compose(frame) for o in self.objects))

    def to_dict(self) -> list[dict]:
        return [
            {"hand": h.to_dict(), "object": o.to_dict()}
            for h, o in zip(self.hands, self.objects, strict=True)
        ]

    @classmethod
    def from_dict(cls, raw: list[dict]) -> PoseSet:
        return cls(
            tuple(HandState.from_dict(r["hand"]) for r in raw),
            tuple(ScaledRigid.from_dict(r["object"]) for r in raw),
        )


@dataclass(eq=False)
class SceneDataset:
    name: str
    skeleton: Skeleton
    cameras: tuple[Camera, ...]
    images: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    init: PoseSet
    object_cloud: np.ndarray
    joints_2d: np.ndarray
    cloud_2d: np.ndarray
    gt: PoseSet | None = None
    depths: tuple[np.ndarray, ...] | None = None
    gt_object: TriMesh | None = None
    refined: PoseSet | None = None
    provenance: dict | None = None
    meta: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self) -> None:
        self.cameras = tuple(self.cameras)
        self.images = tuple(np.asarray(x, dtype=np.float64) for x in self.images)
        self.labels = tuple(np.asarray(x, dtype=np.uint8) for x in self.labels)
        self.object_cloud = np.asarray(self.object_cloud, dtype=np.float64).reshape(-1, 3)
        self.joints_2d = np.asarray(self.joints_2d, dtype=np.float64)
        self.cloud_2d = np.asarray(self.cloud_2d, dtype=np.float64)
        n = len(self.cameras)
        counts = {
            "images": len(self.images),
            "labels": len(self.labels),
            "init": len(self.init),
            "joints_2d": len(self.joints_2d),
            "cloud_2d": len(self.cloud_2d),
        }
        for name, optional in (("gt", self.gt), ("depths", self.depths), ("refined", self.refined)):
            if optional is not None:
                counts[name] = len(optional)
        for name, count in counts.items():
            if count != n:
                raise ValueError(f"{name} has {count} frames, expected {n}")
        if n == 0:
            raise ValueError("dataset has no frames")
        for f, (cam, image, labels) in enumerate(zip(self.cameras, self.images, self.labels)):
            if image.shape != (cam.height, cam.width, 3) or labels.shape != image.shape[:2]:
                raise ValueError(f"frame {f}: image/labels do not match the camera resolution")
            bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
            if bad.size:
                raise ValueError(f"frame {f}: label values {bad.tolist()} outside {LABEL_VALUES}")
        if self.cloud_2d.shape[1] != len(self.object_cloud):
            raise ValueError("cloud_2d and object_cloud disagree on point count")

    @property
    def n_frames(self) -> int:
        return len(self.cameras)

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    def poses(self, which: str = "init") -> PoseSet:
        match which:
            case "init":
                return self.init
            case "refined" if self.refined is not None:
                return self.refined
            case "gt" if self.gt is not None:
                return self.gt
        raise ValueError(f"dataset {self.name!r} has no {which} poses")

    def with_hand_masked(self) -> SceneDataset:
        """Hand pixels relabelled as ignore."""
        masked = tuple(np.where(x == HAND, IGNORE_LABEL, x).astype(np.uint8) for x in self.labels)
        return replace(self, labels=masked)


# ---------------------------------------------------------------------------
# Canonical object frame
# ---------------------------------------------------------------------------
def object_frame(cloud: np.ndarray) -> ScaledRigid:
    """Map from the unit-ball canonical object space to the point-cloud frame."""
    cloud = np.asarray(cloud, dtype=np.float64)
    center = cloud.mean(axis=0)
    radius = float(np.linalg.norm(cloud - center, axis=1).max())
    if radius <= 0.0:
        raise ValueError("object point cloud has zero extent")
    return ScaledRigid(np.eye(3), center, radius)


# ---------------------------------------------------------------------------
# Read / write
# ---------------------------------------------------------------------------
def _write_points(path: Path, points: np.ndarray) -> None:
    trimesh.PointCloud(np.asarray(points, dtype=np.float64)).export(path)


def _read_points(path: Path) -> np.ndarray:
    cloud = trimesh.load(path, process=False)
    return np.asarray(cloud.vertices, dtype=np.float64)


def _frame_dir(i: int) -> str:
    return f"frames/{i:03d}"


def write_dataset(ds: SceneDataset, directory: Path) -> Path:
    """Write ``ds`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = []
    for i in range(ds.n_frames):
        rel = _frame_dir(i)
        write_png(directory / rel / "color.png", ds.images[i])
        iio.imwrite(directory / rel / "labels.png", ds.labels[i])
        entry = {
            "index": i,
            "image": f"{rel}/color.png",
            "labels": f"{rel}/labels.png",
            "camera": ds.cameras[i].to_dict(),
            "init": ds.init.to_dict()[i],
            "joints_2d": ds.joints_2d[i].tolist(),
            "cloud_2d": ds.cloud_2d[i].tolist(),
        }
        if ds.depths is not None:
            write_pfm(directory / rel / "depth.pfm", ds.depths[i])
            entry["depth"] = f"{rel}/depth.pfm"
        if ds.gt is not None:
            entry["gt"] = ds.gt.to_dict()[i]
        frames.append(entry)

    _write_points(directory / "cloud.ply", ds.object_cloud)
    manifest = {
        "format": FORMAT_VERSION,
        "name": ds.name,
        "width": ds.width,
        "height": ds.height,
        "skeleton": write_skeleton(ds.skeleton, directory / "skeleton"),
        "object_cloud": "cloud.ply",
        "frames": frames,
        "refined": ds.refined.to_dict() if ds.refined is not None else None,
        "provenance": ds.provenance,
        "meta": ds.meta,
    }
    if ds.gt_object is not None:
        ds.gt_object.to_trimesh().export(directory / "gt_object.ply")
        manifest["gt_object"] = "gt_object.ply"
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.root = directory
    logger.info("wrote %d frames to %s", ds.n_frames, directory)
    return path


def read_dataset(directory: Path) -> SceneDataset:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    raw = json.loads(path.read_text())

    try:
        frames = raw["frames"]
        skeleton = read_skeleton(raw["skeleton"], directory / "skeleton")
        cameras = tuple(Camera.from_dict(f["camera"]) for f in frames)
        images = tuple(read_png(directory / f["image"]) for f in frames)
        labels = tuple(np.asarray(iio.imread(directory / f["labels"])) for f in frames)
        init = PoseSet.from_dict([f["init"] for f in frames])
        cloud = _read_points(directory / raw["object_cloud"])
        joints_2d = np.asarray([f["joints_2d"] for f in frames], dtype=np.float64)
        cloud_2d = np.asarray([f["cloud_2d"] for f in frames], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{MANIFEST} missing required key: {exc}") from exc

    gt = PoseSet.from_dict([f["gt"] for f in frames]) if all("gt" in f for f in frames) else None
    depths = None
    if all("depth" in f for f in frames):
        depths = tuple(read_pfm(directory / f["depth"]) for f in frames)
    gt_object = None
    if raw.get("gt_object"):
        gt_object = read_mesh(directory / raw["gt_object"])
    refined = PoseSet.from_dict(raw["refined"]) if raw.get("refined") else None

    return SceneDataset(
        name=raw.get("name", directory.name),
        skeleton=skeleton,
        cameras=cameras,
        images=images,
        labels=labels,
        init=init,
        object_cloud=cloud,
        joints_2d=joints_2d,
        cloud_2d=cloud_2d,
        gt=gt,
        depths=depths,
        gt_object=gt_object,
        refined=refined,
        provenance=raw.get("provenance"),
        meta=raw.get("meta") or {},
        root=directory,
    )


def write_refined(directory: Path, poses: PoseSet, provenance: dict) -> Path:
    """Store refined poses in an existing manifest, in place."""
    path = Path(directory) / MANIFEST
    raw = json.loads(path.read_text())
    if len(poses) != len(raw["frames"]):
        raise ValueError(f"{len(poses)} refined poses for {len(raw['frames'])} frames")
    raw["refined"] = poses.to_dict()
    raw["provenance"] = provenance
    path.write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")
    return path
