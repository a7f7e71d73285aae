"""Scene scripts and the synthetic dataset generator.

A scene script is a TOML file describing an analytic object, a grasp, a camera
path and the noise applied to the initial estimates. ``gen_scene`` renders the
ground truth with dense quadrature and emits everything a capture pipeline
would hand over: images, label maps, noisy poses, 2D keypoints and a sparse
object point cloud at an arbitrary global scale.
"""

from __future__ import annotations

import logging
import math
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from holdfield.autodiff import derive_rng
from holdfield.errors import SceneScriptError
from holdfield.fields import (
    BACKGROUND_RADIUS,
    AnalyticField,
    Box,
    Capsule,
    ConstantBackground,
    Sphere,
    Union,
)
from holdfield.geometry import Camera, ScaledRigid, apply, project
from holdfield.harness.dataset import PoseSet, SceneDataset, write_dataset
from holdfield.meshmetrics import TriMesh, marching_cubes
from holdfield.rendering import (
    DensityParams,
    FrameState,
    SceneModel,
    render_dense,
    to_image,
)
from holdfield.skeleton import (
    BETA_RANGE,
    HandState,
    Skeleton,
    build_default_skeleton,
    posed_joints,
    posed_template,
)

logger = logging.getLogger(__name__)

GT_ALPHA2 = 0.01
LAYOUTS = ("standard", "occluded")
SHAPES = ("sphere", "box", "capsule")

# viewing direction and image-down vector in the hand frame
_VIEWS = {
    "standard": ((0.3, -1.0, 0.35), (0.0, 0.0, -1.0)),
    "occluded": ((0.1, -0.15, 1.0), (0.0, -1.0, 0.0)),
}


# ---------------------------------------------------------------------------
# Script schema
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ObjectSpec:
    shape: str = "sphere"
    radius: float = 0.5
    half_extents: tuple[float, float, float] = (0.4, 0.4, 0.4)
    length: float = 0.6
    color: tuple[float, float, float] = (0.85, 0.35, 0.2)
    texture: float = 0.15

    def analytic(self) -> Sphere | Box | Capsule:
        match self.shape:
            case "sphere":
                return Sphere(self.radius)
            case "box":
                return Box(self.half_extents)
            case _:
                half = 0.5 * self.length
                return Capsule((-half, 0.0, 0.0), (half, 0.0, 0.0), self.radius)

    @property
    def extent(self) -> float:
        match self.shape:
            case "sphere":
                return self.radius
            case "box":
                return float(np.linalg.norm(self.half_extents))
            case _:
                return 0.5 * self.length + self.radius


@dataclass(frozen=True)
class HandSpec:
    color: tuple[float, float, float] = (0.9, 0.72, 0.6)
    texture: float = 0.05
    beta: float = 1.0
    flex: float = 0.6


@dataclass(frozen=True)
class CameraPath:
    distance: float = 5.0
    focal: float = 70.0
    orbit_degrees: float = 40.0
    azimuth_degrees: float = 0.0


@dataclass(frozen=True)
class Trajectory:
    swing_degrees: float = 20.0
    drift: float = 0.2


@dataclass(frozen=True)
class NoiseModel:
    rotation_degrees: float = 5.0
    translation: float = 0.5
    scale: float = 0.2
    keypoint_px: float = 0.5
    cloud: float = 0.005


@dataclass(frozen=True)
class CloudSpec:
    points: int = 2000
    scale: float = 1.0


@dataclass(frozen=True)
class SceneScript:
    name: str
    frames: int
    object: ObjectSpec
    width: int = 64
    height: int = 64
    seed: int = 0
    layout: str = "standard"
    render_samples: int = 1024
    hand: HandSpec = HandSpec()
    camera: CameraPath = CameraPath()
    trajectory: Trajectory = Trajectory()
    noise: NoiseModel = NoiseModel()
    cloud: CloudSpec = CloudSpec()
    background: tuple[float, float, float] = (0.12, 0.12, 0.16)
    source: Path | None = field(default=None, compare=False)


_SECTIONS = {
    "object": ObjectSpec,
    "hand": HandSpec,
    "camera": CameraPath,
    "trajectory": Trajectory,
    "noise": NoiseModel,
    "cloud": CloudSpec,
}
_SCENE_KEYS = ("name", "frames", "width", "height", "seed", "layout", "render_samples")


def _line_of(text: str, section: str, key: str | None) -> int | None:
    """Line number of ``key`` inside ``[section]`` (or of the section header)."""
    current = "<root>"
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return number
            continue
        if current == section and key is not None and re.match(rf"{re.escape(key)}\s*=", stripped):
            return number
    return None


class _Checker:
    def __init__(self, text: str):
        self.text = text

    def fail(self, section: str, key: str | None, message: str):
        path = section if key is None else f"{section}.{key}"
        raise SceneScriptError(message, field=path, line=_line_of(self.text, section, key))

    def number(self, section: str, raw: dict, key: str, default, *, lo=None, hi=None, kind=float):
        if key not in raw:
            return default
        value = raw[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(section, key, f"expected a number, got {value!r}")
        if kind is int and not isinstance(value, int):
            self.fail(section, key, f"expected an integer, got {value!r}")
        if lo is not None and value < lo:
            self.fail(section, key, f"must be at least {lo}, got {value}")
        if hi is not None and value > hi:
            self.fail(section, key, f"must be at most {hi}, got {value}")
        return kind(value)

    def triple(self, section: str, raw: dict, key: str, default, *, lo=None, hi=None):
        if key not in raw:
            return default
        value = raw[key]
        if not isinstance(value, list) or len(value) != 3:
            self.fail(section, key, f"expected a list of 3 numbers, got {value!r}")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(section, key, f"expected numbers, got {v!r}")
            if (lo is not None and v < lo) or (hi is not None and v > hi):
                self.fail(section, key, f"components must lie in [{lo}, {hi}], got {v}")
            out.append(float(v))
        return tuple(out)

    def choice(self, section: str, raw: dict, key: str, default: str, options) -> str:
        value = raw.get(key, default)
        if value not in options:
            self.fail(section, key, f"must be one of {list(options)}, got {value!r}")
        return value

    def unknown(self, section: str, raw: dict, allowed) -> None:
        extra = sorted(set(raw) - set(allowed))
        if extra:
            self.fail(section, extra[0], f"unknown key {extra[0]!r}")


def parse_scene(text: str, source: Path | None = None) -> SceneScript:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise SceneScriptError(str(exc), line=int(match.group(1)) if match else None) from exc

    check = _Checker(text)
    check.unknown("<root>", raw, ("scene", "background", *_SECTIONS))
    for section in ("scene", "object"):
        if not isinstance(raw.get(section), dict):
            raise SceneScriptError(f"missing [{section}] table", field=section)

    scene = raw["scene"]
    check.unknown("scene", scene, _SCENE_KEYS)
    if "frames" not in scene:
        check.fail("scene", None, "missing required key 'frames'")
    name = scene.get("name", source.stem if source else "scene")
    if not isinstance(name, str) or not name:
        check.fail("scene", "name", "expected a nonempty string")

    obj = raw["object"]
    check.unknown("object", obj, [f for f in ObjectSpec.__dataclass_fields__])
    if "shape" not in obj:
        check.fail("object", None, "missing required key 'shape'")
    defaults = ObjectSpec()
    object_spec = ObjectSpec(
        shape=check.choice("object", obj, "shape", defaults.shape, SHAPES),
        radius=check.number("object", obj, "radius", defaults.radius, lo=1e-3),
        half_extents=check.triple("object", obj, "half_extents", defaults.half_extents, lo=1e-3),
        length=check.number("object", obj, "length", defaults.length, lo=0.0),
        color=check.triple("object", obj, "color", defaults.color, lo=0.0, hi=1.0),
        texture=check.number("object", obj, "texture", defaults.texture, lo=0.0, hi=0.5),
    )
    if object_spec.extent > 1.5:
        check.fail("object", None, f"object extent {object_spec.extent:.3g} exceeds 1.5 units")

    sections = {k: raw.get(k, {}) for k in ("hand", "camera", "trajectory", "noise", "cloud")}
    for key, value in sections.items():
        if not isinstance(value, dict):
            check.fail(key, None, "expected a table")
        check.unknown(key, value, _SECTIONS[key].__dataclass_fields__)

    hand, cam, traj, noise, cloud = (sections[k] for k in sections)
    hd, cd, td, nd, kd = HandSpec(), CameraPath(), Trajectory(), NoiseModel(), CloudSpec()
    return SceneScript(
        name=name,
        frames=check.number("scene", scene, "frames", 8, lo=1, kind=int),
        object=object_spec,
        width=check.number("scene", scene, "width", 64, lo=8, kind=int),
        height=check.number("scene", scene, "height", 64, lo=8, kind=int),
        seed=check.number("scene", scene, "seed", 0, lo=0, kind=int),
        layout=check.choice("scene", scene, "layout", "standard", LAYOUTS),
        render_samples=check.number("scene", scene, "render_samples", 1024, lo=64, kind=int),
        hand=HandSpec(
            color=check.triple("hand", hand, "color", hd.color, lo=0.0, hi=1.0),
            texture=check.number("hand", hand, "texture", hd.texture, lo=0.0, hi=0.5),
            beta=check.number("hand", hand, "beta", hd.beta, lo=BETA_RANGE[0], hi=BETA_RANGE[1]),
            flex=check.number("hand", hand, "flex", hd.flex, lo=0.0, hi=1.5),
        ),
        camera=CameraPath(
            distance=check.number(
                "camera", cam, "distance", cd.distance, lo=BACKGROUND_RADIUS + 0.5
            ),
            focal=check.number("camera", cam, "focal", cd.focal, lo=1.0),
            orbit_degrees=check.number("camera", cam, "orbit_degrees", cd.orbit_degrees),
            azimuth_degrees=check.number("camera", cam, "azimuth_degrees", cd.azimuth_degrees),
        ),
        trajectory=Trajectory(
            swing_degrees=check.number(
                "trajectory", traj, "swing_degrees", td.swing_degrees, lo=0.0, hi=90.0
            ),
            drift=check.number("trajectory", traj, "drift", td.drift, lo=0.0, hi=0.5),
        ),
        noise=NoiseModel(
            rotation_degrees=check.number(
                "noise", noise, "rotation_degrees", nd.rotation_degrees, lo=0.0
            ),
            translation=check.number("noise", noise, "translation", nd.translation, lo=0.0),
            scale=check.number("noise", noise, "scale", nd.scale, lo=0.0, hi=0.5),
            keypoint_px=check.number("noise", noise, "keypoint_px", nd.keypoint_px, lo=0.0),
            cloud=check.number("noise", noise, "cloud", nd.cloud, lo=0.0),
        ),
        cloud=CloudSpec(
            points=check.number("cloud", cloud, "points", kd.points, lo=16, kind=int),
            scale=check.number("cloud", cloud, "scale", kd.scale, lo=1e-3),
        ),
        background=check.triple("<root>", raw, "background", (0.12, 0.12, 0.16), lo=0.0, hi=1.0),
        source=source,
    )


def load_scene(path: Path) -> SceneScript:
    path = Path(path)
    return parse_scene(path.read_text(), source=path)


# ---------------------------------------------------------------------------
# Grasp construction
# ---------------------------------------------------------------------------
def grasp_theta(sk: Skeleton, flex: float) -> torch.Tensor:
    """Every non-root bone curled by ``flex`` radians toward the palm side (-z)."""
    theta = torch.zeros(sk.n_bones, 3, dtype=torch.float64)
    theta[1:, 1] = flex
    return theta


def _bisect(fn, lo: float, hi: float, iterations: int = 60) -> float:
    """Root of ``fn`` on ``[lo, hi]`` given ``fn(lo) < 0 <= fn(hi)``."""
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if fn(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def place_object(tips: np.ndarray, shape, normal: np.ndarray) -> np.ndarray:
    """Object centre that puts its surface through the nearest fingertip.

    The centre slides from the tip midpoint along ``normal`` until the object
    just touches; when it cannot reach the tips from there it slides toward the
    first tip instead.
    """
    mid = tips.mean(axis=0)

    def gap(center: np.ndarray) -> float:
        d = shape.sdf(torch.as_tensor(tips - center, dtype=torch.float64))
        return float(d.min())

    if gap(mid) < 0.0:
        h = _bisect(lambda h: gap(mid + h * normal), 0.0, 4.0)
        return mid + h * normal
    s = _bisect(lambda s: -gap(mid + s * (tips[0] - mid)), 0.0, 1.0)
    return mid + s * (tips[0] - mid)


@dataclass(frozen=True, eq=False)
class Grasp:
    theta: torch.Tensor
    beta: torch.Tensor
    object_offset: np.ndarray
    center: np.ndarray


def build_grasp(sk: Skeleton, script: SceneScript) -> Grasp:
    theta = grasp_theta(sk, script.hand.flex)
    beta = torch.full((sk.n_bones,), script.hand.beta, dtype=torch.float64)
    state = HandState(theta, beta, ScaledRigid.identity())
    hand = posed_template(sk, state)
    tips = hand.vertices[list(sk.tip_vertex_ids)]
    shape = script.object.analytic()
    offset = place_object(tips, shape, np.array([0.0, 0.0, -1.0]))
    extent = script.object.extent
    lo = np.minimum(hand.vertices.min(axis=0), offset - extent)
    hi = np.maximum(hand.vertices.max(axis=0), offset + extent)
    return Grasp(theta, beta, offset, 0.5 * (lo + hi))


# ---------------------------------------------------------------------------
# Trajectories and noise
# ---------------------------------------------------------------------------
def _phase(f: int, frames: int) -> float:
    return f / (frames - 1) - 0.5 if frames > 1 else 0.0


def hand_roots(script: SceneScript, grasp: Grasp) -> list[ScaledRigid]:
    swing = script.trajectory.swing_degrees
    roots = []
    for f in range(script.frames):
        phase = _phase(f, script.frames)
        rotation = Rotation.from_euler("yx", [swing * phase, 0.5 * swing * phase], degrees=True)
        r = rotation.as_matrix()
        t = -r @ grasp.center + np.array([script.trajectory.drift * phase, 0.0, 0.0])
        roots.append(ScaledRigid(r, t))
    return roots


def cameras(script: SceneScript) -> list[Camera]:
    view, down = _VIEWS[script.layout]
    view = np.asarray(view) / np.linalg.norm(view)
    out = []
    for f in range(script.frames):
        angle = script.camera.azimuth_degrees + script.camera.orbit_degrees * _phase(
            f, script.frames
        )
        spin = Rotation.from_euler("z", angle, degrees=True).as_matrix()
        out.append(
            Camera.look_at(
                script.camera.distance * (spin @ view),
                [0.0, 0.0, 0.0],
                focal=script.camera.focal,
                width=script.width,
                height=script.height,
                up=down,
            )
        )
    return out


def _rotation_noise(rng: np.random.Generator, sigma_degrees: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(sigma_degrees) * rng.normal()
    return Rotation.from_rotvec(axis * angle).as_matrix()


def perturb(poses: PoseSet, noise: NoiseModel, rng: np.random.Generator) -> PoseSet:
    """Gaussian perturbation of roots and object poses; the object scale is global."""
    factor = 1.0 + noise.scale * rng.normal() if noise.scale > 0 else 1.0
    factor = max(factor, 0.2)
    hands, objects = [], []
    for hs, obj in zip(poses.hands, poses.objects, strict=True):
        pair = []
        for pose in (hs.root, obj):
            r, t = pose.rotation.numpy(), pose.translation.numpy()
            if noise.rotation_degrees > 0:
                r = _rotation_noise(rng, noise.rotation_degrees) @ r
            if noise.translation > 0:
                t = t + rng.normal(0.0, noise.translation, size=3)
            pair.append((r, t))
        (rh, th), (ro, to) = pair
        hands.append(HandState(hs.theta, hs.beta, ScaledRigid(rh, th)))
        objects.append(ScaledRigid(ro, to, float(obj.scale) * factor))
    return PoseSet(tuple(hands), tuple(objects))


def _quantize(values: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(values, dtype=dtype).astype(np.float64)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------
def ground_truth_model(script: SceneScript, skeleton: Skeleton) -> SceneModel:
    """Analytic hand and object fields the scripted scene is rendered from."""
    return SceneModel(
        skeleton=skeleton,
        hand_field=AnalyticField(
            Union(tuple(skeleton.capsules())), script.hand.color, script.hand.texture
        ),
        object_field=AnalyticField(
            script.object.analytic(), script.object.color, script.object.texture
        ),
        background=ConstantBackground(script.background, sigma=0.0, gradient=0.05),
        density=DensityParams(alpha2=GT_ALPHA2),
    )


def ground_truth_frame(script: SceneScript, gt: PoseSet, f: int) -> FrameState:
    """Frame ``f`` of ``gt`` with the object pose taken back out of the cloud frame."""
    from_cloud = ScaledRigid(np.eye(3), np.zeros(3), script.cloud.scale)
    return FrameState(gt.hands[f], gt.objects[f].compose(from_cloud))


def gen_scene(script: SceneScript, out_dir: Path | None = None) -> SceneDataset:
    """Render the scripted scene and return (and optionally write) its dataset."""
    rng = derive_rng(script.seed, "scene")
    sk = build_default_skeleton()
    grasp = build_grasp(sk, script)
    shape = script.object.analytic()
    k = script.cloud.scale

    # ground truth in the point-cloud frame: x_cloud = k * x_object
    roots = hand_roots(script, grasp)
    offset = ScaledRigid(np.eye(3), grasp.object_offset)
    to_cloud = ScaledRigid(np.eye(3), np.zeros(3), 1.0 / k)
    gt = PoseSet(
        tuple(HandState(grasp.theta, grasp.beta, root) for root in roots),
        tuple(root.compose(offset).compose(to_cloud) for root in roots),
    )

    bound = 1.25 * script.object.extent
    object_mesh = marching_cubes(shape.sdf, resolution=96, bounds=(-bound, bound))
    gt_object = TriMesh(_quantize(k * object_mesh.vertices, np.float32), object_mesh.faces)
    samples = object_mesh.sample(script.cloud.points, seed=int(rng.integers(0, 2**31)))
    cloud = k * samples
    if script.noise.cloud > 0:
        cloud = cloud + rng.normal(0.0, script.noise.cloud, size=cloud.shape)
    cloud = _quantize(cloud, np.float32)
    init = perturb(gt, script.noise, rng)

    cams = cameras(script)
    model = ground_truth_model(script, sk)
    images, labels, depths, joints_2d, cloud_2d = [], [], [], [], []
    w, h = script.width, script.height
    for f, cam in enumerate(cams):
        hand_state, obj_pose = gt.hands[f], gt.objects[f]
        frame = ground_truth_frame(script, gt, f)
        out = render_dense(model, frame, cam, samples=script.render_samples)
        images.append(np.round(np.clip(to_image(out.color, w, h), 0.0, 1.0) * 255.0) / 255.0)
        labels.append(to_image(out.classes, w, h).argmax(axis=-1).astype(np.uint8))
        depth = torch.where(out.mask_fg > 0.5, out.depth, torch.zeros_like(out.depth))
        depths.append(_quantize(to_image(depth, w, h), np.float32))

        with torch.no_grad():
            joints = project(cam, posed_joints(sk, hand_state)).numpy()
            if script.noise.keypoint_px > 0:
                joints = joints + rng.normal(0.0, script.noise.keypoint_px, size=joints.shape)
            joints_2d.append(joints)
            cloud_2d.append(project(cam, apply(obj_pose, cloud)).numpy())
        logger.info("rendered frame %d/%d", f + 1, script.frames)

    dataset = SceneDataset(
        name=script.name,
        skeleton=sk,
        cameras=tuple(cams),
        images=tuple(images),
        labels=tuple(labels),
        init=init,
        object_cloud=cloud,
        joints_2d=np.stack(joints_2d),
        cloud_2d=np.stack(cloud_2d),
        gt=gt,
        depths=tuple(depths),
        gt_object=gt_object,
        meta={"scene": script.name, "seed": script.seed, "layout": script.layout},
    )
    if out_dir is not None:
        write_dataset(dataset, out_dir)
    return dataset
