"""Stage orchestration: align, pretrain, refine, final training, meshes, metrics.

Every stage persists its outputs under the run directory before the next one
starts::

    run.json  poses/{init,aligned,pretrain,refined,final}.json
    checkpoints/  meshes/  renders/  metrics.json
    train.log.ndjson  refine.log.ndjson
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from holdfield.errors import StageFailed
from holdfield.fields import CANONICAL_BOUND
from holdfield.geometry import ScaledRigid, inverse_apply
from holdfield.harness.config import PipelineConfig
from holdfield.harness.dataset import (
    PoseSet,
    SceneDataset,
    object_frame,
    write_refined,
)
from holdfield.harness.train import (
    TrainResult,
    TrainState,
    print_summary,
    restore_state,
    train,
)
from holdfield.meshmetrics import (
    MetricReport,
    TriMesh,
    build_report,
    cd_h,
    marching_cubes,
    mpjpe,
    object_metrics,
    write_obj,
)
from holdfield.refine import (
    ContactSpec,
    RefineProblem,
    RefineResult,
    RefineSettings,
    align_init,
    refine_poses,
)
from holdfield.rendering import RenderSettings, render_image, write_render
from holdfield.skeleton import forward_lbs, posed_joints, skin_weights

logger = logging.getLogger(__name__)

REFINE_LOG = "refine.log.ndjson"


@contextmanager
def stage(name: str, step: str = "") -> Iterator[None]:
    """Print a stage banner; any failure inside is re-raised as :class:`StageFailed`."""
    print(f"\n{'=' * 60}")
    print(f"{step} {name}".strip())
    print(f"{'=' * 60}")
    try:
        yield
    except StageFailed:
        raise
    except Exception as exc:
        raise StageFailed(name, exc) from exc


def write_poses(path: Path, poses: PoseSet) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(poses.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Refinement problems
# ---------------------------------------------------------------------------
def build_problem(
    dataset: SceneDataset,
    poses: PoseSet,
    frame: ScaledRigid,
    object_mesh: TriMesh | None = None,
) -> RefineProblem:
    """Refinement problem in the normalised canonical object frame."""
    normalised = poses.with_object_frame(frame)
    with torch.no_grad():
        cloud = inverse_apply(frame, dataset.object_cloud)
    return RefineProblem(
        skeleton=dataset.skeleton,
        cameras=dataset.cameras,
        theta=torch.stack([h.theta for h in poses.hands]),
        hand_rotations=torch.stack([h.root.rotation for h in poses.hands]),
        hand_translations=torch.stack([h.root.translation for h in poses.hands]),
        object_rotations=torch.stack([o.rotation for o in normalised.objects]),
        object_translations=torch.stack([o.translation for o in normalised.objects]),
        beta=poses.hands[0].beta,
        scale=float(normalised.objects[0].scale),
        object_cloud=cloud,
        contact=ContactSpec.for_skeleton(dataset.skeleton),
        joints_2d=torch.as_tensor(dataset.joints_2d),
        cloud_2d=torch.as_tensor(dataset.cloud_2d),
        labels=dataset.labels,
        object_mesh=object_mesh,
    )


def poses_from_problem(problem: RefineProblem, frame: ScaledRigid) -> PoseSet:
    back = frame.inverse()
    hands = tuple(problem.hand_state(f).detach() for f in range(problem.n_frames))
    objects = tuple(
        problem.object_pose(f).compose(back).detach() for f in range(problem.n_frames)
    )
    return PoseSet(hands, objects)


class _IterationLog:
    """Appends refinement iterations to an NDJSON file."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(path, "a")

    def __call__(self, record: dict) -> None:
        self._file.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._file.close()


def run_align(
    dataset: SceneDataset, config: PipelineConfig, run_dir: Path
) -> tuple[PoseSet, RefineResult]:
    frame = object_frame(dataset.object_cloud)
    problem = build_problem(dataset, dataset.init, frame)
    settings = replace(config.refine, lr=config.align.lr, max_iters=config.align.max_iters)
    log = _IterationLog(run_dir / REFINE_LOG)
    try:
        result = align_init(problem, settings, on_iteration=log)
    finally:
        log.close()
    return poses_from_problem(result.problem, frame), result


def extract_object_mesh(state: TrainState, resolution: int) -> TriMesh:
    """Zero level set of the object field in normalised canonical space."""
    field_fn = state.model.object_field.sdf
    return marching_cubes(field_fn, resolution, (-CANONICAL_BOUND, CANONICAL_BOUND))


def extract_hand_mesh(state: TrainState, resolution: int) -> TriMesh:
    """Canonical hand surface; the template when the hand model is disabled."""
    if state.model.hand_field is None:
        return state.model.skeleton.template
    field_fn = state.model.hand_field.sdf
    return marching_cubes(field_fn, resolution, (-CANONICAL_BOUND, CANONICAL_BOUND))


def run_refine(
    dataset: SceneDataset,
    state: TrainState,
    config: PipelineConfig,
    run_dir: Path,
) -> tuple[PoseSet, RefineResult]:
    """Refine the poses held by a pretrained ``state`` against its object mesh."""
    frame = state.poses.frame
    mesh = extract_object_mesh(state, config.eval.refine_resolution)
    write_obj(Path(run_dir) / "meshes" / "object_pretrain.obj", mesh)
    if config.mask_hand:
        dataset = dataset.with_hand_masked()
    problem = build_problem(dataset, state.poses.to_poses(), frame, object_mesh=mesh)
    settings: RefineSettings = config.refine
    if config.mask_hand:
        settings = replace(settings, hand_silhouette=False)
    log = _IterationLog(Path(run_dir) / REFINE_LOG)
    try:
        result = refine_poses(problem, settings, on_iteration=log)
    finally:
        log.close()
    refined = poses_from_problem(result.problem, frame)
    if dataset.root is not None:
        write_refined(dataset.root, refined, result.provenance)
    return refined, result


# ---------------------------------------------------------------------------
# Meshes and metrics
# ---------------------------------------------------------------------------
@dataclass
class MeshSet:
    """Canonical meshes (object normalised) and per-frame posed meshes in world space."""

    object_canonical: TriMesh
    hand_canonical: TriMesh
    hands: list[TriMesh] = field(default_factory=list)
    objects: list[TriMesh] = field(default_factory=list)


def extract_meshes(
    state: TrainState, poses: PoseSet, resolution: int, out_dir: Path | None = None
) -> MeshSet:
    sk = state.model.skeleton
    frame = state.poses.frame
    obj = extract_object_mesh(state, resolution)
    hand = extract_hand_mesh(state, resolution)
    meshes = MeshSet(obj, hand)
    with torch.no_grad():
        canonical = torch.as_tensor(hand.vertices)
        weights = skin_weights(sk, canonical)
        for hs, pose in zip(poses.hands, poses.objects, strict=True):
            posed = forward_lbs(sk, hs, canonical, weights).numpy()
            meshes.hands.append(TriMesh(posed, hand.faces))
            meshes.objects.append(obj.transformed(pose.compose(frame)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_obj(out_dir / "object_canonical.obj", obj.transformed(frame))
        write_obj(out_dir / "hand_canonical.obj", hand)
        for f, (h, o) in enumerate(zip(meshes.hands, meshes.objects, strict=True)):
            write_obj(out_dir / f"frame_{f:03d}_hand.obj", h)
            write_obj(out_dir / f"frame_{f:03d}_object.obj", o)
    return meshes


def evaluate_run(
    dataset: SceneDataset,
    meshes: MeshSet,
    poses: PoseSet,
    frame: ScaledRigid,
    config: PipelineConfig,
) -> MetricReport:
    """Object shape scores against the GT surface plus per-frame MPJPE and CD_h."""
    if dataset.gt_object is None or dataset.gt is None:
        raise ValueError(f"dataset {dataset.name!r} has no ground truth to evaluate against")
    ev = config.eval
    seed = config.train.seed
    scores = object_metrics(
        meshes.object_canonical.transformed(frame),
        dataset.gt_object,
        align=ev.align,
        samples=ev.samples,
        seed=seed,
    )

    sk = dataset.skeleton
    rows = []
    with torch.no_grad():
        gt_objects = [dataset.gt_object.transformed(o) for o in dataset.gt.objects]
        pred_joints = [posed_joints(sk, h).numpy() for h in poses.hands]
        gt_joints = [posed_joints(sk, h).numpy() for h in dataset.gt.hands]
    per_frame_cd_h = cd_h(
        meshes.objects,
        gt_objects,
        [j[0] for j in pred_joints],
        [j[0] for j in gt_joints],
        samples=ev.samples,
        seed=seed,
    )
    for f in range(dataset.n_frames):
        rows.append(
            {"frame": f, "mpjpe": mpjpe(pred_joints[f], gt_joints[f]), "cd_h": per_frame_cd_h[f]}
        )
    return build_report(scores, rows)


def render_frame(
    state: TrainState,
    dataset: SceneDataset,
    f: int,
    out_dir: Path,
    settings: RenderSettings,
) -> list[Path]:
    with torch.no_grad():
        out = render_image(state.model, state.frame(f), dataset.cameras[f], settings)
    return write_render(out_dir, out, dataset.width, dataset.height)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------
@dataclass
class PipelineResult:
    run_dir: Path
    poses: dict[str, PoseSet]
    checkpoints: dict[str, Path]
    align: RefineResult
    refine: RefineResult | None
    report: MetricReport | None
    elapsed: float = 0.0


def _describe(result: RefineResult) -> str:
    initial = result.initial_terms.get("energy_total", float("nan"))
    return (
        f"{result.stage}: energy {initial:.5g} -> {result.energy:.5g} "
        f"in {result.iterations} iterations (converged={result.converged})"
    )


def pipeline(dataset: SceneDataset, config: PipelineConfig, run_dir: Path) -> PipelineResult:
    """align_init, pretrain, object mesh, refine_poses, final training, meshes, metrics."""
    t0 = time.time()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.json").write_text(
        json.dumps(
            {
                "dataset": str(dataset.root) if dataset.root else dataset.name,
                "seed": config.train.seed,
                "skip_refine": config.skip_refine,
                "mask_hand": config.mask_hand,
                "amodal": config.render.amodal,
                "epochs_pretrain": config.train.epochs_pretrain,
                "epochs_final": config.train.epochs_final,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    for log in (run_dir / "train.log.ndjson", run_dir / REFINE_LOG):
        log.unlink(missing_ok=True)

    poses: dict[str, PoseSet] = {"init": dataset.init}
    checkpoints: dict[str, Path] = {}
    write_poses(run_dir / "poses" / "init.json", dataset.init)

    with stage("Align", "[1/7]"):
        poses["aligned"], aligned = run_align(dataset, config, run_dir)
        write_poses(run_dir / "poses" / "aligned.json", poses["aligned"])
        print(_describe(aligned))

    with stage("Pretrain", "[2/7]"):
        pretrain: TrainResult = train(dataset, config, "pretrain", run_dir, poses["aligned"])
        checkpoints["pretrain"] = pretrain.checkpoint
        poses["pretrain"] = pretrain.poses
        write_poses(run_dir / "poses" / "pretrain.json", pretrain.poses)
    print_summary(pretrain)

    refined_result = None
    if config.skip_refine:
        print("\nRefine poses skipped; pretrain poses go straight to the final stage")
        poses["refined"] = poses["pretrain"]
    else:
        with stage("Refine poses", "[3/7]"):
            poses["refined"], refined_result = run_refine(
                dataset, pretrain.state, config, run_dir
            )
            write_poses(run_dir / "poses" / "refined.json", poses["refined"])
            print(_describe(refined_result))

    with stage("Final training", "[4/7]"):
        final = train(dataset, config, "final", run_dir, poses["refined"])
        checkpoints["final"] = final.checkpoint
        poses["final"] = final.poses
        write_poses(run_dir / "poses" / "final.json", final.poses)
    print_summary(final)

    with stage("Meshes", "[5/7]"):
        meshes = extract_meshes(
            final.state, final.poses, config.eval.mesh_resolution, run_dir / "meshes"
        )
        print(f"{len(meshes.hands)} frames written to {run_dir / 'meshes'}")

    with stage("Render", "[6/7]"):
        renders = run_dir / "renders" / "frame_000"
        written = render_frame(final.state, dataset, 0, renders, config.render)
        print(f"{len(written)} render channels written")

    report = None
    if dataset.gt is not None and dataset.gt_object is not None:
        with stage("Metrics", "[7/7]"):
            report = evaluate_run(dataset, meshes, final.poses, final.state.poses.frame, config)
            report.write(run_dir / "metrics.json")
            print(
                f"CD {report.cd:.4f} cm^2  F5 {report.f5:.1f}  F10 {report.f10:.1f}  "
                f"MPJPE {report.mpjpe:.2f} mm  CD_h {report.cd_h:.4f} cm^2"
            )
    else:
        print("\nNo ground truth in the dataset; metrics skipped")

    elapsed = time.time() - t0
    print(f"\n{'=' * 60}")
    print(f"Pipeline complete in {elapsed:.0f}s: {run_dir}")
    print(f"{'=' * 60}")
    return PipelineResult(run_dir, poses, checkpoints, aligned, refined_result, report, elapsed)


def refine_from_checkpoint(
    dataset: SceneDataset, checkpoint: Path, config: PipelineConfig, run_dir: Path
) -> RefineResult:
    """The ``refine`` subcommand: pretrain checkpoint in, refined poses into the manifest."""
    state = restore_state(checkpoint, dataset.skeleton, config)
    config = replace(config, mask_hand=state.mask_hand)
    refined, result = run_refine(dataset, state, config, run_dir)
    write_poses(Path(run_dir) / "poses" / "refined.json", refined)
    return result

