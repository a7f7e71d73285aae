"""Training loop for the pretrain and final stages.

Each step renders ``images_per_step`` random frames at ``rays_per_image`` random
pixels, evaluates the five training losses under the epoch schedule and applies
one Adam update. Every step is appended to ``train.log.ndjson``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import polars as pl
import torch

from holdfield.autodiff import (
    Optimizer,
    ParamSet,
    check_finite,
    derive_rng,
    derive_seed,
    flat_grad,
)
from holdfield.errors import EmptyLevelSet, NonFiniteLoss
from holdfield.fields import (
    CANONICAL_BOUND,
    LATENT_DIM,
    BackgroundField,
    FieldArchitecture,
    LatentTable,
    TrainableField,
    load_checkpoint,
    save_checkpoint,
)
from holdfield.geometry import (
    DTYPE,
    ScaledRigid,
    axis_angle_to_matrix,
    cast_rays,
    pixel_centers,
    sphere_intersect,
)
from holdfield.harness.config import BackgroundArchitecture, PipelineConfig
from holdfield.harness.dataset import PoseSet, SceneDataset, object_frame
from holdfield.losses import (
    IGNORE_LABEL,
    FarRaySets,
    LossBreakdown,
    SdfPrior,
    build_sdf_prior,
    eikonal_points,
    far_ray_sets,
    loss_eikonal,
    loss_rgb,
    loss_sdf,
    loss_segm,
    loss_sparse,
    total_loss,
)
from holdfield.meshmetrics import TriMesh, marching_cubes
from holdfield.rendering import (
    DensityParams,
    FrameState,
    RenderOutput,
    SceneModel,
    concat_outputs,
    render_rays,
)
from holdfield.skeleton import HandState, Skeleton, posed_template

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "final")
LOG_NAME = "train.log.ndjson"
FAR_MESH_RESOLUTION = 32


# ---------------------------------------------------------------------------
# Pose variables
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class PoseParams:
    """Per-frame poses as optimisation variables.

    Rotations are axis-angle deltas left-multiplied onto fixed base rotations.
    Object poses are kept in the point-cloud frame; ``frame`` maps the unit-ball
    canonical object space into that frame.
    """

    theta: torch.Tensor
    hand_rotation: torch.Tensor
    hand_translation: torch.Tensor
    object_rotation: torch.Tensor
    object_translation: torch.Tensor
    log_scale: torch.Tensor
    beta: torch.Tensor
    hand_base: torch.Tensor
    object_base: torch.Tensor
    frame: ScaledRigid

    @classmethod
    def from_poses(cls, poses: PoseSet, frame: ScaledRigid) -> PoseParams:
        n = len(poses)
        return cls(
            theta=torch.stack([h.theta for h in poses.hands]).detach().clone(),
            hand_rotation=torch.zeros(n, 3, dtype=DTYPE),
            hand_translation=torch.stack([h.root.translation for h in poses.hands]).detach(),
            object_rotation=torch.zeros(n, 3, dtype=DTYPE),
            object_translation=torch.stack([o.translation for o in poses.objects]).detach(),
            log_scale=torch.log(poses.objects[0].scale.detach()).reshape(1),
            beta=poses.hands[0].beta.detach().clone(),
            hand_base=torch.stack([h.root.rotation for h in poses.hands]).detach(),
            object_base=torch.stack([o.rotation for o in poses.objects]).detach(),
            frame=frame,
        )

    def __len__(self) -> int:
        return self.theta.shape[0]

    def register(self, params: ParamSet) -> None:
        for name in (
            "theta",
            "hand_rotation",
            "hand_translation",
            "object_rotation",
            "object_translation",
        ):
            params.add(f"pose.{name}", getattr(self, name), "pose")
        params.add("pose.log_scale", self.log_scale, "global")

    def hand_state(self, f: int) -> HandState:
        rotation = axis_angle_to_matrix(self.hand_rotation[f]) @ self.hand_base[f]
        return HandState(self.theta[f], self.beta, ScaledRigid(rotation, self.hand_translation[f]))

    def cloud_pose(self, f: int) -> ScaledRigid:
        rotation = axis_angle_to_matrix(self.object_rotation[f]) @ self.object_base[f]
        return ScaledRigid(rotation, self.object_translation[f], torch.exp(self.log_scale[0]))

    def object_pose(self, f: int) -> ScaledRigid:
        """Pose of the normalised canonical object."""
        return self.cloud_pose(f).compose(self.frame)

    def to_poses(self) -> PoseSet:
        with torch.no_grad():
            hands = tuple(self.hand_state(f).detach() for f in range(len(self)))
            objects = tuple(self.cloud_pose(f).detach() for f in range(len(self)))
        return PoseSet(hands, objects)

    def export(self) -> dict[str, torch.Tensor]:
        """Composed pose arrays for checkpoints."""
        poses = self.to_poses()
        return {
            "poses.theta": torch.stack([h.theta for h in poses.hands]),
            "poses.beta": self.beta.detach(),
            "poses.hand_rotation": torch.stack([h.root.rotation for h in poses.hands]),
            "poses.hand_translation": torch.stack([h.root.translation for h in poses.hands]),
            "poses.object_rotation": torch.stack([o.rotation for o in poses.objects]),
            "poses.object_translation": torch.stack([o.translation for o in poses.objects]),
            "poses.scale": poses.objects[0].scale.reshape(1),
        }


def poses_from_tensors(tensors: dict[str, torch.Tensor]) -> PoseSet:
    beta = tensors["poses.beta"].clamp(0.5, 2.0)
    scale = tensors["poses.scale"][0]
    n = tensors["poses.theta"].shape[0]
    hands = tuple(
        HandState(
            tensors["poses.theta"][f],
            beta,
            ScaledRigid(
                _orthonormal(tensors["poses.hand_rotation"][f]),
                tensors["poses.hand_translation"][f],
            ),
        )
        for f in range(n)
    )
    objects = tuple(
        ScaledRigid(
            _orthonormal(tensors["poses.object_rotation"][f]),
            tensors["poses.object_translation"][f],
            scale,
        )
        for f in range(n)
    )
    return PoseSet(hands, objects)


def _orthonormal(rotation: torch.Tensor) -> torch.Tensor:
    """Nearest rotation; checkpoints store float32."""
    u, _, vt = torch.linalg.svd(rotation)
    d = torch.sign(torch.linalg.det(u @ vt))
    return u @ torch.diag(torch.stack([torch.ones_like(d), torch.ones_like(d), d])) @ vt


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class TrainState:
    stage: str
    model: SceneModel
    poses: PoseParams
    object_latents: LatentTable
    background_latents: LatentTable
    params: ParamSet
    seed: int
    mask_hand: bool = False

    def frame(self, f: int) -> FrameState:
        hand = None if self.mask_hand else self.poses.hand_state(f)
        return FrameState(
            hand, self.poses.object_pose(f), self.object_latents(f), self.background_latents(f)
        )

    def meta(self, config: PipelineConfig, epoch: int) -> dict:
        return {
            "stage": self.stage,
            "epoch": epoch,
            "seed": self.seed,
            "n_frames": len(self.poses),
            "network": config.train.network.to_dict(),
            "background": asdict(config.train.background),
            "alpha2": config.train.alpha2,
            "mask_hand": self.mask_hand,
            "object_frame": self.poses.frame.to_dict(),
        }


def build_state(
    skeleton: Skeleton,
    poses: PoseSet,
    frame: ScaledRigid,
    config: PipelineConfig,
    stage: str,
) -> TrainState:
    """Fresh fields and latents seeded from ``(seed, stage)``; poses copied from ``poses``."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    tc = config.train
    seed = derive_seed(tc.seed, stage)
    n = len(poses)
    hand_field = None if config.mask_hand else TrainableField(tc.network, seed=seed)
    object_field = TrainableField(replace(tc.network, latent_dim=LATENT_DIM), seed=seed + 1)
    bg = tc.background
    background = BackgroundField(
        width=bg.width, hidden_layers=bg.hidden_layers, frequencies=bg.frequencies, seed=seed + 2
    )
    density = DensityParams(alpha2=tc.alpha2)
    object_latents, background_latents = LatentTable(n), LatentTable(n)

    params = ParamSet()
    if hand_field is not None:
        params.add_module("hand_field", hand_field, "field")
    params.add_module("object_field", object_field, "field")
    params.add_module("background", background, "field")
    params.add_module("object_latents", object_latents, "latent")
    params.add_module("background_latents", background_latents, "latent")
    params.add_module("density", density, "density")

    pose_params = PoseParams.from_poses(poses, frame)
    optimize = tc.optimize_poses_pretrain if stage == "pretrain" else tc.optimize_poses_final
    if optimize:
        pose_params.register(params)

    model = SceneModel(skeleton, hand_field, object_field, background, density)
    return TrainState(
        stage,
        model,
        pose_params,
        object_latents,
        background_latents,
        params,
        seed,
        config.mask_hand,
    )


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out = {n: state.params[n].detach() for n in state.params if not n.startswith("pose.")}
    out.update(state.poses.export())
    return out


def save_state(
    path: Path,
    state: TrainState,
    config: PipelineConfig,
    epoch: int,
    opt: Optimizer | None = None,
) -> Path:
    tensors = state_tensors(state)
    if opt is not None:
        tensors.update(opt.state_tensors())
    return save_checkpoint(path, tensors, state.meta(config, epoch))


def restore_state(path: Path, skeleton: Skeleton, config: PipelineConfig) -> TrainState:
    """Rebuild a :class:`TrainState` from a checkpoint written by :func:`save_state`."""
    tensors, meta = load_checkpoint(path)
    train = replace(
        config.train,
        network=FieldArchitecture.from_dict(meta["network"]),
        background=BackgroundArchitecture(**meta["background"]),
        alpha2=float(meta["alpha2"]),
        optimize_poses_pretrain=False,
        optimize_poses_final=False,
    )
    config = replace(config, train=train, mask_hand=bool(meta["mask_hand"]))
    poses = poses_from_tensors(tensors)
    frame = ScaledRigid.from_dict(meta["object_frame"])
    state = build_state(skeleton, poses, frame, config, meta["stage"])
    missing = [name for name in state.params if name not in tensors]
    if missing:
        raise ValueError(f"{path} is missing parameters: {missing[:5]}")
    with torch.no_grad():
        for name in state.params:
            state.params[name].copy_(tensors[name].reshape(state.params[name].shape))
    state.seed = int(meta["seed"])
    return state


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------
@dataclass
class StepBatch:
    output: RenderOutput
    target: torch.Tensor
    labels: torch.Tensor
    far_hand: torch.Tensor
    far_object: torch.Tensor


def _far_meshes(state: TrainState, f: int, object_mesh: TriMesh | None):
    with torch.no_grad():
        hand_mesh = None
        if not state.mask_hand:
            hand_mesh = posed_template(state.model.skeleton, state.poses.hand_state(f).detach())
        posed_object = None
        if object_mesh is not None:
            posed_object = object_mesh.transformed(state.poses.object_pose(f).detach())
    return hand_mesh, posed_object


def sample_batch(
    state: TrainState,
    dataset: SceneDataset,
    config: PipelineConfig,
    rng: np.random.Generator,
    object_mesh: TriMesh | None,
) -> StepBatch:
    tc = config.train
    n = dataset.n_frames
    frames = rng.choice(n, size=tc.images_per_step, replace=n < tc.images_per_step)
    n_pixels = dataset.width * dataset.height
    centers = pixel_centers(dataset.width, dataset.height)
    outputs, targets, labels, far_hand, far_object = [], [], [], [], []
    for f in frames:
        f = int(f)
        index = rng.choice(n_pixels, size=tc.rays_per_image, replace=n_pixels < tc.rays_per_image)
        camera = dataset.cameras[f]
        bundle = cast_rays(camera, centers[torch.as_tensor(index)])
        outputs.append(render_rays(state.model, state.frame(f), bundle, config.render))

        rows, cols = index // dataset.width, index % dataset.width
        targets.append(torch.as_tensor(dataset.images[f][rows, cols], dtype=DTYPE))
        labels.append(torch.as_tensor(dataset.labels[f][rows, cols].astype(np.int64)))

        t_enter, t_exit, hit = sphere_intersect(
            bundle.origins, bundle.directions, config.render.radius
        )
        near = torch.where(hit, t_enter, torch.zeros_like(t_enter))
        far = torch.where(hit, t_exit, torch.zeros_like(t_exit))
        hand_mesh, posed_object = _far_meshes(state, f, object_mesh)
        sets = far_ray_sets(bundle, near, far, hand_mesh, posed_object)
        far_hand.append(sets.hand)
        far_object.append(sets.object)
    return StepBatch(
        concat_outputs(outputs),
        torch.cat(targets),
        torch.cat(labels),
        torch.cat(far_hand),
        torch.cat(far_object),
    )


def compute_losses(
    state: TrainState,
    batch: StepBatch,
    config: PipelineConfig,
    weights: dict[str, float],
    rng: np.random.Generator,
    prior: SdfPrior | None,
) -> LossBreakdown:
    terms = {
        "rgb": loss_rgb(batch.output.color, batch.target, batch.labels != IGNORE_LABEL),
        "segm": loss_segm(batch.output.classes, batch.labels),
    }
    sparse, empty = loss_sparse(batch.output, FarRaySets(batch.far_hand, batch.far_object))
    terms["sparse"] = sparse

    tc = config.train
    pairs = [(state.model.object_field, eikonal_points(tc.eikonal_points, rng))]
    hand_field = state.model.hand_field
    if hand_field is not None and prior is not None:
        points, target = prior.batch(tc.sdf_batch, rng)
        terms["sdf"] = loss_sdf(hand_field, state.model.skeleton, points, target)
        pairs.append((hand_field, eikonal_points(tc.eikonal_points, rng)))
    terms["eikonal"] = loss_eikonal(pairs)
    breakdown = total_loss(terms, weights, empty)
    breakdown.diagnostics["dropped"] = float(batch.output.dropped)
    breakdown.diagnostics["alpha2"] = float(state.model.density.alpha2.detach())
    return breakdown


def _object_mesh(state: TrainState) -> TriMesh | None:
    field = state.model.object_field
    try:
        return marching_cubes(
            field.sdf, FAR_MESH_RESOLUTION, (-CANONICAL_BOUND, CANONICAL_BOUND)
        )
    except EmptyLevelSet:
        logger.info("object field has no surface yet; object far set left empty")
        return None


# ---------------------------------------------------------------------------
# Stage driver
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    stage: str
    checkpoint: Path
    poses: PoseSet
    state: TrainState
    log: Path
    summary: pl.DataFrame = field(default_factory=pl.DataFrame)


def summarize_log(log: Path, stage: str) -> pl.DataFrame:
    """Per-epoch means of every loss term for ``stage``."""
    frame = pl.read_ndjson(log).filter(pl.col("stage") == stage)
    terms = [c for c in frame.columns if c.startswith("loss_") or c == "total"]
    return frame.group_by("epoch").agg([pl.col(c).mean() for c in terms]).sort("epoch")


def train(
    dataset: SceneDataset,
    config: PipelineConfig,
    stage: str,
    run_dir: Path,
    poses: PoseSet | None = None,
) -> TrainResult:
    """Train one stage from scratch and write its checkpoints and log lines.

    ``poses`` defaults to the dataset's initial poses for pretraining and to its
    refined poses for the final stage.
    """
    if poses is None:
        if stage == "final":
            if dataset.refined is None:
                raise ValueError("final stage needs refined poses; run refine first")
            poses = dataset.refined
        else:
            poses = dataset.init
    if config.mask_hand:
        dataset = dataset.with_hand_masked()

    run_dir = Path(run_dir)
    checkpoints = run_dir / "checkpoints"
    checkpoints.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / LOG_NAME

    tc = config.train
    frame = object_frame(dataset.object_cloud)
    state = build_state(dataset.skeleton, poses, frame, config, stage)
    optimizer = Optimizer(state.params, tc.learning_rates, tc.clip_norm)
    prior = None
    if state.model.hand_field is not None:
        prior = build_sdf_prior(dataset.skeleton, tc.sdf_prior_points, derive_seed(tc.seed, stage))
    epochs = tc.epochs(stage)
    logger.info("%s: %d epochs, %d parameters", stage, epochs, state.params.numel)

    object_mesh = None
    step = 0
    with open(log_path, "a") as log:
        for epoch in range(epochs):
            if epoch % tc.mesh_every == 0:
                object_mesh = _object_mesh(state)
            weights = config.schedule.at(epoch, epochs)
            for _ in range(tc.steps_per_epoch):
                rng = derive_rng(tc.seed, stage, step)
                batch = sample_batch(state, dataset, config, rng, object_mesh)
                breakdown = compute_losses(state, batch, config, weights, rng, prior)
                try:
                    check_finite(breakdown.total, step)
                except NonFiniteLoss:
                    save_state(checkpoints / f"{stage}_failed.bin", state, config, epoch)
                    raise
                grad_norm = optimizer.step(flat_grad(breakdown.total, state.params))
                record = {"stage": stage, "epoch": epoch, "step": step, "grad_norm": grad_norm}
                record.update(breakdown.to_record())
                log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            if (epoch + 1) % tc.checkpoint_every == 0:
                save_state(checkpoints / f"{stage}_epoch{epoch + 1:04d}.bin", state, config, epoch)

    checkpoint = save_state(checkpoints / f"{stage}.bin", state, config, epochs - 1, optimizer)
    summary = summarize_log(log_path, stage)
    return TrainResult(stage, checkpoint, state.poses.to_poses(), state, log_path, summary)


def print_summary(result: TrainResult, rows: int = 5) -> None:
    print(f"\n{'=' * 60}")
    print(f"{result.stage.capitalize()} complete: {result.checkpoint}")
    print(f"{'=' * 60}")
    with pl.Config(tbl_rows=rows * 2, float_precision=5):
        table = result.summary
        if len(table) > 2 * rows:
            table = pl.concat([table.head(rows), table.tail(rows)])
        print(table)
