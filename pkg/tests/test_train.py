import json
from dataclasses import replace

import pytest
import torch

from holdfield.fields import FieldArchitecture
from holdfield.geometry import DTYPE
from holdfield.harness.config import (
    BackgroundArchitecture,
    EvalConfig,
    PipelineConfig,
    TrainConfig,
    with_overrides,
)
from holdfield.harness.dataset import object_frame
from holdfield.harness.scene import NoiseModel, gen_scene, parse_scene
from holdfield.harness.train import (
    LOG_NAME,
    build_state,
    poses_from_tensors,
    restore_state,
    train,
)
from holdfield.rendering import RenderSettings

SCENE = """\
[scene]
name = "tiny"
frames = 2
width = 8
height = 8
render_samples = 64

[object]
shape = "sphere"
radius = 0.4

[cloud]
points = 64
"""


def tiny_config(**train_overrides) -> PipelineConfig:
    train_config = TrainConfig(
        seed=0,
        epochs_final=2,
        epochs_pretrain=1,
        images_per_step=1,
        rays_per_image=8,
        checkpoint_every=1,
        sdf_prior_points=64,
        sdf_batch=16,
        eikonal_points=8,
        network=FieldArchitecture(hidden_layers=1, width=8, frequencies=1),
        background=BackgroundArchitecture(hidden_layers=1, width=8, frequencies=1),
    )
    return PipelineConfig(
        train=replace(train_config, **train_overrides),
        render=RenderSettings(samples=8, background_samples=2, rounds=1),
        eval=EvalConfig(mesh_resolution=16, refine_resolution=16, samples=500),
    )


@pytest.fixture(scope="module")
def dataset():
    script = parse_scene(SCENE)
    return gen_scene(replace(script, noise=NoiseModel(2.0, 0.05, 0.0, 0.5, 0.0)))


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.mark.slow
def test_pretrain_writes_checkpoints_and_log(dataset, tmp_path):
    result = train(dataset, tiny_config(), "pretrain", tmp_path)
    assert result.checkpoint == tmp_path / "checkpoints" / "pretrain.bin"
    assert (tmp_path / "checkpoints" / "pretrain_epoch0001.bin").exists()
    records = read_log(tmp_path / LOG_NAME)
    assert len(records) == 1
    assert records[0]["stage"] == "pretrain"
    for key in ("total", "loss_rgb", "loss_segm", "loss_sparse", "loss_eikonal", "grad_norm"):
        assert key in records[0]
    assert result.summary["epoch"].to_list() == [0]
    assert len(result.poses) == dataset.n_frames


@pytest.mark.slow
def test_training_is_deterministic(dataset, tmp_path):
    train(dataset, tiny_config(steps_per_epoch=2), "pretrain", tmp_path / "a")
    train(dataset, tiny_config(steps_per_epoch=2), "pretrain", tmp_path / "b")
    a = [r["total"] for r in read_log(tmp_path / "a" / LOG_NAME)]
    b = [r["total"] for r in read_log(tmp_path / "b" / LOG_NAME)]
    assert a == b


@pytest.mark.slow
def test_checkpoint_restores_fields_and_poses(dataset, tmp_path):
    config = tiny_config()
    result = train(dataset, config, "pretrain", tmp_path)
    restored = restore_state(result.checkpoint, dataset.skeleton, config)
    assert restored.stage == "pretrain"
    assert set(restored.params) <= set(result.state.params)
    for name in restored.params:
        saved = result.state.params[name].detach()
        assert torch.allclose(restored.params[name], saved, atol=1e-6, rtol=1e-5)
    for a, b in zip(restored.poses.to_poses().objects, result.poses.objects):
        assert torch.allclose(a.translation, b.translation, atol=1e-5)
        assert torch.allclose(a.rotation, b.rotation, atol=1e-5)


def test_final_stage_needs_refined_poses(dataset, tmp_path):
    with pytest.raises(ValueError, match="run refine first"):
        train(dataset, tiny_config(), "final", tmp_path)


def test_mask_hand_drops_hand_field(dataset):
    config = with_overrides(tiny_config(), mask_hand=True)
    frame = object_frame(dataset.object_cloud)
    state = build_state(dataset.skeleton, dataset.init, frame, config, "pretrain")
    assert state.model.hand_field is None
    assert not any(name.startswith("hand_field.") for name in state.params)
    assert state.frame(0).hand is None
    with pytest.raises(ValueError, match="stage"):
        build_state(dataset.skeleton, dataset.init, frame, config, "warmup")


def test_pose_parameters_follow_stage_flags(dataset):
    frame = object_frame(dataset.object_cloud)
    config = tiny_config()
    pretrain = build_state(dataset.skeleton, dataset.init, frame, config, "pretrain")
    final = build_state(dataset.skeleton, dataset.init, frame, config, "final")
    assert "pose.theta" in pretrain.params and "pose.log_scale" in pretrain.params
    assert not any(name.startswith("pose.") for name in final.params)
    assert pretrain.seed != final.seed


def test_restored_rotations_are_orthonormal():
    n = 2
    rotation = torch.eye(3, dtype=DTYPE).expand(n, 3, 3) * 1.001
    tensors = {
        "poses.theta": torch.zeros(n, 5, 3, dtype=DTYPE),
        "poses.beta": torch.full((5,), 3.0, dtype=DTYPE),
        "poses.hand_rotation": rotation,
        "poses.hand_translation": torch.zeros(n, 3, dtype=DTYPE),
        "poses.object_rotation": rotation,
        "poses.object_translation": torch.ones(n, 3, dtype=DTYPE),
        "poses.scale": torch.tensor([0.5], dtype=DTYPE),
    }
    poses = poses_from_tensors(tensors)
    assert torch.allclose(poses.hands[1].root.rotation, torch.eye(3, dtype=DTYPE))
    assert float(poses.hands[0].beta.max()) == 2.0
    assert float(poses.objects[0].scale) == 0.5
