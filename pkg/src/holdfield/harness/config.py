"""Load and validate the training YAML config."""

from __future__ import annotations

import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from holdfield.autodiff import DEFAULT_LEARNING_RATES
from holdfield.fields import FieldArchitecture
from holdfield.losses import LossWeights
from holdfield.refine import RefineSettings
from holdfield.rendering import RenderSettings

ROOT = Path(__file__).resolve().parents[3]
PYPROJECT = ROOT / "pyproject.toml"


@dataclass(frozen=True)
class BackgroundArchitecture:
    hidden_layers: int = 2
    width: int = 32
    frequencies: int = 4


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs_final: int = 100
    epochs_pretrain: int = 50
    steps_per_epoch: int = 1
    images_per_step: int = 10
    rays_per_image: int = 256
    checkpoint_every: int = 10
    clip_norm: float = 1.0
    alpha2: float = 0.1
    sdf_prior_points: int = 20_000
    sdf_batch: int = 1024
    eikonal_points: int = 512
    mesh_every: int = 10
    optimize_poses_pretrain: bool = True
    optimize_poses_final: bool = False
    learning_rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    network: FieldArchitecture = FieldArchitecture()
    background: BackgroundArchitecture = BackgroundArchitecture()

    def __post_init__(self) -> None:
        counts = {
            "epochs_final": self.epochs_final,
            "epochs_pretrain": self.epochs_pretrain,
            "steps_per_epoch": self.steps_per_epoch,
            "images_per_step": self.images_per_step,
            "rays_per_image": self.rays_per_image,
            "checkpoint_every": self.checkpoint_every,
            "sdf_batch": self.sdf_batch,
            "eikonal_points": self.eikonal_points,
            "mesh_every": self.mesh_every,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"train.{name} must be positive, got {value}")
        if self.epochs_pretrain > self.epochs_final:
            raise ValueError(
                f"train.epochs_pretrain ({self.epochs_pretrain}) exceeds "
                f"train.epochs_final ({self.epochs_final})"
            )
        if self.sdf_batch > self.sdf_prior_points:
            raise ValueError("train.sdf_batch exceeds train.sdf_prior_points")
        unknown = set(self.learning_rates) - set(DEFAULT_LEARNING_RATES)
        if unknown:
            raise ValueError(f"unknown learning-rate groups: {sorted(unknown)}")

    def epochs(self, stage: str) -> int:
        return self.epochs_pretrain if stage == "pretrain" else self.epochs_final


@dataclass(frozen=True)
class AlignConfig:
    lr: float = 2e-2
    max_iters: int = 200


@dataclass(frozen=True)
class EvalConfig:
    mesh_resolution: int = 128
    refine_resolution: int = 40
    samples: int = 30_000
    align: bool = True

    def __post_init__(self) -> None:
        if self.mesh_resolution < 8 or self.refine_resolution < 8:
            raise ValueError("mesh resolutions must be at least 8")


@dataclass(frozen=True)
class PipelineConfig:
    train: TrainConfig = TrainConfig()
    schedule: LossWeights = LossWeights()
    render: RenderSettings = RenderSettings()
    align: AlignConfig = AlignConfig()
    refine: RefineSettings = RefineSettings()
    eval: EvalConfig = EvalConfig()
    skip_refine: bool = False
    mask_hand: bool = False


def _pick(cls, raw: dict | None, section: str) -> dict:
    """Keys of ``raw`` that ``cls`` accepts; unknown keys are an error."""
    raw = dict(raw or {})
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown key(s) in {section}: {sorted(unknown)}")
    return raw


def _train_from_dict(raw: dict) -> TrainConfig:
    raw = _pick(TrainConfig, raw, "train")
    if "network" in raw:
        raw["network"] = FieldArchitecture(
            **_pick(FieldArchitecture, raw["network"], "train.network")
        )
    if "background" in raw:
        raw["background"] = BackgroundArchitecture(
            **_pick(BackgroundArchitecture, raw["background"], "train.background")
        )
    if "learning_rates" in raw:
        raw["learning_rates"] = {
            **DEFAULT_LEARNING_RATES,
            **{str(k): float(v) for k, v in raw["learning_rates"].items()},
        }
    if "epochs_final" in raw and "epochs_pretrain" not in raw:
        raw["epochs_pretrain"] = max(1, int(raw["epochs_final"]) // 2)
    return TrainConfig(**raw)


def load_config(path: Path) -> PipelineConfig:
    """Read ``train.yaml``; ``train.seed`` and ``train.epochs_final`` are required."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}

    try:
        train = dict(raw["train"])
        train["seed"] = int(train["seed"])
        train["epochs_final"] = int(train["epochs_final"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path.name} missing required key: {exc}") from exc

    try:
        return PipelineConfig(
            train=_train_from_dict(train),
            schedule=LossWeights.from_dict(raw.get("schedule") or {}),
            render=RenderSettings(**_pick(RenderSettings, raw.get("render"), "render")),
            align=AlignConfig(**_pick(AlignConfig, raw.get("align"), "align")),
            refine=RefineSettings(**_pick(RefineSettings, raw.get("refine"), "refine")),
            eval=EvalConfig(**_pick(EvalConfig, raw.get("eval"), "eval")),
        )
    except TypeError as exc:
        raise ValueError(f"{path.name}: malformed value: {exc}") from exc


def with_overrides(
    config: PipelineConfig,
    *,
    seed: int | None = None,
    epochs: int | None = None,
    steps_per_epoch: int | None = None,
    amodal: str | None = None,
    skip_refine: bool | None = None,
    mask_hand: bool | None = None,
) -> PipelineConfig:
    """Apply command-line overrides; ``epochs`` sets the final count and halves it for pretrain."""
    train = config.train
    if seed is not None:
        train = replace(train, seed=seed)
    if epochs is not None:
        train = replace(train, epochs_final=epochs, epochs_pretrain=max(1, epochs // 2))
    if steps_per_epoch is not None:
        train = replace(train, steps_per_epoch=steps_per_epoch)
    out = replace(config, train=train)
    if amodal is not None:
        out = replace(out, render=replace(out.render, amodal=amodal))
    if skip_refine is not None:
        out = replace(out, skip_refine=skip_refine)
    if mask_hand is not None:
        out = replace(out, mask_hand=mask_hand)
    return out


# ---------------------------------------------------------------------------
# Runtime defaults
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RuntimeDefaults:
    run_root: Path = ROOT / "runs"
    train_config: Path = ROOT / "config" / "train.yaml"
    scene_dir: Path = ROOT / "config" / "scenes"
    threads: int = 1


def runtime_defaults(pyproject: Path = PYPROJECT) -> RuntimeDefaults:
    """``[tool.holdfield]`` from pyproject.toml; ``HOLDFIELD_THREADS`` overrides the thread cap."""
    table: dict = {}
    if pyproject.exists():
        table = tomllib.loads(pyproject.read_text()).get("tool", {}).get("holdfield", {})
    base = pyproject.parent
    defaults = RuntimeDefaults(
        run_root=base / table.get("run_root", "runs"),
        train_config=base / table.get("train_config", "config/train.yaml"),
        scene_dir=base / table.get("scene_dir", "config/scenes"),
        threads=int(table.get("threads", 1)),
    )
    env = os.environ.get("HOLDFIELD_THREADS")
    if env:
        try:
            defaults = replace(defaults, threads=max(1, int(env)))
        except ValueError as exc:
            raise ValueError(f"HOLDFIELD_THREADS must be an integer, got {env!r}") from exc
    return defaults
