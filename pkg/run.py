#!/usr/bin/env python3
"""
CLI runner for the holdfield reconstruction pipeline.

Loads .env and runs individual stages or the full pipeline.

Usage:
    uv run python run.py gen-scene --scene config/scenes/standard.toml --out data/standard
    uv run python run.py train --data data/standard --run runs/a --stage pretrain
    uv run python run.py refine --data data/standard --run runs/a
    uv run python run.py train --data data/standard --run runs/a --stage final
    uv run python run.py extract-mesh --checkpoint runs/a/checkpoints/final.bin --out obj.obj
    uv run python run.py render --data data/standard --checkpoint runs/a/checkpoints/final.bin \\
        --frame 0 --out runs/a/renders/frame_000
    uv run python run.py evaluate --pred obj.obj --gt data/standard/gt_object.ply
    uv run python run.py pipeline --scene config/scenes/standard.toml --seed 7
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------
ROOT = Path(__file__).resolve().parent
ENV_FILE = ROOT / ".env"

# Ensure src/ is on the Python path for package imports
_SRC = str(ROOT / "src")
if _SRC not in sys.path:
    sys.path.insert(0, _SRC)


def load_env() -> None:
    """Source .env into os.environ; no-op when the file is missing."""
    load_dotenv(ENV_FILE)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------
def _config(args: argparse.Namespace):
    from holdfield.harness.config import load_config, runtime_defaults, with_overrides

    path = Path(args.config) if getattr(args, "config", None) else runtime_defaults().train_config
    return with_overrides(
        load_config(path),
        seed=getattr(args, "seed", None),
        epochs=getattr(args, "epochs", None),
        steps_per_epoch=getattr(args, "steps_per_epoch", None),
        amodal=getattr(args, "amodal", None),
        skip_refine=getattr(args, "skip_refine", None) or None,
        mask_hand=getattr(args, "mask_hand", None) or None,
    )


def run_gen_scene(scene: Path, out: Path, seed: int | None) -> None:
    from holdfield.harness.scene import gen_scene, load_scene

    script = load_scene(scene)
    if seed is not None:
        script = replace(script, seed=seed)
    print(f"\n{'=' * 60}")
    print(f"Generating scene: {script.name} ({script.frames} frames, {script.layout})")
    print(f"{'=' * 60}")
    dataset = gen_scene(script, out)
    print(f"{dataset.n_frames} frames at {dataset.width}x{dataset.height} written to {out}")


def run_train(args: argparse.Namespace) -> None:
    from holdfield.harness.dataset import read_dataset
    from holdfield.harness.train import print_summary, train

    config = _config(args)
    dataset = read_dataset(Path(args.data))
    print(f"\n{'=' * 60}")
    print(f"Training: {args.stage} ({config.train.epochs(args.stage)} epochs)")
    print(f"{'=' * 60}")
    result = train(dataset, config, args.stage, Path(args.run))
    print_summary(result)


def run_refine(args: argparse.Namespace) -> None:
    from holdfield.harness.dataset import read_dataset
    from holdfield.harness.pipeline import refine_from_checkpoint

    config = _config(args)
    dataset = read_dataset(Path(args.data))
    checkpoint = Path(args.run) / "checkpoints" / "pretrain.bin"
    if not checkpoint.exists():
        raise FileNotFoundError(f"no pretrain checkpoint at {checkpoint}")
    print(f"\n{'=' * 60}")
    print("Refine poses")
    print(f"{'=' * 60}")
    result = refine_from_checkpoint(dataset, checkpoint, config, Path(args.run))
    print(
        f"energy {result.initial_terms.get('energy_total', float('nan')):.5g} -> "
        f"{result.energy:.5g} in {result.iterations} iterations"
    )


def run_extract_mesh(args: argparse.Namespace) -> None:
    from holdfield.harness.config import PipelineConfig
    from holdfield.harness.pipeline import extract_hand_mesh, extract_object_mesh
    from holdfield.harness.train import restore_state
    from holdfield.meshmetrics import write_obj
    from holdfield.skeleton import build_default_skeleton

    state = restore_state(Path(args.checkpoint), build_default_skeleton(), PipelineConfig())
    if args.entity == "hand":
        mesh = extract_hand_mesh(state, args.resolution)
    else:
        mesh = extract_object_mesh(state, args.resolution).transformed(state.poses.frame)
    write_obj(Path(args.out), mesh)
    print(f"{args.entity} mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")


def run_render(args: argparse.Namespace) -> None:
    from holdfield.harness.config import PipelineConfig
    from holdfield.harness.dataset import read_dataset
    from holdfield.harness.pipeline import render_frame
    from holdfield.harness.train import restore_state

    dataset = read_dataset(Path(args.data))
    if not 0 <= args.frame < dataset.n_frames:
        raise UsageError(f"--frame must be in [0, {dataset.n_frames}), got {args.frame}")
    config = PipelineConfig()
    state = restore_state(Path(args.checkpoint), dataset.skeleton, config)
    settings = replace(config.render, samples=args.samples)
    written = render_frame(state, dataset, args.frame, Path(args.out), settings)
    print(f"{len(written)} channels written to {args.out}")


def run_evaluate(args: argparse.Namespace) -> None:
    from holdfield.meshmetrics import build_report, object_metrics, read_mesh, read_obj

    pred = read_obj(Path(args.pred))
    gt = read_mesh(Path(args.gt))
    report = build_report(object_metrics(pred, gt, align=not args.no_align), [])
    if args.out:
        report.write(Path(args.out))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def run_pipeline(args: argparse.Namespace) -> None:
    from holdfield.harness.config import runtime_defaults
    from holdfield.harness.dataset import read_dataset
    from holdfield.harness.pipeline import pipeline
    from holdfield.harness.scene import gen_scene, load_scene

    config = _config(args)
    defaults = runtime_defaults()
    if args.scene:
        script = load_scene(Path(args.scene))
        if args.seed is not None:
            script = replace(script, seed=args.seed)
        run_dir = Path(args.run) if args.run else defaults.run_root / f"{script.name}-{script.seed}"
        print(f"\n{'=' * 60}")
        print(f"Generating scene: {script.name}")
        print(f"{'=' * 60}")
        dataset = gen_scene(script, run_dir / "data")
    else:
        dataset = read_dataset(Path(args.data))
        run_dir = Path(args.run) if args.run else defaults.run_root / dataset.name
    pipeline(dataset, config, run_dir)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        description="holdfield hand-object reconstruction CLI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""\
examples:
  %(prog)s gen-scene --scene config/scenes/standard.toml --out data/standard
  %(prog)s pipeline --scene config/scenes/standard.toml --seed 7
  %(prog)s pipeline --data data/standard --skip-refine
  %(prog)s evaluate --pred a.obj --gt b.obj --out metrics.json
""",
    )
    parser.add_argument("--verbose", action="store_true", help="Log INFO diagnostics")
    sub = parser.add_subparsers(dest="stage", required=True)

    # gen-scene
    p_scene = sub.add_parser("gen-scene", help="Render a synthetic dataset from a scene script")
    p_scene.add_argument("--scene", required=True, help="Scene script (TOML)")
    p_scene.add_argument("--out", required=True, help="Dataset directory to write")
    p_scene.add_argument("--seed", type=int, default=None, help="Override the script seed")

    # train
    p_train = sub.add_parser("train", help="Train one stage")
    p_train.add_argument("--data", required=True, help="Dataset directory")
    p_train.add_argument("--run", required=True, help="Run directory")
    p_train.add_argument("--stage", required=True, choices=["pretrain", "final"])
    p_train.add_argument("--config", default=None, help="Training config (YAML)")
    p_train.add_argument("--epochs", type=int, default=None, help="Final-stage epochs")
    p_train.add_argument("--steps-per-epoch", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--mask-hand", action="store_true", help="Object-only ablation")

    # refine
    p_refine = sub.add_parser("refine", help="Refine poses from the run's pretrain checkpoint")
    p_refine.add_argument("--data", required=True, help="Dataset directory")
    p_refine.add_argument("--run", required=True, help="Run directory")
    p_refine.add_argument("--config", default=None, help="Training config (YAML)")

    # extract-mesh
    p_mesh = sub.add_parser("extract-mesh", help="Marching cubes on a trained field")
    p_mesh.add_argument("--checkpoint", required=True)
    p_mesh.add_argument("--out", required=True, help="Output OBJ")
    p_mesh.add_argument("--resolution", type=int, default=128)
    p_mesh.add_argument("--entity", choices=["hand", "object"], default="object")

    # render
    p_render = sub.add_parser("render", help="Render one frame from a checkpoint")
    p_render.add_argument("--data", required=True, help="Dataset directory")
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--frame", type=int, required=True)
    p_render.add_argument("--out", required=True, help="Output directory")
    p_render.add_argument("--samples", type=int, default=64, help="Samples per ray")

    # evaluate
    p_eval = sub.add_parser("evaluate", help="Chamfer / F-score between two meshes")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", default=None, help="Write the report to this JSON file")
    p_eval.add_argument("--no-align", action="store_true", help="Skip ICP alignment")

    # pipeline
    p_pipe = sub.add_parser("pipeline", help="align, pretrain, refine, final, meshes, metrics")
    source = p_pipe.add_mutually_exclusive_group(required=True)
    source.add_argument("--scene", help="Scene script (TOML); the dataset is generated first")
    source.add_argument("--data", help="Existing dataset directory")
    p_pipe.add_argument("--run", default=None, help="Run directory")
    p_pipe.add_argument("--config", default=None, help="Training config (YAML)")
    p_pipe.add_argument("--seed", type=int, default=None)
    p_pipe.add_argument("--skip-refine", action="store_true", help="Bypass pose refinement")
    p_pipe.add_argument("--mask-hand", action="store_true", help="Object-only ablation")
    p_pipe.add_argument("--amodal", choices=["occlusion", "independent"], default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    load_env()

    from holdfield.autodiff import configure_determinism
    from holdfield.errors import StageFailed
    from holdfield.harness.config import runtime_defaults

    try:
        configure_determinism(runtime_defaults().threads)
        match args.stage:
            case "gen-scene":
                run_gen_scene(Path(args.scene), Path(args.out), args.seed)
            case "train":
                run_train(args)
            case "refine":
                run_refine(args)
            case "extract-mesh":
                run_extract_mesh(args)
            case "render":
                run_render(args)
            case "evaluate":
                run_evaluate(args)
            case "pipeline":
                run_pipeline(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"Error: {args.stage}: {exc}", file=sys.stderr)
        return 1
    except StageFailed as exc:
        print(f"Error: {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"Error: {args.stage}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
