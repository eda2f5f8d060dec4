"""Command-line entry point: synthetic data, training, evaluation, inference.

Exit codes: 0 success, 1 I/O failure, 2 invalid configuration or flags,
3 numerical abort during training. Logs go to stderr, data to files only.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .data import (
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    save_ground_truth,
)
from .errors import MissingGroundTruth, NonFiniteValue, PoseLiftError
from .evaluate import evaluate_model, infer_dataset
from .model import ModelParams
from .train import ABLATION_MODES, TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load_config_section(path: str | None, section: str, known: set[str]) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    unknown_sections = set(cfg) - {"synth", "train", "eval", "infer"}
    if unknown_sections:
        raise ValueError(f"unknown config sections: {sorted(unknown_sections)}")
    values = cfg.get(section, {})
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    return values


def _merge(args: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else config-file value, else default."""
    flag = getattr(args, key)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def cmd_synth(args: argparse.Namespace) -> int:
    known = {
        "samples", "cameras", "noise_std", "camera_mode", "seed", "out",
        "gt_out", "occlusion_prob", "rigs",
    }
    config = _load_config_section(args.config, "synth", known)
    out = _merge(args, config, "out", None)
    if out is None:
        raise ValueError("--out is required")
    cfg = SynthConfig(
        num_samples=int(_merge(args, config, "samples", 1000)),
        num_cameras=int(_merge(args, config, "cameras", 4)),
        camera_mode=_merge(args, config, "camera_mode", "static"),
        num_rigs=int(_merge(args, config, "rigs", 1)),
        noise_std=float(_merge(args, config, "noise_std", 0.0)),
        occlusion_prob=float(_merge(args, config, "occlusion_prob", 0.0)),
        seed=int(_merge(args, config, "seed", 0)),
    )
    samples, gt = generate_synthetic(cfg)
    gt_out = _merge(args, config, "gt_out", str(out) + ".gt")
    save_dataset(samples, out)
    save_ground_truth(gt, gt_out)
    print(
        f"synth: wrote {len(samples)} samples ({cfg.num_cameras} cameras, "
        f"{cfg.camera_mode} mode, noise_std={cfg.noise_std}, seed={cfg.seed}) "
        f"to {out}; ground truth to {gt_out}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    known = {
        "dataset", "epochs", "lr", "batch_size", "lambda_cam", "static_cameras",
        "ablation", "seed", "out_dir", "checkpoint_every",
    }
    config = _load_config_section(args.config, "train", known)
    dataset_path = _merge(args, config, "dataset", None)
    out_dir = _merge(args, config, "out_dir", None)
    if dataset_path is None or out_dir is None:
        raise ValueError("--dataset and --out-dir are required")
    cfg = TrainConfig(
        epochs=int(_merge(args, config, "epochs", 100)),
        initial_lr=float(_merge(args, config, "lr", 1e-4)),
        batch_size=int(_merge(args, config, "batch_size", 256)),
        lambda_cam=float(_merge(args, config, "lambda_cam", 1.0)),
        static_camera_mode=bool(_merge(args, config, "static_cameras", False)),
        ablation_mode=_merge(args, config, "ablation", "none"),
        seed=int(_merge(args, config, "seed", 0)),
    )
    dataset = load_dataset(dataset_path)
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_every = int(_merge(args, config, "checkpoint_every", 0))
    params, log = train(
        dataset, cfg, checkpoint_dir=out_dir, checkpoint_every=checkpoint_every
    )
    params.save(os.path.join(out_dir, "checkpoint_final.bin"))
    log.to_csv(os.path.join(out_dir, "train_log.csv"))
    print(
        f"train: {cfg.epochs} epochs on {len(dataset)} samples "
        f"(ablation={cfg.ablation_mode}); final loss "
        f"{log.records[-1].total_loss:.6f}; outputs in {out_dir}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    known = {"checkpoint", "dataset", "report", "curve", "resolve_depth_flip"}
    config = _load_config_section(args.config, "eval", known)
    checkpoint = _merge(args, config, "checkpoint", None)
    dataset_path = _merge(args, config, "dataset", None)
    report_path = _merge(args, config, "report", None)
    if checkpoint is None or dataset_path is None or report_path is None:
        raise ValueError("--checkpoint, --dataset and --report are required")
    resolve = _merge(args, config, "resolve_depth_flip", True)
    params = ModelParams.load(checkpoint)
    dataset = load_dataset(dataset_path)
    report, _ = evaluate_model(params, dataset, resolve_depth_flip=bool(resolve))
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    curve_path = _merge(args, config, "curve", None)
    if curve_path is not None:
        report.save_curve_csv(curve_path)
    print(
        f"eval: {report.n_poses} poses; "
        f"mpjpe={report.mpjpe if report.mpjpe is None else round(report.mpjpe, 2)} "
        f"pmpjpe={report.pmpjpe:.2f} pck150={report.pck150:.2f} cps={report.cps:.2f}"
    )
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    known = {"checkpoint", "dataset", "out"}
    config = _load_config_section(args.config, "infer", known)
    checkpoint = _merge(args, config, "checkpoint", None)
    dataset_path = _merge(args, config, "dataset", None)
    out = _merge(args, config, "out", None)
    if checkpoint is None or dataset_path is None or out is None:
        raise ValueError("--checkpoint, --dataset and --out are required")
    params = ModelParams.load(checkpoint)
    dataset = load_dataset(dataset_path)
    results = infer_dataset(params, dataset)
    with open(out, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(
                json.dumps(
                    {
                        "sample_id": r.sample_id,
                        "camera_id": r.camera_id,
                        "canonical": r.canonical.tolist(),
                        "axis_angle": r.axis_angle.tolist(),
                        "camera_frame": r.camera_frame.tolist(),
                    }
                )
                + "\n"
            )
    print(f"infer: wrote {len(results)} view predictions to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poselift",
        description="Self-supervised multi-view 3D pose lifting toolkit",
    )
    parser.add_argument("--config", help="JSON config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    p.add_argument("--samples", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--camera-mode", dest="camera_mode", choices=["static", "moving"])
    p.add_argument("--occlusion-prob", dest="occlusion_prob", type=float)
    p.add_argument("--rigs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--gt-out", dest="gt_out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the lifting network")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda-cam", dest="lambda_cam", type=float)
    p.add_argument("--static-cameras", dest="static_cameras", action="store_const", const=True)
    p.add_argument("--ablation", choices=list(ABLATION_MODES))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--report")
    p.add_argument("--curve")
    p.add_argument(
        "--no-depth-flip", dest="resolve_depth_flip", action="store_const", const=False
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="single-view inference over a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, MissingGroundTruth) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteValue as exc:
        logger.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except PoseLiftError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
