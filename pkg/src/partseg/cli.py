"""Command line interface: generate / train / evaluate / predict / plot."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig, apply_env_seed, parse_override
from .data.io import save_dataset
from .data.synthetic import generate_dataset
from .inference import predict
from .metrics import evaluate_dataset
from .plotting import plot_file
from .training import load_checkpoint, restore_network, train


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.set:
        overrides = dict(parse_override(item) for item in args.set)
        cfg = cfg.with_overrides(overrides)
    return apply_env_seed(cfg)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    train_scenes = generate_dataset(cfg, cfg.n_train, cfg.base_seed)
    val_scenes = generate_dataset(cfg, cfg.n_val, cfg.base_seed + cfg.n_train)
    save_dataset(train_scenes, out / "train")
    save_dataset(val_scenes, out / "val")
    cfg.save(out / "config.yaml")
    print(f"wrote {len(train_scenes)} train and {len(val_scenes)} val scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    from .data.io import load_dataset

    data = Path(args.data)
    split = data / "train"
    scenes = load_dataset(split if split.exists() else data)
    result = train(cfg, scenes, Path(args.out), quiet=False)
    print(f"checkpoint written to {result.checkpoint_path}")
    return 0


def cmd_evaluate(args) -> int:
    from .data.io import load_dataset

    checkpoint = load_checkpoint(args.ckpt)
    network, cfg = restore_network(checkpoint)
    data = Path(args.data)
    split = data / "val"
    scenes = load_dataset(split if split.exists() else data)
    preds = [predict(network, scene.image, cfg) for scene in scenes]
    report = evaluate_dataset(preds, scenes, cfg.k_parts)
    print(report.table())
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(f"report written to {report_path}")
    return 0


def cmd_predict(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    network, cfg = restore_network(checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB")).astype(np.float32) / 255.0
    result = predict(network, image, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result.global_parsing, mode="L").save(out / "global_parsing.png")
    meta = []
    for i, inst in enumerate(result.instances):
        Image.fromarray(inst.parsing, mode="L").save(out / f"inst_{i:02d}.png")
        if inst.edges is not None:
            Image.fromarray(inst.edges * 255, mode="L").save(out / f"edges_{i:02d}.png")
        meta.append({"box": list(inst.box.as_tuple()), "det_score": inst.det_score,
                     "miou_score": inst.miou_score, "fused_score": inst.fused_score})
    with open(out / "instances.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    print(f"{len(result.instances)} instances written to {out}")
    return 0


def cmd_plot(args) -> int:
    path = plot_file(args.infile, args.out)
    print(f"plot written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partseg",
                                     description="instance-level part segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a dataset directory")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory (or one split)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run the metric suite on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict instances on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="plot a loss log or a metric report")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
