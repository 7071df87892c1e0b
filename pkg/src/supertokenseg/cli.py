"""Command-line surface: synth, train, eval, selfcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import torch

from .config import load_config
from .errors import ConfigError, DataError, NumericError
from .metrics import ConfusionMatrix, derive_metrics, format_report, report_csv
from .network import block_tensors
from .pipeline import (
    build_net,
    load_scenes,
    run_training,
    split_blocks,
    synth_scenes,
)
from .plyio import write_ply
from .selfcheck import run_selfcheck
from .training import load_checkpoint


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.scene_seed = args.seed
    paths = synth_scenes(cfg, args.out)
    from .pipeline import per_class_counts
    from .geometry import read_labeled_points

    totals = None
    for p in paths:
        counts = per_class_counts(read_labeled_points(p))
        totals = counts if totals is None else totals + counts
    names = load_scenes(args.out)[0].class_names
    print(f"wrote {len(paths)} scenes to {args.out}")
    for name, n in zip(names, totals):
        print(f"  {name}: {n}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.rng_seed = args.seed
    out = args.out or "run"
    result = run_training(cfg, out, resume_from=args.checkpoint)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final loss {last.train_loss:.4f}; "
          f"best mIoU {result.best_miou:.4f}")
    print(f"checkpoint and history written to {out}")
    return 0


def _dump_predictions(out_dir, cfg, net, blocks):
    os.makedirs(out_dir, exist_ok=True)
    rows = ["block,point,x,y,z,label,pred,cluster"]
    for bi, block in enumerate(blocks):
        pos, feat, labels = block_tensors(block)
        with torch.no_grad():
            tokens = net.embedder(pos, feat)
            _, _, cam1 = net.module1.run(tokens, cfg.assign_mode)
            pred = net(pos, feat, cfg.assign_mode, training=False)
        clusters = cam1.matrix.argmax(dim=0).numpy()
        predicted = pred.fused_probs.argmax(dim=1).numpy()
        write_ply(
            os.path.join(out_dir, f"block_{bi:03d}.ply"),
            block.cloud.positions, block.cloud.labels, predicted, clusters,
        )
        for j in range(block.cloud.n_points):
            p = block.cloud.positions[j]
            rows.append(
                f"{bi},{j},{p[0]:.4f},{p[1]:.4f},{p[2]:.4f},"
                f"{block.cloud.labels[j]},{predicted[j]},{clusters[j]}"
            )
    with open(os.path.join(out_dir, "predictions.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    scenes = load_scenes(cfg.data_dir)
    train_blocks, hold_blocks = split_blocks(scenes, cfg)
    blocks = train_blocks if args.split == "train" else hold_blocks
    if not blocks:
        raise DataError(f"no blocks in the {args.split} split")
    in_channels = blocks[0].cloud.n_features
    n_classes = len(blocks[0].cloud.class_names)
    net = build_net(cfg, in_channels, n_classes)
    load_checkpoint(
        args.checkpoint, net, cfg.arch_digest(in_channels, n_classes),
        use_best=True,
    )

    cm = ConfusionMatrix(blocks[0].cloud.class_names)
    for block in blocks:
        pos, feat, labels = block_tensors(block)
        with torch.no_grad():
            pred = net(pos, feat, cfg.assign_mode, training=False)
        cm.accumulate(pred.fused_probs.argmax(dim=1).numpy(), labels.numpy())
    report = derive_metrics(cm)
    print(format_report(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
            fh.write(report_csv(report))
        _dump_predictions(args.out, cfg, net, blocks)
        print(f"predictions written to {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    results = run_selfcheck()
    width = max(len(r.name) for r in results) + 2
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}} max rel err {r.max_rel_error:.3e}  {status}")
    if failed:
        names = ", ".join(r.name for r in failed)
        raise NumericError(f"self-check failed: {names}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supertokenseg",
        description="Supertoken-clustering point cloud segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic labeled scenes")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="preprocess scenes and train")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint", default=None, help="resume from checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", choices=("train", "holdout"), default="holdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run gradient and oracle checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
