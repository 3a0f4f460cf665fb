"""Command-line entry point.

Subcommands mirror the pipeline stages plus stand-alone tools::

    bana synth      --out DIR [--seed --images --size --classes]
    bana run        --config config.json [--seed N --jobs N]
    bana train-head --features-dir D --boxes-dir D --out HEAD.btf ...
    bana labels     --features F --boxes B --image I --head H
                    --out-crf P --out-ret P --out-fused P ...
    bana crf        --unary U.btf --image I.ppm --out Y.pgm ...
    bana nal-train  --features-dir D --labels-crf-dir D --labels-ret-dir D
                    --out-head H ...
    bana eval       --pred-dir D --ref-dir D --classes L

Exit codes: 0 success, 1 input/usage error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import clshead, fileio, metrics, nal, pipeline, synth
from .core import IGNORE, nearest_resize
from .crf import CrfParams, mean_field
from .pseudolabel import fuse_labels


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Bad flags are an input error (exit 1), not an internal one.
    def error(self, message):
        raise _UsageError(message)


def _add_crf_flags(p: argparse.ArgumentParser, defaults: CrfParams) -> None:
    p.add_argument("--iters", type=int, default=defaults.iterations)
    p.add_argument("--w1", type=float, default=defaults.w1)
    p.add_argument("--w2", type=float, default=defaults.w2)
    p.add_argument("--theta-alpha", type=float, default=defaults.theta_alpha)
    p.add_argument("--theta-beta", type=float, default=defaults.theta_beta)
    p.add_argument("--theta-gamma", type=float, default=defaults.theta_gamma)


def _crf_params(args) -> CrfParams:
    return CrfParams(
        w1=args.w1,
        w2=args.w2,
        theta_alpha=args.theta_alpha,
        theta_beta=args.theta_beta,
        theta_gamma=args.theta_gamma,
        iterations=args.iters,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="bana", description="Pseudo segmentation labels from bounding boxes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic test corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)

    p = sub.add_parser("run", help="run the configured pipeline stages")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=None, help="override the config worker count")

    p = sub.add_parser("train-head", help="train the classification head")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--boxes-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=None, help="number of object classes (default: inferred)")
    p.add_argument("--mode", choices=clshead.MODES, default="dot")

    p = sub.add_parser("labels", help="generate pseudo labels for one image")
    p.add_argument("--features", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out-crf", required=True)
    p.add_argument("--out-ret", required=True)
    p.add_argument("--out-fused", required=True)
    p.add_argument("--grid-size", type=int, default=1)
    p.add_argument("--attn-threshold", type=float, default=0.99,
                   help="background score threshold; 0 keeps the raw attention map")
    p.add_argument("--out-attention", default=None, help="also dump the attention map as .btf")
    p.add_argument("--filling-rate-csv", default=None)
    _add_crf_flags(p, CrfParams())

    p = sub.add_parser("crf", help="mean-field inference on a unary stack")
    p.add_argument("--unary", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--marginals", default=None, help="dump final marginals as rank-3 .btf")
    _add_crf_flags(p, CrfParams())

    p = sub.add_parser("nal-train", help="train the segmentation head")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--labels-crf-dir", required=True)
    p.add_argument("--labels-ret-dir", required=True)
    p.add_argument("--out-head", required=True)
    p.add_argument("--gamma", type=float, default=7.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--dump-confidence-dir", default=None,
                   help="write per-image confidence maps as .btf while training")
    p.add_argument("--dump-confidence-every", type=int, default=10,
                   help="epoch stride for the confidence dumps")

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", default=None, help="write the JSON report here as well")

    return parser


def _cmd_synth(args) -> int:
    manifest = synth.synth_corpus(
        args.out, seed=args.seed, num_images=args.images, size=args.size, num_classes=args.classes
    )
    print(f"wrote {len(manifest['ids'])} images to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = pipeline.PipelineConfig.from_json_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    artifacts = pipeline.run_pipeline(cfg)
    for stage, path in artifacts.items():
        print(f"{stage}: {path}")
    return 0


def _cmd_train_head(args) -> int:
    features_dir, boxes_dir = Path(args.features_dir), Path(args.boxes_dir)
    ids = sorted(p.stem for p in features_dir.glob("*.btf"))
    if not ids:
        raise FileNotFoundError(f"no .btf feature maps under {features_dir}")
    xs, ys, top = [], [], 0
    for image_id in ids:
        f = fileio.read_tensor(features_dir / f"{image_id}.btf", expected_rank=3)
        boxes = fileio.read_boxes(boxes_dir / f"{image_id}.json")
        top = max([top] + [b.class_id for b in boxes.boxes])
        x, y = pipeline.collect_training_samples(f, boxes, args.grid_size)
        xs.append(x)
        ys.append(y)
    num_classes = args.classes if args.classes is not None else top
    if num_classes < 1:
        raise ValueError("could not infer the number of classes; pass --classes")
    x, y = np.concatenate(xs), np.concatenate(ys)
    head = clshead.init_head(num_classes, x.shape[1], mode=args.mode, seed=args.seed)
    head, losses = clshead.sgd_train(head, x, y, epochs=args.epochs, lr=args.lr, seed=args.seed)
    clshead.save_head(args.out, head)
    print(f"trained on {x.shape[0]} samples, final loss {losses[-1]:.4f} -> {args.out}")
    return 0


def _cmd_labels(args) -> int:
    f = fileio.read_tensor(args.features, expected_rank=3)
    boxes = fileio.read_boxes(args.boxes)
    image = fileio.read_image(args.image)
    head = clshead.load_head(args.head)
    tau = args.attn_threshold if args.attn_threshold > 0 else None
    fused, attn, rates = pipeline.generate_labels_for_image(
        f, boxes, image, head, grid_size=args.grid_size, tau=tau, crf_params=_crf_params(args)
    )
    fileio.write_label_map(args.out_crf, fused.y_crf)
    fileio.write_label_map(args.out_ret, fused.y_ret)
    fileio.write_label_map(args.out_fused, fused.fused)
    if args.out_attention:
        fileio.write_tensor(args.out_attention, attn.astype(np.float32))
    if args.filling_rate_csv:
        lines = ["box_index,class,filling_rate"]
        lines += [f"{i},{b.class_id},{r:.6f}" for i, (b, r) in enumerate(zip(boxes.boxes, rates))]
        fileio.write_text(args.filling_rate_csv, "\n".join(lines) + "\n")
    print(f"coverage {float((fused.fused != IGNORE).mean()):.3f} -> {args.out_fused}")
    return 0


def _cmd_crf(args) -> int:
    unary = fileio.read_tensor(args.unary, expected_rank=3).astype(np.float64)
    image = fileio.read_image(args.image)
    labels, marginals = mean_field(unary, image, _crf_params(args))
    fileio.write_label_map(args.out, labels)
    if args.marginals:
        fileio.write_tensor(args.marginals, marginals.astype(np.float32))
    return 0


def _cmd_nal_train(args) -> int:
    features_dir = Path(args.features_dir)
    crf_dir, ret_dir = Path(args.labels_crf_dir), Path(args.labels_ret_dir)
    ids = sorted(p.stem for p in features_dir.glob("*.btf"))
    if not ids:
        raise FileNotFoundError(f"no .btf feature maps under {features_dir}")
    samples = []
    num_classes = args.classes
    if num_classes is None:
        num_classes = 0
        for image_id in ids:
            y = fileio.read_label_map(crf_dir / f"{image_id}.pgm")
            real = y[y != IGNORE]
            if real.size:
                num_classes = max(num_classes, int(real.max()))
        if num_classes < 1:
            raise ValueError("could not infer the number of classes; pass --classes")
    for image_id in ids:
        f = fileio.read_tensor(features_dir / f"{image_id}.btf", expected_rank=3)
        y_crf = fileio.read_label_map(crf_dir / f"{image_id}.pgm", num_classes)
        y_ret = fileio.read_label_map(ret_dir / f"{image_id}.pgm", num_classes)
        fh, fw = f.shape[1], f.shape[2]
        samples.append((f, fuse_labels(nearest_resize(y_crf, fh, fw), nearest_resize(y_ret, fh, fw))))
    hook = None
    if args.dump_confidence_dir:
        conf_dir = Path(args.dump_confidence_dir)
        conf_dir.mkdir(parents=True, exist_ok=True)

        def hook(epoch, index, sigma):
            if epoch % max(args.dump_confidence_every, 1) == 0:
                fileio.write_tensor(conf_dir / f"{ids[index]}_epoch{epoch:03d}.btf", sigma.astype(np.float32))

    head, losses = nal.train_seg_head(
        samples, num_classes, gamma=args.gamma, lam=args.lam,
        epochs=args.epochs, lr=args.lr, seed=args.seed, confidence_hook=hook,
    )
    clshead.save_head(args.out_head, head)
    if args.loss_csv:
        lines = ["epoch,loss"] + [f"{e},{v:.12g}" for e, v in enumerate(losses)]
        fileio.write_text(args.loss_csv, "\n".join(lines) + "\n")
    print(f"final loss {losses[-1]:.4f} -> {args.out_head}")
    return 0


def _cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    ids = sorted(p.stem for p in pred_dir.glob("*.pgm"))
    if not ids:
        raise FileNotFoundError(f"no .pgm predictions under {pred_dir}")
    n = args.classes + 1
    cm = np.zeros((n, n), dtype=np.int64)
    for image_id in ids:
        pred = fileio.read_label_map(pred_dir / f"{image_id}.pgm", args.classes)
        ref = fileio.read_label_map(ref_dir / f"{image_id}.pgm", args.classes)
        cm += metrics.confusion(pred, ref, args.classes)
    mean_iou, per_class = metrics.miou(cm)
    report = {
        "miou": mean_iou,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "pixel_acc": metrics.pixel_accuracy(cm),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        fileio.write_text(args.out, text + "\n")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "run": _cmd_run,
    "train-head": _cmd_train_head,
    "labels": _cmd_labels,
    "crf": _cmd_crf,
    "nal-train": _cmd_nal_train,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, fileio.FileFormatError, pipeline.PipelineError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything else is a bug, not a user mistake
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
