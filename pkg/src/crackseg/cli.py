"""Command-line entry points: synth, train, predict, evaluate, compare."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np
from PIL import Image

from . import data as datamod
from .data import (DataError, augment_flips, crop_to, load_dataset,
                   pad_to_multiple, synth_dataset)
from .metrics import IoUResult, iou, miou, write_report
from .networks import VARIANT_ALIASES, NetworkConfig, build
from .tensor import Tensor
from .training import (TrainConfig, evaluate_miou, load_checkpoint,
                       restore_network, train)

ARCH_NAMES = tuple(VARIANT_ALIASES)  # ("unet", "attn", "adv-attn", "full-attn")

TABLE_LABELS = {
    "unet": "U-net",
    "attn": "Attention U-net",
    "adv-attn": "Advanced Attention U-net",
    "full-attn": "Full Attention U-net",
}


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")
    if w % 16 or h % 16:
        raise argparse.ArgumentTypeError(
            f"dimensions must be divisible by 16, got {w}x{h}")
    return (w, h)


def load_config_file(path, allowed):
    """Flat key=value file; unknown keys are rejected by name."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in allowed:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def resolve_config(args, parser):
    """Apply config-file values under explicit flags, echo the result."""
    allowed = {a.dest for a in parser._actions
               if a.dest not in ("help", "config")}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config, allowed)
        for action in parser._actions:
            if action.dest in file_values and \
                    getattr(args, action.dest) == action.default:
                raw = file_values[action.dest]
                if action.type:
                    raw = action.type(raw)
                elif isinstance(action.default, bool):
                    raw = raw.lower() in ("1", "true", "yes")
                elif action.default is not None:
                    raw = type(action.default)(raw)
                setattr(args, action.dest, raw)
    print("resolved configuration:")
    for key in sorted(allowed):
        print(f"  {key} = {getattr(args, key)}")
    return args


def _snapshot(paths):
    found = set()
    for root in paths:
        if root and os.path.isdir(root):
            for dirpath, _, files in os.walk(root):
                for f in files:
                    found.add(os.path.join(dirpath, f))
    return found


def _remove_new(paths, before):
    for f in sorted(_snapshot(paths) - before):
        try:
            os.remove(f)
        except OSError:
            pass


def write_loss_svg(report, path):
    """Minimal standalone SVG of the per-epoch mean loss."""
    xs = [r.epoch for r in report.records]
    ys = [r.mean_loss for r in report.records]
    if not xs:
        return
    w, h, m = 640, 400, 50
    ymax = max(ys) or 1.0
    xmax = max(xs)

    def px(x):
        return m + (w - 2 * m) * (x / xmax)

    def py(y):
        return h - m - (h - 2 * m) * (y / ymax)

    points = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
    with open(path, "w") as f:
        f.write(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n'
            f'<rect width="{w}" height="{h}" fill="white"/>\n'
            f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>\n'
            f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>\n'
            f'<polyline points="{points}" fill="none" stroke="steelblue" stroke-width="2"/>\n'
            f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">epoch</text>\n'
            f'<text x="14" y="{h / 2}" transform="rotate(-90 14 {h / 2})" '
            f'text-anchor="middle">mean loss</text>\n'
            f'<text x="{m}" y="{m - 8}">max {ymax:.4f}</text>\n'
            '</svg>\n')


# ---------------------------------------------------------------------------
# Commands


def _load_splits(args):
    target = args.size
    train_set = load_dataset(args.data, target=target, split="train")
    val_set = load_dataset(args.data, target=target, split="val")
    if not val_set and getattr(args, "val_fraction", 0.0) > 0:
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(train_set))
        n_val = max(1, int(round(args.val_fraction * len(train_set))))
        val_set = [train_set[i] for i in order[:n_val]]
        train_set = [train_set[i] for i in order[n_val:]]
    if not train_set:
        raise DataError("no training samples in the dataset")
    return train_set, val_set


def _train_one(arch, train_set, val_set, args, out_dir):
    variant = VARIANT_ALIASES[arch]
    if args.augment:
        train_set = [f for s in train_set for f in augment_flips(s)]
    net_config = NetworkConfig(variant=variant, base_width=args.base_width)
    net = build(net_config, seed=args.seed)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         learning_rate=args.lr, seed=args.seed,
                         variant=variant, base_width=args.base_width,
                         checkpoint_every=args.checkpoint_every)
    os.makedirs(out_dir, exist_ok=True)
    resume = load_checkpoint(args.resume) if getattr(args, "resume", None) else None
    if resume is not None:
        net = restore_network(resume)
    report = train(net, train_set, config, val_dataset=val_set or None,
                   out_dir=out_dir, resume=resume, log=print)
    if args.plot:
        write_loss_svg(report, os.path.join(out_dir, "loss_curve.svg"))
    return net, report


def cmd_train(args):
    train_set, val_set = _load_splits(args)
    _train_one(args.arch, train_set, val_set, args, args.out)
    return 0


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    synth_dataset(args.out, args.count, size=args.size, seed=args.seed,
                  val_count=args.val_count)
    print(f"wrote {args.count} train + {args.val_count} val pairs to {args.out}")
    return 0


def _list_input_images(inputs):
    if os.path.isdir(inputs):
        files = [os.path.join(inputs, f) for f in sorted(os.listdir(inputs))
                 if os.path.splitext(f)[1].lower() in datamod.IMAGE_EXTENSIONS]
    else:
        files = [inputs]
    if not files:
        raise DataError(f"no input images under {inputs!r}")
    return files


def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    if args.arch and VARIANT_ALIASES[args.arch] != ckpt.config.variant:
        raise ValueError(f"checkpoint holds a {ckpt.config.variant!r} network, "
                         f"not {VARIANT_ALIASES[args.arch]!r}")
    if args.base_width and args.base_width != ckpt.config.base_width:
        raise ValueError(f"checkpoint base width is {ckpt.config.base_width}, "
                         f"not {args.base_width}")
    net = restore_network(ckpt)
    os.makedirs(args.out, exist_ok=True)
    for path in _list_input_images(args.inputs):
        stem = os.path.splitext(os.path.basename(path))[0]
        img = Image.open(path).convert("RGB")
        if args.size:
            img = img.resize(args.size, Image.BILINEAR)
        arr = (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)[None]
        padded, hw = pad_to_multiple(arr, 16)
        logits = net.forward(Tensor(padded), mode="eval")
        probs = 1.0 / (1.0 + np.exp(-crop_to(logits.data, hw)[0, 0]
                                    .astype(np.float64)))
        prob_u8 = np.clip(np.round(probs * 255), 0, 255).astype(np.uint8)
        mask_u8 = np.where(prob_u8 >= 128, 255, 0).astype(np.uint8)
        Image.fromarray(prob_u8).save(os.path.join(args.out, f"{stem}_prob.png"))
        Image.fromarray(mask_u8).save(os.path.join(args.out, f"{stem}_mask.png"))
        print(f"predicted {stem}")
    return 0


def _read_mask_u8(path):
    return np.asarray(Image.open(path).convert("L")) >= 128


def cmd_evaluate(args):
    gt_files = {os.path.splitext(f)[0]: os.path.join(args.gt, f)
                for f in sorted(os.listdir(args.gt))
                if os.path.splitext(f)[1].lower() in datamod.IMAGE_EXTENSIONS}
    pred_files = {}
    for f in sorted(os.listdir(args.pred)):
        stem, ext = os.path.splitext(f)
        if ext.lower() not in datamod.IMAGE_EXTENSIONS:
            continue
        stem = stem[:-5] if stem.endswith("_mask") else stem
        pred_files.setdefault(stem, os.path.join(args.pred, f))
    unmatched = sorted(set(gt_files) ^ set(pred_files))
    if unmatched:
        for stem in unmatched:
            print(f"unmatched stem: {stem}", file=sys.stderr)
        raise DataError(f"{len(unmatched)} unmatched prediction/ground-truth stems")
    results = []
    for stem in sorted(gt_files):
        pred = _read_mask_u8(pred_files[stem]).astype(np.float64)
        gt = _read_mask_u8(gt_files[stem]).astype(np.float64)
        results.append(iou(pred, gt, source=stem))
    write_report(results, args.out)
    print(f"mIoU: {100 * miou(results):.2f}%  ({len(results)} images)")
    return 0


def cmd_compare(args):
    train_set, val_set = _load_splits(args)
    eval_set = val_set or train_set
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for arch in ARCH_NAMES:
        print(f"--- training {arch} ---")
        net, _ = _train_one(arch, train_set, val_set, args,
                            os.path.join(args.out, arch))
        rows.append((TABLE_LABELS[arch], 100 * evaluate_miou(net, eval_set)))
    table_path = os.path.join(args.out, "comparison.tsv")
    with open(table_path, "w") as f:
        f.write("Network\tmIoU (%)\n")
        for label, value in rows:
            f.write(f"{label}\t{value:.2f}\n")
    print("Network\tmIoU (%)")
    for label, value in rows:
        print(f"{label}\t{value:.2f}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory (images/ + masks/)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--base-width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_parse_size, default=None,
                   help="resize target WxH (dimensions divisible by 16)")
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="seeded validation split when the manifest has none")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction,
                   default=True, help="x4 flip augmentation of the train split")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="emit an SVG loss curve")
    p.add_argument("--config", default=None, help="key=value config file")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crackseg",
        description="Train, run and compare the four segmentation network variants.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic crack dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=30)
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--arch", required=True, choices=ARCH_NAMES)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write probability maps and masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inputs", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=ARCH_NAMES, default=None)
    p.add_argument("--base-width", type=int, default=None)
    p.add_argument("--size", type=_parse_size, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="IoU report for predictions vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report file path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train all four variants and emit the table")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    subparser = next(a for a in parser._subparsers._group_actions[0]
                     .choices.values() if a.get_default("func") is args.func)
    try:
        args = resolve_config(args, subparser)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out_dirs = [getattr(args, "out", None)]
    before = _snapshot(out_dirs)
    try:
        return args.func(args)
    except Exception as e:  # partial outputs are removed on failure
        _remove_new(out_dirs, before)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
