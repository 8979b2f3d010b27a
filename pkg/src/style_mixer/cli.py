"""Command-line entry points: train, sst (one style), mst (many styles)."""

import argparse
import colorsys
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .encoder import default_weights_path, load_encoder
from .images import load_image, save_image, snap_to_stride
from .model import load_checkpoint
from .training import parse_config, train


def _add_stylize_args(parser):
    parser.add_argument("--content", required=True, help="content image path")
    parser.add_argument("--style", action="append", required=True,
                        help="style image path (repeatable)")
    parser.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    parser.add_argument("--out", required=True, help="output PNG path")
    parser.add_argument("--patch-size", type=int, default=None,
                        help="must match the checkpoint when given")
    parser.add_argument("--encoder-weights", default=None,
                        help="encoder .npz (default: $STYLE_MIXER_CACHE/vgg19.npz)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="style-mixer",
        description="Feed-forward arbitrary style transfer with patch attention "
                    "and region-based multi-style fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="flat key=value config file")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--max-steps", type=int, default=None,
                         help="override max_steps from the config")
    p_train.add_argument("--encoder-weights", default=None)
    p_train.set_defaults(func=cmd_train)

    p_sst = sub.add_parser("sst", help="stylize with a single style image")
    _add_stylize_args(p_sst)
    p_sst.set_defaults(func=cmd_sst)

    p_mst = sub.add_parser("mst", help="stylize with several style images")
    _add_stylize_args(p_mst)
    p_mst.add_argument("--k", type=int, default=6, help="number of content regions")
    p_mst.add_argument("--strategy", choices=("region", "discrete"),
                       default="region", help="style assignment strategy")
    p_mst.add_argument("--pos-weight", type=float, default=1.0,
                       help="weight of spatial coordinates in clustering")
    p_mst.add_argument("--seed", type=int, default=0, help="clustering seed")
    p_mst.add_argument("--dump-regions", action="store_true",
                       help="also write the region map PNG and assignment table")
    p_mst.set_defaults(func=cmd_mst)
    return parser


def _load_model(args):
    encoder = load_encoder(args.encoder_weights or default_weights_path())
    model, _ = load_checkpoint(args.checkpoint, encoder)
    if args.patch_size is not None and args.patch_size != model.config.patch_size:
        raise ValueError(
            f"checkpoint was trained with patch_size={model.config.patch_size}, "
            f"got --patch-size {args.patch_size}")
    return model


def cmd_train(args):
    cfg, model_cfg, loss_cfg = parse_config(args.config)
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    if args.encoder_weights is not None:
        cfg.encoder_weights = args.encoder_weights
    path = train(cfg, model_cfg, loss_cfg, resume=args.resume)
    print(f"final checkpoint: {path}")
    return 0


def cmd_sst(args):
    model = _load_model(args)
    content = snap_to_stride(load_image(args.content))
    style = snap_to_stride(load_image(args.style[0]))
    save_image(model.stylize(content, style), args.out)
    return 0


def _region_palette(k):
    colors = [colorsys.hsv_to_rgb(i / k, 0.75, 0.95) for i in range(k)]
    return (np.array(colors) * 255).round().astype(np.uint8)


def _dump_regions(result, out_path):
    out = Path(out_path)
    labels = result.regions.labels
    palette = _region_palette(result.regions.k)
    # nearest upscale by the relu4_1 stride so the map overlays the output
    upscaled = np.repeat(np.repeat(labels, 8, axis=0), 8, axis=1)
    png_path = out.with_name(out.stem + "_regions.png")
    Image.fromarray(palette[upscaled]).save(png_path)
    table_path = out.with_name(out.stem + "_regions.txt")
    lines = [f"region {r} -> style {result.assignment.region_to_style[r]}"
             for r in range(result.regions.k)]
    table_path.write_text("\n".join(lines) + "\n")
    return png_path, table_path


def cmd_mst(args):
    model = _load_model(args)
    content = snap_to_stride(load_image(args.content))
    styles = [snap_to_stride(load_image(p)) for p in args.style]
    result = model.stylize_multi(content, styles, k=args.k,
                                 pos_weight=args.pos_weight, seed=args.seed,
                                 strategy=args.strategy)
    save_image(result.image, args.out)
    if args.dump_regions:
        _dump_regions(result, args.out)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "sst" and len(args.style) != 1:
        parser.error("sst takes exactly one --style")
    if args.command == "mst":
        if args.k < 1:
            parser.error("--k must be >= 1")
        if args.dump_regions and args.strategy != "region":
            parser.error("--dump-regions requires --strategy region")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
