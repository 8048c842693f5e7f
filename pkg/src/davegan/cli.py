"""Command-line interface: ``davegan {train,generate,reconstruct,traverse,make-data,metrics}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or precondition error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import descriptors
from .autodiff import Tape, Tensor
from .models import CheckpointError, load_checkpoint
from .trainer import build_model, load_config, parse_config, preset, train, traversal_grid, model_dtype

log = logging.getLogger("davegan")


class UsageError(Exception):
    """Precondition failure reported with exit code 2."""


def _levels(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _rounded(img: np.ndarray, levels) -> np.ndarray:
    lv = np.asarray(sorted(levels))
    return lv[descriptors.round_to_indicator(img, lv)]


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise UsageError(f"data path does not exist: {data_path}")
    cfg = preset(args.preset, seed=args.seed)
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config, cfg)
    overrides = [f"{k} = {v}" for k, v in (("epochs", args.epochs), ("beta", args.beta)) if v is not None]
    overrides += list(args.set or [])
    if args.seed_given:
        overrides.append(f"seed = {args.seed}")
    if overrides:
        cfg = parse_config("\n".join(overrides), cfg)
    images = data_mod.load_images(data_path)
    if not images:
        raise UsageError(f"no images found in {data_path}")
    size = images[0].shape[0]
    if any(im.shape != (size, size) for im in images):
        raise UsageError(f"images in {data_path} must all be square and of equal size")
    if size != cfg.image_size:
        cfg = parse_config(f"image_size = {size}", cfg)
    model = build_model(cfg)
    train(model, images, cfg, out_dir=args.out, max_steps=args.max_steps, progress=True)
    print(f"trained {cfg.epochs} epochs on {len(images)} samples -> {Path(args.out) / 'model.dvgn'}")
    return 0


def cmd_generate(args) -> int:
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal((args.num, model.z_dim)).astype(model_dtype(model))
    with Tape():
        imgs = model.generate(Tensor(z), training=False).data[:, 0]
    width = max(4, len(str(args.num)))
    for i, img in enumerate(imgs):
        data_mod.write_image(out / f"gen_{i:0{width}d}.pgm", img)
        data_mod.write_image(out / f"gen_{i:0{width}d}.rounded.pgm", _rounded(img, args.levels))
    print(f"wrote {2 * args.num} images to {out}")
    return 0


def _read_inputs(paths, size):
    imgs = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise UsageError(f"input not found: {p}")
        img = data_mod.read_image(p)
        if img.shape != (size, size):
            raise UsageError(f"{p}: image is {img.shape[1]}x{img.shape[0]}, model expects {size}x{size}")
        imgs.append(img)
    return imgs


def cmd_reconstruct(args) -> int:
    model = _load_model(args.checkpoint)
    imgs = _read_inputs(args.input, model.image_size)
    x = np.stack(imgs)[:, None].astype(model_dtype(model))
    with Tape():
        rec = model.reconstruct(Tensor(x), training=False).data[:, 0]
    for p, r in zip(args.input, rec):
        p = Path(p)
        target = (Path(args.out) if args.out else p.parent)
        target.mkdir(parents=True, exist_ok=True)
        data_mod.write_image(target / f"{p.stem}.recon.pgm", r)
        data_mod.write_image(target / f"{p.stem}.recon.rounded.pgm", _rounded(r, args.levels))
    print(f"reconstructed {len(imgs)} images")
    return 0


def cmd_traverse(args) -> int:
    model = _load_model(args.checkpoint)
    (img,) = _read_inputs([args.input], model.image_size)
    grid = traversal_grid(model, img, args.range, args.steps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_image(args.out, grid)
    print(f"wrote {grid.shape[1]}x{grid.shape[0]} traversal grid to {args.out}")
    return 0


def cmd_make_data(args) -> int:
    out = Path(args.out)
    if args.kind == "ellipse":
        ds = data_mod.sample_ellipse_dataset(args.num, args.size, np.random.default_rng(args.seed))
        images = ds.samples
    elif args.kind == "checkerboard":
        board = data_mod.make_checkerboard(args.size, args.cell)
        images = data_mod.tile_micrograph(board, args.tile) if args.tile else [board] * args.num
    else:
        if not args.input:
            raise UsageError("--kind tiles requires --input IMAGE")
        src = Path(args.input)
        if not src.is_file():
            raise UsageError(f"input not found: {src}")
        try:
            images = data_mod.tile_micrograph(data_mod.read_image(src), args.tile or 64)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    manifest = data_mod.save_dataset(data_mod.DataSet(list(images), images[0].shape[0]), out, args.kind)
    print(f"wrote {len(images)} images and {manifest}")
    return 0


def cmd_metrics(args) -> int:
    for p in (args.set_a, args.set_b):
        if not Path(p).exists():
            raise UsageError(f"manifest not found: {p}")
    paths_a = data_mod.read_manifest(args.set_a) if Path(args.set_a).is_file() else sorted(Path(args.set_a).glob("*.pgm"))
    paths_b = data_mod.read_manifest(args.set_b) if Path(args.set_b).is_file() else sorted(Path(args.set_b).glob("*.pgm"))
    if not paths_a or not paths_b:
        raise UsageError("manifests must be non-empty")
    a = [data_mod.read_image(p) for p in paths_a]
    b = [data_mod.read_image(p) for p in paths_b]
    lv = args.levels
    rows = []
    if args.mode == "rec":
        if len(a) != len(b):
            raise UsageError(f"rec mode needs equal lengths, got {len(a)} and {len(b)}")
        for pa, x, y in zip(paths_a, a, b):
            e = descriptors.descriptor_error(descriptors.structure_s2(x, lv), descriptors.structure_s2(y, lv))
            vf = descriptors.volume_fraction(descriptors.round_to_indicator(y, lv), 1)
            rows.append((Path(pa).name, e, "", vf))
        total = descriptors.error_rec(a, b, lv)
        rows.append(("mean", total, "", np.mean([r[3] for r in rows])))
        print(f"E_rec = {total:.6g}")
    else:
        for pa, g in zip(paths_a, a):
            e = descriptors.error_gen([g], b, lv)
            vf = descriptors.volume_fraction(descriptors.round_to_indicator(g, lv), 1)
            rows.append((Path(pa).name, "", e, vf))
        total = descriptors.error_gen(a, b, lv)
        rows.append(("mean", "", total, np.mean([r[3] for r in rows])))
        print(f"E_gen = {total:.6g}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("structure_id", "e_rec", "e_gen", "v_f"))
            w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.seed_given = True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="davegan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0, action=_SeedAction)
        p.set_defaults(func=fn, seed_given=False)
        return p

    p = add("train", cmd_train, "train a model")
    p.add_argument("--data", required=True, help="image directory or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("ellipse", "small-data"), default="ellipse")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--max-steps", type=int)

    p = add("generate", cmd_generate, "decode random latent vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=_levels, default=(0.0, 1.0))

    p = add("reconstruct", cmd_reconstruct, "encode and decode images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--levels", type=_levels, default=(0.0, 1.0))

    p = add("traverse", cmd_traverse, "latent traversal grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--range", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=13)
    p.add_argument("--out", required=True)

    p = add("make-data", cmd_make_data, "synthesize or tile training images")
    p.add_argument("--kind", choices=("ellipse", "checkerboard", "tiles"), required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--num", type=int, default=100)
    p.add_argument("--cell", type=int, default=8)
    p.add_argument("--tile", type=int)
    p.add_argument("--input")
    p.add_argument("--out", required=True)

    p = add("metrics", cmd_metrics, "descriptor errors between two image sets")
    p.add_argument("--set-a", required=True)
    p.add_argument("--set-b", required=True)
    p.add_argument("--mode", choices=("rec", "gen"), required=True)
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--levels", type=_levels, default=(0.0, 1.0))
    return parser


def _limit_threads():
    n = os.environ.get("DAVEGAN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"davegan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, data_mod.PGMError) as exc:
        print(f"davegan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"davegan {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
