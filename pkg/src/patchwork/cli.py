"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import plotting
from .attribution import (PixelAttributionMap, average_maps, load_ramp, normalize01, pixel_map, region_map,
                          region_maps, save_ramp, write_heat_png, write_map_csv)
from .augmentation import ALL_SCHEMES, AugmentationPolicy, augment
from .confidence import ConfidenceMethod, confidence_batch, ece, write_reliability_csv
from .dataset import (PAPER_BIAS, BiasSpec, DatasetManifest, SyntheticSpec, generate_synthetic, load_image,
                      load_images, load_manifest, save_image, write_manifest, write_synthetic)
from .errors import ConfigError, DimensionError, FormatError, PatchworkError
from .experiment import (ExperimentConfig, TargetTrainConfig, quantile_sweep, run_experiment, validate_report,
                         write_sweep_csv)
from .grid import make_grid
from .region import RegionClassifierModel, RegionTrainConfig, predict_all_patches, train_region_classifier

log = logging.getLogger("patchwork")

METHOD_CHOICES = [m.value for m in ConfidenceMethod]


# -- argument helpers ---------------------------------------------------------

def _int_list(text: str, n: int | None = None) -> list[int]:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(values) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
    return values


def _grid_arg(text: str):
    return tuple(_int_list(text, 3))


def _bias_arg(text: str):
    return tuple(_int_list(text, 4))


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _schemes_arg(text: str):
    if text.strip().lower() == "all":
        return list(ALL_SCHEMES)
    return [s.strip() for s in text.split(",") if s.strip()]


class _Context:
    def __init__(self, args):
        self.seed = args.seed
        self.threads = max(1, args.threads)
        self.out_dir = Path(args.out_dir)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.out_dir / p


def _filter_split(manifest: DatasetManifest, split: str | None) -> DatasetManifest:
    if not split or not any(r.split for r in manifest.records):
        return manifest
    keep = [i for i, r in enumerate(manifest.records) if r.split == split]
    return manifest.subset(keep)


def _nonempty(manifest: DatasetManifest, what: str) -> DatasetManifest:
    if len(manifest) == 0:
        raise ConfigError(f"{what}: manifest has no records")
    return manifest


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_synth_gen(args, ctx: _Context) -> int:
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec {args.spec} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("synthetic spec must be a JSON object")
        spec = SyntheticSpec.from_dict(raw)
    else:
        spec = SyntheticSpec()
    ds = generate_synthetic(spec, args.per_cell, ctx.seed)
    out = ctx.path(args.out)
    write_synthetic(ds, out)
    print(f"wrote {len(ds.manifest)} images to {out}")
    return 0


def cmd_train_region(args, ctx: _Context) -> int:
    manifest = _nonempty(_filter_split(load_manifest(args.data), args.split), "train-region")
    labels = manifest.column(args.attr)
    grid = make_grid(*args.grid)
    config = RegionTrainConfig(lr0=args.lr, epochs=args.epochs, batch_size=args.batch,
                               label_smoothing=args.smoothing, patches_per_image=args.patches_per_image,
                               embed_dim=args.embed_dim, weight_decay=args.weight_decay, seed=ctx.seed)
    print(f"train-region attr={args.attr} grid=I{grid.image_size},k{grid.patch_size},g{grid.grid_side},"
          f"s{grid.stride} p={grid.n_positions} lr={config.lr0:g} "
          f"schedule=step(x{config.step_factor:g}/{config.step_epochs}ep) epochs={config.epochs} "
          f"batch={config.batch_size} label_smoothing={config.label_smoothing:g} "
          f"weight_decay={config.weight_decay:g} seed={config.seed}")
    images = load_images(manifest, grid.image_size)
    model, history = train_region_classifier(images, labels, grid, config, attribute_name=args.attr)
    out = ctx.path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    loss_csv = out.with_name(out.stem + "_loss.csv")
    with open(loss_csv, "w") as fh:
        fh.write("epoch,lr,loss,accuracy\n")
        for e in history.epochs:
            fh.write(f"{e['epoch']},{e['lr']!r},{e['loss']!r},{e['accuracy']!r}\n")
    if history.epochs:
        plotting.loss_curve(history, out.with_name(out.stem + "_loss.png"))
    print(f"checkpoint {out} sha256={model.digest()}")
    return 0


def cmd_attribute(args, ctx: _Context) -> int:
    model = RegionClassifierModel.load(args.model)
    method = ConfidenceMethod.parse(args.method)
    grid = model.grid
    image = None
    if args.image:
        image = load_image(args.image, grid.image_size if args.resize else None)
        if image.shape[1:] != (grid.image_size, grid.image_size):
            raise DimensionError(f"image {args.image} is {image.shape[2]}x{image.shape[1]}, the model grid "
                                 f"expects {grid.image_size}x{grid.image_size} (use --resize)")
        rmap = region_map(model, image, method, args.batch)
    elif args.data:
        manifest = _nonempty(_filter_split(load_manifest(args.data), args.split), "attribute")
        images = load_images(manifest, grid.image_size)
        rmap = average_maps(region_maps(model, images, method, args.batch, ctx.threads))
    else:
        raise ConfigError("attribute needs --image or --data")
    result = rmap
    if args.pixel:
        result = pixel_map(rmap, grid)
        if args.normalize:
            result = normalize01(result)
    elif args.normalize:
        raise ConfigError("--normalize applies to pixel maps; add --pixel")
    out = ctx.path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ramp(out, result)
    if args.csv:
        write_map_csv(ctx.path(args.csv), result)
    if args.png:
        write_heat_png(ctx.path(args.png), result)
    if args.figure:
        shown = image if (image is not None and args.pixel) else None
        plotting.attribution_figure(shown, result.values, ctx.path(args.figure),
                                    f"{model.attribute_name} ({method.value})")
    rows, cols = result.values.shape
    print(f"{'pixel' if args.pixel else 'region'} map {rows}x{cols} -> {out}")
    return 0


def cmd_calibrate(args, ctx: _Context) -> int:
    model = RegionClassifierModel.load(args.model)
    manifest = _nonempty(_filter_split(load_manifest(args.data), args.split), "calibrate")
    labels = manifest.column(model.attribute_name)
    images = load_images(manifest, model.grid.image_size)
    logits = predict_all_patches(model, images).reshape(-1, model.n_classes)
    truth = np.repeat(labels, model.grid.n_positions)
    conf = confidence_batch(logits, args.method)
    correct = logits.argmax(axis=1) == truth
    report = ece(conf, correct, args.bins)
    payload = {"attribute": model.attribute_name, "method": ConfidenceMethod.parse(args.method).value,
               "n_bins": report.n_bins, "ece": report.ece, "samples": report.total,
               "accuracy": float(correct.mean()), "images": len(manifest),
               "patches_per_image": model.grid.n_positions}
    _write_json(ctx.path(args.out), payload)
    if args.bins_csv:
        write_reliability_csv(ctx.path(args.bins_csv), report)
    if args.figure:
        plotting.reliability_diagram(report, ctx.path(args.figure), model.attribute_name)
    print(f"ECE={report.ece:.6f} over {report.total} patches, {args.bins} bins")
    return 0


def cmd_augment(args, ctx: _Context) -> int:
    policy = AugmentationPolicy.load(args.policy)
    manifest = _nonempty(load_manifest(args.data), "augment")
    out = ctx.path(args.out)
    maps_src = Path(args.maps) if args.maps else None
    model = None
    if policy.scheme.is_general:
        if policy.general_map is None:
            raise ConfigError(f"scheme {policy.scheme.value} needs a 'general_map' pixel map in the policy")
        size = policy.general_map.values.shape[0]
    else:
        if maps_src is None:
            raise ConfigError(f"scheme {policy.scheme.value} needs --maps (a model checkpoint or map directory)")
        if maps_src.is_file():
            model = RegionClassifierModel.load(maps_src)
            size = model.grid.image_size
        elif maps_src.is_dir():
            size = None
        else:
            raise ConfigError(f"--maps {maps_src} is neither a checkpoint nor a directory")
    cache = out / "maps"
    (out / "images").mkdir(parents=True, exist_ok=True)
    cache.mkdir(parents=True, exist_ok=True)
    written = changed = 0
    for i, rec in enumerate(manifest.records):
        src = manifest.resolve(rec)
        raw = load_image(src)
        image = raw if size is None or raw.shape[1:] == (size, size) else load_image(src, size)
        specific = None
        if not policy.scheme.is_general:
            key = Path(rec.path).with_suffix(".ramp").name if maps_src.is_dir() else \
                Path(rec.path).with_suffix(".ramp").as_posix().replace("/", "__")
            cached = cache / key
            if model is None:
                specific = load_ramp(maps_src / key)
                if not isinstance(specific, PixelAttributionMap):
                    raise ConfigError(f"map {maps_src / key} is not a pixel map")
            elif cached.exists():
                specific = load_ramp(cached)
            else:
                specific = normalize01(pixel_map(region_map(model, image, args.method), model.grid))
                save_ramp(cached, specific)
            if specific.values.shape != image.shape[1:]:
                raise DimensionError(f"map for {rec.path} has shape {specific.values.shape}, image {image.shape[1:]}")
        elif policy.general_map.values.shape != image.shape[1:]:
            raise DimensionError(f"general map {policy.general_map.values.shape} does not match image {rec.path}")
        result = augment(image, policy, specific, epoch=0, seed=ctx.seed, image_index=i)
        dest = out / rec.path
        dest.parent.mkdir(parents=True, exist_ok=True)
        # Untouched images are copied verbatim so an empty mask leaves the files byte-identical.
        if result.shape == raw.shape and np.array_equal(result, raw) and src.suffix.lower() == ".png":
            shutil.copyfile(src, dest)
        else:
            save_image(dest, result)
            changed += 1
        written += 1
    copy = DatasetManifest(manifest.records, manifest.attributes, out)
    write_manifest(copy, out / "manifest.csv")
    _write_json(out / "policy.json", policy.to_json())
    print(f"augmented {written} images ({changed} modified) with {policy.scheme.value} q={policy.quantile:g}")
    return 0


def cmd_experiment(args, ctx: _Context) -> int:
    bias = BiasSpec.from_proportions(args.bias, args.scale)
    target_cfg = TargetTrainConfig(lr0=args.target_lr, batch_size=args.target_batch,
                                   epochs_noise=args.epochs_noise, epochs_mask=args.epochs_mask,
                                   epochs_plain=args.epochs_plain, dropout=args.dropout)
    region_cfg = RegionTrainConfig(lr0=args.region_lr, epochs=args.region_epochs, batch_size=args.region_batch,
                                   patches_per_image=args.region_patches_per_image,
                                   step_epochs=args.region_step_epochs, seed=ctx.seed)
    if args.data == "synthetic":
        spec = SyntheticSpec.from_dict(json.loads(Path(args.synth_spec).read_text())) if args.synth_spec \
            else SyntheticSpec(image_size=args.image_size or 32)
        need = max(bias.as_tuple()) + args.test_per_cell + args.pool_per_cell + bias.total // 4
        ds = generate_synthetic(spec, need, ctx.seed)
        images, manifest = ds.images, ds.manifest
        image_size = spec.image_size
        target, confounder = args.target or spec.target_name, args.confounder or spec.confounder_name
    else:
        manifest = load_manifest(args.data)
        if not args.image_size:
            raise ConfigError("--image-size is required with a manifest")
        image_size = args.image_size
        images = load_images(manifest, image_size)
        target, confounder = args.target, args.confounder
        if not target or not confounder:
            raise ConfigError("--target and --confounder are required with a manifest")
    grid = make_grid(*args.grid) if args.grid else make_grid(image_size, image_size // 4, 5)
    if grid.image_size != image_size:
        raise ConfigError(f"grid image size {grid.image_size} does not match image size {image_size}")
    config = ExperimentConfig(target, confounder, bias, grid, schemes=args.schemes, quantiles=args.quantiles,
                              seeds=args.seeds, seed=ctx.seed, test_per_cell=args.test_per_cell,
                              region_pool_per_cell=args.pool_per_cell, region=region_cfg, target=target_cfg,
                              method=args.method, threads=ctx.threads)
    print(f"experiment target={target} confounder={confounder} bias={list(bias.as_tuple())} "
          f"schemes={[s.value for s in config.schemes]} quantiles={list(config.quantiles)} seeds={args.seeds} "
          f"target_lr={target_cfg.lr0:g} gamma={target_cfg.gamma:g} batch={target_cfg.batch_size}")
    report = run_experiment(images, manifest, config)
    payload = report.to_dict()
    validate_report(payload)
    out = ctx.path(args.out)
    _write_json(out, payload)
    rows = quantile_sweep(report)
    sweep_csv = ctx.path(args.sweep_csv) if args.sweep_csv else out.with_name(out.stem + "_sweep.csv")
    write_sweep_csv(sweep_csv, rows)
    plotting.sweep_figure(rows, sweep_csv.with_suffix(".png"), report.arm("original").to_dict())
    for arm in report.arms:
        print(f"{arm.name:24s} acc={arm.median('accuracy'):.3f} g0={arm.median('accuracy_group0'):.3f} "
              f"g1={arm.median('accuracy_group1'):.3f} gap={arm.median('gap'):.3f}")
    log.info("experiment finished in %.1fs", report.runtime)
    return 0


# -- parser -----------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="seed for every stochastic step (default 0)")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads (default 1)")
    parser.add_argument("--out-dir", default=d("."), help="base directory for relative output paths")
    parser.add_argument("--log-level", default=d("WARNING"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchwork", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic confounder dataset")
    p.add_argument("--spec", help="synthetic spec JSON (defaults used when omitted)")
    p.add_argument("--per-cell", type=int, required=True, help="images per (target, confounder) cell")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-region", parents=[common], help="train a region classifier")
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--attr", required=True, help="attribute to classify")
    p.add_argument("--grid", type=_grid_arg, required=True, help="I,k,g (image size, patch size, grid side)")
    p.add_argument("--epochs", type=int, default=90)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--smoothing", type=float, default=0.1, help="label smoothing")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--patches-per-image", type=int, default=1)
    p.add_argument("--embed-dim", type=int, default=4)
    p.add_argument("--split", help="only use manifest records with this split tag")
    p.add_argument("--out", required=True, help="checkpoint path (.pwck)")
    p.set_defaults(func=cmd_train_region)

    p = sub.add_parser("attribute", parents=[common], help="region or pixel attribution map")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="single PNG image")
    src.add_argument("--data", help="manifest CSV; writes the dataset-mean map")
    p.add_argument("--split", default="train", help="split tag used with --data (default train)")
    p.add_argument("--method", choices=METHOD_CHOICES, default="neg-entropy")
    p.add_argument("--pixel", action="store_true", help="project to pixel space")
    p.add_argument("--normalize", action="store_true", help="min-max normalize the pixel map")
    p.add_argument("--resize", action="store_true", help="resize the image to the model grid size")
    p.add_argument("--batch", type=int, default=256, help="patches per forward pass")
    p.add_argument("--out", required=True, help="RAMP output path")
    p.add_argument("--csv", help="also write a CSV export")
    p.add_argument("--png", help="also write an 8-bit grayscale heat map")
    p.add_argument("--figure", help="also write a matplotlib figure")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("calibrate", parents=[common], help="ECE and reliability bins over all patches")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="only use manifest records with this split tag")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--method", choices=METHOD_CHOICES, default="top",
                   help="confidence compared with accuracy (default top)")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--bins-csv", help="reliability CSV path")
    p.add_argument("--figure", help="reliability diagram PNG path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("augment", parents=[common], help="write mask/noise augmented copies of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--policy", required=True, help="policy JSON")
    p.add_argument("--maps", help="region classifier checkpoint or directory of per-image pixel maps")
    p.add_argument("--method", choices=METHOD_CHOICES, default="neg-entropy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("experiment", parents=[common], help="original / balanced / regularized comparison")
    p.add_argument("--data", required=True, help="manifest CSV or 'synthetic'")
    p.add_argument("--synth-spec", help="synthetic spec JSON for --data synthetic")
    p.add_argument("--image-size", type=int)
    p.add_argument("--target")
    p.add_argument("--confounder")
    p.add_argument("--bias", type=_bias_arg, default=PAPER_BIAS,
                   help="cell proportions A&conf,A&!conf,B&conf,B&!conf (default 0,3,2,1)")
    p.add_argument("--scale", type=int, default=100)
    p.add_argument("--schemes", type=_schemes_arg, default=list(ALL_SCHEMES))
    p.add_argument("--quantiles", type=_float_list, default=[0.6, 0.7, 0.8, 0.95])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--grid", type=_grid_arg)
    p.add_argument("--method", choices=METHOD_CHOICES, default="neg-entropy")
    p.add_argument("--test-per-cell", type=int, default=100)
    p.add_argument("--pool-per-cell", type=int, default=100)
    p.add_argument("--target-lr", type=float, default=1e-5)
    p.add_argument("--target-batch", type=int, default=128)
    p.add_argument("--epochs-noise", type=int, default=20)
    p.add_argument("--epochs-mask", type=int, default=10)
    p.add_argument("--epochs-plain", type=int, default=10)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--region-lr", type=float, default=1e-3)
    p.add_argument("--region-epochs", type=int, default=90)
    p.add_argument("--region-step-epochs", type=int, default=40)
    p.add_argument("--region-batch", type=int, default=256)
    p.add_argument("--region-patches-per-image", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--sweep-csv", help="sweep CSV path (default <out>_sweep.csv)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    ctx = _Context(args)
    start = time.perf_counter()
    try:
        from threadpoolctl import threadpool_limits

        # BLAS stays single-threaded so results do not depend on --threads.
        with threadpool_limits(limits=1):
            code = args.func(args, ctx)
    except (ConfigError, DimensionError, FormatError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except (OSError, PatchworkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
