"""Command-line entry point: gtgen, train, predict, eval, params, synth, demo-dilated."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats, gtgen, metrics, model, train
from .errors import CorruptFileError, DivergenceError, ParseError, WeightShapeError
from .synth import SyntheticSceneSpec, generate_synthetic_scene
from .tensor import (ConvSpec, ConvWeights, bilinear_resize, conv2d_forward,
                     maxpool2x2_forward)

EXIT_ARGS, EXIT_IO, EXIT_PARSE, EXIT_DIVERGED = 2, 3, 4, 5

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)


def load_scene(rec: formats.SceneRecord):
    """Image tensor and points, both masked by the scene ROI when one is given."""
    image = formats.load_image(rec.image_path)
    points = formats.parse_annotations(rec.annotation_path)
    h, w = image.shape[-2:]
    roi = None
    if rec.roi_path is not None:
        roi = formats.parse_roi(rec.roi_path)
        if roi.shape != (h, w):
            raise ParseError(f"{rec.roi_path}: ROI {roi.shape} does not match image {(h, w)}")
        image, points = gtgen.apply_roi_mask(image, roi, points)
    return image, points, roi


def scene_density(rec, policy):
    image, points, roi = load_scene(rec)
    h, w = image.shape[-2:]
    return image, points, roi, gtgen.generate_density_map(h, w, points, policy)


def _policy(manifest: formats.DatasetManifest, override=None):
    return gtgen.parse_policy(override or manifest.policy)


def cmd_gtgen(args):
    manifest = formats.read_manifest(args.manifest)
    policy = _policy(manifest, args.policy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in manifest.scenes:
        _, points, _, density = scene_density(rec, policy)
        formats.save_density_map(density, out / f"{rec.name}.csdm")
        print(f"{rec.name}\t{len(points)}\t{density.sum():.4f}")
    return 0


def cmd_train(args):
    config = model.build_config(args.config)
    manifest = formats.read_manifest(args.manifest)
    policy = _policy(manifest, args.policy)
    factor = args.downsample or 2 ** config.pool_count
    tc = train.TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                           seed=args.seed, checkpoint_every=args.checkpoint_every,
                           target_downsample=factor)
    dataset = []
    for idx, rec in enumerate(manifest.scenes):
        image, points, _, density = scene_density(rec, policy)
        dataset += train.samples_from_scene(image, points, density, args.seed + idx, factor)
    params = model.load_weights(args.init, config) if args.init else None
    out = Path(args.out)
    result = train.train_loop(config, tc, dataset, params, checkpoint_prefix=out.with_suffix(""))
    model.save_weights(result.params, out)
    for epoch, loss in enumerate(result.losses, start=1):
        print(f"{epoch}\t{loss:.6g}")
    return 0


def cmd_predict(args):
    config = model.build_config(args.config)
    params = model.load_weights(args.weights, config)
    image = formats.load_image(args.image, rgb=config.input_channels == 3)
    density = model.predict_density(config, params, image).astype(np.float64)
    if args.upsample8:
        h, w = density.shape
        # divide by 64 so the upsampled map still sums to the estimated count
        density = bilinear_resize(density[None, None], 8 * h, 8 * w)[0, 0] / 64.0
    formats.save_density_map(density, args.out)
    if args.visual:
        formats.export_visual(density, args.visual)
    print(f"count\t{metrics.estimated_count(density):.4f}")
    return 0


def _match_resolution(pred, gt_full, roi):
    """GT (and ROI weight) on the prediction's grid."""
    if pred.shape == gt_full.shape:
        return gt_full, (None if roi is None else roi.astype(np.float64))
    factor = max(1, round(gt_full.shape[0] / pred.shape[0]))
    ph, pw = pred.shape
    gt = gtgen.downsample_density_map(gt_full, factor)[:ph, :pw]
    weight = None
    if roi is not None:
        weight = (gtgen.downsample_density_map(roi.astype(np.float64), factor) / factor ** 2)[:ph, :pw]
    if gt.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} cannot be aligned with ground truth {gt_full.shape}")
    return gt, weight


def cmd_eval(args):
    manifest = formats.read_manifest(args.manifest)
    policy = _policy(manifest, args.policy)
    if args.pred_dir is None:
        if not args.weights:
            raise ValueError("eval needs --weights (with --config) or --pred-dir")
        config = model.build_config(args.config)
        params = model.load_weights(args.weights, config)
    pairs, quality = [], []
    for rec in manifest.scenes:
        image, points, roi, gt_full = scene_density(rec, policy)
        if args.pred_dir is not None:
            pred = formats.load_density_map(Path(args.pred_dir) / f"{rec.name}.csdm").astype(np.float64)
        else:
            pred = model.predict_density(config, params, image).astype(np.float64)
        gt, weight = _match_resolution(pred, gt_full, roi)
        if weight is not None:
            pred = pred * weight
        pairs.append(metrics.EvalPair(pred, gt, float(len(points))))
        if args.quality:
            h, w = gt_full.shape
            quality.append(metrics.quality_preprocess(pred, gt_full, h, w))

    print(f"scenes\t{len(pairs)}")
    print(f"MAE\t{metrics.mae(pairs):.2f}")
    print(f"MSE\t{metrics.mse(pairs):.2f}")
    if args.game is not None:
        for level in range(args.game + 1):
            print(f"GAME({level})\t{metrics.game_mean(pairs, level):.2f}")
    if args.quality:
        psnrs = [metrics.psnr(p, g) for p, g in quality]
        ssims = [metrics.ssim(p, g) for p, g in quality]
        print(f"PSNR\t{np.mean(psnrs):.2f}")
        print(f"SSIM\t{np.mean(ssims):.4f}")
    return 0


def cmd_params(args):
    config = model.build_config(args.config)
    print(model.param_count(config, include_bias=args.include_bias))
    return 0


def _load_spec_json(arg: str) -> dict:
    p = Path(arg)
    if p.exists():
        return json.loads(p.read_text())
    if arg.lstrip().startswith("{"):
        return json.loads(arg)
    raise FileNotFoundError(f"spec file not found: {arg}")


def cmd_synth(args):
    try:
        base = SyntheticSceneSpec.from_dict(_load_spec_json(args.spec_json))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.spec_json}: invalid JSON ({exc})") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(args.n):
        spec = SyntheticSceneSpec(base.height, base.width, base.count_range,
                                  base.blob_radius_range, base.seed + i)
        image, points = generate_synthetic_scene(spec)
        img_path, ann_path = out / f"scene_{i:03d}.ppm", out / f"scene_{i:03d}.csv"
        formats.save_image(image, img_path)
        formats.save_annotations(points, ann_path)
        records.append(formats.SceneRecord(img_path, ann_path))
    manifest_path = out / "manifest.txt"
    formats.write_manifest(formats.DatasetManifest(args.policy, records), manifest_path)
    print(manifest_path)
    return 0


def dilated_demo(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool + Sobel + bilinear x2 versus a Sobel kernel dilated by 2.

    Both outputs have the input's spatial size.
    """
    h, w = gray.shape[-2:]
    sobel = ConvWeights(SOBEL_X[None, None].copy(), np.zeros(1, dtype=np.float32))
    pooled, _ = maxpool2x2_forward(gray)
    path_a = bilinear_resize(conv2d_forward(pooled, ConvSpec(1, 1, 3, 1), sobel), h, w)
    path_b = conv2d_forward(gray, ConvSpec(1, 1, 3, 2), sobel)
    return path_a, path_b


def cmd_demo_dilated(args):
    gray = formats.load_image(args.image, rgb=False)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, result in zip(("path_a", "path_b"), dilated_demo(gray)):
        fmap = result[0, 0]
        formats.save_density_map(fmap, out / f"{name}.csdm")
        formats.export_visual(np.abs(fmap), out / f"{name}.pgm")
        print(f"{name}\t{fmap.shape[0]}x{fmap.shape[1]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gtgen", help="write a ground-truth density map per manifest scene")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="adaptive | fixed:SIGMA | preset name (overrides manifest)")
    p.set_defaults(func=cmd_gtgen)

    p = sub.add_parser("train", help="augment, train and save weights")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--downsample", type=int, help="target block size (default: network stride)")
    p.add_argument("--init", help="CSRW file to start from instead of Gaussian init")
    p.add_argument("--policy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="density map for one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--visual")
    p.add_argument("--upsample8", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="MAE/MSE (and optionally GAME, PSNR/SSIM) over a manifest")
    p.add_argument("--weights")
    p.add_argument("--config", default="B")
    p.add_argument("--pred-dir", help="evaluate stored <scene>.csdm maps instead of running a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--game", type=int, metavar="L")
    p.add_argument("--quality", action="store_true")
    p.add_argument("--policy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter count of a built-in config")
    p.add_argument("--config", required=True)
    p.add_argument("--include-bias", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--spec-json", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", default="geometry-adaptive")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("demo-dilated", help="pool+conv+upsample vs dilated conv on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_demo_dilated)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGED, exc
    except (CorruptFileError, ParseError, WeightShapeError) as exc:
        code, msg = EXIT_PARSE, exc
    except OSError as exc:
        code, msg = EXIT_IO, exc
    except ValueError as exc:
        code, msg = EXIT_ARGS, exc
    print(f"csrnet: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
