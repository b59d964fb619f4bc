"""Command-line surface: dataset generation, training, evaluation,
inference, feature-consistency analysis, and the gradient-check suite.

Exit codes: 0 success, 1 usage error, 2 validation or check failure,
3 I/O error.  All outputs are timestamp-free so identical invocations
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import container, gradchecks, metrics, ppm, prior, scenes, training
from . import tensor as T
from .model import ModelConfig, forward, load_checkpoint, refiner_apply
from .tensor import Tensor

USAGE_ERROR = 1
CHECK_FAILURE = 2
IO_ERROR = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _print_config(name: str, options: dict) -> None:
    print(f"command: {name}")
    for key in sorted(options):
        print(f"  {key} = {options[key]}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ambientnorm", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seed", type=int, default=0, help="base scene seed")
    p.add_argument("--count", type=int, default=8, help="number of scenes")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--size", type=int, default=64, help="square scene size, divisible by 8")
    p.add_argument("--materials", type=int, default=8, help="Voronoi material count")
    p.add_argument("--lights", type=int, default=2, help="colored light count")
    p.add_argument("--ambient", type=float, default=0.6, help="flat ambient level of the ground truth")
    p.add_argument("--ppm", action="store_true", help="also write PPM previews")

    p = sub.add_parser("train", help="train from a config file",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", required=True, help="key = value training config file")
    p.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--out", required=True, help="directory for checkpoints and the log")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--refiner", action="store_true", help="apply the residual refiner")
    p.add_argument("--out", default="eval_results.tsv", help="per-scene TSV path")

    p = sub.add_parser("infer", help="restore one image",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="input image (.cndt or .ppm)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--mat", default=None, help="material map .cndt for the synthetic prior")
    p.add_argument("--features", default=None, help="precomputed feature container")
    p.add_argument("--refiner", action="store_true", help="apply the residual refiner")

    p = sub.add_parser("consistency", help="patch-wise feature consistency of input/GT pairs",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
    p.add_argument("--provider", default="synthetic", help="synthetic | rgb | file:DIR")
    p.add_argument("--patch", type=int, default=1, help="pooling cell size on the feature grid")
    p.add_argument("--prior-seed", type=int, default=7, help="synthetic provider seed")
    p.add_argument("--prior-dim", type=int, default=32, help="synthetic provider width")
    p.add_argument("--heatmap-out", default=None, help="directory for per-pair PPM heatmaps")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--module", default=None, help="substring filter on check names")
    p.add_argument("--seeds", type=int, default=None, help="override the per-check seed count")

    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    config = scenes.SceneConfig(
        height=args.size,
        width=args.size,
        num_materials=args.materials,
        num_lights=args.lights,
        ambient_level=args.ambient,
    )
    config.validate()
    manifest = scenes.build_dataset(args.seed, args.count, config, args.out, write_ppm=args.ppm)
    print(f"wrote {args.count} scenes, manifest {manifest}")
    return 0


def _cmd_train(args) -> int:
    train_cfg, model_cfg = training.load_config_file(args.config)
    data = scenes.load_dataset(args.data)
    train_scenes, val_scenes = training.split_dataset(data, train_cfg.val_fraction)
    provider = prior.SyntheticEncoder(model_cfg.prior_seed, dim=model_cfg.prior_dim)
    print(f"training on {len(train_scenes)} scenes, validating on {len(val_scenes)}")
    params, rows = training.train_loop(train_cfg, model_cfg, provider, train_scenes, val_scenes, args.out)
    final = rows[-1]
    print(f"done: final train loss {final['train_loss']:.6f}")
    if "val_psnr" in final:
        print(f"final val psnr {final['val_psnr']:.4f} dB, ssim {final['val_ssim']:.4f}")
    print(f"checkpoints and train_log.tsv in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params, model_cfg = load_checkpoint(args.ckpt)
    data = scenes.load_dataset(args.data)
    ids = scenes.scene_ids(args.data)
    provider = prior.SyntheticEncoder(model_cfg.prior_seed, dim=model_cfg.prior_dim)
    result = training.evaluate(params, model_cfg, provider, data, use_refiner=args.refiner, ids=ids)
    lines = ["scene\tpsnr\tssim"]
    for name, p, s in result.rows:
        lines.append(f"{name}\t{p:.6f}\t{s:.6f}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"mean_psnr={result.mean_psnr:.6f}")
    print(f"mean_ssim={result.mean_ssim:.6f}")
    print(f"per-scene rows in {args.out}")
    return 0


def _load_image(path: str) -> np.ndarray:
    if path.endswith(".ppm"):
        return ppm.read_ppm(path)
    _, arr = container.read_single(path)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise container.ContainerError(f"{path} does not hold a 3,H,W image (shape {arr.shape})")
    return arr


def _cmd_infer(args) -> int:
    params, model_cfg = load_checkpoint(args.ckpt)
    image = _load_image(args.input)

    feats = None
    if model_cfg.guidance_enabled:
        if args.features:
            feats = prior.load_features(args.features)
        else:
            mat_path = args.mat
            if mat_path is None and "_input" in Path(args.input).name:
                candidate = Path(args.input).with_name(
                    Path(args.input).name.replace("_input", "_mat").replace(".ppm", ".cndt")
                )
                if candidate.exists():
                    mat_path = str(candidate)
            if mat_path is None:
                print(
                    "error: this checkpoint uses prior guidance; pass --mat or --features",
                    file=sys.stderr,
                )
                return CHECK_FAILURE
            _, mat = container.read_single(mat_path)
            encoder = prior.SyntheticEncoder(model_cfg.prior_seed, dim=model_cfg.prior_dim)
            feats = encoder.encode(mat[None] if mat.ndim == 3 else mat)

    with T.no_grad():
        out = T.clip01(forward(Tensor(image[None]), feats, params, model_cfg))
        if args.refiner:
            out = refiner_apply(out, params)
    restored = out.data[0]
    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    container.write_single(out_prefix.with_suffix(".cndt"), "output", restored)
    ppm.write_ppm(out_prefix.with_suffix(".ppm"), restored)
    print(f"wrote {out_prefix.with_suffix('.cndt')} and {out_prefix.with_suffix('.ppm')}")
    return 0


def _consistency_features(args, scene, scene_id, data_dir):
    if args.provider == "synthetic":
        enc = prior.SyntheticEncoder(args.prior_seed, dim=args.prior_dim)
        return enc.encode(scene.material_map[None]), enc.encode(scene.material_map[None])
    if args.provider == "rgb":
        enc = prior.RgbPatchEncoder()
        return enc.encode(scene.input[None]), enc.encode(scene.gt[None])
    if args.provider.startswith("file:"):
        feat_dir = Path(args.provider[5:])
        fin = prior.load_features(feat_dir / f"{scene_id}_input.feat.cndt")
        fgt = prior.load_features(feat_dir / f"{scene_id}_gt.feat.cndt")
        return fin, fgt
    raise ValueError(f"unknown provider '{args.provider}' (use synthetic, rgb, or file:DIR)")


def _cmd_consistency(args) -> int:
    data = scenes.load_dataset(args.data)
    ids = scenes.scene_ids(args.data)
    all_sims = []
    per_scene_means = []
    heat_dir = Path(args.heatmap_out) if args.heatmap_out else None
    if heat_dir:
        heat_dir.mkdir(parents=True, exist_ok=True)

    for scene_id, scene in zip(ids, data):
        feats_in, feats_gt = _consistency_features(args, scene, scene_id, args.data)
        scene_sims = []
        for (lid, fa), (_, fb) in zip(feats_in.layers, feats_gt.layers):
            report = metrics.patch_consistency(fa.data[0], fb.data[0], args.patch)
            scene_sims.append(report.per_patch_sims)
            if heat_dir:
                ppm.write_ppm(heat_dir / f"{scene_id}_layer{lid}.ppm", report.heatmap())
        scene_sims = np.concatenate(scene_sims)
        all_sims.append(scene_sims)
        per_scene_means.append(float(scene_sims.mean()))

    pooled = np.concatenate(all_sims)
    k = max(1, int(np.ceil(0.1 * pooled.size)))
    worst = float(np.sort(pooled)[:k].mean())
    print(f"pairs={len(data)}")
    print(f"patches={pooled.size}")
    print(f"P_macro={float(np.mean(per_scene_means)):.6f}")
    print(f"P_micro={float(pooled.mean()):.6f}")
    print(f"W={worst:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradchecks.run_suite(only=args.module, seeds=args.seeds)
    if not results:
        print(f"no checks match '{args.module}'", file=sys.stderr)
        return USAGE_ERROR
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  {status}")
        failed = failed or not r.passed
    return CHECK_FAILURE if failed else 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    _print_config(args.command, {k: v for k, v in vars(args).items() if k != "command"})
    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "infer": _cmd_infer,
        "consistency": _cmd_consistency,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (OSError, container.ContainerError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return IO_ERROR
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CHECK_FAILURE


if __name__ == "__main__":
    sys.exit(main())
