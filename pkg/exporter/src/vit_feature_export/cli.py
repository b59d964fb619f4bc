"""Command line for batch feature export.

Exit codes: 0 success, 1 usage error, 2 export failure (bad weights,
unreadable image, shape problems).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .exporter import DEFAULT_LAYERS, ExportError, ExportJob, export_features


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vit-feature-export",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--images", nargs="+", required=True, help="input PPM images")
    parser.add_argument("--out", required=True, help="output directory for .feat.cndt files")
    parser.add_argument("--weights", required=True, help="model name or local checkpoint directory")
    parser.add_argument("--dim", type=int, default=32, help="projected channel width")
    parser.add_argument("--seed", type=int, default=0, help="seed of the fixed random projection")
    parser.add_argument("--layers", default=",".join(str(l) for l in DEFAULT_LAYERS),
                        help="comma-separated encoder layer ids")
    parser.add_argument("--input-size", type=int, default=224, help="square resize fed to the encoder")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    job = ExportJob(
        images=[Path(p) for p in args.images],
        weights=args.weights,
        out_dir=Path(args.out),
        dim=args.dim,
        seed=args.seed,
        layers=tuple(int(v) for v in args.layers.split(",")),
        input_size=args.input_size,
    )
    print(f"exporting {len(job.images)} image(s) -> {job.out_dir} "
          f"(dim={job.dim}, seed={job.seed}, layers={job.layers}, input_size={job.input_size})")
    try:
        written = export_features(job)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
