"""``win-denoise`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data error (unreadable
image, manifest or checkpoint), 3 runtime failure (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_checkpoint
from .data import ManifestError, add_awgn, noise_seed, read_manifest
from .images import ImageError, load_gray, save_gray
from .metrics import format_sigma, hist_distance, histogram, psnr, ssim
from .models import ConfigError, denoise
from .trainer import (
    TrainingDivergedError,
    behavior_curve,
    curve_to_csv,
    evaluate,
    load_train_config,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
PROG = "win-denoise"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's default exit status is 2; ours is 1
        raise UsageError(message)


def _sigma_list(text: str) -> list[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("sigma list is empty")
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("sigmas must be non-negative")
    return values


def _load_image(path: Path) -> np.ndarray:
    try:
        return load_gray(path)
    except (OSError, ImageError) as exc:
        raise DataError(f"{path}: {getattr(exc, 'strerror', None) or exc}") from None


def _load_images(manifest: Path) -> list[tuple[str, np.ndarray]]:
    try:
        paths = read_manifest(manifest)
    except ManifestError as exc:
        raise DataError(str(exc)) from None
    return [(p.stem, _load_image(p)) for p in paths]


def _load_ckpt(path: Path):
    try:
        return read_checkpoint(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_noise(args) -> None:
    images = _load_images(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = read_manifest(args.input)
    for (name, img), src in zip(images, paths):
        pair = add_awgn(img, args.sigma, noise_seed(args.seed, name, args.sigma))
        ext = src.suffix if src.suffix.lower() in (".png", ".pgm") else ".pgm"
        save_gray(pair.noisy, out / f"{name}_s{format_sigma(args.sigma)}{ext}")


def cmd_train(args) -> None:
    try:
        cfg = load_train_config(args.config)
    except OSError as exc:
        raise UsageError(f"{args.config}: {exc.strerror or exc}") from None
    out_dir = args.out or cfg.out_dir
    if out_dir is None:
        raise UsageError("no output directory: set out_dir in the config or pass --out")
    if cfg.corpus is None:
        raise UsageError("config has no corpus manifest")
    corpus = [img for _, img in _load_images(Path(cfg.corpus))]
    eval_images = _load_images(Path(cfg.eval_manifest)) if cfg.eval_manifest else None
    out = Path(out_dir)
    try:
        _, trainlog = train(cfg, corpus, eval_images=eval_images, out_dir=out)
    except TrainingDivergedError as exc:
        _append_log(out, exc.log.to_csv())
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _append_log(out, trainlog.to_csv())


def _append_log(out: Path, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.csv", "a", encoding="utf-8") as fh:
        fh.write(text)


def cmd_denoise(args) -> None:
    ckpt = _load_ckpt(args.ckpt)
    img = _load_image(args.input)
    save_gray(np.clip(denoise(ckpt.model, img), 0.0, 1.0), args.out)


def cmd_eval(args) -> None:
    ckpt = _load_ckpt(args.ckpt)
    images = _load_images(args.manifest)
    method = args.method or Path(args.ckpt).stem
    try:
        report = evaluate(
            ckpt, images, args.sigmas, seed=args.seed, method=method, include_noisy=args.include_noisy
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _write_text(Path(args.out), report.to_csv())
    if args.curve:
        _write_text(Path(args.curve), curve_to_csv(behavior_curve(report, method)))


def cmd_hist(args) -> None:
    a = _load_image(args.a)
    b = _load_image(args.b)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sigma", "distance"])
    for sigma in args.sigmas:
        na = add_awgn(a, sigma, noise_seed(args.seed, Path(args.a).stem, sigma)).noisy
        nb = add_awgn(b, sigma, noise_seed(args.seed, Path(args.b).stem, sigma)).noisy
        w.writerow([format_sigma(sigma), repr(hist_distance(histogram(na), histogram(nb)))])
    _write_text(Path(args.out), buf.getvalue())


def cmd_panel(args) -> None:
    clean = _load_image(args.clean)
    name = Path(args.clean).stem
    ckpt_paths = [Path(p) for p in args.ckpts.split(",") if p.strip()]
    if not ckpt_paths:
        raise UsageError("--ckpts needs at least one checkpoint")
    ckpts = [_load_ckpt(p) for p in ckpt_paths]
    noisy = add_awgn(clean, args.sigma, noise_seed(args.seed, name, args.sigma)).noisy
    panels = [("clean", clean), ("noisy", noisy)]
    panels += [(p.stem, np.clip(denoise(c.model, noisy), 0.0, 1.0)) for p, c in zip(ckpt_paths, ckpts)]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["panel", "psnr_db", "ssim"])
    for label, img in panels:
        w.writerow([label, repr(psnr(clean, img)), repr(ssim(clean, img))])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_gray(np.concatenate([np.clip(img, 0.0, 1.0) for _, img in panels], axis=1), out)
    _write_text(out.with_suffix(".txt"), buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="WIN5-family grayscale denoising toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("noise", help="write AWGN-corrupted copies of every image in a manifest")
    p.add_argument("--in", dest="input", type=Path, required=True, help="manifest: one image path per line")
    p.add_argument("--sigma", type=float, required=True, help="noise std on the 0-255 scale")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory; files are <stem>_s<SIGMA>.<ext>")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", type=Path, required=True, help="training config JSON (see README)")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides out_dir in the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one image with a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help=".winckpt checkpoint")
    p.add_argument("--in", dest="input", type=Path, required=True, help="noisy input image (PGM or PNG)")
    p.add_argument("--out", type=Path, required=True, help="output image; .png writes PNG, otherwise PGM")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a test manifest at several noise levels")
    p.add_argument("--ckpt", type=Path, required=True, help=".winckpt checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="test images, one path per line")
    p.add_argument("--sigmas", type=_sigma_list, default=[10.0, 30.0, 50.0, 70.0], help="comma list (default 10,30,50,70)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="report CSV")
    p.add_argument("--method", default=None, help="method label in the report (default: checkpoint file stem)")
    p.add_argument("--include-noisy", action="store_true", help="also report the noisy input as method 'noisy'")
    p.add_argument("--curve", type=Path, default=None, help="also write the sigma,psnr_db behavior curve CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hist", help="histogram distance between two images' noisy versions per sigma")
    p.add_argument("--a", type=Path, required=True, help="first image")
    p.add_argument("--b", type=Path, required=True, help="second image")
    p.add_argument("--sigmas", type=_sigma_list, default=[10.0, 50.0], help="comma list (default 10,50)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="CSV with columns sigma,distance")
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("panel", help="side-by-side [clean | noisy | denoised...] image plus PSNR/SSIM sidecar")
    p.add_argument("--clean", type=Path, required=True, help="clean reference image")
    p.add_argument("--ckpts", required=True, help="comma-separated checkpoints, one panel each")
    p.add_argument("--sigma", type=float, required=True, help="noise std on the 0-255 scale")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="panel image; the sidecar is written next to it as .txt")
    p.set_defaults(func=cmd_panel)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"{PROG}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"{PROG}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"{PROG}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
