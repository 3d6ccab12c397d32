"""Command-line surface: bank, transfer, train-refiner, and eval verbs."""
from __future__ import annotations

import argparse
import csv
import shlex
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, engine, imaging, metrics, refbank, refiner
from .config import load_refiner_train_config, load_transfer_config
from .errors import MammostyleError
from .util import atomic_write_json, canonical_json, sha256_bytes, sha256_file

_IMAGE_SUFFIXES = (".png", ".dcm", ".dicom")


def _collect_images(directory: Path) -> list[Path]:
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES and p.is_file()
    )
    if not files:
        raise MammostyleError(f"no images found in {directory}")
    return files


def _cmd_bank_build(args) -> int:
    views = [args.view] * len(args.paths) if args.view else None
    bank = refbank.build_bank(list(args.paths), vendor=args.vendor, views=views)
    refbank.save_manifest(bank, args.out)
    print(f"bank: {len(bank.entries)} entries -> {args.out}")
    return 0


def _cmd_bank_list(args) -> int:
    bank = refbank.load_bank(args.bank)
    for e in bank.entries:
        print(f"{e.path}\t{e.image.view}\t{e.breast_area}")
    return 0


def _load_source(args) -> imaging.Mammogram:
    view = args.view or refbank.infer_view_from_name(args.source)
    return imaging.load_image(args.source, view=view, vendor=args.vendor)


def _cmd_transfer(args) -> int:
    config = load_transfer_config(args.config)
    bank = refbank.load_bank(args.bank)
    source = _load_source(args)
    model = None
    if args.refiner:
        model, _, _ = refiner.load_checkpoint(args.refiner)
    workers = 1 if args.serial else max(1, args.workers)
    result = engine.run_pipeline(
        source,
        bank,
        config,
        refiner_model=model,
        workers=workers,
        out_dir=args.out,
        save_scales=args.save_scales,
        source_path=str(args.source),
    )
    print(f"transfer: wrote {Path(args.out) / 'final.png'}")
    for scale, seconds in result.manifest["timings_s"].items():
        print(f"  {scale}: {seconds}s")
    return 0


def _cmd_train_refiner(args) -> int:
    cfg = load_refiner_train_config(args.config)
    targets_dir = Path(args.targets)
    triples_dir = Path(args.triples)
    target_paths = _collect_images(targets_dir)
    reals = [imaging.load_pixels(p)[0] for p in target_paths]

    triple_paths = []
    scale_dirs = [triples_dir / s for s in ("scale0", "scale1", "scale2")]
    for d in scale_dirs:
        if not d.is_dir():
            raise MammostyleError(
                f"triples dir must contain scale0/, scale1/, scale2/; missing {d}"
            )
    names = [p.name for p in _collect_images(scale_dirs[0])]
    triples = []
    for name in names:
        paths = [d / name for d in scale_dirs]
        for p in paths:
            if not p.is_file():
                raise MammostyleError(f"incomplete scale triple for {name}: missing {p}")
        triples.append(tuple(imaging.load_pixels(p)[0] for p in paths))
        triple_paths.extend(paths)

    resume_state = None
    model = refiner.RefinerModel(seed=cfg.seed)
    disc = refiner.build_discriminator(cfg.disc_kind, seed=cfg.seed)
    if args.resume:
        model, disc, resume_state = refiner.load_checkpoint(args.out)

    t0 = time.perf_counter()
    result = refiner.train_refiner(model, disc, reals, triples, cfg, resume_state=resume_state)
    refiner.save_checkpoint(args.out, result)
    curves_path = Path(args.out).with_suffix(".curves.csv")
    refiner.write_curves_csv(curves_path, result.curves)

    manifest = {
        "tool": "mammostyle",
        "version": __version__,
        "command": "train-refiner",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_digest": sha256_bytes(canonical_json(cfg.to_dict()).encode()),
        "inputs": {
            "targets": [{"path": str(p), "digest": sha256_file(p)} for p in target_paths],
            "triples": [{"path": str(p), "digest": sha256_file(p)} for p in triple_paths],
        },
        "outputs": {
            "checkpoint": str(args.out),
            "model_digest": result.model.digest(),
            "curves": str(curves_path),
        },
        "timings_s": {"total": round(time.perf_counter() - t0, 3)},
    }
    atomic_write_json(Path(args.out).with_suffix(".manifest.json"), manifest)
    print(f"train-refiner: {len(result.curves)} logged steps -> {args.out}")
    return 0


def _extractor_spec_from_config(path):
    return load_transfer_config(path).extractor


def _cmd_eval_gram_distance(args) -> int:
    spec = _extractor_spec_from_config(args.config)
    images = [Path(p) for p in args.images]
    refs = [Path(p) for p in args.refs]
    ref_pixels = [imaging.load_pixels(p)[0] for p in refs]
    rows = []
    for i, path in enumerate(images):
        pixels = imaging.load_pixels(path)[0]
        if args.pairwise:
            dist = metrics.gram_distance(pixels, [ref_pixels[i % len(ref_pixels)]], spec)
        else:
            dist = metrics.gram_distance(pixels, ref_pixels, spec)
        rows.append((str(path), dist))
    _write_csv(args.out, ["path", "gram_distance"], [(p, repr(d)) for p, d in rows])
    print(f"eval gram-distance: {len(rows)} rows -> {args.out}")
    return 0


def _cmd_eval_quality(args) -> int:
    scorer = metrics.QualityScorer(
        command=tuple(shlex.split(args.scorer)), timeout_s=args.timeout
    )
    rows = []
    for path in args.images:
        rows.append((str(path), metrics.score_quality(path, scorer)))
    _write_csv(args.out, ["path", "score"], [(p, repr(s)) for p, s in rows])
    manifest = {
        "tool": "mammostyle",
        "version": __version__,
        "command": "eval quality",
        "scorer": {"command": list(scorer.command), "digest": scorer.digest},
        "inputs": [{"path": str(p), "digest": sha256_file(p)} for p in args.images],
        "outputs": {str(args.out): sha256_file(args.out)},
    }
    atomic_write_json(Path(args.out).with_suffix(".manifest.json"), manifest)
    print(f"eval quality: {len(rows)} rows -> {args.out} (scorer digest {scorer.digest[:12]})")
    return 0


def _cmd_eval_ehm(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    max_value = 2**args.bit_depth - 1
    ref_pixels = imaging.load_pixels(args.reference)[0]
    dtype = np.uint8 if args.bit_depth == 8 else np.uint16
    ref_q = np.round(ref_pixels * max_value).astype(dtype)
    rows = []
    for src in args.sources:
        src_pixels = imaging.load_pixels(src)[0]
        src_q = np.round(src_pixels * max_value).astype(dtype)
        matched = metrics.ehm(src_q, ref_q)
        # Inline exactness check: output histogram must equal the reference's.
        ref_counts = np.bincount(_resized_ref(ref_q, src_q).ravel(), minlength=max_value + 1)
        out_counts = np.bincount(matched.ravel(), minlength=max_value + 1)
        if not np.array_equal(ref_counts, out_counts):
            raise MammostyleError(f"exact-histogram check failed for {src}")
        out_path = out_dir / (Path(src).stem + "_ehm.png")
        imaging.save_array(matched.astype(np.float64) / max_value, out_path, args.bit_depth)
        rows.append((str(src), str(out_path), "exact"))
    _write_csv(out_dir / "ehm.csv", ["source", "output", "histogram_check"], rows)
    print(f"eval ehm: {len(rows)} images -> {out_dir}")
    return 0


def _resized_ref(ref_q: np.ndarray, src_q: np.ndarray) -> np.ndarray:
    if ref_q.shape == src_q.shape:
        return ref_q
    from .tiler import resize_bilinear

    limit = np.iinfo(src_q.dtype).max
    resized = resize_bilinear(ref_q.astype(np.float64), *src_q.shape)
    return np.clip(np.round(resized), 0, limit).astype(src_q.dtype)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mammostyle",
        description="Multi-resolution, multi-reference style normalization for grayscale images.",
    )
    parser.add_argument("--version", action="version", version=f"mammostyle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    bank = sub.add_parser("bank", help="build or inspect a reference bank")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    b_build = bank_sub.add_parser("build", help="build a bank manifest from images")
    b_build.add_argument("paths", nargs="+")
    b_build.add_argument("--vendor", required=True)
    b_build.add_argument("--out", required=True)
    b_build.add_argument("--view", choices=("CC", "MLO"), help="force one view for all images")
    b_build.set_defaults(func=_cmd_bank_build)
    b_list = bank_sub.add_parser("list", help="print path/view/area for each entry")
    b_list.add_argument("--bank", required=True)
    b_list.set_defaults(func=_cmd_bank_list)

    tr = sub.add_parser("transfer", help="run the full style-transfer pipeline")
    tr.add_argument("--source", required=True)
    tr.add_argument("--bank", required=True)
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--view", choices=("CC", "MLO"))
    tr.add_argument("--vendor")
    tr.add_argument("--workers", type=int, default=1)
    tr.add_argument("--serial", action="store_true", help="force the bit-reproducible path")
    tr.add_argument("--save-scales", action="store_true")
    tr.add_argument("--refiner", help="trained refiner checkpoint")
    tr.set_defaults(func=_cmd_transfer)

    tref = sub.add_parser("train-refiner", help="adversarially train the fusion refiner")
    tref.add_argument("--targets", required=True, help="dir of target-style images")
    tref.add_argument("--triples", required=True, help="dir with scale0/ scale1/ scale2/")
    tref.add_argument("--config", required=True)
    tref.add_argument("--out", required=True, help="checkpoint path")
    tref.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    tref.set_defaults(func=_cmd_train_refiner)

    ev = sub.add_parser("eval", help="batch evaluation utilities")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)
    e_gram = ev_sub.add_parser("gram-distance", help="gram distance to a reference set")
    e_gram.add_argument("--images", nargs="+", required=True)
    e_gram.add_argument("--refs", nargs="+", required=True)
    e_gram.add_argument("--config", required=True)
    e_gram.add_argument("--out", required=True)
    e_gram.add_argument(
        "--pairwise", action="store_true", help="compare image i to ref i instead of the whole set"
    )
    e_gram.set_defaults(func=_cmd_eval_gram_distance)
    e_q = ev_sub.add_parser("quality", help="score images with an external scorer")
    e_q.add_argument("--scorer", required=True, help="command invoked with the image path appended")
    e_q.add_argument("--images", nargs="+", required=True)
    e_q.add_argument("--out", required=True)
    e_q.add_argument("--timeout", type=float, default=60.0)
    e_q.set_defaults(func=_cmd_eval_quality)
    e_ehm = ev_sub.add_parser("ehm", help="exact histogram matching baseline")
    e_ehm.add_argument("sources", nargs="+")
    e_ehm.add_argument("--reference", required=True)
    e_ehm.add_argument("--out-dir", required=True)
    e_ehm.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    e_ehm.set_defaults(func=_cmd_eval_ehm)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MammostyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
