"""Command-line entry point: ``paintmatch {segment,precompute,train,colorize,eval}``.

Exit codes: 0 success, 1 data error, 2 usage error. Every successful run
writes a JSON run manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .cache import SemanticCache, precompute_semantic_features, write_json_atomic
from .correspondence import NoReferences
from .data import IMAGE_SUFFIXES, DatasetError, ingest_dataset, read_rgb
from .encoders import BackboneUnavailable, Dinov2Backbone, ProceduralBackbone
from .metrics import EvaluationError, run_consecutive_protocol, run_keyframe_protocol
from .model import CheckpointError, ColorizeOptions, Colorizer, Drawing
from .segmentation import (
    DEFAULT_LINE_THRESHOLD,
    SegmentationError,
    extract_segments,
    load_segment_map,
    palette_with_background,
    save_segment_map,
    unify_line_colors,
)
from .train import NonFiniteLoss, TrainConfig, dump_config_file, load_config_file, train

log = logging.getLogger("paintmatch")

ENV_BACKBONE = "PAINTMATCH_BACKBONE"  # path to the DINOv2 weight directory
ENV_CACHE = "PAINTMATCH_CACHE"  # semantic feature cache directory
MANIFEST_NAME = "run_manifest.json"

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
DATA_ERRORS = (DatasetError, SegmentationError, BackboneUnavailable, CheckpointError, EvaluationError,
               NoReferences, NonFiniteLoss, OSError, ValueError)


class UsageError(Exception):
    pass


# -- run manifest ----------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_checksums(paths) -> dict[str, str]:
    """sha256 per input file; a directory gets one digest over its sorted file tree."""
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = _sha256_file(p)
        elif p.is_dir():
            h = hashlib.sha256()
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                h.update(str(f.relative_to(p)).encode())
                h.update(_sha256_file(f).encode())
            out[str(p)] = h.hexdigest()
    return out


def source_revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True,
                             timeout=10, check=True).stdout.strip()
        dirty = subprocess.run(["git", "status", "--porcelain"], cwd=here, capture_output=True, text=True,
                               timeout=10).stdout.strip()
        return rev + ("+dirty" if dirty else "")
    except (OSError, subprocess.SubprocessError):
        return f"paintmatch {__version__}"


class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = argv
        self.config: dict = {}
        self.seed = None
        self.inputs: list = []
        self.outputs: list[str] = []
        self.start = time.time()

    def write(self, path: Path) -> Path:
        payload = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "revision": source_revision(),
            "inputs": input_checksums(self.inputs),
            "outputs": [str(o) for o in self.outputs],
            "duration_s": round(time.time() - self.start, 3),
        }
        write_json_atomic(path, payload)
        return path


# -- shared resources --------------------------------------------------------------


def make_backbone(args):
    if args.backbone == "procedural":
        return ProceduralBackbone(seed=args.backbone_seed)
    weights = args.weights or os.environ.get(ENV_BACKBONE)
    return Dinov2Backbone(weights, device=args.device)


def make_cache(args, root=None, need_backbone: bool = True) -> SemanticCache:
    cache_dir = args.cache or os.environ.get(ENV_CACHE)
    backbone = None
    try:
        backbone = make_backbone(args)
    except BackboneUnavailable:
        if need_backbone:
            raise
        log.info("no backbone; relying on cached features")
    return SemanticCache(cache_dir, backbone, root=root, line_threshold=args.line_threshold)


def _resources(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", choices=("dinov2", "procedural"), default="dinov2",
                   help="semantic feature source (procedural is a weight-free stand-in for tests)")
    p.add_argument("--weights", help=f"DINOv2 weight directory (default ${ENV_BACKBONE})")
    p.add_argument("--backbone-seed", type=int, default=0)
    p.add_argument("--device", default="cpu")
    p.add_argument("--cache", help=f"semantic feature cache directory (default ${ENV_CACHE})")


def _threshold(p: argparse.ArgumentParser) -> None:
    p.add_argument("--line-threshold", type=int, default=DEFAULT_LINE_THRESHOLD)


def _manifest_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, help="run manifest path (default next to the outputs)")


# -- segment -------------------------------------------------------------------------


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_segment(args, run: RunManifest) -> int:
    images = _list_images(args.input)
    if not images:
        print("no inputs", file=sys.stderr)
        return EXIT_DATA
    args.output.mkdir(parents=True, exist_ok=True)
    run.config = {"line_threshold": args.line_threshold, "mono": args.mono,
                  "gt": str(args.gt) if args.gt else None}
    run.inputs = [args.input] + ([args.gt] if args.gt else [])
    errors = []
    for path in images:
        try:
            line = read_rgb(path)
            if args.mono:
                line = unify_line_colors(line, args.line_threshold)
            seg = extract_segments(line, args.line_threshold)
            palette = None
            if args.gt is not None:
                gt_path = args.gt / path.name
                if gt_path.exists():
                    palette = palette_with_background(read_rgb(gt_path), seg)
            png, sidecar = save_segment_map(args.output / f"{path.stem}.png", seg, palette)
            run.outputs += [png, sidecar]
        except (OSError, SegmentationError, ValueError) as exc:
            errors.append({"file": str(path), "error": str(exc)})
            print(f"error: {path}: {exc}", file=sys.stderr)
    if errors:
        write_json_atomic(args.output / "errors.json", errors)
    run.write(args.manifest or args.output / MANIFEST_NAME)
    return EXIT_DATA if errors else EXIT_OK


# -- precompute ----------------------------------------------------------------------


def cmd_precompute(args, run: RunManifest) -> int:
    index = ingest_dataset(args.root)
    cache = make_cache(args, root=args.root)
    if cache.dir is None:
        raise UsageError(f"a cache directory is required (--cache or ${ENV_CACHE})")
    run.config = {"backbone": args.backbone, "split": args.split, "mono": args.mono, "cache": str(cache.dir)}
    run.inputs = [args.root]
    manifest = precompute_semantic_features(index, cache, args.split, mono=args.mono)
    print(f"{len(manifest['entries'])} cached feature grids ({cache.computed} computed) in {cache.dir}")
    run.outputs = [cache.dir / "manifest.json"]
    run.write(args.manifest or cache.dir / MANIFEST_NAME)
    return EXIT_OK


# -- train ---------------------------------------------------------------------------

_TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "lr": float, "optimizer": str, "train_size": int, "max_offset": int,
    "refs_per_step": int, "seed": int, "lambda_ce": float, "lambda_dc": float, "temperature": float,
    "consistency_scale": float, "pooling_normalize": str, "split": str, "keep_checkpoints": int,
    "max_steps": int,
}


def resolve_train_config(args) -> TrainConfig:
    """Config file values, overridden by any flag given on the command line."""
    values = load_config_file(args.config) if args.config else {}
    for key in _TRAIN_FLAGS:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.train_size == 0:
        values["train_size"] = None
    if args.zero_offset is not None:
        values["allow_zero_offset"] = args.zero_offset
    if args.deterministic is not None:
        values["deterministic"] = args.deterministic
    if args.line_threshold is not None:
        values["line_threshold"] = args.line_threshold
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args, run: RunManifest) -> int:
    config = resolve_train_config(args)
    args.line_threshold = config.line_threshold
    index = ingest_dataset(args.root)
    cache = make_cache(args, root=args.root, need_backbone=False)
    if cache.backbone is None and not all(cache.valid(cache.key_for(r.line_path))
                                          for r in index.images(config.split)):
        raise BackboneUnavailable("cache incomplete for the training split")
    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    dump_config_file(config, out / "config.yaml")
    run.config = {**config.to_dict(), "backbone": args.backbone}
    run.seed = config.seed

    def report(step, rec, _model):
        if step % args.log_every == 0:
            log.info("epoch %d step %d loss %.5f", rec["epoch"], step, rec["loss"])

    ckpt = train(config, index, cache, out_dir=out, on_step=report)
    final = ckpt.save(out / "final.pt")
    run.inputs = [args.root] + ([args.config] if args.config else [])
    run.outputs = sorted(out.glob("epoch_*.pt")) + [final, out / "losses.json", out / "config.yaml"]
    run.write(args.manifest or out / MANIFEST_NAME)
    print(f"trained {ckpt.step} steps ({config.arm}); checkpoint {final}")
    return EXIT_OK


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of TrainConfig keys")
    for key, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), type=typ, default=None)
    p.add_argument("--zero-offset", dest="zero_offset", action=argparse.BooleanOptionalAction, default=None,
                   help="allow the target itself as its reference")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--line-threshold", type=int, default=None)
    p.add_argument("--log-every", type=int, default=50)


# -- colorize ------------------------------------------------------------------------


def _drawing(line_path: Path, gt_path: Path | None, seg_path: Path | None, threshold: int) -> Drawing:
    line = read_rgb(line_path)
    palette = None
    if seg_path is not None:
        seg, palette = load_segment_map(seg_path)
    else:
        seg = extract_segments(line, threshold)
    if gt_path is not None:
        palette = palette_with_background(read_rgb(gt_path), seg)
    return Drawing(line, seg, palette, line_path)


def _options(args) -> ColorizeOptions:
    return ColorizeOptions(mono=args.mono, pooling=args.pooling, zero_shot=args.zero_shot,
                           line_threshold=args.line_threshold)


def _colorizer(args, cache: SemanticCache) -> Colorizer:
    if args.checkpoint is None:
        if not args.zero_shot:
            raise UsageError("--checkpoint is required unless --zero-shot is set")
        return Colorizer(cache)
    return Colorizer.from_checkpoint(args.checkpoint, cache)


def cmd_colorize(args, run: RunManifest) -> int:
    if not args.ref:
        raise UsageError("at least one --ref LINE GT is required")
    options = _options(args)
    cache = make_cache(args)
    model = _colorizer(args, cache)
    target = _drawing(args.target, None, args.target_seg, args.line_threshold)
    refs = [_drawing(Path(line), Path(gt), None, args.line_threshold) for line, gt in args.ref]
    assignment, pool = model.colorize(target, refs, options)
    out = args.output
    out.parent.mkdir(parents=True, exist_ok=True)
    assignment.save_png(out, target.seg, target.line)
    json_path = out.with_suffix(".json")
    assignment.save_json(json_path, pool)
    run.config = {"mono": args.mono, "pooling": args.pooling, "zero_shot": args.zero_shot,
                  "line_threshold": args.line_threshold, "backbone": args.backbone,
                  "checkpoint": str(args.checkpoint) if args.checkpoint else None}
    run.inputs = [args.target] + [Path(p) for pair in args.ref for p in pair] + \
        ([args.checkpoint] if args.checkpoint else []) + ([args.target_seg] if args.target_seg else [])
    run.outputs = [out, json_path]
    run.write(args.manifest or out.with_suffix(".manifest.json"))
    print(f"{len(assignment)} segments colored from {len(refs)} reference(s): {out}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------


def _parse_shots(value: str):
    if value == "max":
        return "max"
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("shots must be a positive integer or 'max'")
    if n < 1:
        raise argparse.ArgumentTypeError("shots must be >= 1")
    return n


def cmd_eval(args, run: RunManifest) -> int:
    protocol = args.protocol
    refs = args.refs
    if protocol == "keyframe" and refs is not None:
        raise UsageError("--refs applies to the consecutive and clipwise protocols")
    if protocol == "clipwise":
        if refs not in (None, "first"):
            raise UsageError("--protocol clipwise always uses the first frame as reference")
        refs = "first"
    index = ingest_dataset(args.root)
    clips = index.split(args.split)
    if not clips:
        raise DatasetError(f"no clips in split {args.split!r}")
    if protocol != "keyframe" and args.shots is not None and not all(c.sheets for c in clips):
        raise UsageError(f"--shots with --protocol {protocol} needs design sheets for every clip")
    options = _options(args)
    cache = make_cache(args, root=args.root, need_backbone=False)
    model = _colorizer(args, cache)
    if protocol == "keyframe":
        report = run_keyframe_protocol(index, model, args.shots or 1, args.split, options)
    else:
        report = run_consecutive_protocol(index, model, refs or "-1", args.shots or 0, args.split, options)
    out = args.output
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    text = report.to_text()
    out.with_suffix(".txt").write_text(text + "\n")
    print(text)
    for w in report.warnings:
        log.warning(w)
    run.config = {**report.protocol, "backbone": args.backbone, "line_threshold": args.line_threshold,
                  "checkpoint": str(args.checkpoint) if args.checkpoint else None}
    run.inputs = [args.root] + ([args.checkpoint] if args.checkpoint else [])
    run.outputs = [out, out.with_suffix(".txt")]
    run.write(args.manifest or out.with_suffix(".manifest.json"))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paintmatch", description="Segment-matching line-art colorization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="extract segment maps from line art")
    p.add_argument("input", type=Path, help="directory of line-art images")
    p.add_argument("output", type=Path)
    p.add_argument("--gt", type=Path, help="directory of colored images (same filenames) for segment colors")
    p.add_argument("--mono", action="store_true", help="unify line colors to black first")
    _threshold(p)
    _manifest_arg(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("precompute", help="cache frozen semantic features for a dataset")
    p.add_argument("root", type=Path)
    p.add_argument("--split")
    p.add_argument("--mono", action="store_true")
    _resources(p)
    _threshold(p)
    _manifest_arg(p)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train the spatial encoder and fusion head")
    p.add_argument("root", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True, help="checkpoint directory")
    _add_train_flags(p)
    _resources(p)
    _manifest_arg(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("colorize", cmd_colorize, "colorize one line drawing"),
                              ("eval", cmd_eval, "evaluate on a dataset split")):
        p = sub.add_parser(name, help=help_)
        if name == "colorize":
            p.add_argument("target", type=Path, help="target line art")
            p.add_argument("--target-seg", type=Path, help="precomputed segment map for the target")
            p.add_argument("--ref", nargs=2, action="append", metavar=("LINE", "GT"), default=[])
            p.add_argument("-o", "--output", type=Path, required=True, help="output PNG")
        else:
            p.add_argument("root", type=Path)
            p.add_argument("--protocol", choices=("keyframe", "consecutive", "clipwise"), default="keyframe")
            p.add_argument("--shots", type=_parse_shots, help="design-sheet references: N or 'max'")
            p.add_argument("--refs", choices=("-1", "pm1", "first"))
            p.add_argument("--split", default="test")
            p.add_argument("-o", "--output", type=Path, required=True, help="report JSON")
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--zero-shot", action="store_true", help="match semantic features only")
        p.add_argument("--pooling", choices=("native", "fixed512"), default="native")
        p.add_argument("--mono", action="store_true")
        _resources(p)
        _threshold(p)
        _manifest_arg(p)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on malformed usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = RunManifest(args.command, argv)
    try:
        return args.func(args, run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"paintmatch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"paintmatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
