"""``rbae`` command line: synth, train, infer, eval, ablate, report.

Exit codes: 0 on success, 1 for user errors (bad config, missing data,
reference drift, undefined metrics), 2 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, RunConfig, parse_overrides, resolve_config, smoke_config
from .data_ingest import (
    DataLayoutError,
    ReferenceMismatchError,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_mvtec_category,
    read_image,
    select_reference,
    write_split,
)
from .defect_synth import MaskGenerationError
from .evalkit import DegenerateMetricWarning, UndefinedMetricError, pixel_roc_auc, pro_auc, records_to_json, report, roc_auc
from .losses import PerceptualUnavailableError
from .msfdm import image_score, load_anomaly_map, save_anomaly_map, save_overlay
from .trainer import Checkpoint, Inferencer, InvariantError, NonFiniteLossError, train_phase1, train_phase2

logger = logging.getLogger("rbae")

USER_ERRORS = (
    ConfigError,
    DataLayoutError,
    ReferenceMismatchError,
    UndefinedMetricError,
    MaskGenerationError,
    PerceptualUnavailableError,
    FileNotFoundError,
    FileExistsError,
    IndexError,
)


class UsageError(Exception):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers


def _base_config(args) -> RunConfig:
    return smoke_config() if getattr(args, "profile", "full") == "smoke" else RunConfig()


def _resolve(args, extra: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    overrides = parse_overrides(getattr(args, "overrides", []) or [])
    flag_values = {
        "seed": getattr(args, "seed", None),
        "category": getattr(args, "category", None),
        "device": getattr(args, "device", None),
        "seg_head": getattr(args, "seg_head", None),
        "data_root": getattr(args, "data", None),
    }
    if getattr(args, "deterministic", False):
        flag_values["deterministic"] = True
    overrides.update({k: v for k, v in flag_values.items() if v is not None})
    overrides.update(extra or {})
    return resolve_config(getattr(args, "config", None), overrides=overrides, base=base or _base_config(args))


def write_manifest(out_dir: Path, verb: str, cfg: RunConfig | None, argv: Sequence[str], **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "verb": verb,
        "argv": list(argv),
        "package_version": __version__,
        "python": platform.python_version(),
        **extra,
    }
    if cfg is not None:
        doc["seed"] = cfg.seed
        doc["config"] = cfg.to_dict()
    path = out_dir / "manifest.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


# training choices that the config cannot express, written into every training manifest
TRAINING_NOTES = {
    "reference_in_training": "the reference image also serves as an ordinary training normal",
    "phase1_pairs": "every phase-1 batch pairs each clean image with a synthetic-defect copy",
    "phase2_inputs": "phase 2 feeds only synthetic-defect images through the repair path",
    "decoder_skips": "decoder skips come from levels 3 and 4 in both phases",
}


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_split(cfg: RunConfig):
    return load_mvtec_category(cfg.data_root, cfg.category, cfg.resolution)


def _sample_key(source_path: str) -> Path:
    """``.../test/<type>/<stem>.png`` -> ``<type>/<stem>.png``."""
    p = Path(source_path)
    return Path(p.parent.name) / f"{p.stem}.png"


def score_maps(maps: Sequence[np.ndarray], samples, cfg: RunConfig) -> dict:
    """Image ROCAUC, pixel ROCAUC and PROAUC from (already quantized) maps."""
    labels = [s.is_defective for s in samples]
    scores = [image_score(m, cfg.image_score_sigma) for m in maps]
    masks = [s.gt_mask if s.gt_mask is not None else np.zeros(m.shape, np.uint8) for s, m in zip(samples, maps)]
    result = {"image_auroc": roc_auc(scores, labels)}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateMetricWarning)
        result["pixel_auroc"] = pixel_roc_auc(maps, masks, cfg.pixel_auc_pooling)
    if any(issubclass(w.category, DegenerateMetricWarning) for w in caught):
        result["pixel_auroc_degenerate"] = True
    result["pro_auc"] = pro_auc(maps, masks, cfg.pro_fpr_cap, cfg.connectivity)
    return result


def _scorable(split):
    # defective images without a mask cannot enter the pixel metrics
    missing = set(split.missing_masks)
    return [s for s in split.test_samples if s.source_path not in missing]


def evaluate_checkpoint(ckpt: Checkpoint, split, cfg: RunConfig, out_dir: Path, seg_head: str, overlays: bool = True) -> dict:
    ref = select_reference(split, ckpt.reference["index"])
    inferencer = Inferencer(ckpt, ref, device=cfg.device, seg_head=seg_head)
    samples = _scorable(split)
    maps, per_image = [], []
    for start in range(0, len(samples), 8):
        chunk = samples[start : start + 8]
        for sample, res in zip(chunk, inferencer.batch(chunk)):
            key = _sample_key(sample.source_path)
            stored = save_anomaly_map(res.am_final, out_dir / "maps" / key)
            if overlays:
                save_overlay(sample.pixels, stored, out_dir / "overlays" / key)
            maps.append(stored)
            per_image.append({"image": str(key), "label": sample.label, "score": image_score(stored, cfg.image_score_sigma)})
    (out_dir / "scores.json").write_text(json.dumps(per_image, indent=2))
    return score_maps(maps, samples, cfg)


def _write_report(out_dir: Path, rows: dict[str, dict], stem: str = "report") -> str:
    text, records = report(rows)
    (out_dir / f"{stem}.txt").write_text(text + "\n")
    (out_dir / f"{stem}.json").write_text(records_to_json(records))
    return text


# ------------------------------------------------------------------ verbs


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of output {out} does not exist")
    _prepare_out(out, args.force)
    spec = SyntheticSpec(
        texture=args.texture,
        defect=args.defect,
        n_train=args.n_train,
        n_test=args.n_test,
        resolution=args.resolution,
        category=args.category or "synthetic",
    )
    try:
        split = generate_synthetic_corpus(spec, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_split(split, out)
    spec_doc = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()}
    write_manifest(out, "synth", None, argv, seed=args.seed, synthetic=spec_doc)
    print(f"wrote {len(split.train_normals)} train / {len(split.test_samples)} test images to {out / spec.category}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train", cfg, argv, phase=args.phase, notes=TRAINING_NOTES)
    split = _load_split(cfg)
    if args.phase in ("1", "both"):
        r1 = train_phase1(split, cfg, log_path=out / "loss_phase1.jsonl")
        ckpt1 = r1.checkpoint
        ckpt1.save(out / "phase1.pt")
        print(f"phase 1: {ckpt1.step} steps -> {out / 'phase1.pt'}")
    else:
        src = Path(args.resume) if args.resume else out / "phase1.pt"
        if not src.exists():
            raise FileNotFoundError(f"phase 2 needs a phase-1 checkpoint; {src} not found (use --resume)")
        ckpt1 = Checkpoint.load(src)
    if args.phase in ("2", "both"):
        r2 = train_phase2(split, ckpt1, cfg, log_path=out / "loss_phase2.jsonl")
        r2.checkpoint.save(out / "phase2.pt")
        print(f"phase 2: {r2.checkpoint.step - ckpt1.step} steps -> {out / 'phase2.pt'}")
    return 0


def cmd_infer(args, argv) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    cfg = _resolve(args, base=ckpt.run_config())
    out = Path(args.out)
    write_manifest(out, "infer", cfg, argv, checkpoint=str(args.ckpt))
    split = _load_split(cfg)
    inferencer = Inferencer(ckpt, select_reference(split, ckpt.reference["index"]), device=cfg.device, seg_head=cfg.seg_head)
    results = []
    for path in args.images:
        pixels = read_image(path, cfg.resolution)
        res = inferencer(pixels)
        name = Path(path).stem + ".png"
        stored = save_anomaly_map(res.am_final, out / "maps" / name)
        save_overlay(pixels, stored, out / "overlays" / name)
        results.append({"image": str(path), "score": res.score})
        print(f"{path}\t{res.score:.6f}")
    (out / "scores.json").write_text(json.dumps(results, indent=2))
    return 0


def cmd_eval(args, argv) -> int:
    out = Path(args.out)
    if args.maps:
        # model-free re-scoring of a saved map directory
        cfg = _resolve(args)
        source = {"maps": str(args.maps)}
        write_manifest(out, "eval", cfg, argv, **source)
        split = _load_split(cfg)
        samples = _scorable(split)
        maps = []
        for s in samples:
            path = Path(args.maps) / _sample_key(s.source_path)
            if not path.exists():
                raise FileNotFoundError(f"no saved map for {s.source_path} (expected {path})")
            maps.append(load_anomaly_map(path))
        head = "saved-maps"
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt or --maps")
        ckpt = Checkpoint.load(args.ckpt)
        cfg = _resolve(args, base=ckpt.run_config())
        split = _load_split(cfg)
        maps = None
        head = cfg.seg_head
        write_manifest(out, "eval", cfg, argv, checkpoint=str(args.ckpt))
    if maps is None:
        metrics = evaluate_checkpoint(ckpt, split, cfg, out, head, overlays=not args.no_overlays)
    else:
        metrics = score_maps(maps, samples, cfg)
    metrics["seg_head"] = head
    text = _write_report(out, {cfg.category: metrics})
    print(text)
    return 0


ABLATIONS = {
    "full": {},
    "no-pixel-dis": {"weights1.pixel_dis": 0.0},
    "no-rbam": {"use_rbam": False},
}


def cmd_ablate(args, argv) -> int:
    base = _resolve(args)
    out = Path(args.out)
    write_manifest(out, "ablate", base, argv, variants=list(ABLATIONS) + ["pixel-gap"])
    split = _load_split(base)
    rows: dict[str, dict] = {}
    for name, changes in ABLATIONS.items():
        cfg = _resolve(args, changes)
        run_dir = out / name
        write_manifest(run_dir, "ablate", cfg, argv, variant=name, notes=TRAINING_NOTES)
        r1 = train_phase1(split, cfg, log_path=run_dir / "loss_phase1.jsonl")
        r2 = train_phase2(split, r1.checkpoint, cfg, log_path=run_dir / "loss_phase2.jsonl")
        r2.checkpoint.save(run_dir / "phase2.pt")
        rows[name] = evaluate_checkpoint(r2.checkpoint, split, cfg, run_dir, cfg.seg_head, overlays=False)
        if name == "full":
            gap_dir = out / "pixel-gap"
            write_manifest(gap_dir, "ablate", cfg, argv, variant="pixel-gap")
            rows["pixel-gap"] = evaluate_checkpoint(r2.checkpoint, split, cfg, gap_dir, "pixel-gap", overlays=False)
        print(f"{name}: " + ", ".join(f"{k} {v:.4f}" for k, v in rows[name].items() if isinstance(v, float)))
    print(_write_report(out, rows, "ablation"))
    return 0


def cmd_report(args, argv) -> int:
    rows = {}
    for path in args.results:
        records = json.loads(Path(path).read_text())
        if isinstance(records, dict):
            records = [{"category": k, **v} for k, v in records.items()]
        for r in records:
            if r.get("category") != "Average":
                rows[str(r["category"])] = {k: v for k, v in r.items() if k != "category"}
    if not rows:
        raise ConfigError("no per-category records found in the given files")
    text, records = report(rows)
    if args.out:
        out = Path(args.out)
        write_manifest(out, "report", None, argv, inputs=[str(p) for p in args.results])
        (out / "report.txt").write_text(text + "\n")
        (out / "report.json").write_text(records_to_json(records))
    print(text)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rbae", description="Reference-based autoencoder for textured-surface defect detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def run_flags(p, seg_head=False):
        p.add_argument("--config", help="YAML run manifest")
        p.add_argument("--profile", choices=("full", "smoke"), default="full", help="base settings before the config file")
        p.add_argument("--data", help="dataset root (MVTec layout)")
        p.add_argument("--category")
        p.add_argument("--seed", type=int)
        p.add_argument("--device")
        p.add_argument("--deterministic", action="store_true")
        if seg_head:
            p.add_argument("--seg-head", choices=("msfdm", "pixel-gap"))
        p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")

    p = sub.add_parser("synth", help="write a procedural texture corpus in MVTec layout")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--category")
    p.add_argument("--texture", choices=("stripes", "checkerboard", "value-noise"), default="stripes")
    p.add_argument("--defect", choices=("blob", "scratch"), default="blob")
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-test", type=int, default=32)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("train", help="two-phase training")
    run_flags(p)
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--phase", choices=("1", "2", "both"), default="both")
    p.add_argument("--resume", help="phase-1 checkpoint to start phase 2 from")

    p = sub.add_parser("infer", help="anomaly maps and scores for individual images")
    run_flags(p, seg_head=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", nargs="+", required=True)

    p = sub.add_parser("eval", help="metrics on the test split")
    run_flags(p, seg_head=True)
    p.add_argument("--ckpt")
    p.add_argument("--maps", help="score a saved map directory instead of running a model")
    p.add_argument("--out", required=True)
    p.add_argument("--no-overlays", action="store_true")

    p = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    run_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="combine metric JSON files into one table")
    p.add_argument("results", nargs="+")
    p.add_argument("--out")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"rbae: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args, argv)
    except (InvariantError, NonFiniteLossError) as exc:
        print(f"rbae: internal error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"rbae: error: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"rbae: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug, not a user mistake
        logger.exception("unexpected failure")
        print(f"rbae: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
