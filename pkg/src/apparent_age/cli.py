"""Command-line entry point: ``apparent-age {synth,train,evaluate,audit,report,analyze}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Relative
output paths land under ``$APPARENT_AGE_OUTPUT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import analysis, metrics, pipeline
from .datasets import SyntheticSpec, generate_synthetic, load_image, load_manifest
from .exceptions import EmptyInputError, InvalidInputError, ManifestError, ProjectorUnavailableError

OUTPUT_ENV = "APPARENT_AGE_OUTPUT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("apparent_age")


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts_written: list = field(default_factory=list)
    summary_line: str = ""

    def __post_init__(self):
        self.artifacts_written = [str(p) for p in self.artifacts_written]


def _out(path):
    p = Path(path)
    root = os.environ.get(OUTPUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> CommandResult:
    splits = tuple(float(s) for s in args.splits.split(","))
    spec = SyntheticSpec(count=args.count, image_size=args.image_size, age_encoding=args.encoding,
                         noise=args.noise, seed=args.seed, age_distribution=args.age_distribution,
                         pixel_noise=args.pixel_noise, splits=splits)
    spec.validate()
    out = _out(args.out)
    manifest = generate_synthetic(spec, out, name=args.name)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return CommandResult(EXIT_OK, [out / "manifest.csv", out / "spec.json", out / "images"],
                         f"wrote {len(manifest)} synthetic samples to {out}")


def _load_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = pipeline.load_run_config(args.config, overrides, base_dir=args.root)
    if args.output_dir:
        cfg.output_dir = _out(args.output_dir)
    elif os.environ.get(OUTPUT_ENV) and not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = _out(cfg.output_dir)
    if args.epochs is not None:
        cfg.stage_defaults["epochs"] = args.epochs
        for ds in cfg.datasets.values():
            ds.pop("epochs", None)
    return cfg


def cmd_train(args) -> CommandResult:
    cfg = _load_config(args)
    matrix = cfg.matrix()
    run_dirs = [cfg.output_dir / r.run_id for r in matrix.runs]
    if args.dry_run:
        for run, d in zip(matrix.runs, run_dirs):
            plans = cfg.stage_plans(run.sequence)
            d.mkdir(parents=True, exist_ok=True)
            plan = {"run_id": run.run_id, "objective": run.objective, "sequence": list(run.sequence),
                    "seed": cfg.settings.seed, "stages": [asdict(p) for p in plans],
                    "config_hash": pipeline.config_hash(cfg.settings, run.objective, plans)}
            (d / "plan.json").write_text(json.dumps(plan, indent=2, sort_keys=True) + "\n")
        return CommandResult(EXIT_OK, [d / "plan.json" for d in run_dirs],
                             f"planned {len(matrix)} runs under {cfg.output_dir}")
    pipeline.execute_matrix(cfg, jobs=args.jobs, resume=not args.no_resume)
    artifacts = [d for d in run_dirs]
    artifacts += [p for d in run_dirs for p in (d / "predictions.csv",) if p.exists()]
    return CommandResult(EXIT_OK, artifacts, f"trained {len(matrix)} runs under {cfg.output_dir}")


def cmd_evaluate(args) -> CommandResult:
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = pipeline.evaluate_run(ckpt, manifest, split=args.split or None)
    out = pipeline.write_predictions(_out(args.out), manifest, records)
    return CommandResult(EXIT_OK, [out], f"{len(records)} predictions ({records.skipped} skipped) -> {out}")


def _model_name(spec):
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, Path(path)
    p = Path(spec)
    return (p.parent.name if p.stem == "predictions" else p.stem), p


def _audit(named_paths, out_dir, min_count):
    reports, overall = {}, {}
    for name, path in named_paths:
        records = pipeline.read_predictions(path)
        if not records:
            raise EmptyInputError(f"{path}: no prediction rows")
        reports[name] = metrics.group_report(records, min_count=min_count)
        overall[name] = metrics.overall_metrics(records)
    md, structured = metrics.render_tables(reports, overall)
    out_dir = _out(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "audit.md", out_dir / "audit.json"]
    written[0].write_text(md, encoding="utf-8")
    written[1].write_text(structured, encoding="utf-8")
    for name, rep in reports.items():
        p = out_dir / f"groups_{name}.csv"
        p.write_text(metrics.group_table_csv(rep), encoding="utf-8")
        written.append(p)
    excluded = sum(r.excluded for r in reports.values())
    return CommandResult(EXIT_OK, written,
                         f"audited {len(reports)} model(s); {excluded} record(s) excluded for missing race/gender")


def cmd_audit(args) -> CommandResult:
    return _audit([_model_name(s) for s in args.predictions], args.out, args.min_count)


def cmd_report(args) -> CommandResult:
    runs = Path(args.runs)
    found = sorted(runs.glob("*/predictions.csv"))
    if not found:
        raise EmptyInputError(f"no */predictions.csv under {runs}")
    return _audit([(p.parent.name, p) for p in found], args.out, args.min_count)


def cmd_analyze(args) -> CommandResult:
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    if args.split:
        manifest = manifest.split(args.split)
    edges = [float(e) for e in args.bins.split(",")] if args.bins else analysis.DECADE_EDGES

    if args.mode == "representatives":
        reps = analysis.representative_images(manifest, edges)
        p = analysis.write_rows(out / "representatives.csv",
                                [{"age_bin": k, "sample_id": v} for k, v in reps.items()], ["age_bin", "sample_id"])
        return CommandResult(EXIT_OK, [p], f"{len(reps)} representative images")

    if args.mode == "project" and args.embeddings:
        table = analysis.read_embeddings(args.embeddings)
    elif args.mode == "similarity" and args.embeddings:
        table = analysis.read_embeddings(args.embeddings)
    else:
        if not args.checkpoint:
            raise InvalidInputError(f"mode {args.mode!r} needs --checkpoint")
        ckpt = pipeline.load_checkpoint(args.checkpoint)

    if args.mode == "embed":
        table = analysis.extract_embeddings(ckpt, manifest, layer=args.layer)
        p = analysis.write_embeddings(out / "embeddings.csv", table)
        return CommandResult(EXIT_OK, [p], f"{len(table)} embeddings of dimension {table.dim}")

    if args.mode in ("project", "similarity") and not args.embeddings:
        table = analysis.extract_embeddings(ckpt, manifest, layer=args.layer)

    if args.mode == "project":
        rows = analysis.project_2d(table, projector=args.projector, seed=args.seed)
        p = analysis.write_rows(out / "projection.csv", rows, ["sample_id", "x", "y", "age_label", "race", "gender"])
        return CommandResult(EXIT_OK, [p], f"projected {len(rows)} rows with {args.projector}")

    if args.mode == "similarity":
        centroids = analysis.age_group_centroids(table, edges)
        rows = analysis.centroid_cosine_similarity(table, centroids, edges)
        p = analysis.write_rows(out / "similarity.csv", rows, ["sample_id", "age_bin", "similarity", "race", "gender"])
        summary = analysis.summarize_similarity(rows, by="race")
        q = out / "similarity_by_race.json"
        q.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return CommandResult(EXIT_OK, [p, q], f"{len(rows)} similarity rows")

    # saliency over the representative image of each age bin
    model = ckpt.build_model()
    grid = ckpt.age_grid()
    reps = analysis.representative_images(manifest, edges)
    by_id = {r.sample_id: r for r in manifest.records}
    size = ckpt.backbone.get("image_size", 32)
    channels = ckpt.backbone.get("in_channels", 1)
    meta, written = [], []
    for age_bin, sid in reps.items():
        rec = by_id[sid]
        img = load_image(manifest.resolve(rec), size, channels)
        smap = analysis.saliency_map(model, img, rec.reference_age(), sid, grid=grid)
        png = out / f"saliency_{sid}.png"
        analysis.saliency_overlay(smap, img).save(png)
        written.append(png)
        meta.append({"sample_id": sid, "age_bin": age_bin, "reference_age": smap.reference_age,
                     "predicted_age": smap.predicted_age, "degenerate": smap.degenerate, "file": png.name,
                     "race": rec.race, "gender": rec.gender})
    p = analysis.write_rows(out / "saliency.csv", meta, ["sample_id", "age_bin", "reference_age", "predicted_age",
                                                        "degenerate", "file", "race", "gender"])
    return CommandResult(EXIT_OK, [p] + written, f"{len(written)} saliency maps")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="apparent-age", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic age dataset", formatter_class=fmt)
    p.add_argument("--count", type=int, default=1000, help="number of images")
    p.add_argument("--image-size", type=int, default=32, help="square image side in pixels")
    p.add_argument("--encoding", choices=["disk", "ring"], default="disk", help="visual age encoding")
    p.add_argument("--age-distribution", choices=["uniform", "skewed"], default="uniform")
    p.add_argument("--noise", type=float, default=3.0, help="std of apparent-age perturbation (years)")
    p.add_argument("--pixel-noise", type=float, default=0.05, help="std of additive pixel noise")
    p.add_argument("--splits", default="0.7,0.1,0.2", help="train,val,test fractions")
    p.add_argument("--name", default="synthetic", help="dataset name")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", default="synthetic", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="expand the run matrix and train every run", formatter_class=fmt)
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--root", default=None, help="base for relative paths in the config (default: its directory)")
    p.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--epochs", type=int, default=None, help="override epochs for every stage")
    p.add_argument("--jobs", type=int, default=1, help="runs trained in parallel")
    p.add_argument("--no-resume", action="store_true", help="retrain stages even if a matching checkpoint exists")
    p.add_argument("--dry-run", action="store_true", help="only write each run's plan.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="predict ages for a manifest split", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="stage checkpoint directory")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--split", default="test", help="split to evaluate ('' for all rows)")
    p.add_argument("--out", default="predictions.csv", help="predictions CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="race x gender report from prediction files", formatter_class=fmt)
    p.add_argument("predictions", nargs="+", help="predictions CSV, optionally NAME=PATH")
    p.add_argument("--out", default="audit", help="output directory")
    p.add_argument("--min-count", type=int, default=1, help="drop groups smaller than this")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="audit every run's predictions under a runs directory", formatter_class=fmt)
    p.add_argument("--runs", required=True, help="directory holding <run_id>/predictions.csv")
    p.add_argument("--out", default="report", help="output directory")
    p.add_argument("--min-count", type=int, default=1, help="drop groups smaller than this")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("analyze", help="embedding, projection, similarity and saliency analyses",
                       formatter_class=fmt)
    p.add_argument("--mode", required=True, choices=["embed", "project", "similarity", "saliency", "representatives"])
    p.add_argument("--checkpoint", default=None, help="stage checkpoint directory")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--split", default=None, help="restrict to one split")
    p.add_argument("--embeddings", default=None, help="reuse an embeddings.csv (project/similarity)")
    p.add_argument("--layer", default=None, help="module name to take embeddings from")
    p.add_argument("--bins", default=None, help="comma-separated age bin edges (default: decades 0..100)")
    p.add_argument("--projector", default="umap", choices=sorted(analysis.PROJECTORS))
    p.add_argument("--seed", type=int, default=0, help="projector seed")
    p.add_argument("--out", default="analysis", help="output directory")
    p.set_defaults(func=cmd_analyze)
    return parser


def run(argv=None) -> CommandResult:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (InvalidInputError, ManifestError, EmptyInputError, FileNotFoundError, ValueError) as exc:
        return CommandResult(EXIT_VALIDATION, [], f"error: {exc}")
    except (ProjectorUnavailableError, pipeline.TrainingError, FloatingPointError, RuntimeError, OSError) as exc:
        return CommandResult(EXIT_RUNTIME, [], f"error: {exc}")


def main(argv=None):
    result = run(argv)
    stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
    print(result.summary_line, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
