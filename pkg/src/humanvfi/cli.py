"""Command-line entry point: ``humanvfi {synth,train,eval,curate,stats}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .core import Clip, read_manifest, save_clip, write_manifest
from .curate import (IMAGE_SUFFIXES, apply_review, assign_split, estimator_flow, farneback_flow,
                     load_video_frames, run_pipeline, zero_flow)
from .harness.config import ConfigError, curation_config, load_config, synthetic_spec, train_config
from .harness.data import ManifestDataset
from .harness.evaluate import evaluate
from .harness.synth import generate_synthetic
from .harness.train import train
from .interp import FlowEstimator, load_checkpoint
from .metrics import format_table
from .priors import (AnalyticBoxDetector, Priors, ToyPoseBackend, ToySegBackend, analytic_priors,
                     load_backend)
from .stats import flow_histograms

log = logging.getLogger("humanvfi")


def build_priors(section: dict) -> Priors:
    kind = section.get("kind", "analytic")
    if kind == "none":
        return Priors()
    if kind == "analytic":
        return analytic_priors()
    if kind == "toy":
        return Priors(ToySegBackend(), AnalyticBoxDetector(), ToyPoseBackend())
    if kind == "files":
        return Priors(
            load_backend(section["segmentation"], kind="segmentation") if section.get("segmentation") else None,
            load_backend(section["detector"], kind="detector") if section.get("detector") else None,
            load_backend(section["pose"], kind="pose") if section.get("pose") else None,
        )
    raise ConfigError(f"unknown priors.kind {kind!r}")


def build_flow_fn(name: str):
    if name == "farneback":
        return farneback_flow
    if name == "zero":
        return zero_flow
    return estimator_flow(load_checkpoint(name))


def _manifest_root(args):
    return Path(args.root) if args.root else Path(args.manifest).parent


def cmd_synth(args, cfg):
    s = cfg["synth"]
    spec = synthetic_spec(cfg)
    clips, truths = generate_synthetic(spec, int(s["n_clips"]), seed=int(s["seed"]))
    out = Path(args.out)
    records = []
    for clip, truth in zip(clips, truths):
        mean_mag = float(np.mean([truth.flow(k, k + 1).mean_magnitude() for k in range(len(clip.frames) - 1)]))
        records.append(save_clip(clip, out, "train", mean_mag))
    records = assign_split(records, float(s["test_fraction"]), int(s["seed"]))
    write_manifest(records, out / "manifest.jsonl")
    n_test = sum(r.split == "test" for r in records)
    print(f"wrote {len(records)} clips ({len(records) - n_test} train, {n_test} test) to {out}")


def cmd_train(args, cfg):
    tcfg = train_config(cfg)
    data = ManifestDataset(read_manifest(args.manifest), _manifest_root(args), split="train")
    est = load_checkpoint(args.init, tcfg.model) if args.init else FlowEstimator(tcfg.model)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    result = train(est, data, tcfg, build_priors(cfg["priors"]), log_path=log_path, checkpoint_path=out)
    last = result.log[-1] if result.log else {}
    print(f"trained {tcfg.steps} steps on {len(data)} clips; checkpoint {out}; log {log_path}")
    if last:
        print(json.dumps(last))


def _copy_first(I0, I1, t):
    return I0


def _linear_blend(I0, I1, t):
    return (1 - t) * I0 + t * I1


BASELINES = {"copy": _copy_first, "blend": _linear_blend}


def cmd_eval(args, cfg):
    e = cfg["eval"]
    data = ManifestDataset(read_manifest(args.manifest), _manifest_root(args), split=e["split"])
    reports = []
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        reports.append(evaluate(model, data, e["protocol"], method=e["method"], split=e["split"]))
    for name in args.baseline or []:
        reports.append(evaluate(BASELINES[name], data, e["protocol"], method=name, split=e["split"]))
    if not reports:
        raise SystemExit("nothing to evaluate: pass --checkpoint and/or --baseline")
    print(format_table(reports))
    if args.report:
        Path(args.report).write_text(json.dumps([r.to_dict() for r in reports], indent=2), encoding="utf-8")


def _video_sources(input_dir: Path):
    for p in sorted(input_dir.iterdir()):
        if p.is_dir() or (p.is_file() and p.suffix.lower() not in IMAGE_SUFFIXES + (".yaml", ".yml", ".json")):
            yield p.stem if p.is_file() else p.name, p


def cmd_curate(args, cfg):
    c = cfg["curate"]
    ccfg = curation_config(cfg)
    detector = AnalyticBoxDetector() if cfg["priors"]["kind"] != "files" else build_priors(cfg["priors"]).detector
    flow_fn = build_flow_fn(c["flow"])
    input_dir, out = Path(args.input), Path(args.out)
    cat_file = input_dir / "categories.yaml"
    categories = yaml.safe_load(cat_file.read_text()) if cat_file.exists() else {}
    records, logs = [], []
    for source_id, path in _video_sources(input_dir):
        frames, names = load_video_frames(path)
        res = run_pipeline(frames, detector, flow_fn, ccfg, source_id=source_id,
                           category=categories.get(source_id, c["category"]), frame_names=names)
        for rec, idx in zip(res.records, res.clips):
            clip = Clip([frames[i] for i in idx], rec.clip_id, rec.source_id, rec.category)
            records.append(save_clip(clip, out, "train", rec.mean_flow_mag))
        logs.append({**res.summary(), "details": res.rejections})
        log.info("%s: %d clips", source_id, len(res.clips))
    if c.get("review"):
        records = apply_review(records, c["review"])
    records = assign_split(records, float(c["test_fraction"]), int(args.seed if args.seed is not None else c["seed"]))
    write_manifest(records, out / "manifest.jsonl")
    with open(out / "rejections.jsonl", "w", encoding="utf-8") as f:
        for entry in logs:
            f.write(json.dumps(entry) + "\n")
    print(f"curated {len(records)} clips from {len(logs)} videos into {out}")


def cmd_stats(args, cfg):
    s = cfg["stats"]
    records = read_manifest(args.manifest)
    hist = flow_histograms(records, _manifest_root(args), build_flow_fn(s["flow"]), int(s["bins"]), float(s["width"]))
    hist.to_csv(args.out)
    print(f"{len(hist.image_means)} clips measured, {hist.skipped} skipped; "
          f"{100 * hist.fraction_above(float(s['threshold'])):.1f}% with mean flow > {s['threshold']} px")
    for cat, n in sorted(hist.category_counts.items()):
        print(f"  {cat}: {n}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="humanvfi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (version: 1)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic sprite dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the interpolator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", help="dataset root (defaults to the manifest's directory)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step JSONL log path")
    p.add_argument("--init", help="checkpoint to start from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="append", choices=sorted(BASELINES))
    p.add_argument("--report", help="write the reports as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curate", parents=[common], help="cut videos into curated 9-frame clips")
    p.add_argument("--input", required=True, help="directory of videos or frame directories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("stats", parents=[common], help="flow-magnitude histograms of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
