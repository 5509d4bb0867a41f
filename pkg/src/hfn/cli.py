"""Command line entry point: ``hfn <command> [--config PATH] [--set key=value ...] [--out DIR]``.

Commands:
  ingest   segment, extract and cache features for every record
  train    train on the configured split(s) and write a checkpoint
  eval     score a checkpoint on its test split
  ablate   modality-loss (checkpoint) or fusion-scheme (retrains) ablation
  profile  parameter counts and inference timing of a checkpoint
  report   print the tables found in the output directory

Without ``data.manifest`` the planted-signal synthetic benchmark is used.
Exit codes: 0 success, 2 missing input, 3 validation error, 4 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from hfn import __version__
from hfn.config import RunConfig, parse_config, parse_overrides
from hfn.dataset import FoldPlan, class_names, load_manifest, segment_clips
from hfn.errors import HFNError, MissingInputError, ValidationError
from hfn.evaluation.ablation import (
    FUSION_ROWS,
    MODALITY_CONFIGS,
    AblationTable,
    ablate_modalities,
    dumps_table,
    fusion_ablation,
)
from hfn.evaluation.metrics import MetricsReport, compute_metrics, dumps, merge_ambiguous, reports_to_csv
from hfn.evaluation.profiling import efficiency_profile
from hfn.evaluation.synthetic import SyntheticSpec, make_synthetic
from hfn.extractors import FeatureCache
from hfn.model import HFN, Sample, build_extractors
from hfn.temporal import HashedNgramEncoder
from hfn.training import (
    derive_seed,
    load_checkpoint,
    predict,
    run_protocol,
    save_checkpoint,
)

log = logging.getLogger("hfn")

ABLATION_TITLES = {"modality": "Modality-loss ablation (%)", "fusion": "Fusion-scheme ablation (%)"}

COMMANDS = ("ingest", "train", "eval", "ablate", "profile", "report")


class JsonLineHandler(logging.Handler):
    """Writes each log record as one JSON object per line."""

    def __init__(self, path: Path, command: str):
        super().__init__()
        self.stream = path.open("a", encoding="utf-8")
        self.command = command

    def emit(self, record):
        entry = {"time": round(record.created, 3), "level": record.levelname, "command": self.command,
                 "message": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        self.stream.write(json.dumps(entry, sort_keys=True) + "\n")
        self.stream.flush()

    def close(self):
        self.stream.close()
        super().close()


def _event(message: str, **fields):
    log.info(message, extra={"fields": fields})


@dataclass
class Workspace:
    cfg: RunConfig
    out: Path
    classes: list[str]
    n_classes: int


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _load_records(cfg: RunConfig):
    if cfg.data.manifest:
        return load_manifest(cfg.data.manifest)
    spec = SyntheticSpec(
        n=cfg.data.synthetic_n, k=cfg.data.synthetic_k, planted=cfg.data.synthetic_planted,
        noise=cfg.data.synthetic_noise, n_classes=len(class_names(cfg.data.label_mode)),
        seed=derive_seed(cfg.run.seed, "synthetic"), sr=cfg.model.sr, fps=cfg.model.fps,
        clip_seconds=cfg.model.clip_seconds, missing_audio=cfg.data.synthetic_missing_audio,
        missing_text=cfg.data.synthetic_missing_text,
    )
    return make_synthetic(spec).records


def _cache(ws: Workspace) -> FeatureCache | None:
    if not ws.cfg.data.cache:
        return None
    return FeatureCache(ws.cfg.data.cache_dir or ws.out / "cache")


def _featurize(ws: Workspace, model: HFN | None = None):
    records = _load_records(ws.cfg)
    if not records:
        raise ValidationError("the dataset has no records")
    model = model or HFN(ws.cfg.model, ws.n_classes)
    samples = model.featurize(records, ws.cfg.data.label_mode, cache=_cache(ws))
    _event("featurized", n=len(samples), synthetic=ws.cfg.synthetic)
    return records, samples


def _model_factory(cfg: RunConfig, n_classes: int):
    extractors = build_extractors(cfg.model)
    text_encoder = HashedNgramEncoder(cfg.model.d_text, cfg.model.text_buckets, seed=cfg.model.extractor_seed)

    def build(model_cfg, seed: int) -> HFN:
        torch.manual_seed(seed)
        return HFN(model_cfg, n_classes, extractors=extractors, text_encoder=text_encoder)

    return build


def _repetitions(cfg: RunConfig) -> list[int]:
    return list(range(cfg.train.repetitions)) if cfg.eval.full_protocol else [cfg.eval.repetition]


def _checkpoint(ws: Workspace, path: str | None):
    ckpt = Path(path) if path else ws.out / "checkpoint.pt"
    if not ckpt.is_file():
        raise MissingInputError(f"checkpoint not found: {ckpt} (run `hfn train` first or pass --checkpoint)")
    model, meta = load_checkpoint(ckpt)
    if meta.get("n_classes", model.n_classes) != ws.n_classes:
        raise ValidationError(f"checkpoint has {model.n_classes} classes, config expects {ws.n_classes}")
    return model, meta


def _test_split(meta: dict, samples: Sequence[Sample]) -> list[Sample]:
    plan = FoldPlan.from_json(meta["plan"])
    n = sum(len(p) for p in plan.parts)
    if n != len(samples):
        raise ValidationError(f"checkpoint was trained on {n} samples but the dataset has {len(samples)}")
    return [samples[i] for i in plan.test]


def _score(ws: Workspace, predicted, truth, provenance: dict) -> MetricsReport:
    classes = ws.classes
    if ws.cfg.data.merge_ambiguous:
        predicted, _ = merge_ambiguous(predicted, classes)
        truth, classes = merge_ambiguous(truth, classes)
    return compute_metrics(list(predicted), list(truth), classes, provenance)


def cmd_ingest(ws: Workspace, args) -> None:
    records, samples = _featurize(ws)
    summary = {
        "n_records": len(records),
        "with_audio": int(sum(bool(s.clips.modality_mask[1]) for s in samples)),
        "with_text": int(sum(s.text_present for s in samples)),
        "clips": int(sum(s.clips.video.shape[0] for s in samples)),
        "label_counts": {c: int(sum(s.label == i for s in samples)) for i, c in enumerate(ws.classes)},
        "cache": str(_cache(ws).root) if ws.cfg.data.cache else None,
    }
    _write(ws.out / "ingest.json", dumps(summary))
    print(json.dumps(summary, sort_keys=True))


def cmd_train(ws: Workspace, args) -> None:
    cfg = ws.cfg
    _, samples = _featurize(ws)
    build = _model_factory(cfg, ws.n_classes)
    reps = _repetitions(cfg)
    train_log = (ws.out / "train_log.jsonl").open("w", encoding="utf-8")
    try:
        result = run_protocol(
            samples, cfg.train, lambda seed: build(cfg.model, seed), ws.classes, keep_models=True,
            log_fn=lambda e: train_log.write(json.dumps(e, sort_keys=True) + "\n"), only=reps,
        )
    finally:
        train_log.close()
    _write(ws.out / "folds.json", dumps([p.to_json() for p in result.plans]))
    keep = reps.index(cfg.eval.repetition) if cfg.eval.repetition in reps else 0
    plan = result.plans[keep]
    meta = {"plan": plan.to_json(), "repetition": plan.repetition, "classes": ws.classes,
            "n_classes": ws.n_classes, "label_mode": cfg.data.label_mode, "run_config_hash": cfg.hash,
            "best_epoch": result.repetitions[keep].provenance["best_epoch"]}
    path = save_checkpoint(ws.out / "checkpoint.pt", result.models[keep], meta)
    _write(ws.out / "protocol.json", dumps({"mean": result.report.to_json(),
                                            "repetitions": [r.to_json() for r in result.repetitions]}))
    _event("trained", checkpoint=str(path), repetitions=reps, mean_test_macro_f1=result.report.macro_f1)
    print(f"checkpoint: {path}")
    print(f"mean test macro F1 over repetitions {reps}: {result.report.macro_f1:.4f}")


def cmd_eval(ws: Workspace, args) -> None:
    model, meta = _checkpoint(ws, args.checkpoint)
    _, samples = _featurize(ws, model)
    test = _test_split(meta, samples)
    preds = predict(model, test)
    report = _score(ws, preds.predicted.tolist(), preds.labels.tolist(),
                    {"repetition": meta["repetition"], "config_hash": ws.cfg.hash, "split": "test"})
    _write(ws.out / "metrics.json", dumps(report.to_json()))
    _write(ws.out / "metrics.csv", reports_to_csv({"HFN": report}, first_column="Model"))
    lines = [json.dumps(r, sort_keys=True) for r in preds.records(ws.classes)]
    _write(ws.out / "predictions.jsonl", "\n".join(lines) + "\n")
    _event("evaluated", accuracy=report.accuracy, macro_f1=report.macro_f1, n=report.n)
    print(f"accuracy {report.accuracy:.4f}  macro F1 {report.macro_f1:.4f}  (n={report.n})")


def cmd_ablate(ws: Workspace, args) -> None:
    cfg = ws.cfg
    if cfg.eval.ablation == "modality":
        model, meta = _checkpoint(ws, args.checkpoint)
        _, samples = _featurize(ws, model)
        test = _test_split(meta, samples)
        table = ablate_modalities(model, test, ws.classes, tuple(MODALITY_CONFIGS),
                                  provenance={"repetition": meta["repetition"], "config_hash": cfg.hash})
        if cfg.data.merge_ambiguous:
            for name, (audio, text) in MODALITY_CONFIGS.items():
                preds = predict(model, test, audio=audio, text=text)
                table.rows[name] = _score(ws, preds.predicted.tolist(), preds.labels.tolist(), {"config": name})
    else:
        _, samples = _featurize(ws)
        build = _model_factory(cfg, ws.n_classes)
        table = fusion_ablation(samples, cfg.model, cfg.train, ws.classes, build, tuple(FUSION_ROWS),
                                only=_repetitions(cfg))
        table.provenance["config_hash"] = cfg.hash
    _write(ws.out / "ablation.json", dumps_table(table))
    _write(ws.out / "ablation.csv", table.to_csv())
    _event("ablated", kind=table.kind, macro_f1=table.macro_f1())
    print(format_table(ABLATION_TITLES[table.kind], table.rows, "Configuration"))


def cmd_profile(ws: Workspace, args) -> None:
    model, meta = _checkpoint(ws, args.checkpoint)
    records, samples = _featurize(ws, model)
    plan = FoldPlan.from_json(meta["plan"])
    idx = list(plan.test[: ws.cfg.eval.probe_size])
    m = model.cfg
    clips = [segment_clips(records[i], fps=m.fps, clip_seconds=m.clip_seconds, sr=m.sr,
                           frame_size=(m.frame_size, m.frame_size)) for i in idx]
    prof = efficiency_profile(model, [samples[i] for i in idx], clips, repeats=ws.cfg.eval.profile_repeats)
    _write(ws.out / "profile.json", dumps(prof.to_json()))
    _event("profiled", **prof.to_json())
    print(format_profile(prof.to_json()))


def format_table(title: str, rows: dict[str, MetricsReport], first_column: str) -> str:
    if not rows:
        return f"{title}: (empty)"
    columns = list(next(iter(rows.values())).table_row())
    width = max(len(first_column), *(len(n) for n in rows))
    head = f"{first_column:<{width}}  " + "  ".join(f"{c:>{max(len(c), 6)}}" for c in columns)
    out = [title, head, "-" * len(head)]
    for name, report in rows.items():
        vals = report.table_row()
        out.append(f"{name:<{width}}  " + "  ".join(f"{vals[c] * 100:>{max(len(c), 6)}.2f}" for c in columns))
    return "\n".join(out)


def format_profile(p: dict) -> str:
    extra = p.get("infer_seconds_with_extraction")
    return "\n".join([
        "Efficiency",
        f"  parameters      {p['param_count']:,} ({p['trainable_params']:,} trainable, {p['frozen_params']:,} frozen)",
        f"  parameter size  {p['param_mb']:.2f} MB",
        f"  inference       {p['infer_seconds'] * 1000:.2f} ms per batch of {p['probe_size']} (cached features)",
        *([f"  with extraction {extra * 1000:.2f} ms"] if extra is not None else []),
    ])


def cmd_report(ws: Workspace, args) -> None:
    sections = []
    metrics = ws.out / "metrics.json"
    if metrics.is_file():
        report = MetricsReport.from_json(json.loads(metrics.read_text()))
        sections.append(format_table("Test metrics (%)", {"HFN": report}, "Model"))
    protocol = ws.out / "protocol.json"
    if protocol.is_file():
        obj = json.loads(protocol.read_text())
        rows = {f"repetition {r['provenance']['repetition']}": MetricsReport.from_json(r) for r in obj["repetitions"]}
        rows["mean"] = MetricsReport.from_json(obj["mean"])
        sections.append(format_table("Protocol test metrics (%)", rows, "Split"))
    ablation = ws.out / "ablation.json"
    if ablation.is_file():
        table = AblationTable.from_json(json.loads(ablation.read_text()))
        sections.append(format_table(ABLATION_TITLES[table.kind], table.rows, "Configuration"))
    profile = ws.out / "profile.json"
    if profile.is_file():
        sections.append(format_profile(json.loads(profile.read_text())))
    if not sections:
        raise MissingInputError(f"no metrics.json, protocol.json, ablation.json or profile.json under {ws.out}")
    text = "\n\n".join(sections) + "\n"
    _write(ws.out / "report.txt", text)
    print(text, end="")


HELP = {
    "ingest": "segment, extract and cache features",
    "train": "train and write a checkpoint",
    "eval": "score a checkpoint on its test split",
    "ablate": "modality-loss or fusion-scheme ablation",
    "profile": "parameter counts and inference timing",
    "report": "print the tables found under --out",
}

HANDLERS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "profile": cmd_profile, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfn", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"hfn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="YAML file of config keys (dotted or bare names)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--verbose", "-v", action="store_true", help="also log to stderr")
        if name in ("eval", "ablate", "profile"):
            p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.pt)")
    return parser


def run_command(command: str, cfg: RunConfig, args=None) -> int:
    """Run one command with a resolved config; returns the process exit status."""
    args = args or argparse.Namespace(checkpoint=None, verbose=False)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / f"{command}.config.json", dumps({"command": command, "config": cfg.to_json(),
                                                  "config_hash": cfg.hash}))
    handler = JsonLineHandler(out / "log.jsonl", command)
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    start = time.perf_counter()
    try:
        classes = class_names(cfg.data.label_mode)
        ws = Workspace(cfg=cfg, out=out, classes=classes, n_classes=len(classes))
        _event("start", config_hash=cfg.hash)
        HANDLERS[command](ws, args)
        _event("done", seconds=round(time.perf_counter() - start, 3))
        return 0
    except HFNError as exc:
        log.error(str(exc), extra={"fields": {"error": type(exc).__name__, "exit_code": exc.exit_code}})
        print(f"hfn {command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (RuntimeError, ArithmeticError, OSError) as exc:
        log.error(str(exc), extra={"fields": {"error": type(exc).__name__, "exit_code": 4}})
        print(f"hfn {command}: runtime error: {exc}", file=sys.stderr)
        return 4
    finally:
        log.removeHandler(handler)
        handler.close()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s %(levelname)s %(message)s")
    try:
        overrides = parse_overrides(args.set)
        if args.out:
            overrides["run.out"] = args.out
        cfg = parse_config(args.config, overrides)
    except HFNError as exc:
        print(f"hfn {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    torch.manual_seed(derive_seed(cfg.run.seed, "global"))
    np.random.seed(derive_seed(cfg.run.seed, "global") % 2**32)
    return run_command(args.command, cfg, args)


if __name__ == "__main__":
    sys.exit(main())
