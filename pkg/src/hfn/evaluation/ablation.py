"""Modality-loss and fusion-scheme ablations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from hfn.errors import ValidationError
from hfn.evaluation.metrics import MetricsReport, mean_report, reports_to_csv

# config name -> (keep audio, keep text); video is always kept
MODALITY_CONFIGS = {
    "video only": (False, False),
    "video audio": (True, False),
    "video text": (False, True),
    "multimodal": (True, True),
}

FUSION_ROWS = {
    "concat": "Concatenate",
    "add": "Add",
    "cross_attn": "Cross-Attn",
    "wmff": "WMFF without DN",
    "wmff_dn": "WMFF with DN",
}


@dataclass
class AblationTable:
    kind: str
    rows: dict[str, MetricsReport] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "provenance": self.provenance, "order": list(self.rows),
                "rows": {name: r.to_json() for name, r in self.rows.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "AblationTable":
        order = obj.get("order", list(obj["rows"]))
        return cls(obj["kind"], {k: MetricsReport.from_json(obj["rows"][k]) for k in order},
                   obj.get("provenance", {}))

    def to_csv(self) -> str:
        return reports_to_csv(self.rows)

    def macro_f1(self) -> dict[str, float]:
        return {name: r.macro_f1 for name, r in self.rows.items()}


def _check_config(name: str) -> tuple[bool, bool]:
    if name not in MODALITY_CONFIGS:
        if "video" not in name:
            raise ValidationError(f"ablation config {name!r} drops video, which is unsupported")
        raise ValidationError(f"unknown ablation config {name!r}; expected one of {list(MODALITY_CONFIGS)}")
    return MODALITY_CONFIGS[name]


def ablate_modalities(model, samples, classes: Sequence[str], configs: Sequence[str] = tuple(MODALITY_CONFIGS),
                      provenance: dict | None = None) -> AblationTable:
    """Re-evaluate a trained model with modalities masked out. No retraining, no parameter changes."""
    from hfn.training import evaluate  # training imports the model, which imports this package

    plan = [(name, _check_config(name)) for name in configs]
    table = AblationTable("modality", provenance=dict(provenance or {}))
    for name, (audio, text) in plan:
        table.rows[name] = evaluate(model, samples, classes, provenance={"config": name}, audio=audio, text=text)
    return table


def mean_tables(tables: Sequence[AblationTable]) -> AblationTable:
    if not tables:
        raise ValidationError("no ablation tables to average")
    names = list(tables[0].rows)
    rows = {name: mean_report([t.rows[name] for t in tables], {"config": name}) for name in names}
    return AblationTable(tables[0].kind, rows, {"repetitions": len(tables)})


def fusion_ablation(samples, model_cfg, train_cfg, classes: Sequence[str],
                    build_model: Callable, kinds: Sequence[str] = tuple(FUSION_ROWS),
                    only: Sequence[int] | None = None) -> AblationTable:
    """Train and test one model per fusion scheme on identical splits and seeds.

    ``build_model(model_cfg, seed)`` must return a fresh model for a config.
    """
    from hfn.training import run_protocol

    table = AblationTable("fusion", provenance={"kinds": list(kinds)})
    for kind in kinds:
        if kind not in FUSION_ROWS:
            raise ValidationError(f"unknown fusion kind {kind!r}")
        cfg = replace(model_cfg, fusion=kind)
        result = run_protocol(samples, train_cfg, lambda seed, c=cfg: build_model(c, seed), classes, only=only)
        table.rows[FUSION_ROWS[kind]] = result.report
    return table


def dumps_table(table: AblationTable) -> str:
    return json.dumps(table.to_json(), indent=2, sort_keys=True) + "\n"
