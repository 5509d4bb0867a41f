"""Training protocol: cross-entropy + AdamW, cosine schedule per epoch, macro-F1 early stopping,
and the repeated 6-part split driver."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from hfn.dataset import make_folds
from hfn.errors import MissingInputError, TrainingError, ValidationError
from hfn.evaluation.metrics import MetricsReport, compute_metrics, mean_report
from hfn.model import HFN, FeatureBatch, ModelConfig, Sample, collate

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 150
    patience: int = 30
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0
    crop: int = 224
    fps: int = 3
    repetitions: int = 3

    def __post_init__(self):
        if not self.lr_min < self.lr:
            raise ValidationError(f"lr_min ({self.lr_min}) must be below lr ({self.lr})")
        if not 0 < self.patience < self.max_epochs:
            raise ValidationError(f"patience ({self.patience}) must be in (0, max_epochs={self.max_epochs})")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr`` at epoch 0 down to ``lr_min`` at ``max_epochs``.

    Written as a convex combination so both endpoints are exact.
    """
    if not 0 <= epoch <= cfg.max_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    c = 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))
    return cfg.lr_min * (1.0 - c) + cfg.lr * c


def best_index(history: Sequence[float]) -> int:
    """Index of the best value; ties go to the earliest epoch."""
    return int(np.argmax(np.asarray(history, dtype=np.float64)))


def early_stop(history: Sequence[float], patience: int = 30) -> bool:
    """True once ``patience`` epochs have passed since the best validation score."""
    if len(history) == 0:
        raise ValidationError("early_stop needs a non-empty history")
    return len(history) - 1 - best_index(history) >= patience


@dataclass
class TrainState:
    epoch: int = -1
    best_val_macro_f1: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    best_params: dict | None = field(default=None, repr=False)
    rng_state: torch.Tensor | None = field(default=None, repr=False)


@dataclass
class FoldResult:
    best_params: dict
    state: TrainState
    history: list[dict]


@dataclass
class PredictionSet:
    ids: list[str]
    logits: np.ndarray
    probs: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray
    weights: list[np.ndarray]  # per video, k x 2 (non-pad clips only)

    def records(self, classes: Sequence[str]) -> list[dict]:
        out = []
        for i, vid in enumerate(self.ids):
            out.append({
                "id": vid,
                "probs": [float(p) for p in self.probs[i]],
                "predicted": classes[int(self.predicted[i])],
                "decision_weights": {str(c): [float(w[0]), float(w[1])] for c, w in enumerate(self.weights[i])},
            })
        return out


def model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(p for p in model.parameters() if p.requires_grad).dtype


@torch.no_grad()
def predict(model: HFN, data: Sequence[Sample] | FeatureBatch, batch_size: int = 64,
            audio: bool = True, text: bool = True) -> PredictionSet:
    """Inference-mode predictions; ``audio``/``text`` False masks that modality out."""
    was_training = model.training
    model.eval()
    full = data if isinstance(data, FeatureBatch) else collate(data, model_dtype(model))
    logits, weights = [], []
    for start in range(0, len(full), batch_size):
        batch = full.select(range(start, min(start + batch_size, len(full))))
        if not (audio and text):
            batch = batch.masked(audio=audio, text=text)
        out = model(batch)
        logits.append(out.logits.double())
        for row, pad in zip(out.weights, batch.pad_mask):
            weights.append(row[~pad].double().numpy())
    model.train(was_training)
    logits_t = torch.cat(logits)
    probs = torch.softmax(logits_t, dim=-1)
    return PredictionSet(
        ids=list(full.ids), logits=logits_t.numpy(), probs=probs.numpy(), predicted=probs.argmax(-1).numpy(),
        labels=full.labels.numpy(), weights=weights,
    )


def evaluate(model: HFN, data, classes: Sequence[str], provenance: dict | None = None, **mask) -> MetricsReport:
    preds = predict(model, data, **mask)
    return compute_metrics(preds.predicted.tolist(), preds.labels.tolist(), classes, provenance)


def params_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def make_optimizer(model: HFN, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW over trainable parameters only: decay is decoupled from the moment estimates."""
    return torch.optim.AdamW(
        model.trainable_parameters(), lr=cosine_lr(0, cfg), betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def train_fold(model: HFN, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig,
               classes: Sequence[str], log_fn: Callable[[dict], None] | None = None) -> FoldResult:
    """Train ``model`` in place and return the best-validation parameters.

    Each epoch shuffles the training set into mini-batches, takes one AdamW step
    per batch, sets the next epoch's learning rate, and scores macro F1 on the
    validation set. Training stops early when macro F1 has not improved for
    ``cfg.patience`` epochs.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("train_fold needs non-empty training and validation sets")
    dtype = model_dtype(model)
    train_batch = collate(train_set, dtype)
    val_batch = collate(val_set, dtype)
    optimizer = make_optimizer(model, cfg)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    state = TrainState()
    history: list[dict] = []
    f1_history: list[float] = []

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.max_epochs):
            lr = cosine_lr(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.randperm(len(train_batch), generator=shuffle)
            total, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = train_batch.select(order[start:start + cfg.batch_size])
                loss = F.cross_entropy(model(batch).logits, batch.labels)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
                optimizer.step()
                total += loss.item() * len(batch)
                seen += len(batch)

            val = evaluate(model, val_batch, classes)
            f1_history.append(val.macro_f1)
            state.epoch = epoch
            if val.macro_f1 > state.best_val_macro_f1:
                state.best_val_macro_f1 = val.macro_f1
                state.best_epoch = epoch
                state.epochs_since_improvement = 0
                state.best_params = copy.deepcopy(model.state_dict())
            else:
                state.epochs_since_improvement += 1
            entry = {"epoch": epoch, "loss": total / seen, "lr": lr,
                     "val_accuracy": val.accuracy, "val_macro_f1": val.macro_f1}
            history.append(entry)
            if log_fn is not None:
                log_fn(entry)
            log.debug("epoch %d loss %.4f val macro F1 %.4f", epoch, entry["loss"], val.macro_f1)
            if early_stop(f1_history, cfg.patience):
                break
        state.rng_state = torch.get_rng_state()

    model.load_state_dict(state.best_params)
    return FoldResult(best_params=state.best_params, state=state, history=history)


@dataclass
class ProtocolResult:
    report: MetricsReport
    repetitions: list[MetricsReport]
    plans: list
    histories: list[list[dict]]
    models: list[HFN] = field(default_factory=list, repr=False)


def derive_seed(master: int, *names) -> int:
    """Component seed from the master seed and a name path (stable across runs and platforms)."""
    digest = hashlib.sha256(json.dumps([master, *names]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def run_protocol(samples: Sequence[Sample], cfg: TrainConfig, model_factory: Callable[[int], HFN],
                 classes: Sequence[str], keep_models: bool = False,
                 log_fn: Callable[[dict], None] | None = None,
                 only: Sequence[int] | None = None) -> ProtocolResult:
    """Repeated random 6-part splits: 4 parts train, 1 validates, 1 tests.

    ``model_factory(seed)`` builds a fresh model per repetition. The returned
    report is the mean of the per-repetition test reports. ``only`` restricts
    the run to a subset of repetition indices (splits and seeds unchanged).
    """
    if len(samples) < 6:
        raise ValidationError(f"protocol needs at least 6 samples, got {len(samples)}")
    plans = make_folds(len(samples), derive_seed(cfg.seed, "folds"), cfg.repetitions)
    if only is not None:
        bad = [r for r in only if not 0 <= r < cfg.repetitions]
        if bad:
            raise ValidationError(f"repetitions {bad} outside [0, {cfg.repetitions})")
        plans = [plans[r] for r in sorted(set(only))]
    reports, histories, models = [], [], []
    for plan in plans:
        rep = plan.repetition
        pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
        rep_cfg = TrainConfig(**{**asdict(cfg), "seed": derive_seed(cfg.seed, "train", rep)})
        model = model_factory(derive_seed(cfg.seed, "init", rep))
        rep_log = None if log_fn is None else (lambda e, r=rep: log_fn({"repetition": r, **e}))
        result = train_fold(model, pick(plan.train), pick(plan.val), rep_cfg, classes, rep_log)
        report = evaluate(model, pick(plan.test), classes, provenance={
            "repetition": rep, "n_train": len(plan.train), "n_val": len(plan.val), "n_test": len(plan.test),
            "best_epoch": result.state.best_epoch, "best_val_macro_f1": result.state.best_val_macro_f1,
        })
        reports.append(report)
        histories.append(result.history)
        if keep_models:
            models.append(model)
    return ProtocolResult(
        report=mean_report(reports, {"seed": cfg.seed}), repetitions=reports, plans=plans,
        histories=histories, models=models,
    )


def config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: HFN, meta: dict | None = None) -> Path:
    """Write config, class count, config hash and named tensors to one torch file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.cfg)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": cfg,
        "config_hash": config_hash(cfg),
        "n_classes": model.n_classes,
        "meta": json.dumps(meta or {}, sort_keys=True),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[HFN, dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg = ModelConfig(**payload["model_config"])
    if config_hash(asdict(cfg)) != payload["config_hash"]:
        raise ValidationError("checkpoint config hash mismatch")
    model = HFN(cfg, payload["n_classes"])
    if payload["state_dict"]["classifier.fc.weight"].dtype == torch.float64:
        model.double()
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, json.loads(payload["meta"])
