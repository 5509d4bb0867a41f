"""Parameter counts and inference timing."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, replace

import torch

from hfn.model import collate

BYTES_PER_PARAM = 4


@dataclass
class EfficiencyProfile:
    param_count: int
    trainable_params: int
    frozen_params: int
    param_mb: float
    infer_seconds: float
    infer_seconds_with_extraction: float | None
    repeats: int
    probe_size: int

    def to_json(self) -> dict:
        return asdict(self)


def count_parameters(module: torch.nn.Module) -> tuple[int, int]:
    """(trainable, frozen) element counts over registered parameters."""
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in module.parameters() if not p.requires_grad)
    return trainable, frozen


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


@torch.no_grad()
def efficiency_profile(model, probe, probe_clips=None, repeats: int = 5) -> EfficiencyProfile:
    """Median wall time of ``repeats`` forward passes over the probe batch.

    ``probe`` holds cached-feature samples; when the matching ``probe_clips``
    (segmented media) are given, a second timing includes frozen extraction.
    """
    repeats = max(repeats, 5)
    trainable, frozen = count_parameters(model)
    dtype = next(p for p in model.parameters() if p.requires_grad).dtype
    was_training = model.training
    model.eval()
    batch = collate(probe, dtype)
    cached = _median_time(lambda: model(batch), repeats)
    with_extraction = None
    if probe_clips is not None:
        def full():
            fresh = [replace(s, clips=model.extractors.extract(c)) for s, c in zip(probe, probe_clips)]
            model(collate(fresh, dtype))
        with_extraction = _median_time(full, repeats)
    model.train(was_training)
    total = trainable + frozen
    return EfficiencyProfile(
        param_count=total, trainable_params=trainable, frozen_params=frozen,
        param_mb=total * BYTES_PER_PARAM / 2**20, infer_seconds=cached,
        infer_seconds_with_extraction=with_extraction, repeats=repeats, probe_size=len(probe),
    )
