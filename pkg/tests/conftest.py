from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from hfn.dataset import class_names
from hfn.evaluation.synthetic import SyntheticSpec, make_synthetic
from hfn.model import HFN, ModelConfig

# criterion name -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}

TOY = dict(d=8, d_h=8, d_f=8, n_heads=2, dn_hidden=4, d_swin=8, d_clap=8, token_dim=8, d_text=8,
           text_buckets=64, frame_size=32, sr=1000)


def toy_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TOY, **kw})


ZERO_GRAD = 1e-6


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||); absolute difference when both are numerically zero."""
    scale = max(a.norm().item(), b.norm().item())
    diff = (a - b).norm().item()
    return diff if scale < ZERO_GRAD else diff / scale


def finite_difference_check(loss_fn, params, step: float = 1e-5) -> dict[str, float]:
    """Relative error between autograd and central differences for each named parameter tensor."""
    errors = {}
    for name, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    for name, p in params:
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
        errors[name] = relative_error(analytic, numeric)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_synthetic():
    """Small planted-video dataset featurized with the toy model config."""
    spec = SyntheticSpec(n=24, k=2, seed=3)
    ds = make_synthetic(spec)
    cfg = toy_config()
    torch.manual_seed(0)
    model = HFN(cfg, 2)
    samples = model.featurize(ds.records, "binary")
    return ds, cfg, model, samples, class_names("binary")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def naive_cross_attention(module, q_seq, kv_seq, pad_mask=None) -> np.ndarray:
    """Explicit O(L^2) loop over heads, queries and keys using the module's projections."""
    W = {n: getattr(module, n).weight.detach().double().numpy() for n in ("q_proj", "k_proj", "v_proj")}
    B = {n: getattr(module, n).bias.detach().double().numpy() for n in ("q_proj", "k_proj", "v_proj")}
    q_in = np.asarray(q_seq, dtype=np.float64)
    kv_in = np.asarray(kv_seq, dtype=np.float64)
    lq, lk = len(q_in), len(kv_in)
    h, dk = module.n_heads, module.d_k
    out = np.zeros((lq, h * dk))
    for head in range(h):
        cols = slice(head * dk, (head + 1) * dk)
        for i in range(lq):
            q = W["q_proj"][cols] @ q_in[i] + B["q_proj"][cols]
            scores = []
            for j in range(lk):
                if pad_mask is not None and pad_mask[j]:
                    scores.append(-math.inf)
                    continue
                k = W["k_proj"][cols] @ kv_in[j] + B["k_proj"][cols]
                scores.append(sum(q[c] * k[c] for c in range(dk)) / math.sqrt(dk))
            top = max(scores)
            expd = [math.exp(s - top) if s != -math.inf else 0.0 for s in scores]
            total = sum(expd)
            for j in range(lk):
                v = W["v_proj"][cols] @ kv_in[j] + B["v_proj"][cols]
                out[i, cols] += expd[j] / total * v
    return out
