"""Acceptance criteria, one test per criterion. Each records a PASS/FAIL line in the terminal summary."""

import dataclasses
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import ACCEPTANCE, finite_difference_check, naive_cross_attention
from hfn.dataset import class_names, make_folds
from hfn.decision_net import DecisionNet
from hfn.evaluation.ablation import ablate_modalities
from hfn.evaluation.baselines import CrossAttnFusion
from hfn.evaluation.metrics import compute_metrics
from hfn.evaluation.synthetic import SyntheticSpec, make_synthetic
from hfn.model import HFN, ModelConfig, collate
from hfn.training import TrainConfig, cosine_lr, derive_seed, early_stop, predict, run_protocol
from hfn.wmff import WMFF


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


def test_gradient_correctness(toy_synthetic):
    _, cfg, _, samples, _ = toy_synthetic
    start = time.perf_counter()
    torch.manual_seed(0)
    model = HFN(cfg, 2).double().eval()
    batch = collate(samples[:3], torch.float64)
    labels = torch.tensor([s.label for s in samples[:3]])
    assert batch.pad_mask.shape[1] == 2

    def loss():
        return F.cross_entropy(model(batch).logits, labels)

    errors = finite_difference_check(loss, [(n, p) for n, p in model.named_parameters() if p.requires_grad])
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    record("gradient correctness", errors[worst] < 1e-3 and elapsed < 60,
           f"{len(errors)} tensors, max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")


def test_attention_oracle():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 16 // heads + 1))
        L = int(rng.integers(1, 7))
        torch.manual_seed(int(rng.integers(1 << 30)))
        m = WMFF(d, n_heads=heads).eval()
        q, kv = torch.randn(L, d, generator=g), torch.randn(L, d, generator=g)
        out = m.cross_attention(q, kv).detach().double().numpy()
        worst = max(worst, float(np.abs(out - naive_cross_attention(m, q, kv)).max()))
    elapsed = time.perf_counter() - start
    record("attention oracle", worst <= 1e-6 and elapsed < 10, f"max abs err {worst:.2e}, {elapsed:.2f}s")


def test_simplex_invariant():
    torch.manual_seed(0)
    worst, bounded = 0.0, True
    net = DecisionNet(token_dim=8, hidden=4, patch_dim=16).eval()
    for i in range(100):
        scale = 10.0 ** (i % 7 - 2)
        with torch.no_grad():
            for p in net.parameters():
                p.normal_(0, 1 + i % 5)
            w = net(torch.randn(100, 1, 16) * scale, torch.randn(100, 1, 8) * scale)
        worst = max(worst, float((w.sum(-1).double() - 1).abs().max()))
        bounded &= bool(((w >= 0) & (w <= 1)).all())
    record("simplex invariant", worst < 1e-7 and bounded,
           f"10000 forwards, max |w_v + w_a - 1| = {worst:.1e}, bounds held: {bounded}")


def test_masking_contract(toy_synthetic):
    ds, _, model, _, _ = toy_synthetic
    records = [r for r in ds.records if r.audio_ref is not None][:3]
    rng = np.random.default_rng(0)
    ref_a = predict(model, model.featurize(records, "binary"), audio=False).logits
    ref_t = predict(model, model.featurize(records, "binary"), text=False).logits
    same_a = same_t = True
    for _ in range(100):
        noisy = [dataclasses.replace(r, audio_ref=rng.uniform(-1, 1, len(r.audio_ref)).astype(np.float32))
                 for r in records]
        same_a &= np.array_equal(predict(model, model.featurize(noisy, "binary"), audio=False).logits, ref_a)
        words = ["".join(rng.choice(list("abcxyz"), 4)) for _ in range(6)]
        noisy = [dataclasses.replace(r, caption=" ".join(words), username=words[0], hashtags=["#" + words[1]])
                 for r in records]
        same_t &= np.array_equal(predict(model, model.featurize(noisy, "binary"), text=False).logits, ref_t)
    record("masking contract", same_a and same_t,
           f"100 audio fuzzes identical: {same_a}; 100 text fuzzes identical: {same_t}")


def test_ablation_equivalence():
    rng = np.random.default_rng(1)
    exact = 0
    for i in range(50):
        L, heads = int(rng.integers(1, 7)), int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 5))
        torch.manual_seed(i)
        wmff = WMFF(d, n_heads=heads).eval()
        base = CrossAttnFusion(d, n_heads=heads).eval()
        base.wmff.load_state_dict(wmff.state_dict())
        v, a = torch.randn(2, L, d), torch.randn(2, L, d)
        pad = torch.zeros(2, L, dtype=torch.bool)
        pad[1, L // 2 + 1:] = True
        idx = torch.arange(L)
        exact += torch.equal(wmff(v, a, torch.ones(2, L, 2), idx, pad), base(v, a, idx, pad))
    record("ablation equivalence", exact == 50, f"{exact}/50 instances bit-identical")


@pytest.fixture(scope="module")
def synthetic_run():
    start = time.perf_counter()
    ds = make_synthetic(SyntheticSpec(n=600, k=4, planted="video", noise=0.5, n_classes=2, seed=0))
    cfg = ModelConfig(frame_size=32, sr=1000)
    classes = class_names("binary")
    torch.manual_seed(0)
    samples = HFN(cfg, 2).featurize(ds.records, "binary")

    def factory(seed):
        torch.manual_seed(seed)
        return HFN(cfg, 2)

    result = run_protocol(samples, TrainConfig(max_epochs=60, patience=15), factory, classes, keep_models=True)
    return result, samples, classes, time.perf_counter() - start


def test_synthetic_learning(synthetic_run):
    result, samples, _, elapsed = synthetic_run
    w_v, w_a = [], []
    for model, plan in zip(result.models, result.plans):
        batch = collate([samples[i] for i in plan.test])
        with torch.no_grad():
            weights = model.eval()(batch).weights
        both = batch.modality.all(1)
        w = weights[both][~batch.pad_mask[both]]
        w_v.append(w[:, 0].mean().item())
        w_a.append(w[:, 1].mean().item())
    f1 = result.report.macro_f1
    ok = f1 >= 0.90 and elapsed < 300 and np.mean(w_v) > np.mean(w_a)
    record("synthetic learning", ok,
           f"mean macro F1 {f1:.4f} over {len(result.repetitions)} repetitions, "
           f"w_v {np.mean(w_v):.3f} vs w_a {np.mean(w_a):.3f}, {elapsed:.0f}s")


def test_ablation_ordering(synthetic_run):
    result, samples, classes, _ = synthetic_run
    tables = [ablate_modalities(m, [samples[i] for i in p.test], classes, ["video only", "multimodal"])
              for m, p in zip(result.models, result.plans)]
    multi = float(np.mean([t.rows["multimodal"].macro_f1 for t in tables]))
    video = float(np.mean([t.rows["video only"].macro_f1 for t in tables]))
    record("ablation ordering", multi >= video - 0.02 and abs(multi - video) <= 0.05,
           f"multimodal {multi:.4f}, video only {video:.4f}")


def test_protocol_exactness():
    cfg = TrainConfig()
    endpoints = cosine_lr(0, cfg) == 1e-4 and cosine_lr(cfg.max_epochs, cfg) == 1e-6
    stops = (not early_stop([0.5] * 30, 30) and early_stop([0.5] * 31, 30)
             and not any(early_stop(list(np.linspace(0, 1, n)), 30) for n in range(1, 201))
             and not early_stop([0.1] * 5 + [0.9] + [0.2] * 29, 30)
             and early_stop([0.1] * 5 + [0.9] + [0.2] * 30, 30))
    sizes = {(len(p.train), len(p.val), len(p.test)) for p in make_folds(600, derive_seed(0, "folds"), 3)}
    record("protocol exactness", endpoints and stops and sizes == {(400, 100, 100)},
           f"cosine endpoints exact: {endpoints}; early-stop cases: {stops}; split sizes {sorted(sizes)}")


def brute_force_macro_f1(preds, truth, k):
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(preds, truth):
        cm[t][p] += 1
    f1s = []
    for c in range(k):
        tp = cm[c][c]
        predicted = sum(cm[r][c] for r in range(k))
        actual = sum(cm[c])
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(tp_row[i] for i, tp_row in enumerate(cm)) / len(truth), sum(f1s) / k


def test_metric_oracle():
    rng = np.random.default_rng(0)
    classes = ["Fake", "Real", "Ambiguous"]
    worst = 0.0
    for i in range(1000):
        k = 2 + i % 2
        n = int(rng.integers(1, 60))
        preds, truth = rng.integers(0, k, n).tolist(), rng.integers(0, k, n).tolist()
        report = compute_metrics(preds, truth, classes[:k])
        acc, f1 = brute_force_macro_f1(preds, truth, k)
        worst = max(worst, abs(report.accuracy - acc), abs(report.macro_f1 - f1))
    record("metric oracle", worst <= 1e-12, f"1000 label vectors, max abs diff {worst:.1e}")
