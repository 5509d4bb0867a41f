import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_check
from hfn.decision_net import DecisionNet, apply_modality_mask, decision_forward, two_way_softmax
from hfn.errors import ContractError, MissingMediaError, ShapeError

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestPoolAndNorm:
    def test_constant_pools_to_constant(self):
        net = DecisionNet(token_dim=4, patch_dim=6)
        net.patch_norm = torch.nn.Identity()
        net.token_norm = torch.nn.Identity()
        p, t = net.pool_and_norm(torch.full((12, 3, 3, 6), 3.0), torch.full((5, 4), 3.0), training=False,
                                 batch_dims=0)
        assert torch.equal(p, torch.full((6,), 3.0)) and torch.equal(t, torch.full((4,), 3.0))

    def test_layer_norm_of_1_3(self):
        net = DecisionNet(token_dim=2, patch_dim=2)
        p, _ = net.pool_and_norm(torch.tensor([[1.0, 3.0]]), torch.zeros(1, 2), training=False, batch_dims=None)
        s = 1 / math.sqrt(1 + 1e-5)
        torch.testing.assert_close(p[0], torch.tensor([-s, s]))
        torch.testing.assert_close(p[0], torch.tensor([-1.0, 1.0]), atol=1e-5, rtol=0)

    def test_inference_is_deterministic(self):
        net = DecisionNet(token_dim=8, dropout=0.5)
        p, t = torch.randn(3, 96), torch.randn(3, 8)
        a = net.pool_and_norm(p, t, training=False)
        b = net.pool_and_norm(p, t, training=False)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_training_uses_dropout(self):
        torch.manual_seed(0)
        net = DecisionNet(token_dim=8, dropout=0.5)
        p = torch.randn(4, 96)
        a = net.pool_and_norm(p, torch.randn(4, 8), training=True)[0]
        b = net.pool_and_norm(p, torch.randn(4, 8), training=True)[0]
        assert not torch.equal(a, b)

    def test_empty_token_set(self):
        net = DecisionNet(token_dim=8)
        with pytest.raises(ContractError):
            net.pool_and_norm(torch.randn(12, 2, 2, 96), torch.zeros(0, 8), batch_dims=0)


class TestDecisionForward:
    def test_zero_params_give_half(self):
        net = DecisionNet(token_dim=2, hidden=3, patch_dim=2)
        for p in net.parameters():
            p.data.zero_()
        w = decision_forward(torch.randn(2), torch.randn(2), net)
        assert w.tolist() == [0.5, 0.5]

    def test_hand_set_h1(self):
        net = DecisionNet(token_dim=2, hidden=1, patch_dim=2).double()
        with torch.no_grad():
            net.conv1.weight.fill_(1.0)
            net.conv1.bias.zero_()
            net.conv2.weight.fill_(1.0)
            net.conv2.bias.zero_()
        x = torch.tensor([1.0, 0.0, -1.0, 2.0], dtype=torch.float64)
        # conv1: 1 + 0 - 1 + 2 = 2, ReLU keeps 2, conv2 gives logits (2, 2)
        assert decision_forward(x[:2], x[2:], net).tolist() == [0.5, 0.5]
        with torch.no_grad():
            net.conv2.weight.copy_(torch.tensor([[[1.0]], [[-1.0]]]))
        w = decision_forward(x[:2], x[2:], net)
        # logits (2, -2): w_v = e^2 / (e^2 + e^-2)
        expected = math.exp(2) / (math.exp(2) + math.exp(-2))
        assert w[0].item() == pytest.approx(expected, abs=1e-15)
        assert w[1].item() == pytest.approx(1 - expected, abs=1e-15)

    def test_width_mismatch(self):
        net = DecisionNet(token_dim=8)
        with pytest.raises(ShapeError):
            net.logits(torch.randn(1, 96), torch.randn(1, 7))

    def test_per_clip_weights(self):
        net = DecisionNet(token_dim=8).eval()
        w = net(torch.randn(2, 5, 96), torch.randn(2, 5, 8))
        assert tuple(w.shape) == (2, 5, 2)


class TestSimplex:
    @settings(max_examples=300)
    @given(a=finite, b=finite)
    def test_two_way_softmax_exact(self, a, b):
        w = two_way_softmax(torch.tensor([a, b], dtype=torch.float32))
        assert w.sum().item() == 1.0
        assert 0.0 <= w.min().item() and w.max().item() <= 1.0
        swapped = two_way_softmax(torch.tensor([b, a], dtype=torch.float32))
        assert torch.equal(swapped, w.flip(-1))

    def test_matches_softmax(self, rng):
        logits = torch.from_numpy(rng.standard_normal((1000, 2)) * 5)
        torch.testing.assert_close(two_way_softmax(logits), torch.softmax(logits, -1), rtol=1e-12, atol=1e-14)

    def test_infinite_logit(self):
        w = two_way_softmax(torch.tensor([0.3, float("-inf")]))
        assert w.tolist() == [1.0, 0.0]
        w = two_way_softmax(torch.tensor([float("-inf"), -7.0]))
        assert w.tolist() == [0.0, 1.0]


class TestModalityMask:
    def test_examples(self):
        w = torch.tensor([0.3, 0.7])
        assert apply_modality_mask(w, (True, False)).tolist() == [1.0, 0.0]
        assert torch.equal(apply_modality_mask(w, (True, True)), w)
        with pytest.raises(MissingMediaError):
            apply_modality_mask(w, (False, False))

    def test_net_masks_logits(self):
        net = DecisionNet(token_dim=8).eval()
        mask = torch.tensor([[True, False], [True, True], [False, True]])
        w = net(torch.randn(3, 4, 96), torch.randn(3, 4, 8), mask)
        assert torch.equal(w[0], torch.tensor([[1.0, 0.0]] * 4))
        assert torch.equal(w[2], torch.tensor([[0.0, 1.0]] * 4))
        assert torch.all((w[1] > 0) & (w[1] < 1))
        with pytest.raises(MissingMediaError):
            net(torch.randn(1, 4, 96), torch.randn(1, 4, 8), torch.tensor([[False, False]]))

    def test_masked_tokens_do_not_matter(self):
        net = DecisionNet(token_dim=8).eval()
        p = torch.randn(1, 3, 96)
        mask = torch.tensor([[True, False]])
        ref = net(p, torch.randn(1, 3, 8), mask)
        for _ in range(20):
            assert torch.equal(net(p, torch.randn(1, 3, 8) * 100, mask), ref)


def test_weight_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = DecisionNet(token_dim=5, hidden=4, dropout=0.0, patch_dim=6).double().eval()
    p = torch.randn(2, 3, 6, dtype=torch.float64)
    t = torch.randn(2, 3, 5, dtype=torch.float64)
    probe = torch.randn(2, 3, 2, dtype=torch.float64)

    def loss():
        return (net(p, t) * probe).sum()

    errors = finite_difference_check(loss, list(net.named_parameters()))
    assert max(errors.values()) < 1e-4, errors


def test_large_inputs_stay_on_simplex():
    net = DecisionNet(token_dim=8).eval()
    w = net(torch.randn(1, 2, 96) * 1e6, torch.randn(1, 2, 8) * 1e6)
    assert torch.isfinite(w).all()
    assert np.allclose(w.sum(-1).detach().numpy(), 1.0)
