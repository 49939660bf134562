import copy
import math

import numpy as np
import pytest
import torch
from torch import nn

from lctok import nncore
from lctok.errors import ContractViolation, TrainingDivergence
from lctok.nncore import Adam, OptimizerState, adam_step, grad, stop_gradient

from oracles import central_diff, rel_err


def test_grad_sum_of_squares():
    p = torch.tensor([1.0, -2.0], requires_grad=True)
    (g,) = grad((p ** 2).sum(), [p])
    assert g.tolist() == [2.0, -4.0]


def test_grad_constant_loss_is_zero():
    p = torch.randn(3, requires_grad=True)
    (g,) = grad(torch.tensor(5.0), [p])
    assert torch.equal(g, torch.zeros(3))


def test_grad_frozen_param_gets_none():
    a = torch.randn(3, requires_grad=True)
    b = torch.randn(3)
    ga, gb = grad((a * b).sum(), [a, b])
    assert gb is None and torch.equal(ga, b)


def test_grad_rejects_non_scalar_and_nan():
    p = torch.randn(3, requires_grad=True)
    with pytest.raises(ContractViolation):
        grad(p * 2, [p])
    with pytest.raises(TrainingDivergence):
        grad((p * float("nan")).sum(), [p])


def test_grad_three_layer_net_matches_finite_differences():
    # 10 parameters: 1->3 (6), 3->1 (4)
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(1, 3), nn.Tanh(), nn.Linear(3, 1)).double()
    assert sum(p.numel() for p in net.parameters()) == 10
    x = torch.randn(8, 1, dtype=torch.float64)
    params = list(net.parameters())
    loss_fn = lambda: (net(x) ** 2).mean()
    ad = torch.cat([g.flatten() for g in grad(loss_fn(), params)]).numpy()
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    fd = central_diff(loss_fn, params, coords, h=1e-4)
    assert rel_err(ad, fd) < 1e-3
    # per-component as well
    assert np.all(np.abs(ad - fd) <= 1e-3 * np.maximum(np.abs(fd), 1e-6) + 1e-9)


def test_adam_zero_gradient_is_noop():
    p = {"w": torch.randn(4, requires_grad=True)}
    before = p["w"].detach().clone()
    st = OptimizerState(lr=0.1)
    for _ in range(5):
        adam_step(p, {"w": torch.zeros(4)}, st)
    assert torch.equal(p["w"].detach(), before)
    assert st.step == 5


def test_adam_first_step_hand_computed():
    w = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    st = OptimizerState(lr=0.1)
    adam_step({"w": w}, {"w": torch.tensor([1.0], dtype=torch.float64)}, st)
    # m1 = 0.1 g, v1 = 0.01 g^2; bias-corrected m/v = g, g^2 -> step = lr * g / (|g| + eps)
    expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert w.item() == pytest.approx(expected, abs=1e-15)


def test_adam_second_step_hand_computed():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    st = OptimizerState(lr=0.01)
    g1, g2 = 2.0, -1.0
    adam_step({"w": w}, {"w": torch.tensor([g1], dtype=torch.float64)}, st)
    adam_step({"w": w}, {"w": torch.tensor([g2], dtype=torch.float64)}, st)
    b1, b2 = 0.9, 0.99
    x = 0.0
    m = v = 0.0
    for k, g in enumerate([g1, g2], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= 0.01 * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + 1e-8)
    assert w.item() == pytest.approx(x, abs=1e-15)


def test_adam_default_betas():
    st = OptimizerState(lr=1.0)
    assert (st.beta1, st.beta2) == (0.9, 0.99)


def test_adam_identical_params_identical_trajectories():
    a = torch.tensor([1.0, 1.0], requires_grad=True)
    st = OptimizerState(lr=0.05)
    for k in range(10):
        adam_step({"a": a}, {"a": torch.full((2,), math.sin(k))}, st)
    assert a[0].item() == a[1].item()


def test_adam_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_step({"w": torch.zeros(3, requires_grad=True)}, {"w": torch.zeros(4)}, OptimizerState(lr=0.1))


def test_adam_deterministic():
    def run():
        torch.manual_seed(0)
        net = nn.Linear(4, 2)
        opt = Adam(net, 1e-2)
        x = torch.randn(16, 4)
        for _ in range(5):
            opt.step((net(x) ** 2).mean())
        return net.weight.detach().clone()
    assert torch.equal(run(), run())


def test_frozen_parameters_untouched_by_adam():
    net = nn.Sequential(nn.Linear(3, 3), nn.Linear(3, 1))
    nncore.freeze(net[0])
    snap = nncore.snapshot(net[0])
    opt = Adam(net, 0.1)
    opt.step((net(torch.randn(5, 3)) ** 2).mean())
    assert nncore.changed_params(net[0], snap) == []


def test_stop_gradient_forward_identity_bitwise():
    x = torch.randn(100, requires_grad=True)
    assert torch.equal(stop_gradient(x), x.detach())


def test_stop_gradient_product_rule():
    x = torch.randn(10, requires_grad=True)
    (g,) = torch.autograd.grad((stop_gradient(x) * x).sum(), [x])
    assert torch.equal(g, x.detach())


def test_stop_gradient_fully_detached_path():
    x = torch.randn(10, requires_grad=True)
    loss = stop_gradient(torch.sin(x)).sum() + 0.0 * x.sum()
    (g,) = torch.autograd.grad(loss, [x])
    assert torch.equal(g, torch.zeros(10))


def test_run_steps_resume_is_bit_exact():
    def make():
        torch.manual_seed(1)
        return nn.Linear(3, 1)
    data = torch.randn(64, 3)

    def train(net, resume=None, stop=None):
        gen = torch.Generator().manual_seed(7)
        opt = Adam(net, 1e-2)
        saved = []

        def step_fn(step):
            idx = torch.randint(64, (8,), generator=gen)
            opt.step((net(data[idx]) ** 2).mean())

        def cb(st, modules):
            saved.append((copy.deepcopy(st), copy.deepcopy(modules["net"].state_dict())))

        nncore.run_steps(20, step_fn, opt, gen, resume, cb, 5, {"net": net})
        return saved

    full = make()
    saved = train(full)
    assert [s.step for s, _ in saved] == [5, 10, 15]
    st, weights = saved[1]
    resumed = make()
    resumed.load_state_dict(weights)
    train(resumed, resume=st)
    for a, b in zip(full.parameters(), resumed.parameters()):
        assert torch.equal(a, b)
