import pytest
import torch
import torch.nn.functional as F

from lctok import ladd, nncore
from lctok.config import RunConfig
from lctok.errors import ContractViolation, InvariantViolation, StageOrderError
from lctok.ladd import LaddModel, build_ladd, phase_of

from oracles import micro_denoiser, micro_ladd, micro_vae, micro_vq, randomize


def test_build_requires_trained_base():
    with pytest.raises(StageOrderError) as err:
        build_ladd(micro_denoiser(trained=False), 4)
    assert "train-ldm" in str(err.value)


def test_copies_equal_sources_and_zero_convs_are_zero():
    base = micro_denoiser()
    m = build_ladd(base, 4)
    for copy_blk, src in zip(m.copies, m.frozen_blocks):
        sd_c, sd_s = copy_blk.state_dict(), src.state_dict()
        assert sd_c.keys() == sd_s.keys()
        assert all(torch.equal(sd_c[k], sd_s[k]) for k in sd_c)
        assert copy_blk is not src
    for zc in m.zero_convs:
        assert torch.count_nonzero(zc.weight) == 0 and torch.count_nonzero(zc.bias) == 0
        x = torch.randn(2, zc.in_channels, 5, 5)
        assert torch.equal(zc(x), torch.zeros_like(x))


def test_trainable_parameter_count():
    base = micro_denoiser(ch=4, latent_ch=2)
    cond_dim, ch = 4, 4
    src = sum(p.numel() for blk in (base.enc_blocks[0], base.enc_blocks[1], base.mid) for p in blk.parameters())
    m = build_ladd(base, cond_dim)
    zero = sum(c * c + c for c in (ch, 2 * ch, 2 * ch))
    adapter = sum(cond_dim * c + c for c in (2, ch, 2 * ch))
    assert nncore.count_trainable(m) == src + zero + adapter
    assert nncore.count_trainable(m.base) == 0


def test_init_equivalence_many_triples():
    m = build_ladd(randomize(micro_denoiser(), 3), 4)
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            z = torch.randn(1, 2, 8, 8, generator=g)
            t = torch.randint(0, 1001, (1,), generator=g)
            C = torch.randn(1, 4, int(torch.randint(1, 4, (1,), generator=g)), 3, generator=g)
            worst = max(worst, (m(z, t, C) - m.base(z, t)).abs().max().item())
    assert worst <= 1e-6


def test_copies_off_reproduces_frozen_forward_after_training_like_changes():
    m = micro_ladd()
    z = torch.randn(3, 2, 8, 8)
    t = torch.tensor([10, 500, 990])
    C = torch.randn(3, 4, 2, 2)
    with torch.no_grad():
        assert torch.allclose(m(z, t, C, copies_off=True), m.base(z, t), atol=1e-6)
        assert not torch.allclose(m(z, t, C), m.base(z, t), atol=1e-4)


def test_condition_shape_contract():
    m = micro_ladd()
    z = torch.randn(2, 2, 8, 8)
    with pytest.raises(ContractViolation):
        m(z, 5, torch.randn(2, 3, 2, 2))
    with pytest.raises(ContractViolation):
        m(z, 5, torch.randn(1, 4, 2, 2))


def test_frozen_params_get_no_gradient():
    m = micro_ladd()
    loss = m(torch.randn(2, 2, 8, 8), torch.tensor([3, 700]), torch.randn(2, 4, 2, 2)).square().mean()
    loss.backward()
    assert all(p.grad is None for p in m.base.parameters())
    assert all(p.grad is not None for mod in m.trainable_modules() for p in mod.parameters())


def test_brief_training_makes_output_condition_dependent():
    torch.manual_seed(0)
    m = build_ladd(micro_denoiser(), 4)
    opt = nncore.Adam(m, 1e-2)
    g = torch.Generator().manual_seed(1)
    z_cls = torch.stack([torch.full((2, 8, 8), 1.0), torch.full((2, 8, 8), -1.0)])
    c_cls = torch.stack([torch.full((4, 2, 2), 1.0), torch.full((4, 2, 2), -1.0)])
    for _ in range(60):
        k = torch.randint(2, (8,), generator=g)
        t = torch.randint(1, 1001, (8,), generator=g)
        eps = torch.randn(8, 2, 8, 8, generator=g)
        opt.step(ladd.conditional_loss(m, z_cls[k], c_cls[k], t, eps))
    z = torch.randn(1, 2, 8, 8, generator=g)
    with torch.no_grad():
        a = m(z, torch.tensor([500]), c_cls[:1])
        b = m(z, torch.tensor([500]), c_cls[1:])
    assert (a - b).abs().mean().item() > 0


def test_phase_schedule():
    assert [phase_of(s, [32, 64], [8, 3]) for s in (0, 7, 8, 10, 11)] == [32, 32, 64, 64, 64]


def test_train_stage1_micro_run_respects_freeze_and_curve_format():
    vq, vae = micro_vq(dim=4), micro_vae()
    nncore.freeze(vq)
    nncore.freeze(vae)
    m = micro_ladd(randomized=False)
    base_snap = nncore.snapshot(m.base)
    cfg = RunConfig(stage1_sizes=[16, 32], stage1_steps=[3, 2], cond_sizes=[8, 12], ladd_batch=2,
                    vae_latent=2)
    images = torch.rand(4, 3, 32, 32)
    res = ladd.train_stage1(m, images, vq, vae, cfg)
    assert [r[0] for r in res.curve] == list(range(5))
    assert [r[2] for r in res.curve] == [16, 16, 16, 32, 32]
    assert nncore.changed_params(m.base, base_snap) == []
    assert any(torch.count_nonzero(zc.weight) for zc in m.zero_convs)


def test_frozen_change_is_invariant_violation():
    base = micro_denoiser()
    snaps = ladd._guarded({"base": base})
    with torch.no_grad():
        next(base.parameters()).add_(1.0)
    with pytest.raises(InvariantViolation):
        ladd._assert_unchanged({"base": base}, snaps)


def test_degenerate_condition_single_code():
    vq = micro_vq(dim=4)
    C = ladd.degenerate_condition(vq, torch.zeros(2, 4, 3, 3))
    assert C.shape == (2, 4, 3, 3)
    assert torch.equal(C, C[:1, :, :1, :1].expand_as(C))
