import numpy as np
import pytest
import torch
from torch import nn

from raingen.networks import (ArchConfig, BNet, Discriminator, Generator, RNet, SelfAttention,
                              count_parameters, gradient_penalty)

from oracles import directional_diff

SMALL = dict(latent_dim=8, rnet_base=4, gen_base=4, disc_base=4, max_width=16,
             bnet_width=4, bnet_stages=2, bnet_resblocks=1)


@pytest.fixture(scope="module")
def full_cfg():
    return ArchConfig()


def test_arch_defaults():
    cfg = ArchConfig()
    assert (cfg.patch_size, cfg.latent_dim, cfg.bnet_stages, cfg.bnet_resblocks) == (64, 128, 6, 5)
    assert cfg.leaky_slope == 0.1 and cfg.attention_last_k == 2
    assert cfg.n_blocks == 5 and cfg.n_disc_blocks == 4
    assert cfg.rnet_widths == (32, 64, 128, 256, 512)
    assert cfg.gen_widths == (512, 256, 128, 64, 32)
    assert cfg.disc_widths == (64, 128, 256, 512)


@pytest.mark.parametrize("size", [16, 48, 100])
def test_arch_rejects_bad_patch_size(size):
    with pytest.raises(ValueError):
        ArchConfig(patch_size=size)


def test_rnet_reference_batch_shapes(full_cfg):
    torch.manual_seed(0)
    rnet = RNet(full_cfg)
    post = rnet(torch.rand(18, 3, 64, 64))
    assert post.alpha.shape == (18, 128) and post.beta.shape == (18, 128)
    assert bool((post.beta > 0).all())


def test_rnet_deterministic():
    torch.manual_seed(0)
    rnet = RNet(ArchConfig(**SMALL))
    o = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a, b, c = rnet(torch.cat([o, o])), rnet(o), rnet(o)
    assert torch.equal(b.alpha, c.alpha) and torch.equal(b.beta, c.beta)
    # batched kernels may reorder sums
    torch.testing.assert_close(a.alpha[0], a.alpha[1], rtol=0, atol=1e-6)
    torch.testing.assert_close(a.alpha[:1], b.alpha, rtol=0, atol=1e-6)


def test_rnet_zero_head_gives_prior():
    rnet = RNet(ArchConfig(**SMALL)).zero_head_()
    post = rnet(torch.zeros(2, 3, 64, 64))
    assert torch.equal(post.alpha, torch.zeros(2, 8))
    assert torch.equal(post.beta, torch.ones(2, 8))


def test_rnet_wrong_size():
    with pytest.raises(ValueError):
        RNet(ArchConfig(**SMALL))(torch.zeros(1, 3, 32, 32))


def test_bnet_shape_contract():
    cfg = ArchConfig(**SMALL)
    post = BNet(cfg)(torch.rand(2, 3, 64, 64))
    assert post.mu.shape == (2, 3, 64, 64) and post.sigma2.shape == (2, 3, 64, 64)
    assert bool((post.sigma2 > 0).all())


def test_bnet_parameter_count_independent_of_stages():
    counts = {s: count_parameters(BNet(ArchConfig(**{**SMALL, "bnet_stages": s}))) for s in (1, 3, 6, 9)}
    assert len(set(counts.values())) == 1


def test_bnet_fully_convolutional():
    torch.manual_seed(1)
    bnet = BNet(ArchConfig(**SMALL))
    assert bnet(torch.rand(1, 3, 24, 40)).mu.shape == (1, 3, 24, 40)
    assert bnet(torch.rand(1, 3, 24, 80)).mu.shape == (1, 3, 24, 80)


def test_bnet_initial_logvar():
    post = BNet(ArchConfig(**SMALL), init_logvar=np.log(1e-6))(torch.rand(1, 3, 16, 16))
    np.testing.assert_allclose(post.sigma2.detach().numpy(), 1e-6, rtol=1e-5)


def test_generator_reference_shapes(full_cfg):
    torch.manual_seed(0)
    g = Generator(full_cfg)
    r = g(torch.randn(2, 128))
    assert r.shape == (2, 3, 64, 64)


def test_generator_deterministic_and_nonnegative():
    torch.manual_seed(2)
    g = Generator(ArchConfig(**SMALL))
    z = torch.randn(1000, 8)
    with torch.no_grad():
        r1, r2 = g(z), g(z)
    assert torch.equal(r1, r2)
    assert float(r1.min()) >= 0.0


def test_generator_wrong_latent_length():
    with pytest.raises(ValueError):
        Generator(ArchConfig(**SMALL))(torch.randn(2, 9))


@pytest.mark.parametrize("size", [32, 64, 128])
def test_shape_closure(size):
    cfg = ArchConfig(**{**SMALL, "patch_size": size})
    torch.manual_seed(0)
    post = RNet(cfg)(torch.rand(2, 3, size, size))
    assert post.alpha.shape == (2, 8)
    assert Generator(cfg)(post.alpha).shape == (2, 3, size, size)


def test_discriminator_scalar_per_sample(full_cfg):
    torch.manual_seed(0)
    d = Discriminator(full_cfg)
    assert d(torch.rand(3, 3, 64, 64)).shape == (3,)
    with pytest.raises(ValueError):
        d(torch.rand(1, 3, 32, 32))


def test_discriminator_layout():
    d = Discriminator(ArchConfig(**SMALL))
    blocks = list(d.blocks)
    assert len(blocks) == 4
    with_attn = [any(isinstance(m, SelfAttention) for m in b) for b in blocks]
    assert with_attn == [False, False, True, True]
    slopes = {m.negative_slope for m in d.modules() if isinstance(m, nn.LeakyReLU)}
    assert slopes == {0.1}


def test_spectral_norm_bound_vs_svd():
    torch.manual_seed(3)
    d = Discriminator(ArchConfig(**SMALL))
    x = torch.rand(4, 3, 64, 64)
    for _ in range(5):
        d(x)
    weights = d.normalized_weights()
    assert len(weights) == 5 + 3 * 2  # convs + q/k/v of two attention blocks
    for name, w in weights.items():
        top = np.linalg.svd(w.detach().reshape(w.shape[0], -1).numpy(), compute_uv=False)[0]
        assert 0.95 <= top <= 1.05, name


def test_attention_zero_gate_is_identity():
    torch.manual_seed(4)
    attn = SelfAttention(8)
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(attn(x), x)
    with torch.no_grad():
        attn.gate.fill_(0.5)
    assert not torch.equal(attn(x), x)


class LinearCritic(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, x):
        return (x.reshape(x.shape[0], -1) * self.w).sum(1)


def _unit(n, seed):
    v = torch.as_tensor(np.random.default_rng(seed).normal(size=n), dtype=torch.float64)
    return v / v.norm()


def test_gradient_penalty_unit_norm_linear_critic():
    critic = LinearCritic(_unit(3 * 8 * 8, 0))
    real, fake = torch.rand(6, 3, 8, 8, dtype=torch.float64), torch.rand(6, 3, 8, 8, dtype=torch.float64)
    assert abs(float(gradient_penalty(critic, real, fake))) <= 1e-9


def test_gradient_penalty_norm_two_linear_critic():
    critic = LinearCritic(2 * _unit(3 * 8 * 8, 1))
    real, fake = torch.rand(6, 3, 8, 8, dtype=torch.float64), torch.rand(6, 3, 8, 8, dtype=torch.float64)
    assert abs(float(gradient_penalty(critic, real, fake, lambda_gp=10)) - 10) <= 1e-6


def test_gradient_penalty_shape_mismatch():
    with pytest.raises(ValueError):
        gradient_penalty(LinearCritic(torch.ones(1)), torch.zeros(2, 3), torch.zeros(3, 3))


def test_gradient_penalty_norm_matches_finite_differences():
    torch.manual_seed(5)
    d = Discriminator(ArchConfig(**{**SMALL, "patch_size": 32})).double().eval()
    real = torch.rand(3, 3, 32, 32, dtype=torch.float64)
    fake = torch.rand(3, 3, 32, 32, dtype=torch.float64)
    u = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    x_hat = (u.view(3, 1, 1, 1) * real + (1 - u.view(3, 1, 1, 1)) * fake).requires_grad_(True)
    grads, = torch.autograd.grad(d(x_hat).sum(), x_hat)
    norms = grads.reshape(3, -1).norm(dim=1)
    fd_norms = []
    for i in range(3):
        xi = x_hat[i].detach().numpy()
        direction = (grads[i] / norms[i]).numpy()
        f = lambda v: float(d(torch.as_tensor(v)[None]).detach())
        fd_norms.append(directional_diff(f, xi, direction))
    np.testing.assert_allclose(fd_norms, norms.numpy(), rtol=1e-3)
    expected = 10 * ((np.array(fd_norms) - 1) ** 2).mean()
    assert float(gradient_penalty(d, real, fake, 10, u=u).detach()) == pytest.approx(expected, rel=1e-3)
