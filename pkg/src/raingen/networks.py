"""The four sub-networks and the WGAN-GP gradient penalty.

RNet infers the latent posterior, BNet (a PReNet-style recurrent derainer)
infers the background posterior, the generator maps rain factors to a rain
patch and the discriminator scores rainy patches. Variance heads emit
log-variances and are exponentiated on the way out.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.parametrizations import spectral_norm

from .losses import BackgroundPosterior, LatentPosterior

__all__ = [
    "ArchConfig",
    "RNet",
    "BNet",
    "Generator",
    "Discriminator",
    "SelfAttention",
    "VRGNet",
    "gradient_penalty",
    "count_parameters",
]


@dataclass
class ArchConfig:
    patch_size: int = 64
    latent_dim: int = 128
    channels: int = 3
    rnet_base: int = 32
    gen_base: int = 32
    disc_base: int = 64
    max_width: int = 512
    bnet_width: int = 32
    bnet_lstm_width: int | None = None
    bnet_stages: int = 6
    bnet_resblocks: int = 5
    leaky_slope: float = 0.1
    attention_last_k: int = 2

    def __post_init__(self):
        p = self.patch_size
        if p < 32 or p & (p - 1):
            raise ValueError(f"patch_size must be a power of two >= 32, got {p}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.bnet_stages < 1 or self.bnet_resblocks < 0:
            raise ValueError("bnet_stages must be >= 1 and bnet_resblocks >= 0")
        if not 0 <= self.attention_last_k <= self.n_disc_blocks:
            raise ValueError(f"attention_last_k must lie in [0, {self.n_disc_blocks}]")

    @property
    def n_blocks(self) -> int:
        """Stride-2 stages in RNet and the generator (5 at 64x64)."""
        return int(math.log2(self.patch_size)) - 1

    @property
    def n_disc_blocks(self) -> int:
        return int(math.log2(self.patch_size)) - 2

    def _widths(self, base: int, n: int) -> tuple[int, ...]:
        return tuple(min(base * 2**i, self.max_width) for i in range(n))

    @property
    def rnet_widths(self) -> tuple[int, ...]:
        return self._widths(self.rnet_base, self.n_blocks)

    @property
    def gen_widths(self) -> tuple[int, ...]:
        # mirrored: widest first
        return tuple(reversed(self._widths(self.gen_base, self.n_blocks)))

    @property
    def disc_widths(self) -> tuple[int, ...]:
        return self._widths(self.disc_base, self.n_disc_blocks)

    @property
    def lstm_width(self) -> int:
        return self.bnet_lstm_width or self.bnet_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_spatial(x: Tensor, size: int, who: str):
    if x.ndim != 4 or x.shape[-1] != size or x.shape[-2] != size:
        raise ValueError(f"{who} expects (N, C, {size}, {size}) input, got {tuple(x.shape)}")


class RNet(nn.Module):
    """Conv+ReLU encoder followed by a linear head producing (alpha, log beta)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        layers, c_in = [], cfg.channels
        for w in cfg.rnet_widths:
            layers += [nn.Conv2d(c_in, w, 4, stride=2, padding=1), nn.ReLU(inplace=True)]
            c_in = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c_in * 2 * 2, 2 * cfg.latent_dim)

    def zero_head_(self):
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        return self

    def forward(self, o: Tensor) -> LatentPosterior:
        _check_spatial(o, self.cfg.patch_size, "RNet")
        h = self.features(o).flatten(1)
        alpha, log_beta = self.head(h).chunk(2, dim=1)
        return LatentPosterior(alpha=alpha, beta=torch.exp(log_beta))


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + F.relu(self.conv2(F.relu(self.conv1(x))))


class BNet(nn.Module):
    """PReNet-style progressive recurrent network with stage-shared parameters.

    Each stage sees the rainy input concatenated with the previous estimate,
    runs conv+ReLU, a convolutional LSTM, a stack of residual blocks and an
    output conv. The output conv predicts a residual for the mean and the
    log-variance; only the last stage's variance is used.
    """

    def __init__(self, cfg: ArchConfig, init_logvar: float = 0.0):
        super().__init__()
        self.cfg = cfg
        c, w, lw = cfg.channels, cfg.bnet_width, cfg.lstm_width
        self.conv_in = nn.Conv2d(2 * c, w, 3, padding=1)
        self.lstm_gates = nn.Conv2d(w + lw, 4 * lw, 3, padding=1)
        self.res = nn.Sequential(*[_ResBlock(lw) for _ in range(cfg.bnet_resblocks)])
        self.conv_out = nn.Conv2d(lw, 2 * c, 3, padding=1)
        self.set_init_logvar(init_logvar)

    def set_init_logvar(self, value: float):
        """Start the variance head at ``exp(value)`` for every pixel."""
        c = self.cfg.channels
        with torch.no_grad():
            self.conv_out.weight[c:].zero_()
            self.conv_out.bias[c:].fill_(value)

    def forward(self, o: Tensor) -> BackgroundPosterior:
        if o.ndim != 4 or o.shape[1] != self.cfg.channels:
            raise ValueError(f"BNet expects (N, {self.cfg.channels}, H, W) input, got {tuple(o.shape)}")
        n, c, hgt, wid = o.shape
        lw = self.cfg.lstm_width
        x = o
        h = o.new_zeros(n, lw, hgt, wid)
        cell = o.new_zeros(n, lw, hgt, wid)
        for _ in range(self.cfg.bnet_stages):
            f = F.relu(self.conv_in(torch.cat([o, x], dim=1)))
            i, fg, g, og = self.lstm_gates(torch.cat([f, h], dim=1)).chunk(4, dim=1)
            cell = torch.sigmoid(fg) * cell + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(og) * torch.tanh(cell)
            out = self.conv_out(self.res(h))
            x = o + out[:, :c]
            logvar = out[:, c:]
        return BackgroundPosterior(mu=x, sigma2=torch.exp(logvar))


class Generator(nn.Module):
    """Linear layer then transpose-conv+ReLU blocks up to the patch size."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.gen_widths
        self.fc = nn.Linear(cfg.latent_dim, widths[0] * 2 * 2)
        layers = []
        outs = list(widths[1:]) + [cfg.channels]
        for c_in, c_out in zip(widths, outs):
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.ReLU()]
        self.blocks = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"generator expects (N, {self.cfg.latent_dim}) codes, got {tuple(z.shape)}")
        h = self.fc(z).view(z.shape[0], self.cfg.gen_widths[0], 2, 2)
        return self.blocks(h)


class SelfAttention(nn.Module):
    """SAGAN-style self-attention with a learned gate initialised at zero."""

    def __init__(self, channels: int, sn: bool = True):
        super().__init__()
        wrap = spectral_norm if sn else (lambda m: m)
        inner = max(channels // 8, 1)
        self.query = wrap(nn.Conv2d(channels, inner, 1))
        self.key = wrap(nn.Conv2d(channels, inner, 1))
        self.value = wrap(nn.Conv2d(channels, channels, 1))
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q = self.query(x).flatten(2)  # n, k, hw
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)  # n, c, hw
        attn = torch.softmax(torch.bmm(q.transpose(1, 2), k), dim=-1)  # n, hw, hw
        out = torch.bmm(v, attn.transpose(1, 2)).view(n, c, h, w)
        return x + self.gate * out


class Discriminator(nn.Module):
    """Spectrally normalised Conv+LeakyReLU critic with attention on the last blocks."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        blocks, c_in = [], cfg.channels
        n = cfg.n_disc_blocks
        for idx, w in enumerate(cfg.disc_widths):
            layers = [spectral_norm(nn.Conv2d(c_in, w, 4, stride=2, padding=1)),
                      nn.LeakyReLU(cfg.leaky_slope)]
            if idx >= n - cfg.attention_last_k:
                layers.append(SelfAttention(w))
            blocks.append(nn.Sequential(*layers))
            c_in = w
        self.blocks = nn.Sequential(*blocks)
        self.final = spectral_norm(nn.Conv2d(c_in, 1, 4, stride=1, padding=0))

    def forward(self, img: Tensor) -> Tensor:
        _check_spatial(img, self.cfg.patch_size, "Discriminator")
        return self.final(self.blocks(img)).flatten()

    def normalized_weights(self) -> dict[str, Tensor]:
        """The effective (post-normalisation) weights of every SN layer."""
        out = {}
        for name, mod in self.named_modules():
            if hasattr(mod, "parametrizations") and "weight" in mod.parametrizations:
                out[name] = mod.weight
        return out


class VRGNet(nn.Module):
    """Container for the four parameter sets ``W_R``, ``W_B``, ``theta``, ``W_D``."""

    def __init__(self, cfg: ArchConfig, bnet_init_logvar: float = 0.0):
        super().__init__()
        self.cfg = cfg
        self.rnet = RNet(cfg)
        self.bnet = BNet(cfg, init_logvar=bnet_init_logvar)
        self.generator = Generator(cfg)
        self.disc = Discriminator(cfg)

    # checkpoint keys follow the parameter-set names
    PARTS = {"W_R": "rnet", "W_B": "bnet", "theta": "generator", "W_D": "disc"}

    def part(self, key: str) -> nn.Module:
        return getattr(self, self.PARTS[key])

    def param_sets(self) -> dict[str, dict[str, Tensor]]:
        return {key: self.part(key).state_dict() for key in self.PARTS}


def gradient_penalty(critic, real: Tensor, fake: Tensor, lambda_gp: float = 10.0,
                     u: Tensor | None = None, generator: torch.Generator | None = None) -> Tensor:
    """WGAN-GP penalty ``lambda * mean((||grad D(x_hat)||_2 - 1)^2)``.

    ``x_hat = u * real + (1 - u) * fake`` with one ``u ~ U[0, 1]`` per sample
    unless ``u`` is given explicitly.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real and fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    n = real.shape[0]
    if u is None:
        u = torch.rand(n, generator=generator, dtype=real.dtype, device=real.device)
    u = u.reshape(n, *([1] * (real.ndim - 1)))
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grads.reshape(n, -1).norm(2, dim=1)
    return lambda_gp * (norms - 1).pow(2).mean()
