"""Joint alternating optimisation of the critic against BNet, RNet and G.

One outer step runs ``n_critic`` critic updates, each on a fresh mini-batch,
then one BNet update and one joint RNet+G update on the last batch. Each
generator-side update minimises ``gamma * adv + KL`` restricted to the
parameters it owns; frozen networks are switched to ``requires_grad=False``
and the critic is put in eval mode so its spectral-norm buffers stay put.

All randomness of epoch ``e`` is derived from ``(seed, e)``, which makes a
resumed run replay exactly what an uninterrupted one would have done.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import PairedDataset, sample_patches
from .losses import (BackgroundPosterior, LossBreakdown, kl_background, kl_latent,
                     reparameterize, total_objective, wasserstein_losses)
from .networks import ArchConfig, BNet, VRGNet, gradient_penalty

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_bnet")
LOG_COLUMNS = ["epoch", "step", "adv", "kl_z", "kl_b", "total", "lr_D", "lr_G", "wallclock_s",
               "critic_loss", "w_gap", "gp"]


class NonFiniteLossError(FloatingPointError):
    pass


def _default_lrs():
    return {"W_B": 2e-4, "W_R": 1e-4, "theta": 1e-4, "W_D": 4e-4}


def _default_betas():
    return {"W_B": (0.9, 0.999), "W_R": (0.9, 0.999), "theta": (0.5, 0.9), "W_D": (0.5, 0.9)}


@dataclass
class TrainConfig:
    gamma: float = 1.0
    eps0_sq: float = 1e-6
    n_critic: int = 5
    lambda_gp: float = 10.0
    batch_size: int = 18
    patches_per_epoch: int = 18 * 3000
    base_lrs: dict = field(default_factory=_default_lrs)
    betas: dict = field(default_factory=_default_betas)
    decay_epochs: list = field(default_factory=lambda: [400, 600, 650, 675, 690, 700])
    total_epochs: int = 700
    variant: str = "full"
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    checkpoint_every: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_dict(self.arch)
        self.betas = {k: tuple(v) for k, v in self.betas.items()}
        self.validate()

    def validate(self):
        if set(self.base_lrs) != {"W_B", "W_R", "theta", "W_D"}:
            raise ValueError("base_lrs needs exactly the keys W_B, W_R, theta, W_D")
        if any(not lr > 0 for lr in self.base_lrs.values()):
            raise ValueError("all learning rates must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if not self.eps0_sq > 0:
            raise ValueError("eps0_sq must be positive")
        if self.batch_size < 1 or self.patches_per_epoch < self.batch_size:
            raise ValueError("patches_per_epoch must cover at least one batch")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def t(self) -> int:
        return self.arch.latent_dim

    @property
    def patch_size(self) -> int:
        return self.arch.patch_size

    @property
    def steps_per_epoch(self) -> int:
        return self.patches_per_epoch // self.batch_size

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = {k: list(v) for k, v in self.betas.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, base: float, decay_epochs: Iterable[int]) -> float:
    """Step schedule: ``base`` halved once for every decay epoch already reached."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base / 2 ** sum(1 for e in decay_epochs if e <= epoch)


@dataclass(frozen=True)
class PosteriorPolicy:
    """How the background ``b`` is obtained during training.

    ``full`` samples it from the BNet posterior; ``no_bnet`` uses a Dirac
    posterior at the clean image, so ``b = x`` and its KL term vanishes.
    """

    variant: str
    eps0_sq: float

    @property
    def uses_bnet(self) -> bool:
        return self.variant == "full"

    def background(self, bnet: BNet | None, o, x, noise):
        """Return ``(b, kl_b, posterior)``."""
        if not self.uses_bnet:
            return x, x.new_zeros(()), None
        post = bnet(o)
        b = reparameterize(post.mu, post.sigma2, noise)
        return b, kl_background(post, x, self.eps0_sq), post


def apply_variant(config: TrainConfig) -> PosteriorPolicy:
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}; expected one of {VARIANTS}")
    return PosteriorPolicy(config.variant, config.eps0_sq)


def _substream(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


@contextlib.contextmanager
def _trainable(nets: VRGNet, *keys: str):
    """Enable grads only for the named parameter sets; critic in eval unless trained."""
    flags = {k: [p.requires_grad for p in nets.part(k).parameters()] for k in nets.PARTS}
    for k in nets.PARTS:
        for p in nets.part(k).parameters():
            p.requires_grad_(k in keys)
    nets.disc.train("W_D" in keys)
    try:
        yield
    finally:
        for k, fl in flags.items():
            for p, f in zip(nets.part(k).parameters(), fl):
                p.requires_grad_(f)
        nets.disc.train(True)


def _finite(*vals) -> bool:
    return all(math.isfinite(float(v.detach() if torch.is_tensor(v) else v)) for v in vals)


class Trainer:
    """Stateful driver for the alternating optimisation.

    ``callbacks`` receive ``(event, trainer, info)`` with event ``"step"``
    or ``"epoch"``.
    """

    def __init__(self, config: TrainConfig, dataset: PairedDataset, out_dir=None,
                 callbacks: Iterable[Callable] = (), nets: VRGNet | None = None):
        if len(dataset) == 0:
            raise ValueError("training dataset is empty")
        self.config = config
        self.dataset = dataset
        self.policy = apply_variant(config)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.callbacks = list(callbacks)
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        if nets is None:
            torch.manual_seed(_substream(config.seed, 0xA5))
            nets = VRGNet(config.arch, bnet_init_logvar=math.log(config.eps0_sq))
        self.nets = nets.to(config.torch_dtype)
        self.opts = {
            k: torch.optim.Adam(self.nets.part(k).parameters(), lr=config.base_lrs[k],
                                betas=config.betas[k])
            for k in self.nets.PARTS
        }
        self.epoch = 0
        self.step = 0
        self.counts = {"critic": 0, "bnet": 0, "rnet_g": 0}
        self.history: list[dict] = []
        self.epoch_means: list[dict] = []
        self._t0 = time.perf_counter()
        self._wall_offset = 0.0

    # -- single updates --------------------------------------------------

    def _tensor(self, arr):
        return torch.as_tensor(arr).to(self.config.torch_dtype)

    def _noise(self, like, gen):
        return torch.randn(like.shape, generator=gen, dtype=like.dtype)

    def critic_update(self, o, x, gen) -> dict:
        nets, cfg = self.nets, self.config
        with torch.no_grad():
            post_z = nets.rnet(o)
            z = reparameterize(post_z.alpha, post_z.beta, self._noise(post_z.alpha, gen))
            b, _, _ = self.policy.background(nets.bnet, o, x, self._noise(o, gen))
            fake = nets.generator(z) + b
        with _trainable(nets, "W_D"):
            critic, _ = wasserstein_losses(nets.disc(o), nets.disc(fake))
            gp = gradient_penalty(nets.disc, o, fake, cfg.lambda_gp, generator=gen)
            loss = critic + gp
            self.opts["W_D"].zero_grad(set_to_none=True)
            loss.backward()
            self._check("critic", loss)
            self.opts["W_D"].step()
        self.counts["critic"] += 1
        return {"critic_loss": loss.item(), "w_gap": -critic.item(), "gp": gp.item()}

    def bnet_update(self, o, x, gen):
        nets, cfg = self.nets, self.config
        with torch.no_grad():
            post_z = nets.rnet(o)
            z = reparameterize(post_z.alpha, post_z.beta, self._noise(post_z.alpha, gen))
            rain = nets.generator(z)
            real_scores = nets.disc.eval()(o)
        with _trainable(nets, "W_B"):
            b, kl_b, _ = self.policy.background(nets.bnet, o, x, self._noise(o, gen))
            _, adv = wasserstein_losses(real_scores, nets.disc(rain + b))
            loss = cfg.gamma * adv + kl_b
            self.opts["W_B"].zero_grad(set_to_none=True)
            loss.backward()
            self._check("bnet", loss)
            self.opts["W_B"].step()
        self.counts["bnet"] += 1
        return b.detach(), kl_b.item()

    def rnet_g_update(self, o, b, gen):
        nets, cfg = self.nets, self.config
        with _trainable(nets, "W_R", "theta"):
            post_z = nets.rnet(o)
            z = reparameterize(post_z.alpha, post_z.beta, self._noise(post_z.alpha, gen))
            kl_z = kl_latent(post_z)
            with torch.no_grad():
                real_scores = nets.disc(o)
            _, adv = wasserstein_losses(real_scores, nets.disc(nets.generator(z) + b))
            loss = cfg.gamma * adv + kl_z
            self.opts["W_R"].zero_grad(set_to_none=True)
            self.opts["theta"].zero_grad(set_to_none=True)
            loss.backward()
            self._check("rnet_g", loss)
            self.opts["W_R"].step()
            self.opts["theta"].step()
        self.counts["rnet_g"] += 1
        return adv.item(), kl_z.item()

    def outer_step(self, batches, gen) -> dict:
        crit = []
        for _ in range(self.config.n_critic):
            o_np, x_np = next(batches)
            o, x = self._tensor(o_np), self._tensor(x_np)
            crit.append(self.critic_update(o, x, gen))
        if self.policy.uses_bnet:
            b, kl_b = self.bnet_update(o, x, gen)
        else:
            b, kl_b = x, 0.0
        adv, kl_z = self.rnet_g_update(o, b, gen)
        br = total_objective(adv, kl_z, kl_b, self.config.gamma)
        self.step += 1
        rec = {
            "epoch": self.epoch,
            "step": self.step,
            **br.as_dict(),
            "lr_D": self.opts["W_D"].param_groups[0]["lr"],
            "lr_G": self.opts["theta"].param_groups[0]["lr"],
            "wallclock_s": round(self._wall_offset + time.perf_counter() - self._t0, 3),
            **{k: float(np.mean([c[k] for c in crit])) for k in ("critic_loss", "w_gap", "gp")},
        }
        return rec

    # -- epochs ------------------------------------------------------------

    def _set_lrs(self):
        for k, opt in self.opts.items():
            lr = lr_at(self.epoch, self.config.base_lrs[k], self.config.decay_epochs)
            for g in opt.param_groups:
                g["lr"] = lr

    def run_epoch(self) -> dict:
        cfg = self.config
        self._set_lrs()
        steps = cfg.steps_per_epoch
        batches = sample_patches(self.dataset, steps * cfg.n_critic * cfg.batch_size, cfg.patch_size,
                                 seed=[cfg.seed, self.epoch, 1], batch_size=cfg.batch_size)
        gen = torch.Generator().manual_seed(_substream(cfg.seed, self.epoch, 2))
        records = []
        for _ in range(steps):
            rec = self.outer_step(batches, gen)
            records.append(rec)
            self.history.append(rec)
            self._log_row(rec)
            for cb in self.callbacks:
                cb("step", self, rec)
        means = {k: float(np.mean([r[k] for r in records]))
                 for k in ("adv", "kl_z", "kl_b", "total", "critic_loss", "w_gap", "gp")}
        means["epoch"] = self.epoch
        self.epoch_means.append(means)
        log.info("epoch %d: %s", self.epoch, {k: round(v, 4) for k, v in means.items() if k != "epoch"})
        self.epoch += 1
        for cb in self.callbacks:
            cb("epoch", self, means)
        if self.out_dir is not None and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
            self.save(self.out_dir / f"ckpt_epoch{self.epoch:04d}.vrg")
        return means

    def fit(self, epochs: int | None = None) -> list[dict]:
        """Train until ``epochs`` more epochs have run (default: up to ``total_epochs``)."""
        target = self.config.total_epochs if epochs is None else self.epoch + epochs
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "train_config.json").write_text(
                json.dumps(self.config.to_dict(), indent=2, sort_keys=True))
        while self.epoch < target:
            self.run_epoch()
        if self.out_dir is not None:
            self.save(self.out_dir / "last.vrg")
        return self.epoch_means

    # -- bookkeeping -----------------------------------------------------

    def _log_row(self, rec):
        if self.out_dir is None:
            return
        path = self.out_dir / "loss_log.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow(rec)

    def _check(self, which, loss):
        if _finite(loss):
            return
        info = {"update": which, "epoch": self.epoch, "step": self.step, "loss": loss.item()}
        if self.out_dir is not None:
            snap = self.out_dir / "abort_snapshot"
            snap.mkdir(parents=True, exist_ok=True)
            (snap / "diagnostic.json").write_text(json.dumps(info, indent=2))
            self.save(snap / "state.vrg")
        raise NonFiniteLossError(f"non-finite loss in {which} update: {info}")

    def to_checkpoint(self) -> Checkpoint:
        params = {k: self.nets.part(k).state_dict() for k in self.nets.PARTS}
        if not self.policy.uses_bnet:
            params.pop("W_B")
        optim = {k: opt.state_dict() for k, opt in self.opts.items() if k in params}
        wall = self._wall_offset + time.perf_counter() - self._t0
        return Checkpoint(arch=self.config.arch.to_dict(), params=params, optim=optim,
                          train_config=self.config.to_dict(), epoch=self.epoch, step=self.step,
                          variant=self.config.variant,
                          extra={"counts": self.counts, "wallclock_s": wall})

    def save(self, path) -> Path:
        return save_checkpoint(path, self.to_checkpoint())

    def warm_start_bnet(self, state_dict: dict):
        """Load BNet weights (e.g. from :func:`pretrain_bnet`) before training starts."""
        if not self.policy.uses_bnet:
            raise ValueError("the no_bnet variant has no BNet to warm-start")
        if self.step:
            raise ValueError("warm starts are only allowed before the first step")
        self.nets.bnet.load_state_dict(state_dict)

    def load_state(self, ckpt: Checkpoint, restore_optim: bool = True):
        if ckpt.arch != self.config.arch.to_dict():
            raise CheckpointError("checkpoint architecture does not match the training config")
        for key in self.nets.PARTS:
            if key not in ckpt.params:
                continue
            if key == "W_B" and not self.policy.uses_bnet:
                log.warning("ignoring BNet parameters from a %s checkpoint in a no_bnet run", ckpt.variant)
                continue
            self.nets.part(key).load_state_dict(ckpt.params[key])
            if restore_optim and key in ckpt.optim:
                self.opts[key].load_state_dict(ckpt.optim[key])
        self.epoch, self.step = ckpt.epoch, ckpt.step
        self.counts.update(ckpt.extra.get("counts", {}))
        self._wall_offset = float(ckpt.extra.get("wallclock_s", 0.0))
        self._t0 = time.perf_counter()

    @classmethod
    def resume(cls, path, dataset: PairedDataset, out_dir=None, config: TrainConfig | None = None,
               **kwargs) -> "Trainer":
        ckpt = load_checkpoint(path)
        if config is None:
            config = TrainConfig.from_dict(ckpt.train_config)
        trainer = cls(config, dataset, out_dir=out_dir, **kwargs)
        trainer.load_state(ckpt)
        return trainer


def train(dataset: PairedDataset, config: TrainConfig, out_dir=None, callbacks=(),
          epochs: int | None = None) -> tuple[Trainer, list[dict]]:
    """Run the alternating optimisation; returns the trainer and per-epoch means."""
    trainer = Trainer(config, dataset, out_dir=out_dir, callbacks=callbacks)
    means = trainer.fit(epochs)
    return trainer, means


def pretrain_bnet(dataset: PairedDataset, arch: ArchConfig, steps: int, seed: int = 0,
                  batch_size: int = 18, lr: float = 2e-4, eps0_sq: float = 1e-6,
                  callback: Callable | None = None, loss: str = "ssim") -> tuple[dict, list[float]]:
    """Train BNet alone on its mean output.

    ``loss`` is ``"ssim"`` (negative per-channel SSIM, the plain-derainer objective) or
    ``"mse"`` (mean squared error, which targets the same optimum as the
    mean term of the background KL). Returns ``(state_dict, losses)``; the state dict fits ``VRGNet(arch).bnet``
    and can seed joint training through :meth:`Trainer.warm_start_bnet`.
    """
    from .evaluation import ssim_torch

    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if loss not in ("ssim", "mse"):
        raise ValueError(f"unknown pretraining loss {loss!r}; expected 'ssim' or 'mse'")
    objective = (lambda mu, x: -ssim_torch(mu, x, channelwise=True)) if loss == "ssim" else F.mse_loss
    torch.manual_seed(_substream(seed, 0xB0))
    bnet = BNet(arch, init_logvar=math.log(eps0_sq))
    opt = torch.optim.Adam(bnet.parameters(), lr=lr)
    batches = sample_patches(dataset, steps * batch_size, arch.patch_size, seed=[seed, 0xB1],
                             batch_size=batch_size)
    losses = []
    for i in range(steps):
        o, x = (torch.as_tensor(a) for a in next(batches))
        value = objective(bnet(o).mu, x)
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        losses.append(value.item())
        if not math.isfinite(losses[-1]):
            raise NonFiniteLossError(f"non-finite BNet pretraining loss at step {i}")
        if callback is not None:
            callback(i, losses[-1])
    return bnet.state_dict(), losses
