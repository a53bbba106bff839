"""Using a trained generator: sampling, sweeps, interpolation and augmentation.

Latent draws are partitioned per output index: code ``i`` of a request with
seed ``s`` comes from its own stream seeded by ``(s, i)``, so batching or
parallelism never changes which code an output receives.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import PairedDataset, save_paired_dataset
from .networks import Generator, RNet

log = logging.getLogger(__name__)

POLICIES = ("tile", "resize")
TILE_OVERLAP = 8


def draw_latents(n: int, dim: int, seed: int, offset: int = 0) -> np.ndarray:
    """``n`` standard-normal codes; code ``i`` depends only on ``(seed, offset + i)``."""
    out = np.empty((n, dim))
    for i in range(n):
        out[i] = np.random.default_rng([seed, offset + i]).standard_normal(dim)
    return out


def _generate(theta: Generator, z) -> np.ndarray:
    param = next(theta.parameters())
    zt = torch.as_tensor(np.asarray(z), dtype=param.dtype)
    if zt.ndim == 1:
        zt = zt[None]
    was_training = theta.training
    theta.eval()
    with torch.no_grad():
        out = theta(zt).numpy()
    theta.train(was_training)
    return out


def generate(theta: Generator, z, batch_size: int = 1) -> np.ndarray:
    """Rain patches ``(N, C, P, P)`` for codes ``z`` of shape ``(N, t)``.

    The default evaluates one code per forward pass: batched convolution
    kernels may sum in a batch-size dependent order, and one-at-a-time
    evaluation keeps every output bit-identical however a request is split.
    """
    z = np.asarray(z)
    if z.ndim == 1:
        z = z[None]
    if z.shape[1] != theta.cfg.latent_dim:
        raise ValueError(f"codes have length {z.shape[1]}, generator expects {theta.cfg.latent_dim}")
    if len(z) == 0:
        p, c = theta.cfg.patch_size, theta.cfg.channels
        return np.zeros((0, c, p, p), dtype=np.float32)
    return np.concatenate([_generate(theta, z[i:i + batch_size]) for i in range(0, len(z), batch_size)])


def sample_rain(n: int, seed: int, theta: Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` codes from the prior and render them; returns ``(patches, z)``."""
    if theta is None:
        raise ValueError("a trained generator is required")
    z = draw_latents(n, theta.cfg.latent_dim, seed)
    return generate(theta, z), z


def synthesize_rainy(background, rain, clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Additive composition ``o = b + r``; returns ``(o, clip_mask)``.

    With ``clamp`` the result is clipped to ``[0, 1]`` and ``clip_mask``
    marks the clipped entries; without it the mask is all false.
    """
    background, rain = np.asarray(background), np.asarray(rain)
    if background.shape != rain.shape:
        raise ValueError(f"background {background.shape} and rain {rain.shape} differ in shape")
    o = background + rain
    if not clamp:
        return o, np.zeros(o.shape, dtype=bool)
    mask = (o < 0) | (o > 1)
    return np.clip(o, 0.0, 1.0), mask


@dataclass
class SweepSpec:
    dim: int
    lo: float = -3.0
    hi: float = 3.0
    count: int = 9
    base_z: np.ndarray | None = None
    seed: int = 0

    def validate(self, t: int):
        if not 0 <= self.dim < t:
            raise ValueError(f"sweep dimension {self.dim} outside [0, {t})")
        if not self.lo < self.hi:
            raise ValueError("sweep needs lo < hi")
        if self.count < 2:
            raise ValueError("sweep needs count >= 2")
        if self.base_z is not None and np.asarray(self.base_z).shape != (t,):
            raise ValueError(f"base_z must have length {t}")

    def codes(self, t: int) -> np.ndarray:
        self.validate(t)
        base = (np.asarray(self.base_z, dtype=np.float64) if self.base_z is not None
                else draw_latents(1, t, self.seed)[0])
        z = np.repeat(base[None], self.count, axis=0)
        z[:, self.dim] = np.linspace(self.lo, self.hi, self.count)
        return z


def disentangle_sweep(spec: SweepSpec, theta: Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vary one latent coordinate over ``[lo, hi]``; returns ``(patches, z)`` in order."""
    z = spec.codes(theta.cfg.latent_dim)
    return generate(theta, z), z


def interpolate(z_a, z_b, steps: int, theta: Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(1 - w) z_a + w z_b`` for ``w = linspace(0, 1, steps)``."""
    z_a, z_b = np.asarray(z_a, dtype=np.float64), np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"endpoint codes differ in shape: {z_a.shape} vs {z_b.shape}")
    if steps < 2:
        raise ValueError("interpolation needs steps >= 2")
    w = np.linspace(0.0, 1.0, steps)[:, None]
    z = (1 - w) * z_a[None] + w * z_b[None]
    # exact endpoints regardless of floating-point blending
    z[0], z[-1] = z_a, z_b
    return generate(theta, z), z


def encode(o, rnet: RNet) -> np.ndarray:
    """Posterior mean of the rain factors for one ``(C, P, P)`` patch or a batch."""
    o = np.asarray(o)
    single = o.ndim == 3
    param = next(rnet.parameters())
    ot = torch.as_tensor(o[None] if single else o, dtype=param.dtype)
    with torch.no_grad():
        alpha = rnet(ot).alpha.numpy()
    return alpha[0] if single else alpha


# -- full-size rain layers ------------------------------------------------

def _ramp(n: int, overlap: int, fade_in: bool, fade_out: bool) -> np.ndarray:
    w = np.ones(n)
    k = min(overlap, n)
    ramp = (np.arange(k) + 0.5) / k
    if fade_in:
        w[:k] = np.minimum(w[:k], ramp)
    if fade_out:
        w[n - k:] = np.minimum(w[n - k:], ramp[::-1])
    return w


def _tile_starts(length: int, patch: int, overlap: int) -> list[int]:
    if length <= patch:
        return [0]
    stride = patch - overlap
    starts = list(range(0, length - patch, stride))
    starts.append(length - patch)
    return starts


def compose_rain_layer(theta: Generator, height: int, width: int, seed: int, policy: str = "tile",
                       overlap: int = TILE_OVERLAP) -> tuple[np.ndarray, np.ndarray]:
    """Build an ``H x W x C`` rain layer from generated patches.

    ``tile`` uses one code per horizontal band of tiles (the same patch is
    repeated along the band, keeping streaks continuous) and cross-fades
    neighbouring tiles linearly over ``overlap`` pixels. ``resize`` upsamples
    a single patch bilinearly. Returns ``(layer, z)``.
    """
    p, t = theta.cfg.patch_size, theta.cfg.latent_dim
    if policy == "resize":
        z = draw_latents(1, t, seed)
        patch = torch.as_tensor(generate(theta, z))
        layer = F.interpolate(patch, size=(height, width), mode="bilinear", align_corners=False)
        return layer[0].numpy().transpose(1, 2, 0), z
    if policy != "tile":
        raise ValueError(f"unknown composite policy {policy!r}; expected one of {POLICIES}")
    rows, cols = _tile_starts(height, p, overlap), _tile_starts(width, p, overlap)
    z = draw_latents(len(rows), t, seed)
    patches = generate(theta, z).transpose(0, 2, 3, 1)  # band, P, P, C
    c = patches.shape[-1]
    acc = np.zeros((height, width, c))
    wsum = np.zeros((height, width, 1))
    for bi, r0 in enumerate(rows):
        ph = min(p, height)
        wr = _ramp(ph, overlap, bi > 0, bi < len(rows) - 1)
        for ci, c0 in enumerate(cols):
            pw = min(p, width)
            wc = _ramp(pw, overlap, ci > 0, ci < len(cols) - 1)
            wt = (wr[:, None] * wc[None, :])[:, :, None]
            acc[r0:r0 + ph, c0:c0 + pw] += wt * patches[bi, :ph, :pw]
            wsum[r0:r0 + ph, c0:c0 + pw] += wt
    return acc / wsum, z


# -- augmentation ---------------------------------------------------------

@dataclass
class AugmentSpec:
    real_pairs: PairedDataset
    n_fake: int
    seed: int = 0
    policy: str = "tile"
    clamp: bool = True

    def __post_init__(self):
        if self.n_fake < 0:
            raise ValueError("n_fake must be >= 0")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown composite policy {self.policy!r}")


def z_digest(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float64).tobytes()).hexdigest()


def fake_pair(theta: Generator, pool: PairedDataset, seed: int, index: int, policy: str = "tile",
              clamp: bool = True):
    """Generated pair ``index`` of an augmentation run: ``(o, x, r, record)``."""
    rng = np.random.default_rng([seed, index, 0])
    src = int(rng.integers(len(pool)))
    x = pool.clean[src]
    h, w, c = x.shape
    pair_seed = int(rng.integers(2 ** 31))
    r, z = compose_rain_layer(theta, h, w, pair_seed, policy)
    if r.shape[2] != c:
        r = np.repeat(r.mean(axis=2, keepdims=True), c, axis=2)
    o, _ = synthesize_rainy(x.astype(np.float64), r, clamp=clamp)
    record = {"id": f"fake-{index:06d}", "index": index, "source_id": pool.ids[src], "seed": seed,
              "pair_seed": pair_seed, "policy": policy, "clamp": clamp, "z_digest": z_digest(z),
              "n_codes": int(len(z))}
    return o.astype(np.float32), x, r.astype(np.float32), record


def augment_dataset(spec: AugmentSpec, theta: Generator) -> tuple[PairedDataset, list[dict], list[np.ndarray]]:
    """Real pairs plus ``n_fake`` generated pairs.

    Returns ``(dataset, manifest, rain_layers)``; the manifest holds one
    record per generated pair, sufficient to replay it with
    :func:`replay_manifest_entry`.
    """
    pool = spec.real_pairs
    if spec.n_fake > 0 and len(pool) == 0:
        raise ValueError("cannot generate fake pairs from an empty real pool")
    rainy, clean, ids, manifest, layers = [], [], [], [], []
    for i in range(spec.n_fake):
        o, x, r, rec = fake_pair(theta, pool, spec.seed, i, spec.policy, spec.clamp)
        rainy.append(o)
        clean.append(x)
        ids.append(rec["id"])
        manifest.append(rec)
        layers.append(r)
    fake = PairedDataset(rainy, clean, ids, layout=pool.layout, meta=[dict(r) for r in manifest])
    return pool.concat(fake) if spec.n_fake else pool, manifest, layers


def replay_manifest_entry(record: dict, pool: PairedDataset, theta: Generator):
    o, x, r, again = fake_pair(theta, pool, record["seed"], record["index"], record["policy"], record["clamp"])
    if again["z_digest"] != record["z_digest"] or again["source_id"] != record["source_id"]:
        raise ValueError(f"manifest entry {record['id']} does not replay (generator or pool changed)")
    return o, x, r


def write_augmented(out_dir, dataset: PairedDataset, manifest: list[dict],
                    rain_layers: list[np.ndarray] | None = None):
    """Write every pair of ``dataset`` as PNGs plus ``manifest.jsonl``.

    Files follow the rain100 naming, and the manifest lists all pairs
    (``kind`` real or fake, generated ones with their replay record), so the
    directory loads under either layout. ``rain_layers`` align with
    ``manifest`` and are written for generated pairs only.
    """
    out_dir = Path(out_dir)
    fake = {rec["id"]: k for k, rec in enumerate(manifest)}
    real_idx = [i for i, pid in enumerate(dataset.ids) if pid not in fake]
    fake_idx = [i for i, pid in enumerate(dataset.ids) if pid in fake]
    save_paired_dataset(dataset.subset(real_idx), out_dir)
    layers = None
    if rain_layers is not None:
        layers = [rain_layers[fake[dataset.ids[i]]] for i in fake_idx]
    save_paired_dataset(dataset.subset(fake_idx), out_dir, layers)
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for pid in dataset.ids:
            rec = {"kind": "real", "id": pid} if pid not in fake else {"kind": "fake", **manifest[fake[pid]]}
            rec.update(rainy=f"rain-{pid}.png", clean=f"norain-{pid}.png")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    # per-pair metadata of the two halves would overwrite each other
    meta = out_dir / "meta.jsonl"
    if meta.exists():
        meta.unlink()


def montage(patches: np.ndarray, ncol: int = 8, pad: int = 2) -> np.ndarray:
    """Grid image ``H x W x C`` of ``(N, C, P, P)`` patches, white padding."""
    n, c, p, _ = patches.shape
    ncol = max(1, min(ncol, n))
    nrow = -(-n // ncol)
    grid = np.ones((nrow * (p + pad) + pad, ncol * (p + pad) + pad, c))
    for k in range(n):
        r, q = divmod(k, ncol)
        top, left = pad + r * (p + pad), pad + q * (p + pad)
        grid[top:top + p, left:left + p] = patches[k].transpose(1, 2, 0)
    return grid
