"""Image-quality metrics, streak-orientation analysis and the small-sample harness.

PSNR is computed over all channels jointly. SSIM is the mean of the local
SSIM map over fully-contained 11x11 Gaussian windows (sigma 1.5, K1=0.01,
K2=0.03) on the luma channel of colour inputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from scipy.signal import correlate

log = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _check_pair(a, b)
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def to_luma(img: np.ndarray) -> np.ndarray:
    """``H x W`` luma of an ``H x W``, ``H x W x 1`` or ``H x W x 3`` image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.asarray(LUMA_WEIGHTS)
    raise ValueError(f"unsupported image shape {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, peak: float = 1.0) -> np.ndarray:
    a, b = _check_pair(a, b)
    a, b = to_luma(a), to_luma(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    w = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2

    def filt(img):
        return correlate(img, w, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    a_arr, b_arr = _check_pair(a, b)
    if np.array_equal(a_arr, b_arr):
        to_luma(a_arr)  # shape validation
        if min(a_arr.shape[:2]) < SSIM_WINDOW:
            raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
        return 1.0
    return float(np.mean(ssim_map(a_arr, b_arr, peak)))


def ssim_torch(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0, channelwise: bool = False) -> torch.Tensor:
    """Differentiable batch SSIM for ``(N, C, H, W)`` tensors, averaged over the batch.

    By default it matches :func:`ssim` (luma). ``channelwise`` averages the
    SSIM of each channel instead; as a training loss this also constrains
    colour, which luma alone leaves free.
    """
    if a.shape != b.shape:
        raise ValueError("ssim_torch needs equal shapes")
    if channelwise:
        n, c = a.shape[:2]
        a, b = a.reshape(n * c, 1, *a.shape[2:]), b.reshape(n * c, 1, *b.shape[2:])
    elif a.shape[1] == 3:
        wts = torch.tensor(LUMA_WEIGHTS, dtype=a.dtype).view(1, 3, 1, 1)
        a, b = (a * wts).sum(1, keepdim=True), (b * wts).sum(1, keepdim=True)
    elif a.shape[1] != 1:
        a, b = a.mean(1, keepdim=True), b.mean(1, keepdim=True)
    w = torch.as_tensor(gaussian_window(), dtype=a.dtype)[None, None]
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_a, mu_b = F.conv2d(a, w), F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a ** 2
    var_b = F.conv2d(b * b, w) - mu_b ** 2
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.mean()


# -- orientation --------------------------------------------------------------

def streak_orientation(img, sigma: float = 1.5) -> tuple[float, float]:
    """Dominant line orientation of an image from its global structure tensor.

    Returns ``(angle, coherence)``: the angle in degrees in ``[0, 180)``,
    counter-clockwise from the horizontal axis with rows pointing down (90 is
    vertical), and the coherence ``(l1 - l2) / (l1 + l2)`` in ``[0, 1]``;
    coherence is 0 for a flat image. Gradients are Gaussian derivatives at
    scale ``sigma``; plain finite differences bias thin diagonal lines by
    several degrees.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[2] not in (1, 3):
        img = img.transpose(1, 2, 0)
    g = to_luma(img) if img.ndim == 3 else img
    g_row = gaussian_filter(g, sigma, order=(1, 0), mode="nearest")
    g_col = gaussian_filter(g, sigma, order=(0, 1), mode="nearest")
    jxx, jyy, jxy = np.sum(g_col * g_col), np.sum(g_row * g_row), np.sum(g_col * g_row)
    trace = jxx + jyy
    if trace <= 0:
        return float("nan"), 0.0
    coherence = math.sqrt((jxx - jyy) ** 2 + 4 * jxy ** 2) / trace
    # dominant gradient direction in (col, row) coordinates; lines run perpendicular
    phi = 0.5 * math.atan2(2 * jxy, jxx - jyy)
    angle = math.degrees(-(phi + math.pi / 2)) % 180.0
    return angle, coherence


def angle_difference(a: float, b: float) -> float:
    """Smallest absolute difference of two undirected orientations in degrees."""
    d = abs(a - b) % 180.0
    return min(d, 180.0 - d)


# -- reports --------------------------------------------------------------

def _fmt(v: float):
    return "inf" if v == math.inf else v


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM rows plus their summary and provenance."""

    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def _values(self, key):
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self._values("psnr"))) if self.rows else math.nan

    @property
    def psnr_std(self) -> float:
        v = self._values("psnr")
        return float(np.std(v)) if self.rows and np.all(np.isfinite(v)) else math.nan

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self._values("ssim"))) if self.rows else math.nan

    @property
    def ssim_std(self) -> float:
        return float(np.std(self._values("ssim"))) if self.rows else math.nan

    def summary(self) -> dict:
        return {"n": len(self.rows), "psnr_mean": _fmt(self.psnr_mean), "psnr_std": self.psnr_std,
                "ssim_mean": self.ssim_mean, "ssim_std": self.ssim_std, **self.meta}

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "psnr", "ssim"])
            w.writeheader()
            for r in self.rows:
                w.writerow({"id": r["id"], "psnr": _fmt(r["psnr"]), "ssim": r["ssim"]})
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return csv_path, json_path


def metric_constants() -> dict:
    return {"psnr": "all channels, peak 1", "ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA,
            "ssim_k1": SSIM_K1, "ssim_k2": SSIM_K2, "ssim_channel": "luma", "luma_weights": list(LUMA_WEIGHTS)}


def evaluate_pairs(preds, targets, ids=None, meta: dict | None = None) -> MetricReport:
    """PSNR and SSIM of every ``(pred, target)`` pair of ``H x W x C`` images."""
    preds, targets = list(preds), list(targets)
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions for {len(targets)} targets")
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(preds))]
    rows = [{"id": i, "psnr": psnr(p, t), "ssim": ssim(p, t)} for i, p, t in zip(ids, preds, targets)]
    return MetricReport(rows, {**metric_constants(), **(meta or {})})


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- derainer used by the small-sample harness ------------------------------

@dataclass
class DerainerRecipe:
    """A PReNet-style BNet trained alone on the negative SSIM of its mean output."""

    width: int = 8
    stages: int = 2
    resblocks: int = 1
    steps: int = 150
    batch_size: int = 8
    patch_size: int = 32
    lr: float = 1e-3

    def arch(self, channels: int = 3):
        from .networks import ArchConfig
        return ArchConfig(patch_size=64, channels=channels, bnet_width=self.width,
                          bnet_stages=self.stages, bnet_resblocks=self.resblocks)


def train_derainer(train_set, seed: int, recipe: DerainerRecipe | None = None, log_every: int = 0):
    """Fit a derainer on ``train_set``; returns a callable mapping a rainy image to its estimate."""
    from .data import sample_patches
    from .networks import BNet

    recipe = recipe or DerainerRecipe()
    if len(train_set) == 0:
        raise ValueError("derainer training set is empty")
    channels = train_set.rainy[0].shape[2]
    torch.manual_seed(int(np.random.SeedSequence([seed, 11]).generate_state(1)[0]))
    net = BNet(recipe.arch(channels))
    opt = torch.optim.Adam(net.parameters(), lr=recipe.lr)
    batches = sample_patches(train_set, recipe.steps * recipe.batch_size, recipe.patch_size,
                             seed=[seed, 12], batch_size=recipe.batch_size)
    for step in range(recipe.steps):
        o, x = (torch.as_tensor(a) for a in next(batches))
        loss = -ssim_torch(net(o).mu, x, channelwise=True)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            log.info("derainer step %d: -ssim %.4f", step, float(loss))
    net.eval()

    def derain(img: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = net(torch.as_tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]).mu
        return np.clip(out[0].numpy().transpose(1, 2, 0), 0.0, 1.0)

    return derain


def evaluate_derainer(derain, test_set, meta: dict | None = None) -> MetricReport:
    preds = [derain(o) for o in test_set.rainy]
    return evaluate_pairs(preds, test_set.clean, test_set.ids, meta)


# -- small-sample experiment ------------------------------------------------

def holdout_split(n: int, frac: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split into ``(train_idx, test_idx)`` with ``ceil(frac * n)`` test items."""
    if not 0 < frac < 1:
        raise ValueError("holdout fraction must lie in (0, 1)")
    perm = np.random.default_rng([seed, 21]).permutation(n)
    k = max(1, math.ceil(frac * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


@dataclass
class ExperimentResult:
    runs: list[dict]
    summary: list[dict]
    meta: dict

    def cell(self, arm: str, n_fake: int) -> dict:
        for row in self.summary:
            if row["arm"] == arm and row["n_fake"] == n_fake:
                return row
        raise KeyError((arm, n_fake))

    def table(self) -> str:
        """Two-row text table: real-only baseline and augmented arm, one column per N_f."""
        cols = sorted({r["n_fake"] for r in self.summary})
        n_real = self.meta["n_real"]
        head = "arm".ljust(12) + "".join(f"{n_real}+{nf}".rjust(24) for nf in cols)
        lines = [head]
        for arm in ("baseline", "augmented"):
            cells = []
            for nf in cols:
                try:
                    c = self.cell(arm, nf)
                    cells.append(f"{c['psnr_mean']:.2f}±{c['psnr_std']:.2f}/{c['ssim_mean']:.3f}".rjust(24))
                except KeyError:
                    cells.append("-".rjust(24))
            lines.append(arm.ljust(12) + "".join(cells))
        return "\n".join(lines)

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "small_sample_runs.csv", out_dir / "small_sample_summary.json"
        keys = ["arm", "n_real_train", "n_fake", "seed", "psnr", "ssim", "config_digest"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.runs)
        json_path.write_text(json.dumps({"meta": self.meta, "summary": self.summary}, indent=2, sort_keys=True))
        (out_dir / "small_sample_table.txt").write_text(self.table() + "\n")
        return csv_path, json_path


def _summarise(runs: list[dict]) -> list[dict]:
    out = []
    for arm, nf in sorted({(r["arm"], r["n_fake"]) for r in runs}):
        sel = [r for r in runs if r["arm"] == arm and r["n_fake"] == nf]
        p, s = np.array([r["psnr"] for r in sel]), np.array([r["ssim"] for r in sel])
        out.append({"arm": arm, "n_fake": nf, "n_real_train": sel[0]["n_real_train"], "seeds": [r["seed"] for r in sel],
                    "psnr_mean": float(p.mean()), "psnr_std": float(p.std(ddof=1)) if len(p) > 1 else 0.0,
                    "psnr_median": float(np.median(p)), "ssim_mean": float(s.mean()),
                    "ssim_std": float(s.std(ddof=1)) if len(s) > 1 else 0.0, "ssim_median": float(np.median(s))})
    return out


def small_sample_experiment(real_pool, n_real: int, n_fake_list, theta, derainer_trainer=None,
                            seeds=(0, 1, 2, 3, 4), holdout_frac: float = 0.1, split_seed: int = 0,
                            policy: str = "tile", matched_total: bool = True) -> ExperimentResult:
    """Baseline versus augmented derainer training at small real-sample counts.

    For every seed, ``n_real`` training pairs are drawn from the non-held-out
    part of ``real_pool``. The augmented arm adds ``N_f`` generated pairs;
    its ``N_f = 0`` column is the real-only run with the same ``n_real`` and
    is shared with the baseline row. With ``matched_total`` the baseline row
    also trains on ``n_real + N_f`` real pairs for every other ``N_f`` the
    pool can supply. ``derainer_trainer(train_set, seed)`` must return a
    callable that derains one ``H x W x C`` image.
    """
    from .generation import AugmentSpec, augment_dataset

    n_fake_list = sorted({int(n) for n in n_fake_list})
    if not n_fake_list or n_fake_list[0] < 0:
        raise ValueError("n_fake_list must hold non-negative counts")
    if 0 not in n_fake_list:
        n_fake_list = [0] + n_fake_list
    trainer = derainer_trainer or (lambda ds, seed: train_derainer(ds, seed))
    train_idx, test_idx = holdout_split(len(real_pool), holdout_frac, split_seed)
    if n_real < 1 or n_real > len(train_idx):
        raise ValueError(f"need {n_real} real training pairs but only {len(train_idx)} are outside the held-out set")
    if any(nf > 0 for nf in n_fake_list) and theta is None:
        raise ValueError("a trained generator is required for N_f > 0")
    test_set = real_pool.subset(test_idx)
    meta = {"n_real": n_real, "n_fake_list": n_fake_list, "seeds": list(seeds), "holdout_frac": holdout_frac,
            "split_seed": split_seed, "n_test": len(test_idx), "policy": policy, "metrics": metric_constants()}
    runs = []

    def run(arm, train_set, nf, seed, extra):
        digest = config_digest({**extra, "arm": arm, "n_fake": nf, "seed": seed, "split_seed": split_seed})
        rep = evaluate_derainer(trainer(train_set, seed), test_set)
        row = {"arm": arm, "n_real_train": extra["n_real_train"], "n_fake": nf, "seed": seed,
               "psnr": rep.psnr_mean, "ssim": rep.ssim_mean, "config_digest": digest}
        log.info("small-sample %s N_f=%d seed=%d: psnr %.3f ssim %.4f", arm, nf, seed, row["psnr"], row["ssim"])
        runs.append(row)
        return row

    for seed in seeds:
        order = np.random.default_rng([seed, 31]).permutation(train_idx)
        real = real_pool.subset(order[:n_real])
        base = run("baseline", real, 0, seed, {"n_real_train": n_real})
        runs.append({**base, "arm": "augmented"})
        for nf in n_fake_list:
            if nf == 0:
                continue
            aug, _, _ = augment_dataset(AugmentSpec(real, nf, seed=seed, policy=policy), theta)
            run("augmented", aug, nf, seed, {"n_real_train": n_real})
            if matched_total and n_real + nf <= len(train_idx):
                run("baseline", real_pool.subset(order[:n_real + nf]), nf, seed, {"n_real_train": n_real + nf})
    return ExperimentResult(runs, _summarise(runs), meta)
