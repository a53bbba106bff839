"""Paired rainy/clean datasets, seeded patch sampling and toy rain synthesis.

Images live in memory as float32 ``H x W x C`` arrays in ``[0, 1]`` and on
disk as 8-bit PNGs. Two directory layouts are understood:

* ``rain100``: files named ``rain-<id>.png`` next to ``norain-<id>.png``
  (searched recursively);
* ``manifest``: a ``manifest.jsonl`` whose records carry ``rainy``,
  ``clean`` and optionally ``id`` paths relative to the root.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

LAYOUTS = ("rain100", "manifest")
_RAIN100 = re.compile(r"^(no)?rain-(.+)\.png$", re.IGNORECASE)


class ImageDecodeError(OSError):
    pass


@dataclass
class PairedDataset:
    """Aligned (rainy, clean) pairs with unique ids.

    ``meta`` optionally carries per-pair ground truth (toy data), ``rejects``
    lists files that could not be paired.
    """

    rainy: list[np.ndarray]
    clean: list[np.ndarray]
    ids: list[str]
    layout: str = "memory"
    meta: list[dict] | None = None
    rejects: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.rainy) == len(self.clean) == len(self.ids)):
            raise ValueError("rainy, clean and ids must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("pair ids must be unique")
        for o, x, i in zip(self.rainy, self.clean, self.ids):
            if o.shape != x.shape:
                raise ValueError(f"pair {i}: rainy {o.shape} vs clean {x.shape}")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, idx):
        return self.rainy[idx], self.clean[idx]

    def subset(self, indices) -> "PairedDataset":
        indices = list(indices)
        return PairedDataset(
            rainy=[self.rainy[i] for i in indices],
            clean=[self.clean[i] for i in indices],
            ids=[self.ids[i] for i in indices],
            layout=self.layout,
            meta=[self.meta[i] for i in indices] if self.meta else None,
        )

    def concat(self, other: "PairedDataset") -> "PairedDataset":
        meta = None
        if self.meta is not None or other.meta is not None:
            meta = (self.meta or [{"id": i} for i in self.ids]) + (other.meta or [{"id": i} for i in other.ids])
        return PairedDataset(self.rainy + other.rainy, self.clean + other.clean,
                             self.ids + other.ids, layout=self.layout, meta=meta)


# -- image io ---------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Decode an image file to float32 ``H x W x C`` in ``[0, 1]``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray):
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


# -- loading ----------------------------------------------------------------

def _pair_or_reject(o_path, x_path, pid, rainy, clean, ids, rejects):
    o, x = read_image(o_path), read_image(x_path)
    if o.shape != x.shape:
        rejects.append({"id": pid, "reason": "shape mismatch", "rainy": str(o_path),
                        "clean": str(x_path), "shapes": [list(o.shape), list(x.shape)]})
        return
    rainy.append(o)
    clean.append(x)
    ids.append(pid)


def load_paired_dataset(root, layout: str = "rain100") -> PairedDataset:
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    rainy, clean, ids, rejects = [], [], [], []

    if layout == "rain100":
        found: dict[str, dict[str, Path]] = {}
        for p in sorted(root.rglob("*.png")):
            m = _RAIN100.match(p.name)
            if not m:
                continue
            rel = p.parent.relative_to(root).as_posix()
            key = m.group(2) if rel == "." else f"{rel}/{m.group(2)}"
            found.setdefault(key, {})["clean" if m.group(1) else "rainy"] = p
        for key in sorted(found):
            entry = found[key]
            if len(entry) < 2:
                kind = next(iter(entry))
                rejects.append({"id": key, "reason": f"orphan {kind} file", kind: str(entry[kind])})
                continue
            _pair_or_reject(entry["rainy"], entry["clean"], key, rainy, clean, ids, rejects)
    else:
        manifest = root / "manifest.jsonl"
        if manifest.exists():
            for n, line in enumerate(manifest.read_text().splitlines()):
                if not line.strip():
                    continue
                rec = json.loads(line)
                pid = str(rec.get("id", n))
                o_path, x_path = root / rec["rainy"], root / rec["clean"]
                missing = [str(p) for p in (o_path, x_path) if not p.exists()]
                if missing:
                    rejects.append({"id": pid, "reason": "missing file", "paths": missing})
                    continue
                _pair_or_reject(o_path, x_path, pid, rainy, clean, ids, rejects)

    meta = None
    meta_path = root / "meta.jsonl"
    if meta_path.exists():
        by_id = {}
        for line in meta_path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                by_id[str(rec["id"])] = rec
        if all(i in by_id for i in ids):
            meta = [by_id[i] for i in ids]
    if rejects:
        log.warning("%d unpaired or inconsistent files under %s", len(rejects), root)
    return PairedDataset(rainy, clean, ids, layout=layout, meta=meta, rejects=rejects)


def save_paired_dataset(ds: PairedDataset, root, rain_layers: list[np.ndarray] | None = None):
    """Write ``ds`` in the rain100 layout (plus ``meta.jsonl`` when present)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for k, (o, x, pid) in enumerate(zip(ds.rainy, ds.clean, ds.ids)):
        write_image(root / f"rain-{pid}.png", o)
        write_image(root / f"norain-{pid}.png", x)
        if rain_layers is not None:
            write_image(root / f"rainlayer-{pid}.png", rain_layers[k])
    if ds.meta is not None:
        with open(root / "meta.jsonl", "w") as fh:
            for rec in ds.meta:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- patch sampling ---------------------------------------------------------

def sample_patches(ds: PairedDataset, count: int, patch_size: int, seed,
                   batch_size: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``count`` aligned random crops as ``(N, C, P, P)`` float32 arrays.

    Crops are drawn uniformly over eligible images and top-left corners from a
    stream seeded by ``seed`` (an int or a sequence of ints). The same window
    is cut from the rainy and the clean image. With ``batch_size`` the crops
    are grouped; otherwise each yield holds one crop.
    """
    eligible = [i for i, o in enumerate(ds.rainy)
                if o.shape[0] >= patch_size and o.shape[1] >= patch_size]
    skipped = len(ds) - len(eligible)
    if skipped:
        log.warning("%d images smaller than %d px excluded from patch sampling", skipped, patch_size)
    if not eligible:
        raise ValueError("no image is large enough for the requested patch size")
    rng = np.random.default_rng(seed)
    bs = batch_size or 1
    remaining = count
    while remaining > 0:
        n = min(bs, remaining)
        o_batch, x_batch = [], []
        for _ in range(n):
            idx = eligible[rng.integers(len(eligible))]
            o, x = ds.rainy[idx], ds.clean[idx]
            top = rng.integers(o.shape[0] - patch_size + 1)
            left = rng.integers(o.shape[1] - patch_size + 1)
            win = np.s_[top:top + patch_size, left:left + patch_size]
            o_batch.append(o[win].transpose(2, 0, 1))
            x_batch.append(x[win].transpose(2, 0, 1))
        remaining -= n
        yield np.stack(o_batch), np.stack(x_batch)


# -- toy rain ---------------------------------------------------------------

BACKGROUNDS = ("flat", "gradient", "noise")


@dataclass
class ToyRainParams:
    """Knobs of the procedural rain used for desk-scale experiments.

    Angles are in degrees, measured counter-clockwise from the image's
    horizontal axis (90 is vertical); streak orientation is drawn from a
    normal distribution with the given mean and standard deviation.
    """

    n_pairs: int = 500
    image_size: int = 64
    channels: int = 3
    streaks: tuple[int, int] = (6, 14)
    angle_mean: float = 70.0
    angle_spread: float = 3.0
    length: tuple[float, float] = (14.0, 30.0)
    width: tuple[float, float] = (1.0, 2.0)
    intensity: tuple[float, float] = (0.3, 0.6)
    blur: float = 4.0
    backgrounds: tuple[str, ...] = BACKGROUNDS
    flat_level: float | None = None
    tint: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("streaks", "length", "width", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if self.streaks[0] < 0 or self.length[0] <= 0 or self.width[0] <= 0:
            raise ValueError("streak count must be >= 0 and lengths/widths positive")
        if not (0 <= self.intensity[0] and self.intensity[1] <= 1):
            raise ValueError("intensities must lie in [0, 1]")
        if self.angle_spread < 0 or self.blur < 0:
            raise ValueError("angle_spread and blur must be non-negative")
        bad = set(self.backgrounds) - set(BACKGROUNDS)
        if bad or not self.backgrounds:
            raise ValueError(f"backgrounds must be a non-empty subset of {BACKGROUNDS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def render_streak(size: int, center, angle_deg: float, length: float, width: float,
                  intensity: float, blur: float = 0.0) -> np.ndarray:
    """Render one anti-aliased, motion-blurred line segment on a ``size x size`` grid.

    Across the streak the profile is the pixel coverage of a bar of the given
    width; along it, a box of ``length`` convolved with a box of ``blur``
    (a trapezoid), which is the segment smeared along its own direction. The
    flat core has exactly ``intensity``.
    """
    theta = math.radians(angle_deg)
    # unit direction in (row, col) with rows pointing down
    d_row, d_col = -math.sin(theta), math.cos(theta)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dr, dc = rows - center[0], cols - center[1]
    along = dr * d_row + dc * d_col
    across = np.abs(-dr * d_col + dc * d_row)
    cover = np.clip(width / 2.0 + 0.5 - across, 0.0, 1.0)
    half = length / 2.0
    if blur > 0:
        ramp = np.clip((half + blur / 2.0 - np.abs(along)) / blur, 0.0, 1.0)
    else:
        ramp = (np.abs(along) <= half).astype(np.float64)
    return intensity * cover * ramp


def _background(kind: str, size: int, channels: int, rng: np.random.Generator,
                flat_level: float | None = None, tint: float = 0.05) -> np.ndarray:
    tint = rng.uniform(-tint, tint, size=channels) if tint > 0 else np.zeros(channels)
    if kind == "flat":
        img = np.full((size, size), rng.uniform(0.2, 0.6) if flat_level is None else flat_level)
    elif kind == "gradient":
        a, b = rng.uniform(0.15, 0.65, size=2)
        phi = rng.uniform(0, 2 * math.pi)
        rows, cols = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        t = (np.cos(phi) * cols + np.sin(phi) * rows)
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        img = a + (b - a) * t
    else:
        coarse = rng.uniform(0.2, 0.6, size=(size // 8 + 2, size // 8 + 2))
        up = np.kron(coarse, np.ones((8, 8)))[:size + 8, :size + 8]
        k = np.ones(8) / 8
        up = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, up)
        up = np.apply_along_axis(lambda c: np.convolve(c, k, mode="same"), 0, up)
        img = up[4:4 + size, 4:4 + size]
    return np.clip(img[:, :, None] + tint[None, None, :], 0.0, 1.0)


def toy_pair(params: ToyRainParams, index: int):
    """Deterministically build pair ``index``: returns ``(o, x, r, meta)``."""
    rng = np.random.default_rng([params.seed, index])
    size, ch = params.image_size, params.channels
    kind = params.backgrounds[rng.integers(len(params.backgrounds))]
    x = _background(kind, size, ch, rng, params.flat_level, params.tint)
    rain = np.zeros((size, size))
    angles = []
    for _ in range(int(rng.integers(params.streaks[0], params.streaks[1] + 1))):
        angle = float(rng.normal(params.angle_mean, params.angle_spread))
        center = rng.uniform(0, size, size=2)
        length = rng.uniform(*params.length)
        width = rng.uniform(*params.width)
        inten = rng.uniform(*params.intensity)
        rain += render_streak(size, center, angle, length, width, inten, params.blur)
        angles.append(angle)
    r = np.repeat(np.minimum(rain, 1.0)[:, :, None], ch, axis=2)
    o = np.clip(x + r, 0.0, 1.0)
    meta = {"id": f"{index:05d}", "background": kind, "angles": angles}
    return o.astype(np.float32), x.astype(np.float32), r.astype(np.float32), meta


def make_toy_rain_dataset(params: ToyRainParams, out_dir=None) -> PairedDataset:
    """Generate ``params.n_pairs`` toy pairs; optionally write them to ``out_dir``.

    ``meta`` holds the true streak orientations of every pair.
    """
    rainy, clean, ids, meta = [], [], [], []
    for i in range(params.n_pairs):
        o, x, _, m = toy_pair(params, i)
        rainy.append(o)
        clean.append(x)
        ids.append(m["id"])
        meta.append(m)
    ds = PairedDataset(rainy, clean, ids, layout="rain100", meta=meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_paired_dataset(ds, out_dir)
        (out_dir / "toy_params.json").write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True))
    return ds
