"""Command-line entry point.

Every command resolves its options as built-in defaults, then an optional
YAML file (``--config``), then explicit flags, and writes the merged result
to ``effective_config.yaml`` in its output directory; passing that file back
with ``--config`` replays the command. Output goes to ``--out``, or to
``$RAINGEN_OUT/<command>`` (``./runs/<command>`` when unset).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (ImageDecodeError, ToyRainParams, load_paired_dataset, make_toy_rain_dataset,
                   read_image, save_paired_dataset, write_image)
from .networks import ArchConfig, Generator, RNet

log = logging.getLogger("raingen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "RAINGEN_OUT"
CONFIG_NAME = "effective_config.yaml"


class UsageError(ValueError):
    pass


class DataError(RuntimeError):
    pass


ARCH_KEYS = [f.name for f in fields(ArchConfig)]
LR_KEYS = {"lr_bnet": "W_B", "lr_rnet": "W_R", "lr_gen": "theta", "lr_disc": "W_D"}


def _ints(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).replace(",", " ").split()]


# option tables: key -> (type, default, help); flags are --key-with-dashes
ARCH_OPTS = {
    "patch_size": (int, 64, "training patch size (power of two >= 32)"),
    "latent_dim": (int, 128, "rain latent dimension t"),
    "rnet_base": (int, 32, "RNet first-block width"),
    "gen_base": (int, 32, "generator last-block width"),
    "disc_base": (int, 64, "critic first-block width"),
    "max_width": (int, 512, "width cap for RNet/G/D"),
    "bnet_width": (int, 32, "BNet inner width"),
    "bnet_stages": (int, 6, "BNet recurrent stages"),
    "bnet_resblocks": (int, 5, "BNet residual blocks per stage"),
}
DATA_OPTS = {
    "data": (str, None, "dataset directory"),
    "layout": (str, "rain100", "dataset layout: rain100 or manifest"),
}
TRAIN_OPTS = {
    **DATA_OPTS,
    **ARCH_OPTS,
    "variant": (str, "full", "full or no_bnet"),
    "gamma": (float, 1.0, "adversarial weight (0.01 for real-rain data)"),
    "eps0_sq": (float, 1e-6, "background prior variance"),
    "n_critic": (int, 5, "critic updates per outer step"),
    "lambda_gp": (float, 10.0, "gradient-penalty weight"),
    "batch_size": (int, 18, "mini-batch size"),
    "steps_per_epoch": (int, 3000, "outer steps per epoch"),
    "epochs": (int, 700, "total epochs"),
    "decay_epochs": (_ints, [400, 600, 650, 675, 690, 700], "epochs at which all rates halve"),
    "lr_bnet": (float, 2e-4, "BNet learning rate"),
    "lr_rnet": (float, 1e-4, "RNet learning rate"),
    "lr_gen": (float, 1e-4, "generator learning rate"),
    "lr_disc": (float, 4e-4, "critic learning rate"),
    "checkpoint_every": (int, 0, "checkpoint cadence in epochs (0: only the last)"),
    "dtype": (str, "float32", "float32 or float64"),
    "deterministic": (bool, True, "deterministic kernels"),
    "resume": (str, None, "checkpoint to resume from"),
    "bnet_init": (str, None, "pretrained BNet checkpoint to start from"),
}
COMMANDS = {
    "train": TRAIN_OPTS,
    "pretrain-bnet": {
        **DATA_OPTS, **ARCH_OPTS,
        "steps": (int, 1000, "optimisation steps"),
        "batch_size": (int, 18, "mini-batch size"),
        "lr": (float, 2e-4, "learning rate"),
        "eps0_sq": (float, 1e-6, "initial BNet variance"),
    },
    "sample": {
        "ckpt": (str, None, "trained checkpoint"),
        "n": (int, 16, "number of rain patches"),
        "ncol": (int, 8, "montage columns"),
    },
    "sweep": {
        "ckpt": (str, None, "trained checkpoint"),
        "dim": (int, 0, "latent coordinate to vary"),
        "lo": (float, -3.0, "lowest value"),
        "hi": (float, 3.0, "highest value"),
        "count": (int, 9, "number of values, endpoints included"),
        "base_z": (str, None, "JSON file with the base code (default: drawn from --seed)"),
    },
    "interp": {
        "ckpt": (str, None, "trained checkpoint"),
        "a": (str, None, "first rainy image (encoded with RNet)"),
        "b": (str, None, "second rainy image"),
        "steps": (int, 8, "frames including both endpoints"),
    },
    "augment": {
        **DATA_OPTS,
        "ckpt": (str, None, "trained checkpoint"),
        "real": (int, 0, "real pairs drawn from the dataset (0: all)"),
        "fake": (int, 0, "generated pairs to add"),
        "policy": (str, "tile", "full-size rain layer policy: tile or resize"),
        "clamp": (bool, True, "clip rainy images to [0, 1]"),
        "save_rain": (bool, False, "also write generated rain layers"),
    },
    "eval": {
        "pred": (str, None, "directory of derained images"),
        "gt": (str, None, "directory of ground-truth images (matched by file name)"),
    },
    "exp-small-sample": {
        **DATA_OPTS,
        "ckpt": (str, None, "trained checkpoint"),
        "n_real": (int, 10, "real training pairs per run"),
        "n_fake": (_ints, [0, 10, 40], "generated-pair counts"),
        "seeds": (_ints, [0, 1, 2, 3, 4], "repetition seeds"),
        "holdout": (float, 0.1, "held-out fraction of the pool"),
        "split_seed": (int, 0, "seed of the held-out split"),
        "policy": (str, "tile", "full-size rain layer policy"),
        "derainer_steps": (int, 150, "derainer optimisation steps"),
        "derainer_batch": (int, 8, "derainer batch size"),
        "derainer_patch": (int, 32, "derainer patch size"),
        "derainer_width": (int, 8, "derainer BNet width"),
        "matched_total": (bool, True, "also train real-only baselines of size n_real + N_f"),
    },
    "make-toy": {
        "pairs": (int, 500, "number of pairs"),
        "size": (int, 64, "image size"),
        "angle": (float, 70.0, "mean streak angle in degrees (90 is vertical)"),
        "spread": (float, 3.0, "standard deviation of the angle"),
        "streaks_min": (int, 6, "fewest streaks per image"),
        "streaks_max": (int, 14, "most streaks per image"),
    },
}
COMMON = {
    "seed": (int, 0, "master seed"),
    "out": (str, None, "output directory"),
}


def _flag(key):
    return "--" + key.replace("_", "-")


def _parse_bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raingen", description="Variational rain generation toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file with option values (flags take precedence)")
        for key, (typ, default, text) in {**COMMON, **opts}.items():
            conv = _parse_bool if typ is bool else typ
            p.add_argument(_flag(key), dest=key, type=conv, default=argparse.SUPPRESS,
                           help=f"{text} (default: {default})")
    return parser


def resolve(command: str, flags: dict, config_path: str | None) -> dict:
    """Merge defaults, the YAML file and explicit flags; unknown keys are usage errors."""
    table = {**COMMON, **COMMANDS[command]}
    cfg = {k: v[1] for k, v in table.items()}
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {config_path} must hold a mapping")
        file_cmd = loaded.pop("command", command)
        if file_cmd != command:
            raise UsageError(f"config file was written for command {file_cmd!r}, not {command!r}")
        for key, value in loaded.items():
            if key not in table:
                raise UsageError(f"unknown config key {key!r} for command {command!r}")
            typ = table[key][0]
            try:
                cfg[key] = value if value is None else (_parse_bool(value) if typ is bool else typ(value))
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for config key {key!r}: {value!r}") from exc
    cfg.update(flags)
    return cfg


def _out_dir(command: str, cfg: dict) -> Path:
    if cfg.get("out"):
        return Path(cfg["out"])
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(_flag(k) for k in missing))


def write_effective_config(out: Path, command: str, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_NAME
    path.write_text(yaml.safe_dump({"command": command, **cfg}, sort_keys=True))
    return path


# -- builders -------------------------------------------------------------

def arch_from(cfg: dict) -> ArchConfig:
    try:
        return ArchConfig(**{k: cfg[k] for k in ARCH_OPTS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid architecture: {exc}") from exc


def train_config_from(cfg: dict):
    from .training import TrainConfig

    try:
        return TrainConfig(
            gamma=cfg["gamma"], eps0_sq=cfg["eps0_sq"], n_critic=cfg["n_critic"], lambda_gp=cfg["lambda_gp"],
            batch_size=cfg["batch_size"], patches_per_epoch=cfg["steps_per_epoch"] * cfg["batch_size"],
            base_lrs={v: cfg[k] for k, v in LR_KEYS.items()}, decay_epochs=list(cfg["decay_epochs"]),
            total_epochs=cfg["epochs"], variant=cfg["variant"], seed=cfg["seed"],
            deterministic=cfg["deterministic"], dtype=cfg["dtype"], checkpoint_every=cfg["checkpoint_every"],
            arch=arch_from(cfg),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc


def _dataset(cfg: dict):
    _require(cfg, "data")
    if cfg["layout"] not in ("rain100", "manifest"):
        raise UsageError(f"unknown layout {cfg['layout']!r}")
    ds = load_paired_dataset(cfg["data"], cfg["layout"])
    if len(ds) == 0:
        raise DataError(f"no image pairs found under {cfg['data']}")
    return ds


def _load_part(cfg: dict, key: str):
    _require(cfg, "ckpt")
    ckpt = load_checkpoint(cfg["ckpt"])
    if key not in ckpt.params:
        raise CheckpointError(f"checkpoint {cfg['ckpt']} holds no {key} parameters")
    arch = ArchConfig.from_dict(ckpt.arch)
    net = {"theta": Generator, "W_R": RNet}[key](arch)
    try:
        net.load_state_dict(ckpt.params[key])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {cfg['ckpt']} does not fit its recorded architecture: {exc}") from exc
    return net.eval(), ckpt


def _save_frames(out: Path, patches: np.ndarray, z: np.ndarray, prefix: str, ncol: int, extra: dict):
    from .generation import montage, z_digest

    out.mkdir(parents=True, exist_ok=True)
    for k, p in enumerate(patches):
        write_image(out / f"{prefix}_{k:05d}.png", p.transpose(1, 2, 0))
    if len(patches):
        write_image(out / f"{prefix}_montage.png", np.clip(montage(patches, ncol), 0, 1))
    (out / "z.json").write_text(json.dumps({"z": np.asarray(z).tolist(), "z_digest": z_digest(np.asarray(z)),
                                            **extra}, indent=1, sort_keys=True))


# -- commands -------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> int:
    from .training import Trainer

    config = train_config_from(cfg)
    ds = _dataset(cfg)
    if cfg["resume"]:
        trainer = Trainer.resume(cfg["resume"], ds, out_dir=out, config=config)
    else:
        trainer = Trainer(config, ds, out_dir=out)
        if cfg["bnet_init"]:
            init = load_checkpoint(cfg["bnet_init"], expected_arch=config.arch.to_dict())
            if "W_B" not in init.params:
                raise CheckpointError(f"{cfg['bnet_init']} holds no BNet parameters")
            trainer.warm_start_bnet(init.params["W_B"])
    means = trainer.fit()
    (out / "epoch_means.json").write_text(json.dumps(means, indent=1))
    log.info("trained to epoch %d, checkpoint %s", trainer.epoch, out / "last.vrg")
    return EXIT_OK


def cmd_pretrain_bnet(cfg: dict, out: Path) -> int:
    from .training import pretrain_bnet

    arch = arch_from(cfg)
    ds = _dataset(cfg)
    if cfg["steps"] < 1 or cfg["batch_size"] < 1:
        raise UsageError("--steps and --batch-size must be >= 1")
    sd, losses = pretrain_bnet(ds, arch, cfg["steps"], seed=cfg["seed"], batch_size=cfg["batch_size"],
                               lr=cfg["lr"], eps0_sq=cfg["eps0_sq"])
    save_checkpoint(out / "bnet.vrg", Checkpoint(arch=arch.to_dict(), params={"W_B": sd}, variant="bnet_only",
                                                 step=cfg["steps"], extra={"loss": "negative ssim"}))
    with open(out / "loss_log.csv", "w") as fh:
        fh.write("step,neg_ssim\n")
        fh.writelines(f"{i},{v}\n" for i, v in enumerate(losses))
    return EXIT_OK


def cmd_sample(cfg: dict, out: Path) -> int:
    from .generation import sample_rain

    theta, _ = _load_part(cfg, "theta")
    if cfg["n"] < 0:
        raise UsageError("--n must be >= 0")
    patches, z = sample_rain(cfg["n"], cfg["seed"], theta)
    _save_frames(out, patches, z, "rain", cfg["ncol"], {"seed": cfg["seed"]})
    return EXIT_OK


def cmd_sweep(cfg: dict, out: Path) -> int:
    from .generation import SweepSpec, disentangle_sweep

    theta, _ = _load_part(cfg, "theta")
    base = None
    if cfg["base_z"]:
        base = np.asarray(json.loads(Path(cfg["base_z"]).read_text()), dtype=np.float64)
    spec = SweepSpec(dim=cfg["dim"], lo=cfg["lo"], hi=cfg["hi"], count=cfg["count"], base_z=base, seed=cfg["seed"])
    try:
        spec.validate(theta.cfg.latent_dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    patches, z = disentangle_sweep(spec, theta)
    _save_frames(out, patches, z, "sweep", cfg["count"], {"dim": cfg["dim"], "values": z[:, cfg["dim"]].tolist()})
    return EXIT_OK


def _patch_for(path: str, size: int) -> np.ndarray:
    img = read_image(path)
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DataError(f"{path} is {h}x{w}, smaller than the {size}px patch size")
    top, left = (h - size) // 2, (w - size) // 2
    crop = img[top:top + size, left:left + size]
    if crop.shape[2] == 1:
        crop = np.repeat(crop, 3, axis=2)
    return crop.transpose(2, 0, 1)


def cmd_interp(cfg: dict, out: Path) -> int:
    from .generation import encode, interpolate

    _require(cfg, "a", "b")
    theta, ckpt = _load_part(cfg, "theta")
    rnet, _ = _load_part(cfg, "W_R")
    size = theta.cfg.patch_size
    za, zb = encode(_patch_for(cfg["a"], size), rnet), encode(_patch_for(cfg["b"], size), rnet)
    try:
        frames, z = interpolate(za, zb, cfg["steps"], theta)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _save_frames(out, frames, z, "interp", cfg["steps"], {"endpoints": "posterior means"})
    return EXIT_OK


def cmd_augment(cfg: dict, out: Path) -> int:
    from .generation import AugmentSpec, augment_dataset, write_augmented

    theta, _ = _load_part(cfg, "theta")
    ds = _dataset(cfg)
    if cfg["real"] < 0 or cfg["fake"] < 0:
        raise UsageError("--real and --fake must be >= 0")
    if cfg["real"]:
        if cfg["real"] > len(ds):
            raise DataError(f"asked for {cfg['real']} real pairs but the dataset has {len(ds)}")
        idx = np.sort(np.random.default_rng([cfg["seed"], 41]).choice(len(ds), cfg["real"], replace=False))
        ds = ds.subset(idx)
    try:
        spec = AugmentSpec(ds, cfg["fake"], seed=cfg["seed"], policy=cfg["policy"], clamp=cfg["clamp"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    aug, manifest, layers = augment_dataset(spec, theta)
    write_augmented(out, aug, manifest, layers if cfg["save_rain"] else None)
    log.info("wrote %d real + %d generated pairs to %s", len(ds), len(manifest), out)
    return EXIT_OK


def _images(directory: str) -> dict[str, Path]:
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{directory} is not a directory")
    return {p.name: p for p in sorted(root.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")}


def cmd_eval(cfg: dict, out: Path) -> int:
    from .evaluation import evaluate_pairs

    _require(cfg, "pred", "gt")
    pred, gt = _images(cfg["pred"]), _images(cfg["gt"])
    names = sorted(set(pred) & set(gt))
    if not names:
        raise DataError("no file names shared by --pred and --gt")
    for missing in sorted(set(pred) ^ set(gt)):
        log.warning("unmatched image %s skipped", missing)
    preds, gts = [], []
    for n in names:
        a, b = read_image(pred[n]), read_image(gt[n])
        if a.shape != b.shape:
            raise DataError(f"{n}: prediction {a.shape} and ground truth {b.shape} differ")
        preds.append(a)
        gts.append(b)
    report = evaluate_pairs(preds, gts, names, meta={"pred": cfg["pred"], "gt": cfg["gt"]})
    report.write(out)
    log.info("PSNR %.3f dB, SSIM %.4f over %d images", report.psnr_mean, report.ssim_mean, len(names))
    return EXIT_OK


def cmd_small_sample(cfg: dict, out: Path) -> int:
    from .evaluation import DerainerRecipe, small_sample_experiment, train_derainer

    ds = _dataset(cfg)
    theta = None
    if any(n > 0 for n in cfg["n_fake"]):
        theta, _ = _load_part(cfg, "theta")
    recipe = DerainerRecipe(width=cfg["derainer_width"], steps=cfg["derainer_steps"],
                            batch_size=cfg["derainer_batch"], patch_size=cfg["derainer_patch"])
    res = small_sample_experiment(ds, cfg["n_real"], cfg["n_fake"], theta,
                                  derainer_trainer=lambda d, s: train_derainer(d, s, recipe),
                                  seeds=cfg["seeds"], holdout_frac=cfg["holdout"], split_seed=cfg["split_seed"],
                                  policy=cfg["policy"], matched_total=cfg["matched_total"])
    res.meta["recipe"] = recipe.__dict__
    res.write(out)
    print(res.table())
    return EXIT_OK


def cmd_make_toy(cfg: dict, out: Path) -> int:
    try:
        params = ToyRainParams(n_pairs=cfg["pairs"], image_size=cfg["size"], angle_mean=cfg["angle"],
                               angle_spread=cfg["spread"], streaks=(cfg["streaks_min"], cfg["streaks_max"]),
                               seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    make_toy_rain_dataset(params, out_dir=out)
    return EXIT_OK


HANDLERS = {
    "train": cmd_train, "pretrain-bnet": cmd_pretrain_bnet, "sample": cmd_sample, "sweep": cmd_sweep,
    "interp": cmd_interp, "augment": cmd_augment, "eval": cmd_eval, "exp-small-sample": cmd_small_sample,
    "make-toy": cmd_make_toy,
}


def main(argv=None) -> int:
    from .training import NonFiniteLossError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve(args.command, flags, args.config)
        out = _out_dir(args.command, cfg)
        write_effective_config(out, args.command, cfg)
        return HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print(f"raingen {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"raingen {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ImageDecodeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"raingen {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # raised by the library on inputs it cannot work with (pool too small, bad shapes, ...)
        print(f"raingen {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
