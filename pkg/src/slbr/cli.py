"""Command line: ``slbr {synth,train,eval,infer,ablate}``.

Configuration is a flat ``key=value`` file with dotted namespaces
(``network.n_cff=3``); ``--set key=value`` overrides win over file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import synth
from .losses import LossWeights
from .metrics import evaluate_corpus, predict
from .network import CheckpointError, NetworkConfig, load_model
from .train import NonFiniteLossError, TrainConfig, format_ablation_table, run_ablation_grid, train

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

log = logging.getLogger("slbr")


class InputError(Exception):
    pass


def _defaults():
    d = {
        "data.root": "",
        "synth.backgrounds": "",
        "synth.watermarks": "",
        "synth.image_size": 256,
        "synth.alpha_min": 0.3,
        "synth.alpha_max": 0.7,
        "synth.size_min": 0.25,
        "synth.size_max": 0.6,
        "synth.max_rotation": 45.0,
        "eval.checkpoint": "",
        "eval.model": "checkpoint",
        "infer.checkpoint": "",
        "ablate.rows": [1, 5, 9, 12, 13],
    }
    for f in fields(TrainConfig):
        if f.name not in ("weights", "network"):
            d[f"train.{f.name}"] = getattr(TrainConfig, f.name, None)
    d["train.vgg_widths"] = [64, 128, 256]
    for f in fields(LossWeights):
        d[f"loss.{f.name}"] = getattr(LossWeights(), f.name)
    for k, v in NetworkConfig().to_dict().items():
        d[f"network.{k}"] = v
    return d


DEFAULTS = _defaults()


def _coerce(key, raw: str):
    ref = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(ref, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
        if isinstance(ref, list):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if ref and isinstance(ref[0], bool):
                return [x.lower() in ("1", "true", "yes", "on") for x in items]
            return [int(x) for x in items]
    except ValueError as exc:
        raise InputError(f"{key}: cannot parse {raw!r} ({exc})") from exc
    return raw


def parse_pairs(lines, source):
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in DEFAULTS:
            raise InputError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=()):
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file {path} not found")
        cfg.update(parse_pairs(p.read_text().splitlines(), str(p)))
    cfg.update(parse_pairs(overrides, "--set"))
    return cfg


def section(cfg, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def train_config(cfg):
    t = section(cfg, "train")
    t["weights"] = LossWeights(**section(cfg, "loss"))
    t["network"] = NetworkConfig.from_dict(section(cfg, "network"))
    return TrainConfig.from_dict(t)


def _image_files(directory):
    d = Path(directory) if directory else None
    if d is None or not d.is_dir():
        raise InputError(f"directory {directory!r} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"no images in {directory}")
    return files


def _dataset(cfg, args):
    root = cfg["data.root"]
    if not root or not Path(root).is_dir():
        raise InputError(f"dataset directory {root!r} does not exist")
    try:
        return synth.read_dataset(root)
    except synth.DatasetError as exc:
        raise InputError(str(exc)) from exc


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg, args):
    size = cfg["synth.image_size"]
    backgrounds = [synth.fit_square(synth.load_rgb(p), size) for p in _image_files(cfg["synth.backgrounds"])]
    assets = [synth.load_watermark(p) for p in _image_files(cfg["synth.watermarks"])]
    alpha_range = (cfg["synth.alpha_min"], cfg["synth.alpha_max"])
    seed = cfg["train.seed"]
    samples = synth.synthesize(
        backgrounds, assets, seed, alpha_range,
        size_range=(cfg["synth.size_min"], cfg["synth.size_max"]),
        max_rotation=cfg["synth.max_rotation"],
    )
    out = _out_dir(args, cfg["data.root"] or "dataset")
    manifest = synth.write_dataset(samples, out, seed=seed, alpha_range=alpha_range)
    alphas = [e["global_alpha"] for e in manifest["samples"]]
    print(f"wrote {manifest['count']} samples to {out} (seed {seed}, "
          f"alpha {min(alphas):.3f}..{max(alphas):.3f}, size {manifest['image_size']})")
    return EXIT_OK


def cmd_train(cfg, args):
    samples = _dataset(cfg, args)
    tcfg = train_config(cfg)
    out = _out_dir(args, "run")
    res = train(tcfg, samples, out_dir=out)
    print(f"trained {res.step} steps; final loss {res.history[-1]['total']:.5f}; checkpoint {out / 'last.pt'}")
    return EXIT_OK


class IdentityModel(torch.nn.Module):
    """Returns the input as both restorations and an empty mask."""

    def forward(self, J):
        from .network import CoarseOutput, RefineOutput

        m = torch.zeros_like(J[:, :1])
        return CoarseOutput(J, [(m, m)] * 3, []), RefineOutput(J)


def _model(cfg, key):
    if key == "eval.checkpoint" and cfg["eval.model"] == "identity":
        return IdentityModel()
    path = cfg[key]
    if not path or not Path(path).is_file():
        raise InputError(f"checkpoint {path!r} not found")
    return load_model(path)


def cmd_eval(cfg, args):
    samples = _dataset(cfg, args)
    model = _model(cfg, "eval.checkpoint")
    report = evaluate_corpus(model, samples)
    out = _out_dir(args, "eval")
    report.write(out / "metrics.json")
    print(report.summary())
    return EXIT_OK


def pad_to_multiple(img, multiple):
    """Reflect-pad to a square whose side is a multiple of ``multiple``; returns (padded, (h, w))."""
    h, w = img.shape[:2]
    side = max(h, w, 2 * multiple)
    side = -(-side // multiple) * multiple
    padded = np.pad(img, ((0, side - h), (0, side - w), (0, 0)), mode="reflect") if (h, w) != (side, side) else img
    return padded, (h, w)


def cmd_infer(cfg, args):
    if not args.image:
        raise InputError("infer needs an input image path")
    path = Path(args.image)
    try:
        img = synth.load_rgb(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    model = _model(cfg, "infer.checkpoint")
    padded, (h, w) = pad_to_multiple(img, model.cfg.size_multiple)
    refined, coarse, mask, _ = predict(model, padded)
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    for suffix, arr in (("refined", refined), ("coarse", coarse), ("mask", mask)):
        synth.save_png(out / f"{path.stem}_{suffix}.png", arr[:h, :w])
    print(f"wrote {path.stem}_refined/_coarse/_mask.png to {out}")
    return EXIT_OK


def cmd_ablate(cfg, args):
    samples = _dataset(cfg, args)
    base = train_config(cfg)
    out = _out_dir(args, "ablation")
    results = run_ablation_grid(base, cfg["ablate.rows"], samples, out_dir=out)
    print(format_ablation_table(results), end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate}


def build_parser():
    p = argparse.ArgumentParser(prog="slbr", description="Watermark removal: synthesis, training, evaluation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("image", nargs="?", help="input image (infer only)")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"train.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (InputError, synth.DatasetError, synth.PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
