"""End-to-end training, checkpoint/resume, and the ablation grid driver."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .losses import VGG16_WIDTHS, LossWeights, PerceptualExtractor, total_loss
from .metrics import evaluate_corpus
from .network import (
    CHECKPOINT_VERSION,
    ABLATION_ROWS,
    CheckpointError,
    NetworkConfig,
    build_model,
    config_diff,
    count_parameters,
    load_weights,
    read_checkpoint,
    row_config,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "total", "l1_coarse", "l1_refined", "vgg", "mask", "mask_prime")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 8
    beta1: float = 0.5
    beta2: float = 0.999
    image_size: int = 256
    max_steps: int = 1000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr_decay_every: int = 0  # 0 keeps the learning rate constant
    lr_decay_gamma: float = 0.1
    grad_clip: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 0
    vgg_widths: tuple = VGG16_WIDTHS
    vgg_weights: str = ""

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.vgg_widths = tuple(int(w) for w in self.vgg_widths)
        if self.lr < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("need lr >= 0, batch_size >= 1, max_steps >= 0")
        if self.image_size % self.network.size_multiple:
            raise ValueError(f"image_size must be divisible by {self.network.size_multiple}")

    def to_dict(self):
        d = asdict(self)
        d["vgg_widths"] = list(self.vgg_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    step: int
    checkpoint: dict | None = None


def to_tensors(samples, dtype=torch.float32):
    J = np.stack([s.J for s in samples]).transpose(0, 3, 1, 2)
    I = np.stack([s.I for s in samples]).transpose(0, 3, 1, 2)
    M = np.stack([s.M for s in samples]).transpose(0, 3, 1, 2)
    return (torch.from_numpy(np.ascontiguousarray(a)).to(dtype) for a in (J, I, M))


def batch_indices(n, batch_size, seed, step):
    """Indices of the batch consumed at ``step``: per-epoch permutation seeded from (seed, epoch)."""
    per_epoch = n // batch_size
    epoch, pos = divmod(step, per_epoch)
    gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    perm = torch.randperm(n, generator=gen)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def make_extractor(cfg: TrainConfig):
    if cfg.vgg_weights:
        return PerceptualExtractor(weights_path=cfg.vgg_weights)
    return PerceptualExtractor.from_env(seed=cfg.seed, widths=cfg.vgg_widths)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def current_lr(cfg: TrainConfig, step):
    if cfg.lr_decay_every > 0:
        return cfg.lr * cfg.lr_decay_gamma ** (step // cfg.lr_decay_every)
    return cfg.lr


def checkpoint_payload(model, optimizer, cfg: TrainConfig, step):
    return {
        "format_version": CHECKPOINT_VERSION,
        "network": model.cfg.to_dict(),
        "train": cfg.to_dict(),
        "step": step,
        "weights": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict(),
        "rng": torch.get_rng_state(),
    }


def save_training_checkpoint(path, model, optimizer, cfg, step):
    payload = checkpoint_payload(model, optimizer, cfg, step)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return payload


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


def train(cfg: TrainConfig, samples, out_dir=None, extractor=None, state=None):
    """Optimise the total loss for ``cfg.max_steps`` steps.

    ``state`` is a checkpoint payload to continue from; without it a fresh
    model is built from ``cfg.seed``.  Checkpoints go to ``out_dir`` every
    ``cfg.checkpoint_every`` steps and at the end.
    """
    if len(samples) < cfg.batch_size:
        raise ValueError(f"dataset has {len(samples)} samples, fewer than batch size {cfg.batch_size}")
    for s in samples:
        if s.J.shape[:2] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"sample size {s.J.shape[:2]} != configured image_size {cfg.image_size}")
    model = build_model(cfg.network, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    step = 0
    if state is not None:
        load_weights(model, state)
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng"])
        step = int(state["step"])
    extractor = extractor if extractor is not None else make_extractor(cfg)
    J_all, I_all, M_all = to_tensors(samples)
    out_dir = Path(out_dir) if out_dir else None
    history = []
    model.train()
    while step < cfg.max_steps:
        idx = batch_indices(len(samples), cfg.batch_size, cfg.seed, step)
        lr = current_lr(cfg, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        coarse, refined = model(J_all[idx])
        loss, breakdown = total_loss(coarse, refined, I_all[idx], M_all[idx], cfg.weights, extractor)
        if not all(math.isfinite(v) for v in breakdown.values()):
            raise NonFiniteLossError(step, breakdown)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        step += 1
        history.append({"step": step, **breakdown})
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, breakdown["total"])
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_checkpoint(out_dir / f"step_{step:06d}.pt", model, optimizer, cfg, step)
    payload = checkpoint_payload(model, optimizer, cfg, step)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(payload, out_dir / "last.pt")
        write_history(history, out_dir / "history.csv")
    model.eval()
    return TrainResult(model, history, step, payload)


def load_training_checkpoint(path, cfg: TrainConfig | None = None):
    """Read a training checkpoint; with ``cfg``, refuse on any differing setting except ``max_steps``."""
    payload = read_checkpoint(path)
    for key in ("train", "optimizer", "step", "rng"):
        if key not in payload:
            raise CheckpointError(f"checkpoint lacks {key!r}; not a training checkpoint")
    if cfg is not None:
        expected = cfg.to_dict()
        found = TrainConfig.from_dict(payload["train"]).to_dict()
        expected.pop("max_steps")
        found.pop("max_steps")
        diff = config_diff(_flatten(expected), _flatten(found))
        if diff:
            raise CheckpointError(f"training config mismatch: {diff}")
    return payload


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def resume(path, samples, cfg: TrainConfig, out_dir=None, extractor=None):
    state = load_training_checkpoint(path, cfg)
    return train(cfg, samples, out_dir=out_dir, extractor=extractor, state=state)


def table_cff(cff):
    return "-" if cff is None else str(cff)


def run_ablation_grid(base: TrainConfig, rows, train_samples, eval_samples=None, out_dir=None):
    """Train and evaluate each ablation grid row with the same seed and data."""
    eval_samples = eval_samples if eval_samples is not None else train_samples
    results = []
    for row in rows:
        if row not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {row}")
        d = base.to_dict()
        d["network"] = row_config(row, base.network).to_dict()
        cfg = TrainConfig.from_dict(d)
        res = train(cfg, train_samples)
        report = evaluate_corpus(res.model, eval_samples)
        n_smr, n_mbe, cff, n_skip = ABLATION_ROWS[row]
        results.append({
            "row": row,
            "n_smr": n_smr,
            "n_mbe": n_mbe,
            "n_cff": table_cff(cff),
            "n_skip_stage": n_skip,
            "params": count_parameters(res.model),
            "report": report,
        })
        log.info("row %d: %s", row, report.summary())
    if out_dir:
        write_ablation_table(results, Path(out_dir))
    return results


ABLATION_COLUMNS = ("row", "n_smr", "n_mbe", "n_cff", "n_skip_stage", "psnr", "ssim", "rmse", "rmsew")


def ablation_rows(results):
    out = []
    for r in results:
        rep = r["report"]
        out.append({
            "row": r["row"], "n_smr": r["n_smr"], "n_mbe": r["n_mbe"], "n_cff": r["n_cff"],
            "n_skip_stage": r["n_skip_stage"], "psnr": rep.psnr, "ssim": rep.ssim,
            "rmse": rep.rmse, "rmsew": rep.rmsew,
        })
    return out


def format_ablation_table(results):
    rows = ablation_rows(results)
    fmt = lambda v: "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
    cells = [list(ABLATION_COLUMNS)] + [[fmt(r[c]) for c in ABLATION_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(ABLATION_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells) + "\n"


def write_ablation_table(results, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(ablation_rows(results))
    (out_dir / "ablation.txt").write_text(format_ablation_table(results))
