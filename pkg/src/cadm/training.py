"""Epsilon-prediction training, checkpointing and finite-difference gradient checks."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .data import encode_label, to_tensors
from .metrics import pooled_metrics
from .predictor import NoisePredictor, PredictorConfig
from .sampler import SamplerConfig, ensemble_infer
from .schedule import NoiseSchedule, q_sample, respace

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_f1", "lr")


@dataclass
class TrainConfig:
    # desk-scale defaults; the full-scale recipe (1e-4, 0.99, batch 32, 200 epochs)
    # is in configs/paper_scale.ini
    learning_rate: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    flip: bool = True
    grad_clip: float = 1.0  # max global grad norm; 0 disables
    val_steps: int = 10
    val_limit: int = 16

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


def diffusion_loss(model, batch, sched: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Uniform-t epsilon MSE; ``batch`` is ``(I_a, I_b, label)`` with {0,1} labels.

    One timestep and one noise draw per example, both from ``generator``.
    """
    I_a, I_b, label = batch
    n = I_a.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    x0 = encode_label(label)
    t = torch.randint(1, sched.T + 1, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    model_t = torch.tensor(sched.timesteps, dtype=torch.long)[t - 1]
    eps_hat = model(x_t, I_a, I_b, model_t)
    return (eps_hat - eps).pow(2).mean()


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Linear decay to zero over ``cfg.epochs`` (0-based ``epoch``)."""
    return cfg.learning_rate * (1.0 - epoch / cfg.epochs)


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def _flip(batch, generator):
    fh, fv = torch.rand(2, generator=generator) < 0.5
    dims = [d for d, f in ((-1, fh), (-2, fv)) if f]
    if not dims:
        return batch
    return tuple(x.flip(dims) for x in batch)


def evaluate_f1(model, pairs, sched: NoiseSchedule, steps: int, seed: int = 0, limit: int | None = None):
    pairs = pairs[:limit] if limit else pairs
    I_a, I_b, lab = to_tensors(pairs, dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    cm = ensemble_infer(I_a, I_b, model, respace(sched, steps), SamplerConfig(steps, 1, 0.5, seed))
    model.train(was_training)
    return pooled_metrics(cm.binary, lab[:, 0].numpy().astype(np.uint8))["f1"]


def save_checkpoint(path, model: NoisePredictor, optimizer, sched: NoiseSchedule, cfg: TrainConfig,
                    epoch: int, generator: torch.Generator, history: list):
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "schedule": sched.to_dict(),
            "predictor_config": model.cfg.to_dict(),
            "image_size": list(model.image_size),
            "train_config": asdict(cfg),
            "epoch": epoch,
            "rng_state": generator.get_state() if generator is not None else None,
            "history": history,
        },
        path,
    )


def load_checkpoint(path):
    """Return ``(model, schedule, checkpoint dict)``; the dict still holds optimizer and RNG state."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    pcfg = PredictorConfig(**ckpt["predictor_config"])
    model = NoisePredictor(pcfg, tuple(ckpt["image_size"]))
    model.load_state_dict(ckpt["model"])
    return model, NoiseSchedule.from_dict(ckpt["schedule"]), ckpt


def write_log_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOG_COLUMNS})


def train(model: NoisePredictor, dataset, cfg: TrainConfig, sched: NoiseSchedule, val_pairs=None,
          out_dir=None, resume=None, max_epochs: int | None = None):
    """Momentum SGD on the epsilon objective.

    ``dataset`` is a list of ``BitemporalPair``. With ``out_dir`` a checkpoint
    ``epoch_XXX.pt`` and ``log.csv`` are written after every epoch. ``resume``
    is a checkpoint dict from ``load_checkpoint`` whose optimizer, RNG and
    epoch counter are restored (the model weights must already be loaded).
    ``max_epochs`` stops early without changing the learning-rate schedule.
    Returns the per-epoch history.
    """
    if not dataset:
        raise ValueError("empty training set")
    dtype = next(model.parameters()).dtype
    I_a, I_b, lab = to_tensors(dataset, dtype=dtype)
    n = I_a.shape[0]
    optimizer = make_optimizer(model, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    history, start = [], 0
    if resume is not None:
        optimizer.load_state_dict(resume["optimizer"])
        generator.set_state(resume["rng_state"])
        history = list(resume["history"])
        start = resume["epoch"]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, start + max_epochs)
    model.train()
    for epoch in range(start, stop):
        lr = lr_at(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=generator)
        losses = []
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[i : i + cfg.batch_size]
            batch = (I_a[idx], I_b[idx], lab[idx])
            if cfg.flip:
                batch = _flip(batch, generator)
            loss = diffusion_loss(model, batch, sched, generator)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch + 1}, batch {b}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            losses.append(loss.item())
        val_f1 = float("nan")
        if val_pairs:
            val_f1 = evaluate_f1(model, val_pairs, sched, min(cfg.val_steps, sched.T), cfg.seed, cfg.val_limit)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_f1": val_f1, "lr": lr}
        history.append(row)
        log.info("epoch %d loss %.5f val_f1 %.4f lr %.3g", epoch + 1, row["train_loss"], val_f1, lr)
        if out_dir is not None:
            save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.pt", model, optimizer, sched, cfg,
                            epoch + 1, generator, history)
            write_log_csv(out_dir / "log.csv", history)
    return history


def _sample_coordinates(model, n_params: int, generator: torch.Generator):
    """``n_params`` (tensor, flat index) pairs spread round-robin over the top-level submodules."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        if p.requires_grad:
            groups.setdefault(name.split(".")[0], []).append(p)
    keys = sorted(groups)
    coords = []
    for i in range(n_params):
        params = groups[keys[i % len(keys)]]
        p = params[int(torch.randint(len(params), (1,), generator=generator))]
        coords.append((p, int(torch.randint(p.numel(), (1,), generator=generator))))
    return coords


def grad_check(model, batch, sched: NoiseSchedule, n_params: int = 50, step: float = 1e-4, seed: int = 0):
    """Max relative error between central differences and autograd over sampled coordinates.

    Run in double precision for meaningful results. The loss draws its t/noise
    from a generator reseeded for every evaluation, so it is a deterministic
    function of the parameters. Parameters are restored exactly afterwards.
    """

    def loss():
        return diffusion_loss(model, batch, sched, torch.Generator().manual_seed(seed))

    model.zero_grad(set_to_none=True)
    loss().backward()
    coords = _sample_coordinates(model, n_params, torch.Generator().manual_seed(seed + 1))
    worst = 0.0
    with torch.no_grad():
        for p, i in coords:
            flat = p.data.view(-1)
            g = 0.0 if p.grad is None else float(p.grad.view(-1)[i])
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss().item()
            flat[i] = orig - step
            down = loss().item()
            flat[i] = orig
            g_fd = (up - down) / (2 * step)
            worst = max(worst, abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-8))
    model.zero_grad(set_to_none=True)
    return worst
