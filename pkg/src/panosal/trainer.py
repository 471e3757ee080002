"""Training loop: Adam with a step-decayed learning rate, checkpoints, CSV log.

All randomness is derived statelessly from (seed, step), so resuming from a
checkpoint needs only the step counter and reproduces the uninterrupted loss
sequence bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AugmentConfig, Sample, augment
from .metrics import bce_grad_wrt_logits, total_loss
from .model import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .nn import Ctx


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(
            f"non-finite loss at step {step}: {term} = {value!r}"
        )
        self.step = step
        self.term = term
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    total_steps: int = 70_000
    base_lr: float = 1e-4
    decay_steps: tuple[int, ...] = (45_000, 60_000)
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 100
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        steps = self.decay_steps
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("decay_steps must be strictly increasing")
        if steps and steps[-1] >= self.total_steps:
            raise ValueError("decay_steps must be < total_steps")


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """base_lr * decay_factor^(number of decay boundaries <= step)."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    n_decays = sum(1 for d in cfg.decay_steps if d <= step)
    return cfg.base_lr * cfg.decay_factor ** n_decays


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
                v: np.ndarray, lr: float, t: int, cfg: TrainConfig):
    """One bias-corrected Adam step, in place; t is 1-based."""
    if param.shape != grad.shape:
        raise ValueError(f"shape mismatch: {param.shape} vs {grad.shape}")
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return param, m, v


@dataclass
class TrainState:
    step: int
    model: Model
    moments: dict[str, dict[str, np.ndarray]]
    loss_history: list[tuple[int, float, float, float, float]] = field(
        default_factory=list
    )


def _init_moments(model: Model) -> dict[str, dict[str, np.ndarray]]:
    m = {}
    v = {}
    for name, p in model.named_parameters():
        if p.trainable:
            m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
    return {"m": m, "v": v}


def _step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def _make_batch(samples: Sequence[Sample], train_cfg: TrainConfig,
                aug_cfg: AugmentConfig, step: int):
    rng = _step_rng(train_cfg.seed, step, 0)
    n = len(samples)
    replace = train_cfg.batch_size > n
    idx = rng.choice(n, size=train_cfg.batch_size, replace=replace)
    imgs, masks, edges = [], [], []
    for slot, i in enumerate(idx):
        s = augment(samples[int(i)], aug_cfg,
                    _step_rng(train_cfg.seed, step, 16 + slot))
        imgs.append(s.image)
        masks.append(s.mask)
        edges.append(s.edge)
    return np.stack(imgs), np.stack(masks), np.stack(edges)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          samples: Sequence[Sample], aug_cfg: Optional[AugmentConfig] = None,
          out_dir=None, resume_from=None, progress: bool = False) -> TrainState:
    """Optimize the model on ``samples``; returns the final TrainState.

    With ``out_dir`` set, writes ``loss.csv`` plus step-tagged checkpoints and
    ``final.ckpt``. ``resume_from`` restores params, Adam moments and the step
    counter from a checkpoint and continues the identical run.
    """
    if len(samples) == 0:
        raise ValueError("training needs a non-empty dataset")
    if aug_cfg is None:
        aug_cfg = AugmentConfig(crop_to=(model_cfg.height, model_cfg.width))
    if aug_cfg.crop_to != (model_cfg.height, model_cfg.width):
        raise ValueError(
            f"augment crop {aug_cfg.crop_to} must equal model input "
            f"{(model_cfg.height, model_cfg.width)}"
        )

    if resume_from is not None:
        model, header, groups = load_checkpoint(resume_from)
        if ModelConfig.from_dict(header["config"]) != model_cfg:
            raise ValueError("checkpoint model config differs from requested config")
        start_step = int(header["step"])
        moments = {"m": groups["adam_m"], "v": groups["adam_v"]}
    else:
        model = build_model(model_cfg, train_cfg.seed)
        start_step = 0
        moments = _init_moments(model)

    out_path = Path(out_dir) if out_dir is not None else None
    csv_file = None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_path = out_path / "loss.csv"
        fresh = resume_from is None or not log_path.exists()
        csv_file = open(log_path, "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(["step", "loss_sal", "loss_edge", "loss_total", "lr"])

    trainable = {n: p for n, p in model.named_parameters() if p.trainable}
    state = TrainState(start_step, model, moments)
    try:
        for step in range(start_step, train_cfg.total_steps):
            imgs, g_sal, g_edge = _make_batch(samples, train_cfg, aug_cfg, step)
            ctx = Ctx(train=True, rng=_step_rng(train_cfg.seed, step, 1))
            out = model.forward(imgs.astype(model_cfg.np_dtype), ctx)
            report = total_loss(out.saliency, out.edge, g_sal, g_edge)
            for term, value in (("loss_sal", report.loss_sal),
                                ("loss_edge", report.loss_edge)):
                if not np.isfinite(value):
                    raise NonFiniteLossError(step, term, value)

            model.zero_grad()
            model.backward(
                bce_grad_wrt_logits(out.saliency_logits, g_sal),
                bce_grad_wrt_logits(out.edge_logits, g_edge),
            )
            if train_cfg.grad_clip > 0:
                total_sq = sum(
                    float((p.grad.astype(np.float64) ** 2).sum())
                    for p in trainable.values()
                )
                norm = np.sqrt(total_sq)
                if norm > train_cfg.grad_clip:
                    scale = train_cfg.grad_clip / norm
                    for p in trainable.values():
                        p.grad *= scale

            lr = lr_at_step(step, train_cfg)
            for name, p in trainable.items():
                adam_update(p.data, p.grad, moments["m"][name],
                            moments["v"][name], lr, step + 1, train_cfg)

            state.step = step + 1
            row = (step, report.loss_sal, report.loss_edge,
                   report.loss_total, lr)
            state.loss_history.append(row)
            done = step + 1 == train_cfg.total_steps
            if writer and (step % train_cfg.log_every == 0 or done):
                writer.writerow([f"{x:.10g}" if isinstance(x, float) else x
                                 for x in row])
            if progress and (step % train_cfg.log_every == 0 or done):
                print(f"step {step}: total {report.loss_total:.4f} lr {lr:g}")
            if out_path and (
                (step + 1) % train_cfg.checkpoint_every == 0 or done
            ):
                name = "final.ckpt" if done else f"step{step + 1:07d}.ckpt"
                save_checkpoint(out_path / name, model, step=step + 1,
                                moments=moments)
    finally:
        if csv_file:
            csv_file.close()
    return state
