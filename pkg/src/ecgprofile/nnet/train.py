"""Training loop, fine-tuning and evaluation helpers."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .model import ModelConfig, ModelParams, init_head, init_params, model_forward, wrap
from .optim import EarlyStopping, TrainingError, adamw_step, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 64
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.epochs, self.batch_size, self.patience) <= 0 or self.weight_decay < 0:
            raise ValueError("training hyper-parameters must be positive")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed epochs")

    def to_dict(self):
        return asdict(self)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped: str = "completed"

    @property
    def val_losses(self) -> list[float]:
        return [r["val_loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss,lr\n")
            for r in self.rows:
                fh.write(f"{r['epoch']},{r['train_loss']:.9g},{r['val_loss']:.9g},{r['lr']:.9g}\n")


def batch_loss_and_grads(mp: ModelParams, x: np.ndarray, y: np.ndarray):
    t = wrap(mp.params, requires_grad=True)
    loss = E.bce_with_logits(model_forward(x, mp, training=True, tensors=t), y)
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in t.items()}
    return float(loss.data), grads


def evaluate_loss(mp: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    total, n = 0.0, 0
    dtype = mp.params["stem.w"].dtype
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size].astype(dtype, copy=False)
        loss = E.bce_with_logits(model_forward(xb, mp, training=False), y[i:i + batch_size])
        total += float(loss.data) * y[i:i + batch_size].size
        n += y[i:i + batch_size].size
    return total / n


def train(train_set, val_set, model_cfg: ModelConfig | None = None,
          train_cfg: TrainConfig | None = None, init: ModelParams | None = None,
          on_epoch=None) -> tuple[ModelParams, History]:
    """Mini-batch AdamW with a per-step cosine schedule and early stopping.

    ``train_set``/``val_set`` are ``(x, y)`` with x (N, leads, L) and y (N, K).
    Starts from ``init`` when given (fine-tuning), else from a fresh
    initialisation of ``model_cfg``. Returns the parameters of the epoch with
    the lowest validation loss. ``on_epoch(epoch, mp, row)`` is called after
    every epoch.
    """
    train_cfg = train_cfg or TrainConfig()
    xtr, ytr = train_set
    xva, yva = val_set
    if len(xtr) == 0 or len(xva) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if init is None:
        model_cfg = model_cfg or ModelConfig(n_leads=xtr.shape[1], head_dim=ytr.shape[1])
        mp = init_params(model_cfg, seed=train_cfg.seed)
    else:
        mp = init.copy()
    if ytr.shape[1] != mp.config.head_dim or yva.shape[1] != mp.config.head_dim:
        raise ValueError(f"label width {ytr.shape[1]} does not match head_dim {mp.config.head_dim}")

    dtype = mp.params["stem.w"].dtype
    rng = np.random.default_rng(train_cfg.seed)
    steps_per_epoch = math.ceil(len(xtr) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    stopper = EarlyStopping(train_cfg.patience)
    history = History()
    best = mp.copy()
    global_step = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(xtr))
        losses, lr = [], train_cfg.lr0
        for s in range(steps_per_epoch):
            idx = np.sort(order[s * train_cfg.batch_size:(s + 1) * train_cfg.batch_size])
            xb = xtr[idx].astype(dtype, copy=False)
            lr = cosine_lr(global_step, total_steps, train_cfg.lr0)
            loss, grads = batch_loss_and_grads(mp, xb, ytr[idx])
            if not math.isfinite(loss):
                history.stopped = f"diverged at epoch {epoch}"
                log.warning("non-finite training loss at epoch %d; keeping epoch %d",
                            epoch, history.best_epoch)
                return best, history
            mp.step += 1
            try:
                adamw_step(mp.params, grads, mp.opt_state, mp.step, lr, train_cfg.weight_decay)
            except TrainingError as exc:
                history.stopped = f"diverged at epoch {epoch}: {exc}"
                log.warning("%s", history.stopped)
                return best, history
            losses.append(loss)
            global_step += 1
        val = evaluate_loss(mp, xva, yva)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": lr}
        history.rows.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_loss"], val)
        if not math.isfinite(val):
            history.stopped = f"diverged at epoch {epoch}"
            return best, history
        stop = stopper.update(epoch, val)
        if stopper.improved_last:
            best = mp.copy()
            history.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, mp, row)
        if stop:
            history.stopped = f"early stop after epoch {epoch}"
            break
    return best, history


def finetune(pretrained: ModelParams, new_head_dim: int, seed: int = 0,
             config: ModelConfig | None = None) -> ModelParams:
    """Copy the backbone, attach a fresh linear head, reset optimizer state."""
    cfg = ModelConfig.from_dict(pretrained.config.to_dict()) if config is None else \
        ModelConfig.from_dict(config.to_dict())
    cfg.head_dim = new_head_dim
    template = init_params(cfg, seed=seed)
    for name in template.backbone_names():
        src = pretrained.params.get(name)
        if src is None or src.shape != template.params[name].shape:
            got = None if src is None else src.shape
            raise ValueError(f"backbone mismatch at {name}: expected {template.params[name].shape}, got {got}")
    dtype = pretrained.params["stem.w"].dtype
    params = {k: pretrained.params[k].copy() for k in template.backbone_names()}
    params.update(init_head(np.random.default_rng(seed), cfg, new_head_dim, dtype))
    buffers = {k: v.copy() for k, v in pretrained.buffers.items()}
    return ModelParams(cfg, params, buffers)
