"""Dice-loss training with early stopping, and the five-fold cross-validation driver."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import FoldPlan, Sample
from .model import ARCHITECTURE_OF, Checkpoint, ModelSpec, SalientUNet, build_model
from .saliency_filter import ConfidenceParams, reduce_to_top_contour

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    patience: int = 20
    max_epochs: int = 500
    loss_smoothing: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.loss_smoothing >= 0:
            raise ValueError(f"loss_smoothing must be >= 0, got {self.loss_smoothing}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    fold: int
    variant: str
    epochs_run: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    history: list[tuple[float, float]] = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [list(h) for h in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecord":
        d = dict(d)
        d["history"] = [tuple(h) for h in d["history"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def dice_loss(pred: torch.Tensor, truth: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice loss averaged over the batch; the first axis indexes images."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != truth shape {tuple(truth.shape)}")
    if pred.dim() < 2:
        raise ValueError("expected a batch of maps with a leading batch axis")
    dims = tuple(range(1, pred.dim()))
    truth = truth.to(pred.dtype)
    inter = (pred * truth).sum(dims)
    denom = pred.sum(dims) + truth.sum(dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


class EarlyStopping:
    """Stop once the monitored loss has gone ``patience`` epochs without a strict decrease."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def step(self, loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.best_epoch == self.epoch


def epochs_until_stop(val_losses: Sequence[float], patience: int, max_epochs: int) -> int:
    """Number of epochs an injected validation-loss sequence lets training run."""
    stopper = EarlyStopping(patience)
    for epoch, loss in enumerate(val_losses[:max_epochs]):
        if stopper.step(loss):
            return epoch + 1
    return min(len(val_losses), max_epochs)


def prepare_saliency(samples: Sequence[Sample], variant: str, params: ConfidenceParams = ConfidenceParams()):
    """Return samples as the given variant sees them.

    ``unet-sa-c`` gets single-contour saliency maps; the input samples are not modified.
    """
    if variant not in ARCHITECTURE_OF:
        raise ValueError(f"unknown variant {variant!r}")
    if variant != "unet-sa-c":
        return list(samples)
    return [s.replace(saliency=reduce_to_top_contour(s.saliency, params)) for s in samples]


def to_tensors(samples: Sequence[Sample], dtype=torch.float32):
    image = torch.from_numpy(np.stack([s.image for s in samples])[:, None]).to(dtype)
    mask = torch.from_numpy(np.stack([s.mask for s in samples])[:, None]).to(dtype)
    saliency = torch.from_numpy(np.stack([s.saliency for s in samples])[:, None]).to(dtype)
    return image, mask, saliency


@torch.no_grad()
def predict(model: SalientUNet, images: torch.Tensor, saliency: torch.Tensor | None, batch_size: int = 8) -> torch.Tensor:
    model.eval()
    use_sal = model.spec.uses_saliency
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(images[i:i + batch_size], saliency[i:i + batch_size] if use_sal else None))
    return torch.cat(out)


@torch.no_grad()
def evaluate_loss(model: SalientUNet, images, masks, saliency, eps: float, batch_size: int = 8) -> float:
    probs = predict(model, images, saliency, batch_size)
    return float(dice_loss(probs, masks, eps))


def train_one_fold(
    spec: ModelSpec,
    cfg: TrainConfig,
    train: Sequence[Sample],
    val: Sequence[Sample],
    *,
    fold: int = 1,
    variant: str | None = None,
    val_loss_hook: Callable[[int, SalientUNet], float] | None = None,
    dtype=torch.float32,
) -> tuple[Checkpoint, TrainRecord]:
    """Train with Adam until validation loss stalls for ``cfg.patience`` epochs.

    Returns the checkpoint from the best validation epoch. ``val_loss_hook``
    replaces the validation pass (used to inject loss traces in tests).
    Saliency maps are used exactly as given; SA-C reduction is the caller's job.
    """
    if not train or not val:
        raise ValueError(f"fold {fold}: empty train ({len(train)}) or validation ({len(val)}) split")
    overlap = {s.id for s in train} & {s.id for s in val}
    if overlap:
        raise ValueError(f"fold {fold}: train and validation share ids {sorted(overlap)[:5]}")
    variant = variant or spec.variant.value
    model = build_model(spec).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    x_tr, y_tr, s_tr = to_tensors(train, dtype)
    x_va, y_va, s_va = to_tensors(val, dtype)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + fold)
    use_sal = spec.uses_saliency

    record = TrainRecord(fold=fold, variant=variant)
    stopper = EarlyStopping(cfg.patience)
    best_state = None
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        model.train()
        order = torch.randperm(len(x_tr), generator=gen)
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            pred = model(x_tr[idx], s_tr[idx] if use_sal else None)
            loss = dice_loss(pred, y_tr[idx], cfg.loss_smoothing)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"fold {fold}, epoch {epoch + 1}: non-finite training loss {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        train_loss = total / seen
        if val_loss_hook is not None:
            val_loss = float(val_loss_hook(epoch, model))
        else:
            val_loss = evaluate_loss(model, x_va, y_va, s_va, cfg.loss_smoothing)
        if not math.isfinite(val_loss):
            raise TrainingAborted(f"fold {fold}, epoch {epoch + 1}: non-finite validation loss {val_loss}")
        record.history.append((train_loss, val_loss))
        stop = stopper.step(val_loss)
        if stopper.improved_last:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.info("%s fold %d epoch %d: train %.4f val %.4f", variant, fold, epoch + 1, train_loss, val_loss)
        if stop:
            break

    record.epochs_run = len(record.history)
    record.best_val_loss = stopper.best
    record.best_epoch = stopper.best_epoch + 1
    record.wall_time_s = time.perf_counter() - start
    meta = {"fold": fold, "variant": variant, "best_epoch": record.best_epoch,
            "best_val_loss": record.best_val_loss, "train_config": cfg.to_dict()}
    return Checkpoint(spec, best_state, meta), record


def fold_dir(out_dir: str | Path, variant: str, fold: int) -> Path:
    return Path(out_dir) / variant / f"fold{fold}"


def run_cross_validation(
    spec: ModelSpec,
    cfg: TrainConfig,
    plan: FoldPlan,
    samples: Sequence[Sample],
    *,
    variant: str | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    folds: Sequence[int] | None = None,
    filter_params: ConfidenceParams = ConfidenceParams(),
) -> list[tuple[Checkpoint, TrainRecord]]:
    """Train one model per fold; test ids never reach training or validation.

    With ``out_dir`` each fold writes ``<out>/<variant>/fold<k>/best.ckpt`` and
    ``record.json``; ``resume`` reuses folds whose files already exist.
    """
    variant = variant or spec.variant.value
    if ARCHITECTURE_OF[variant] is not spec.variant:
        raise ValueError(f"variant {variant!r} needs architecture {ARCHITECTURE_OF[variant].value}")
    by_id = {s.id: s for s in samples}
    plan_ids, sample_ids = set(plan.ids), set(by_id)
    if plan_ids != sample_ids:
        missing = sorted(plan_ids - sample_ids)[:5]
        extra = sorted(sample_ids - plan_ids)[:5]
        raise ValueError(f"fold plan and samples disagree: missing {missing}, unplanned {extra}")
    prepared = {s.id: s for s in prepare_saliency(samples, variant, filter_params)}

    results = []
    for fold in folds or range(1, plan.n_folds + 1):
        ckpt_path = rec_path = None
        if out_dir is not None:
            d = fold_dir(out_dir, variant, fold)
            ckpt_path, rec_path = d / "best.ckpt", d / "record.json"
            if resume and ckpt_path.exists() and rec_path.exists():
                log.info("%s fold %d: reusing %s", variant, fold, ckpt_path)
                results.append((Checkpoint.load(ckpt_path), TrainRecord.load(rec_path)))
                continue
        train_ids, val_ids, test_ids = plan.split(fold)
        assert not set(test_ids) & (set(train_ids) | set(val_ids))
        try:
            ckpt, record = train_one_fold(
                spec, cfg,
                [prepared[i] for i in train_ids],
                [prepared[i] for i in val_ids],
                fold=fold, variant=variant,
            )
        except TrainingAborted as exc:
            raise TrainingAborted(f"{variant}: {exc}") from exc
        if out_dir is not None:
            ckpt.save(ckpt_path)
            record.save(rec_path)
        results.append((ckpt, record))
    return results
