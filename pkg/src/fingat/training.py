"""Multi-task objective, Adam, and the epoch loop.

The training objective for one batch of prediction days is

    (1 - delta) * rank + delta * move + lam * ||theta||^2

where ``rank`` sums a pairwise hinge over every ordered pair of stocks on the
same day, ``move`` is binary cross-entropy summed over stock-days and the L2
term covers weight matrices and attention vectors (not biases). Sums are not
averaged, so the scale of the loss grows with the number of stocks and days.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .checkpoint import save_checkpoint
from .evaluation import chunk_days, evaluate_predictions, predict_days
from .market import DatasetSplit, SectorCatalog
from .model import FinGAT, ModelConfig

logger = logging.getLogger(__name__)

LEARNING_RATES = (0.0005, 0.001, 0.005)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128          # prediction days per optimiser step
    delta: float = 0.01
    l2: float = 0.0001
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    k_list: list = field(default_factory=lambda: [5, 10, 20])
    select_k: int = 5
    max_rows: int = 4096           # stacked stock rows per tape
    checkpoint_every: int = 1      # 0 disables per-epoch checkpoints

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be non-negative, got {self.l2}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# --- losses ---------------------------------------------------------------

def _pairs(day_of_row: np.ndarray):
    """All ordered (q, k), q != k, with both rows on the same day."""
    q, k = [], []
    for day in np.unique(day_of_row):
        rows = np.flatnonzero(day_of_row == day)
        a, b = np.meshgrid(rows, rows, indexing="ij")
        keep = a != b
        q.append(a[keep])
        k.append(b[keep])
    return np.concatenate(q), np.concatenate(k)


def rank_loss(pred, true, day_of_row: Optional[np.ndarray] = None) -> Tensor:
    """Pairwise hinge ``sum max(0, -(p_q - p_k)(y_q - y_k))`` over ordered pairs.

    Without ``day_of_row`` all entries form one cross-section.
    """
    pred = ad.as_tensor(pred)
    true = np.asarray(true, dtype=np.float64).reshape(-1)
    if pred.shape != true.shape:
        raise ad.ShapeError(f"rank_loss length mismatch: {pred.shape} vs {true.shape}")
    if day_of_row is None:
        day_of_row = np.zeros(len(true), dtype=np.intp)
    q, k = _pairs(np.asarray(day_of_row))
    if len(q) == 0:
        return ad.tsum(pred * 0.0)
    diff = ad.take_rows(pred, q) - ad.take_rows(pred, k)
    return ad.tsum(ad.relu(diff * -(true[q] - true[k])))


def move_loss(prob, labels) -> Tensor:
    """Summed binary cross-entropy on probabilities in the open interval (0, 1)."""
    prob = ad.as_tensor(prob)
    y = np.asarray(labels, dtype=np.float64).reshape(prob.shape)
    if np.any(prob.data <= 0) or np.any(prob.data >= 1):
        raise ad.DomainError("movement probabilities must lie strictly inside (0, 1)")
    return -ad.tsum(y * ad.log(prob) + (1.0 - y) * ad.log(1.0 - prob))


def move_loss_from_logits(logit, labels) -> Tensor:
    """Same value as ``move_loss(sigmoid(logit), labels)``, computed stably."""
    logit = ad.as_tensor(logit)
    y = np.asarray(labels, dtype=np.float64).reshape(logit.shape)
    return ad.tsum(ad.softplus(logit) - logit * y)


def mse_loss(pred, true) -> Tensor:
    pred = ad.as_tensor(pred)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ad.ShapeError(f"mse_loss length mismatch: {pred.shape} vs {true.shape}")
    return ad.tsum(ad.square(pred - true))


def total_loss(rank, move, l2_sum_of_squares, delta: float, lam: float):
    return (1.0 - delta) * rank + delta * move + lam * l2_sum_of_squares


# --- optimiser ------------------------------------------------------------

def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], m: Sequence[np.ndarray],
              v: Sequence[np.ndarray], step_count: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; ``step_count`` starts at 1."""
    bc1 = 1.0 - beta1 ** step_count
    bc2 = 1.0 - beta2 ** step_count
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


class Adam:
    def __init__(self, named_params: Sequence[tuple], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for _, t in self.named]
        self.v = [np.zeros_like(t.data) for _, t in self.named]
        self.t = 0

    def step(self) -> None:
        for name, t in self.named:
            if t.grad is None:
                raise TrainingError(f"parameter {name} has no gradient")
        self.t += 1
        adam_step([t.data for _, t in self.named], [t.grad for _, t in self.named],
                  self.m, self.v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for _, t in self.named:
            t.grad = None


# --- loop -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    rank: float
    move: float
    l2: float
    total: float
    delta: float
    lam: float
    validation: dict


@dataclass
class TrainReport:
    variant: str
    seed: int
    objective: str
    loss_reduction: str
    epochs: list
    best_epoch: int
    best_metric: float
    select_metric: str
    best_checkpoint: Optional[str]
    stopped_early: bool
    wall_clock_s: float

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    def losses(self) -> list:
        return [e.total for e in self.epochs]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def objective_terms(model: FinGAT, out, instances, delta: float):
    """Return ``(weighted_task_loss, rank, move)`` tensors for stacked days."""
    v = model.config.variant
    true = np.concatenate([i.target_return for i in instances])
    moves = np.concatenate([i.target_move for i in instances])
    rank = rank_loss(out.pred_return, true, out.layout.day_of_row)
    if v == "no_mtl":
        return rank, rank, None
    if v == "mse":
        move = mse_loss(out.aux_return, true)
    else:
        move = move_loss_from_logits(out.move_logit, moves)
    return (1.0 - delta) * rank + delta * move, rank, move


def effective_delta(model_config: ModelConfig, delta: float) -> float:
    return 0.0 if model_config.variant == "no_mtl" else delta


def train(split: DatasetSplit, catalog: Optional[SectorCatalog], model_config: ModelConfig,
          train_config: TrainConfig, run_dir=None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          model: Optional[FinGAT] = None) -> tuple:
    """Fit a model; returns ``(model, report)`` with the best-validation weights loaded.

    Days are shuffled each epoch with a seeded generator, grouped into
    batches of ``batch_size`` days, and each batch is one Adam step. The
    model whose validation MRR@``select_k`` is highest is kept; training
    stops after ``patience`` epochs without improvement.
    """
    if not split.train or not split.validation:
        raise TrainingError("training and validation splits must be non-empty")
    start = time.perf_counter()
    cfg = train_config
    model = model or FinGAT(model_config)
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    delta = effective_delta(model_config, cfg.delta)
    rng = np.random.default_rng(cfg.seed)
    select_k = min(cfg.select_k, min(i.n_stocks for i in split.validation))
    k_list = [k for k in cfg.k_list if k <= min(i.n_stocks for i in split.validation)]
    if select_k not in k_list:
        k_list = sorted(set(k_list) | {select_k})
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    meta = {"model": model_config.to_dict(), "train": cfg.to_dict(),
            "norm_mean": split.mean.tolist(), "norm_std": split.std.tolist(),
            "feature_names": list(split.feature_names)}

    records = []
    best = (-np.inf, 0)
    best_state = model.state_dict()
    best_path = None
    stale = 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(split.train))
        sums = np.zeros(4)  # rank, move, l2, total
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [split.train[i] for i in order[b0:b0 + cfg.batch_size]]
            try:
                sums += _batch_step(model, opt, batch, catalog, delta, cfg)
            except ad.NumericError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from exc
            if not np.isfinite(sums).all():
                raise TrainingError(f"epoch {epoch}, batch {b0 // cfg.batch_size}: loss diverged")

        val = evaluate_predictions(predict_days(model, split.validation, catalog), k_list)
        val_json = val.to_json()
        val_json.pop("seeds")
        rec = EpochRecord(epoch, float(sums[0]), float(sums[1]), float(sums[2]), float(sums[3]),
                          delta, cfg.l2, val_json)
        records.append(rec)
        logger.info("epoch %d total %.6g rank %.6g move %.6g val MRR@%d %.4f", epoch, rec.total,
                    rec.rank, rec.move, select_k, val.mrr[select_k])
        if on_epoch is not None:
            on_epoch(rec)
        if run_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(run_dir / f"epoch_{epoch}.ckpt", model.state_dict(), {**meta, "epoch": epoch})
        if val.mrr[select_k] > best[0]:
            best = (val.mrr[select_k], epoch)
            best_state = model.state_dict()
            stale = 0
            if run_dir is not None:
                best_path = run_dir / "best.ckpt"
                save_checkpoint(best_path, best_state, {**meta, "epoch": epoch})
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped_early = epoch < cfg.max_epochs
                break

    model.load_state_dict(best_state)
    objective = {"no_mtl": "rank", "mse": "rank+mse"}.get(model_config.variant, "rank+bce")
    report = TrainReport(model_config.variant, cfg.seed, objective, "sum", records, best[1],
                         float(best[0]), f"mrr@{select_k}", str(best_path) if best_path else None,
                         stopped_early, time.perf_counter() - start)
    if run_dir is not None:
        report.save(run_dir / "report.json")
    return model, report


def _batch_step(model: FinGAT, opt: Adam, batch, catalog, delta: float, cfg: TrainConfig) -> np.ndarray:
    opt.zero_grad()
    rank_sum = move_sum = task_sum = 0.0
    for group in chunk_days(batch, cfg.max_rows):
        with GradTape() as tape:
            out = model.forward_days(group, catalog)
            task, rank, move = objective_terms(model, out, group, delta)
        tape.backward(task)
        rank_sum += rank.item()
        move_sum += move.item() if move is not None else 0.0
        task_sum += task.item()
    with GradTape() as tape:
        l2 = model.l2_penalty()
        reg = l2 * cfg.l2
    tape.backward(reg)
    # biases sit outside the L2 term but still need a (zero) buffer
    for _, t in opt.named:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    total = task_sum + reg.item()
    opt.step()
    return np.array([rank_sum, move_sum, l2.item(), total])
