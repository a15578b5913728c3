"""Meta-training of the in-context classifier on synthetic prior tasks."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .model import PfnModel, query_logits
from .optim import AdamState, RunLog
from .prior import PriorConfig, sample_task

logger = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))


def split_task(task: Dataset, split_ratio: float = 0.7) -> tuple[Dataset, Dataset]:
    """Leading rows form the context, the rest the queries (tasks arrive in random order)."""
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    n_ctx = min(max(int(round(task.n * split_ratio)), 1), task.n - 1)
    idx = np.arange(task.n)
    return task.subset(idx[:n_ctx]), task.subset(idx[n_ctx:])


def meta_loss(model: PfnModel, task: Dataset, weights: dict[str, Tensor], split_ratio: float = 0.7) -> Tensor:
    context, queries = split_task(task, split_ratio)
    logits = query_logits(model, Tensor(context.X), context.y, Tensor(queries.X), task.num_classes, weights)
    return ad.cross_entropy(logits, queries.y)


def meta_train_step(
    model: PfnModel,
    task: Dataset,
    adam: AdamState,
    split_ratio: float = 0.7,
) -> Optional[float]:
    """One Adam update of the model weights on one task; returns the pre-update loss.

    Single-class tasks are skipped (returns ``None``).
    """
    if task.n < 4:
        raise ValueError(f"task needs at least 4 rows, got {task.n}")
    if np.unique(task.y).size < 2:
        logger.warning("skipping single-class task")
        return None
    weights = model.tensors(requires_grad=True)
    with Tape() as tape:
        loss = meta_loss(model, task, weights, split_ratio)
    backward_value = loss.item()
    ad.backward(tape, loss)
    adam.step(model.weights, {k: t.grad for k, t in weights.items()})
    return backward_value


def meta_train(
    model: PfnModel,
    prior: PriorConfig,
    steps: int,
    adam_lr: float = 3e-4,
    split_ratio: float = 0.7,
    window: int = 500,
    out_dir: Optional[Path] = None,
    log_every: int = 1000,
) -> tuple[PfnModel, RunLog]:
    """Train ``model`` in place on ``steps`` freshly sampled prior tasks.

    The best weights by trailing ``window``-step mean loss are written to
    ``out_dir/best.json`` alongside ``final.json`` and ``meta_log.jsonl``
    when ``out_dir`` is given.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(prior.seed)
    adam = AdamState(lr=adam_lr)
    log = RunLog(
        config={"prior": prior.to_dict(), "steps": steps, "adam_lr": adam_lr, "split_ratio": split_ratio},
        seed=prior.seed,
    )
    best_avg, best_weights, best_step = math.inf, None, None
    recent: list[float] = []
    for step in range(steps):
        task = sample_task(prior, rng)
        try:
            loss = meta_train_step(model, task, adam, split_ratio)
        except ad.NonFiniteError as exc:
            raise NonFiniteLossError(step, str(exc)) from exc
        if loss is None:
            continue
        if not math.isfinite(loss):
            raise NonFiniteLossError(step)
        log.append(step, loss, num_classes=task.num_classes)
        recent.append(loss)
        if len(recent) > window:
            recent.pop(0)
        if len(recent) == window and (step + 1) % window == 0:
            avg = float(np.mean(recent))
            if avg < best_avg:
                best_avg, best_step = avg, step
                best_weights = {k: v.copy() for k, v in model.weights.items()}
        if log_every and (step + 1) % log_every == 0:
            logger.info("meta step %d  mean loss %.4f", step + 1, float(np.mean(recent)))

    log.summary = {"best_step": best_step, "best_window_loss": None if best_step is None else best_avg}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(out_dir / "final.json")
        best = PfnModel(model.config, best_weights) if best_weights is not None else model
        best.save(out_dir / "best.json")
        log.write_jsonl(out_dir / "meta_log.jsonl")
    return model, log


def evaluate_on_prior(
    model: PfnModel,
    prior: PriorConfig,
    num_tasks: int,
    seed: int,
    split_ratio: float = 0.7,
) -> dict:
    """Mean query accuracy and loss on fresh tasks, with the uniform-guess baseline."""
    from .model import argmax_labels

    rng = np.random.default_rng(seed)
    accs, losses, chance = [], [], []
    for _ in range(num_tasks):
        task = sample_task(prior, rng)
        context, queries = split_task(task, split_ratio)
        logits = query_logits(model, Tensor(context.X), context.y, Tensor(queries.X), task.num_classes)
        losses.append(ad.cross_entropy(logits, queries.y).item())
        accs.append(float(np.mean(argmax_labels(logits.values) == queries.y)))
        chance.append(1.0 / task.num_classes)
    return {"accuracy": float(np.mean(accs)), "loss": float(np.mean(losses)), "chance": float(np.mean(chance))}
