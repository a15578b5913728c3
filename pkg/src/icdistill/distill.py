"""In-context distillation: learn a small context set for a frozen classifier.

The distilled features are optimized directly: the loss is the negative
log-likelihood of real training rows when the classifier is conditioned on the
distilled set, and its gradient with respect to the distilled features comes
from a single forward/backward pass through the frozen model. Labels of the
distilled set stay fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .metrics import MetricError, auc
from .model import PfnModel, argmax_labels, predict_proba, query_logits
from .optim import AdamState, RunLog

logger = logging.getLogger(__name__)


class DistillError(ValueError):
    pass


class NonFiniteDistillError(DistillError, ArithmeticError):
    pass


@dataclass
class IcdConfig:
    m: int = 1000
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 512
    eval_interval: int = 25
    early_stop_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_interval < 1 or self.early_stop_patience < 1:
            raise ValueError("eval_interval and early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistilledSet:
    """Learnable features ``X`` (m x d) with fixed labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    per_class_counts: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not self.per_class_counts:
            self.per_class_counts = np.bincount(self.y, minlength=self.num_classes).tolist()
        if sum(self.per_class_counts) != self.m:
            raise DistillError("per-class counts do not add up to m")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def as_dataset(self) -> Dataset:
        return Dataset(self.X, self.y, self.num_classes)

    def copy(self) -> "DistilledSet":
        return DistilledSet(self.X.copy(), self.y.copy(), self.num_classes, list(self.per_class_counts))


def class_quotas(counts: Sequence[int], m: int) -> np.ndarray:
    """``m // C`` rows per class; the remainder goes one each to the most frequent classes."""
    counts = np.asarray(counts)
    C = counts.size
    quotas = np.full(C, m // C, dtype=np.int64)
    order = sorted(range(C), key=lambda k: (-counts[k], k))
    for k in order[: m % C]:
        quotas[k] += 1
    return quotas


def init_distilled(train: Dataset, m: int, rng: np.random.Generator) -> DistilledSet:
    """Class-balanced distilled set initialized on randomly drawn training rows."""
    C = train.num_classes
    if m < C:
        raise DistillError(f"m={m} is smaller than the number of classes {C}")
    counts = train.class_counts()
    for k in range(C):
        if counts[k] == 0:
            raise DistillError(f"class {k} has no training rows")
    quotas = class_quotas(counts, m)
    rows = []
    for k in range(C):
        members = np.flatnonzero(train.y == k)
        rows.append(rng.choice(members, size=quotas[k], replace=bool(members.size < quotas[k])))
    idx = np.concatenate(rows)
    return DistilledSet(train.X[idx].copy(), train.y[idx].copy(), C, quotas.tolist())


def icd_loss(model: PfnModel, batch: Dataset, dist: DistilledSet, x_dist: Optional[Tensor] = None,
             weights: Optional[dict] = None) -> Tensor:
    """Mean negative log-likelihood of ``batch`` labels given the distilled context.

    ``x_dist`` is the tensor view of ``dist.X`` to differentiate with respect
    to; by default a fresh gradient-requiring view is made. Model weights
    never require gradients here.
    """
    if batch.d != dist.d:
        raise DistillError(f"batch has {batch.d} features, distilled set has {dist.d}")
    if x_dist is None:
        x_dist = Tensor(dist.X, requires_grad=True)
    C = max(dist.num_classes, batch.num_classes)
    try:
        logits = query_logits(model, x_dist, dist.y, Tensor(batch.X), C, weights)
        return ad.cross_entropy(logits, batch.y)
    except ad.NonFiniteError as exc:
        raise NonFiniteDistillError(f"non-finite ICD loss: {exc}{_offending_row(model, batch, dist)}") from exc


def _offending_row(model, batch, dist) -> str:
    try:
        proba = predict_proba(model, dist.as_dataset(), batch.X)
    except ad.NonFiniteError:
        return " (distilled context itself is degenerate)"
    with np.errstate(divide="ignore"):
        nll = -np.log(proba[np.arange(batch.n), batch.y])
    bad = np.flatnonzero(~np.isfinite(nll))
    return f" (first offending batch row {int(bad[0])})" if bad.size else ""


def dataset_nll(model: PfnModel, data: Dataset, dist: DistilledSet) -> float:
    """Mean NLL of every row of ``data`` given the distilled context (no gradients)."""
    proba = predict_proba(model, dist.as_dataset(), data.X)
    p = proba[np.arange(data.n), data.y]
    return float(-np.mean(np.log(p)))


def _val_auc(model: PfnModel, dist: DistilledSet, val: Dataset) -> float:
    try:
        return auc(val.y, predict_proba(model, dist.as_dataset(), val.X))
    except MetricError:
        return math.nan


def distill(
    model: PfnModel,
    train: Dataset,
    val: Dataset,
    cfg: IcdConfig,
    record_steps: Sequence[int] = (),
    on_tape: Optional[Callable[[Tape], None]] = None,
) -> tuple[DistilledSet, RunLog]:
    """Optimize a distilled context for ``train`` and keep the best-validation-AUC iterate.

    Each outer step draws a uniform minibatch from ``train`` (without
    replacement inside the batch), runs one forward and one backward pass and
    applies one Adam update to the distilled features only. Validation AUC is
    measured every ``cfg.eval_interval`` steps and after the last step;
    ``cfg.early_stop_patience`` evaluations without improvement end the run.

    The returned log holds copies of the distilled features at
    ``record_steps`` in ``log.snapshots``.
    """
    if cfg.m > model.config.context_cap:
        raise DistillError(f"m={cfg.m} exceeds the model context_cap={model.config.context_cap}")
    rng = np.random.default_rng(cfg.seed)
    dist = init_distilled(train, cfg.m, rng)
    x_dist = Tensor(dist.X, requires_grad=True, name="X_dist")
    weights = model.tensors(requires_grad=False)
    adam = AdamState(lr=cfg.lr)
    log = RunLog(config=cfg.to_dict(), seed=cfg.seed)
    wanted = set(int(s) for s in record_steps)

    best_auc, best_x, best_step = -math.inf, dist.X.copy(), 0
    stale = 0
    steps_run = 0
    batch_size = min(cfg.batch_size, train.n)
    for t in range(cfg.steps + 1):
        if t in wanted:
            log.snapshots[t] = dist.X.copy()
        val_auc = None
        if t % cfg.eval_interval == 0 or t == cfg.steps:
            val_auc = _val_auc(model, dist, val)
            if val_auc > best_auc:
                best_auc, best_x, best_step, stale = val_auc, dist.X.copy(), t, 0
            else:
                stale += 1
        if t == cfg.steps or stale >= cfg.early_stop_patience:
            extra = {} if val_auc is None else {"val_auc": _json_float(val_auc)}
            log.append(t, None, **extra)
            break
        batch = train.subset(rng.choice(train.n, size=batch_size, replace=False))
        x_dist.grad = None
        with Tape() as tape:
            loss = icd_loss(model, batch, dist, x_dist, weights)
        ad.backward(tape, loss)
        if on_tape is not None:
            on_tape(tape)
        adam.step({"X": dist.X}, {"X": x_dist.grad})
        steps_run = t + 1
        extra = {} if val_auc is None else {"val_auc": _json_float(val_auc)}
        log.append(t, loss.item(), **extra)

    if not math.isfinite(best_auc):
        raise DistillError("no finite validation AUC was obtained")
    log.summary = {"best_step": best_step, "best_val_auc": best_auc, "steps_run": steps_run}
    result = DistilledSet(best_x, dist.y.copy(), dist.num_classes, list(dist.per_class_counts))
    return result, log


def _json_float(v: float):
    return None if not math.isfinite(v) else float(v)


def predict_with_distilled(model: PfnModel, dist: DistilledSet, queries) -> tuple[np.ndarray, np.ndarray]:
    proba = predict_proba(model, dist.as_dataset(), queries)
    return argmax_labels(proba), proba


def random_context_baseline(
    model: PfnModel,
    train: Dataset,
    m: int,
    queries,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict with ``m`` training rows drawn uniformly without replacement as context."""
    if m > train.n:
        raise DistillError(f"m={m} exceeds the {train.n} available training rows")
    if m > model.config.context_cap:
        raise DistillError(f"m={m} exceeds the model context_cap={model.config.context_cap}")
    idx = np.sort(rng.choice(train.n, size=m, replace=False))
    proba = predict_proba(model, train.subset(idx), queries)
    return argmax_labels(proba), proba
