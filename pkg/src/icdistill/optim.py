"""Adam optimizer over named numpy arrays, plus the run log shared by training loops."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place. Parameters without a gradient are skipped."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr == 0.0:
                continue
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class RunLog:
    """Ordered per-step records with a config snapshot and seed."""

    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    # in-memory only; never written to JSONL
    snapshots: dict = field(default_factory=dict)

    def append(self, step: int, loss: Optional[float], **extra) -> dict:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError(f"step {step} does not increase on {self.records[-1]['step']}")
        rec = {"step": int(step), "loss": None if loss is None else float(loss)}
        rec.update(extra)
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records if r["loss"] is not None], dtype=float)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read_jsonl(cls, path) -> "RunLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                log.append(rec.pop("step"), rec.pop("loss"), **rec)
        return log
