"""Robustness evaluation: clean accuracy and FGSM / PGD-k attack accuracy.

Attacks climb hard-label cross-entropy with signed-gradient steps, projecting
onto the test-radius ball and the valid pixel range after every step. FGSM is
exactly the one-step, no-random-start special case of the same loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Tape, Tensor
from .data import Dataset
from .nn import Network
from .worst_case import project_linf


@dataclass
class AttackConfig:
    kind: str = "pgd"
    eps_test: float = 8.0 / 255.0
    steps: int = 20
    step_size: float = 2.0 / 255.0
    random_start: bool = True
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"attack kind {self.kind!r} not in ('fgsm', 'pgd')")
        if self.eps_test < 0:
            raise ConfigError(f"eps_test must be >= 0, got {self.eps_test}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.kind == "fgsm":
            # by definition: a single full-radius signed step from the input
            self.steps = 1
            self.step_size = self.eps_test
            self.random_start = False

    @property
    def name(self) -> str:
        return "fgsm" if self.kind == "fgsm" else f"pgd{self.steps}"


def _ce_grad_and_loss(net: Network, x: np.ndarray, labels: np.ndarray):
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = ag.cross_entropy(net.forward(xt), labels)
    tape.backward(loss)
    return xt.grad


def _per_example_ce(net: Network, x: np.ndarray, labels: np.ndarray):
    logits = net.forward(x, record_tape=False).data
    ls = ag._log_softmax_nd(logits)
    n = len(labels)
    return -ls[np.arange(n), labels], logits.argmax(axis=1)


def attack(net: Network, x: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Adversarial batch within the eps_test ball; multiple restarts keep, per
    example, the first run that flips the prediction, else the max-loss run."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    eps = np.full(len(x), cfg.eps_test)

    saved = [(p, p.requires_grad) for p in net.params]
    for p, _ in saved:
        p.requires_grad = False
    try:
        best_adv = None
        best_loss = None
        best_flip = None
        for _ in range(cfg.restarts):
            if cfg.random_start and cfg.eps_test > 0:
                cur = np.clip(x + rng.uniform(-cfg.eps_test, cfg.eps_test, size=x.shape), 0.0, 1.0)
            else:
                cur = x.copy()
            for _ in range(cfg.steps):
                g = _ce_grad_and_loss(net, cur, labels)
                cur = project_linf(cur + cfg.step_size * np.sign(g), x, eps)
            loss, pred = _per_example_ce(net, cur, labels)
            flip = pred != labels
            if best_adv is None:
                best_adv, best_loss, best_flip = cur, loss, flip
            else:
                better = (flip & ~best_flip) | ((flip == best_flip) & (loss > best_loss))
                best_adv = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), cur, best_adv)
                best_loss = np.where(better, loss, best_loss)
                best_flip = best_flip | flip
        return best_adv
    finally:
        for p, flag in saved:
            p.requires_grad = flag


@dataclass
class EvalRow:
    name: str
    n: int
    accuracy: float
    mean_loss: float


def accuracy(net: Network, x: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> float:
    correct = 0
    for lo in range(0, len(x), batch_size):
        logits = net.forward(x[lo : lo + batch_size], record_tape=False).data
        correct += int((logits.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
    return correct / max(1, len(x))


def evaluate(
    net: Network,
    ds: Dataset,
    attacks: Sequence[AttackConfig] = (),
    batch_size: int = 256,
    max_examples: Optional[int] = None,
) -> list[EvalRow]:
    """Clean row plus one row per attack; deterministic given attack seeds."""
    n = len(ds) if max_examples is None else min(max_examples, len(ds))
    x, labels = ds.x[:n], ds.labels[:n]
    rows = []
    clean_loss = []
    correct = 0
    for lo in range(0, n, batch_size):
        loss, pred = _per_example_ce(net, x[lo : lo + batch_size], labels[lo : lo + batch_size])
        clean_loss.append(loss)
        correct += int((pred == labels[lo : lo + batch_size]).sum())
    rows.append(EvalRow("clean", n, correct / max(1, n), float(np.concatenate(clean_loss).mean()) if n else 0.0))
    for cfg in attacks:
        correct = 0
        losses = []
        for lo in range(0, n, batch_size):
            xb, yb = x[lo : lo + batch_size], labels[lo : lo + batch_size]
            adv = attack(net, xb, yb, cfg)
            loss, pred = _per_example_ce(net, adv, yb)
            losses.append(loss)
            correct += int((pred == yb).sum())
        rows.append(EvalRow(cfg.name, n, correct / max(1, n), float(np.concatenate(losses).mean()) if n else 0.0))
    return rows
