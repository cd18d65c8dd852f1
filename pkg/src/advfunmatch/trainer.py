"""Outer minimization: distillation and adversarial-training loops.

Methods: ``funmatch`` (match the teacher on clean inputs), ``advfunmatch``
(convex combination of clean and worst-case matching), and the hard-label
baselines ``pgd_at`` / ``pgd_at_ls``. The teacher is frozen throughout; only
student parameters receive gradients. Fresh worst-case inputs are generated
under the current student every batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import attacks as atk
from . import augment as aug
from . import autograd as ag
from . import worst_case as wc
from .autograd import ConfigError, Tape, Tensor
from .data import Dataset
from .nn import Network

METHODS = ("funmatch", "advfunmatch", "pgd_at", "pgd_at_ls")


@dataclass
class OptimConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 2e-4


@dataclass
class ScheduleConfig:
    warmup_epochs: int = 5
    total_epochs: int = 60
    batch_size: int = 128


@dataclass
class TrainConfig:
    method: str = "advfunmatch"
    lam: float = 0.9
    temperature: float = 1.0
    ls_alpha: float = 0.5
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    worst_case: Optional[wc.WorstCaseSpec] = field(default_factory=wc.WorstCaseSpec)
    augmentation: aug.AugPolicy = field(default_factory=lambda: aug.AugPolicy(kind="none"))
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method {self.method!r} not in {METHODS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.ls_alpha < 1.0:
            raise ConfigError(f"ls_alpha must be in [0, 1), got {self.ls_alpha}")
        if self.schedule.warmup_epochs >= self.schedule.total_epochs:
            raise ConfigError(
                f"warmup_epochs {self.schedule.warmup_epochs} must be < "
                f"total_epochs {self.schedule.total_epochs}"
            )

    @property
    def needs_worst_case(self) -> bool:
        if self.method in ("pgd_at", "pgd_at_ls"):
            return True
        return self.method == "advfunmatch" and self.lam > 0.0


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    robust_acc: dict = field(default_factory=dict)
    mean_kl_clean: float = float("nan")
    mean_kl_worst: float = float("nan")
    lr: float = 0.0
    wallclock_ms: float = 0.0
    fb_t_count: int = 0  # cumulative worst-case generation passes
    fb_s_count: int = 0


class NanLossError(RuntimeError):
    """Raised when the training loss goes non-finite; carries the diagnostic record."""

    def __init__(self, epoch: int, batch: int, lr: float):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:.6g}")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup to lr0, then a half-cosine down to zero.

    ``epoch`` is fractional (epoch index plus within-epoch progress).
    """
    lr0 = cfg.optimizer.lr0
    w = cfg.schedule.warmup_epochs
    total = cfg.schedule.total_epochs
    if epoch < w:
        return lr0 * epoch / w
    progress = min(1.0, (epoch - w) / (total - w))
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * progress))


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    lr: float,
    opt: OptimConfig,
    state: dict,
) -> None:
    """Nesterov-momentum SGD with classic weight decay folded into the gradient."""
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        buf = state.get(i)
        if buf is None:
            buf = np.zeros_like(p.data)
            state[i] = buf
        buf *= opt.momentum
        buf += g
        update = g + opt.momentum * buf if opt.nesterov else buf
        p.data = p.data - lr * update


def loss_advfunmatch(
    teacher: Network,
    student: Network,
    x,
    x_tilde,
    lam: float,
    tau: float = 1.0,
) -> Tensor:
    """(1-lam) * KL(T(x)||S(x)) + lam * KL(T(x~)||S(x~)), teacher detached.

    The endpoints return the bare component term, so equality there is exact.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    x = ag.as_tensor(x)
    if lam < 1.0:
        t_clean = teacher.forward(x, record_tape=False)
        kl_clean = ag.kl_divergence(t_clean, student.forward(x), tau)
        if lam == 0.0:
            return kl_clean
    xt = ag.as_tensor(x_tilde)
    t_worst = teacher.forward(xt, record_tape=False)
    kl_worst = ag.kl_divergence(t_worst, student.forward(xt), tau)
    if lam == 1.0:
        return kl_worst
    return ag.add(ag.scale(kl_clean, 1.0 - lam), ag.scale(kl_worst, lam))


def smoothed_targets(labels: np.ndarray, num_classes: int, ls_alpha: float) -> np.ndarray:
    """1 - alpha at the label, alpha/(K-1) spread over the rest."""
    n = len(labels)
    t = np.full((n, num_classes), ls_alpha / (num_classes - 1))
    t[np.arange(n), labels] = 1.0 - ls_alpha
    return t


def loss_baselines(
    method: str,
    student: Network,
    x_tilde,
    labels: np.ndarray,
    ls_alpha: float = 0.5,
) -> Tensor:
    logits = student.forward(ag.as_tensor(x_tilde))
    if method == "pgd_at" or ls_alpha == 0.0:
        return ag.cross_entropy(logits, labels)
    if method == "pgd_at_ls":
        return ag.soft_cross_entropy(logits, smoothed_targets(labels, logits.shape[1], ls_alpha))
    raise ConfigError(f"method {method!r} is not a baseline")


def _stream(seed: int, tag: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag] + list(indices))


def train(
    teacher: Optional[Network],
    student: Network,
    ds: Dataset,
    cfg: TrainConfig,
    eval_ds: Optional[Dataset] = None,
    eval_attacks: Sequence[atk.AttackConfig] = (),
    eval_every: int = 0,
    eval_max: int = 512,
    verbose: bool = False,
) -> tuple[Network, list[MetricsRecord]]:
    """Train the student; returns it with the full per-epoch metric history.

    ``eval_every`` controls attack evaluation cadence (0 = final epoch only);
    clean accuracy and matched-KL probes are recorded every epoch. A frozen
    teacher is required for the distillation methods and optional for the
    hard-label baselines.
    """
    if cfg.method in ("funmatch", "advfunmatch") and teacher is None:
        raise ConfigError(f"{cfg.method} needs a teacher")
    if teacher is not None:
        teacher.freeze()
    if cfg.needs_worst_case and cfg.worst_case is None:
        raise ConfigError(f"{cfg.method} needs a worst_case spec")

    n = len(ds)
    bs = cfg.schedule.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    state: dict = {}
    history: list[MetricsRecord] = []
    totals = wc.GradQueries()
    probe = None  # fixed probe batch for matched-KL metrics
    t_start = time.perf_counter()

    for epoch in range(cfg.schedule.total_epochs):
        order = _stream(cfg.seed, 101, epoch).permutation(n)
        epoch_loss = 0.0
        kl_clean_sum, kl_worst_sum, kl_batches = 0.0, 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            x = ds.x[idx]
            y = ds.labels[idx]
            if cfg.augmentation.kind != "none" and x.ndim == 4:
                x = aug.apply(cfg.augmentation, x, _stream(cfg.seed, 202, epoch, b))
            lr = lr_at(epoch + b / steps_per_epoch, cfg)

            x_tilde = None
            if cfg.needs_worst_case:
                res = wc.generate(
                    cfg.worst_case, teacher if teacher is not None else student,
                    student, x, labels=y, rng=_stream(cfg.seed, 303, epoch, b),
                )
                totals += res.grad_queries
                x_tilde = res.x_tilde

            student.zero_grad()
            with Tape() as tape:
                if cfg.method == "funmatch":
                    loss = loss_advfunmatch(teacher, student, x, None, 0.0, cfg.temperature)
                elif cfg.method == "advfunmatch":
                    if cfg.lam == 0.0:
                        loss = loss_advfunmatch(teacher, student, x, None, 0.0, cfg.temperature)
                    else:
                        loss = loss_advfunmatch(teacher, student, x, x_tilde, cfg.lam, cfg.temperature)
                else:
                    loss = loss_baselines(cfg.method, student, x_tilde, y, cfg.ls_alpha)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NanLossError(epoch, b, lr)
            tape.backward(loss)
            sgd_step(student.params, [p.grad for p in student.params], lr, cfg.optimizer, state)
            epoch_loss += loss_val

            if probe is None:
                probe = (x.copy(), None if x_tilde is None else x_tilde.copy())
            if teacher is not None and b == steps_per_epoch - 1:
                kl_clean_sum += float(wc.matched_kl(teacher, student, x, cfg.temperature).mean())
                if x_tilde is not None:
                    kl_worst_sum += float(wc.matched_kl(teacher, student, x_tilde, cfg.temperature).mean())
                kl_batches += 1

        record = MetricsRecord(
            epoch=epoch,
            train_loss=epoch_loss / steps_per_epoch,
            clean_acc=float("nan"),
            lr=lr_at(epoch + 1.0, cfg) if epoch + 1 < cfg.schedule.total_epochs else 0.0,
            wallclock_ms=(time.perf_counter() - t_start) * 1e3,
            fb_t_count=totals.fb_t,
            fb_s_count=totals.fb_s,
        )
        if kl_batches:
            record.mean_kl_clean = kl_clean_sum / kl_batches
            if cfg.needs_worst_case and cfg.method in ("advfunmatch",):
                record.mean_kl_worst = kl_worst_sum / kl_batches
        if eval_ds is not None:
            record.clean_acc = atk.accuracy(student, eval_ds.x[:eval_max], eval_ds.labels[:eval_max])
            last = epoch == cfg.schedule.total_epochs - 1
            if eval_attacks and (last or (eval_every and (epoch + 1) % eval_every == 0)):
                rows = atk.evaluate(student, eval_ds, eval_attacks, max_examples=eval_max)
                record.robust_acc = {r.name: r.accuracy for r in rows if r.name != "clean"}
        history.append(record)
        if verbose:
            rob = ",".join(f"{k}={v:.3f}" for k, v in record.robust_acc.items())
            print(
                f"epoch {epoch:3d} loss={record.train_loss:.4f} "
                f"clean={record.clean_acc:.3f} {rob}",
                flush=True,
            )
    return student, history
