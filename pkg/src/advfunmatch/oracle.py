"""Independent verification oracles.

Two routes that never share code with what they check: central finite
differences for every registered gradient, and exhaustive ball enumeration for
the inner maximization. Both are meant to run before trusting the engine.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import autograd as ag
from . import worst_case as wc
from .nn import Network

FD_STEP = 1e-5  # balances truncation vs cancellation at unit scale, 64-bit


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    num_probes: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """inf-norm relative error against the finite-difference reference."""
    num = np.max(np.abs(analytic - numeric))
    den = max(1e-12, np.max(np.abs(numeric)))
    return float(num / den)


def _tape_gradient(build: Callable[[ag.Tensor], ag.Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    xt = ag.Tensor(x, requires_grad=True)
    with ag.Tape() as tape:
        loss = build(xt)
    tape.backward(loss)
    return loss.item(), xt.grad


def check_op(
    name: str,
    build: Callable[[ag.Tensor], ag.Tensor],
    sampler: Callable[[np.random.Generator], np.ndarray],
    rng: np.random.Generator,
    num_probes: int = 20,
    threshold: float = 1e-4,
    h: float = FD_STEP,
) -> GradCheckReport:
    """Compare the tape gradient of a scalar composition against finite differences."""
    worst = 0.0
    for _ in range(num_probes):
        x = sampler(rng)
        _, analytic = _tape_gradient(build, x)
        if analytic is None:
            analytic = np.zeros_like(x)

        def scalar(arr):
            with ag.pause_tape():
                return build(ag.Tensor(arr)).item()

        numeric = fd_gradient(scalar, x.copy(), h=h)
        worst = max(worst, rel_error(analytic, numeric))
    return GradCheckReport(name, worst, num_probes, threshold)


def standard_gradcheck(seed: int = 0, num_probes: int = 20, threshold: float = 1e-4) -> list[GradCheckReport]:
    """Gradient-check every registered op plus both loss functions."""
    rng = np.random.default_rng(seed)
    reports = []

    def vec(shape):
        return lambda r: r.normal(size=shape)

    b_mat = rng.normal(size=(4, 2))
    reports.append(
        check_op("matmul", lambda x: ag.tensor_sum(ag.matmul(x, ag.Tensor(b_mat))), vec((3, 4)), rng)
    )
    a_mat = rng.normal(size=(3, 4))
    reports.append(
        check_op("matmul_rhs", lambda x: ag.tensor_sum(ag.matmul(ag.Tensor(a_mat), x)), vec((4, 2)), rng)
    )
    bias = rng.normal(size=(5,))
    reports.append(
        check_op("add_bias", lambda x: ag.tensor_sum(ag.add(x, ag.Tensor(bias))), vec((3, 5)), rng)
    )
    reports.append(check_op("scale", lambda x: ag.tensor_sum(ag.scale(x, -1.7)), vec((4, 3)), rng))
    reports.append(check_op("relu", lambda x: ag.tensor_sum(ag.relu(x)), vec((4, 5)), rng))
    reports.append(check_op("reshape", lambda x: ag.tensor_sum(ag.reshape(x, (6, 2))), vec((3, 4)), rng))
    reports.append(check_op("mean", lambda x: ag.mean(x), vec((4, 3)), rng))
    # softmax rows sum to 1, so probe with a fixed weighting instead of a plain
    # sum (whose true gradient is identically zero).
    w_probe = rng.normal(size=(3, 5))
    reports.append(
        check_op("softmax", lambda x: _dot_const(ag.softmax(x), w_probe), vec((3, 5)), rng)
    )
    reports.append(
        check_op("log_softmax", lambda x: _dot_const(ag.log_softmax(x), w_probe), vec((3, 5)), rng)
    )
    kern = rng.normal(size=(4, 3, 3, 3))
    reports.append(
        check_op(
            "conv2d_input",
            lambda x: ag.tensor_sum(ag.conv2d(x, ag.Tensor(kern), stride=1, padding=1)),
            vec((2, 3, 6, 6)),
            rng,
            num_probes=max(5, num_probes // 4),
        )
    )
    img = rng.normal(size=(2, 3, 6, 6))
    reports.append(
        check_op(
            "conv2d_kernel",
            lambda w: ag.tensor_sum(ag.conv2d(ag.Tensor(img), w, stride=2, padding=1)),
            vec((4, 3, 3, 3)),
            rng,
            num_probes=max(5, num_probes // 4),
        )
    )
    reports.append(
        check_op("avg_pool2d", lambda x: ag.tensor_sum(ag.avg_pool2d(x, 2)), vec((2, 3, 4, 4)), rng)
    )
    q_fixed = rng.normal(size=(4, 6))
    reports.append(
        check_op(
            "kl_divergence_p",
            lambda p: ag.kl_divergence(p, ag.Tensor(q_fixed), temperature=1.0),
            vec((4, 6)),
            rng,
        )
    )
    p_fixed = rng.normal(size=(4, 6))
    reports.append(
        check_op(
            "kl_divergence_q",
            lambda q: ag.kl_divergence(ag.Tensor(p_fixed), q, temperature=1.0),
            vec((4, 6)),
            rng,
        )
    )
    reports.append(
        check_op(
            "kl_divergence_tau",
            lambda q: ag.kl_divergence(ag.Tensor(p_fixed), q, temperature=2.5),
            vec((4, 6)),
            rng,
        )
    )
    labels = rng.integers(0, 6, size=4)
    reports.append(
        check_op("cross_entropy", lambda x: ag.cross_entropy(x, labels), vec((4, 6)), rng)
    )
    targets = rng.dirichlet(np.ones(6), size=4)
    reports.append(
        check_op(
            "soft_cross_entropy",
            lambda x: ag.soft_cross_entropy(x, targets),
            vec((4, 6)),
            rng,
        )
    )
    return reports


def _dot_const(t: ag.Tensor, w: np.ndarray) -> ag.Tensor:
    """sum(w * t) as a scalar; makes row-normalized outputs gradcheckable."""
    flat = ag.reshape(t, (1, -1))
    return ag.tensor_sum(ag.matmul(flat, ag.Tensor(w.reshape(-1, 1))))


@dataclass
class CertificationReport:
    """PGD-vs-enumeration comparison for the inner maximization."""

    n_trials: int
    threshold: float
    fraction_above: float
    pgd_objectives: np.ndarray
    oracle_maxima: np.ndarray
    variant_means: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.fraction_above >= 0.9


def certify_inner_max(
    teacher: Network,
    student: Network,
    spec: "wc.WorstCaseSpec",
    n_trials: int = 200,
    threshold: float = 0.8,
    n_random: int = 200,
    input_sampler: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
    seed: int = 0,
    ordering_variants: Iterable = (),
    labels_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> CertificationReport:
    """Compare PGD search against the enumeration oracle on low-dim inputs.

    Refuses inputs above 12 dimensions; the oracle's corner set doubles per
    dimension. Optionally records mean matched-KL per search variant for
    cross-variant ordering studies.
    """
    d = teacher.input_size
    if d > 12:
        raise ag.ConfigError(f"certify_inner_max: input dim {d} > 12")
    rng = np.random.default_rng(seed)
    if input_sampler is None:
        input_sampler = lambda r: r.uniform(0.2, 0.8, size=d)

    pgd_vals = np.zeros(n_trials)
    oracle_vals = np.zeros(n_trials)
    xs = np.stack([input_sampler(rng) for _ in range(n_trials)])
    labels = labels_fn(xs) if labels_fn is not None else np.zeros(n_trials, dtype=np.int64)

    for i in range(n_trials):
        x = xs[i : i + 1]
        res = wc.generate(spec, teacher, student, x, labels=labels[i : i + 1],
                          rng=np.random.default_rng(rng.integers(2**63)))
        pgd_vals[i] = wc.matched_kl(teacher, student, res.x_tilde)[0]
        oracle_vals[i] = wc.ball_oracle(
            teacher, student, xs[i], float(res.eps_used[0]), n_random,
            rng=np.random.default_rng(rng.integers(2**63)),
        )

    ok = pgd_vals >= threshold * oracle_vals - 1e-12
    variant_means = {}
    for vspec in ordering_variants:
        res = wc.generate(vspec, teacher, student, xs, labels=labels,
                          rng=np.random.default_rng(seed + 7))
        variant_means[wc.describe_spec(vspec)] = float(
            wc.matched_kl(teacher, student, res.x_tilde).mean()
        )
    return CertificationReport(
        n_trials=n_trials,
        threshold=threshold,
        fraction_above=float(ok.mean()),
        pgd_objectives=pgd_vals,
        oracle_maxima=oracle_vals,
        variant_means=variant_means,
    )


def write_gradcheck_csv(reports: list[GradCheckReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["op", "max_rel_error", "num_probes", "threshold", "pass"])
        for r in reports:
            writer.writerow([r.op_name, f"{r.max_rel_error:.3e}", r.num_probes, r.threshold, r.passed])
