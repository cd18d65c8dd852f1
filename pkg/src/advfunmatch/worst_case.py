"""Inner maximization: search the L-inf ball around each input for the point
where teacher and student disagree most.

Four objective variants are supported. ``mismatched`` maximizes
KL(teacher(x~) || student(x~)) with the gradient flowing through *both*
networks with respect to the input; ``mismatched_no_tg`` uses the same value
but treats the teacher's output as a constant during differentiation.
``adversarial`` climbs hard-label cross-entropy on the student, and
``adversarial_rsl`` climbs KL against the teacher's frozen clean-input
distribution. Search is signed-gradient ascent with per-step projection onto
the ball followed by a [0, 1] clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Tape, Tensor
from .nn import Network

VARIANTS = ("adversarial", "adversarial_rsl", "mismatched", "mismatched_no_tg")

# Step-size conventions: large steps for the short teacher-guided search,
# conventional small steps for 10-step searches.
DEFAULT_STEP_SIZE = {2: 8.0 / 255.0, 10: 2.0 / 255.0}


@dataclass
class WorstCaseSpec:
    variant: str = "mismatched"
    steps: int = 2
    step_size: float = 8.0 / 255.0
    eps_train: float = 8.0 / 255.0
    eps_add: float = 0.0
    random_start: Optional[bool] = None  # None -> variant default
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not in {VARIANTS}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.step_size <= 1.0:
            raise ConfigError(f"step_size must be in (0, 1], got {self.step_size}")
        if self.eps_train <= 0.0:
            raise ConfigError(f"eps_train must be > 0, got {self.eps_train}")
        if self.eps_add < 0.0:
            raise ConfigError(f"eps_add must be >= 0, got {self.eps_add}")

    @property
    def uses_random_start(self) -> bool:
        if self.random_start is not None:
            return self.random_start
        # The teacher-guided search is a deterministic ascent by default;
        # classical attacks keep the usual random start.
        return self.variant in ("adversarial", "adversarial_rsl")


@dataclass
class GradQueries:
    """Forward-backward pass counters; fwd_t counts gradient-free teacher calls."""

    fb_t: int = 0
    fb_s: int = 0
    fwd_t: int = 0

    def __iadd__(self, other: "GradQueries") -> "GradQueries":
        self.fb_t += other.fb_t
        self.fb_s += other.fb_s
        self.fwd_t += other.fwd_t
        return self


@dataclass
class WorstCaseResult:
    x_tilde: np.ndarray
    achieved_objective: np.ndarray
    eps_used: np.ndarray
    grad_queries: GradQueries = field(default_factory=GradQueries)


def describe_spec(spec: WorstCaseSpec) -> str:
    rs = "rs" if spec.uses_random_start else "nors"
    return (
        f"{spec.variant}(steps={spec.steps},eta={spec.step_size:.6g},"
        f"eps={spec.eps_train:.6g}+{spec.eps_add:.6g},{rs})"
    )


def sample_eps(spec: WorstCaseSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Per-example radius: eps_train plus an independent Uniform[0, eps_add] draw."""
    if spec.eps_add == 0.0:
        return np.full(n, spec.eps_train)
    return spec.eps_train + rng.uniform(0.0, spec.eps_add, size=n)


def project_linf(x_new: np.ndarray, x: np.ndarray, eps) -> np.ndarray:
    """Project onto the per-example L-inf ball, then clamp to valid pixels.

    The ball is axis-aligned so the composition is idempotent; the fixed order
    (ball first, clamp second) keeps runs bit-reproducible.
    """
    eps_b = np.reshape(eps, (-1,) + (1,) * (x.ndim - 1))
    out = x + np.clip(x_new - x, -eps_b, eps_b)
    return np.clip(out, 0.0, 1.0)


def objective(
    variant: str,
    teacher: Network,
    student: Network,
    x_tilde: Tensor,
    labels: Optional[np.ndarray] = None,
    rsl_targets: Optional[np.ndarray] = None,
) -> Tensor:
    """The maximized scalar for one variant, recorded on the active tape."""
    if variant == "adversarial":
        if labels is None:
            raise ConfigError("adversarial objective needs hard labels")
        return ag.cross_entropy(student.forward(x_tilde), labels)
    if variant == "adversarial_rsl":
        if rsl_targets is None:
            raise ConfigError("adversarial_rsl objective needs teacher clean-input logits")
        return ag.kl_divergence(Tensor(rsl_targets), student.forward(x_tilde))
    if variant == "mismatched":
        t_logits = teacher.forward(x_tilde, record_tape=True)
        return ag.kl_divergence(t_logits, student.forward(x_tilde))
    if variant == "mismatched_no_tg":
        t_logits = teacher.forward(x_tilde, record_tape=False)
        return ag.kl_divergence(t_logits, student.forward(x_tilde))
    raise ConfigError(f"variant {variant!r} not in {VARIANTS}")


def per_example_objective(
    variant: str,
    teacher: Network,
    student: Network,
    x_tilde: np.ndarray,
    labels: Optional[np.ndarray] = None,
    rsl_targets: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Forward-only per-example value of the variant's objective."""
    s_logits = student.forward(x_tilde, record_tape=False).data
    if variant == "adversarial":
        ls = ag._log_softmax_nd(s_logits)
        return -ls[np.arange(len(labels)), np.asarray(labels)]
    if variant == "adversarial_rsl":
        return ag.kl_per_example(rsl_targets, s_logits)
    t_logits = teacher.forward(x_tilde, record_tape=False).data
    return ag.kl_per_example(t_logits, s_logits)


def matched_kl(teacher: Network, student: Network, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Per-example KL(teacher || student) at the given inputs, no tape."""
    t = teacher.forward(x, record_tape=False).data
    s = student.forward(x, record_tape=False).data
    return ag.kl_per_example(t, s, temperature)


def generate(
    spec: WorstCaseSpec,
    teacher: Network,
    student: Network,
    x: np.ndarray,
    labels: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> WorstCaseResult:
    """Run the signed-gradient search and return the worst-case batch.

    Pure given (spec, network params, x, rng state). Counters follow the
    generation loop only: the final objective measurement is forward-only and
    uncounted.
    """
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    n = x.shape[0]
    eps_used = sample_eps(spec, rng, n)
    eps_b = eps_used.reshape((-1,) + (1,) * (x.ndim - 1))

    queries = GradQueries()
    rsl_targets = None
    if spec.variant == "adversarial_rsl":
        rsl_targets = teacher.forward(x, record_tape=False).data
        queries.fwd_t += 1

    if spec.uses_random_start:
        cur = np.clip(x + rng.uniform(-eps_b, eps_b, size=x.shape), 0.0, 1.0)
    else:
        cur = x.copy()

    # Only input gradients are needed; park both parameter sets outside the
    # gradient chain for the duration of the search.
    saved_flags = [(p, p.requires_grad) for p in teacher.params + student.params]
    for p, _ in saved_flags:
        p.requires_grad = False
    try:
        for _ in range(spec.steps):
            xt = Tensor(cur, requires_grad=True)
            with Tape() as tape:
                loss = objective(spec.variant, teacher, student, xt, labels, rsl_targets)
            tape.backward(loss)
            queries.fb_s += 1
            if spec.variant == "mismatched":
                queries.fb_t += 1
            elif spec.variant == "mismatched_no_tg":
                queries.fwd_t += 1
            cur = project_linf(cur + spec.step_size * np.sign(xt.grad), x, eps_used)
    finally:
        for p, flag in saved_flags:
            p.requires_grad = flag

    achieved = per_example_objective(spec.variant, teacher, student, cur, labels, rsl_targets)
    return WorstCaseResult(cur, achieved, eps_used, queries)


def ball_oracle(
    teacher: Network,
    student: Network,
    x: np.ndarray,
    eps: float,
    n_random: int,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Best matched-KL over all ball corners, the center, and random interior points.

    Only for low-dimensional inputs: the corner set has 2^d members.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > 16:
        raise ConfigError(f"ball_oracle refuses dimension {d} > 16 (2^d corners)")
    if rng is None:
        rng = np.random.default_rng(0)
    signs = np.array(list(product((-1.0, 1.0), repeat=d)))
    candidates = [x + eps * signs, x[None, :]]
    if n_random > 0:
        candidates.append(x[None, :] + rng.uniform(-eps, eps, size=(n_random, d)))
    cand = np.clip(np.concatenate(candidates, axis=0), 0.0, 1.0)
    return float(matched_kl(teacher, student, cand).max())
