"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs on an explicit :class:`Tape`: operations executed while a tape
is active record backward closures in evaluation order, and ``tape.backward``
replays them in exact reverse order. Inputs are first-class gradient leaves,
which is what lets perturbation search differentiate a loss through two
networks with respect to the image rather than the weights.

All math is 64-bit; speed is traded for finite-difference fidelity.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is outside its documented domain."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, non-scalar loss, etc."""


class Tensor:
    """An n-dimensional float64 array, optionally participating in a tape.

    ``grad`` is populated by ``Tape.backward`` for every tensor with
    ``requires_grad`` reachable from the loss, including input leaves.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values that never records or receives gradients."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


# Active-tape stack. Tapes are strictly single-threaded; parallel batch work
# must use disjoint tapes in separate processes.
_TAPE_STACK: list = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Records operations in evaluation order for one backward pass.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    A tape may be consumed by at most one backward pass unless ``reset``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False
        self._recorded_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        if self._consumed:
            raise TapeError("recording onto a consumed tape; call reset() first")
        self._nodes.append(_Node(out, parents, backward_fn))
        self._recorded_ids.add(id(out))

    def reset(self) -> None:
        """Clear all recorded nodes so the tape can be reused."""
        self._nodes.clear()
        self._recorded_ids.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from ``loss``."""
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._recorded_ids:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True

        loss.grad = np.ones_like(loss.data)
        # Recording order of a single evaluation is a topological order, so a
        # plain reverse sweep is exact.
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg


class pause_tape:
    """Context manager suppressing recording, e.g. for frozen-teacher forwards."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e
    out = Tensor(out_data)

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def backward(g):
        return (g * c,)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.data.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def backward(g):
        return (g * mask,)

    return _record(out, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def backward(g):
        return (np.full_like(x.data, float(g)),)

    return _record(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())

    def backward(g):
        return (np.full_like(x.data, float(g) / n),)

    return _record(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    s = _softmax_nd(x.data, axis)
    out = Tensor(s)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    ls = _log_softmax_nd(x.data, axis)
    out = Tensor(ls)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def _log_softmax_nd(z: np.ndarray, axis: int = -1) -> np.ndarray:
    # max-subtraction keeps exp in range for arbitrarily large logits
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _softmax_nd(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over the batch of KL(softmax(p/T) || softmax(q/T)), scaled by T^2.

    Differentiable with respect to *both* logit tensors; the p-side gradient is
    what carries a teacher's signal into input-space search.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if p_logits.data.shape != q_logits.data.shape:
        raise ShapeError(
            f"kl_divergence: shapes {p_logits.shape} and {q_logits.shape} differ"
        )
    tau = float(temperature)
    n = p_logits.data.shape[0]
    logp = _log_softmax_nd(p_logits.data / tau)
    logq = _log_softmax_nd(q_logits.data / tau)
    p = np.exp(logp)
    r = logp - logq
    per_row = (p * r).sum(axis=-1)
    out = Tensor(tau * tau * per_row.mean())

    def backward(g):
        coeff = float(g) * tau / n
        gp = coeff * p * (r - per_row[:, None]) if p_logits.requires_grad else None
        gq = coeff * (np.exp(logq) - p) if q_logits.requires_grad else None
        return gp, gq

    return _record(out, (p_logits, q_logits), backward)


def kl_per_example(p_logits: np.ndarray, q_logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Forward-only per-row KL(p||q) on raw logit arrays (no tape)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    tau = float(temperature)
    logp = _log_softmax_nd(np.asarray(p_logits, dtype=np.float64) / tau)
    logq = _log_softmax_nd(np.asarray(q_logits, dtype=np.float64) / tau)
    return tau * tau * (np.exp(logp) * (logp - logq)).sum(axis=-1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the label index."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        bad = int(np.argmax((labels < 0) | (labels >= k)))
        raise IndexError(f"label {labels[bad]} at row {bad} outside [0, {k})")
    ls = _log_softmax_nd(logits.data)
    out = Tensor(-ls[np.arange(n), labels].mean())

    def backward(g):
        grad = np.exp(ls)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (float(g) / n),)

    return _record(out, (logits,), backward)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean of -sum(target * log_softmax(logits)); targets are constants."""
    t = np.asarray(target_probs, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError(
            f"soft_cross_entropy: target shape {t.shape} != logits {logits.shape}"
        )
    n = logits.data.shape[0]
    ls = _log_softmax_nd(logits.data)
    out = Tensor(-(t * ls).sum(axis=-1).mean())

    def backward(g):
        row_mass = t.sum(axis=-1, keepdims=True)
        return ((np.exp(ls) * row_mass - t) * (float(g) / n),)

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, OH, OW, C*kh*kw) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernel, zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need NCHW and OIHW, got {x.shape}, {w.shape}")
    n, c, h, wd = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ci}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: non-positive output dims ({oh}, {ow}) for input {x.shape}, "
            f"kernel {w.shape}, stride {stride}, padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride)  # (N, OH, OW, C*kh*kw)
    wf = w.data.reshape(o, -1)
    out_data = (cols.reshape(-1, c * kh * kw) @ wf.T).reshape(n, oh, ow, o)
    out = Tensor(np.ascontiguousarray(out_data.transpose(0, 3, 1, 2)))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = None
        if w.requires_grad:
            gw = (gmat.T @ cols.reshape(-1, c * kh * kw)).reshape(w.data.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wf).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _record(out, (x, w), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: dims ({h}, {w}) not divisible by {k}")
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = Tensor(out_data)

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _record(out, (x,), backward)
