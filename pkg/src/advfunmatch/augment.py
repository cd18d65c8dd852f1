"""Image augmentation policies for consistent teaching.

One augmented tensor is produced per example per batch and shared by both
networks; labels are never mixed because the distillation losses use none.
All policies preserve shape and the [0, 1] range.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autograd import ConfigError

KINDS = ("none", "flip_crop", "cutout", "mixup", "cutmix", "randaug_lite", "combo")

# randaug_lite magnitude mapping at bucket M: contrast-inversion blend 0.1*M,
# brightness shift 0.05*M, translation up to M pixels. Rotations are whole
# quarter-turns regardless of M.
_RANDAUG_OPS = ("invert_contrast", "brightness", "translate", "rot90")


@dataclass
class AugPolicy:
    kind: str = "flip_crop"
    crop_pad: int = 4
    cutout_len: int = 16
    beta_alpha: float = 1.0
    randaug_n: int = 1
    randaug_m: int = 2
    combo_p: float = 0.5
    combo_members: tuple = ("randaug_lite", "cutmix")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"augmentation kind {self.kind!r} not in {KINDS}")
        if self.kind in ("mixup", "cutmix") and self.beta_alpha <= 0:
            raise ConfigError(f"beta_alpha must be > 0, got {self.beta_alpha}")
        if self.kind == "combo":
            self.combo_members = tuple(self.combo_members)
            if len(self.combo_members) != 2:
                raise ConfigError("combo needs exactly two member kinds")
            for m in self.combo_members:
                if m not in KINDS or m == "combo":
                    raise ConfigError(f"bad combo member {m!r}")


def describe(policy: AugPolicy) -> str:
    """Canonical policy string used in CSV headers and run manifests."""
    k = policy.kind
    if k == "none":
        return "none"
    if k == "flip_crop":
        return f"flip_crop(pad={policy.crop_pad})"
    if k == "cutout":
        return f"cutout(len={policy.cutout_len})"
    if k in ("mixup", "cutmix"):
        return f"{k}(alpha={policy.beta_alpha:g})"
    if k == "randaug_lite":
        return f"randaug_lite(n={policy.randaug_n},m={policy.randaug_m})"
    members = ",".join(policy.combo_members)
    return f"combo(p={policy.combo_p:g},members=[{members}])"


def apply(policy: AugPolicy, batch_x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Augment a (N, C, H, W) batch; the input array is left untouched."""
    x = np.asarray(batch_x, dtype=np.float64)
    if policy.kind == "none":
        return x.copy()
    if x.ndim != 4:
        raise ConfigError(f"augmentation {policy.kind!r} needs NCHW batches, got {x.shape}")
    return _APPLY[policy.kind](policy, x, rng)


def _flip_crop(policy: AugPolicy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = x.shape
    pad = policy.crop_pad
    out = x.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return out


def _cutout(policy: AugPolicy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = x.shape
    side = policy.cutout_len
    if side <= 0 or side > min(h, w):
        raise ConfigError(f"cutout_len {side} outside (0, {min(h, w)}]")
    out = x.copy()
    cy = rng.integers(0, h, size=n)
    cx = rng.integers(0, w, size=n)
    half = side // 2
    for i in range(n):
        y0, y1 = max(0, cy[i] - half), min(h, cy[i] - half + side)
        x0, x1 = max(0, cx[i] - half), min(w, cx[i] - half + side)
        out[i, :, y0:y1, x0:x1] = 0.0
    return out


def _mixup(policy: AugPolicy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lam = rng.beta(policy.beta_alpha, policy.beta_alpha)
    perm = rng.permutation(len(x))
    return lam * x + (1.0 - lam) * x[perm]


def _cutmix(policy: AugPolicy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = x.shape
    lam = rng.beta(policy.beta_alpha, policy.beta_alpha)
    perm = rng.permutation(n)
    # Rectangle kept fully inside the frame so the pasted area fraction is
    # (1 - lam) up to integer rounding.
    rh = int(round(h * np.sqrt(1.0 - lam)))
    rw = int(round(w * np.sqrt(1.0 - lam)))
    out = x.copy()
    if rh == 0 or rw == 0:
        return out
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    out[:, :, y0 : y0 + rh, x0 : x0 + rw] = x[perm][:, :, y0 : y0 + rh, x0 : x0 + rw]
    return out


def _translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys, yd = (dy, 0) if dy >= 0 else (0, -dy)
    xs, xd = (dx, 0) if dx >= 0 else (0, -dx)
    out[..., ys : h - yd, xs : w - xd] = img[..., yd : h - ys, xd : w - xs]
    return out


def _randaug_lite(policy: AugPolicy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    m = policy.randaug_m
    out = x.copy()
    for _ in range(policy.randaug_n):
        ops = rng.integers(0, len(_RANDAUG_OPS), size=n)
        for i in range(n):
            op = _RANDAUG_OPS[ops[i]]
            if op == "invert_contrast":
                alpha = 0.1 * m
                out[i] = (1.0 - alpha) * out[i] + alpha * (1.0 - out[i])
            elif op == "brightness":
                delta = 0.05 * m * (1.0 if rng.random() < 0.5 else -1.0)
                out[i] = np.clip(out[i] + delta, 0.0, 1.0)
            elif op == "translate":
                dy = int(rng.integers(-m, m + 1))
                dx = int(rng.integers(-m, m + 1))
                out[i] = _translate(out[i], dy, dx)
            else:
                out[i] = np.rot90(out[i], int(rng.integers(1, 4)), axes=(-2, -1))
    return out


def _combo(policy: AugPolicy, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pick_a = rng.random(len(x)) < policy.combo_p
    a = apply(replace(policy, kind=policy.combo_members[0]), x, rng)
    b = apply(replace(policy, kind=policy.combo_members[1]), x, rng)
    return np.where(pick_a[:, None, None, None], a, b)


_APPLY = {
    "flip_crop": _flip_crop,
    "cutout": _cutout,
    "mixup": _mixup,
    "cutmix": _cutmix,
    "randaug_lite": _randaug_lite,
    "combo": _combo,
}
