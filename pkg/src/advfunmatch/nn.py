"""Teacher/student network definitions, initialization, serialization.

Architectures are deliberately small and batch-norm-free so that input
gradients mean the same thing in every mode. Each arch id fully determines
the parameter count for given input/class dims.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, ShapeError, Tensor


class FormatError(ValueError):
    """Checkpoint bytes do not match the expected layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# (kind, args) layer descriptors; params are stored flat in layer order.
#   ("dense", in, out)      -> weight (in, out), bias (out,)
#   ("conv", cin, cout, k, stride, pad) -> kernel (cout, cin, k, k), bias (cout,)
#   ("relu",), ("avgpool", k), ("flatten",)

_ARCH_TABLE = {
    "mlp": lambda d, k: [("dense", d, 32), ("relu",), ("dense", 32, k)],
    "mlp-wide": lambda d, k: [("dense", d, 64), ("relu",), ("dense", 64, k)],
}


def _cnn_layers(channels: tuple[int, int], input_dims, num_classes):
    c, h, w = input_dims
    c1, c2 = channels
    if h % 4 or w % 4:
        raise ConfigError(f"cnn archs need spatial dims divisible by 4, got {(h, w)}")
    flat = c2 * (h // 4) * (w // 4)
    return [
        ("conv", c, c1, 3, 1, 1),
        ("relu",),
        ("avgpool", 2),
        ("conv", c1, c2, 3, 1, 1),
        ("relu",),
        ("avgpool", 2),
        ("flatten",),
        ("dense", flat, num_classes),
    ]


@dataclass
class Network:
    arch_id: str
    input_dims: Union[int, tuple]
    num_classes: int
    layers: list = field(repr=False)
    params: list = field(repr=False)

    @property
    def input_size(self) -> int:
        if isinstance(self.input_dims, int):
            return self.input_dims
        return int(np.prod(self.input_dims))

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def freeze(self) -> None:
        """Stop gradients at the parameters; input gradients still flow."""
        for p in self.params:
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.params:
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def forward(self, x, record_tape: bool = True) -> Tensor:
        """Logits for a batch; with record_tape=False nothing is recorded."""
        if not record_tape:
            with ag.pause_tape():
                return self._forward(ag.as_tensor(x))
        return self._forward(ag.as_tensor(x))

    def _forward(self, x: Tensor) -> Tensor:
        expected = self.input_dims if isinstance(self.input_dims, tuple) else (self.input_dims,)
        if x.data.shape[1:] != tuple(expected):
            raise ShapeError(
                f"{self.arch_id}: input shape {x.shape} does not match {('N',) + tuple(expected)}"
            )
        out = x
        pi = 0
        for layer in self.layers:
            kind = layer[0]
            if kind == "dense":
                w, b = self.params[pi], self.params[pi + 1]
                pi += 2
                out = ag.add(ag.matmul(out, w), b)
            elif kind == "conv":
                w, b = self.params[pi], self.params[pi + 1]
                pi += 2
                out = ag.conv2d(out, w, stride=layer[4], padding=layer[5])
                out = ag.add(out, ag.reshape(b, (1, -1, 1, 1)))
            elif kind == "relu":
                out = ag.relu(out)
            elif kind == "avgpool":
                out = ag.avg_pool2d(out, layer[1])
            elif kind == "flatten":
                out = ag.flatten(out)
            else:  # pragma: no cover - layer table is internal
                raise ConfigError(f"unknown layer kind {kind!r}")
        return out

    def clone(self) -> "Network":
        net = Network(self.arch_id, self.input_dims, self.num_classes,
                      list(self.layers), [Tensor(p.data.copy(), p.requires_grad) for p in self.params])
        return net


def known_archs() -> list[str]:
    return sorted(list(_ARCH_TABLE) + ["cnn-small", "cnn-tiny"])


def build(arch_id: str, input_dims, num_classes: int, seed: int = 0) -> Network:
    """Construct a network with Kaiming-uniform weights and zero biases."""
    if isinstance(input_dims, (list, tuple)):
        input_dims = tuple(int(v) for v in input_dims)
    else:
        input_dims = int(input_dims)

    if arch_id in _ARCH_TABLE:
        if not isinstance(input_dims, int):
            raise ConfigError(f"{arch_id} expects a flat input dim, got {input_dims}")
        layers = _ARCH_TABLE[arch_id](input_dims, num_classes)
    elif arch_id == "cnn-small":
        layers = _cnn_layers((12, 24), input_dims, num_classes)
    elif arch_id == "cnn-tiny":
        layers = _cnn_layers((6, 12), input_dims, num_classes)
    else:
        raise ConfigError(f"unknown arch_id {arch_id!r}; known: {known_archs()}")

    rng = np.random.default_rng(seed)
    params: list[Tensor] = []
    for layer in layers:
        if layer[0] == "dense":
            _, fan_in, fan_out = layer
            bound = np.sqrt(6.0 / fan_in)
            params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
            params.append(Tensor(np.zeros(fan_out), requires_grad=True))
        elif layer[0] == "conv":
            _, cin, cout, k, _, _ = layer
            fan_in = cin * k * k
            bound = np.sqrt(6.0 / fan_in)
            params.append(Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True))
            params.append(Tensor(np.zeros(cout), requires_grad=True))
    return Network(arch_id, input_dims, num_classes, layers, params)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"AFMCKPT1"


@dataclass
class Checkpoint:
    arch_id: str
    input_dims: Union[int, tuple]
    num_classes: int
    param_blobs: list
    metadata: dict


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(net: Network, path, metadata: dict | None = None) -> None:
    """Write the checkpoint: magic, arch id, f64 parameter blobs, metadata text."""
    meta = dict(metadata or {})
    meta["input_dims"] = ",".join(str(v) for v in np.atleast_1d(net.input_dims))
    meta["num_classes"] = str(net.num_classes)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(_pack_str(net.arch_id))
    buf.write(struct.pack("<I", len(net.params)))
    for p in net.params:
        dims = p.data.shape
        buf.write(struct.pack("<I", len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
        buf.write(p.data.astype("<f8").tobytes())
    meta_text = "\n".join(f"{k}={v}" for k, v in sorted(meta.items()))
    buf.write(_pack_str(meta_text))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read(fh, n: int, what: str) -> bytes:
    off = fh.tell()
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", off)
    return raw


def load(path) -> Network:
    """Rebuild a network; round-trips forward outputs bitwise."""
    with open(path, "rb") as fh:
        magic = _read(fh, len(_MAGIC), "magic")
        if magic != _MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", 0)
        (alen,) = struct.unpack("<I", _read(fh, 4, "arch id length"))
        arch_id = _read(fh, alen, "arch id").decode("utf-8")
        (nparams,) = struct.unpack("<I", _read(fh, 4, "param count"))
        blobs = []
        for i in range(nparams):
            (ndim,) = struct.unpack("<I", _read(fh, 4, f"param {i} ndim"))
            if ndim > 8:
                raise FormatError(f"param {i} claims {ndim} dims", fh.tell() - 4)
            dims = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, f"param {i} dims"))
            count = int(np.prod(dims)) if dims else 1
            raw = _read(fh, 8 * count, f"param {i} data")
            blobs.append(np.frombuffer(raw, dtype="<f8").reshape(dims).copy())
        (mlen,) = struct.unpack("<I", _read(fh, 4, "metadata length"))
        meta_text = _read(fh, mlen, "metadata").decode("utf-8")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after metadata", fh.tell() - 1)

    metadata = dict(line.split("=", 1) for line in meta_text.splitlines() if "=" in line)
    try:
        dims = tuple(int(v) for v in metadata["input_dims"].split(","))
        input_dims = dims[0] if len(dims) == 1 else dims
        num_classes = int(metadata["num_classes"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"metadata missing or malformed: {e}", 0) from e

    net = build(arch_id, input_dims, num_classes, seed=0)
    if len(blobs) != len(net.params):
        raise FormatError(
            f"arch {arch_id!r} expects {len(net.params)} params, file has {len(blobs)}", 0
        )
    for p, blob in zip(net.params, blobs):
        if p.data.shape != blob.shape:
            raise FormatError(f"param shape {blob.shape} != expected {p.data.shape}", 0)
        p.data = blob
    return net
