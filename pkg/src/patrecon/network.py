"""Residual Unet written directly in numpy, with a hand-derived backward pass.

Tensors are laid out ``(batch, channels, height, width)``.  Encoder level ``l``
has ``base * 2**l`` channels; the bottleneck has ``base * 2**depth``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .forward import ShapeError


@dataclass(frozen=True)
class UnetConfig:
    depth: int = 4
    base_channels: int = 32
    input_size: int = 256

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_size % (2 ** self.depth):
            raise ValueError(f"input size {self.input_size} not divisible by 2**{self.depth}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def tensor_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        shapes = OrderedDict()

        def conv(name, c_out, c_in, k=3):
            shapes[name + "_w"] = (c_out, c_in, k, k)
            shapes[name + "_b"] = (c_out,)

        c_in = 1
        for lvl in range(self.depth):
            c = self.channels(lvl)
            conv(f"enc{lvl}_conv1", c, c_in)
            conv(f"enc{lvl}_conv2", c, c)
            c_in = c
        c_mid = self.channels(self.depth)
        conv("mid_conv1", c_mid, c_in)
        conv("mid_conv2", c_mid, c_mid)
        for lvl in reversed(range(self.depth)):
            c = self.channels(lvl)
            conv(f"dec{lvl}_up", c, self.channels(lvl + 1))
            conv(f"dec{lvl}_conv1", c, 2 * c)
            conv(f"dec{lvl}_conv2", c, c)
        conv("out", 1, self.channels(0), k=1)
        return shapes


class UnetParams:
    """Named parameter tensors of a :class:`UnetConfig` network."""

    def __init__(self, config: UnetConfig, tensors: "OrderedDict[str, np.ndarray]"):
        shapes = config.tensor_shapes()
        if list(tensors) != list(shapes):
            raise ShapeError("tensor names do not match the configuration")
        for name, arr in tensors.items():
            if arr.shape != shapes[name]:
                raise ShapeError(f"{name}: shape {arr.shape} != {shapes[name]}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["out_w"].dtype

    @property
    def size(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "UnetParams":
        return UnetParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def zeros_like(self) -> "UnetParams":
        return UnetParams(self.config, OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items()))

    def astype(self, dtype) -> "UnetParams":
        return UnetParams(self.config, OrderedDict((k, v.astype(dtype)) for k, v in self.tensors.items()))

    def save(self, directory) -> None:
        from .io import write_array

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.tensors.items():
            write_array(directory / f"{name}.patarr", arr, sidecar=False)
        manifest = {"config": asdict(self.config), "tensors": list(self.tensors)}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory, dtype=np.float32) -> "UnetParams":
        from .io import read_array

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        config = UnetConfig(**manifest["config"])
        tensors = OrderedDict(
            (name, read_array(directory / f"{name}.patarr").astype(dtype)) for name in manifest["tensors"])
        return cls(config, tensors)


def parameter_count(config: UnetConfig) -> int:
    return sum(int(np.prod(s)) for s in config.tensor_shapes().values())


def unet_init(config: UnetConfig, seed: int = 0, dtype=np.float32) -> UnetParams:
    """He-normal 3x3 kernels, zero biases, zero output layer (identity network)."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in config.tensor_shapes().items():
        if name.startswith("out") or name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return UnetParams(config, tensors)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _im2col(x, k):
    p = k // 2
    b, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (b, c, h, w, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def conv2d(x, w, b, cols=None):
    """Zero-padded 'same' convolution (cross-correlation), stride 1."""
    bsz, _, h, wd = x.shape
    o, _, k, _ = w.shape
    if cols is None:
        cols = _im2col(x, k)
    y = cols @ w.reshape(o, -1).T + b
    return y.reshape(bsz, h, wd, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(dy, x_shape, w, cols):
    bsz, c, h, wd = x_shape
    o, _, k, _ = w.shape
    g = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0)
    dcols = (g @ w.reshape(o, -1)).reshape(bsz, h, wd, c, k, k)
    p = k // 2
    dxp = np.zeros((bsz, c, h + 2 * p, wd + 2 * p), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
    return dx, dw, db


def maxpool2(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first maximum in row-major window order
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def maxpool2_backward(dy, idx):
    b, c, h2, w2 = dy.shape
    win = np.zeros((b, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    return win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def _as_batch(params: UnetParams, x):
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    n = params.config.input_size
    if x.ndim != 3 or x.shape[1:] != (n, n):
        raise ShapeError(f"input shape {x.shape} incompatible with network input size {n}")
    return x[:, None].astype(params.dtype, copy=False), single


def _forward(params: UnetParams, x4):
    """Run the network on ``(B, 1, n, n)``, returning output and the tape for backward."""
    P = params.tensors
    tape = []

    def conv_relu(name, h):
        y, cols = conv2d(h, P[name + "_w"], P[name + "_b"])
        mask = y > 0
        tape.append(("conv_relu", name, h.shape, cols, mask))
        return y * mask

    skips = []
    h = x4
    cfg = params.config
    for lvl in range(cfg.depth):
        h = conv_relu(f"enc{lvl}_conv1", h)
        h = conv_relu(f"enc{lvl}_conv2", h)
        skips.append(h)
        h, idx = maxpool2(h)
        tape.append(("pool", idx, lvl))
    h = conv_relu("mid_conv1", h)
    h = conv_relu("mid_conv2", h)
    for lvl in reversed(range(cfg.depth)):
        h = upsample2(h)
        tape.append(("up",))
        h = conv_relu(f"dec{lvl}_up", h)
        h = np.concatenate([h, skips[lvl]], axis=1)
        tape.append(("concat", lvl, cfg.channels(lvl)))
        h = conv_relu(f"dec{lvl}_conv1", h)
        h = conv_relu(f"dec{lvl}_conv2", h)
    y, cols = conv2d(h, P["out_w"], P["out_b"])
    tape.append(("conv", "out", h.shape, cols))
    return y + x4, tape


def _backward(params: UnetParams, tape, dout):
    P = params.tensors
    grads = OrderedDict((k, None) for k in P)
    dskips = {}
    d = dout
    dx_res = dout
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "conv":
            _, name, shape, cols = entry
            d, dw, db = conv2d_backward(d, shape, P[name + "_w"], cols)
            grads[name + "_w"], grads[name + "_b"] = dw, db
        elif kind == "conv_relu":
            _, name, shape, cols, mask = entry
            d, dw, db = conv2d_backward(d * mask, shape, P[name + "_w"], cols)
            grads[name + "_w"], grads[name + "_b"] = dw, db
        elif kind == "concat":
            _, lvl, c = entry
            dskips[lvl] = d[:, c:]
            d = d[:, :c]
        elif kind == "up":
            d = upsample2_backward(d)
        elif kind == "pool":
            _, idx, lvl = entry
            # the pre-pool activation also feeds the decoder through the skip
            d = maxpool2_backward(d, idx) + dskips.pop(lvl)
    return grads, d + dx_res


def unet_apply(params: UnetParams, x) -> np.ndarray:
    """Network output for one image ``(n, n)`` or a batch ``(B, n, n)``."""
    x4, single = _as_batch(params, x)
    y, _ = _forward(params, x4)
    y = y[:, 0]
    return y[0] if single else y


def unet_forward(params: UnetParams, x):
    """Output and tape, for a later :func:`unet_backward` without recomputation."""
    x4, single = _as_batch(params, x)
    y, tape = _forward(params, x4)
    y = y[:, 0]
    return (y[0] if single else y), tape


def unet_backward(params: UnetParams, x, grad_out, tape=None):
    """Parameter gradients (summed over the batch) and the input gradient."""
    x4, single = _as_batch(params, x)
    g = np.asarray(grad_out)
    if g.shape != np.asarray(x).shape:
        raise ShapeError(f"gradient shape {g.shape} != input shape {np.asarray(x).shape}")
    if tape is None:
        _, tape = _forward(params, x4)
    g4 = (g[None] if single else g)[:, None].astype(params.dtype, copy=False)
    grads, dx = _backward(params, tape, g4)
    dx = dx[:, 0]
    return UnetParams(params.config, grads), (dx[0] if single else dx)


def activation_pattern(params: UnetParams, x, tape=None) -> list[np.ndarray]:
    """ReLU on/off masks and pooling argmax indices; constant within a linear region.

    Pass the ``tape`` from :func:`unet_forward` to skip the extra forward pass.
    """
    if tape is None:
        x4, _ = _as_batch(params, x)
        _, tape = _forward(params, x4)
    pattern = []
    for entry in tape:
        if entry[0] == "conv_relu":
            pattern.append(entry[4])
        elif entry[0] == "pool":
            pattern.append(entry[1])
    return pattern
