"""Small convolutional stack with analytic gradients, in float64 numpy.

Layers are stride-1, same-padded convolutions with odd kernels followed by
a pointwise activation. Three heads sit on top of the stack:

``density``
    a final convolution to a single channel of logits, same size as the input;
``residual``
    global average pooling and a dense layer to ``(dlat, dlon)``;
``region``
    pooling over square regions and a per-region dense layer with a ReLU
    floor, giving a nonnegative ``rows x cols`` map.

All parameters live in one flat vector; :class:`Parameters` carries the
per-layer shape table to view it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, NonFiniteActivation, ShapeMismatch

HEADS = ("density", "residual", "region")
ACTIVATIONS = ("relu", "tanh")
POOLS = ("max", "mean")


@dataclass(frozen=True)
class ConvStackConfig:
    in_channels: int
    hidden: tuple = ((16, 3), (32, 3), (16, 3))
    activation: str = "relu"
    head: str = "density"
    head_kernel: int = 3
    bias: bool = True
    region_size: int = 1
    pool: str = "max"

    def __post_init__(self):
        hidden = tuple((int(c), int(k)) for c, k in self.hidden)
        for c, k in hidden + ((1, self.head_kernel),):
            if c < 1 or k < 1 or k % 2 == 0:
                raise DataError(f"layer ({c}, {k}): channels must be >= 1 and kernel odd")
        if self.in_channels < 1:
            raise DataError("in_channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise DataError(f"head must be one of {HEADS}")
        if self.pool not in POOLS:
            raise DataError(f"pool must be one of {POOLS}")
        if self.region_size < 1:
            raise DataError("region_size must be >= 1")
        object.__setattr__(self, "hidden", hidden)

    @property
    def feature_channels(self) -> int:
        return self.hidden[-1][0] if self.hidden else self.in_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = [list(h) for h in self.hidden]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConvStackConfig":
        d = dict(d)
        d["hidden"] = tuple(tuple(h) for h in d.get("hidden", ()))
        return cls(**d)


def layer_table(cfg: ConvStackConfig) -> list[tuple[str, tuple]]:
    table = []
    c_in = cfg.in_channels
    for n, (c, k) in enumerate(cfg.hidden):
        table.append((f"conv{n}.w", (c, c_in, k, k)))
        if cfg.bias:
            table.append((f"conv{n}.b", (c,)))
        c_in = c
    if cfg.head == "density":
        k = cfg.head_kernel
        table.append(("head.w", (1, c_in, k, k)))
        if cfg.bias:
            table.append(("head.b", (1,)))
    elif cfg.head == "residual":
        table.append(("head.w", (2, c_in)))
        table.append(("head.b", (2,)))
    else:
        table.append(("head.w", (1, c_in)))
        table.append(("head.b", (1,)))
    return table


@dataclass
class Parameters:
    vector: np.ndarray
    table: list
    rng_seed: int = 0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        n = sum(int(np.prod(s)) for _, s in self.table)
        if self.vector.shape != (n,):
            raise ShapeMismatch(f"parameter vector has {self.vector.size} entries, table needs {n}")

    def views(self) -> dict[str, np.ndarray]:
        out = {}
        off = 0
        for name, shape in self.table:
            size = int(np.prod(shape))
            out[name] = self.vector[off:off + size].reshape(shape)
            off += size
        return out

    def copy(self) -> "Parameters":
        return Parameters(self.vector.copy(), list(self.table), self.rng_seed)

    def __len__(self):
        return self.vector.size


def init_params(cfg: ConvStackConfig, seed: int) -> Parameters:
    """Uniform(-s, s) weights with s = sqrt(1 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    table = layer_table(cfg)
    parts = []
    for name, shape in table:
        if name.endswith(".b"):
            parts.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = int(np.prod(shape[1:]))
            s = np.sqrt(1.0 / fan_in)
            parts.append(rng.uniform(-s, s, size=int(np.prod(shape))))
    return Parameters(np.concatenate(parts) if parts else np.zeros(0), table, seed)


def zero_params(cfg: ConvStackConfig) -> Parameters:
    table = layer_table(cfg)
    return Parameters(np.zeros(sum(int(np.prod(s)) for _, s in table)), table, 0)


# --- primitives -----------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*k*k) patches of the same-padded input."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    B, C, H, W = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    B, C, H, W = x.shape
    O, Cw, k, _ = w.shape
    if C != Cw:
        raise ShapeMismatch(f"conv expects {Cw} input channels, got {C}")
    cols = _im2col(x, k)
    y = cols @ w.reshape(O, -1).T
    if b is not None:
        y += b
    return y.reshape(B, H, W, O).transpose(0, 3, 1, 2), cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    B, O, H, W = dy.shape
    k = w.shape[2]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(B * H * W, O)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    dx = None
    if need_dx:
        # same-padded stride-1 transpose conv = conv with flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv2d(dy, wt, None)
    return dx, dw, db


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_backward(da: np.ndarray, z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return da * (z > 0)
    return da * (1.0 - a * a)


def _region_pool(h: np.ndarray, R: int, kind: str):
    B, C, H, W = h.shape
    if H % R or W % R:
        raise ShapeMismatch(f"region size {R} does not divide {H}x{W}")
    blocks = h.reshape(B, C, H // R, R, W // R, R)
    if kind == "mean":
        return blocks.mean(axis=(3, 5)), None
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // R, W // R, R * R)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def _region_pool_backward(dp: np.ndarray, shape, R: int, kind: str, arg):
    B, C, H, W = shape
    if kind == "mean":
        g = np.repeat(np.repeat(dp, R, axis=2), R, axis=3) / (R * R)
        return g
    flat = np.zeros((B, C, H // R, W // R, R * R))
    np.put_along_axis(flat, arg[..., None], dp[..., None], axis=-1)
    return flat.reshape(B, C, H // R, W // R, R, R).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)


# --- network ----------------------------------------------------------------------

def net_forward(params: Parameters, cfg: ConvStackConfig, x: np.ndarray):
    """Batched forward pass. Returns ``(output, cache)``.

    Output shapes: density ``(B, H, W)``; residual ``(B, 2)``; region
    ``(B, H/R, W/R)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"input must be (B, {cfg.in_channels}, H, W), got {x.shape}")
    P = params.views()
    cache = {"x_shape": x.shape, "layers": []}
    h = x
    for n, _ in enumerate(cfg.hidden):
        z, cols = conv2d(h, P[f"conv{n}.w"], P.get(f"conv{n}.b"))
        a = _activate(z, cfg.activation)
        cache["layers"].append((cols, z, a))
        h = a
    cache["features"] = h
    if cfg.head == "density":
        out, cols = conv2d(h, P["head.w"], P.get("head.b"))
        out = out[:, 0]
        cache["head_cols"] = cols
    elif cfg.head == "residual":
        g = h.mean(axis=(2, 3))
        out = g @ P["head.w"].T + P["head.b"]
        cache["pooled"] = g
    else:
        pooled, arg = _region_pool(h, cfg.region_size, cfg.pool)
        pre = np.einsum("bcij,c->bij", pooled, P["head.w"][0]) + P["head.b"][0]
        out = np.maximum(pre, 0.0)
        cache["pooled"] = pooled
        cache["arg"] = arg
        cache["pre"] = pre
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("network produced non-finite outputs")
    return out, cache


def net_backward(params: Parameters, cfg: ConvStackConfig, cache: dict, dout: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector, given dL/d(output)."""
    P = params.views()
    grads = {name: np.zeros(shape) for name, shape in params.table}
    h = cache["features"]
    if cfg.head == "density":
        dy = dout[:, None]
        dh, dw, db = conv2d_backward(dy, cache["head_cols"], P["head.w"], need_dx=bool(cfg.hidden))
        grads["head.w"] = dw
        if cfg.bias:
            grads["head.b"] = db
    elif cfg.head == "residual":
        g = cache["pooled"]
        grads["head.w"] = dout.T @ g
        grads["head.b"] = dout.sum(axis=0)
        dg = dout @ P["head.w"]
        B, C, H, W = h.shape
        dh = np.broadcast_to(dg[:, :, None, None] / (H * W), h.shape)
    else:
        dpre = dout * (cache["pre"] > 0)
        pooled = cache["pooled"]
        grads["head.w"] = np.einsum("bij,bcij->c", dpre, pooled)[None, :]
        grads["head.b"] = np.array([dpre.sum()])
        dpooled = dpre[:, None] * P["head.w"][0][None, :, None, None]
        dh = _region_pool_backward(dpooled, h.shape, cfg.region_size, cfg.pool, cache["arg"])
    for n in range(len(cfg.hidden) - 1, -1, -1):
        cols, z, a = cache["layers"][n]
        dz = _activate_backward(dh, z, a, cfg.activation)
        dh, dw, db = conv2d_backward(dz, cols, P[f"conv{n}.w"], need_dx=n > 0)
        grads[f"conv{n}.w"] = dw
        if cfg.bias:
            grads[f"conv{n}.b"] = db
    return np.concatenate([grads[name].ravel() for name, _ in params.table])
