"""Track-correction model: window features + prior density -> corrected centre.

The density head is trained with KL(target || softmax(logits)); the
residual head regresses ``(dlat, dlon)`` from the prior node with squared
error. Training runs in float64, reduces gradients over the batch in a
fixed order and is reproducible from the seed.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..density import (
    KL_EPS,
    DensityField,
    KernelParams,
    decode_expectation,
    encode_center,
    log_softmax,
    softmax_normalize,
)
from ..errors import BadMagic, DataError, DivergedTraining, FormatError, ShapeMismatch, TruncatedPayload
from ..geo import lon_diff, wrap_lon
from ..gridstore import FieldCube, Var, crop_window
from .nn import ConvStackConfig, Parameters, init_params, layer_table, net_backward, net_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormStats:
    """Per-variable standardization constants, in the order of ``variables``."""

    variables: tuple
    mean: tuple
    std: tuple

    def __post_init__(self):
        if not (len(self.variables) == len(self.mean) == len(self.std)):
            raise DataError("normalization stats length mismatch")
        if any(not s > 0 for s in self.std):
            raise DataError("every standard deviation must be positive")

    @classmethod
    def fit(cls, cubes: Sequence[FieldCube], variables: Sequence[Var]) -> "NormStats":
        if not cubes:
            raise DataError("cannot compute normalization stats from no cubes")
        variables = tuple(variables)
        stack = np.stack([c.select(variables).data.astype(np.float64) for c in cubes])
        mean = stack.mean(axis=(0, 2, 3))
        std = stack.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        return cls(variables, tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def apply(self, cube: FieldCube) -> np.ndarray:
        x = cube.select(self.variables).data.astype(np.float64)
        return (x - np.array(self.mean)[:, None, None]) / np.array(self.std)[:, None, None]

    def to_dict(self) -> dict:
        return {"variables": [v.name for v in self.variables], "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(Var.parse(v) for v in d["variables"]), tuple(d["mean"]), tuple(d["std"]))


@dataclass(frozen=True)
class CorrectionConfig:
    net: ConvStackConfig
    stats: NormStats
    half_cells: int = 8
    kernel: KernelParams = KernelParams()
    metric: str = "greatcircle"

    def __post_init__(self):
        if self.net.head not in ("density", "residual"):
            raise DataError(f"correction model needs a density or residual head, not {self.net.head}")
        if self.net.in_channels != len(self.stats.variables) + 1:
            raise ShapeMismatch(
                f"net expects {self.net.in_channels} channels; {len(self.stats.variables)} variables + prior"
            )

    @property
    def window_cells(self) -> int:
        return 2 * self.half_cells + 1

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "stats": self.stats.to_dict(),
            "half_cells": self.half_cells,
            "kernel": asdict(self.kernel),
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionConfig":
        return cls(ConvStackConfig.from_dict(d["net"]), NormStats.from_dict(d["stats"]), int(d["half_cells"]),
                   KernelParams(**d["kernel"]), d["metric"])


def default_net(n_variables: int, head: str = "density", hidden=((16, 3), (32, 3), (16, 3))) -> ConvStackConfig:
    return ConvStackConfig(in_channels=n_variables + 1, hidden=hidden, activation="relu", head=head)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise DataError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr >= 0:
            raise DataError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 0 or self.batch < 1:
            raise DataError("epochs must be >= 0 and batch >= 1")


# --- samples ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrackSample:
    """One training/evaluation item: a window cropped around a prior node."""

    storm_id: str
    lead_h: float
    window: FieldCube
    prior: tuple
    truth: tuple | None = None


def make_sample(cube: FieldCube, prior_fix, half_cells: int, storm_id: str = "", lead_h: float = 0.0,
                truth=None) -> TrackSample:
    window = crop_window(cube, prior_fix, half_cells)
    node = window.spec.node(half_cells, half_cells)
    return TrackSample(storm_id, lead_h, window, node, None if truth is None else tuple(truth))


def prior_channel(prior: DensityField) -> np.ndarray:
    """Prior density as fed to the net: scaled so its peak is 1."""
    return prior.w / prior.w.max()


def features(cfg: CorrectionConfig, window: FieldCube, prior: DensityField) -> np.ndarray:
    if window.spec.shape != (cfg.window_cells, cfg.window_cells):
        raise ShapeMismatch(f"window {window.spec.shape} does not match {cfg.window_cells} cells")
    if prior.spec != window.spec:
        raise ShapeMismatch("prior density and window live on different grids")
    x = cfg.stats.apply(window)
    return np.concatenate([x, prior_channel(prior)[None]], axis=0)


def sample_inputs(cfg: CorrectionConfig, s: TrackSample) -> np.ndarray:
    prior = encode_center(s.prior, s.window.spec, cfg.kernel, cfg.metric)
    return features(cfg, s.window, prior)


def sample_target(cfg: CorrectionConfig, s: TrackSample) -> np.ndarray:
    if s.truth is None:
        raise DataError(f"{s.storm_id}: sample has no truth")
    if cfg.net.head == "density":
        return encode_center(s.truth, s.window.spec, cfg.kernel, cfg.metric).w
    return np.array([s.truth[0] - s.prior[0], lon_diff(s.truth[1], s.prior[1])])


def stack_batch(cfg: CorrectionConfig, samples: Sequence[TrackSample]):
    x = np.stack([sample_inputs(cfg, s) for s in samples])
    y = np.stack([sample_target(cfg, s) for s in samples])
    return x, y


# --- forward / loss -------------------------------------------------------------

def forward(params: Parameters, cfg: CorrectionConfig, window: FieldCube, prior: DensityField) -> np.ndarray:
    """Logits ``(H, W)`` for the density head, ``(dlat, dlon)`` for the residual head."""
    out, _ = net_forward(params, cfg.net, features(cfg, window, prior)[None])
    return out[0]


def batch_loss(cfg: ConvStackConfig, out: np.ndarray, target: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. the network output."""
    B = out.shape[0]
    if cfg.head == "density":
        flat = out.reshape(B, -1)
        gt = target.reshape(B, -1)
        logp = log_softmax(flat, axis=1)
        floored = np.maximum(logp, np.log(KL_EPS))
        live = gt > 0
        with np.errstate(divide="ignore"):
            lg = np.where(live, np.log(np.where(live, gt, 1.0)), 0.0)
        per = np.sum(np.where(live, gt * (lg - floored), 0.0), axis=1)
        m = np.where(logp >= np.log(KL_EPS), gt, 0.0)
        p = np.exp(logp)
        grad = (p * m.sum(axis=1, keepdims=True) - m) / B
        return float(per.mean()), grad.reshape(out.shape)
    diff = out - target
    return float(np.mean(np.sum(diff * diff, axis=1))), 2.0 * diff / B


def loss_and_grad(params: Parameters, cfg, batch):
    """``batch`` is ``(x, y)`` arrays or a sequence of :class:`TrackSample`."""
    net = cfg.net if isinstance(cfg, CorrectionConfig) else cfg
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, y = batch
    else:
        x, y = stack_batch(cfg, batch)
    if len(x) == 0:
        raise DataError("empty batch")
    out, cache = net_forward(params, net, x)
    loss, dout = batch_loss(net, out, y)
    return loss, net_backward(params, net, cache, dout)


def evaluate_loss(params: Parameters, net: ConvStackConfig, x: np.ndarray, y: np.ndarray, chunk: int = 64) -> float:
    total = 0.0
    for a in range(0, len(x), chunk):
        out, _ = net_forward(params, net, x[a:a + chunk])
        loss, _ = batch_loss(net, out, y[a:a + chunk])
        total += loss * len(out)
    return total / len(x)


# --- optimization -----------------------------------------------------------------

class _Adam:
    def __init__(self, n, tc: TrainConfig):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.tc = tc

    def step(self, theta, g):
        tc = self.tc
        self.t += 1
        self.m = tc.beta1 * self.m + (1 - tc.beta1) * g
        self.v = tc.beta2 * self.v + (1 - tc.beta2) * g * g
        mhat = self.m / (1 - tc.beta1 ** self.t)
        vhat = self.v / (1 - tc.beta2 ** self.t)
        return theta - tc.lr * mhat / (np.sqrt(vhat) + tc.eps)


class _SGD:
    def __init__(self, n, tc: TrainConfig):
        self.tc = tc

    def step(self, theta, g):
        return theta - self.tc.lr * g


@dataclass
class TrainResult:
    params: Parameters
    log: list = field(default_factory=list)
    best_epoch: int = -1


def train_arrays(net: ConvStackConfig, x: np.ndarray, y: np.ndarray, tc: TrainConfig,
                 x_val: np.ndarray | None = None, y_val: np.ndarray | None = None,
                 init: Parameters | None = None, loss_fn=None) -> TrainResult:
    """Minibatch training on prepared arrays; keeps the best-validation parameters.

    Without a validation set, selection falls back to the training loss.
    ``loss_fn(out, y) -> (loss, dL/dout)`` overrides the head's default loss.
    """
    loss_fn = loss_fn or (lambda out, tgt: batch_loss(net, out, tgt))
    params = init.copy() if init is not None else init_params(net, tc.seed)
    rng = np.random.default_rng(tc.seed + 1)
    opt = _Adam(len(params), tc) if tc.optimizer == "adam" else _SGD(len(params), tc)
    has_val = x_val is not None and len(x_val) > 0

    def full_loss(p, xs, ys):
        total = 0.0
        for a in range(0, len(xs), 64):
            out, _ = net_forward(p, net, xs[a:a + 64])
            total += loss_fn(out, ys[a:a + 64])[0] * len(out)
        return total / len(xs)

    best = params.copy()
    best_loss = full_loss(params, x_val, y_val) if has_val else full_loss(params, x, y)
    result = TrainResult(best, [], 0)
    result.log.append({"epoch": 0, "train_loss": full_loss(params, x, y),
                       "val_loss": best_loss if has_val else None, "best": best_loss})
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(x))
        running = 0.0
        for a in range(0, len(x), tc.batch):
            idx = order[a:a + tc.batch]
            out, cache = net_forward(params, net, x[idx])
            loss, dout = loss_fn(out, y[idx])
            g = net_backward(params, net, cache, dout)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise DivergedTraining(f"non-finite loss or gradient at epoch {epoch}")
            params.vector = opt.step(params.vector, g)
            if not np.all(np.isfinite(params.vector)):
                raise DivergedTraining(f"non-finite parameters at epoch {epoch}")
            running += loss * len(idx)
        train_loss = running / len(x)
        score = full_loss(params, x_val, y_val) if has_val else full_loss(params, x, y)
        if not np.isfinite(score):
            raise DivergedTraining(f"non-finite loss at epoch {epoch}")
        if score < best_loss:
            best_loss = score
            result.params = params.copy()
            result.best_epoch = epoch
        result.log.append({"epoch": epoch, "train_loss": train_loss,
                           "val_loss": score if has_val else None, "best": best_loss})
        log.debug("epoch %d train %.6g select %.6g", epoch, train_loss, score)
    return result


def train(train_samples: Sequence[TrackSample], cfg: CorrectionConfig, tc: TrainConfig,
          val_samples: Sequence[TrackSample] = ()) -> TrainResult:
    """Train from samples. Keep whole storms on one side of the split."""
    overlap = {s.storm_id for s in train_samples} & {s.storm_id for s in val_samples}
    if overlap:
        raise DataError(f"storms on both sides of the split: {sorted(overlap)}")
    if not train_samples:
        raise DataError("no training samples")
    x, y = stack_batch(cfg, train_samples)
    xv = yv = None
    if val_samples:
        xv, yv = stack_batch(cfg, val_samples)
    return train_arrays(cfg.net, x, y, tc, xv, yv)


def split_by_storm(storm_ids: Sequence[str], val_frac: float, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(set(storm_ids))
    rng = np.random.default_rng(seed)
    perm = [ids[k] for k in rng.permutation(len(ids))]
    n_val = int(round(val_frac * len(ids)))
    return sorted(perm[n_val:]), sorted(perm[:n_val])


# --- inference -------------------------------------------------------------------

def refine_window(params: Parameters, cfg: CorrectionConfig, window: FieldCube, prior_fix) -> tuple[float, float]:
    prior = encode_center(prior_fix, window.spec, cfg.kernel, cfg.metric)
    out = forward(params, cfg, window, prior)
    if cfg.net.head == "density":
        return decode_expectation(softmax_normalize(out, window.spec))
    return float(prior_fix[0] + out[0]), wrap_lon(float(prior_fix[1] + out[1]))


def refine_track(params: Parameters, cfg: CorrectionConfig, cube: FieldCube, prior_fix) -> tuple[float, float]:
    """Continuous centre from a tracker node: crop, encode, correct, decode."""
    s = make_sample(cube, prior_fix, cfg.half_cells)
    return refine_window(params, cfg, s.window, s.prior)


def refine_batch(params: Parameters, cfg: CorrectionConfig, samples: Sequence[TrackSample], chunk: int = 64):
    out_pts = []
    for a in range(0, len(samples), chunk):
        part = samples[a:a + chunk]
        x = np.stack([sample_inputs(cfg, s) for s in part])
        out, _ = net_forward(params, cfg.net, x)
        for s, o in zip(part, out):
            if cfg.net.head == "density":
                out_pts.append(decode_expectation(softmax_normalize(o, s.window.spec)))
            else:
                out_pts.append((float(s.prior[0] + o[0]), wrap_lon(float(s.prior[1] + o[1]))))
    return out_pts


# --- checkpoint -------------------------------------------------------------------

CKPT_MAGIC = b"BGP1"
CKPT_VERSION = 1


def encode_checkpoint(params: Parameters, metadata: dict) -> bytes:
    meta = dict(metadata)
    meta.setdefault("rng_seed", params.rng_seed)
    meta["layers"] = [[name, list(shape)] for name, shape in params.table]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (
        CKPT_MAGIC
        + struct.pack("<IQ", CKPT_VERSION, len(params))
        + params.vector.astype("<f8").tobytes()
        + struct.pack("<I", len(blob))
        + blob
    )


def decode_checkpoint(buf: bytes) -> tuple[Parameters, dict]:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 16:
        raise TruncatedPayload("checkpoint header truncated", len(buf))
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    end = 16 + 8 * n
    if len(buf) < end + 4:
        raise TruncatedPayload("checkpoint payload truncated", len(buf))
    vec = np.frombuffer(buf, dtype="<f8", count=n, offset=16).astype(np.float64)
    (mlen,) = struct.unpack_from("<I", buf, end)
    if len(buf) < end + 4 + mlen:
        raise TruncatedPayload("checkpoint metadata truncated", len(buf))
    if len(buf) > end + 4 + mlen:
        raise FormatError("trailing bytes after checkpoint metadata", end + 4 + mlen)
    meta = json.loads(buf[end + 4:end + 4 + mlen].decode("utf-8"))
    table = [(name, tuple(shape)) for name, shape in meta["layers"]]
    return Parameters(vec, table, int(meta.get("rng_seed", 0))), meta


def save_checkpoint(path, params: Parameters, metadata: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(params, metadata))


def load_checkpoint(path) -> tuple[Parameters, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def correction_metadata(cfg: CorrectionConfig, tc: TrainConfig | None = None, **extra) -> dict:
    meta = {"kind": "track-correction", "config": cfg.to_dict()}
    if tc is not None:
        meta["train"] = asdict(tc)
        meta["rng_seed"] = tc.seed
    meta.update(extra)
    return meta


def load_correction(path) -> tuple[Parameters, CorrectionConfig, dict]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "track-correction":
        raise DataError(f"{path} is not a track-correction checkpoint")
    cfg = CorrectionConfig.from_dict(meta["config"])
    if [tuple(s) for _, s in layer_table(cfg.net)] != [tuple(s) for _, s in params.table]:
        raise ShapeMismatch("checkpoint layers do not match its configuration")
    return params, cfg, meta
