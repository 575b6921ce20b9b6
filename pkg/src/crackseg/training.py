"""Loss, Adam optimizer, the training loop, and checkpoint persistence."""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .metrics import iou, miou
from .networks import NetworkConfig, SegNet, build
from .tensor import (GradientTape, NumericError, ShapeError, Tensor,
                     backward, record_op)


def bce_with_logits(logits, targets, weight=None, reduction="mean"):
    """Binary cross entropy fused with the sigmoid, in the stable form
    max(x,0) - x*t + log(1 + exp(-|x|)). Differentiable w.r.t. logits."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    t = targets.data
    if t.min() < 0 or t.max() > 1:
        raise ValueError("targets must lie in [0, 1]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    x = logits.data
    if weight is None:
        w = 1.0
    elif np.isscalar(weight):
        w = float(weight)
    else:
        if weight.shape != logits.shape:
            raise ShapeError(f"weight {weight.shape} vs logits {logits.shape}")
        w = weight.data

    per_elem = w * (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))
    total = per_elem.sum()
    denom = x.size if reduction == "mean" else 1
    out = Tensor(np.asarray(total / denom, dtype=x.dtype).reshape(1, 1, 1, 1))

    def rule():
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        logits.grad += out.grad.reshape(()) * w * (s - t) / denom

    record_op((logits,), out, rule)
    return out


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999 per the recipe."""

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)  # name -> Tensor
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(
                p.data.dtype)

    def state(self):
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    def load(self, scalars, m, v):
        self.t = int(scalars["t"])
        self.lr = float(scalars["lr"])
        self.beta1 = float(scalars["beta1"])
        self.beta2 = float(scalars["beta2"])
        self.eps = float(scalars["eps"])
        for k in self.params:
            self.m[k] = np.array(m[k], copy=True)
            self.v[k] = np.array(v[k], copy=True)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"FASN"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Corrupt, truncated or version-incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict
    buffers: dict
    adam_scalars: dict
    adam_m: dict
    adam_v: dict
    epoch: int = 0
    rng_state: dict | None = None
    seed: int = 0


def _write_record(buf, name, arr):
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<Q", arr.nbytes))
    buf.write(arr.tobytes())


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def _read_record(f):
    (nlen,) = struct.unpack("<H", _read_exact(f, 2, "record name length"))
    name = _read_exact(f, nlen, "record name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1, "record rank"))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "record shape"))
    (nbytes,) = struct.unpack("<Q", _read_exact(f, 8, "record size"))
    data = np.frombuffer(_read_exact(f, nbytes, "record data"), dtype="<f4")
    return name, data.reshape(shape).copy()


def _rng_state_to_json(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, int):
            return str(v)
        return v
    return conv(state)


def _rng_state_from_json(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, str) and v.lstrip("-").isdigit():
            return int(v)
        return v
    return conv(state)


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary format: magic, u32 version, u32 record count, length-prefixed
    (name, shape, raw little-endian float32) records, then a JSON trailer
    with config, epoch, optimizer scalars and RNG state. Written atomically."""
    records = []
    for name, arr in ckpt.params.items():
        records.append((f"param.{name}", arr))
    for name, arr in ckpt.buffers.items():
        records.append((f"buffer.{name}", arr))
    for name, arr in ckpt.adam_m.items():
        records.append((f"adam.m.{name}", arr))
    for name, arr in ckpt.adam_v.items():
        records.append((f"adam.v.{name}", arr))

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    trailer = json.dumps({
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "adam": ckpt.adam_scalars,
        "rng_state": _rng_state_to_json(ckpt.rng_state) if ckpt.rng_state else None,
    }).encode("utf-8")
    buf.write(struct.pack("<I", len(trailer)))
    buf.write(trailer)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        params, buffers, adam_m, adam_v = {}, {}, {}, {}
        for _ in range(count):
            name, arr = _read_record(f)
            kind, _, rest = name.partition(".")
            if kind == "param":
                params[rest] = arr
            elif kind == "buffer":
                buffers[rest] = arr
            elif kind == "adam":
                sub, _, pname = rest.partition(".")
                (adam_m if sub == "m" else adam_v)[pname] = arr
            else:
                raise CheckpointError(f"unknown record kind in {name!r}")
        (tlen,) = struct.unpack("<I", _read_exact(f, 4, "trailer length"))
        trailer = json.loads(_read_exact(f, tlen, "trailer").decode("utf-8"))
    rng_state = trailer.get("rng_state")
    return Checkpoint(
        config=NetworkConfig.from_dict(trailer["config"]),
        params=params, buffers=buffers,
        adam_scalars=trailer["adam"], adam_m=adam_m, adam_v=adam_v,
        epoch=int(trailer["epoch"]), seed=int(trailer.get("seed", 0)),
        rng_state=_rng_state_from_json(rng_state) if rng_state else None)


def restore_network(ckpt: Checkpoint, dtype=np.float32) -> SegNet:
    net = build(ckpt.config, seed=0, dtype=dtype)
    net.load_state(ckpt.params, ckpt.buffers)
    return net


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 1e-5
    seed: int = 0
    variant: str = "unet"
    base_width: int = 64
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch size >= 1, lr > 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_miou: float | None = None


@dataclass
class TrainingReport:
    records: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w") as f:
            f.write("epoch\tmean_loss\tval_miou\n")
            for r in self.records:
                vm = f"{r.val_miou:.6f}" if r.val_miou is not None else "-"
                f.write(f"{r.epoch}\t{r.mean_loss:.6f}\t{vm}\n")


def _stack_batch(dataset, indices):
    images = np.concatenate([dataset[i].image.data for i in indices], axis=0)
    masks = np.concatenate([dataset[i].mask.data for i in indices], axis=0)
    return Tensor(images), Tensor(masks)


def evaluate_miou(net, dataset, threshold=0.5):
    """Mean per-image IoU of thresholded sigmoid predictions (eval mode)."""
    results = []
    for sample in dataset:
        logits = net.forward(sample.image, mode="eval")
        probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        results.append(iou(probs, sample.mask.data, threshold=threshold))
    return miou(results)


def make_checkpoint(net, optimizer, config, epoch, rng):
    return Checkpoint(
        config=net.config,
        params={k: p.data.copy() for k, p in net.named_parameters().items()},
        buffers={k: a.copy() for k, a in net.named_buffers().items()},
        adam_scalars=optimizer.state(),
        adam_m={k: a.copy() for k, a in optimizer.m.items()},
        adam_v={k: a.copy() for k, a in optimizer.v.items()},
        epoch=epoch, seed=config.seed,
        rng_state=rng.bit_generator.state)


def train(net, dataset, config: TrainConfig, val_dataset=None, out_dir=None,
          resume: Checkpoint | None = None, log=None):
    """Run the epoch loop: seeded shuffle, train-mode forward, BCE-with-logits,
    backward, Adam step; per-epoch mean loss and optional validation mIoU."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")

    optimizer = Adam(net.named_parameters(), lr=config.learning_rate,
                     beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    start_epoch = 0
    if resume is not None:
        net.load_state(resume.params, resume.buffers)
        optimizer.load(resume.adam_scalars, resume.adam_m, resume.adam_v)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    report = TrainingReport()
    n = len(dataset)
    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(n)
        losses = []
        for step, lo in enumerate(range(0, n, config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            images, masks = _stack_batch(dataset, batch)
            optimizer.zero_grad()
            with GradientTape() as tape:
                logits = net.forward(images, mode="train")
                loss = bce_with_logits(logits, masks)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            backward(loss, tape)
            optimizer.step()
            losses.append(value)
        val = evaluate_miou(net, val_dataset) if val_dataset else None
        record = EpochRecord(epoch + 1, float(np.mean(losses)), val)
        report.records.append(record)
        if log:
            vm = f"  val_miou={val:.4f}" if val is not None else ""
            log(f"epoch {record.epoch}/{config.epochs}  loss={record.mean_loss:.6f}{vm}")
        if out_dir and config.checkpoint_every and \
                (epoch + 1) % config.checkpoint_every == 0:
            ckpt = make_checkpoint(net, optimizer, config, epoch + 1, rng)
            save_checkpoint(ckpt, os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:04d}.fasn"))
    if out_dir:
        ckpt = make_checkpoint(net, optimizer, config, config.epochs, rng)
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint_final.fasn"))
        report.write(os.path.join(out_dir, "training_report.tsv"))
    return report
