"""Mini-batch SGD training, checkpoints and loss logs."""

from __future__ import annotations

import csv
import json
import logging
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import backward
from .config import ModelConfig, TrainConfig
from .data import VideoSample
from .errors import ConfigurationError, ContractError, CorruptCheckpointError, LoadError
from .losses import mil_topk_loss, tcc_loss, total_loss
from .model import ModelParams, forward_video, init_model
from .params import named_parameters, zero_grad

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    mil: float
    tcc: float
    total: float


@dataclass
class Checkpoint:
    params: ModelParams
    model_cfg: ModelConfig
    epoch: int = 0
    seed: int = 0
    history: list[EpochLog] = field(default_factory=list)


def video_loss(sample: VideoSample, params: ModelParams, cfg: ModelConfig):
    """(total, mil, tcc) graph tensors for one video."""
    out = forward_video(sample, params, cfg)
    mil = mil_topk_loss(out.scores, sample.video_label, cfg.topk)
    tcc = tcc_loss(out.weighted_pairs, cfg.tau)
    return total_loss(mil, tcc, cfg.lam), mil, tcc


def accumulate_batch(batch: Sequence[VideoSample], params: ModelParams, cfg: ModelConfig) -> tuple[float, float, float]:
    """Backpropagate the batch-mean loss one video at a time; returns summed (mil, tcc, total)."""
    n = len(batch)
    sums = np.zeros(3)
    for sample in batch:
        loss, mil, tcc = video_loss(sample, params, cfg)
        sums += (mil.item(), tcc.item(), loss.item())
        backward(loss * (1.0 / n))
    return tuple(sums)


class SGD:
    """Plain SGD; momentum, weight decay and clipping are off unless configured."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.tensors = [t for _, t in named_parameters(params)]
        self.cfg = cfg
        self.velocity = [np.zeros_like(t.data) for t in self.tensors] if cfg.momentum else None

    def step(self) -> None:
        cfg = self.cfg
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        if cfg.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
        for i, (t, g) in enumerate(zip(self.tensors, grads)):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * t.data
            if self.velocity is not None:
                self.velocity[i] = cfg.momentum * self.velocity[i] + g
                g = self.velocity[i]
            t.data -= cfg.lr * g


def train(dataset: Sequence[VideoSample], model_cfg: ModelConfig, train_cfg: TrainConfig,
          params: ModelParams | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> Checkpoint:
    """Train on ``dataset``; videos are shuffled each epoch by the seeded generator."""
    if not dataset:
        raise ContractError("train: empty dataset")
    labels = {s.video_label for s in dataset}
    if len(labels) < 2:
        warnings.warn(f"training set has a single class {labels}; the MIL objective is degenerate", stacklevel=2)
    if params is None:
        params = init_model(model_cfg, train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + 1)
    opt = SGD(params, train_cfg)
    history = []
    n = len(dataset)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        totals = np.zeros(3)
        for start in range(0, n, train_cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + train_cfg.batch_size]]
            zero_grad(params)
            totals += accumulate_batch(batch, params, model_cfg)
            opt.step()
        entry = EpochLog(epoch, *(float(v) for v in totals / n))
        history.append(entry)
        log.info("epoch %d mil %.5f tcc %.5f total %.5f", epoch, entry.mil, entry.tcc, entry.total)
        if on_epoch is not None:
            on_epoch(entry)
    zero_grad(params)
    return Checkpoint(params, model_cfg, train_cfg.epochs, train_cfg.seed, history)


def write_loss_log(path: str | Path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mil", "tcc", "total"])
        for e in history:
            w.writerow([e.epoch, repr(e.mil), repr(e.tcc), repr(e.total)])


# ---------------------------------------------------------------- checkpoints
#
# file := MAGIC u32(version) record* u32(crc32 of everything before it)
# record := u32(len key) key u8(kind) payload
#   kind 0 (tensor): u32(ndim) u32*ndim little-endian f64 values
#   kind 1 (text):   u32(len) utf-8 bytes

CKPT_MAGIC = b"MSBTCKPT"
CKPT_VERSION = 1
_META_KEY = "__meta__"


def _record_tensor(key: str, arr: np.ndarray) -> bytes:
    k = key.encode()
    head = struct.pack("<I", len(k)) + k + struct.pack("<BI", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _record_text(key: str, text: str) -> bytes:
    k, v = key.encode(), text.encode()
    return struct.pack("<I", len(k)) + k + struct.pack("<BI", 1, len(v)) + v


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = {"model_config": ckpt.model_cfg.to_dict(), "epoch": ckpt.epoch, "seed": ckpt.seed,
            "history": [[e.epoch, e.mil, e.tcc, e.total] for e in ckpt.history]}
    body = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _record_text(_META_KEY, json.dumps(meta))]
    body += [_record_tensor(k, t.data) for k, t in named_parameters(ckpt.params)]
    blob = b"".join(body)
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` enforces a matching modality set."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CKPT_MAGIC) + 8 or not raw.startswith(CKPT_MAGIC):
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    version = struct.unpack_from("<I", raw, len(CKPT_MAGIC))[0]
    if version != CKPT_VERSION:
        raise LoadError(f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    if zlib.crc32(blob) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    r = _Reader(blob, path)
    r.take(len(CKPT_MAGIC) + 4)
    meta = None
    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(blob):
        key = r.take(r.u32()).decode()
        kind = r.take(1)[0]
        if kind == 1:
            text = r.take(r.u32()).decode()
            if key == _META_KEY:
                meta = json.loads(text)
        elif kind == 0:
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            tensors[key] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        else:
            raise CorruptCheckpointError(f"{path}: unknown record kind {kind}")
    if meta is None:
        raise CorruptCheckpointError(f"{path}: missing metadata record")
    cfg = ModelConfig.from_dict(meta["model_config"])
    if expect is not None and tuple(expect.modalities) != tuple(cfg.modalities):
        raise ConfigurationError(f"checkpoint modalities {list(cfg.modalities)} do not match "
                                 f"requested {list(expect.modalities)}")
    params = init_model(cfg, 0)
    named = dict(named_parameters(params))
    if set(named) != set(tensors):
        diff = sorted(set(named) ^ set(tensors))
        raise CorruptCheckpointError(f"{path}: parameter set does not match its config ({diff[:4]}...)")
    for k, t in named.items():
        if t.shape != tensors[k].shape:
            raise CorruptCheckpointError(f"{path}: {k} has shape {tensors[k].shape}, expected {t.shape}")
        t.data = tensors[k].copy()
    history = [EpochLog(int(e[0]), *e[1:]) for e in meta.get("history", [])]
    return Checkpoint(params, cfg, int(meta["epoch"]), int(meta["seed"]), history)
