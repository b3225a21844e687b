"""Training machinery: LR schedule, SGD with momentum, PK batch sampling,
augmentation, the training loop, and binary checkpoints.

Per-epoch randomness is derived from (seed, epoch), so a run resumed from a
checkpoint at epoch e replays exactly the batches and augmentations the
uninterrupted run would have drawn.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import ForwardContext
from .losses import LossConfig, total_loss
from .model import Model, ModelConfig, build_model


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; training stopped."""


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

# canonical 150-epoch recipe: warm-up then step decays
_CANONICAL_TOTAL = 150
_CANONICAL_BOUNDS = (10, 50, 85, 119)  # last epoch of each phase before the final one
_PLATEAUS = (3e-2, 3e-3, 3e-4, 3e-5)


@dataclass
class ScheduleConfig:
    total_epochs: int = _CANONICAL_TOTAL
    warmup_start: float = 3e-4
    base_lr: float = 3e-2

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")

    def _scaled(self, bound: int) -> int:
        return max(1, (bound * self.total_epochs) // _CANONICAL_TOTAL)

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        return tuple(self._scaled(b) for b in _CANONICAL_BOUNDS)


def lr_at_epoch(epoch: int, cfg: ScheduleConfig) -> float:
    """Learning rate for a 1-based epoch: linear warm-up, then plateaus."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    warm_end, p1, p2, p3 = cfg.bounds
    if epoch <= warm_end:
        if warm_end == 1:
            return cfg.warmup_start
        frac = (epoch - 1) / (warm_end - 1)
        return cfg.warmup_start + (cfg.base_lr - cfg.warmup_start) * frac
    if epoch <= p1:
        return _PLATEAUS[0]
    if epoch <= p2:
        return _PLATEAUS[1]
    if epoch <= p3:
        return _PLATEAUS[2]
    return _PLATEAUS[3]


# ---------------------------------------------------------------------------
# SGD with momentum and weight decay
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


def _decayed(name: str) -> bool:
    # BN affine parameters are exempt from weight decay
    return not (name.endswith(".gamma") or name.endswith(".beta"))


def sgd_step(named_params, grads: dict[str, np.ndarray], state: OptimState, lr: float) -> None:
    """v <- mu*v + g + wd*theta; theta <- theta - lr*v, in place."""
    for name, arr in named_params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name}")
        if _decayed(name) and state.weight_decay:
            g = g + state.weight_decay * arr
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(arr)
            state.velocities[name] = v
        v *= state.momentum
        v += g.astype(arr.dtype)
        arr -= lr * v


# ---------------------------------------------------------------------------
# batch sampling and augmentation
# ---------------------------------------------------------------------------

def pk_sample(labels: np.ndarray, p: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """P distinct identities, K images each (with replacement when short)."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < p:
        raise ValueError(f"need {p} identities, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=p, replace=False)
    batch = []
    for ident in chosen:
        pool = np.flatnonzero(labels == ident)
        if len(pool) >= k:
            batch.extend(rng.choice(pool, size=k, replace=False))
        else:
            batch.extend(rng.choice(pool, size=k, replace=True))
    return np.array(batch)


@dataclass
class ChannelStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)


def compute_channel_stats(images: np.ndarray) -> ChannelStats:
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    std = np.where(std > 1e-6, std, 1.0)
    return ChannelStats(mean.astype(np.float32), std.astype(np.float32))


def augment(image: np.ndarray, rng: np.random.Generator, stats: ChannelStats,
            flip_p: float = 0.5, erase_p: float = 0.5) -> np.ndarray:
    """Horizontal flip and random erasing (each w.p. 0.5), then z-score."""
    img = image
    if rng.random() < flip_p:
        img = img[:, ::-1, :]
    if rng.random() < erase_p:
        img = img.copy()
        h, w = img.shape[:2]
        for _ in range(10):
            area = rng.uniform(0.02, 0.4) * h * w
            aspect = rng.uniform(0.3, 3.33)
            eh = int(round(np.sqrt(area * aspect)))
            ew = int(round(np.sqrt(area / aspect)))
            if 0 < eh < h and 0 < ew < w:
                top = rng.integers(0, h - eh + 1)
                left = rng.integers(0, w - ew + 1)
                img[top:top + eh, left:left + ew, :] = stats.mean
                break
    return ((img - stats.mean) / stats.std).astype(np.float32)


def normalize(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Inference-path z-score with the training statistics."""
    return ((images - stats.mean) / stats.std).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"HPGN"
VERSION = 1
_DTYPES = {0: np.float32}


@dataclass
class Checkpoint:
    config: dict           # model/schedule/loss/run settings echo
    tensors: dict[str, np.ndarray]
    epoch: int
    seed: int

    def build_model(self) -> tuple[Model, "OptimState", ChannelStats]:
        mc = dict(self.config["model"])
        mc["backbone_channels"] = tuple(mc["backbone_channels"])
        if mc.get("scale_windows") is not None:
            mc["scale_windows"] = tuple(mc["scale_windows"])
        model = build_model(ModelConfig(**mc), seed=self.seed)
        state = OptimState(momentum=self.config["optim"]["momentum"],
                           weight_decay=self.config["optim"]["weight_decay"])
        for name, arr in model.named_params():
            arr[...] = self.tensors[name]
            vel = self.tensors.get("opt." + name)
            if vel is not None:
                state.velocities[name] = vel.copy()
        for name, arr in model.named_buffers():
            arr[...] = self.tensors["buffer." + name]
        stats = ChannelStats(self.tensors["stats.mean"].copy(), self.tensors["stats.std"].copy())
        return model, state, stats


def make_checkpoint(model: Model, state: OptimState, stats: ChannelStats,
                    config: dict, epoch: int, seed: int) -> Checkpoint:
    tensors = {}
    for name, arr in model.named_params():
        tensors[name] = arr.astype(np.float32).copy()
        if name in state.velocities:
            tensors["opt." + name] = state.velocities[name].astype(np.float32).copy()
    for name, arr in model.named_buffers():
        tensors["buffer." + name] = arr.astype(np.float32).copy()
    tensors["stats.mean"] = stats.mean.astype(np.float32)
    tensors["stats.std"] = stats.std.astype(np.float32)
    return Checkpoint(config=config, tensors=tensors, epoch=epoch, seed=seed)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian binary: magic, version, config JSON, tensors, CRC32."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    cfg = dict(ckpt.config)
    cfg["_epoch"] = ckpt.epoch
    cfg["_seed"] = ckpt.seed
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(blob))
    body += blob
    body += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float32)
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb))
        body += nb
        body += struct.pack("<BB", 0, arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<Q", dim)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(body)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointFormatError("CRC mismatch; file corrupt or truncated")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = json.loads(raw[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        dtype_code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        if dtype_code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{rank}Q", raw, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype_code], count=n, offset=off).reshape(dims)
        off += n * 4
        tensors[name] = arr.copy()
    epoch = cfg.pop("_epoch")
    seed = cfg.pop("_seed")
    return Checkpoint(config=cfg, tensors=tensors, epoch=epoch, seed=seed)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 150
    p: int = 32
    k: int = 4
    seed: int = 0
    checkpoint_every: int = 10
    flip_p: float = 0.5
    erase_p: float = 0.5


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train_epochs(model: Model, state: OptimState, stats: ChannelStats,
                 images: np.ndarray, labels: np.ndarray,
                 schedule: ScheduleConfig, losses: LossConfig, tc: TrainConfig,
                 start_epoch: int = 0, log_hook=None):
    """Run epochs start_epoch+1 .. tc.epochs; yields one log row per epoch.

    Each row: dict with epoch, lr, and mean component losses.  Raises
    NumericalAbort on a non-finite loss.
    """
    n = len(images)
    batch = tc.p * tc.k
    steps = max(1, n // batch)
    log = []
    for epoch in range(start_epoch + 1, tc.epochs + 1):
        rng = _epoch_rng(tc.seed, epoch)
        lr = lr_at_epoch(epoch, schedule)
        sums: dict[str, float] = {}
        for _ in range(steps):
            idx = pk_sample(labels, tc.p, tc.k, rng)
            xs = np.stack([augment(images[i], rng, stats,
                                   flip_p=tc.flip_p, erase_p=tc.erase_p)
                           for i in idx])
            ys = labels[idx]
            ctx = ForwardContext(ad.Tape(np.float32), mode="train")
            out = model.forward(ctx, xs)
            loss, comps = total_loss(out, ys, losses)
            if not np.isfinite(loss.data):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}")
            grads_by_id = ad.backward(ctx.tape, loss)
            named = list(model.named_params())
            grads = {}
            for name, arr in named:
                t = ctx.tensor_for(arr)
                grads[name] = (grads_by_id[t.node_id] if t is not None
                               else np.zeros_like(arr))
            sgd_step(named, grads, state, lr)
            for key, val in comps.items():
                sums[key] = sums.get(key, 0.0) + val
        row = {"epoch": epoch, "lr": lr}
        row.update({key: val / steps for key, val in sums.items()})
        log.append(row)
        if log_hook is not None:
            log_hook(row)
    return log


LOG_FIELDS = ("epoch", "lr", "total", "lsrs1", "triplet1", "lsrs2", "triplet2")


def format_log_row(row: dict) -> str:
    vals = [row.get(f, 0.0) for f in LOG_FIELDS]
    return "{:d},{:.8g},{:.8g},{:.8g},{:.8g},{:.8g},{:.8g}".format(int(vals[0]), *vals[1:])
