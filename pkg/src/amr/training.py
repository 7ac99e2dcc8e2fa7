"""Training loops for the base classifier and the angle head, plus
checkpoint I/O.

Checkpoints are a single file: a UTF-8 JSON header (configs, tensor
manifest, metadata), a "\\n\\0" separator, then the raw little-endian
float32 blob. The manifest is validated on load (offsets in bounds,
non-overlapping, shapes consistent with the blob length), so a truncated
or hand-edited file fails loudly rather than producing silent garbage.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Batch, Dataset, batch_iter, eval_batches, prepare_upright
from .geometry import circular_mask, rotate_array
from .models import (
    AmrConfig,
    AmrHead,
    BaseConfig,
    BaseModel,
    build_amr_head,
    build_base,
    default_compress_width,
)

CHECKPOINT_VERSION = 1
_SEPARATOR = b"\n\0"


class CheckpointError(ValueError):
    """Structural problem in a checkpoint file."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # cosine | step
    seed: int = 0
    regime: str = "upright"  # upright | rotated | amr
    preset: str = "resnet18-slim"
    gates: tuple[bool, ...] = (True,) * 5
    compress_width: int | None = None
    eval_subset: int = 2000  # per-epoch metric sample size

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.regime not in ("upright", "rotated", "amr"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class Checkpoint:
    kind: str  # base | amr
    base_config: dict
    amr_config: dict | None
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = {
        "version": ckpt.version,
        "kind": ckpt.kind,
        "base_config": ckpt.base_config,
        "amr_config": ckpt.amr_config,
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(payload)
        f.write(_SEPARATOR)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    sep = data.find(_SEPARATOR)
    if sep < 0:
        raise CheckpointError("missing header separator")
    try:
        header = json.loads(data[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    blob = data[sep + len(_SEPARATOR):]

    spans = []
    tensors = {}
    total = 0
    for entry in header["manifest"]:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        offset = int(entry["offset"])
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(
                f"tensor {entry['name']!r} spans [{offset}, {offset + nbytes}) "
                f"outside blob of {len(blob)} bytes"
            )
        spans.append((offset, offset + nbytes, entry["name"]))
        total += nbytes
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"tensors {n0!r} and {n1!r} overlap in the blob")
    if total != len(blob):
        raise CheckpointError(
            f"blob length {len(blob)} does not match manifest total {total}"
        )
    return Checkpoint(
        kind=header["kind"],
        base_config=header["base_config"],
        amr_config=header.get("amr_config"),
        meta=header.get("meta", {}),
        tensors=tensors,
        version=header["version"],
    )


def params_digest(params: nn.ParamSet) -> str:
    return hashlib.sha256(params.state_bytes()).hexdigest()


def restore_base(ckpt: Checkpoint) -> BaseModel:
    if ckpt.kind != "base":
        raise CheckpointError(f"expected a base checkpoint, got kind={ckpt.kind!r}")
    cfg = BaseConfig.from_dict(ckpt.base_config)
    model = build_base(cfg, np.random.default_rng(0))
    _load_params(model.params, ckpt.tensors)
    return model


def restore_amr(ckpt: Checkpoint) -> AmrHead:
    if ckpt.kind != "amr":
        raise CheckpointError(f"expected an amr checkpoint, got kind={ckpt.kind!r}")
    base_cfg = BaseConfig.from_dict(ckpt.base_config)
    amr_cfg = AmrConfig.from_dict(ckpt.amr_config)
    head = build_amr_head(base_cfg, amr_cfg, np.random.default_rng(0))
    _load_params(head.params, ckpt.tensors)
    return head


def _load_params(params: nn.ParamSet, tensors: dict[str, np.ndarray]) -> None:
    names = params.names()
    missing = [n for n in names if n not in tensors]
    extra = [n for n in tensors if n not in params]
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing={missing[:3]} extra={extra[:3]}")
    for name in names:
        t = params[name]
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: {tensors[name].shape} vs {t.data.shape}"
            )
        t.data[...] = tensors[name]


class MetricsLog:
    """Append-only (epoch, split, metric, value) CSV."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[tuple[int, str, str, float]] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("epoch,split,metric,value\n")

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((epoch, split, metric, value))
        if self.path:
            with open(self.path, "a") as f:
                f.write(f"{epoch},{split},{metric},{value:.6g}\n")


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / max(1, total_steps)))
    frac = step / max(1, total_steps)
    return cfg.lr * (0.1 ** ((frac >= 0.5) + (frac >= 0.75)))


def evaluate_classifier(model: BaseModel, images_nhwc: np.ndarray,
                        labels: np.ndarray, batch_size: int = 512) -> float:
    correct = 0
    done = 0
    for xb in eval_batches(images_nhwc, batch_size):
        logits, _ = model.forward(xb, train=False)
        preds = logits.argmax(axis=1)
        correct += int((preds == labels[done:done + len(preds)]).sum())
        done += len(preds)
    return correct / max(1, done)


def circular_error(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    d = np.abs(pred.astype(np.int64) - true.astype(np.int64)) % 360
    return np.minimum(d, 360 - d)


def evaluate_angle_head(base: BaseModel, head: AmrHead, images_nhwc: np.ndarray,
                        rng: np.random.Generator, batch_size: int = 512,
                        ) -> tuple[float, float]:
    """(exact-degree top-1, within-5-degrees) on freshly rotated copies."""
    keep = circular_mask(images_nhwc.shape[1], images_nhwc.shape[2])
    thetas = rng.integers(0, 360, size=len(images_nhwc))
    exact = 0
    close = 0
    for start in range(0, len(images_nhwc), batch_size):
        stop = min(start + batch_size, len(images_nhwc))
        rot = np.empty_like(images_nhwc[start:stop])
        for j in range(start, stop):
            rot[j - start] = rotate_array(images_nhwc[j], int(thetas[j]), 0.0)
        rot[:, ~keep] = 0.0
        xb = np.ascontiguousarray(rot.transpose(0, 3, 1, 2), dtype=np.float32)
        _, taps = base.forward(xb, train=False, want_taps=True)
        preds = head.forward(taps, train=False).argmax(axis=1)
        err = circular_error(preds, thetas[start:stop])
        exact += int((err == 0).sum())
        close += int((err <= 5).sum())
    n = len(images_nhwc)
    return exact / n, close / n


def train_base(train_ds: Dataset, cfg: TrainConfig, test_ds: Dataset | None = None,
               metrics: MetricsLog | None = None, verbose: bool = False) -> Checkpoint:
    """Train the base classifier in the upright or rotated regime."""
    if cfg.regime not in ("upright", "rotated"):
        raise ValueError("train_base handles the upright/rotated regimes only")
    metrics = metrics or MetricsLog()
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    base_cfg = BaseConfig(preset=cfg.preset, num_classes=train_ds.num_classes,
                          in_channels=train_ds.images.shape[3])
    model = build_base(base_cfg, init_rng)

    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    final_loss = float("nan")
    test_imgs = prepare_upright(test_ds) if test_ds is not None else None

    for epoch in range(cfg.epochs):
        losses = []
        for batch in batch_iter(train_ds, cfg.batch_size, data_rng, cfg.regime):
            logits, _ = model.forward(batch.images, train=True)
            loss, dlogits = nn.softmax_cross_entropy(logits, batch.labels)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            model.backward(dlogits)
            nn.sgd_step(model.params, _lr_at(cfg, step, total_steps),
                        cfg.momentum, cfg.weight_decay)
            losses.append(loss)
            step += 1
        final_loss = float(np.mean(losses))
        metrics.add(epoch, "train", "loss", final_loss)
        if test_imgs is not None:
            n = min(cfg.eval_subset, len(test_imgs)) if cfg.eval_subset else len(test_imgs)
            acc = evaluate_classifier(model, test_imgs[:n], test_ds.labels[:n])
            metrics.add(epoch, "test", "upright_acc", acc)
            if verbose:
                print(f"[train-base] epoch {epoch}: loss {final_loss:.4f} "
                      f"upright acc {acc:.4f}", flush=True)
        elif verbose:
            print(f"[train-base] epoch {epoch}: loss {final_loss:.4f}", flush=True)

    meta = {
        "epochs": cfg.epochs,
        "final_loss": final_loss,
        "seed": cfg.seed,
        "regime": cfg.regime,
        "input_size": int(train_ds.images.shape[1]),
        "norm_mean": [float(v) for v in (train_ds.mean if train_ds.mean is not None else [])],
        "norm_std": [float(v) for v in (train_ds.std if train_ds.std is not None else [])],
    }
    tensors = {name: t.data.copy() for name, t in model.params.items()}
    return Checkpoint(kind="base", base_config=base_cfg.to_dict(),
                      amr_config=None, meta=meta, tensors=tensors)


def train_amr(train_ds: Dataset, base_ckpt: Checkpoint, cfg: TrainConfig,
              test_ds: Dataset | None = None, metrics: MetricsLog | None = None,
              verbose: bool = False) -> Checkpoint:
    """Self-supervised angle training against a frozen base."""
    if cfg.regime != "amr":
        raise ValueError("train_amr requires regime='amr'")
    metrics = metrics or MetricsLog()
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng, eval_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    base = restore_base(base_ckpt)
    base.params.freeze()
    frozen_digest = params_digest(base.params)

    base_cfg = base.cfg
    c_amr = cfg.compress_width or default_compress_width(base_cfg.preset)
    amr_cfg = AmrConfig(compress_width=c_amr, gates=cfg.gates)
    head = build_amr_head(base_cfg, amr_cfg, init_rng)

    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    final_loss = float("nan")
    eval_imgs = None
    if test_ds is not None:
        n = min(cfg.eval_subset, len(test_ds)) if cfg.eval_subset else len(test_ds)
        eval_imgs = test_ds.images[:n]

    for epoch in range(cfg.epochs):
        losses = []
        for batch in batch_iter(train_ds, cfg.batch_size, data_rng, "angle"):
            _, taps = base.forward(batch.images, train=False, want_taps=True)
            logits = head.forward(taps, train=True)
            loss, dlogits = nn.softmax_cross_entropy(logits, batch.angles)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            head.backward(dlogits)
            nn.sgd_step(head.params, _lr_at(cfg, step, total_steps),
                        cfg.momentum, cfg.weight_decay)
            losses.append(loss)
            step += 1
        final_loss = float(np.mean(losses))
        metrics.add(epoch, "train", "angle_loss", final_loss)
        if eval_imgs is not None:
            top1, within5 = evaluate_angle_head(
                base, head, eval_imgs, np.random.default_rng(eval_rng.integers(2**32))
            )
            metrics.add(epoch, "test", "angle_top1", top1)
            metrics.add(epoch, "test", "angle_within5", within5)
            if verbose:
                print(f"[train-amr] epoch {epoch}: loss {final_loss:.4f} "
                      f"top1 {top1:.4f} within5 {within5:.4f}", flush=True)
        elif verbose:
            print(f"[train-amr] epoch {epoch}: loss {final_loss:.4f}", flush=True)

    if params_digest(base.params) != frozen_digest:
        raise RuntimeError("frozen base parameters changed during angle training")

    meta = {
        "epochs": cfg.epochs,
        "final_loss": final_loss,
        "seed": cfg.seed,
        "regime": "amr",
        "norm_mean": base_ckpt.meta.get("norm_mean", []),
        "norm_std": base_ckpt.meta.get("norm_std", []),
    }
    tensors = {name: t.data.copy() for name, t in head.params.items()}
    return Checkpoint(kind="amr", base_config=base_cfg.to_dict(),
                      amr_config=amr_cfg.to_dict(), meta=meta, tensors=tensors)
