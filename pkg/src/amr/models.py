"""Base classifier with feature taps, and the add-on angle-prediction head.

The base network is a standard ResNet-18 layout (full-width with the
ImageNet-style stem, or a slim variant for 28x28 inputs). During a forward
pass, feature maps can be copied out at five fixed depths: after the stem
and after each of the four stages. The angle head consumes those taps:
each is compressed by a 1x1 conv, stacked onto the running feature map,
re-compressed to half depth, and passed through one residual block whose
stride mirrors the base network's downsampling at that depth. A global
average pool and a 360-way linear layer produce one logit per integer
degree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import mask_batch, rotate_batch
from .layers import (
    BasicBlock,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
)
from .nn import ParamSet

NUM_ANGLES = 360

GATE_NAMES = ("stem", "stage1", "stage2", "stage3", "stage4")

_PRESETS = {
    "resnet18": dict(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), stem="imagenet"),
    "resnet18-slim": dict(widths=(16, 32, 64, 128), blocks=(2, 2, 2, 2), stem="small"),
}


@dataclass
class BaseConfig:
    preset: str = "resnet18-slim"
    num_classes: int = 10
    in_channels: int = 1
    widths: tuple[int, ...] = ()
    blocks: tuple[int, ...] = ()
    stem: str = ""

    def __post_init__(self):
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(_PRESETS)}")
        p = _PRESETS[self.preset]
        self.widths = tuple(self.widths) or p["widths"]
        self.blocks = tuple(self.blocks) or p["blocks"]
        self.stem = self.stem or p["stem"]
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ValueError("expected exactly four stages")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return (self.widths[0],) + tuple(self.widths)

    @property
    def stage_strides(self) -> tuple[int, ...]:
        return (1, 2, 2, 2)

    @property
    def tap_stride_ratios(self) -> tuple[int, ...]:
        """Spatial ratio between tap i and tap i+1 (last tap has no successor)."""
        return tuple(self.stage_strides) + (1,)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "blocks": list(self.blocks),
            "stem": self.stem,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaseConfig":
        return cls(
            preset=d["preset"],
            num_classes=d["num_classes"],
            in_channels=d["in_channels"],
            widths=tuple(d["widths"]),
            blocks=tuple(d["blocks"]),
            stem=d["stem"],
        )


@dataclass
class AmrConfig:
    compress_width: int = 32
    gates: tuple[bool, ...] = (True,) * 5

    def __post_init__(self):
        self.gates = tuple(bool(g) for g in self.gates)
        if len(self.gates) != 5:
            raise ValueError("gates must have five entries (stem, stage1..stage4)")
        if not any(self.gates):
            raise ValueError("at least one tap gate must be open")
        if self.compress_width < 1:
            raise ValueError("compress_width must be positive")

    def to_dict(self) -> dict:
        return {"compress_width": self.compress_width, "gates": list(self.gates)}

    @classmethod
    def from_dict(cls, d: dict) -> "AmrConfig":
        return cls(compress_width=d["compress_width"], gates=tuple(d["gates"]))


def default_compress_width(preset: str) -> int:
    return 64 if preset == "resnet18" else 32


@dataclass
class TapBundle:
    """The five feature maps copied out of one base forward pass."""

    tensors: list[np.ndarray] = field(default_factory=list)

    @property
    def spatial(self) -> tuple[int, ...]:
        return tuple(t.shape[2] for t in self.tensors)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(t.shape[1] for t in self.tensors)


class BaseModel:
    """ResNet-style classifier exposing stem/stage taps."""

    def __init__(self, cfg: BaseConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParamSet()
        w = cfg.widths
        if cfg.stem == "imagenet":
            self.stem = Sequential(
                Conv2d(self.params, "stem.conv", cfg.in_channels, w[0], 7,
                       stride=2, padding=3, rng=rng),
                BatchNorm2d(self.params, "stem.bn", w[0]),
                ReLU(),
                MaxPool2d(3, 2, padding=1),
            )
        else:
            self.stem = Sequential(
                Conv2d(self.params, "stem.conv", cfg.in_channels, w[0], 3,
                       stride=1, padding=1, rng=rng),
                BatchNorm2d(self.params, "stem.bn", w[0]),
                ReLU(),
            )
        self.stages = []
        in_ch = w[0]
        for si, (width, n_blocks, stride) in enumerate(
            zip(w, cfg.blocks, cfg.stage_strides), start=1
        ):
            blocks = []
            for bi in range(n_blocks):
                blocks.append(
                    BasicBlock(self.params, f"stage{si}.block{bi}", in_ch, width,
                               stride=stride if bi == 0 else 1, rng=rng)
                )
                in_ch = width
            self.stages.append(Sequential(*blocks))
        self.pool = GlobalAvgPool()
        self.fc = Linear(self.params, "fc", w[3], cfg.num_classes, rng=rng)

    def forward(self, x: np.ndarray, train: bool = False,
                want_taps: bool = False) -> tuple[np.ndarray, TapBundle | None]:
        taps = TapBundle() if want_taps else None
        h = self.stem.forward(x, train)
        if want_taps:
            taps.tensors.append(h)
        for stage in self.stages:
            h = stage.forward(h, train)
            if want_taps:
                taps.tensors.append(h)
        logits = self.fc.forward(self.pool.forward(h, train), train)
        return logits, taps

    def backward(self, dlogits: np.ndarray) -> None:
        dy = self.pool.backward(self.fc.backward(dlogits))
        for stage in reversed(self.stages):
            dy = stage.backward(dy)
        self.stem.backward(dy)


class AmrHead:
    """Angle-prediction head chained over the open base taps."""

    def __init__(self, base_cfg: BaseConfig, amr_cfg: AmrConfig, rng: np.random.Generator):
        self.base_cfg = base_cfg
        self.cfg = amr_cfg
        self.params = ParamSet()
        c_amr = amr_cfg.compress_width
        open_taps = [i for i, g in enumerate(amr_cfg.gates) if g]
        ratios = base_cfg.tap_stride_ratios
        tap_ch = base_cfg.tap_channels

        # Relative spatial scale of each tap w.r.t. the stem tap.
        tap_scale = [1]
        for r in ratios[:4]:
            tap_scale.append(tap_scale[-1] * r)

        self.stages = []  # (tap_index, compress, halve|None, block)
        ch = None
        scale = None
        for i in open_taps:
            compress = Conv2d(self.params, f"tap{i}.compress", tap_ch[i], c_amr, 1,
                              bias=True, rng=rng)
            if ch is None:
                halve = None
                ch = c_amr
            else:
                if scale != tap_scale[i]:
                    raise ValueError(
                        f"gate chain cannot bridge tap resolutions: running scale "
                        f"{scale} vs tap{i} scale {tap_scale[i]} (open gates must "
                        f"be contiguous or resolution-matched)"
                    )
                stacked = c_amr + ch
                ch = (stacked + 1) // 2
                ch += ch % 2  # half the stack depth, rounded up to even
                halve = Conv2d(self.params, f"tap{i}.halve", stacked, ch, 1,
                               bias=True, rng=rng)
            block = BasicBlock(self.params, f"tap{i}.block", ch, ch,
                               stride=ratios[i], rng=rng)
            scale = tap_scale[i] * ratios[i] if scale is None else scale * ratios[i]
            self.stages.append((i, compress, halve, block))
        self.pool = GlobalAvgPool()
        self.fc = Linear(self.params, "angle_fc", ch, NUM_ANGLES, rng=rng)
        self._concat_split = []

    def forward(self, taps: TapBundle, train: bool = False) -> np.ndarray:
        z = None
        self._concat_split = []
        for i, compress, halve, block in self.stages:
            c = compress.forward(taps.tensors[i], train)
            if halve is None:
                h = c
            else:
                if c.shape[2:] != z.shape[2:]:
                    raise ValueError(
                        f"tap{i} spatial {c.shape[2:]} does not match running "
                        f"feature map {z.shape[2:]}"
                    )
                stacked = np.concatenate([c, z], axis=1)
                self._concat_split.append(c.shape[1])
                h = halve.forward(stacked, train)
            z = block.forward(h, train)
        return self.fc.forward(self.pool.forward(z, train), train)

    def backward(self, dlogits: np.ndarray) -> None:
        """Backprop through the head only; tap gradients are discarded."""
        dz = self.pool.backward(self.fc.backward(dlogits))
        splits = list(self._concat_split)
        for i, compress, halve, block in reversed(self.stages):
            dh = block.backward(dz)
            if halve is None:
                compress.backward(dh)
                return
            dstacked = halve.backward(dh)
            c_width = splits.pop()
            compress.backward(dstacked[:, :c_width])
            dz = np.ascontiguousarray(dstacked[:, c_width:])


def build_base(cfg: BaseConfig, rng: np.random.Generator | int) -> BaseModel:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return BaseModel(cfg, rng)


def forward_base(model: BaseModel, x: np.ndarray,
                 want_taps: bool = False) -> tuple[np.ndarray, TapBundle | None]:
    """Eval-mode base forward; taps are read-only copies of internals."""
    return model.forward(x, train=False, want_taps=want_taps)


def build_amr_head(base_cfg: BaseConfig, amr_cfg: AmrConfig,
                   rng: np.random.Generator | int) -> AmrHead:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return AmrHead(base_cfg, amr_cfg, rng)


def predict_angle(base: BaseModel, head: AmrHead,
                  x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """360-way angle logits and their argmax (ties to the lowest degree)."""
    if head.base_cfg.to_dict() != base.cfg.to_dict():
        raise ValueError("angle head was built against a different base configuration")
    _, taps = base.forward(x, train=False, want_taps=True)
    logits = head.forward(taps, train=False)
    return logits, logits.argmax(axis=1)


def classify_with_amr(base: BaseModel, head: AmrHead, x: np.ndarray,
                      fill: float = 0.0) -> np.ndarray:
    """Three-step inference: predict angle, derotate, re-classify.

    The final classification is a plain base forward on the corrected
    input, identical to angle-free inference on that image.
    """
    _, angles = predict_angle(base, head, x)
    nhwc = x.transpose(0, 2, 3, 1)
    corrected = np.empty_like(nhwc)
    for theta in np.unique(angles):
        sel = angles == theta
        corrected[sel] = rotate_batch(nhwc[sel], int((360 - theta) % 360), fill)
    corrected = mask_batch(corrected, fill)
    logits, _ = base.forward(
        np.ascontiguousarray(corrected.transpose(0, 3, 1, 2)), train=False
    )
    return logits.argmax(axis=1)
