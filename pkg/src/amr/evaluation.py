"""Per-angle accuracy sweeps, mixed-prevalence breakpoints, tap ablation,
and report emission (CSV + polar SVG).

A sweep rotates the masked, normalized test set two degrees at a time
(0, 2, ..., 358), re-masks, and runs a full evaluation per angle. Methods
are plain callables mapping an NCHW batch to predicted labels, so the same
machinery serves the bare classifier and the derotation pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, eval_batches
from .geometry import mask_batch, rotate_batch
from .models import AmrHead, BaseModel, classify_with_amr
from .training import MetricsLog, TrainConfig, Checkpoint, train_amr, restore_amr

SWEEP_ANGLES = tuple(range(0, 360, 2))

ABLATION_MASKS = (
    ("stem", (1, 0, 0, 0, 0)),
    ("stage1", (0, 1, 0, 0, 0)),
    ("stage2", (0, 0, 1, 0, 0)),
    ("stage3", (0, 0, 0, 1, 0)),
    ("stage4", (0, 0, 0, 0, 1)),
    ("stem+stage1", (1, 1, 0, 0, 0)),
    ("all", (1, 1, 1, 1, 1)),
)


@dataclass
class AngleRow:
    angle: int
    top1: float
    n_correct: int
    n_total: int


@dataclass
class SweepResult:
    method: str
    rows: list[AngleRow] = field(default_factory=list)
    upright_ref: float | None = None
    seed: int | None = None

    @property
    def mean_top1(self) -> float:
        return float(np.mean([r.top1 for r in self.rows]))

    @property
    def per_angle(self) -> np.ndarray:
        return np.array([r.top1 for r in self.rows])

    def top1_at(self, angle: int) -> float:
        for r in self.rows:
            if r.angle == angle:
                return r.top1
        raise KeyError(f"no row at angle {angle}")


def base_classifier(model: BaseModel) -> Callable[[np.ndarray], np.ndarray]:
    def classify(x: np.ndarray) -> np.ndarray:
        logits, _ = model.forward(x, train=False)
        return logits.argmax(axis=1)

    return classify


def amr_classifier(base: BaseModel, head: AmrHead) -> Callable[[np.ndarray], np.ndarray]:
    def classify(x: np.ndarray) -> np.ndarray:
        return classify_with_amr(base, head, x)

    return classify


def eval_at_angle(classify: Callable[[np.ndarray], np.ndarray],
                  images_nhwc: np.ndarray, labels: np.ndarray, angle: int,
                  batch_size: int = 512) -> tuple[float, int, int]:
    """Accuracy of `classify` on the test images rotated by `angle` degrees.

    Input images are expected masked and normalized; the rotated copies are
    re-masked so the fill region stays exact.
    """
    if len(images_nhwc) == 0:
        raise ValueError("empty test set")
    rotated = mask_batch(rotate_batch(images_nhwc, angle, 0.0), 0.0)
    correct = 0
    done = 0
    for xb in eval_batches(rotated, batch_size):
        preds = classify(xb)
        correct += int((preds == labels[done:done + len(preds)]).sum())
        done += len(preds)
    return correct / done, correct, done


def angle_sweep(classify: Callable[[np.ndarray], np.ndarray],
                images_nhwc: np.ndarray, labels: np.ndarray,
                method: str = "", angles: Sequence[int] = SWEEP_ANGLES,
                seed: int | None = None, batch_size: int = 512,
                progress: Callable[[int, float], None] | None = None) -> SweepResult:
    result = SweepResult(method=method, seed=seed)
    for angle in sorted(angles):
        top1, n_correct, n_total = eval_at_angle(
            classify, images_nhwc, labels, angle, batch_size
        )
        result.rows.append(AngleRow(angle, top1, n_correct, n_total))
        if progress is not None:
            progress(angle, top1)
    return result


def pct_ceiling(rot_mean: float, up_ceiling: float) -> float:
    if up_ceiling <= 0:
        raise ValueError("ceiling accuracy must be positive")
    return rot_mean / up_ceiling


def mixed_accuracy(up: float, rot: float, p: float) -> float:
    """Accuracy on a test mix with share `p` of rotated data."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"rotated share must be in [0, 1], got {p}")
    return (1.0 - p) * up + p * rot


@dataclass
class BreakpointInput:
    up_base: float
    rot_base: float
    up_alt: float
    rot_alt: float

    def __post_init__(self):
        vals = (self.up_base, self.rot_base, self.up_alt, self.rot_alt)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"breakpoint inputs must be finite, got {vals}")


def breakpoint_share(inp: BreakpointInput) -> float | None:
    """Smallest rotated-data share at which the alternative method wins.

    Returns 0 when the alternative is at least as good on upright data,
    None when it never catches up, else the parity share of the two linear
    mixes.
    """
    if inp.up_alt >= inp.up_base:
        return 0.0
    if inp.rot_alt <= inp.rot_base:
        return None
    gap_up = inp.up_base - inp.up_alt
    gap_rot = inp.rot_alt - inp.rot_base
    return gap_up / (gap_up + gap_rot)


def ablation_suite(train_ds: Dataset, test_ds: Dataset, base_ckpt: Checkpoint,
                   budget: TrainConfig, eval_size: int = 2000,
                   masks=ABLATION_MASKS, verbose: bool = False):
    """Train one angle head per gate mask at equal budget.

    Returns (table, curves): the table holds (mask name, final exact-degree
    angle top-1) and curves the per-epoch top-1 trajectory of each mask.
    All heads share the training seed and the rotated evaluation set.
    """
    from dataclasses import replace

    from .training import evaluate_angle_head, restore_base

    table = []
    curves = []
    for name, gates in masks:
        cfg = replace(budget, regime="amr", gates=tuple(bool(g) for g in gates))
        log = MetricsLog()
        ckpt = train_amr(train_ds, base_ckpt, cfg,
                         test_ds=test_ds.subset(eval_size), metrics=log)
        top1_by_epoch = [v for (_, _, m, v) in log.rows if m == "angle_top1"]
        for epoch, v in enumerate(top1_by_epoch):
            curves.append((name, epoch, v))
        final = top1_by_epoch[-1]
        table.append((name, final))
        if verbose:
            print(f"[ablate] {name}: angle top-1 {final:.4f}", flush=True)
    return table, curves


def emit_sweep_csv(result: SweepResult, path) -> None:
    """One metadata comment line, then angle_deg,top1,n_correct,n_total rows."""
    lines = [
        f"# method={result.method} seed={result.seed} "
        f"columns=angle_deg,top1,n_correct,n_total"
    ]
    for r in result.rows:
        lines.append(f"{r.angle},{r.top1:.6g},{r.n_correct},{r.n_total}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


_SVG_COLORS = ("#e6842a", "#2a7ab9", "#3c9d4e", "#8e44ad", "#c0392b", "#7f8c8d")


def emit_polar_svg(results: Sequence[SweepResult], path, size: int = 640) -> None:
    """Polar accuracy plot: radius is top-1, angle runs clockwise from top."""
    cx = cy = size / 2
    radius = size * 0.40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for frac in (0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<circle cx="{cx}" cy="{cy}" r="{radius * frac:.2f}" fill="none" '
            f'stroke="{"#888" if frac == 1.0 else "#ddd"}" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{cx + 4:.2f}" y="{cy - radius * frac + 12:.2f}" '
            f'font-size="11" fill="#666">{frac:.2f}</text>'
        )
    for i, res in enumerate(results):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = []
        for r in res.rows:
            rad = np.deg2rad(r.angle)
            x = cx + radius * r.top1 * np.sin(rad)
            y = cy - radius * r.top1 * np.cos(rad)
            pts.append(f"{x:.2f},{y:.2f}")
        parts.append(
            f'<polygon points="{" ".join(pts)}" fill="none" stroke="{color}" '
            f'stroke-width="2"/>'
        )
        parts.append(
            f'<text x="12" y="{20 + 18 * i}" font-size="13" fill="{color}">'
            f"{_xml_escape(res.method)}</text>"
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def _xml_escape(s: str) -> str:
    return (
        s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )
