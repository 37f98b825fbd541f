"""Masked multi-task loss and sector-aware evaluation metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import SectorGrid, split_prediction
from .nn import Tensor

BCE_EPS = 1e-7
THRESHOLD = 0.5


@dataclass(frozen=True)
class LossWeights:
    delta: float = 0.2  # coarse detection
    alpha: float = 0.2  # fine detection
    beta: float = 0.5  # azimuth
    gamma: float = 0.3  # elevation

    def __post_init__(self):
        if min(self.delta, self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def bce(p, y) -> Tensor:
    """Elementwise binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=float))
    y = np.asarray(y, dtype=p.dtype)
    pc = nn.clip(p, BCE_EPS, 1 - BCE_EPS)
    return -(y * nn.log(pc) + (1.0 - y) * nn.log(1.0 - pc))


def masked_mae(pred, target, mask):
    """Per-sector masked MAE over the batch axis.

    Returns ``(per_sector (M, N), total)`` where each sector's sum of masked
    absolute errors is divided by its number of active entries; sectors with
    no active entry contribute 0.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=float))
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    if not (pred.shape == target.shape == mask.shape):
        raise nn.ShapeMismatch(f"masked_mae: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = mask.sum(axis=0)
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0).astype(pred.dtype)
    per_sector = nn.sum_(nn.abs_(pred - target) * mask, axis=0) * inv
    return per_sector, per_sector.sum()


def _plain_mae(pred: Tensor, target):
    per_sector = nn.mean(nn.abs_(pred - np.asarray(target, dtype=pred.dtype)), axis=0)
    return per_sector, per_sector.sum()


@dataclass
class LossTerms:
    total: Tensor
    coarse: float
    det: float
    azi: float
    ele: float


def total_loss(pred: Tensor, target, weights: LossWeights | None = None, variant: str = "full") -> LossTerms:
    """Weighted multi-task loss over a batch.

    ``pred`` is ``(B, M, 3N+1)``; ``target`` the same layout (see
    ``TargetGrid.to_array``), with its fine detection flags used as the mask.
    """
    weights = weights or LossWeights()
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise nn.ShapeMismatch(f"total_loss: pred {pred.shape} vs target {target.shape}")
    t_coarse, t_det, t_azi, t_ele = split_prediction(target)
    p_coarse = pred[..., 0]
    p_det, p_azi, p_ele = pred[..., 1::3], pred[..., 2::3], pred[..., 3::3]

    l_det = nn.mean(bce(p_det, t_det), axis=0).sum()
    if variant == "regular_loss":
        _, l_azi = _plain_mae(p_azi, t_azi)
        _, l_ele = _plain_mae(p_ele, t_ele)
    else:
        _, l_azi = masked_mae(p_azi, t_azi, t_det)
        _, l_ele = masked_mae(p_ele, t_ele, t_det)
    total = weights.alpha * l_det + weights.beta * l_azi + weights.gamma * l_ele
    l_coarse = None
    if variant not in ("no_coarse", "non_hierarchical"):
        l_coarse = nn.mean(bce(p_coarse, t_coarse), axis=0).sum()
        total = total + weights.delta * l_coarse
    return LossTerms(
        total=total,
        coarse=float(l_coarse.data) if l_coarse is not None else 0.0,
        det=float(l_det.data),
        azi=float(l_azi.data),
        ele=float(l_ele.data),
    )


# -- metrics ---------------------------------------------------------------------------------


def _angles_deg(grid: SectorGrid, u_azi: np.ndarray, u_ele: np.ndarray):
    m, n = grid.m_azimuth, grid.n_elevation
    azi_lo = (np.arange(m) * grid.azimuth_width)[:, None]
    ele_lo = (grid.elevation_min_deg + np.arange(n) * grid.elevation_width)[None, :]
    return azi_lo + u_azi * grid.azimuth_width, ele_lo + u_ele * grid.elevation_width


@dataclass
class MetricAccumulator:
    """Partial confusion counts and angular-error sums; ``merge`` is associative."""

    grid: SectorGrid = field(default_factory=SectorGrid)
    threshold: float = THRESHOLD
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    azi_err: float = 0.0
    ele_err: float = 0.0
    n_valid: int = 0

    def add(self, pred, target):
        pred = np.asarray(pred, dtype=float).reshape((-1,) + self.grid.output_shape)
        target = np.asarray(target, dtype=float).reshape((-1,) + self.grid.output_shape)
        _, p_det, p_azi, p_ele = split_prediction(pred)
        _, t_det, t_azi, t_ele = split_prediction(target)
        hat = p_det >= self.threshold
        truth = t_det >= 0.5
        self.tp += int(np.sum(hat & truth))
        self.fp += int(np.sum(hat & ~truth))
        self.fn += int(np.sum(~hat & truth))
        self.tn += int(np.sum(~hat & ~truth))
        pa, pe = _angles_deg(self.grid, p_azi, p_ele)
        ta, te = _angles_deg(self.grid, t_azi, t_ele)
        valid = hat & truth
        self.azi_err += float(np.sum(np.abs(pa - ta)[valid]))
        self.ele_err += float(np.sum(np.abs(pe - te)[valid]))
        self.n_valid += int(np.sum(valid))
        return self

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        out = MetricAccumulator(self.grid, self.threshold)
        for k in ("tp", "fp", "fn", "tn", "azi_err", "ele_err", "n_valid"):
            setattr(out, k, getattr(self, k) + getattr(other, k))
        return out

    def report(self) -> "MetricReport":
        total = self.tp + self.fp + self.fn + self.tn
        acc = (self.tp + self.tn) / total if total else math.nan
        prec = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        rec = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        if self.n_valid:
            az, el = self.azi_err / self.n_valid, self.ele_err / self.n_valid
        else:
            az = el = math.nan
        return MetricReport(acc, f1, az, el, az + el, self.n_valid)


@dataclass(frozen=True)
class MetricReport:
    detection_accuracy: float
    f1: float
    azimuth_dae_deg: float  # NaN when n_valid == 0
    elevation_dae_deg: float
    combined_dae_deg: float
    n_valid: int

    FIELDS = ("detection_accuracy", "f1", "azimuth_dae_deg", "elevation_dae_deg", "combined_dae_deg", "n_valid")


def detection_metrics(pred, target, threshold: float = THRESHOLD, grid: SectorGrid | None = None):
    """``(accuracy, f1)`` over the fine detection slots."""
    grid = grid or _grid_for(pred)
    r = MetricAccumulator(grid, threshold).add(pred, target).report()
    return r.detection_accuracy, r.f1


def dae(pred, target, threshold: float = THRESHOLD, grid: SectorGrid | None = None):
    """``(azimuth, elevation, combined, n_valid)``; angles are NaN when nothing is valid."""
    grid = grid or _grid_for(pred)
    r = MetricAccumulator(grid, threshold).add(pred, target).report()
    return r.azimuth_dae_deg, r.elevation_dae_deg, r.combined_dae_deg, r.n_valid


def evaluate(pred, target, grid: SectorGrid | None = None, threshold: float = THRESHOLD) -> MetricReport:
    grid = grid or _grid_for(pred)
    return MetricAccumulator(grid, threshold).add(pred, target).report()


def _grid_for(pred) -> SectorGrid:
    m, w = np.asarray(pred).shape[-2:]
    return SectorGrid(m, (w - 1) // 3)


# -- report rendering -------------------------------------------------------------------------

_LABELS = {
    "detection_accuracy": "Detection accuracy (%)",
    "f1": "Detection F1 (%)",
    "azimuth_dae_deg": "Azimuth DAE (deg)",
    "elevation_dae_deg": "Elevation DAE (deg)",
    "combined_dae_deg": "Combined DAE (deg)",
}


def _fmt(key, v):
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    return f"{100 * v:.2f}" if key in ("detection_accuracy", "f1") else f"{v:.2f}"


def cell_average(reports) -> MetricReport:
    """Mean of each metric over cells (NaN cells skipped), as in a table's average column."""
    vals = {}
    for k in MetricReport.FIELDS[:-1]:
        xs = [getattr(r, k) for r in reports if not math.isnan(getattr(r, k))]
        vals[k] = float(np.mean(xs)) if xs else math.nan
    return MetricReport(**vals, n_valid=sum(r.n_valid for r in reports))


def format_table(cells: dict, kinds) -> str:
    """Text table: one row per metric, one column per (talkers, snr) cell, values 'seen / unseen'."""
    keys = sorted(cells, key=lambda c: (c[0], -c[1]))
    header = ["Metric"] + [f"{t}-talker {snr:g} dB" for t, snr in keys] + ["Avg."]
    rows = []
    for metric, label in _LABELS.items():
        row = [label]
        for key in keys:
            row.append(" / ".join(_fmt(metric, getattr(cells[key][k], metric)) if k in cells[key] else "-" for k in kinds))
        avg = cell_average([cells[key][k] for key in keys for k in kinds if k in cells[key]])
        row.append(_fmt(metric, getattr(avg, metric)))
        rows.append(row)
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    lines.append(f"(values per cell: {' / '.join(kinds)})")
    return "\n".join(lines) + "\n"


def format_csv(cells: dict, kinds) -> str:
    """One row per (talkers, snr) cell plus a final average row."""
    keys = sorted(cells, key=lambda c: (c[0], -c[1]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["talkers", "snr_db"] + [f"{f}_{k}" for k in kinds for f in MetricReport.FIELDS])

    def vals(r):
        return [repr(float(getattr(r, f))) if f != "n_valid" else str(r.n_valid) for f in MetricReport.FIELDS]

    empty = [""] * len(MetricReport.FIELDS)
    for key in keys:
        row = [str(key[0]), f"{key[1]:g}"]
        for k in kinds:
            row += vals(cells[key][k]) if k in cells[key] else empty
        w.writerow(row)
    avg_row = ["avg", ""]
    for k in kinds:
        rs = [cells[key][k] for key in keys if k in cells[key]]
        avg_row += vals(cell_average(rs)) if rs else empty
    w.writerow(avg_row)
    return buf.getvalue()
