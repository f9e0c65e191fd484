"""Epoch selection from the confidence curve and (K, t) selection by REI sensitivity."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .byol import EncoderModel, TrainingLog
from .cluster_rei import ClusterModel, kmeans_fit, rei_from_confidences
from .errors import DataError, EmptyGroup, PlasticSpreadZero, ShortLog
from .peak_extract import PatchDataset


class AllNegative(DataError):
    """No (K, t) cell separates the plastic group from the elastic group."""


def rei_sensitivity(rei_elastic: Sequence[float], rei_plastic: Sequence[float]) -> float:
    """``(min plastic - max elastic) / (max plastic - min plastic)``; negative means no separation."""
    if len(rei_elastic) == 0 or len(rei_plastic) == 0:
        raise EmptyGroup("both REI groups must be non-empty")
    if len(rei_plastic) < 2:
        raise EmptyGroup("the plastic group needs >= 2 volumes to define a spread")
    lo, hi = min(rei_plastic), max(rei_plastic)
    spread = hi - lo
    if spread == 0:
        raise PlasticSpreadZero("plastic REI spread is zero")
    return (lo - max(rei_elastic)) / spread


@dataclass
class SensitivityGrid:
    k_values: list[int]
    t_values: list[float]
    cells: np.ndarray  # (len(k_values), len(t_values)); NaN where undefined
    best_k: int
    best_t: float
    best_value: float
    all_negative: bool = False
    groups: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["K", "t", "rei_sensitivity"])
        for i, k in enumerate(self.k_values):
            for j, t in enumerate(self.t_values):
                v = self.cells[i, j]
                writer.writerow([k, repr(float(t)), "" if np.isnan(v) else repr(float(v))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "K": list(self.k_values),
            "t": [float(t) for t in self.t_values],
            "best_K": self.best_k,
            "best_t": float(self.best_t),
            "best_rei_sensitivity": float(self.best_value),
            "all_negative": self.all_negative,
            "groups": self.groups,
        }

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        Path(csv_path).write_text(self.to_csv(), encoding="utf-8")
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def grid_argmax(cells: np.ndarray) -> tuple[int, int]:
    """Index of the largest finite cell; ties go to the smaller K, then the smaller t."""
    best, where = -np.inf, None
    for i in range(cells.shape[0]):
        for j in range(cells.shape[1]):
            v = cells[i, j]
            if np.isfinite(v) and v > best:
                best, where = v, (i, j)
    if where is None:
        raise EmptyGroup("no grid cell has a defined REI sensitivity")
    return where


def tune_grid(encoder: EncoderModel, reference: PatchDataset, elastic: Sequence[PatchDataset],
              plastic: Sequence[PatchDataset], k_values: Sequence[int], t_values: Sequence[float],
              seed: int = 0) -> SensitivityGrid:
    """Evaluate REI sensitivity over every (K, t).

    K-means is fit once per K; t only re-thresholds the cached confidences.
    """
    if len(elastic) < 2 or len(plastic) < 2:
        raise EmptyGroup("tuning needs >= 2 elastic and >= 2 plastic datasets")
    ref_emb = encoder.embed(reference.patches)
    el_emb = [encoder.embed(d.patches) for d in elastic]
    pl_emb = [encoder.embed(d.patches) for d in plastic]
    checksum = encoder.checksum()
    cells = np.full((len(k_values), len(t_values)), np.nan)
    for i, k in enumerate(k_values):
        centers = kmeans_fit(ref_emb, int(k), np.random.default_rng([seed, 3]))
        model = ClusterModel(centers, 0.0, reference.dataset_id, checksum)
        el_conf = [model.confidences(e) for e in el_emb]
        pl_conf = [model.confidences(e) for e in pl_emb]
        for j, t in enumerate(t_values):
            rei_el = [rei_from_confidences(c, t)[1] for c in el_conf]
            rei_pl = [rei_from_confidences(c, t)[1] for c in pl_conf]
            try:
                cells[i, j] = rei_sensitivity(rei_el, rei_pl)
            except PlasticSpreadZero:
                cells[i, j] = np.nan
    bi, bj = grid_argmax(cells)
    return SensitivityGrid(
        [int(k) for k in k_values], [float(t) for t in t_values], cells,
        int(k_values[bi]), float(t_values[bj]), float(cells[bi, bj]),
        all_negative=not bool(np.any(cells[np.isfinite(cells)] > 0)),
        groups={"reference": reference.dataset_id,
                "elastic": [d.dataset_id for d in elastic],
                "plastic": [d.dataset_id for d in plastic]},
    )


def require_positive(grid: SensitivityGrid) -> SensitivityGrid:
    if grid.all_negative:
        raise AllNegative("no (K, t) cell detects the onset: every REI sensitivity is <= 0")
    return grid


# -- epoch selection -----------------------------------------------------

def plateau_reached(curve: Sequence[float], window: int = 20, frac: float = 0.05) -> bool:
    """True when the trailing ``window`` values move less than ``frac`` of the curve's total rise."""
    if len(curve) < window:
        return False
    return _plateau_epoch(np.asarray(curve, dtype=float), window, frac, last_only=True) is not None


def _plateau_epoch(c: np.ndarray, window: int, frac: float, last_only: bool = False):
    rise = float(c.max() - c.min())
    start = len(c) if last_only else window
    for e in range(start, len(c) + 1):
        tail = c[e - window:e]
        if float(tail.max() - tail.min()) <= frac * rise:
            return e
    return None


def select_epochs(log: TrainingLog | Sequence[float], plateau_window: int = 20,
                  plateau_frac: float = 0.05) -> int:
    """First epoch whose trailing window has settled; the last epoch if none has."""
    curve = np.asarray(log.confidence if isinstance(log, TrainingLog) else log, dtype=float)
    if len(curve) < plateau_window:
        raise ShortLog(f"need >= {plateau_window} epochs, log has {len(curve)}")
    epoch = _plateau_epoch(curve, plateau_window, plateau_frac)
    return int(epoch) if epoch is not None else len(curve)
