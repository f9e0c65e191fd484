"""Threshold, label and crop diffraction spots into normalized peak patches."""
from __future__ import annotations

import csv
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadFormat, ConfigInvalid, EmptyDataset, MissingFile, SizeMismatch
from .frame_store import Frame, ScanSet

_EIGHT = np.ones((3, 3), dtype=bool)
_SATURATED = 65535
PROVENANCE_FIELDS = ("frame_index", "omega", "centroid_row", "centroid_col", "raw_max", "area")


@dataclass
class ExtractionConfig:
    threshold: float | None = None  # absolute counts; None -> median + mad_k * MAD per frame
    mad_k: float = 5.0
    min_area: int = 4
    max_area: int = 2000
    patch_size: int = 15

    def validate(self) -> "ExtractionConfig":
        if self.threshold is not None and self.threshold < 0:
            raise ConfigInvalid("threshold", "must be >= 0")
        if self.patch_size < 5 or self.patch_size % 2 == 0:
            raise ConfigInvalid("patch_size", "must be odd and >= 5")
        if self.min_area < 1 or self.max_area < self.min_area:
            raise ConfigInvalid("min_area", "need 1 <= min_area <= max_area")
        if self.mad_k < 0:
            raise ConfigInvalid("mad_k", "must be >= 0")
        return self


@dataclass
class ComponentMask:
    label_map: np.ndarray
    n_components: int
    areas: np.ndarray
    bboxes: np.ndarray  # (n, 4): row0, col0, row1, col1 inclusive
    centroids: np.ndarray  # (n, 2) intensity-weighted (row, col)
    intensities: np.ndarray
    n_rejected: int = 0


@dataclass
class PeakPatch:
    pixels: np.ndarray
    frame_index: int
    omega: float
    centroid: tuple[float, float]
    raw_max: float
    component_area: int


@dataclass
class PatchDataset:
    """Patches of one dataset stacked as ``(N, P, P)`` float32 plus provenance columns."""

    patches: np.ndarray
    frame_index: np.ndarray
    omega: np.ndarray
    centroid: np.ndarray
    raw_max: np.ndarray
    area: np.ndarray
    dataset_id: str = ""
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def patch_size(self) -> int:
        return int(self.patches.shape[-1])

    def __getitem__(self, i: int) -> PeakPatch:
        return PeakPatch(self.patches[i], int(self.frame_index[i]), float(self.omega[i]),
                         (float(self.centroid[i, 0]), float(self.centroid[i, 1])),
                         float(self.raw_max[i]), int(self.area[i]))

    @classmethod
    def from_patches(cls, patches: list[PeakPatch], patch_size: int, dataset_id: str = "",
                     stats: dict | None = None) -> "PatchDataset":
        if patches:
            stack = np.stack([p.pixels for p in patches]).astype(np.float32)
        else:
            stack = np.zeros((0, patch_size, patch_size), dtype=np.float32)
        return cls(
            patches=stack,
            frame_index=np.array([p.frame_index for p in patches], dtype=np.int64),
            omega=np.array([p.omega for p in patches], dtype=np.float64),
            centroid=np.array([p.centroid for p in patches], dtype=np.float64).reshape(-1, 2),
            raw_max=np.array([p.raw_max for p in patches], dtype=np.float64),
            area=np.array([p.component_area for p in patches], dtype=np.int64),
            dataset_id=dataset_id,
            stats=dict(stats or {}),
        )

    def select(self, mask) -> "PatchDataset":
        return PatchDataset(self.patches[mask], self.frame_index[mask], self.omega[mask],
                            self.centroid[mask], self.raw_max[mask], self.area[mask],
                            self.dataset_id, dict(self.stats))


def robust_threshold(pixels: np.ndarray, mad_k: float = 5.0) -> float:
    med = float(np.median(pixels))
    mad = float(np.median(np.abs(pixels - med)))
    return med + mad_k * mad


def threshold_mask(frame: Frame | np.ndarray, threshold: float) -> np.ndarray:
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    return pixels > threshold


def connected_components(mask: np.ndarray, intensity: np.ndarray | None = None,
                         min_area: int = 1, max_area: int | None = None) -> ComponentMask:
    """8-connected labeling with area gating; labels of kept components are 1..n."""
    mask = np.asarray(mask, dtype=bool)
    labels, n_raw = ndimage.label(mask, structure=_EIGHT)
    if n_raw == 0:
        return ComponentMask(labels, 0, np.zeros(0, np.int64), np.zeros((0, 4), np.int64),
                             np.zeros((0, 2)), np.zeros(0))
    areas = np.bincount(labels.ravel(), minlength=n_raw + 1)[1:]
    keep = areas >= min_area
    if max_area is not None:
        keep &= areas <= max_area
    remap = np.zeros(n_raw + 1, dtype=np.int32)
    remap[1:][keep] = np.arange(1, int(keep.sum()) + 1)
    labels = remap[labels]
    n = int(keep.sum())
    if n == 0:
        return ComponentMask(labels, 0, np.zeros(0, np.int64), np.zeros((0, 4), np.int64),
                             np.zeros((0, 2)), np.zeros(0), n_rejected=n_raw)

    weights = np.ones(mask.shape) if intensity is None else np.asarray(intensity, dtype=np.float64)
    flat = labels.ravel()
    rows, cols = np.indices(mask.shape)
    w = weights.ravel()
    total = np.bincount(flat, weights=w, minlength=n + 1)[1:]
    r_sum = np.bincount(flat, weights=w * rows.ravel(), minlength=n + 1)[1:]
    c_sum = np.bincount(flat, weights=w * cols.ravel(), minlength=n + 1)[1:]
    # zero-weight components fall back to the geometric centroid
    count = np.bincount(flat, minlength=n + 1)[1:].astype(np.float64)
    safe = total > 0
    centroids = np.empty((n, 2))
    centroids[safe, 0] = r_sum[safe] / total[safe]
    centroids[safe, 1] = c_sum[safe] / total[safe]
    if not safe.all():
        gr = np.bincount(flat, weights=rows.ravel(), minlength=n + 1)[1:]
        gc = np.bincount(flat, weights=cols.ravel(), minlength=n + 1)[1:]
        centroids[~safe, 0] = gr[~safe] / count[~safe]
        centroids[~safe, 1] = gc[~safe] / count[~safe]
    slices = ndimage.find_objects(labels, max_label=n)
    bboxes = np.array([[s[0].start, s[1].start, s[0].stop - 1, s[1].stop - 1] for s in slices],
                      dtype=np.int64)
    # guard against round-off pushing a weighted mean past the box edge
    centroids = np.clip(centroids, bboxes[:, :2], bboxes[:, 2:])
    return ComponentMask(labels, n, count.astype(np.int64), bboxes, centroids, total,
                         n_rejected=n_raw - n)


def extract_patches(frame: Frame, comps: ComponentMask, patch_size: int = 15):
    """Crop one max-normalized window per component; returns (patches, border_discards)."""
    half = patch_size // 2
    h, w = frame.pixels.shape
    patches = []
    discarded = 0
    for k in range(comps.n_components):
        r = int(np.floor(comps.centroids[k, 0] + 0.5))
        c = int(np.floor(comps.centroids[k, 1] + 0.5))
        if r - half < 0 or c - half < 0 or r + half >= h or c + half >= w:
            discarded += 1
            continue
        window = frame.pixels[r - half:r + half + 1, c - half:c + half + 1].astype(np.float32)
        peak = float(window.max())
        if peak <= 0:
            discarded += 1
            continue
        patches.append(PeakPatch(window / peak, frame.index, frame.omega,
                                 (float(comps.centroids[k, 0]), float(comps.centroids[k, 1])),
                                 peak, int(comps.areas[k])))
    return patches, discarded


def _extract_frame(frame: Frame, cfg: ExtractionConfig):
    threshold = cfg.threshold
    if threshold is None:
        threshold = robust_threshold(frame.pixels, cfg.mad_k)
    mask = threshold_mask(frame, threshold)
    comps = connected_components(mask, frame.pixels, cfg.min_area, cfg.max_area)
    patches, discarded = extract_patches(frame, comps, cfg.patch_size)
    return patches, discarded, int(np.count_nonzero(frame.pixels >= _SATURATED))


def extract_frame(frame: Frame, cfg: ExtractionConfig | None = None) -> list[PeakPatch]:
    cfg = (cfg or ExtractionConfig()).validate()
    return _extract_frame(frame, cfg)[0]


def extract_frames(frames, cfg: ExtractionConfig, dataset_id: str = "",
                   workers: int = 1) -> PatchDataset:
    cfg.validate()
    frames = list(frames)
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda f: _extract_frame(f, cfg), frames))
    else:
        results = [_extract_frame(f, cfg) for f in frames]
    patches = [p for res in results for p in res[0]]
    elapsed = time.perf_counter() - t0
    stats = {
        "n_frames": len(frames),
        "border_discards": sum(r[1] for r in results),
        "saturated_pixels": sum(r[2] for r in results),
        "clamped_pixels": sum(f.n_clamped for f in frames),
        "extract_seconds": elapsed,
        "frames_per_second": len(frames) / elapsed if elapsed > 0 else float("inf"),
    }
    return PatchDataset.from_patches(patches, cfg.patch_size, dataset_id, stats)


def extract_dataset(scan: ScanSet, params: ExtractionConfig | None = None,
                    workers: int = 1) -> PatchDataset:
    """Extract every frame of ``scan`` in frame order."""
    cfg = (params or ExtractionConfig()).validate()
    t0 = time.perf_counter()
    frames = [scan.frame(i) for i in range(len(scan))]
    ds = extract_frames(frames, cfg, scan.scan_id, workers)
    elapsed = time.perf_counter() - t0
    ds.stats["extract_seconds"] = elapsed
    ds.stats["frames_per_second"] = len(frames) / elapsed if elapsed > 0 else float("inf")
    return ds


def require_nonempty(ds: PatchDataset) -> PatchDataset:
    if len(ds) == 0:
        raise EmptyDataset(f"dataset {ds.dataset_id!r} holds no patches")
    return ds


# -- persistence ---------------------------------------------------------

_HEADER = struct.Struct("<II")


def save_dataset(ds: PatchDataset, path: str | Path) -> Path:
    """Write ``<path>`` (header + f32 patches) and ``<path>.csv`` provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(len(ds), ds.patch_size))
        fh.write(np.ascontiguousarray(ds.patches, dtype="<f4").tobytes())
    with open(_sidecar(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROVENANCE_FIELDS)
        for i in range(len(ds)):
            writer.writerow([int(ds.frame_index[i]), repr(float(ds.omega[i])),
                             repr(float(ds.centroid[i, 0])), repr(float(ds.centroid[i, 1])),
                             repr(float(ds.raw_max[i])), int(ds.area[i])])
    return path


def load_dataset(path: str | Path, dataset_id: str | None = None) -> PatchDataset:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise BadFormat(f"{path}: truncated header")
    count, size = _HEADER.unpack_from(blob)
    expected = _HEADER.size + count * size * size * 4
    if len(blob) != expected:
        raise SizeMismatch(path, expected, len(blob))
    patches = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, size, size)
    sidecar = _sidecar(path)
    if not sidecar.is_file():
        raise MissingFile(sidecar)
    with open(sidecar, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != count:
        raise BadFormat(f"{sidecar}: {len(rows)} provenance rows for {count} patches")
    return PatchDataset(
        patches=patches.astype(np.float32),
        frame_index=np.array([int(r["frame_index"]) for r in rows], dtype=np.int64),
        omega=np.array([float(r["omega"]) for r in rows]),
        centroid=np.array([[float(r["centroid_row"]), float(r["centroid_col"])] for r in rows]).reshape(-1, 2),
        raw_max=np.array([float(r["raw_max"]) for r in rows]),
        area=np.array([int(r["area"]) for r in rows], dtype=np.int64),
        dataset_id=dataset_id if dataset_id is not None else path.stem,
    )


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".csv")
