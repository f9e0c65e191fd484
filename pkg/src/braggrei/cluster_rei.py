"""Reference K-means model and the rare event indicator (REI).

REI is the fraction of a dataset's embeddings whose nearest-centre
assignment is uncertain: confidence ``(D2 - D1) / D2`` below ``t``, where
``D1 <= D2`` are the two smallest centre distances.
"""
from __future__ import annotations

import csv
import io
import json
import struct
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .byol import EncoderModel
from .errors import (BadFormat, ConfigInvalid, DimensionMismatch, EmptyDataset, MissingFile,
                     ModelMismatch, TooFewVectors)
from .frame_store import Frame, ScanSet, slice_segment
from .peak_extract import ExtractionConfig, PatchDataset, extract_dataset, extract_frame

DEFAULT_K = 40
DEFAULT_T = 0.5


# -- K-means -------------------------------------------------------------

def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


def kmeans(vectors: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from a k-means++ seeding."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"kmeans: expected an (N, D) matrix, got {x.shape}")
    if k < 1:
        raise ConfigInvalid("K", "must be >= 1")
    if len(x) < k:
        raise TooFewVectors(f"kmeans: {len(x)} vectors for K={k}")
    centers = kmeans_plus_plus(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = np.empty_like(centers)
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # farthest points from their own centres take over empty clusters
            own = d2[np.arange(len(x)), labels]
            for j, idx in zip(empty, np.argsort(-own, kind="stable")):
                new[j] = x[idx]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol and not empty.size:
            break
    d2 = _sq_dists(x, centers)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return KMeansResult(centers, labels, inertia, n_iter, history)


def kmeans_fit(vectors: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300,
               tol: float = 1e-6) -> np.ndarray:
    return kmeans(vectors, k, rng, max_iter, tol).centers


# -- confidence / REI ----------------------------------------------------

def assignment_confidence(vectors: np.ndarray, centers: np.ndarray):
    """Nearest centre id(s) and margin confidence(s) in [0, 1].

    Accepts one vector or an (N, D) stack; ties go to the lower centre index.
    """
    centers = np.asarray(centers, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if centers.ndim != 2 or v.shape[1] != centers.shape[1]:
        raise DimensionMismatch(f"vectors of dim {v.shape[-1]} vs centres {centers.shape}")
    d = np.sqrt(_sq_dists(v, centers))
    nearest = np.argmin(d, axis=1)
    if centers.shape[0] == 1:
        conf = np.ones(len(v))
    else:
        two = np.partition(d, 1, axis=1)[:, :2]
        d1, d2 = two[:, 0], two[:, 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            conf = np.where(d2 > 0, (d2 - d1) / d2, 0.0)
        conf = np.clip(conf, 0.0, 1.0)
    if single:
        return int(nearest[0]), float(conf[0])
    return nearest, conf


@dataclass
class ClusterModel:
    centers: np.ndarray
    threshold: float = DEFAULT_T
    reference_id: str = ""
    encoder_checksum: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float32)
        if self.centers.ndim != 2 or len(self.centers) < 1:
            raise ConfigInvalid("K", "need at least one centre")
        if not np.all(np.isfinite(self.centers)):
            raise ConfigInvalid("centers", "must be finite")
        if not 0 <= self.threshold <= 1:
            raise ConfigInvalid("t", "must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def with_threshold(self, t: float) -> "ClusterModel":
        return ClusterModel(self.centers, t, self.reference_id, self.encoder_checksum, dict(self.meta))

    def confidences(self, embeddings: np.ndarray) -> np.ndarray:
        return assignment_confidence(np.atleast_2d(embeddings), self.centers)[1]


def fit_reference(reference: PatchDataset, encoder: EncoderModel, k: int = DEFAULT_K,
                  t: float = DEFAULT_T, seed: int = 0, embeddings: np.ndarray | None = None,
                  max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    if len(reference) == 0:
        raise EmptyDataset("reference dataset holds no patches")
    emb = encoder.embed(reference.patches) if embeddings is None else embeddings
    centers = kmeans_fit(emb, k, np.random.default_rng([seed, 3]), max_iter, tol)
    return ClusterModel(centers, t, reference.dataset_id, encoder.checksum(), {"seed": seed})


@dataclass
class REIReport:
    dataset_id: str
    n_patches: int
    n_uncertain: int
    rei: float
    eval_wall_seconds: float
    delta_omega: float | None = None
    n_repeats: int | None = None
    rei_mean: float | None = None
    rei_min: float | None = None
    rei_max: float | None = None
    repeats: list[float] | None = None
    extract_wall_seconds: float | None = None

    @property
    def partial(self) -> bool:
        return self.delta_omega is not None

    @property
    def spread(self) -> float:
        return 0.0 if not self.partial else self.rei_max - self.rei_min


def check_binding(encoder: EncoderModel, cluster: ClusterModel) -> None:
    if cluster.encoder_checksum and cluster.encoder_checksum != encoder.checksum():
        raise ModelMismatch(
            f"cluster model bound to encoder {cluster.encoder_checksum[:12]}, "
            f"got {encoder.checksum()[:12]}")


def rei_from_confidences(conf: np.ndarray, t: float) -> tuple[int, float]:
    n_uncertain = int(np.count_nonzero(np.asarray(conf) < t))
    return n_uncertain, n_uncertain / len(conf)


def rei_score(dataset: PatchDataset, encoder: EncoderModel, cluster: ClusterModel,
              embeddings: np.ndarray | None = None) -> REIReport:
    if len(dataset) == 0:
        raise EmptyDataset(f"dataset {dataset.dataset_id!r} holds no patches")
    check_binding(encoder, cluster)
    t0 = time.perf_counter()
    emb = encoder.embed(dataset.patches) if embeddings is None else embeddings
    conf = cluster.confidences(emb)
    n_uncertain, rei = rei_from_confidences(conf, cluster.threshold)
    return REIReport(dataset.dataset_id, len(dataset), n_uncertain, rei, time.perf_counter() - t0)


def evaluate_scan(scan: ScanSet, encoder: EncoderModel, cluster: ClusterModel,
                  extraction: ExtractionConfig | None = None, workers: int = 1) -> REIReport:
    """Extract then score; wall time covers both steps."""
    t0 = time.perf_counter()
    ds = extract_dataset(scan, extraction, workers)
    report = rei_score(ds, encoder, cluster)
    report.extract_wall_seconds = ds.stats.get("extract_seconds")
    report.eval_wall_seconds = time.perf_counter() - t0
    return report


def partial_rei(scan: ScanSet, encoder: EncoderModel, cluster: ClusterModel, delta_omega: float,
                n_repeats: int = 20, rng: np.random.Generator | None = None,
                extraction: ExtractionConfig | None = None) -> REIReport:
    """REI over ``n_repeats`` contiguous segments with random starting frames.

    ``rei`` pools every repeat's patches; ``rei_mean/min/max`` summarise the
    per-repeat values.
    """
    if n_repeats < 1:
        raise ConfigInvalid("n_repeats", "must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    check_binding(encoder, cluster)
    t0 = time.perf_counter()
    values, n_total, n_unc = [], 0, 0
    for _ in range(n_repeats):
        start = int(rng.integers(len(scan)))
        omega = scan.omega_of(int(scan.indices[start]))
        seg = slice_segment(scan, omega, delta_omega)
        ds = extract_dataset(seg, extraction)
        rep = rei_score(ds, encoder, cluster)
        values.append(rep.rei)
        n_total += rep.n_patches
        n_unc += rep.n_uncertain
    wall = time.perf_counter() - t0
    return REIReport(scan.scan_id, n_total, n_unc, n_unc / n_total, wall, float(delta_omega), n_repeats,
                     float(np.mean(values)), float(np.min(values)), float(np.max(values)), values)


@dataclass
class StreamPoint:
    frame_index: int
    omega: float
    rei: float | None
    n_patches: int

    @property
    def gap(self) -> bool:
        return self.rei is None


def stream_rei(frames: Iterable[Frame], encoder: EncoderModel, cluster: ClusterModel, window: int,
               stride: int, extraction: ExtractionConfig | None = None) -> Iterator[StreamPoint]:
    """Sliding-window REI over the most recent ``window`` frames, every ``stride`` frames.

    Only per-frame confidence arrays for the current window are retained.
    Windows without patches yield a gap point (``rei is None``).
    """
    if window < 1:
        raise ConfigInvalid("window", "must be >= 1")
    if stride < 1:
        raise ConfigInvalid("stride", "must be >= 1")
    check_binding(encoder, cluster)
    cfg = (extraction or ExtractionConfig()).validate()
    recent: deque[np.ndarray] = deque(maxlen=window)
    seen = 0
    for frame in frames:
        patches = extract_frame(frame, cfg)
        if patches:
            emb = encoder.embed(np.stack([p.pixels for p in patches]))
            recent.append(cluster.confidences(emb))
        else:
            recent.append(np.zeros(0))
        seen += 1
        if seen >= window and (seen - window) % stride == 0:
            conf = np.concatenate(list(recent))
            if conf.size == 0:
                yield StreamPoint(frame.index, frame.omega, None, 0)
            else:
                _, rei = rei_from_confidences(conf, cluster.threshold)
                yield StreamPoint(frame.index, frame.omega, rei, int(conf.size))


# -- persistence ---------------------------------------------------------

CLUSTER_MAGIC = b"BRGREICLU"
CLUSTER_VERSION = 1
REPORT_FIELDS = ("dataset_id", "n_patches", "n_uncertain", "rei", "wall_s", "delta_omega",
                 "rei_mean", "rei_min", "rei_max")


def save_cluster(model: ClusterModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checksum = model.encoder_checksum.encode("ascii").ljust(64, b"\0")[:64]
    meta = json.dumps({"reference_id": model.reference_id, **model.meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CLUSTER_MAGIC)
        fh.write(struct.pack("<IIId", CLUSTER_VERSION, model.k, model.dim, model.threshold))
        fh.write(checksum)
        fh.write(np.ascontiguousarray(model.centers, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
    return path


def load_cluster(path: str | Path) -> ClusterModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    data = path.read_bytes()
    if not data.startswith(CLUSTER_MAGIC):
        raise BadFormat(f"{path}: not a cluster model")
    pos = len(CLUSTER_MAGIC)
    try:
        version, k, dim, t = struct.unpack_from("<IIId", data, pos)
        if version != CLUSTER_VERSION:
            raise BadFormat(f"{path}: unsupported version {version}")
        pos += struct.calcsize("<IIId")
        checksum = data[pos:pos + 64].rstrip(b"\0").decode("ascii")
        pos += 64
        size = k * dim * 4
        centers = np.frombuffer(data, dtype="<f4", count=k * dim, offset=pos).reshape(k, dim)
        pos += size
        (mlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise BadFormat(f"{path}: corrupt cluster model ({exc})") from exc
    reference_id = meta.pop("reference_id", "")
    return ClusterModel(centers.copy(), t, reference_id, checksum, meta)


def _blank(v):
    return "" if v is None else v


def report_row(report: REIReport, include_wall: bool = True, extra: dict | None = None) -> dict:
    """Flat record with the CSV/JSON field names; partial fields are blank in batch mode."""
    row = {
        "dataset_id": report.dataset_id,
        "n_patches": report.n_patches,
        "n_uncertain": report.n_uncertain,
        "rei": report.rei,
        "wall_s": _blank(report.eval_wall_seconds if include_wall else None),
        "delta_omega": _blank(report.delta_omega),
        "rei_mean": _blank(report.rei_mean),
        "rei_min": _blank(report.rei_min),
        "rei_max": _blank(report.rei_max),
    }
    row.update(extra or {})
    return row


def reports_to_csv(reports: list[REIReport], include_wall: bool = True, extra: dict | None = None) -> str:
    rows = [report_row(r, include_wall, extra) for r in reports]
    buf = io.StringIO()
    fieldnames = list(REPORT_FIELDS) + [k for k in (extra or {}) if k not in REPORT_FIELDS]
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def reports_to_json(reports: list[REIReport], include_wall: bool = True, extra: dict | None = None) -> str:
    rows = [{k: (None if v == "" else v) for k, v in report_row(r, include_wall, extra).items()}
            for r in reports]
    return json.dumps(rows, indent=2, sort_keys=False) + "\n"


def write_reports(reports: list[REIReport], csv_path: str | Path, json_path: str | Path | None = None,
                  include_wall: bool = True, extra: dict | None = None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(reports_to_csv(reports, include_wall, extra), encoding="utf-8")
    if json_path is not None:
        Path(json_path).write_text(reports_to_json(reports, include_wall, extra), encoding="utf-8")


def read_reports_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
