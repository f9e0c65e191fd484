"""Scan directories: manifest + raw u16 frame stack + optional dark frame.

Layout of a scan directory::

    manifest.json   UTF-8, keys of ScanManifest
    frames.bin      little-endian u16, row-major within a frame, frame-major
    dark.bin        optional, one frame in the same encoding
"""
from __future__ import annotations

import json
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BadManifestField, BadRange, DimensionMismatch, MissingFile, SizeMismatch

PIXEL_ENCODING = "u16le"
MANIFEST_NAME = "manifest.json"
FRAMES_NAME = "frames.bin"
DARK_NAME = "dark.bin"
_DTYPE = np.dtype("<u2")
_FULL_TURN = 360.0
_TURN_TOL = 1e-9


@dataclass
class ScanManifest:
    scan_id: str
    width: int
    height: int
    n_frames: int
    omega_start: float = 0.0
    omega_step: float = 0.25
    pixel_encoding: str = PIXEL_ENCODING
    dark_path: str | None = None
    tags: dict = field(default_factory=dict)

    def validate(self) -> "ScanManifest":
        if not isinstance(self.scan_id, str) or not self.scan_id:
            raise BadManifestField("scan_id", "must be a non-empty string")
        for name in ("width", "height"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise BadManifestField(name, f"must be a positive integer, got {value!r}")
        if not isinstance(self.n_frames, int) or isinstance(self.n_frames, bool) or self.n_frames < 1:
            raise BadManifestField("n_frames", f"must be >= 1, got {self.n_frames!r}")
        if not (isinstance(self.omega_step, (int, float)) and self.omega_step > 0):
            raise BadManifestField("omega_step", f"must be > 0, got {self.omega_step!r}")
        if not isinstance(self.omega_start, (int, float)):
            raise BadManifestField("omega_start", "must be a number")
        if self.n_frames * self.omega_step > _FULL_TURN + _TURN_TOL:
            raise BadManifestField("n_frames", "n_frames * omega_step exceeds 360 degrees")
        if self.pixel_encoding != PIXEL_ENCODING:
            raise BadManifestField("pixel_encoding", f"only {PIXEL_ENCODING!r} is supported")
        if not isinstance(self.tags, dict):
            raise BadManifestField("tags", "must be a key/value mapping")
        return self

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * _DTYPE.itemsize

    @property
    def is_full_turn(self) -> bool:
        return abs(self.n_frames * self.omega_step - _FULL_TURN) <= _TURN_TOL * 1e3

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScanManifest":
        known = {f for f in cls.__dataclass_fields__}
        for key in ("scan_id", "width", "height", "n_frames"):
            if key not in raw:
                raise BadManifestField(key, "missing")
        kwargs = {k: v for k, v in raw.items() if k in known}
        return cls(**kwargs).validate()


@dataclass
class Frame:
    index: int
    omega: float
    pixels: np.ndarray
    n_clamped: int = 0


@dataclass
class DarkFrame:
    pixels: np.ndarray


def subtract_dark(frame: Frame, dark: DarkFrame) -> Frame:
    """Return ``max(0, frame - dark)``; the clamped pixel count goes into ``n_clamped``."""
    if frame.pixels.shape != dark.pixels.shape:
        raise DimensionMismatch(
            f"subtract_dark: frame {frame.pixels.shape} vs dark {dark.pixels.shape}"
        )
    diff = frame.pixels.astype(np.int32) - dark.pixels.astype(np.int32)
    n_clamped = int(np.count_nonzero(diff < 0))
    np.maximum(diff, 0, out=diff)
    return Frame(frame.index, frame.omega, diff.astype(np.float32), n_clamped)


class ScanSet:
    """Immutable view over the frames of one scan.

    ``indices`` selects (and orders) frames of the underlying stack, so a
    ScanSet produced by :func:`slice_segment` shares storage with its parent.
    Frames are decoded only when requested.
    """

    def __init__(self, manifest: ScanManifest, source, dark: np.ndarray | None = None,
                 indices: Sequence[int] | None = None, root: Path | None = None):
        self.manifest = manifest
        self._source = source
        self._dark = dark
        self.root = root
        if indices is None:
            indices = range(manifest.n_frames)
        self.indices = np.asarray(list(indices), dtype=np.int64)

    @property
    def scan_id(self) -> str:
        return self.manifest.scan_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.manifest.height, self.manifest.width

    def __len__(self) -> int:
        return len(self.indices)

    def omega_of(self, index: int) -> float:
        m = self.manifest
        return m.omega_start + index * m.omega_step

    @property
    def omega_range(self) -> tuple[float, float]:
        """Half-open [first, last + step) span in the unwrapped frame order."""
        first = self.omega_of(int(self.indices[0]))
        return first, first + len(self.indices) * self.manifest.omega_step

    @property
    def dark(self) -> DarkFrame | None:
        return None if self._dark is None else DarkFrame(self._dark)

    def raw_frame(self, position: int) -> Frame:
        index = int(self.indices[position])
        pixels = np.asarray(self._source[index])
        return Frame(index, self.omega_of(index), pixels)

    def frame(self, position: int) -> Frame:
        """Dark-subtracted frame at ``position`` (float32 counts)."""
        raw = self.raw_frame(position)
        if self._dark is None:
            return Frame(raw.index, raw.omega, raw.pixels.astype(np.float32))
        return subtract_dark(raw, DarkFrame(self._dark))

    def __iter__(self) -> Iterator[Frame]:
        for position in range(len(self)):
            yield self.frame(position)

    def subset(self, indices: Sequence[int]) -> "ScanSet":
        return ScanSet(self.manifest, self._source, self._dark, indices, self.root)


def write_scan(directory: str | Path, manifest: ScanManifest, frames: np.ndarray,
               dark: np.ndarray | None = None) -> Path:
    manifest.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    expected = (manifest.n_frames, manifest.height, manifest.width)
    if frames.shape != expected:
        raise DimensionMismatch(f"write_scan: frames {frames.shape} vs manifest {expected}")
    frames.astype(_DTYPE).tofile(directory / FRAMES_NAME)
    if dark is not None:
        dark = np.asarray(dark)
        if dark.shape != expected[1:]:
            raise DimensionMismatch(f"write_scan: dark {dark.shape} vs frame {expected[1:]}")
        dark.astype(_DTYPE).tofile(directory / DARK_NAME)
        manifest.dark_path = DARK_NAME
    (directory / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return directory


def load_scan(manifest_path: str | Path) -> ScanSet:
    """Open a scan lazily; accepts either the directory or its ``manifest.json``."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingFile(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BadManifestField("<file>", f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise BadManifestField("<file>", "top level must be an object")
    manifest = ScanManifest.from_dict(raw)
    root = path.parent

    frames_path = root / FRAMES_NAME
    if not frames_path.is_file():
        raise MissingFile(frames_path)
    expected = manifest.n_frames * manifest.frame_bytes
    actual = frames_path.stat().st_size
    if actual != expected:
        raise SizeMismatch(frames_path, expected, actual)
    source = np.memmap(frames_path, dtype=_DTYPE, mode="r",
                       shape=(manifest.n_frames, manifest.height, manifest.width))

    dark = None
    if manifest.dark_path:
        dark_path = root / manifest.dark_path
        if not dark_path.is_file():
            raise MissingFile(dark_path)
        if dark_path.stat().st_size != manifest.frame_bytes:
            raise SizeMismatch(dark_path, manifest.frame_bytes, dark_path.stat().st_size)
        dark = np.fromfile(dark_path, dtype=_DTYPE).reshape(manifest.height, manifest.width)
    return ScanSet(manifest, source, dark, root=root)


def in_memory_scan(manifest: ScanManifest, frames: np.ndarray,
                   dark: np.ndarray | None = None) -> ScanSet:
    manifest.validate()
    frames = np.asarray(frames, dtype=_DTYPE)
    return ScanSet(manifest, frames, None if dark is None else np.asarray(dark, dtype=_DTYPE))


def slice_segment(scan: ScanSet, omega_begin: float, delta_omega: float) -> ScanSet:
    """Contiguous run of frames covering ``delta_omega`` from ``omega_begin``.

    Wraps across 360 degrees for full-turn scans.
    """
    if not (0 < delta_omega <= _FULL_TURN):
        raise BadRange(f"delta_omega must lie in (0, 360], got {delta_omega}")
    m = scan.manifest
    count = int(round(delta_omega / m.omega_step))
    count = max(count, 1)
    n = len(scan)
    if count > n:
        raise BadRange(f"segment of {count} frames exceeds the {n} available")
    first_omega = scan.omega_of(int(scan.indices[0]))
    offset = (float(omega_begin) - first_omega) % _FULL_TURN
    start = int(round(offset / m.omega_step))
    wraps = len(scan) == m.n_frames and m.is_full_turn
    if wraps:
        start %= n
        positions = (start + np.arange(count)) % n
    else:
        if start + count > n:
            raise BadRange("segment runs past the end of a scan that does not cover 360 degrees")
        positions = start + np.arange(count)
    return scan.subset(scan.indices[positions])


def stream_frames(scan: ScanSet, maxsize: int = 8) -> Iterator[Frame]:
    """Yield dark-subtracted frames decoded by a producer thread into a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for position in range(len(scan)):
                if stop.is_set():
                    return
                q.put(scan.frame(position))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        finally:
            q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)
