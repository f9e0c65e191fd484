"""Synthetic far-field diffraction scans with a ground-truth spot manifest.

Spots are anisotropic Gaussians on Debye-Scherrer rings, oriented along the
local (radial, azimuthal) frame, with a Gaussian profile in omega.  A
per-frame schedule perturbs the material state:

* ``smear_factor`` multiplies the azimuthal width (slip),
* ``fragment_factor`` is the fraction of spots split into 2-5 shards whose
  amplitudes sum to the original and whose omega centres scatter within
  1.5 omega-widths (fracture into coherent pieces),
* ``flux_scale`` multiplies every amplitude (incident flux).

Counts are Poisson around ``background + spots`` on top of a fixed dark frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigInvalid, UnknownScenario
from .frame_store import ScanManifest, ScanSet, in_memory_scan, write_scan

NOMINAL_STEP = 0.25
DARK_SEED = 7919
_RENDER_SIGMAS = 4.0
_OMEGA_SIGMAS = 3.5


@dataclass
class SyntheticScanConfig:
    scan_id: str = "synthetic"
    width: int = 128
    height: int = 128
    n_frames: int = 1440
    omega_step: float = 0.25
    omega_start: float = 0.0
    n_spots: int = 300
    ring_radii: tuple = (26.0, 38.0, 50.0)
    sigma_radial: float = 1.2
    sigma_azimuthal: float = 1.5
    sigma_jitter: float = 0.2
    omega_width: float = 0.4
    amplitude_range: tuple = (150.0, 1500.0)
    min_separation: float = 10.0
    seed: int = 0
    noise_seed: int | None = None
    background: float = 2.0
    dark_level: float = 100.0
    dark_pattern: float = 5.0
    beam_fraction: float = 1.0
    grain_height: float = 0.125  # grain extent along rows, as a fraction of height (partial illumination)
    smear_factor: float | Sequence[float] = 1.0
    fragment_factor: float | Sequence[float] = 0.0
    flux_scale: float | Sequence[float] = 1.0
    tags: dict = field(default_factory=dict)

    def validate(self) -> "SyntheticScanConfig":
        for name in ("width", "height", "n_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigInvalid(name, "must be >= 1")
        if self.omega_step <= 0 or self.n_frames * self.omega_step > 360 + 1e-9:
            raise ConfigInvalid("omega_step", "need step > 0 and n_frames * step <= 360")
        if self.n_spots < 0:
            raise ConfigInvalid("n_spots", "must be >= 0")
        if not self.ring_radii:
            raise ConfigInvalid("ring_radii", "need at least one ring")
        if self.sigma_radial <= 0 or self.sigma_azimuthal <= 0 or self.omega_width <= 0:
            raise ConfigInvalid("sigma_radial", "all widths must be > 0")
        if not 0 <= self.sigma_jitter < 1:
            raise ConfigInvalid("sigma_jitter", "must lie in [0, 1)")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise ConfigInvalid("amplitude_range", "need 0 < low <= high")
        if self.background < 0:
            raise ConfigInvalid("background", "must be >= 0")
        if not 0 < self.beam_fraction <= 1:
            raise ConfigInvalid("beam_fraction", "must lie in (0, 1]")
        if not 0 <= self.grain_height < 1:
            raise ConfigInvalid("grain_height", "must lie in [0, 1)")
        for name in ("smear_factor", "fragment_factor", "flux_scale"):
            sched = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if sched.ndim != 1 or len(sched) not in (1, self.n_frames):
                raise ConfigInvalid(name, "schedule length must be 1 or n_frames")
            if np.any(sched < 0) or not np.all(np.isfinite(sched)):
                raise ConfigInvalid(name, "multipliers must be finite and >= 0")
        if np.any(np.atleast_1d(self.smear_factor) <= 0):
            raise ConfigInvalid("smear_factor", "must be > 0")
        if np.any(np.atleast_1d(self.fragment_factor) > 1):
            raise ConfigInvalid("fragment_factor", "is a fraction of spots, must be <= 1")
        return self

    def schedule(self, name: str) -> np.ndarray:
        sched = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
        return np.broadcast_to(sched, (self.n_frames,)) if len(sched) == 1 else sched

    @property
    def frame_noise_seed(self) -> int:
        return self.seed if self.noise_seed is None else self.noise_seed

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("smear_factor", "fragment_factor", "flux_scale"):
            v = getattr(self, name)
            out[name] = float(v) if np.ndim(v) == 0 else [float(x) for x in v]
        out["ring_radii"] = [float(r) for r in self.ring_radii]
        out["amplitude_range"] = [float(a) for a in self.amplitude_range]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticScanConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown synthetic scan option")
        raw = dict(raw)
        for key in ("ring_radii", "amplitude_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class SpotSpec:
    spot_id: int
    ring_radius: float
    azimuth: float
    omega_center: float
    omega_width: float
    amplitude: float
    sigma_radial: float
    sigma_azimuthal: float
    grain_row: float = 0.0  # height of the diffracting grain in the sample, in detector rows


def _wrap(d):
    return (np.asarray(d) + 180.0) % 360.0 - 180.0


def layout_spots(cfg: SyntheticScanConfig) -> list[SpotSpec]:
    """Deterministic spot population for ``cfg.seed`` (independent of frame noise and schedule)."""
    rng = np.random.default_rng([cfg.seed, 0])
    cy, cx = (cfg.height - 1) / 2.0, (cfg.width - 1) / 2.0
    spots: list[SpotSpec] = []
    xs, ys, om = (np.empty(cfg.n_spots) for _ in range(3))
    near_omega = 2 * _OMEGA_SIGMAS * cfg.omega_width * 1.5
    lo, hi = cfg.amplitude_range
    for sid in range(cfg.n_spots):
        for _attempt in range(200):
            r = float(rng.choice(cfg.ring_radii)) + float(rng.uniform(-0.5, 0.5))
            eta = float(rng.uniform(0, 360))
            omega = float(rng.uniform(0, 360))
            x = cx + r * math.cos(math.radians(eta))
            y = cy + r * math.sin(math.radians(eta))
            if sid:
                near = np.abs(_wrap(om[:sid] - omega)) < near_omega
                d = np.hypot(xs[:sid][near] - x, ys[:sid][near] - y)
                if d.size and d.min() < cfg.min_separation:
                    continue
            break
        else:
            raise ConfigInvalid("n_spots", f"could not place spot {sid} at min_separation "
                                           f"{cfg.min_separation} px; lower the density")
        jit = cfg.sigma_jitter
        spots.append(SpotSpec(
            spot_id=sid,
            ring_radius=r,
            azimuth=eta,
            omega_center=omega,
            omega_width=cfg.omega_width,
            amplitude=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            sigma_radial=cfg.sigma_radial * float(rng.uniform(1 - jit, 1 + jit)),
            sigma_azimuthal=cfg.sigma_azimuthal * float(rng.uniform(1 - jit, 1 + jit)),
        ))
        xs[sid], ys[sid], om[sid] = x, y, omega
    # grain heights use their own stream so the spot layout does not depend on them
    heights = np.random.default_rng([cfg.seed, 3]).uniform(0, cfg.height - 1, size=cfg.n_spots)
    for spot, h in zip(spots, heights):
        spot.grain_row = float(h)
    return spots


def shard_plan(spots: list[SpotSpec], seed: int):
    """Per-spot fracture draws: (rank in [0,1), amplitude weights, omega offsets in widths)."""
    rng = np.random.default_rng([seed, 1])
    plan = []
    for _ in spots:
        rank = float(rng.random())
        n = int(rng.integers(2, 6))
        weights = rng.dirichlet(np.full(n, 2.0))
        offsets = rng.uniform(-1.5, 1.5, size=n)
        plan.append((rank, weights, offsets))
    return plan


def _omega_weight(omega_center, width, a, b):
    """Fraction of a spot's omega profile inside [a, b), scaled so a centred nominal frame is 1."""
    s = math.sqrt(2) * width
    lo = _wrap(a - omega_center)
    hi = lo + (b - a)
    norm = erf(NOMINAL_STEP / 2 / s) - erf(-NOMINAL_STEP / 2 / s)
    return (erf(hi / s) - erf(lo / s)) / norm


def render_spot(image: np.ndarray, row: float, col: float, amplitude: float, sigma_r: float,
                sigma_a: float, azimuth_deg: float, row_band: tuple[float, float] | None = None) -> None:
    """Add an oriented Gaussian of peak ``amplitude`` to ``image`` in place."""
    h, w = image.shape
    reach = _RENDER_SIGMAS * max(sigma_r, sigma_a)
    r0, r1 = max(int(math.floor(row - reach)), 0), min(int(math.ceil(row + reach)) + 1, h)
    c0, c1 = max(int(math.floor(col - reach)), 0), min(int(math.ceil(col + reach)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    dy, dx = rr - row, cc - col
    eta = math.radians(azimuth_deg)
    ur, uc = math.sin(eta), math.cos(eta)
    radial = dy * ur + dx * uc
    azim = -dy * uc + dx * ur
    blob = amplitude * np.exp(-0.5 * (radial / sigma_r) ** 2 - 0.5 * (azim / sigma_a) ** 2)
    if row_band is not None:
        blob *= (rr >= row_band[0]) & (rr <= row_band[1])
    image[r0:r1, c0:c1] += blob


def _spot_rc(cfg, spot):
    cy, cx = (cfg.height - 1) / 2.0, (cfg.width - 1) / 2.0
    eta = math.radians(spot.azimuth)
    return cy + spot.ring_radius * math.sin(eta), cx + spot.ring_radius * math.cos(eta)


def _row_band(cfg):
    if cfg.beam_fraction >= 1:
        return None
    cy = (cfg.height - 1) / 2.0
    half = cfg.beam_fraction * cfg.height / 2.0
    return cy - half, cy + half


def illuminated_fraction(cfg: SyntheticScanConfig, row: float) -> float:
    """Share of a grain centred at ``row`` that lies inside the beam band.

    Grains span ``grain_height * height`` rows; a narrow beam leaves more of
    them partly lit. A full beam lights everything.
    """
    band = _row_band(cfg)
    if band is None:
        return 1.0
    g = cfg.grain_height * cfg.height
    if g <= 0:
        return float(band[0] <= row <= band[1])
    overlap = min(row + g / 2, band[1]) - max(row - g / 2, band[0])
    return min(max(overlap / g, 0.0), 1.0)


def frame_truth(cfg: SyntheticScanConfig, spots, plan, index: int) -> list[dict]:
    """Spots rendered on frame ``index`` with their frame-level parameters."""
    a = cfg.omega_start + index * cfg.omega_step
    b = a + cfg.omega_step
    mid = (a + b) / 2
    smear = float(cfg.schedule("smear_factor")[index])
    frag = float(cfg.schedule("fragment_factor")[index])
    flux = float(cfg.schedule("flux_scale")[index])
    out = []
    for spot, (rank, weights, offsets) in zip(spots, plan):
        row, col = _spot_rc(cfg, spot)
        band = _row_band(cfg)
        if band is not None and not band[0] <= row <= band[1]:
            continue
        lit = illuminated_fraction(cfg, spot.grain_row)
        if lit <= 0:
            continue
        if rank < frag:
            shards = [(spot.omega_center + off * spot.omega_width, wgt, k)
                      for k, (wgt, off) in enumerate(zip(weights, offsets))]
        else:
            shards = [(spot.omega_center, 1.0, 0)]
        for omega_c, wgt, k in shards:
            if abs(float(_wrap(mid - omega_c))) > _OMEGA_SIGMAS * spot.omega_width + cfg.omega_step:
                continue
            weight = float(_omega_weight(omega_c, spot.omega_width, a, b))
            peak = spot.amplitude * wgt * flux * lit * weight
            if peak <= 1e-3:
                continue
            out.append({
                "spot_id": spot.spot_id,
                "shard": k,
                "n_shards": len(shards),
                "row": row,
                "col": col,
                "azimuth": spot.azimuth,
                "ring_radius": spot.ring_radius,
                "omega_center": omega_c,
                "omega_width": spot.omega_width,
                "amplitude": spot.amplitude * wgt * flux * lit,
                "illuminated": lit,
                "peak": peak,
                "sigma_radial": spot.sigma_radial,
                # a partly lit grain contributes only part of its orientation spread
                "sigma_azimuthal": spot.sigma_azimuthal * smear * lit,
            })
    return out


def dark_frame(cfg: SyntheticScanConfig) -> np.ndarray:
    rng = np.random.default_rng(DARK_SEED)
    pattern = rng.uniform(-cfg.dark_pattern, cfg.dark_pattern, size=(cfg.height, cfg.width))
    return np.clip(np.round(cfg.dark_level + pattern), 0, 65535).astype(np.uint16)


def render_frame(cfg: SyntheticScanConfig, truth: list[dict], index: int, dark: np.ndarray) -> np.ndarray:
    expected = np.full((cfg.height, cfg.width), cfg.background, dtype=np.float64)
    band = _row_band(cfg)
    for s in truth:
        render_spot(expected, s["row"], s["col"], s["peak"], s["sigma_radial"], s["sigma_azimuthal"],
                    s["azimuth"], band)
    rng = np.random.default_rng([cfg.frame_noise_seed, 2, index])
    counts = rng.poisson(expected) + dark.astype(np.int64)
    return np.clip(counts, 0, 65535).astype(np.uint16)


@dataclass
class SyntheticScan:
    scan: ScanSet
    truth: list[list[dict]]
    config: SyntheticScanConfig

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        src = self.scan
        frames = np.stack([np.asarray(src.raw_frame(i).pixels) for i in range(len(src))])
        write_scan(directory, src.manifest, frames, src.dark.pixels if src.dark else None)
        (directory / "truth.json").write_text(
            json.dumps({"config": self.config.to_dict(), "frames": self.truth}, sort_keys=True),
            encoding="utf-8")
        return directory


def generate_scan(cfg: SyntheticScanConfig) -> SyntheticScan:
    cfg.validate()
    spots = layout_spots(cfg)
    plan = shard_plan(spots, cfg.seed)
    dark = dark_frame(cfg)
    frames = np.empty((cfg.n_frames, cfg.height, cfg.width), dtype=np.uint16)
    truth = []
    # prefilter by omega so each frame only visits spots (or shards) that can reach it
    centers = np.array([s.omega_center for s in spots])
    reach = (_OMEGA_SIGMAS + 1.5) * cfg.omega_width + cfg.omega_step
    for i in range(cfg.n_frames):
        mid = cfg.omega_start + (i + 0.5) * cfg.omega_step
        cand = np.flatnonzero(np.abs(_wrap(mid - centers)) <= reach)
        t = frame_truth(cfg, [spots[j] for j in cand], [plan[j] for j in cand], i)
        frames[i] = render_frame(cfg, t, i, dark)
        truth.append(t)
    tags = {"synthetic_seed": cfg.seed, "beam_fraction": cfg.beam_fraction, **cfg.tags}
    flux = cfg.schedule("flux_scale")
    if np.all(flux == flux[0]):
        tags.setdefault("flux_scale", float(flux[0]))
    manifest = ScanManifest(cfg.scan_id, cfg.width, cfg.height, cfg.n_frames, cfg.omega_start,
                            cfg.omega_step, tags=tags)
    return SyntheticScan(in_memory_scan(manifest, frames, dark), truth, cfg)


def load_truth(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "truth.json").read_text(encoding="utf-8"))


# -- experiment protocols ------------------------------------------------

SLIP_LADDER = (1.0, 1.0, 1.2, 1.5, 2.0, 3.0)
FRACTURE_LADDER = (0.0, 0.0, 0.2, 0.4, 0.7, 1.0)
FLUX_LADDER = (1.0, 0.6, 0.4, 0.25)
BEAM_LADDER = (1.0, 0.75, 0.5, 0.25)
START_OFFSETS = (0.125, -0.125, 0.25, -0.25, 0.314, -0.314, 0.628, -0.628)
POSITION_WIDTH_SCALES = (1.0, 1.1, 0.9, 1.18)  # local microstructure differs between sample positions
ROTATION_STEPS = (0.25, 0.1)
SCENARIOS = ("slip", "fracture", "flux", "start_angle", "position", "beam_size", "rotation_step",
             "continuous", "flux_step")


def slip_label(i: int, smear: float) -> str:
    if i == 0:
        return "baseline"
    if smear <= 1.0:
        return "elastic"
    if smear < 2.0:
        return "transition"
    return "plastic"


@dataclass
class Experiment:
    scenario: str
    scans: list[SyntheticScan]
    labels: list[str]
    params: dict

    def manifest(self) -> dict:
        return {
            "scenario": self.scenario,
            "params": self.params,
            "scans": [{"scan_id": s.config.scan_id, "state_label": lab,
                       "config": s.config.to_dict()} for s, lab in zip(self.scans, self.labels)],
        }

    def write(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [s.write(directory / s.config.scan_id) for s in self.scans]
        (directory / "scenario.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True),
                                                 encoding="utf-8")
        return paths


def generate_experiment(protocol: dict, base: SyntheticScanConfig | None = None) -> Experiment:
    """Build a labelled scan series; ``protocol["scenario"]`` picks the family.

    Every scan of a series shares ``base``'s spot layout unless the scenario
    varies it; frame noise differs per scan.
    """
    protocol = dict(protocol)
    scenario = protocol.pop("scenario", None)
    if scenario not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    base = base or SyntheticScanConfig()
    if "base" in protocol:
        base = SyntheticScanConfig.from_dict({**base.to_dict(), **protocol.pop("base")})
    prefix = protocol.pop("prefix", scenario)
    noise0 = base.frame_noise_seed * 1000 + 1

    def variant(i, label, **changes):
        cfg_dict = {**base.to_dict(), **changes}
        cfg_dict["scan_id"] = f"{prefix}_{i:02d}"
        if changes.get("noise_seed") is None:
            cfg_dict["noise_seed"] = noise0 + i
        cfg_dict["tags"] = {**base.tags, "state_label": label, "scenario": scenario}
        return SyntheticScanConfig.from_dict(cfg_dict)

    configs, labels = [], []
    if scenario == "slip":
        ladder = tuple(protocol.pop("smear_ladder", SLIP_LADDER))
        for i, s in enumerate(ladder):
            labels.append(slip_label(i, s))
            configs.append(variant(i, labels[-1], smear_factor=float(s)))
        params = {"smear_ladder": list(ladder)}
    elif scenario == "fracture":
        ladder = tuple(protocol.pop("fragment_ladder", FRACTURE_LADDER))
        for i, f in enumerate(ladder):
            labels.append("baseline" if i == 0 else ("elastic" if f == 0 else "fracture"))
            configs.append(variant(i, labels[-1], fragment_factor=float(f)))
        params = {"fragment_ladder": list(ladder)}
    elif scenario == "flux":
        ladder = tuple(protocol.pop("flux_ladder", FLUX_LADDER))
        for i, f in enumerate(ladder):
            labels.append(f"flux_{f:g}")
            configs.append(variant(i, labels[-1], flux_scale=float(f)))
        params = {"flux_ladder": list(ladder)}
    elif scenario == "start_angle":
        offsets = tuple(protocol.pop("offsets", START_OFFSETS))
        for i, off in enumerate(offsets):
            labels.append("instrument_start_angle")
            configs.append(variant(i, labels[-1], omega_start=base.omega_start + float(off)))
        params = {"offsets": list(offsets)}
    elif scenario == "position":
        seeds = tuple(protocol.pop("layout_seeds", (base.seed, base.seed + 101, base.seed + 202, base.seed + 303)))
        scales = tuple(protocol.pop("width_scales", POSITION_WIDTH_SCALES[:len(seeds)]))
        if len(scales) != len(seeds):
            raise ConfigInvalid("width_scales", "need one scale per layout seed")
        for i, (sd, sc) in enumerate(zip(seeds, scales)):
            labels.append("instrument_position")
            configs.append(variant(i, labels[-1], seed=int(sd), sigma_radial=base.sigma_radial * float(sc),
                                   sigma_azimuthal=base.sigma_azimuthal * float(sc)))
        params = {"layout_seeds": list(seeds), "width_scales": list(scales)}
    elif scenario == "beam_size":
        ladder = tuple(protocol.pop("beam_ladder", BEAM_LADDER))
        for i, b in enumerate(ladder):
            labels.append("instrument_beam_size")
            configs.append(variant(i, labels[-1], beam_fraction=float(b)))
        params = {"beam_ladder": list(ladder)}
    elif scenario == "rotation_step":
        steps = tuple(protocol.pop("steps", ROTATION_STEPS))
        for i, st in enumerate(steps):
            labels.append("instrument_rotation_step")
            configs.append(variant(i, labels[-1], omega_step=float(st), n_frames=int(round(360 / st))))
        params = {"steps": list(steps)}
    elif scenario == "continuous":
        onset = int(protocol.pop("onset_frame", base.n_frames // 2))
        ramp = int(protocol.pop("ramp_frames", base.n_frames // 8))
        peak = float(protocol.pop("peak_smear", 3.0))
        k = np.arange(base.n_frames)
        sched = np.where(k < onset, 1.0, np.minimum(1.0 + (peak - 1.0) * (k - onset + 1) / max(ramp, 1), peak))
        labels.append("continuous")
        configs.append(variant(0, "continuous", smear_factor=[float(v) for v in sched]))
        params = {"onset_frame": onset, "ramp_frames": ramp, "peak_smear": peak}
    else:  # flux_step
        step_frame = int(protocol.pop("step_frame", base.n_frames // 2))
        level = float(protocol.pop("flux_level", 0.3))
        sched = np.where(np.arange(base.n_frames) < step_frame, 1.0, level)
        labels.append("flux_step")
        configs.append(variant(0, "flux_step", flux_scale=[float(v) for v in sched]))
        params = {"step_frame": step_frame, "flux_level": level}
    if protocol:
        raise ConfigInvalid(sorted(protocol)[0], f"unknown parameter for scenario {scenario!r}")
    scans = [generate_scan(c) for c in configs]
    return Experiment(scenario, scans, labels, params)
