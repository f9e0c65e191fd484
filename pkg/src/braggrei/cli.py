"""Command line tools for REI scoring of diffraction scans.

Subcommands: synth, extract, train, cluster, eval, tune, pipeline.

Exit codes: 0 ok, 3 config, 4 I/O, 5 model mismatch, 6 numeric divergence,
7 data (empty datasets and the like), 1 anything else raised by the package.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .byol import TrainConfig, load_encoder, save_encoder, train_encoder
from .cluster_rei import (DEFAULT_K, DEFAULT_T, ClusterModel, evaluate_scan, fit_reference, load_cluster,
                          partial_rei, rei_score, save_cluster, stream_rei, write_reports)
from .errors import BraggReiError, ConfigInvalid, MissingFile
from .frame_store import load_scan, stream_frames
from .hyper_tune import select_epochs, tune_grid
from .peak_extract import ExtractionConfig, extract_dataset, load_dataset, save_dataset
from .synth_gen import SyntheticScanConfig, generate_experiment

log = logging.getLogger("braggrei")
WORKERS_ENV = "BRAGGREI_WORKERS"


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigInvalid(WORKERS_ENV, f"not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigInvalid(WORKERS_ENV, "must be >= 1")
    return n


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _extraction(raw: dict | None) -> ExtractionConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(ExtractionConfig.__dataclass_fields__)
    if unknown:
        raise ConfigInvalid(f"extraction.{sorted(unknown)[0]}", "unknown option")
    return ExtractionConfig(**raw).validate()


# -- run configuration ---------------------------------------------------

MODES = ("batch", "partial", "stream")


@dataclass
class RunConfig:
    baseline: str
    reference: str
    tests: list[str]
    output_dir: str
    seed: int
    extraction: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    K: int = DEFAULT_K
    t: float = DEFAULT_T
    tune: dict | None = None
    mode: dict = field(default_factory=lambda: {"kind": "batch"})

    @classmethod
    def from_dict(cls, raw: dict, check_paths: bool = True) -> "RunConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown run option")
        for key in ("baseline", "reference", "tests", "output_dir", "seed"):
            if key not in raw or raw[key] is None:
                raise ConfigInvalid(key, "required")
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigInvalid("seed", "must be an integer")
        if isinstance(raw["tests"], str):
            raw["tests"] = [raw["tests"]]
        cfg = cls(**raw)
        cfg.validate(check_paths)
        return cfg

    def validate(self, check_paths: bool = True) -> None:
        _extraction(self.extraction)
        TrainConfig.from_dict({**self.training, "seed": self.seed})
        if not isinstance(self.K, int) or self.K < 1:
            raise ConfigInvalid("K", "must be a positive integer")
        if not 0 <= self.t <= 1:
            raise ConfigInvalid("t", "must lie in [0, 1]")
        kind = self.mode.get("kind", "batch")
        if kind not in MODES:
            raise ConfigInvalid("mode.kind", f"choose from {MODES}")
        if kind == "partial" and not 0 < float(self.mode.get("delta_omega", 0)) <= 360:
            raise ConfigInvalid("mode.delta_omega", "must lie in (0, 360]")
        if kind == "stream":
            for key in ("window", "stride"):
                if int(self.mode.get(key, 0)) < 1:
                    raise ConfigInvalid(f"mode.{key}", "must be >= 1")
        if self.tune is not None:
            for key in ("elastic", "plastic"):
                if len(self.tune.get(key, [])) < 2:
                    raise ConfigInvalid(f"tune.{key}", "needs >= 2 scans")
        if check_paths:
            paths = [("baseline", self.baseline), ("reference", self.reference)]
            paths += [(f"tests[{i}]", p) for i, p in enumerate(self.tests)]
            if self.tune:
                paths += [(f"tune.{g}[{i}]", p) for g in ("elastic", "plastic")
                          for i, p in enumerate(self.tune[g])]
            for name, p in paths:
                if not Path(p).exists():
                    raise ConfigInvalid(name, f"path does not exist: {p}")

    def hashable(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        return d


def load_run_config(path: str | Path | None, overrides: dict, check_paths: bool = True) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(p)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid("<config>", f"not valid JSON: {exc}") from exc
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("extraction", "training", "mode"):
            raw[key] = {**raw.get(key, {}), **value}
        else:
            raw[key] = value
    return RunConfig.from_dict(raw, check_paths)


def _evaluate(cfg_mode: dict, scans, encoder, cluster, extraction, seed, workers):
    kind = cfg_mode.get("kind", "batch")
    reports, streams = [], {}
    for i, scan in enumerate(scans):
        if kind == "batch":
            reports.append(evaluate_scan(scan, encoder, cluster, extraction, workers))
        elif kind == "partial":
            rng = np.random.default_rng([seed, 4, i])
            reports.append(partial_rei(scan, encoder, cluster, float(cfg_mode["delta_omega"]),
                                       int(cfg_mode.get("repeats", 20)), rng, extraction))
        else:
            points = list(stream_rei(stream_frames(scan), encoder, cluster, int(cfg_mode["window"]),
                                     int(cfg_mode["stride"]), extraction))
            streams[scan.scan_id] = [
                {"frame_index": p.frame_index, "omega": p.omega, "rei": p.rei, "n_patches": p.n_patches}
                for p in points]
            reports.append(evaluate_scan(scan, encoder, cluster, extraction, workers))
    return reports, streams


def run_pipeline(cfg: RunConfig, workers: int = 1) -> dict:
    """Train, cluster and evaluate; returns the run manifest (also written to disk)."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = canonical_hash(cfg.hashable())
    extraction = _extraction(cfg.extraction)
    train_cfg = TrainConfig.from_dict({**cfg.training, "seed": cfg.seed})
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    baseline = extract_dataset(load_scan(cfg.baseline), extraction, workers)
    reference = baseline if Path(cfg.reference).resolve() == Path(cfg.baseline).resolve() else \
        extract_dataset(load_scan(cfg.reference), extraction, workers)
    timings["extract_training_sets_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    encoder, train_log = train_encoder(baseline, train_cfg)
    encoder.extra = {"config_hash": config_hash}
    timings["train_s"] = time.perf_counter() - t0
    enc_path = save_encoder(encoder, out / "encoder.ckpt")
    train_log.to_csv(out / "training_log.csv", include_wall=False)

    k, t = cfg.K, cfg.t
    tune_summary = None
    if cfg.tune:
        t0 = time.perf_counter()
        el = [extract_dataset(load_scan(p), extraction, workers) for p in cfg.tune["elastic"]]
        pl = [extract_dataset(load_scan(p), extraction, workers) for p in cfg.tune["plastic"]]
        grid = tune_grid(encoder, reference, el, pl, cfg.tune.get("k_values", [10, 20, 40]),
                         cfg.tune.get("t_values", [0.3, 0.5, 0.7]), cfg.seed)
        grid.write(out / "tune_grid.csv", out / "tune_summary.json")
        k, t = grid.best_k, grid.best_t
        tune_summary = grid.summary()
        timings["tune_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cluster = fit_reference(reference, encoder, k, t, cfg.seed)
    cluster.meta.update({"config_hash": config_hash})
    clu_path = save_cluster(cluster, out / "cluster.bin")
    timings["cluster_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    scans = [load_scan(p) for p in cfg.tests]
    reports, streams = _evaluate(cfg.mode, scans, encoder, cluster, extraction, cfg.seed, workers)
    timings["eval_s"] = time.perf_counter() - t0
    extra = {"config_hash": config_hash, "seed": cfg.seed}
    write_reports(reports, out / "rei_report.csv", out / "rei_report.json", include_wall=False, extra=extra)
    if streams:
        (out / "rei_stream.json").write_text(json.dumps(streams, indent=2) + "\n", encoding="utf-8")

    manifest = {
        "versions": {"braggrei": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "config": asdict(cfg),
        "config_hash": config_hash,
        "seed": cfg.seed,
        "K": k,
        "t": t,
        "epochs_trained": encoder.epochs_trained,
        "selected_epochs": select_epochs(train_log) if len(train_log) >= train_cfg.plateau_window else None,
        "checksums": {
            "encoder_parameters": encoder.checksum(),
            "encoder.ckpt": file_sha256(enc_path),
            "cluster.bin": file_sha256(clu_path),
            "rei_report.csv": file_sha256(out / "rei_report.csv"),
        },
        "tune": tune_summary,
        "wall_seconds": {**timings, "per_dataset": {r.dataset_id: r.eval_wall_seconds for r in reports}},
        "workers": workers,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return manifest


# -- subcommands ---------------------------------------------------------

def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _params(pairs: list[str] | None) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigInvalid(pair, "expected key=value")
        key, value = pair.split("=", 1)
        out[key] = _json_arg(value)
    return out


def _extraction_from_args(args) -> ExtractionConfig:
    return _extraction({k: v for k, v in {
        "threshold": args.threshold, "mad_k": args.mad_k, "min_area": args.min_area,
        "max_area": args.max_area, "patch_size": args.patch_size}.items() if v is not None})


def cmd_synth(args) -> int:
    base = {}
    if args.base_config:
        base = json.loads(Path(args.base_config).read_text(encoding="utf-8"))
    if args.seed is not None:
        base["seed"] = args.seed
    protocol = {"scenario": args.scenario, **_params(args.param)}
    exp = generate_experiment(protocol, SyntheticScanConfig.from_dict(base).validate())
    paths = exp.write(args.out)
    for p, label in zip(paths, exp.labels):
        print(f"{p}\t{label}")
    return 0


def cmd_extract(args) -> int:
    ds = extract_dataset(load_scan(args.scan), _extraction_from_args(args), workers_from_env())
    save_dataset(ds, args.out)
    print(json.dumps({"dataset": str(args.out), "n_patches": len(ds), **ds.stats}, indent=2))
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    raw = {"seed": args.seed}
    for key in ("epochs", "lr", "steps_per_epoch", "batch_size", "tau"):
        v = getattr(args, key)
        if v is not None:
            raw[key] = v
    cfg = TrainConfig.from_dict(raw)
    encoder, train_log = train_encoder(ds, cfg, progress=lambda r: log.info(
        "epoch %d loss %.4f confidence_sum %.2f", r.epoch, r.loss_mean, r.confidence_sum))
    save_encoder(encoder, args.out)
    if args.log:
        train_log.to_csv(args.log)
    print(json.dumps({"encoder": str(args.out), "checksum": encoder.checksum(),
                      "epochs_trained": encoder.epochs_trained}, indent=2))
    return 0


def cmd_cluster(args) -> int:
    encoder = load_encoder(args.encoder)
    ds = load_dataset(args.dataset)
    model = fit_reference(ds, encoder, args.k, args.t, args.seed)
    save_cluster(model, args.out)
    print(json.dumps({"cluster": str(args.out), "K": model.k, "t": model.threshold,
                      "encoder_checksum": model.encoder_checksum}, indent=2))
    return 0


def cmd_eval(args) -> int:
    encoder = load_encoder(args.encoder)
    cluster = load_cluster(args.cluster)
    if args.t is not None:
        cluster = cluster.with_threshold(args.t)
    mode = {"kind": args.mode, "delta_omega": args.delta_omega, "repeats": args.repeats,
            "window": args.window, "stride": args.stride}
    if args.mode == "partial" and args.delta_omega is None:
        raise ConfigInvalid("delta_omega", "required in partial mode")
    if args.mode == "stream" and (args.window is None or args.stride is None):
        raise ConfigInvalid("window", "window and stride are required in stream mode")
    scans = [load_scan(p) for p in args.scan]
    reports, streams = _evaluate(mode, scans, encoder, cluster, _extraction_from_args(args), args.seed,
                                 workers_from_env())
    extra = {"seed": args.seed}
    write_reports(reports, args.out_csv, args.out_json, include_wall=not args.no_timing, extra=extra)
    if streams and args.stream_json:
        Path(args.stream_json).write_text(json.dumps(streams, indent=2) + "\n", encoding="utf-8")
    for r in reports:
        print(f"{r.dataset_id}\tn={r.n_patches}\trei={r.rei:.4f}")
    return 0


def cmd_tune(args) -> int:
    encoder = load_encoder(args.encoder)
    reference = load_dataset(args.reference)
    el = [load_dataset(p) for p in args.elastic]
    pl = [load_dataset(p) for p in args.plastic]
    grid = tune_grid(encoder, reference, el, pl, args.k_values, args.t_values, args.seed)
    grid.write(args.out_csv, args.out_json)
    print(json.dumps({"best_K": grid.best_k, "best_t": grid.best_t,
                      "rei_sensitivity": grid.best_value, "all_negative": grid.all_negative}))
    return 0


def cmd_pipeline(args) -> int:
    overrides = {"baseline": args.baseline, "reference": args.reference, "tests": args.test or None,
                 "output_dir": args.out, "seed": args.seed, "K": args.k, "t": args.t}
    if args.epochs is not None:
        overrides["training"] = {"epochs": args.epochs}
    cfg = load_run_config(args.config, overrides)
    manifest = run_pipeline(cfg, workers_from_env())
    print(json.dumps({"output_dir": cfg.output_dir, "config_hash": manifest["config_hash"],
                      "checksums": manifest["checksums"]}, indent=2))
    return 0


def _add_extraction_flags(p):
    p.add_argument("--threshold", type=float, help="absolute threshold in counts (default: median + k*MAD)")
    p.add_argument("--mad-k", type=float)
    p.add_argument("--min-area", type=int)
    p.add_argument("--max-area", type=int)
    p.add_argument("--patch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="braggrei", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled synthetic scan series")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-config", help="JSON file with SyntheticScanConfig fields")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="scenario parameter (JSON value)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract peak patches from a scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    _add_extraction_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the encoder on a baseline dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--log", help="training log CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cluster", help="fit reference K-means centres")
    p.add_argument("--dataset", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--t", type=float, default=DEFAULT_T)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", help="compute REI for test scans")
    p.add_argument("--scan", action="append", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--mode", choices=MODES, default="batch")
    p.add_argument("--delta-omega", type=float)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--t", type=float, help="override the stored threshold")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json")
    p.add_argument("--stream-json")
    p.add_argument("--no-timing", action="store_true", help="leave wall_s empty for byte-stable reports")
    _add_extraction_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="grid search (K, t) by REI sensitivity")
    p.add_argument("--encoder", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--elastic", nargs="+", required=True)
    p.add_argument("--plastic", nargs="+", required=True)
    p.add_argument("--k-values", type=int, nargs="+", default=[10, 20, 40])
    p.add_argument("--t-values", type=float, nargs="+", default=[0.3, 0.5, 0.7])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("pipeline", help="run all three phases from a config file")
    p.add_argument("--config")
    p.add_argument("--baseline")
    p.add_argument("--reference")
    p.add_argument("--test", action="append")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--t", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BraggReiError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
