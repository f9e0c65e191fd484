"""BYOL training of the patch encoder.

The online branch is encoder -> projector -> predictor; the target branch is
an EMA copy of encoder -> projector and never receives gradients.  Only the
online encoder is kept after training.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import BadFormat, ConfigInvalid, DivergedLoss, EmptyDataset, MissingFile, ShapeMismatch, ZeroVector
from .peak_extract import PatchDataset

EMBED_DIM = 32
PROJ_DIM = 64
PRED_DIM = 64
CONV_CHANNELS = (1, 8, 16, 32)
CONV_STRIDES = (1, 2, 2)
LEAKY_SLOPE = 0.01


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Named parameter container; subclasses fill ``self.params`` in a fixed order."""

    def __init__(self):
        self.params: dict[str, tc.Tensor] = {}

    def parameters(self) -> list[tc.Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype).copy()

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self


class Encoder(Module):
    """Three 3x3 conv + leaky ReLU stages and global average pooling to 32 features."""

    def __init__(self, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (cin, cout) in enumerate(zip(CONV_CHANNELS[:-1], CONV_CHANNELS[1:]), start=1):
            self.params[f"conv{i}.weight"] = tc.Tensor(_he(rng, (cout, cin, 3, 3), cin * 9, dtype),
                                                       requires_grad=True, name=f"conv{i}.weight")
            self.params[f"conv{i}.bias"] = tc.Tensor(np.zeros(cout, dtype), requires_grad=True,
                                                     name=f"conv{i}.bias")

    def __call__(self, x: tc.Tensor) -> tc.Tensor:
        for i, stride in enumerate(CONV_STRIDES, start=1):
            x = tc.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"],
                          stride=stride, pad=1)
            x = tc.leaky_relu(x, LEAKY_SLOPE)
        return tc.global_avg_pool(x)


class MLP(Module):
    """Two fully connected layers; the hidden layer is batch-normalized then ReLU'd."""

    def __init__(self, dims, rng=None, dtype=np.float32, norm: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        d_in, d_hidden, d_out = dims
        self.dims = tuple(dims)
        self.norm = norm
        self.params["fc1.weight"] = tc.Tensor(_he(rng, (d_in, d_hidden), d_in, dtype), requires_grad=True)
        self.params["fc1.bias"] = tc.Tensor(np.zeros(d_hidden, dtype), requires_grad=True)
        if norm:
            self.params["bn.gamma"] = tc.Tensor(np.ones(d_hidden, dtype), requires_grad=True)
            self.params["bn.beta"] = tc.Tensor(np.zeros(d_hidden, dtype), requires_grad=True)
        self.params["fc2.weight"] = tc.Tensor(_he(rng, (d_hidden, d_out), d_hidden, dtype), requires_grad=True)
        self.params["fc2.bias"] = tc.Tensor(np.zeros(d_out, dtype), requires_grad=True)

    def __call__(self, x: tc.Tensor) -> tc.Tensor:
        h = tc.linear(x, self.params["fc1.weight"], self.params["fc1.bias"])
        if self.norm:
            h = tc.batch_norm(h, self.params["bn.gamma"], self.params["bn.beta"])
        h = tc.relu(h)
        return tc.linear(h, self.params["fc2.weight"], self.params["fc2.bias"])


@dataclass
class EncoderModel:
    encoder: Encoder
    patch_size: int = 15
    seed: int = 0
    epochs_trained: int = 0
    training_set_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def embed_dim(self) -> int:
        return EMBED_DIM

    def checksum(self) -> str:
        return parameter_checksum(self.encoder.named_arrays())

    def embed(self, patches: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Embeddings (N, 32) for an (N, P, P) stack; no tape is built."""
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim == 2:
            patches = patches[None]
        out = np.empty((len(patches), EMBED_DIM), dtype=np.float32)
        with_grad = [p.requires_grad for p in self.encoder.parameters()]
        self.encoder.requires_grad_(False)
        try:
            for start in range(0, len(patches), batch_size):
                chunk = patches[start:start + batch_size, None]
                out[start:start + len(chunk)] = self.encoder(tc.Tensor(chunk)).data
        finally:
            for p, flag in zip(self.encoder.parameters(), with_grad):
                p.requires_grad = flag
        return out


def parameter_checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        h.update(name.encode())
        h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
        h.update(arr.tobytes())
    return h.hexdigest()


# -- augmentation --------------------------------------------------------

@dataclass
class AugmentationConfig:
    flip_h: float = 0.5
    flip_v: float = 0.5
    rot90: bool = True
    max_shift: int = 2
    scale_low: float = 0.8
    scale_high: float = 1.2
    noise_sigma: float = 0.01

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(flip_h=0.0, flip_v=0.0, rot90=False, max_shift=0, scale_low=1.0,
                   scale_high=1.0, noise_sigma=0.0)


@dataclass
class Transform:
    flip_h: bool
    flip_v: bool
    quarter_turns: int
    shift: tuple[int, int]
    scale: float
    noise: np.ndarray | None


def draw_transform(cfg: AugmentationConfig, rng: np.random.Generator, patch_size: int) -> Transform:
    flip_h = bool(rng.random() < cfg.flip_h)
    flip_v = bool(rng.random() < cfg.flip_v)
    turns = int(rng.integers(0, 4)) if cfg.rot90 else 0
    if cfg.max_shift > 0:
        dy, dx = (int(v) for v in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
    else:
        dy = dx = 0
    s = float(rng.uniform(cfg.scale_low, cfg.scale_high)) if cfg.scale_high > cfg.scale_low else cfg.scale_low
    noise = None
    if cfg.noise_sigma > 0:
        noise = (rng.standard_normal((patch_size, patch_size)) * cfg.noise_sigma).astype(np.float32)
    return Transform(flip_h, flip_v, turns, (dy, dx), s, noise)


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(x)
    h, w = x.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = x[ys, xs]
    return out


def apply_transform(pixels: np.ndarray, t: Transform) -> np.ndarray:
    x = np.asarray(pixels, dtype=np.float32)
    if t.flip_h:
        x = x[:, ::-1]
    if t.flip_v:
        x = x[::-1, :]
    if t.quarter_turns:
        x = np.rot90(x, t.quarter_turns)
    if t.shift != (0, 0):
        x = _shift(x, *t.shift)
    if t.scale != 1.0 or t.noise is not None:
        x = x * np.float32(t.scale)
        if t.noise is not None:
            x = np.maximum(x + t.noise, 0.0)
        peak = x.max()
        x = x / peak if peak > 0 else x
    return np.ascontiguousarray(x, dtype=np.float32)


def augment(patch, cfg: AugmentationConfig, rng: np.random.Generator):
    """Random view of a patch (PeakPatch or bare P x P array), same type as given."""
    pixels = patch.pixels if hasattr(patch, "pixels") else np.asarray(patch)
    out = apply_transform(pixels, draw_transform(cfg, rng, pixels.shape[0]))
    if hasattr(patch, "pixels"):
        from dataclasses import replace
        return replace(patch, pixels=out)
    return out


def augment_batch(patches: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    size = patches.shape[-1]
    return np.stack([apply_transform(p, draw_transform(cfg, rng, size)) for p in patches])


# -- loss / EMA ----------------------------------------------------------

def byol_loss(online_pred, target_proj) -> tc.Tensor:
    """Mean over rows of ``2 - 2 cos(p, z)``.

    Stack both views as ``[p(v1); p(v2)]`` against ``[z(v2); z(v1)]`` to get
    the symmetrized loss.  ``target_proj`` is treated as a constant.
    """
    p = tc.as_tensor(online_pred)
    z = tc.as_tensor(target_proj)
    z = tc.Tensor(z.data)  # stop-gradient
    if p.shape != z.shape:
        raise ShapeMismatch(f"byol_loss: {p.shape} vs {z.shape}")
    for name, t in (("online_pred", p), ("target_proj", z)):
        norms = np.sqrt((t.data.astype(np.float64) ** 2).sum(axis=-1))
        if np.any(norms < 1e-12):
            raise ZeroVector(f"byol_loss: {name} has a zero-norm vector")
    sim = tc.cosine_similarity(p, z)
    per_row = tc.scale(tc.sub(tc.Tensor(np.ones_like(sim.data)), sim), 2.0)
    return tc.mean(per_row)


def ema_update(target: Module, online: Module, tau: float) -> Module:
    """theta_target <- tau * theta_target + (1 - tau) * theta_online, in place."""
    if set(target.params) != set(online.params):
        raise ShapeMismatch("ema_update: parameter names differ")
    for name, tp in target.params.items():
        op = online.params[name]
        if tp.shape != op.shape:
            raise ShapeMismatch(f"ema_update: {name} {tp.shape} vs {op.shape}")
    for name, tp in target.params.items():
        op = online.params[name]
        t = tp.dtype.type(tau)
        tp.data = (t * tp.data + (1 - t) * op.data).astype(tp.dtype)
    return target


def clone_module(module: Module) -> Module:
    new = object.__new__(type(module))
    new.__dict__.update(module.__dict__)
    new.params = {k: tc.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name)
                  for k, v in module.params.items()}
    return new


@dataclass
class BYOLState:
    online_encoder: Encoder
    online_projector: MLP
    predictor: MLP
    target_encoder: Encoder
    target_projector: MLP
    tau: float = 0.99
    seed: int = 0

    @classmethod
    def create(cls, seed: int = 0, tau: float = 0.99, dtype=np.float32) -> "BYOLState":
        if not 0 < tau < 1:
            raise ConfigInvalid("tau", "must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        enc = Encoder(rng, dtype)
        proj = MLP((EMBED_DIM, PROJ_DIM, PROJ_DIM), rng, dtype)
        pred = MLP((PROJ_DIM, PRED_DIM, PRED_DIM), rng, dtype)
        t_enc = clone_module(enc).requires_grad_(False)
        t_proj = clone_module(proj).requires_grad_(False)
        return cls(enc, proj, pred, t_enc, t_proj, tau, seed)

    def online_modules(self) -> list[Module]:
        return [self.online_encoder, self.online_projector, self.predictor]

    def target_modules(self) -> list[Module]:
        return [self.target_encoder, self.target_projector]

    def online_parameters(self) -> list[tc.Tensor]:
        return [p for m in self.online_modules() for p in m.parameters()]

    def target_parameters(self) -> list[tc.Tensor]:
        return [p for m in self.target_modules() for p in m.parameters()]

    def loss(self, view1: np.ndarray, view2: np.ndarray) -> tc.Tensor:
        """Symmetrized BYOL loss for two (B, P, P) batches of views."""
        x = tc.Tensor(np.concatenate([view1, view2])[:, None].astype(self.dtype))
        p = self.predictor(self.online_projector(self.online_encoder(x)))
        z = self.target_projector(self.target_encoder(x)).data
        b = len(view1)
        z_swapped = np.concatenate([z[b:], z[:b]])
        return byol_loss(p, z_swapped)

    @property
    def dtype(self):
        return self.online_encoder.params["conv1.weight"].dtype

    def step(self, view1, view2, lr: float) -> float:
        for m in self.online_modules():
            m.zero_grad()
        loss = self.loss(view1, view2)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergedLoss(f"non-finite BYOL loss {value}")
        loss.backward()
        tc.sgd_update(self.online_parameters(), lr)
        ema_update(self.target_encoder, self.online_encoder, self.tau)
        ema_update(self.target_projector, self.online_projector, self.tau)
        return value


# -- confidence summation -------------------------------------------------

def probe_confidence(distances, true_index: int) -> float:
    """Margin ``|D1 - D2| / D2`` if the true partner is nearest, else -1."""
    d = np.asarray(distances, dtype=np.float64)
    order = np.argsort(d, kind="stable")
    if order[0] != true_index:
        return -1.0
    d1, d2 = d[order[0]], d[order[1]]
    if d2 <= 0:
        return 0.0
    return abs(d1 - d2) / d2


def confidence_sum(encoder: EncoderModel, dataset: PatchDataset, rng: np.random.Generator,
                   n_probe: int = 100, n_candidates: int = 10,
                   aug: AugmentationConfig | None = None) -> float:
    """Sum of per-probe confidences; each probe's transformed view must find its own source."""
    n = len(dataset)
    if n < n_candidates + 1 or n == 0:
        raise EmptyDataset(f"confidence_sum needs >= {n_candidates + 1} patches, got {n}")
    aug = aug or AugmentationConfig()
    size = dataset.patch_size
    views, candidates = [], []
    for _ in range(n_probe):
        i = int(rng.integers(n))
        others = rng.choice(n - 1, size=n_candidates - 1, replace=False)
        others = others + (others >= i)
        views.append(apply_transform(dataset.patches[i], draw_transform(aug, rng, size)))
        candidates.append(np.concatenate([[i], others]))
    cand_idx = np.stack(candidates)
    emb_views = encoder.embed(np.stack(views)).astype(np.float64)
    emb_cands = encoder.embed(dataset.patches[cand_idx.ravel()]).astype(np.float64)
    emb_cands = emb_cands.reshape(n_probe, n_candidates, -1)
    score = 0.0
    for k in range(n_probe):
        d = np.linalg.norm(emb_cands[k] - emb_views[k], axis=1)
        score += probe_confidence(d, 0)
    return float(score)


def representation_check(encoder: EncoderModel, dataset: PatchDataset, rng: np.random.Generator,
                         n: int = 100, aug: AugmentationConfig | None = None) -> dict:
    """Median cosine distance to augmented views vs to random other patches."""
    if len(dataset) < 2:
        raise EmptyDataset("representation_check needs at least 2 patches")
    aug = aug or AugmentationConfig()
    size = dataset.patch_size
    anchors = rng.integers(len(dataset), size=n)
    others = rng.integers(len(dataset) - 1, size=n)
    others = others + (others >= anchors)
    views = np.stack([apply_transform(dataset.patches[i], draw_transform(aug, rng, size)) for i in anchors])
    e_anchor = encoder.embed(dataset.patches[anchors]).astype(np.float64)
    e_view = encoder.embed(views).astype(np.float64)
    e_other = encoder.embed(dataset.patches[others]).astype(np.float64)
    aug_d = cosine_distances(e_anchor, e_view)
    rnd_d = cosine_distances(e_anchor, e_other)
    med_aug, med_rnd = float(np.median(aug_d)), float(np.median(rnd_d))
    return {"median_augmented": med_aug, "median_random": med_rnd,
            "ratio": med_aug / med_rnd if med_rnd > 0 else float("inf")}


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return tc.cosine_distance(tc.Tensor(a), tc.Tensor(b)).data


# -- training ------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    steps_per_epoch: int | None = None  # sampled patches per epoch; None -> min(len, 5000)
    batch_size: int = 64
    lr: float = 0.1
    tau: float = 0.99
    seed: int = 0
    n_probe: int = 100
    n_candidates: int = 10
    early_stop: bool = False
    plateau_window: int = 20
    plateau_frac: float = 0.05
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigInvalid("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size", "must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigInvalid("steps_per_epoch", "must be >= 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigInvalid("lr", "must be a finite non-negative number")
        if not 0 < self.tau < 1:
            raise ConfigInvalid("tau", "must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        aug = raw.pop("augmentation", None)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown training option")
        cfg = cls(**raw)
        if aug is not None:
            cfg.augmentation = AugmentationConfig(**aug)
        return cfg.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss_mean: float
    confidence_sum: float
    wall_ms: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def confidence(self) -> list[float]:
        return [r.confidence_sum for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r.loss_mean for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path, include_wall: bool = True) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss_mean", "confidence_sum", "wall_ms"])
            for r in self.records:
                writer.writerow([r.epoch, repr(float(r.loss_mean)), repr(float(r.confidence_sum)),
                                 f"{r.wall_ms:.3f}" if include_wall else ""])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainingLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["loss_mean"]), float(r["confidence_sum"]),
                                float(r["wall_ms"]) if r["wall_ms"] else 0.0) for r in rows])


def train_encoder(baseline: PatchDataset, cfg: TrainConfig | None = None, progress=None):
    """Train on ``baseline``; returns ``(EncoderModel, TrainingLog)``."""
    cfg = (cfg or TrainConfig()).validate()
    if len(baseline) == 0:
        raise EmptyDataset("baseline dataset holds no patches")
    state = BYOLState.create(cfg.seed, cfg.tau)
    rng = np.random.default_rng([cfg.seed, 1])
    probe_rng = np.random.default_rng([cfg.seed, 2])
    n = len(baseline)
    per_epoch = cfg.steps_per_epoch or min(n, 5000)
    log = TrainingLog()
    model = EncoderModel(state.online_encoder, baseline.patch_size, cfg.seed, 0, baseline.dataset_id)
    can_probe = n >= cfg.n_candidates + 1
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        remaining = per_epoch
        while remaining > 0:
            b = min(cfg.batch_size, remaining)
            remaining -= b
            idx = rng.integers(n, size=b)
            batch = baseline.patches[idx]
            v1 = augment_batch(batch, cfg.augmentation, rng)
            v2 = augment_batch(batch, cfg.augmentation, rng)
            losses.append(state.step(v1, v2, cfg.lr))
        model.epochs_trained = epoch
        conf = (confidence_sum(model, baseline, probe_rng, cfg.n_probe, cfg.n_candidates, cfg.augmentation)
                if can_probe else float("nan"))
        record = EpochRecord(epoch, float(np.mean(losses)), conf, (time.perf_counter() - t0) * 1e3)
        log.records.append(record)
        if progress is not None:
            progress(record)
        if cfg.early_stop and can_probe and epoch >= cfg.plateau_window:
            from .hyper_tune import plateau_reached
            if plateau_reached(log.confidence, cfg.plateau_window, cfg.plateau_frac):
                break
    return model, log


# -- checkpoint I/O ------------------------------------------------------

CHECKPOINT_MAGIC = b"BRGREIENC"
CHECKPOINT_VERSION = 1


def architecture_descriptor() -> dict:
    return {
        "kind": "conv_encoder",
        "channels": list(CONV_CHANNELS),
        "strides": list(CONV_STRIDES),
        "kernel": 3,
        "padding": 1,
        "activation": "leaky_relu",
        "leaky_slope": LEAKY_SLOPE,
        "pool": "global_avg",
        "embed_dim": EMBED_DIM,
    }


def save_encoder(model: EncoderModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "architecture": architecture_descriptor(),
        "patch_size": model.patch_size,
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
        "training_set_id": model.training_set_id,
        "checksum": model.checksum(),
        **({"extra": model.extra} if model.extra else {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = model.encoder.named_arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_encoder(path: str | Path) -> EncoderModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise BadFormat(f"{path}: not an encoder checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise BadFormat(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        if header["architecture"] != architecture_descriptor():
            raise BadFormat(f"{path}: architecture descriptor does not match this build")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise BadFormat(f"{path}: truncated tensor {name}")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadFormat(f"{path}: corrupt checkpoint ({exc})") from exc
    enc = Encoder()
    enc.load_arrays(arrays)
    model = EncoderModel(enc, header["patch_size"], header["seed"], header["epochs_trained"],
                         header["training_set_id"], header.get("extra", {}))
    if header.get("checksum") and header["checksum"] != model.checksum():
        raise BadFormat(f"{path}: parameter checksum mismatch")
    return model
