"""Training (Adam + cross-entropy), checkpoints, and evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocks import ArchConfig, Model, model_logits, predict_classes
from .data import (HsiCube, PatchSet, SplitSpec, extract_patches, load_cube, patches_at,
                   pca_reduce, stratified_split)
from .metrics import ConfusionMatrix, excluded_classes, metrics_from_confusion, per_class_accuracy
from .routes import Route

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass
class TrainConfig:
    dataset: str = ""
    patch_size: int = 13
    pca_dim: int = 30
    route: str = "parallel_spectral_spatial"
    embed_dim: int = 32
    depth: int = 1
    state_size: int = 16
    expansion: int = 2
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.001
    seed: int = 0
    train_fraction: float = 0.1

    def __post_init__(self):
        try:
            self.route = Route.parse(self.route).slug
        except ValueError as e:
            raise ConfigError(str(e)) from None
        ints = ("patch_size", "pca_dim", "embed_dim", "depth", "state_size", "expansion", "epochs", "batch_size")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if min(self.pca_dim, self.embed_dim, self.state_size, self.expansion, self.batch_size) < 1:
            raise ConfigError("dimensions and batch_size must be >= 1")
        if self.depth < 0 or self.epochs < 0:
            raise ConfigError("depth and epochs must be >= 0")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def arch(self, n_classes: int, **overrides) -> ArchConfig:
        return ArchConfig(n_classes=n_classes, patch_size=self.patch_size, pca_dim=self.pca_dim,
                          embed_dim=self.embed_dim, depth=self.depth, state_size=self.state_size,
                          expansion=self.expansion, route=self.route, **overrides)


# ---------------------------------------------------------------- checkpoint

@dataclass(frozen=True)
class ModelCheckpoint:
    config: TrainConfig
    arch: ArchConfig
    state: dict[str, np.ndarray]          # parameters and batch-norm buffers
    pca_basis: np.ndarray
    pca_mean: np.ndarray
    class_names: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, config: TrainConfig, pca_basis, pca_mean, class_names=(), metadata=None):
        state = {k: np.array(v, dtype=np.float64) for k, v in model.state().items()}
        return cls(config, model.arch, state, np.array(pca_basis, dtype=np.float64),
                   np.array(pca_mean, dtype=np.float64), tuple(class_names), dict(metadata or {}))

    def to_model(self) -> Model:
        model = Model.init(self.arch, np.random.default_rng(0))
        model.load_state(self.state)
        return model

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def reduce(self, radiance: np.ndarray) -> np.ndarray:
        return (np.asarray(radiance, dtype=np.float64) - self.pca_mean) @ self.pca_basis

    def _arrays(self) -> dict[str, np.ndarray]:
        return {**self.state, "pca.basis": self.pca_basis, "pca.mean": self.pca_mean}

    def save(self, path) -> None:
        arrays = self._arrays()
        header = {
            "format": "hsimamba-checkpoint", "version": 1,
            "config": self.config.to_dict(), "arch": self.arch.to_dict(),
            "class_names": list(self.class_names), "metadata": self.metadata,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        raw = Path(path).read_bytes()
        if len(raw) < 8:
            raise ValueError(f"{path}: not a checkpoint (too short)")
        (n,) = struct.unpack_from("<Q", raw, 0)
        if 8 + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(raw[8:8 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ValueError(f"{path}: corrupt checkpoint header") from None
        if header.get("format") != "hsimamba-checkpoint":
            raise ValueError(f"{path}: not a checkpoint")
        payload = raw[8 + n:]
        expected = sum(int(np.prod(t["shape"])) for t in header["tensors"]) * 8
        if len(payload) != expected:
            raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
        arrays, off = {}, 0
        for t in header["tensors"]:
            count = int(np.prod(t["shape"]))
            arrays[t["name"]] = np.frombuffer(payload, "<f8", count, off).reshape(t["shape"]).astype(np.float64)
            off += count * 8
        basis, mean = arrays.pop("pca.basis"), arrays.pop("pca.mean")
        return cls(TrainConfig.from_dict(header["config"]), ArchConfig.from_dict(header["arch"]),
                   arrays, basis, mean, tuple(header["class_names"]), header["metadata"])


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: list[ad.Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# ------------------------------------------------------------------- train

@dataclass
class Prepared:
    patches: PatchSet
    split: SplitSpec
    pca_basis: np.ndarray
    pca_mean: np.ndarray
    class_names: list[str]
    n_classes: int


def prepare(config: TrainConfig, cube: HsiCube | None = None) -> Prepared:
    cube = cube if cube is not None else load_cube(config.dataset)
    reduced = pca_reduce(cube, config.pca_dim)
    ps = extract_patches(reduced, cube.labels, config.patch_size)
    split = stratified_split(ps.center_labels, config.train_fraction, config.seed)
    return Prepared(ps, split, reduced.basis, reduced.mean, list(cube.class_names), cube.n_classes)


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(shuffle_seq)


def train_model(model: Model, X: np.ndarray, y: np.ndarray, epochs: int, batch_size: int,
                lr: float, shuffle_rng: np.random.Generator) -> list[float]:
    """Mini-batch Adam on mean cross-entropy; ``y`` holds 0-based class indices.

    Returns the per-epoch mean training loss.
    """
    params = list(model.named_parameters().values())
    opt = Adam(params, lr)
    history = []
    n = len(y)
    for epoch in range(1, epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, batch_size):
                idx = perm[start:start + batch_size]
                with ad.Tape() as tape:
                    loss = ad.cross_entropy(model_logits(X[idx], model, training=True), y[idx])
                opt.step(tape.grad(loss, params))
                total += float(loss.data) * len(idx)
        except FloatingPointError as e:
            raise DivergenceError(epoch, str(e)) from None
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch)
        history.append(epoch_loss)
        log.info("epoch %d/%d loss %.6f", epoch, epochs, epoch_loss)
    return history


def train(config: TrainConfig, cube: HsiCube | None = None, prepared: Prepared | None = None,
          **arch_overrides) -> ModelCheckpoint:
    prep = prepared or prepare(config, cube)
    arch = config.arch(prep.n_classes, **arch_overrides)
    init_rng, shuffle_rng = _rngs(config.seed)
    model = Model.init(arch, init_rng)
    tr = prep.split.train_idx
    X = prep.patches.patches[tr]
    y = prep.patches.center_labels[tr] - 1
    history = train_model(model, X, y, config.epochs, config.batch_size, config.learning_rate, shuffle_rng)
    meta = {"epoch": config.epochs, "final_loss": history[-1] if history else None,
            "seed": config.seed, "loss_history": history, "n_train": int(len(tr))}
    return ModelCheckpoint.from_model(model, config, prep.pca_basis, prep.pca_mean, prep.class_names, meta)


# ---------------------------------------------------------------- evaluate

@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray      # NaN where a class has no test samples
    excluded: list[int]
    y_true: np.ndarray
    y_pred: np.ndarray

    def summary(self) -> str:
        lines = [f"OA    {self.oa:.4f}", f"AA    {self.aa:.4f}", f"Kappa {self.kappa:.4f}"]
        for i, acc in enumerate(self.per_class, start=1):
            lines.append(f"class {i:3d}  " + ("excluded (no test samples)" if np.isnan(acc) else f"{acc:.4f}"))
        return "\n".join(lines)


def evaluate(checkpoint: ModelCheckpoint, dataset: HsiCube | str | Path,
             split: SplitSpec | None = None, predictor=None) -> EvalResult:
    """Score the checkpoint on the test part of ``split``.

    Without an explicit split, the training split is rebuilt from the
    checkpoint's seed and train fraction. ``predictor(patches) -> labels``
    replaces the network (used for stub predictors).
    """
    cube = dataset if isinstance(dataset, HsiCube) else load_cube(dataset)
    if cube.n_classes != checkpoint.n_classes:
        raise ValueError(f"dataset has {cube.n_classes} classes, checkpoint expects {checkpoint.n_classes}")
    if cube.shape[2] != checkpoint.pca_mean.shape[0]:
        raise ValueError(f"dataset has {cube.shape[2]} bands, checkpoint expects {checkpoint.pca_mean.shape[0]}")
    scores = checkpoint.reduce(cube.radiance)
    coords = np.argwhere(cube.labels > 0)
    labels = cube.labels[cube.labels > 0].astype(np.int64)
    if split is None:
        split = stratified_split(labels, checkpoint.config.train_fraction, checkpoint.config.seed)
    test = split.test_idx
    if len(test) == 0:
        raise ValueError("split has no test samples")
    patches = patches_at(scores, coords[test], checkpoint.arch.patch_size)
    if predictor is None:
        model = checkpoint.to_model()
        y_pred = predict_classes(patches, model)
    else:
        y_pred = np.asarray(predictor(patches))
    y_true = labels[test]
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, checkpoint.n_classes)
    oa, aa, kappa = metrics_from_confusion(cm)
    return EvalResult(cm, oa, aa, kappa, per_class_accuracy(cm), excluded_classes(cm), y_true, y_pred)
