"""The two convolutional autoencoders, the built-in training configurations
and the mini-batch Adam training loop.
"""
from __future__ import annotations

import csv
import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as _rng
from .nn import (
    Adam,
    BatchNorm,
    ClippedReLU,
    Conv2D,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool2D,
    NonFiniteError,
    ReLU,
    Reshape,
    Sequential,
    TConv2D,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
)
from .patches import DatasetSplit, augment_batch, draw_ops

LATENT_DIM = 10
INPUT_SIZE = {"cae-a": 17, "cae-b": 16}
# value range each architecture works in; patches arrive normalized to [-1, 1]
DATA_RANGE = {"cae-a": (-1.0, 1.0), "cae-b": (0.0, 1.0), "identity": (-1.0, 1.0)}
DECAY_EVERY = 25
_EVAL_CHUNK = 1024


def parse_arch(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    key = {"a": "cae-a", "b": "cae-b", "caea": "cae-a", "caeb": "cae-b"}.get(key, key)
    if key not in INPUT_SIZE:
        raise ValueError(f"unknown architecture {name!r} (expected cae-a or cae-b)")
    return key


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "cae-a"
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        object.__setattr__(self, "arch", parse_arch(self.arch))
        if self.latent_dim != LATENT_DIM:
            raise ValueError(f"both architectures use a {LATENT_DIM}-dimensional latent space")

    @property
    def input_size(self) -> int:
        return INPUT_SIZE[self.arch]


def cae_a_layers() -> tuple[list, int]:
    """Layers of CAE-A and the index of the latent layer."""
    layers = [
        Conv2D(16, 3, 1, padding=1, name="conv1"),
        ReLU(name="relu1"),
        MaxPool2D(2, 2, name="pool1"),
        Conv2D(9, 3, 1, padding=1, name="conv2"),
        ReLU(name="relu2"),
        MaxPool2D(2, 2, name="pool2"),
        Flatten(name="flatten"),
        Dense(LATENT_DIM, name="latent"),
        Dense(144, name="dense2"),
        Reshape((4, 4, 9), name="reshape"),
        TConv2D(16, 3, 2, padding=1, output_padding=1, name="tconv1"),
        ReLU(name="relu3"),
        TConv2D(1, 5, 2, padding=1, output_padding=0, name="tconv2"),
    ]
    return layers, 7


def cae_b_layers() -> tuple[list, int]:
    """Layers of CAE-B and the index of the latent layer.

    The last transposed convolution keeps 16x16 (stride 1) and a 1x1
    convolution merges its four channels into the single output channel,
    clipped back into [0, 1].
    """
    layers = []
    for i, filters in enumerate((32, 24, 16, 8), start=1):
        layers += [
            Conv2D(filters, 3, 1, padding=1, name=f"conv{i}"),
            LeakyReLU(0.01, name=f"lrelu{i}"),
            MaxPool2D(2, 2, name=f"pool{i}"),
        ]
    layers += [Flatten(name="flatten"), Dense(LATENT_DIM, name="latent")]
    latent_index = len(layers) - 1
    layers += [
        Dense(2 * 2 * 24, name="project"),
        Reshape((2, 2, 24), name="proj_reshape"),
        TConv2D(24, 3, 2, padding=1, output_padding=1, name="tconv1"),
        LeakyReLU(0.01, name="lrelu5"),
        TConv2D(16, 3, 2, padding=1, output_padding=1, name="tconv2"),
        BatchNorm(name="bn"),
        LeakyReLU(0.01, name="lrelu6"),
        TConv2D(8, 3, 2, padding=1, output_padding=1, name="tconv3"),
        LeakyReLU(0.01, name="lrelu7"),
        TConv2D(4, 3, 1, padding=1, name="tconv4"),
        ClippedReLU(name="crelu"),
        Conv2D(1, 1, 1, name="merge"),
        ClippedReLU(name="crelu_out"),
    ]
    return layers, latent_index


class Autoencoder:
    """A :class:`Sequential` split at its latent layer, plus the value range it works in."""

    def __init__(self, net: Sequential, arch: str, latent_index: int, data_range: tuple[float, float]):
        self.net = net
        self.arch = arch
        self.latent_index = latent_index
        self.data_range = tuple(float(v) for v in data_range)

    @property
    def input_size(self) -> int:
        return self.net.input_shape[0]

    def to_model_space(self, patches: np.ndarray) -> np.ndarray:
        """Map normalized [-1, 1] patches into the network's data range."""
        lo, hi = self.data_range
        x = np.asarray(patches, dtype=np.float64)
        if (lo, hi) != (-1.0, 1.0):
            x = lo + (x + 1.0) * (hi - lo) / 2.0
        return x.astype(self.net.dtype)

    def _batched(self, patches: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(patches)
        single = x.ndim == 2
        if single:
            x = x[None]
        p = self.input_size
        if x.shape[1:] not in ((p, p), (p, p, 1)):
            raise ValueError(f"{self.arch} expects {p}x{p} patches, got {x.shape[1:]}")
        return x.reshape(len(x), p, p, 1), single

    def encode(self, patches: np.ndarray) -> np.ndarray:
        """Latent vectors for model-space patches, (N, P, P) -> (N, 10)."""
        x, single = self._batched(patches)
        out = np.concatenate(
            [self.net.forward(x[i : i + _EVAL_CHUNK], stop=self.latent_index + 1) for i in range(0, max(len(x), 1), _EVAL_CHUNK)]
        )
        return out[0] if single else out

    def reconstruct(self, patches: np.ndarray) -> np.ndarray:
        x, single = self._batched(patches)
        p = self.input_size
        out = np.concatenate([self.net.forward(x[i : i + _EVAL_CHUNK]) for i in range(0, max(len(x), 1), _EVAL_CHUNK)])
        out = out.reshape(len(x), p, p)
        return out[0] if single else out

    def header(self) -> dict:
        return {"arch": self.arch, "latent_index": self.latent_index, "data_range": list(self.data_range)}

    def save(self, path, meta: dict | None = None) -> Path:
        return save_checkpoint(path, self.net, {**(meta or {}), "model": self.header()})

    @classmethod
    def load(cls, path) -> tuple[Autoencoder, dict]:
        net, header = load_checkpoint(path)
        model = header.pop("model")
        return cls(net, model["arch"], model["latent_index"], tuple(model["data_range"])), header


def build_model(spec: ModelSpec | str = "cae-a", seed: int = 0, dtype=np.float32) -> Autoencoder:
    spec = ModelSpec(spec) if isinstance(spec, str) else spec
    layers, latent_index = cae_a_layers() if spec.arch == "cae-a" else cae_b_layers()
    p = spec.input_size
    net = Sequential(layers, (p, p, 1), seed=seed, dtype=dtype)
    return Autoencoder(net, spec.arch, latent_index, DATA_RANGE[spec.arch])


def identity_model(patch_size: int) -> Autoencoder:
    """Parameter-free autoencoder whose reconstruction is its input (for smoke tests)."""
    net = Sequential([Flatten(name="flatten"), Reshape((patch_size, patch_size, 1), name="reshape")], (patch_size, patch_size, 1))
    return Autoencoder(net, "identity", 0, DATA_RANGE["identity"])


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    name: str = "baseline"
    lr: float = 0.001
    batch: int = 1024
    patches_per_image: int = 3000
    epochs: int = 100
    lr_decay: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.patches_per_image < 1:
            raise ValueError(f"patches_per_image must be >= 1, got {self.patches_per_image}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decay halves it every 25 epochs."""
        if not self.lr_decay:
            return self.lr
        return self.lr * 0.5 ** ((epoch - 1) // DECAY_EVERY)

    def with_overrides(self, **kw) -> TrainConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)


_BUILTIN = (
    TrainConfig("baseline", 0.001, 1024, 3000, 100),
    TrainConfig("lower_lr", 0.0001, 1024, 3000, 100),
    TrainConfig("small_batch", 0.001, 256, 3000, 100),
    TrainConfig("large_batch", 0.002, 2048, 3000, 100),
    TrainConfig("more_patches", 0.001, 1024, 4900, 100),
    TrainConfig("extended_training", 0.001, 1024, 3000, 200),
    TrainConfig("lr_decay", 0.001, 1024, 3000, 100, lr_decay=True),
)

DISPLAY_NAMES = {
    "baseline": "Baseline",
    "lower_lr": "Lower Learning Rate",
    "small_batch": "Small Batch",
    "large_batch": "Large Batch",
    "more_patches": "More Patches",
    "extended_training": "Extended Training",
    "lr_decay": "Learning Rate Decay",
}


def builtin_configs() -> list[TrainConfig]:
    return list(_BUILTIN)


def get_config(name: str) -> TrainConfig:
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    key = {"lower_learning_rate": "lower_lr", "learning_rate_decay": "lr_decay", "extended": "extended_training"}.get(key, key)
    for cfg in _BUILTIN:
        if cfg.name == key:
            return cfg
    raise ValueError(f"unknown training config {name!r} (choose from {', '.join(c.name for c in _BUILTIN)})")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    lr: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def final_val_loss(self) -> float:
        return self.records[-1].val_loss if self.records else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}"])


class TrainingAborted(NonFiniteError):
    def __init__(self, message: str, log: TrainLog):
        super().__init__(message)
        self.log = log


def batch_loss(model: Autoencoder, x: np.ndarray) -> float:
    """Mean squared reconstruction error over model-space patches, inference mode."""
    if len(x) == 0:
        return math.nan
    total = 0.0
    for i in range(0, len(x), _EVAL_CHUNK):
        chunk = x[i : i + _EVAL_CHUNK]
        rec = model.reconstruct(chunk)
        total += float(np.sum(np.square(rec.astype(np.float64) - chunk.astype(np.float64))))
    return total / x.size


def init_output_bias(model: Autoencoder, x: np.ndarray) -> None:
    """Start the last biased layer at the mean target value.

    Most pixels are dark background, so an output that begins at the data
    mean skips the long first phase where the decoder only learns the offset.
    """
    for layer in reversed(model.net.layers):
        if "bias" in layer.params:
            layer.params["bias"][...] = float(np.mean(x, dtype=np.float64))
            return


def _has_batchnorm(model: Autoencoder) -> bool:
    return any(isinstance(layer, BatchNorm) for layer in model.net.layers)


def train(
    model: Autoencoder,
    data: DatasetSplit,
    config: TrainConfig,
    seed: int = 0,
    augment: bool = True,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    bias_init: bool = True,
) -> TrainLog:
    """Shuffled mini-batch Adam on reconstruction MSE.

    The target is the (augmented) input patch itself. Shuffling and
    augmentation draws are keyed by (seed, epoch) so a rerun is bit-identical.
    With ``bias_init`` the output bias starts at the training-set mean.
    """
    p = model.input_size
    if data.patch_size != p:
        raise ValueError(f"{model.arch} needs {p}x{p} patches, dataset has {data.patch_size}x{data.patch_size}")
    x_train = model.to_model_space(data.train.values)
    x_val = model.to_model_space(data.val.values)
    n = len(x_train)
    if n == 0:
        raise ValueError("training set is empty")
    min_batch = 2 if _has_batchnorm(model) else 1
    if bias_init:
        init_output_bias(model, x_train)

    net = model.net
    opt = Adam(net.parameters(), lr=config.lr)
    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = config.lr_at(epoch)
        order = _rng.substream(seed, _rng.SHUFFLE, epoch).permutation(n)
        codes = draw_ops(_rng.substream(seed, _rng.AUGMENT, epoch), n) if augment else None
        seen, total = 0, 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            if len(idx) < min_batch:
                continue  # batch norm cannot train on a single sample
            xb = x_train[idx]
            if codes is not None:
                xb = augment_batch(xb, codes[idx])
            xb = xb[..., None]
            pred = net.forward(xb, training=True)
            loss, grad = mse_loss(pred, xb)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite training loss at epoch {epoch}, batch starting {start}", log)
            net.backward(grad)
            try:
                opt.step(net.gradients())
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch}, batch starting {start}: {exc}", log) from None
            total += loss * len(idx)
            seen += len(idx)
        val = batch_loss(model, x_val)
        rec = EpochRecord(epoch, total / max(seen, 1), val, time.perf_counter() - t0, opt.lr)
        if len(x_val) and not math.isfinite(val):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}", log)
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return log
