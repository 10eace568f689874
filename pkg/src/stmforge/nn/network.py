"""Sequential networks, MSE loss and the STMW1 checkpoint format."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .. import rng as _rng
from .layers import Layer, LeakyReLU, ReLU, layer_from_config

CHECKPOINT_MAGIC = b"STMW1"


class Sequential:
    """A fixed chain of layers built for one input shape (excluding batch)."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], seed: int = 0, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            # weights feeding a rectifier get He scaling, all others LeCun scaling
            nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
            layer.init_gain = 2.0 if isinstance(nxt, (ReLU, LeakyReLU)) else 1.0
            shape = layer.build(shape, _rng.substream(seed, _rng.INIT, i), self.dtype)
        self.output_shape = shape

    def forward(self, x: np.ndarray, training: bool = False, start: int = 0, stop: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers[start:stop]:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, dy: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
        dy = np.asarray(dy, dtype=self.dtype)
        for layer in reversed(self.layers[start:stop]):
            dy = layer.backward(dy)
        return dy

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(layer.label, layer.out_shape) for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            for key, p in layer.params.items():
                g = layer.grads.get(key)
                out.append(np.zeros_like(p) if g is None else g)
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters then buffers, layer by layer, in declaration order."""
        out = []
        for layer in self.layers:
            out.extend(layer.params.values())
            out.extend(layer.buffers.values())
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def config(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer.config() for layer in self.layers]}

    @classmethod
    def from_config(cls, cfg: dict, dtype=np.float32) -> Sequential:
        return cls([layer_from_config(c) for c in cfg["layers"]], tuple(cfg["input_shape"]), dtype=dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(np.square(diff)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


def save_checkpoint(path, net: Sequential, meta: dict | None = None) -> Path:
    """Magic, uint32 LE header length, JSON header, then float32 LE blobs."""
    header = {**(meta or {}), "network": net.config()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob)
        f.writelines(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in net.state_arrays())
    return path


def load_checkpoint(path, dtype=np.float32) -> tuple[Sequential, dict]:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an STMW1 checkpoint")
    (n,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + n].decode("utf-8"))
    net = Sequential.from_config(header.pop("network"), dtype=dtype)
    offset = 9 + n
    for arr in net.state_arrays():
        nbytes = arr.size * 4
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: checkpoint truncated")
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return net, header
