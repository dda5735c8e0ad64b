"""MLP decoder: feature extractor (input -> 64 -> 32 -> 16, ReLU) plus a linear regressor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import GradTape, Var, make_rng

HIDDEN = (64, 32, 16)
OUTPUT_DIM = 2
SCHEMA = "ssar-decoder-v1"

LAYER_NAMES = ("extractor.0", "extractor.1", "extractor.2", "regressor")


@dataclass
class DecoderParams:
    """Weights and biases, extractor layers first, regressor last.

    ``weights[i]`` has shape (fan_in, fan_out); ``biases[i]`` has shape (fan_out,).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    relu_last: bool = True
    input_dim: int = field(init=False)

    def __post_init__(self):
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ValueError("decoder needs 3 extractor layers and 1 regressor layer")
        self.input_dim = self.weights[0].shape[0]
        widths = (self.input_dim,) + HIDDEN + (OUTPUT_DIM,)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {LAYER_NAMES[i]} has shape {w.shape}/{b.shape}")

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list in the order w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def names(self) -> list[str]:
        return [f"{n}.{kind}" for n in LAYER_NAMES for kind in ("weight", "bias")]

    @classmethod
    def from_arrays(cls, arrays, relu_last: bool = True) -> "DecoderParams":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2], relu_last=relu_last)

    def copy(self) -> "DecoderParams":
        return DecoderParams.from_arrays([a.copy() for a in self.arrays()], self.relu_last)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def param_count(input_dim: int) -> int:
    d = input_dim
    return d * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16 + 16 * 2 + 2


def init(seed, input_dim: int, relu_last: bool = True) -> DecoderParams:
    """Glorot-uniform weights, zero biases."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    rng = make_rng(seed)
    widths = (input_dim,) + HIDDEN + (OUTPUT_DIM,)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DecoderParams(weights, biases, relu_last=relu_last)


def _as_rows(params: DecoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected rows of width {params.input_dim}, got shape {x.shape}")
    return x


def extract(params: DecoderParams, x) -> np.ndarray:
    h = _as_rows(params, x)
    for i in range(3):
        h = h @ params.weights[i] + params.biases[i]
        if i < 2 or params.relu_last:
            h = np.maximum(h, 0.0)
    return h


def regress(params: DecoderParams, features) -> np.ndarray:
    return np.asarray(features) @ params.weights[3] + params.biases[3]


def predict(params: DecoderParams, x) -> np.ndarray:
    return regress(params, extract(params, x))


class TapedDecoder:
    """The decoder's parameters registered on a tape for one gradient evaluation."""

    def __init__(self, params: DecoderParams, tape: GradTape, trainable=None):
        self.tape = tape
        self.relu_last = params.relu_last
        self.input_dim = params.input_dim
        arrays = params.arrays()
        if trainable is None:
            trainable = [True] * len(arrays)
        self.vars = [tape.param(a) if t else tape.const(a) for a, t in zip(arrays, trainable)]

    def extract(self, x) -> Var:
        t = self.tape
        h = t._wrap(x)
        for i in range(3):
            h = t.add(t.matmul(h, self.vars[2 * i]), self.vars[2 * i + 1])
            if i < 2 or self.relu_last:
                h = t.relu(h)
        return h

    def regress(self, feats: Var) -> Var:
        t = self.tape
        return t.add(t.matmul(feats, self.vars[6]), self.vars[7])

    def predict(self, x) -> Var:
        return self.regress(self.extract(x))


def save_params(params: DecoderParams, path) -> None:
    # float.hex keeps the round trip bit-exact
    layers = []
    for name, w, b in zip(LAYER_NAMES, params.weights, params.biases):
        layers.append(
            {
                "name": name,
                "weight_shape": list(w.shape),
                "weight": [float(v).hex() for v in w.ravel()],
                "bias": [float(v).hex() for v in b],
            }
        )
    doc = {"schema": SCHEMA, "relu_last": params.relu_last, "layers": layers}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> DecoderParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: expected schema {SCHEMA!r}, got {doc.get('schema')!r}")
    weights, biases = [], []
    for layer in doc["layers"]:
        w = np.array([float.fromhex(v) for v in layer["weight"]]).reshape(layer["weight_shape"])
        weights.append(w)
        biases.append(np.array([float.fromhex(v) for v in layer["bias"]]))
    return DecoderParams(weights, biases, relu_last=bool(doc.get("relu_last", True)))
