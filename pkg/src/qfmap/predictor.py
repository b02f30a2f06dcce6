"""Two-layer MLP that regresses kernel-target alignment from circuit images.

The network is ``out = w2 . act(W1 x + b1) + b2`` with a hidden width of 128,
trained with Adam on the Smooth-L1 loss.  Everything is plain numpy so the
gradients can be checked against finite differences.
"""
from __future__ import annotations

import copy
import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .circuit import CircuitLayout, encode_image
from .errors import DimensionError, TrainingDivergenceError

HIDDEN = 128
TARGET_SCALE = 10.0
PARAM_NAMES = ("W1", "b1", "W2", "b2")

_ACTIVATIONS = {
    "relu": (lambda h: np.maximum(h, 0.0), lambda h: (h > 0).astype(h.dtype)),
    "tanh": (np.tanh, lambda h: 1.0 - np.tanh(h) ** 2),
}


@dataclass
class PredictorSample:
    image: np.ndarray
    target: float  # 10 x KTA

    def __post_init__(self):
        if not -TARGET_SCALE <= self.target <= TARGET_SCALE:
            raise ValueError(f"target {self.target} outside [-10, 10]")


@dataclass
class PredictorModel:
    l_max: int
    params: dict[str, np.ndarray]
    seed: int | None = None
    activation: str = "relu"
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    loss_curve: list[float] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(l_max: int, seed=None, activation: str = "relu") -> PredictorModel:
    """Fresh model for images of ``10 * l_max`` pixels, fan-in uniform init."""
    if l_max < 1:
        raise ValueError(f"l_max must be >= 1, got {l_max}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    d = 10 * l_max
    b_in = 1.0 / np.sqrt(d)
    b_hid = 1.0 / np.sqrt(HIDDEN)
    params = {
        "W1": rng.uniform(-b_in, b_in, size=(d, HIDDEN)),
        "b1": rng.uniform(-b_in, b_in, size=HIDDEN),
        "W2": rng.uniform(-b_hid, b_hid, size=(HIDDEN, 1)),
        "b2": rng.uniform(-b_hid, b_hid, size=1),
    }
    return PredictorModel(l_max, params, seed, activation)


def _flatten(images, input_dim: int) -> np.ndarray:
    X = np.asarray(images, dtype=float)
    X = X.reshape(X.shape[0], -1) if X.ndim > 2 else np.atleast_2d(X)
    if X.shape[1] != input_dim:
        raise DimensionError(f"image has {X.shape[1]} pixels, model expects {input_dim}")
    return X


def forward_batch(model: PredictorModel, images) -> np.ndarray:
    X = _flatten(images, model.input_dim)
    act, _ = _ACTIVATIONS[model.activation]
    p = model.params
    return (act(X @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]).reshape(-1)


def forward(model: PredictorModel, image) -> float:
    return float(forward_batch(model, np.asarray(image)[None, ...])[0])


def smooth_l1(pred, target):
    e = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    a = np.abs(e)
    out = np.where(a < 1.0, 0.5 * e * e, a - 0.5)
    return float(out) if out.ndim == 0 else out


def loss_and_grad(model: PredictorModel, images, targets):
    """Mean Smooth-L1 loss over the batch and its gradient per parameter."""
    X = _flatten(images, model.input_dim)
    y = np.asarray(targets, dtype=float).reshape(-1)
    act, dact = _ACTIVATIONS[model.activation]
    p = model.params
    h = X @ p["W1"] + p["b1"]
    a = act(h)
    pred = (a @ p["W2"] + p["b2"]).reshape(-1)
    e = pred - y
    loss = float(np.mean(smooth_l1(pred, y)))
    g = (np.clip(e, -1.0, 1.0) / y.size)[:, None]
    gh = (g @ p["W2"].T) * dact(h)
    grads = {
        "W1": X.T @ gh,
        "b1": gh.sum(axis=0),
        "W2": a.T @ g,
        "b2": g.sum(axis=0),
    }
    return loss, grads


def adam_step(model, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    model.step += 1
    t = model.step
    for name in PARAM_NAMES:
        m = model.adam_m.setdefault(name, np.zeros_like(model.params[name]))
        v = model.adam_v.setdefault(name, np.zeros_like(model.params[name]))
        g = grads[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        model.params[name] = model.params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


def train_predictor(
    model: PredictorModel,
    samples: Sequence[PredictorSample],
    epochs: int = 30,
    lr: float = 0.01,
    batch: int = 32,
    seed=None,
) -> PredictorModel:
    """Mini-batch Adam on the mean Smooth-L1 loss; returns a trained copy.

    ``loss_curve`` gets the full-pool loss after every epoch.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    model = copy.deepcopy(model)
    X = _flatten(np.stack([s.image for s in samples]), model.input_dim)
    y = np.array([s.target for s in samples], dtype=float)
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            loss, grads = loss_and_grad(model, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(epoch)
            adam_step(model, grads, lr)
        if not all(np.all(np.isfinite(p)) for p in model.params.values()):
            raise TrainingDivergenceError(epoch, "non-finite weights")
        full = float(np.mean(smooth_l1(forward_batch(model, X), y)))
        if not np.isfinite(full):
            raise TrainingDivergenceError(epoch)
        model.loss_curve.append(full)
    return model


def score_layouts(
    model: PredictorModel, layouts: Sequence[CircuitLayout], max_width: int
) -> np.ndarray:
    """Predicted KTA (already divided by the target scale) for each layout."""
    if not layouts:
        return np.zeros(0)
    images = np.stack([encode_image(l, max_width) for l in layouts])
    return forward_batch(model, images) / TARGET_SCALE


def make_samples(layouts, ktas, max_width: int) -> list[PredictorSample]:
    return [
        PredictorSample(encode_image(l, max_width), TARGET_SCALE * float(k))
        for l, k in zip(layouts, ktas)
    ]


# -- persistence ---------------------------------------------------------------

_MAGIC = b"QFMP"


def save_checkpoint(model: PredictorModel, path, **extra) -> None:
    """JSON header followed by the float64 weights, W1 b1 W2 b2 in order."""
    header = {
        "l_max": model.l_max,
        "input_dim": model.input_dim,
        "hidden": HIDDEN,
        "activation": model.activation,
        "seed": model.seed,
        "epochs": len(model.loss_curve),
        "loss_curve": model.loss_curve,
        "shapes": {k: list(model.params[k].shape) for k in PARAM_NAMES},
        **extra,
    }
    blob = b"".join(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in PARAM_NAMES)
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(raw)) + raw + blob)


def load_checkpoint(path) -> tuple[PredictorModel, dict]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a predictor checkpoint")
    (size,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + size])
    offset = 12 + size
    params = {}
    for k in PARAM_NAMES:
        shape = tuple(header["shapes"][k])
        count = int(np.prod(shape))
        params[k] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    model = PredictorModel(
        header["l_max"], params, header["seed"], header["activation"], loss_curve=list(header["loss_curve"])
    )
    return model, header


def write_dataset(path, hashes, samples: Sequence[PredictorSample]) -> None:
    """One CSV record per sample: layout hash, image shape, packed bits (hex), target."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layout_hash", "shape", "bits", "target"])
        for h, s in zip(hashes, samples):
            img = np.asarray(s.image, dtype=np.uint8)
            shape = "x".join(str(k) for k in img.shape)
            w.writerow([h, shape, np.packbits(img.reshape(-1)).tobytes().hex(), repr(float(s.target))])


def read_dataset(path) -> tuple[list[str], list[PredictorSample]]:
    hashes, samples = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            shape = tuple(int(k) for k in row["shape"].split("x"))
            bits = np.unpackbits(np.frombuffer(bytes.fromhex(row["bits"]), dtype=np.uint8))
            img = bits[: int(np.prod(shape))].reshape(shape)
            hashes.append(row["layout_hash"])
            samples.append(PredictorSample(img, float(row["target"])))
    return hashes, samples
