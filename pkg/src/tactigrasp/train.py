"""Training, evaluation and checkpoints for the touch and slip classifiers."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DatasetError, FormatError, GeometryError
from .slip import SlipNetConfig, init_slip_params, slip_logits_vjp
from .tensor import DTYPE, softmax_vjp
from .tensorio import load_table, save_table
from .touch import TouchNetConfig, init_touch_params, touch_logits_vjp

log = logging.getLogger(__name__)

CONFIG_TYPES = {"touch": TouchNetConfig, "slip": SlipNetConfig}


@dataclass
class Model:
    kind: str
    config: object
    params: dict

    @classmethod
    def create(cls, kind: str, config=None, seed: int = 0) -> "Model":
        if kind == "touch":
            config = config or TouchNetConfig.toy()
            return cls(kind, config, init_touch_params(config, seed))
        if kind == "slip":
            config = config or SlipNetConfig.toy()
            return cls(kind, config, init_slip_params(config, seed))
        raise ValueError(f"unknown model kind {kind!r}")

    @property
    def input_shape(self) -> tuple:
        c = self.config
        if self.kind == "touch":
            return (c.channels, c.image_size, c.image_size)
        return (c.frames, c.channels, c.image_size, c.image_size)

    def check_input(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise GeometryError(
                f"{self.kind} model expects samples of shape {self.input_shape}, "
                f"dataset has {tuple(x.shape[1:])}"
            )

    def logits_vjp(self, x):
        if self.kind == "touch":
            return touch_logits_vjp(x, self.params, self.config)
        return slip_logits_vjp(x, self.params, self.config)

    def predict_proba(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        x = np.asarray(x, DTYPE)
        single = x.ndim == len(self.input_shape)
        if single:
            x = x[None]
        out = []
        for i in range(0, len(x), batch):
            logits, _ = self.logits_vjp(x[i:i + batch])
            out.append(softmax_vjp(logits, -1)[0])
        probs = np.concatenate(out)
        return probs[0] if single else probs


# -- loss and optimiser -----------------------------------------------------

def cross_entropy_vjp(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; ``backward()`` returns dL/dlogits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())

    def backward():
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        return (g / n).astype(DTYPE)

    return loss, backward


class AdamW:
    """Adam with decoupled weight decay (applied to matrices and kernels only)."""

    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(self.params):
            g = grads.get(k)
            if g is None:
                continue
            p = self.params[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p *= DTYPE(1.0 - self.lr * self.weight_decay)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(DTYPE)


# -- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    init_loss: float = float("nan")
    best_epoch: int = 0
    best_val_accuracy: float = 0.0


def split_indices(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if val_fraction > 0 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def mean_loss(model: Model, x, y, batch: int = 64) -> float:
    total = 0.0
    for i in range(0, len(x), batch):
        logits, _ = model.logits_vjp(x[i:i + batch])
        total += cross_entropy_vjp(logits, y[i:i + batch])[0] * len(y[i:i + batch])
    return total / len(x)


def train(model: Model, x_train, y_train, x_val=None, y_val=None, *, epochs: int = 10,
          batch_size: int = 16, lr: float = 3e-4, weight_decay: float = 0.01, seed: int = 0,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Minibatch AdamW on cross-entropy; keeps the parameters of the best validation epoch."""
    model.check_input(x_train)
    x_train = np.asarray(x_train, DTYPE)
    y_train = np.asarray(y_train, np.int64)
    has_val = x_val is not None and len(x_val) > 0
    if has_val:
        model.check_input(x_val)
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 2])
    result = TrainResult(init_loss=mean_loss(model, x_train, y_train))
    best = None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x_train))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            logits, back = model.logits_vjp(x_train[idx])
            loss, dlog = cross_entropy_vjp(logits, y_train[idx])
            grads: dict = {}
            back(dlog(), grads)
            opt.step(grads)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(-1) == y_train[idx]).sum())
        rec = {"epoch": epoch, "train_loss": loss_sum / len(order),
               "train_accuracy": correct / len(order)}
        if has_val:
            ev = evaluate(model, x_val, y_val)
            rec["val_accuracy"] = ev["accuracy"]
            score = ev["accuracy"]
        else:
            score = rec["train_accuracy"]
        result.history.append(rec)
        if best is None or score > best:
            best = score
            result.best_epoch = epoch
            result.best_val_accuracy = score
            best_params = {k: v.copy() for k, v in model.params.items()}
        log.info("epoch %d %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)
    if best is not None:
        for k, v in best_params.items():
            model.params[k][...] = v
    return result


def confusion_matrix(y_true, y_pred, classes: int = 2) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def scores(y_true, y_pred, classes: int = 2) -> dict:
    """Accuracy and confusion matrix (rows = true class, columns = predicted)."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    cm = confusion_matrix(y_true, y_pred, classes)
    return {"accuracy": float((y_true == y_pred).mean()), "confusion": cm.tolist(),
            "count": int(len(y_true))}


def evaluate(model: Model, x, y) -> dict:
    model.check_input(x)
    probs = model.predict_proba(x)
    return scores(y, probs.argmax(-1), model.config.classes)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: Model, metrics: dict | None = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    save_table(out / "weights.vtsf", model.params)
    doc = {"kind": model.kind, "config": model.config.to_dict(), "metrics": metrics or {}}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Model:
    p = Path(path)
    try:
        doc = json.loads((p / "config.json").read_text())
        params = load_table(p / "weights.vtsf")
    except (OSError, json.JSONDecodeError, FormatError) as e:
        raise DatasetError(f"unreadable checkpoint {p}: {e}") from e
    kind = doc["kind"]
    cfg = CONFIG_TYPES[kind](**doc["config"])
    return Model(kind, cfg, params)
