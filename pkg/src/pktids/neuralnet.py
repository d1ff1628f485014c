"""Feed-forward classifiers with port and HTTP-method embeddings, in numpy.

The network concatenates the dense input block with the embeddings of the
source port, destination port (one shared port table) and HTTP method, then
applies two ReLU layers and a softmax output layer.  The binary model reuses
the embedding tables of a trained multi-class model as frozen encoders.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .pipeline import PORT_VOCAB, EncodedDataset, SplitIndices
from .httpmethods import METHOD_VOCAB
from .store import ArchMismatch, read_container, write_container

log = logging.getLogger(__name__)

PORT_DIM = 16
METHOD_DIM = 4
METHOD_VOCAB_SIZE = len(METHOD_VOCAB)
HIDDEN = (512, 512)
PROB_FLOOR = 1e-12

PARAM_NAMES = ("port_embedding", "method_embedding", "w1", "b1", "w2", "b2", "w3", "b3")
EMBEDDINGS = ("port_embedding", "method_embedding")


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ModelWeights:
    port_embedding: np.ndarray
    method_embedding: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    n_classes: int
    dense_width: int
    frozen: bool = False

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def trainable(self) -> tuple[str, ...]:
        return PARAM_NAMES[2:] if self.frozen else PARAM_NAMES

    @property
    def input_width(self) -> int:
        return self.dense_width + 2 * self.port_embedding.shape[1] + self.method_embedding.shape[1]

    @property
    def dtype(self):
        return self.w1.dtype

    def arch(self) -> dict:
        return {
            "kind": "fnn", "n_classes": self.n_classes, "dense_width": self.dense_width,
            "frozen": self.frozen, "hidden": [self.w1.shape[1], self.w2.shape[1]],
            "port_vocab": self.port_embedding.shape[0], "port_dim": self.port_embedding.shape[1],
            "method_vocab": self.method_embedding.shape[0],
            "method_dim": self.method_embedding.shape[1],
        }

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(**{k: v.astype(dtype, copy=True) for k, v in self.params().items()},
                            n_classes=self.n_classes, dense_width=self.dense_width,
                            frozen=self.frozen)

    def copy(self) -> "ModelWeights":
        return self.astype(self.dtype)

    def check(self):
        d_in = self.input_width
        expect = {
            "w1": (d_in, self.b1.shape[0]), "w2": (self.b1.shape[0], self.b2.shape[0]),
            "w3": (self.b2.shape[0], self.n_classes), "b3": (self.n_classes,),
        }
        for k, shape in expect.items():
            if getattr(self, k).shape != shape:
                raise ShapeMismatch(f"{k} has shape {getattr(self, k).shape}, expected {shape}")


def init_weights(dense_width: int, n_classes: int, seed: int, hidden=HIDDEN,
                 dtype=np.float32, port_vocab: int = PORT_VOCAB, port_dim: int = PORT_DIM,
                 method_vocab: int = METHOD_VOCAB_SIZE, method_dim: int = METHOD_DIM) -> ModelWeights:
    """Embeddings U(-0.05, 0.05); dense kernels U(±sqrt(6/fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    d_in = dense_width + 2 * port_dim + method_dim

    def kernel(fan_in, fan_out):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

    h1, h2 = hidden
    return ModelWeights(
        port_embedding=rng.uniform(-0.05, 0.05, size=(port_vocab, port_dim)).astype(dtype),
        method_embedding=rng.uniform(-0.05, 0.05, size=(method_vocab, method_dim)).astype(dtype),
        w1=kernel(d_in, h1), b1=np.zeros(h1, dtype),
        w2=kernel(h1, h2), b2=np.zeros(h2, dtype),
        w3=kernel(h2, n_classes), b3=np.zeros(n_classes, dtype),
        n_classes=n_classes, dense_width=dense_width,
    )


def build_bfnn(mfnn: ModelWeights, dense_width: Optional[int] = None, seed: int = 0,
               n_classes: int = 2, freeze: bool = True) -> ModelWeights:
    """Binary model carrying copies of the multi-class embedding tables."""
    dense_width = mfnn.dense_width if dense_width is None else dense_width
    fresh = init_weights(dense_width, n_classes, seed,
                         hidden=(mfnn.w1.shape[1], mfnn.w2.shape[1]), dtype=mfnn.dtype,
                         port_vocab=mfnn.port_embedding.shape[0],
                         port_dim=mfnn.port_embedding.shape[1],
                         method_vocab=mfnn.method_embedding.shape[0],
                         method_dim=mfnn.method_embedding.shape[1])
    fresh.port_embedding = mfnn.port_embedding.copy()
    fresh.method_embedding = mfnn.method_embedding.copy()
    fresh.frozen = freeze
    fresh.check()
    return fresh


# ------------------------------------------------------------ forward/backward

def _check_inputs(w: ModelWeights, dense, ports, methods):
    if dense.ndim != 2 or dense.shape[1] != w.dense_width:
        raise ShapeMismatch(f"dense block width {dense.shape[-1]} != {w.dense_width}")
    if ports.shape != (len(dense), 2) or methods.shape[0] != len(dense):
        raise ShapeMismatch("port/method blocks do not match the dense block")


def embed_inputs(w: ModelWeights, dense, ports, methods) -> np.ndarray:
    """Dense inputs followed by src-port, dst-port and method embeddings."""
    return np.hstack([
        dense.astype(w.dtype, copy=False),
        w.port_embedding[ports[:, 0]],
        w.port_embedding[ports[:, 1]],
        w.method_embedding[methods[:, 0]],
    ])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _layers(w: ModelWeights, x, dropout: float = 0.0, rng=None):
    z1 = x @ w.w1 + w.b1
    a1 = np.maximum(z1, 0)
    m1 = m2 = None
    if dropout:
        keep = 1.0 - dropout
        m1 = (rng.random(a1.shape) < keep).astype(a1.dtype) / keep
        a1 = a1 * m1
    z2 = a1 @ w.w2 + w.b2
    a2 = np.maximum(z2, 0)
    if dropout:
        m2 = (rng.random(a2.shape) < keep).astype(a2.dtype) / keep
        a2 = a2 * m2
    z3 = a2 @ w.w3 + w.b3
    return z1, a1, m1, z2, a2, m2, z3


def forward(w: ModelWeights, dense, ports, methods) -> np.ndarray:
    """Class probabilities, one row per input row."""
    _check_inputs(w, dense, ports, methods)
    return softmax(_layers(w, embed_inputs(w, dense, ports, methods))[-1])


forward_mfnn = forward


def loss_weighted_ce(probs: np.ndarray, labels, class_weights) -> float:
    """Batch mean of w[y] * -log(max(p[y], 1e-12))."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    cw = np.asarray(class_weights, dtype=np.float64)
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(np.mean(cw[labels] * -np.log(np.maximum(p, PROB_FLOOR))))


@dataclass
class Penalties:
    l1: float = 0.0
    l2: float = 0.0
    dropout: float = 0.0


def backward(w: ModelWeights, dense, ports, methods, labels, class_weights,
             penalties: Optional[Penalties] = None, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for every parameter.

    Embedding gradients are dense arrays whose only nonzero rows are those
    looked up in the batch; frozen embeddings get all-zero gradients.
    """
    _check_inputs(w, dense, ports, methods)
    pen = penalties or Penalties()
    labels = np.asarray(labels)
    n = len(labels)
    x = embed_inputs(w, dense, ports, methods)
    z1, a1, m1, z2, a2, m2, z3 = _layers(w, x, pen.dropout, rng)
    p = softmax(z3)
    cw = np.asarray(class_weights, dtype=w.dtype)
    sw = cw[labels]
    py = p[np.arange(n), labels]
    loss = float(np.mean(sw.astype(np.float64) * -np.log(np.maximum(py.astype(np.float64), PROB_FLOOR))))

    dz3 = p.copy()
    dz3[np.arange(n), labels] -= 1
    scale = (sw / n).astype(w.dtype)
    scale[py < PROB_FLOOR] = 0  # floor is flat there
    dz3 *= scale[:, None]

    g = {}
    g["w3"] = a2.T @ dz3
    g["b3"] = dz3.sum(axis=0)
    da2 = dz3 @ w.w3.T
    if m2 is not None:
        da2 *= m2
    dz2 = da2 * (z2 > 0)
    g["w2"] = a1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ w.w2.T
    if m1 is not None:
        da1 *= m1
    dz1 = da1 * (z1 > 0)
    g["w1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)

    g["port_embedding"] = np.zeros_like(w.port_embedding)
    g["method_embedding"] = np.zeros_like(w.method_embedding)
    if not w.frozen:
        dx = dz1 @ w.w1.T
        d0, pd = w.dense_width, w.port_embedding.shape[1]
        np.add.at(g["port_embedding"], ports[:, 0], dx[:, d0:d0 + pd])
        np.add.at(g["port_embedding"], ports[:, 1], dx[:, d0 + pd:d0 + 2 * pd])
        np.add.at(g["method_embedding"], methods[:, 0], dx[:, d0 + 2 * pd:])

    if pen.l1 or pen.l2:
        for k in ("w1", "w2", "w3"):
            wk = getattr(w, k)
            loss += float(pen.l1 * np.abs(wk).sum() + pen.l2 * np.square(wk, dtype=np.float64).sum())
            g[k] += (pen.l1 * np.sign(wk) + 2 * pen.l2 * wk).astype(w.dtype)
    return loss, g


# ------------------------------------------------------------ optimiser

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    restore_best: bool = True
    l1: float = 0.0
    l2: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if not 0 < self.patience <= self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(w: ModelWeights, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[ModelWeights, AdamState]:
    """One bias-corrected Adam update, applied in place to ``w`` and ``state``.

    Frozen embedding tables are skipped entirely.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in w.trainable():
        p, gk = getattr(w, k), grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * gk
        v *= b2
        v += (1.0 - b2) * np.square(gk)
        denom = np.sqrt(v / c2)
        denom += config.epsilon
        p -= (config.learning_rate / c1) * m / denom
    return w, state


# ------------------------------------------------------------ training

@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0

    def rows(self):
        for i, row in enumerate(zip(self.train_loss, self.train_accuracy,
                                    self.val_loss, self.val_accuracy), 1):
            yield (i,) + row


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, self.epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def labels_for(w: ModelWeights, ds: EncodedDataset) -> np.ndarray:
    return ds.labels_multiclass if w.n_classes > 2 else ds.labels_binary


def predict_proba(w: ModelWeights, dense, ports, methods, batch: int = 8192) -> np.ndarray:
    out = np.empty((len(dense), w.n_classes), dtype=w.dtype)
    for i in range(0, len(dense), batch):
        s = slice(i, i + batch)
        out[s] = forward(w, dense[s], ports[s], methods[s])
    return out


def predict(w: ModelWeights, dense, ports, methods, batch: int = 8192) -> np.ndarray:
    """Argmax class codes; ties go to the lower code."""
    return predict_proba(w, dense, ports, methods, batch).argmax(axis=1)


def evaluate_loss(w: ModelWeights, ds: EncodedDataset, idx, labels,
                  class_weights=None) -> tuple[float, float]:
    if len(idx) == 0:
        return float("nan"), float("nan")
    probs = predict_proba(w, *ds.inputs(idx))
    y = labels[idx]
    cw = np.ones(w.n_classes) if class_weights is None else class_weights
    return loss_weighted_ce(probs, y, cw), float(np.mean(probs.argmax(axis=1) == y))


def fit(w: ModelWeights, ds: EncodedDataset, splits: SplitIndices, class_weights,
        config: TrainConfig, labels: Optional[np.ndarray] = None,
        on_epoch=None) -> tuple[ModelWeights, TrainReport]:
    """Mini-batch Adam with early stopping on validation loss.

    ``class_weights`` scales the per-sample training loss; validation loss
    is unweighted.  Returns the best-validation weights when
    ``config.restore_best`` is set, else the final weights.
    """
    w.check()
    if np.intersect1d(splits.train, splits.validation).size:
        raise ValueError("train and validation indices overlap")
    y = labels_for(w, ds) if labels is None else np.asarray(labels)
    cw = np.asarray(class_weights.as_array() if hasattr(class_weights, "as_array") else class_weights,
                    dtype=w.dtype)
    if len(cw) != w.n_classes:
        raise ShapeMismatch(f"{len(cw)} class weights for a {w.n_classes}-class model")
    pen = Penalties(config.l1, config.l2, config.dropout)
    state = AdamState()
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    best = w.copy()
    start = time.perf_counter()
    train_idx = np.asarray(splits.train)
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng(config.seed + epoch)
        order = train_idx[rng.permutation(len(train_idx))]
        drop_rng = np.random.default_rng([config.seed, epoch]) if config.dropout else None
        total_loss = 0.0
        for i in range(0, len(order), config.batch_size):
            b = order[i:i + config.batch_size]
            loss, grads = backward(w, ds.dense[b], ds.ports[b], ds.methods[b], y[b], cw,
                                   pen, drop_rng)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch + 1}, batch {i // config.batch_size}: loss={loss}")
            adam_step(w, grads, state, config)
            total_loss += loss * len(b)
        train_loss = total_loss / max(len(order), 1)
        _, train_acc = evaluate_loss(w, ds, train_idx, y)
        val_loss, val_acc = evaluate_loss(w, ds, splits.validation, y)
        if len(splits.validation) and not np.isfinite(val_loss):
            raise NonFiniteLoss(f"epoch {epoch + 1}: validation loss={val_loss}")
        report.train_loss.append(train_loss)
        report.train_accuracy.append(train_acc)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        log.info("epoch %d: loss %.5f acc %.4f val_loss %.5f val_acc %.4f",
                 epoch + 1, train_loss, train_acc, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(epoch + 1, report)
        monitor = val_loss if len(splits.validation) else train_loss
        stop = stopper.update(monitor)
        if stopper.best_epoch == epoch + 1:
            best = w.copy()
        if stop:
            break
    report.stopped_epoch = len(report.val_loss)
    report.best_epoch = stopper.best_epoch
    report.wall_time = time.perf_counter() - start
    return (best if config.restore_best else w), report


# ------------------------------------------------------------ persistence

def save_weights(w: ModelWeights, path) -> None:
    write_container(path, w.arch(), w.params())


def load_weights(path, n_classes: Optional[int] = None,
                 dense_width: Optional[int] = None) -> ModelWeights:
    arch, arrays = read_container(path)
    if arch.get("kind") != "fnn":
        raise ArchMismatch(f"{path}: not a feed-forward model file ({arch.get('kind')})")
    if n_classes is not None and arch["n_classes"] != n_classes:
        raise ArchMismatch(f"{path}: {arch['n_classes']}-class model, expected {n_classes}")
    if dense_width is not None and arch["dense_width"] != dense_width:
        raise ArchMismatch(f"{path}: dense width {arch['dense_width']}, expected {dense_width}")
    w = ModelWeights(**{k: arrays[k] for k in PARAM_NAMES}, n_classes=arch["n_classes"],
                     dense_width=arch["dense_width"], frozen=arch["frozen"])
    w.check()
    if not all(np.isfinite(a).all() for a in w.params().values()):
        raise ValueError(f"{path}: non-finite weights")
    return w
