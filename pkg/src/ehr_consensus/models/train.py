"""Trainers, the predictor wrapper and denoising pretraining."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import GRU, Adam, Dense, Dropout, LastStep, Network, Tanh, mse, sigmoid, sigmoid_bce, softmax, softmax_xent

KINDS = ("matrix", "tensor", "bow")


@dataclass
class TrainSpec:
    learning_rate: float = 0.001
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    units: tuple[int, ...] = (100, 50)
    dropout: tuple[float, ...] = (0.1, 0.3)
    class_weight: bool = True
    dae_widths: tuple[int, ...] = (500, 500, 500)
    corruption: float = 0.05
    dae_epochs: int = 10

    def __post_init__(self):
        self.units = tuple(int(u) for u in self.units)
        self.dropout = tuple(float(d) for d in self.dropout)
        self.dae_widths = tuple(int(w) for w in self.dae_widths)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        # 0 epochs is accepted as an explicit override giving the initial parameters
        if self.epochs < 0 or self.dae_epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if len(self.units) != len(self.dropout) or not self.units:
            raise ValueError("units and dropout need one entry per recurrent layer")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must lie in [0, 1]")

    def replace(self, **kw) -> "TrainSpec":
        d = asdict(self)
        d.update(kw)
        return TrainSpec(**d)


# ---------------------------------------------------------------------------


def _check_inputs(X, y=None):
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    if y is not None:
        y = np.asarray(y).astype(np.int64).ravel()
        if len(y) != X.shape[0]:
            raise ValueError("X and y disagree on the number of subjects")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
    return X, y


def _fit_scaler(X):
    flat = X.reshape(-1, X.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def sample_weights(y, balanced=True):
    if not balanced:
        return np.ones(len(y))
    n = len(y)
    counts = np.bincount(y, minlength=2).astype(float)
    w = np.where(counts[y] > 0, n / (2.0 * np.maximum(counts[y], 1)), 0.0)
    return w


class Predictor:
    """A trained scorer mapping encoded subjects to the probability of Event.

    ``kind`` names the input representation: ``matrix`` (subjects x
    features), ``tensor`` (subjects x 7 bins x features, bin 0 most recent)
    or ``bow`` (subjects x vocabulary counts).
    """

    def __init__(self, kind, net, mean, std, head="softmax", tokens=None, encoder=None, meta=None):
        if kind not in KINDS:
            raise ValueError(f"unknown predictor kind {kind!r}")
        self.kind = kind
        self.net = net
        self.mean = mean
        self.std = std
        self.head = head
        self.tokens = tuple(tokens) if tokens is not None else None
        self.encoder = encoder
        self.meta = dict(meta or {})

    def _prepare(self, X):
        X = np.asarray(X, dtype=float)
        Z = (X - self.mean) / self.std
        if self.encoder is not None:
            Z = self.encoder.transform(Z)
        if self.kind == "tensor":
            # feed oldest bin first so the final state sits at the index date
            Z = Z[:, ::-1]
        elif self.kind == "bow" and self.head == "softmax":
            Z = Z[:, None, :]
        return Z

    def logits(self, X):
        return self.net.forward(self._prepare(X), training=False)

    def predict_proba(self, X) -> np.ndarray:
        out = self.logits(X)
        if self.head == "sigmoid":
            return sigmoid(out[:, 0])
        return softmax(out)[:, 1]

    __call__ = predict_proba

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        arrays = {f"net/{k}": v for k, v in self.net.state().items()}
        arrays["mean"], arrays["std"] = self.mean, self.std
        if self.encoder is not None:
            arrays.update({f"enc/{k}": v for k, v in self.encoder.net.state().items()})
        header = {
            "kind": self.kind,
            "head": self.head,
            "tokens": list(self.tokens) if self.tokens is not None else None,
            "meta": self.meta,
            "encoder_widths": list(self.encoder.widths) if self.encoder is not None else None,
        }
        arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Predictor":
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        header = json.loads(bytes(arrays.pop("header")).decode())
        meta = header["meta"]
        encoder = None
        n_in = arrays["mean"].shape[-1]
        if header["encoder_widths"] is not None:
            encoder = DenoisingEncoder(n_in, header["encoder_widths"], np.random.default_rng(0))
            encoder.net.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("enc/")})
            n_in = header["encoder_widths"][-1]
        net = _build_net(header["kind"], header["head"], n_in, meta, np.random.default_rng(0))
        net.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
        return cls(header["kind"], net, arrays["mean"], arrays["std"], header["head"],
                   header["tokens"], encoder, meta)


def constant_predictor(value: float, kind="matrix") -> "ConstantPredictor":
    return ConstantPredictor(value, kind)


class ConstantPredictor:
    def __init__(self, value, kind="matrix"):
        self.value = float(value)
        self.kind = kind
        self.tokens = None

    def predict_proba(self, X):
        return np.full(np.asarray(X).shape[0], self.value)

    __call__ = predict_proba


# ---------------------------------------------------------------------------


def _build_net(kind, head, n_in, meta, rng):
    if head == "sigmoid":
        # convex problem: start from zero so an untrained model scores 0.5 everywhere
        dense = Dense(n_in, 1, rng)
        dense.params["W"][:] = 0.0
        return Network([dense])
    layers = []
    prev = n_in
    for u, d in zip(meta["units"], meta["dropout"]):
        layers += [GRU(prev, u, rng), Dropout(d)]
        prev = u
    # dropout after the last recurrent layer acts on its final state
    drop = layers.pop()
    layers += [LastStep(), drop, Dense(prev, 2, rng)]
    return Network(layers)


def _fit(net, Xs, y, spec, loss_fn, rng):
    """Minibatch Adam over shuffled batches; returns per-epoch mean loss."""
    params = net.named_params()
    opt = Adam(params, lr=spec.learning_rate)
    w = sample_weights(y, spec.class_weight)
    n = len(y)
    history = []
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start: start + spec.batch_size]
            net.zero_grad()
            out = net.forward(Xs[idx], training=True, rng=rng)
            loss, d = loss_fn(out, y[idx], w[idx])
            net.backward(d)
            opt.step()
            total += loss * len(idx)
        history.append(total / n)
    return history


def train_logistic(X, y, spec: TrainSpec | None = None, tokens=None) -> Predictor:
    """Logistic regression on standardized features, fitted with Adam."""
    spec = spec or TrainSpec()
    X, y = _check_inputs(X, y)
    if X.ndim != 2:
        raise ValueError("logistic regression expects a subjects x features matrix")
    rng = np.random.default_rng(spec.seed)
    mean, std = _fit_scaler(X)
    net = _build_net("matrix", "sigmoid", X.shape[1], {}, rng)
    hist = _fit(net, (X - mean) / std, y, spec, sigmoid_bce, rng)
    return Predictor("matrix", net, mean, std, "sigmoid", tokens, meta={"loss": hist})


def train_recurrent(X, y, spec: TrainSpec | None = None, tokens=None) -> Predictor:
    """Stacked GRU classifier.

    A 3-D input (subjects, 7, features) is read as a sequence over time bins;
    a 2-D bag-of-words input is read as a sequence of length one.
    """
    spec = spec or TrainSpec()
    X, y = _check_inputs(X, y)
    if X.ndim == 3:
        if X.shape[1] == 0:
            raise ValueError("sequence length must be at least 1")
        kind = "tensor"
    elif X.ndim == 2:
        kind = "bow"
    else:
        raise ValueError("recurrent input must be 2-D or 3-D")
    rng = np.random.default_rng(spec.seed)
    mean, std = _fit_scaler(X)
    meta = {"units": list(spec.units), "dropout": list(spec.dropout)}
    net = _build_net(kind, "softmax", X.shape[-1], meta, rng)
    pred = Predictor(kind, net, mean, std, "softmax", tokens, meta=meta)
    hist = _fit(net, pred._prepare(X), y, spec, softmax_xent, rng)
    pred.meta["loss"] = hist
    return pred


# ---------------------------------------------------------------------------
# Denoising pretraining


def corrupt_mask(X, rate=0.05, seed=0) -> np.ndarray:
    """Zero each cell independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    X = np.asarray(X)
    keep = np.random.default_rng(seed).random(X.shape) >= rate
    return np.where(keep, X, 0).astype(X.dtype, copy=False)


class DenoisingEncoder:
    """Tanh encoder stack with a mirrored decoder; the decoder is dropped after training."""

    def __init__(self, n_in, widths, rng):
        self.widths = tuple(int(w) for w in widths)
        if not self.widths:
            raise ValueError("at least one encoder width is required")
        enc, prev = [], n_in
        for w in self.widths:
            enc += [Dense(prev, w, rng), Tanh()]
            prev = w
        dec = []
        for w in list(self.widths[-2::-1]):
            dec += [Dense(prev, w, rng), Tanh()]
            prev = w
        dec.append(Dense(prev, n_in, rng))
        self.net = Network(enc)
        self.decoder = Network(dec)
        self.full = Network(enc + dec)
        self.history: list[float] = []

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        flat = X.reshape(-1, X.shape[-1])
        return self.net.forward(flat).reshape(*X.shape[:-1], self.widths[-1])

    def reconstruct(self, X):
        return self.full.forward(np.asarray(X, dtype=float))


def pretrain_denoising_autoencoder(X, widths=(500, 500, 500), rate=0.05, spec: TrainSpec | None = None):
    """Train encoder/decoder to rebuild clean rows from masked rows; returns the encoder.

    A fresh corruption is drawn every epoch. Rows of a 3-D input are the
    (subject, bin) slices.
    """
    spec = spec or TrainSpec()
    X, _ = _check_inputs(X)
    flat = X.reshape(-1, X.shape[-1])
    rng = np.random.default_rng([spec.seed, 1])
    enc = DenoisingEncoder(flat.shape[1], widths, rng)
    params = enc.full.named_params()
    opt = Adam(params, lr=spec.learning_rate)
    n = flat.shape[0]
    for epoch in range(spec.dae_epochs):
        noisy = corrupt_mask(flat, rate, seed=int(rng.integers(2**32)))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start: start + spec.batch_size]
            enc.full.zero_grad()
            out = enc.full.forward(noisy[idx], training=True, rng=rng)
            loss, d = mse(out, flat[idx])
            enc.full.backward(d)
            opt.step()
            total += loss * len(idx)
        enc.history.append(total / n)
    return enc


def train_deep_patient(X, y, spec: TrainSpec | None = None, tokens=None) -> Predictor:
    """Denoising-pretrained representation feeding a classifier.

    A 2-D input gets a logistic head on the codes; a 3-D input is encoded
    bin by bin and the code sequence feeds the stacked GRU.
    """
    spec = spec or TrainSpec()
    X, y = _check_inputs(X, y)
    mean, std = _fit_scaler(X)
    Z = (X - mean) / std
    enc = pretrain_denoising_autoencoder(Z, spec.dae_widths, spec.corruption, spec)
    codes = enc.transform(Z)
    rng = np.random.default_rng(spec.seed)
    if X.ndim == 2:
        net = _build_net("matrix", "sigmoid", codes.shape[-1], {}, rng)
        hist = _fit(net, codes, y, spec, sigmoid_bce, rng)
        return Predictor("matrix", net, mean, std, "sigmoid", tokens, enc, {"loss": hist, "deep_patient": True})
    meta = {"units": list(spec.units), "dropout": list(spec.dropout), "deep_patient": True}
    net = _build_net("tensor", "softmax", codes.shape[-1], meta, rng)
    hist = _fit(net, codes[:, ::-1], y, spec, softmax_xent, rng)
    meta["loss"] = hist
    return Predictor("tensor", net, mean, std, "softmax", tokens, enc, meta)


TRAINERS = {
    "logistic": train_logistic,
    "recurrent": train_recurrent,
    "deep_patient": train_deep_patient,
}
