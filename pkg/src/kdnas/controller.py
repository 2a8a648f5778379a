"""LSTM reward predictor conditioned on the search's best-state memory."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numerics as nx
from .checkpoint import load_arrays, save_arrays
from .exceptions import ContractViolation, InputError, TrainingDiverged
from .numerics import Tensor
from .optim import RMSProp, exponential
from .space import encode_state, encoding_dim

HIDDEN_CELLS = 32
PAPER_EPOCHS = 10
PAPER_LR = 1e-4
PAPER_RHO = 0.95


@dataclass
class ControllerInput:
    """Encoded (candidate, global best, previous best); zeros stand in for missing memory."""

    candidate: np.ndarray
    global_best: np.ndarray
    previous_best: np.ndarray

    def sequence(self):
        # recency order: memory first, candidate last
        return np.stack([self.global_best, self.previous_best, self.candidate])

    @classmethod
    def from_states(cls, candidate, global_best, previous_best, space):
        zero = np.zeros(encoding_dim(space))
        return cls(encode_state(candidate, space),
                   zero if global_best is None else encode_state(global_best, space),
                   zero if previous_best is None else encode_state(previous_best, space))


class ControllerNet:
    """Single-layer LSTM (gate order i, f, g, o) with a linear scalar head."""

    def __init__(self, input_dim, hidden=HIDDEN_CELLS, seed=0):
        self.input_dim = input_dim
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.params = {
            "lstm.w_x": Tensor(rng.uniform(-bound, bound, (input_dim, 4 * hidden)), requires_grad=True),
            "lstm.w_h": Tensor(rng.uniform(-bound, bound, (hidden, 4 * hidden)), requires_grad=True),
            "lstm.b": Tensor(bias, requires_grad=True),
            "head.w": Tensor(rng.uniform(-bound, bound, (hidden, 1)), requires_grad=True),
            "head.b": Tensor(np.zeros(1), requires_grad=True),
        }
        self.optimizer = RMSProp(self.parameters(), rho=PAPER_RHO)

    def parameters(self):
        return list(self.params.values())

    def forward(self, X):
        """``X`` is ``(B, steps, input_dim)``; returns a ``(B,)`` Tensor."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise ContractViolation(f"controller expects (B, steps, {self.input_dim}), got {X.shape}")
        p, H = self.params, self.hidden
        batch = X.shape[0]
        h = Tensor(np.zeros((batch, H)))
        c = Tensor(np.zeros((batch, H)))
        for t in range(X.shape[1]):
            z = Tensor(X[:, t, :]) @ p["lstm.w_x"] + h @ p["lstm.w_h"] + p["lstm.b"]
            i = nx.sigmoid(z[:, :H])
            f = nx.sigmoid(z[:, H:2 * H])
            g = nx.tanh(z[:, 2 * H:3 * H])
            o = nx.sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            h = o * nx.tanh(c)
        return (h @ p["head.w"] + p["head.b"]).reshape(batch)

    def predict(self, X):
        with nx.no_grad():
            return self.forward(X).data.copy()

    def save(self, path, meta=None):
        arrays = {k: v.data for k, v in self.params.items()}
        arrays.update(self.optimizer.state_arrays())
        info = {"kind": "controller", "input_dim": self.input_dim, "hidden": self.hidden}
        info.update(meta or {})
        save_arrays(path, arrays, info)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        net = cls(meta["input_dim"], meta["hidden"])
        for k in net.params:
            net.params[k].data[...] = arrays[k]
        net.optimizer.load_state_arrays(arrays)
        return net, meta


def controller_loss(net, X, y):
    """Half the summed squared error between actual and predicted rewards."""
    pred = net.forward(X)
    diff = pred - Tensor(np.asarray(y, dtype=np.float64))
    return (diff * diff).sum() * 0.5


def _stack_inputs(inputs):
    return np.stack([x.sequence() if isinstance(x, ControllerInput) else np.asarray(x) for x in inputs])


def predict_reward(net, controller_input):
    return float(net.predict(_stack_inputs([controller_input]))[0])


def train_controller(net, samples, epochs=PAPER_EPOCHS, lr=PAPER_LR, lr_decay=0.9, batch_size=None,
                     seed=0):
    """Minimise the controller loss on ``[(ControllerInput, reward), ...]``.

    RMSProp state persists on ``net`` across calls. The learning rate decays
    exponentially per epoch within one call; ``batch_size=None`` is full-batch.
    Returns the full-sample loss after each epoch (index 0 is before training).
    """
    if not samples:
        raise InputError("train_controller needs at least one sample")
    X = _stack_inputs([s[0] for s in samples])
    y = np.array([s[1] for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise InputError("controller targets must be finite")
    rng = np.random.default_rng(seed)
    lr_at = exponential(lr, lr_decay)
    bs = len(y) if batch_size is None else batch_size
    opt = net.optimizer
    with nx.no_grad():
        history = [float(controller_loss(net, X, y).data)]
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), bs):
            idx = order[start:start + bs]
            opt.zero_grad()
            loss = controller_loss(net, X[idx], y[idx])
            if not math.isfinite(float(loss.data)):
                raise TrainingDiverged(epoch, float(loss.data))
            loss.backward()
            opt.step(lr_at(epoch))
        with nx.no_grad():
            history.append(float(controller_loss(net, X, y).data))
    return history


def rank_states(net, unexplored, global_best, previous_best, k, space):
    """Top-``k`` states by predicted reward; ties broken by the state tuple."""
    states = sorted(set(unexplored))
    if k > len(states):
        raise InputError(f"k={k} exceeds the {len(states)} unexplored states")
    if k <= 0:
        return []
    inputs = [ControllerInput.from_states(s, global_best, previous_best, space) for s in states]
    preds = net.predict(_stack_inputs(inputs))
    order = sorted(range(len(states)), key=lambda i: (-preds[i], states[i]))
    return [states[i] for i in order[:k]]


class ControllerRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn regressor around :class:`ControllerNet`.

    ``X`` is ``(n, 3, D)`` or flattened ``(n, 3 * D)`` with rows ordered
    (global best, previous best, candidate).
    """

    def __init__(self, hidden_size=HIDDEN_CELLS, epochs=PAPER_EPOCHS, learning_rate=PAPER_LR,
                 lr_decay=0.9, batch_size=None, steps=3, random_state=0):
        self.hidden_size = hidden_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.steps = steps
        self.random_state = random_state

    def _as_sequences(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            if X.shape[1] % self.steps:
                raise InputError(f"{X.shape[1]} features do not split into {self.steps} steps")
            X = X.reshape(X.shape[0], self.steps, -1)
        return X

    def fit(self, X, y):
        X = self._as_sequences(X)
        flat, y = check_X_y(X.reshape(X.shape[0], -1), y, y_numeric=True)
        X = flat.reshape(X.shape)
        self.net_ = ControllerNet(X.shape[2], self.hidden_size, seed=self.random_state)
        self.n_features_in_ = flat.shape[1]
        samples = list(zip(X, y))
        self.loss_history_ = train_controller(self.net_, samples, self.epochs, self.learning_rate,
                                              self.lr_decay, self.batch_size, self.random_state)
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = self._as_sequences(X)
        check_array(X.reshape(X.shape[0], -1))
        return self.net_.predict(X)
