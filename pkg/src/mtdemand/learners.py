"""Predictors mapping information sets to task parameters, and their training.

Two closed-form linear learners and a numpy multilayer perceptron share one
objective: for each row, ``sum_m W_m (D_m - P_m' theta_hat)^2`` with
``P_m = (1, p_m)``, averaged over rows.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DemandParams, TaskPanel
from .errors import DimensionMismatch, EmptyTrainSet, SingularDesign
from .infoset import Design, MaskedInfoSet, TrainingData, build_training_data, flatten

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# closed-form linear learners

def fit_linear_predictor(F: np.ndarray, P: np.ndarray, D: np.ndarray,
                         W: np.ndarray, min_norm: bool = False) -> np.ndarray:
    """Weighted least squares for ``theta_hat = B' f``; returns ``B`` of shape (f, 2).

    The predicted demand ``P_m' B' f`` is linear in ``B``, so the coefficients
    solve one normal system of size ``2f``. A rank-deficient system raises
    ``SingularDesign`` unless ``min_norm`` asks for the minimum-norm solution
    (DCML is rank-deficient by construction once the query price is an input).
    """
    n, f = F.shape
    rows = (P[:, :, :, None] * F[:, None, None, :]).reshape(n * P.shape[1], 2 * f)
    y = D.reshape(-1)
    w = W.reshape(-1)
    keep = w > 0
    rows, y, w = rows[keep], y[keep], w[keep]
    A = (rows.T * w) @ rows
    if np.linalg.matrix_rank(A) < A.shape[0]:
        if not min_norm:
            raise SingularDesign("linear learner normal matrix is singular")
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(rows * sw[:, None], y * sw, rcond=None)
        return coef.reshape(2, f).T
    coef = np.linalg.solve(A, (rows.T * w) @ y)
    return coef.reshape(2, f).T


@dataclass(frozen=True)
class SymmetricLinearModel:
    """``theta_hat_j = a_j * (p_1 + ... + p_K) + c_j``."""

    a: tuple
    c: tuple

    def predict_prices(self, prices) -> np.ndarray:
        s = np.sum(np.atleast_2d(np.asarray(prices, float)), axis=1)
        return np.column_stack([self.a[0] * s + self.c[0], self.a[1] * s + self.c[1]])

    def predict_many(self, infos: Sequence[MaskedInfoSet]) -> np.ndarray:
        return self.predict_prices(np.stack([i.prices for i in infos]))


def symmetric_linear_fit(panels: Sequence[TaskPanel],
                         design: Design = Design.DCMOML) -> SymmetricLinearModel:
    data = build_training_data(panels, design)
    s = np.array([np.sum(i.prices) for i in data.infos])
    B = fit_linear_predictor(np.column_stack([s, np.ones_like(s)]), data.P, data.D, data.W)
    return SymmetricLinearModel(a=(float(B[0, 0]), float(B[0, 1])),
                                c=(float(B[1, 0]), float(B[1, 1])))


@dataclass(frozen=True)
class LinearInfoModel:
    """Affine map of the flattened info vector, ``theta_hat = A x + b``."""

    coef: np.ndarray  # (f + 1, 2), last row is the intercept
    design: Design

    def predict_vectors(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        if X.shape[1] + 1 != self.coef.shape[0]:
            raise DimensionMismatch(f"expected {self.coef.shape[0] - 1} inputs, got {X.shape[1]}")
        return X @ self.coef[:-1] + self.coef[-1]

    def predict_many(self, infos: Sequence[MaskedInfoSet]) -> np.ndarray:
        return self.predict_vectors(np.stack([flatten(i) for i in infos]))


def linear_info_fit(panels: Sequence[TaskPanel], design: Design = Design.META,
                    mode: str = "averaged", seed: int = 0,
                    min_norm: Optional[bool] = None) -> LinearInfoModel:
    """Closed-form affine learner; with META and K=2 this is ``A (p_1, D_1) + b``.

    ``min_norm`` defaults to True for DCML only, whose objective cannot pin
    down the component along ``(p_K, -1)``.
    """
    if min_norm is None:
        min_norm = Design(design) is Design.DCML
    data = build_training_data(panels, design, mode=mode, seed=seed)
    # drop constant columns (e.g. always-hidden demand slots) before solving
    varying = np.ptp(data.X, axis=0) > 0
    F = np.column_stack([data.X[:, varying], np.ones(len(data))])
    B = fit_linear_predictor(F, data.P, data.D, data.W, min_norm=min_norm)
    coef = np.zeros((data.X.shape[1] + 1, 2))
    coef[np.append(varying, True)] = B
    return LinearInfoModel(coef, Design(design))


# --------------------------------------------------------------------------
# multilayer perceptron

@dataclass
class MlpModel:
    weights: list  # [(d_in, h1), (h1, h2), ..., (h_last, 2)]
    biases: list
    in_mean: np.ndarray
    in_scale: np.ndarray
    design: Optional[Design] = None
    # the last layer emits (level at price_center, slope); theta0 = level - center * slope
    price_center: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def predict_vectors(self, X) -> np.ndarray:
        return _forward(self, np.atleast_2d(np.asarray(X, float)))[0][-1]

    def predict_many(self, infos: Sequence[MaskedInfoSet]) -> np.ndarray:
        return self.predict_vectors(np.stack([flatten(i) for i in infos]))


def init_mlp(input_dim: int, hidden: Sequence[int], rng: np.random.Generator,
             design: Optional[Design] = None) -> MlpModel:
    """Glorot-uniform weights, zero biases, identity input transform."""
    sizes = [input_dim, *hidden, 2]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, np.zeros(input_dim), np.ones(input_dim), design)


def _forward(model: MlpModel, X: np.ndarray):
    if X.shape[1] != model.input_dim:
        raise DimensionMismatch(f"expected {model.input_dim} inputs, got {X.shape[1]}")
    h = (X - model.in_mean) / model.in_scale
    acts = [h]
    pre = []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    acts.append(_centered_to_theta(h, model.price_center))
    return acts, pre


def _centered_to_theta(out: np.ndarray, center: float) -> np.ndarray:
    return np.column_stack([out[:, 0] - center * out[:, 1], out[:, 1]])


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, float)
    out = model.predict_vectors(x)
    return out[0] if x.ndim == 1 else out


def loss_and_grad(model: MlpModel, X, P, D, W, need_grad: bool = True):
    """Mean over rows of the weighted squared demand error, and its gradient.

    Returns ``(loss, (dweights, dbiases))``.
    """
    acts, pre = _forward(model, X)
    theta = acts[-1]
    resid = D - np.einsum("nmj,nj->nm", P, theta)
    n = X.shape[0]
    loss = float(np.sum(W * resid**2) / n)
    if not need_grad:
        return loss, None
    g = -2.0 * np.einsum("nm,nmj->nj", W * resid, P) / n
    g = np.column_stack([g[:, 0], g[:, 1] - model.price_center * g[:, 0]])
    dW = [None] * len(model.weights)
    db = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        dW[i] = acts[i].T @ g
        db[i] = g.sum(axis=0)
        if i:
            g = (g @ model.weights[i].T) * (pre[i - 1] > 0)
    return loss, (dW, db)


def mlp_backward(model: MlpModel, x, target_pairs) -> tuple:
    """Gradient of ``sum_k w_k (D_k - P_k' g(x))^2`` for one input."""
    x = np.atleast_2d(np.asarray(x, float))
    P = np.array([[np.asarray(pk, float) for pk, _, _ in target_pairs]])
    D = np.array([[dk for _, dk, _ in target_pairs]], float)
    W = np.array([[wk for _, _, wk in target_pairs]], float)
    return loss_and_grad(model, x, P, D, W)[1]


def flatten_grad(grad) -> np.ndarray:
    dW, db = grad
    return np.concatenate([g.ravel() for g in (*dW, *db)])


def gradient_check(model: MlpModel, x, target_pairs, step: float = 1e-5,
                   floor: float = 1e-8) -> float:
    """Max elementwise relative error of ``mlp_backward`` against central differences.

    Relative error is ``|a - b| / max(|a|, |b|, floor)``; ``model`` is restored.
    """
    analytic = flatten_grad(mlp_backward(model, x, target_pairs))
    x = np.atleast_2d(np.asarray(x, float))
    P = np.array([[np.asarray(pk, float) for pk, _, _ in target_pairs]])
    D = np.array([[dk for _, dk, _ in target_pairs]], float)
    W = np.array([[wk for _, _, wk in target_pairs]], float)
    flat = model.get_flat()
    numeric = np.empty_like(flat)
    try:
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            model.set_flat(bumped)
            up = loss_and_grad(model, x, P, D, W, need_grad=False)[0]
            bumped[i] = flat[i] - step
            model.set_flat(bumped)
            down = loss_and_grad(model, x, P, D, W, need_grad=False)[0]
            numeric[i] = (up - down) / (2 * step)
    finally:
        model.set_flat(flat)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * corr * m / (np.sqrt(v) + self.eps)


# --------------------------------------------------------------------------
# training

SYNTHETIC_HIDDEN = (128, 128, 128, 128)
RETAIL_HIDDEN = (256, 256)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    validation_fraction: float = 0.2
    objective: Design = Design.DCMOML
    loss_mode: str = "averaged"
    seed: int = 0
    hidden: tuple = SYNTHETIC_HIDDEN

    def __post_init__(self):
        self.objective = Design(self.objective)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.loss_mode not in ("averaged", "sampled"):
            raise ValueError("loss_mode must be 'averaged' or 'sampled'")


class EarlyStopping:
    """Track the best validation loss and the snapshot that achieved it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = -1
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, state_fn) -> bool:
        """Record ``val_loss``; return True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = state_fn()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    n_train: int = 0
    n_val: int = 0


def split_groups(groups: np.ndarray, fraction: float, rng: np.random.Generator):
    """Row indices for train/validation, splitting whole groups."""
    uniq = np.unique(groups)
    perm = rng.permutation(uniq)
    n_val = int(round(fraction * uniq.size))
    if uniq.size >= 2:
        n_val = min(max(n_val, 1), uniq.size - 1)
    val_groups = set(perm[:n_val].tolist())
    is_val = np.array([g in val_groups for g in groups.tolist()], dtype=bool)
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def train_on_data(data: TrainingData, config: TrainConfig,
                  model: Optional[MlpModel] = None) -> tuple[MlpModel, TrainLog]:
    ss = np.random.SeedSequence(config.seed)
    split_rng, init_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    tr, va = split_groups(data.groups, config.validation_fraction, split_rng)
    if tr.size == 0:
        raise EmptyTrainSet("no training rows after the validation split")
    train, val = data.subset(tr), data.subset(va)

    if model is None:
        model = init_mlp(data.X.shape[1], config.hidden, init_rng, config.objective)
        model.in_mean = train.X.mean(axis=0)
        sd = train.X.std(axis=0)
        model.in_scale = np.where(sd > 0, sd, 1.0)
        # centering the output at the typical query price keeps the loss
        # well conditioned when prices sit far from zero
        model.price_center = float(np.sum(train.W * train.P[:, :, 1]) / np.sum(train.W))

    opt = Adam(model.params(), lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    tlog = TrainLog(n_train=len(train), n_val=len(val))
    monitor = val if len(val) else train
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            rows = order[start:start + config.batch_size]
            loss, (dW, db) = loss_and_grad(model, train.X[rows], train.P[rows],
                                           train.D[rows], train.W[rows])
            opt.step([*dW, *db])
            total += loss * rows.size
        tlog.train_loss.append(total / len(train))
        vloss, _ = loss_and_grad(model, monitor.X, monitor.P, monitor.D, monitor.W,
                                 need_grad=False)
        tlog.val_loss.append(vloss)
        if stopper.update(epoch, vloss, lambda: [p.copy() for p in model.params()]):
            break
    for p, best in zip(model.params(), stopper.best_state):
        p[...] = best
    tlog.best_epoch = stopper.best_epoch
    log.debug("trained %s: best epoch %d, val %.4g", config.objective.value,
              tlog.best_epoch, stopper.best_loss)
    return model, tlog


def train(model: Optional[MlpModel], panels: Sequence[TaskPanel], design: Design,
          config: TrainConfig) -> tuple[MlpModel, TrainLog, TrainingData]:
    """Fit an MLP under ``design``'s objective; returns the model, log and data.

    The returned data holds the info vectors of every usable panel so callers
    can predict with exactly the inputs (and query assignments) used in training.
    """
    design = Design(design)
    data = build_training_data(panels, design, mode=config.loss_mode, seed=config.seed)
    if len(data) == 0:
        raise EmptyTrainSet("no usable panels for this design")
    config = copy.copy(config)
    config.objective = design
    model, tlog = train_on_data(data, config, model)
    return model, tlog, data


def predict_params(model, info: MaskedInfoSet) -> DemandParams:
    design = getattr(model, "design", None)
    if design is not None and Design(design) is not info.design:
        raise ValueError(f"model trained for {design}, got a {info.design.value} info set")
    theta = model.predict_many([info])[0]
    return DemandParams(float(theta[0]), float(theta[1]))


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MlpModel, path) -> None:
    doc = {
        "format": "mlp-v1",
        "design": None if model.design is None else Design(model.design).value,
        "layers": [{"shape": list(w.shape), "weights": w.ravel().tolist(),
                    "bias": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "in_mean": model.in_mean.tolist(),
        "in_scale": model.in_scale.tolist(),
        "price_center": model.price_center,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> MlpModel:
    doc = json.loads(Path(path).read_text())
    weights = [np.array(l["weights"], float).reshape(l["shape"]) for l in doc["layers"]]
    biases = [np.array(l["bias"], float) for l in doc["layers"]]
    design = None if doc["design"] is None else Design(doc["design"])
    return MlpModel(weights, biases, np.array(doc["in_mean"], float),
                    np.array(doc["in_scale"], float), design, float(doc["price_center"]))


def train_config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["objective"] = config.objective.value
    d["hidden"] = list(config.hidden)
    return d
