"""Minimal dense ReLU network engine.

Everything the attribution code needs from a network lives here: a forward
pass that keeps the per-layer pre/post activations, reverse-mode input
gradients, inverted dropout masks and a small Adam trainer.  Weights are
stored ``(fan_out, fan_in)`` so a layer computes ``z = a @ W.T + b``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError

log = logging.getLogger(__name__)

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise DimensionError(f"weights must be 2-d, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise DimensionError(f"bias length {b.shape[0]} != fan_out {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericalError("layer parameters must be finite")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Mlp:
    """Feed-forward ReLU network with an identity (regression) head."""

    layers: tuple
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DimensionError("an Mlp needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].fan_in != layers[i - 1].fan_out:
                raise DimensionError(
                    f"layer {i} expects {layers[i].fan_in} inputs but layer {i - 1} "
                    f"produces {layers[i - 1].fan_out}"
                )
        if layers[-1].activation != IDENTITY:
            raise ConfigError("the last layer must use the identity activation")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def hidden_sizes(self) -> list[int]:
        return [layer.fan_out for layer in self.layers[:-1]]

    @property
    def architecture(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]

    def __call__(self, x, plan: DropoutPlan | None = None) -> np.ndarray:
        return forward(self, x, plan)[0]

    @classmethod
    def random(cls, sizes: Sequence[int], rng: np.random.Generator | int | None = None,
               bias: bool = True, bias_scale: float = 0.1) -> "Mlp":
        """Random network with He-uniform weights.

        ``sizes`` lists every width including input and output, e.g.
        ``[d, 64, 32, 1]``.  With ``bias=False`` the network is positively
        homogeneous.
        """
        rng = np.random.default_rng(rng)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            b = rng.normal(0.0, bias_scale, size=fan_out) if bias else np.zeros(fan_out)
            act = IDENTITY if i == len(sizes) - 2 else RELU
            layers.append(DenseLayer(w, b, act))
        return cls(tuple(layers))

    def with_layers(self, layers) -> "Mlp":
        return Mlp(tuple(layers), seed=self.seed, meta=dict(self.meta))


@dataclass(frozen=True)
class DropoutPlan:
    """Fixed inverted-dropout masks, one vector per hidden layer.

    Mask entries are 0 or ``1 / (1 - rate)`` so the mask-averaged network
    equals the mask-free one in expectation.
    """

    rate: float
    masks: tuple
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        masks = []
        for m in self.masks:
            m = np.array(m, dtype=np.float64).reshape(-1)
            m.setflags(write=False)
            masks.append(m)
        object.__setattr__(self, "masks", tuple(masks))

    def check(self, mlp: Mlp):
        sizes = mlp.hidden_sizes
        if len(self.masks) != len(sizes) or any(
            m.shape[0] != s for m, s in zip(self.masks, sizes)
        ):
            raise DimensionError(
                f"dropout masks {[m.shape[0] for m in self.masks]} do not match "
                f"hidden layers {sizes}"
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    validation_fraction: float = 0.1
    seed: int = 0
    dropout: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class Trace:
    """Per-layer record of a forward pass.

    ``inputs[l]`` is what layer ``l`` consumed (after any dropout mask),
    ``pre[l]`` its pre-activation ``z`` and ``post[l]`` its output.
    """

    inputs: list
    pre: list
    post: list


def _as_batch(mlp: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != mlp.input_dim:
        raise DimensionError(f"expected input of width {mlp.input_dim}, got shape {x.shape}")
    return X, single


def forward(mlp: Mlp, x, plan: DropoutPlan | None = None) -> tuple[np.ndarray, Trace]:
    """Evaluate ``mlp`` on ``x`` (a d-vector or an n-by-d batch).

    Returns the output and the :class:`Trace` needed by LRP and by
    :func:`input_gradient`.  Dropout, if given, multiplies the post-activation
    of every hidden layer by its mask.
    """
    X, single = _as_batch(mlp, x)
    if plan is not None:
        plan.check(mlp)
    a = X
    inputs, pre, post = [], [], []
    last = len(mlp.layers) - 1
    for i, layer in enumerate(mlp.layers):
        inputs.append(a)
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ layer.weights.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
        if plan is not None and i < last:
            a = a * plan.masks[i]
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite pre-activation in layer {i}")
        pre.append(z)
        post.append(a)
    y = a[0] if single else a
    if single:
        inputs = [v[0] for v in inputs]
        pre = [v[0] for v in pre]
        post = [v[0] for v in post]
    return y, Trace(inputs, pre, post)


def backward(mlp: Mlp, trace: Trace, grad_out: np.ndarray,
             plan: DropoutPlan | None = None) -> np.ndarray:
    """Vector-Jacobian product of the traced forward pass w.r.t. its input."""
    g = np.asarray(grad_out, dtype=np.float64)
    last = len(mlp.layers) - 1
    for i in range(last, -1, -1):
        layer = mlp.layers[i]
        if plan is not None and i < last:
            g = g * plan.masks[i]
        if layer.activation == RELU:
            # sub-gradient 0 at z == 0
            g = g * (trace.pre[i] > 0)
        g = g @ layer.weights
    return g


def input_gradient(mlp: Mlp, x, output_index: int = 0,
                   plan: DropoutPlan | None = None) -> np.ndarray:
    """Gradient of output ``output_index`` w.r.t. the input (batched or not)."""
    if not 0 <= output_index < mlp.output_dim:
        raise DimensionError(f"output_index {output_index} out of range for {mlp.output_dim} outputs")
    y, trace = forward(mlp, x, plan)
    seed = np.zeros_like(y)
    seed[..., output_index] = 1.0
    return backward(mlp, trace, seed, plan)


def activation_pattern(mlp: Mlp, x, plan: DropoutPlan | None = None) -> np.ndarray:
    """Boolean ``z > 0`` indicators of every ReLU unit, concatenated."""
    _, trace = forward(mlp, x, plan)
    parts = [z > 0 for z, layer in zip(trace.pre, mlp.layers) if layer.activation == RELU]
    if not parts:
        return np.zeros(np.shape(x)[:-1] + (0,), dtype=bool)
    return np.concatenate(parts, axis=-1)


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------

def make_dropout_plan(mlp: Mlp, rate: float, seed: int) -> DropoutPlan:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - rate)
    masks = [(rng.random(n) >= rate) * scale for n in mlp.hidden_sizes]
    return DropoutPlan(rate, tuple(masks), int(seed))


def sample_dropout_plans(mlp: Mlp, rate: float, count: int, seed: int) -> list[DropoutPlan]:
    """Draw ``count`` independent dropout plans; reproducible from ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if count < 2:
        raise ConfigError("need at least 2 dropout samples")
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_dropout_plan(mlp, rate, int(s)) for s in seeds]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _init_params(sizes, rng):
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        params.append(np.zeros(fan_out))
    return params


def _to_mlp(params, seed, meta) -> Mlp:
    n = len(params) // 2
    layers = []
    for i in range(n):
        act = IDENTITY if i == n - 1 else RELU
        layers.append(DenseLayer(params[2 * i].copy(), params[2 * i + 1].copy(), act))
    return Mlp(tuple(layers), seed=seed, meta=meta)


def _loss_and_grads(params, X, Y, rate, rng):
    n_layers = len(params) // 2
    a = X
    cache = []
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        z = a @ W.T + b
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            mask = None
            if rate > 0:
                mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
                h = h * mask
            cache.append((a, z, mask))
            a = h
        else:
            cache.append((a, z, None))
            a = z
    diff = a - Y
    loss = float(np.mean(diff ** 2))
    g = 2.0 * diff / diff.size
    grads = [None] * len(params)
    for i in range(n_layers - 1, -1, -1):
        a_in, z, mask = cache[i]
        if i < n_layers - 1:
            if mask is not None:
                g = g * mask
            g = g * (z > 0)
        grads[2 * i] = g.T @ a_in
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params[2 * i]
    return loss, grads


def _mse(params, X, Y) -> float:
    n_layers = len(params) // 2
    a = X
    for i in range(n_layers):
        z = a @ params[2 * i].T + params[2 * i + 1]
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
    # a diverged run overflows here; the caller checks finiteness
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean((a - Y) ** 2))


def train(X, y, config: TrainConfig = TrainConfig(),
          architecture: Sequence[int] = (64, 32, 16)) -> Mlp:
    """Fit an MLP with Adam on mean squared error.

    ``architecture`` lists the hidden widths only; input and output widths
    come from the data.  The snapshot with the lowest validation MSE over
    all epochs is returned, so the result is deterministic in ``config.seed``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionError(f"X {X.shape} and y {Y.shape} do not align")
    if X.shape[0] < 10:
        raise ConfigError("need at least 10 training rows")

    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    n_val = max(1, int(round(config.validation_fraction * n)))
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xtr, Ytr, Xval, Yval = X[tr_idx], Y[tr_idx], X[val_idx], Y[val_idx]

    sizes = [X.shape[1], *architecture, Y.shape[1]]
    params = _init_params(sizes, rng)
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    step = 0

    best_val = _mse(params, Xval, Yval)
    best = [p.copy() for p in params]
    best_epoch = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(Xtr.shape[0])
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _loss_and_grads(params, Xtr[idx], Ytr[idx], config.dropout, rng)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"training loss became {loss} at epoch {epoch}, batch starting at "
                    f"row {start} (learning_rate={lr}); lower the learning rate"
                )
            step += 1
            for k, (p, g) in enumerate(zip(params, grads)):
                if config.weight_decay and k % 2 == 0:
                    g = g + config.weight_decay * p
                m1[k] = beta1 * m1[k] + (1 - beta1) * g
                m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
                mhat = m1[k] / (1 - beta1 ** step)
                vhat = m2[k] / (1 - beta2 ** step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
        with np.errstate(over="ignore", invalid="ignore"):
            val = _mse(params, Xval, Yval)
        if not np.isfinite(val):
            raise NumericalError(f"validation loss became {val} at epoch {epoch}")
        history.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = [p.copy() for p in params]
        log.debug("epoch %d val_mse %.6g", epoch, val)

    meta = {
        "best_epoch": best_epoch,
        "val_mse": best_val,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "validation_fraction": config.validation_fraction,
        "dropout": config.dropout,
    }
    return _to_mlp(best, config.seed, meta)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "architecture": mlp.architecture,
        "activations": [layer.activation for layer in mlp.layers],
        "layers": [
            {"weights": layer.weights.ravel().tolist(), "bias": layer.bias.tolist()}
            for layer in mlp.layers
        ],
        "seed": mlp.seed,
        "train_meta": mlp.meta,
    }


def mlp_from_dict(doc: dict) -> Mlp:
    arch = doc["architecture"]
    acts = doc["activations"]
    if len(arch) != len(doc["layers"]) + 1 or len(acts) != len(doc["layers"]):
        raise DimensionError("checkpoint architecture does not match its layer list")
    layers = []
    for i, spec in enumerate(doc["layers"]):
        w = np.array(spec["weights"], dtype=np.float64).reshape(arch[i + 1], arch[i])
        layers.append(DenseLayer(w, np.array(spec["bias"], dtype=np.float64), acts[i]))
    return Mlp(tuple(layers), seed=doc.get("seed"), meta=doc.get("train_meta") or {})


def save_mlp(mlp: Mlp, path) -> Path:
    # json writes floats with repr(), the shortest string that round-trips exactly
    path = Path(path)
    path.write_text(json.dumps(mlp_to_dict(mlp), sort_keys=True))
    return path


def load_mlp(path) -> Mlp:
    return mlp_from_dict(json.loads(Path(path).read_text()))


def plan_to_dict(plan: DropoutPlan) -> dict:
    return {"seed": plan.seed, "rate": plan.rate, "masks": [m.tolist() for m in plan.masks]}


def plan_from_dict(doc: dict) -> DropoutPlan:
    return DropoutPlan(doc["rate"], tuple(np.array(m) for m in doc["masks"]), doc.get("seed", 0))
