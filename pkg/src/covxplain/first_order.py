"""First-order attribution backends.

Gradient-based methods take a *differentiable scalar function*: any object
that is callable on a batch of inputs (``(n, d) -> (n,)``) and has a
``gradient`` method with the matching ``(n, d) -> (n, d)`` signature.
:class:`MemberOutput` and :class:`EnsembleVariance` are the two used
throughout the package.  Perturbation methods (Shapley) only need the call.
LRP works on the network itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ensemble import EnsembleModel
from .errors import ConfigError, DimensionError, NumericalError
from .nn import Mlp, DropoutPlan, forward, input_gradient

SIMPLE = "simple"
GENERALIZED = "generalized"
STABILIZER_EPS = 1e-9
MAX_EXACT_SHAPLEY_DIM = 12


@dataclass
class Explanation:
    scores: np.ndarray
    target_value: float
    method: str
    gamma: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise DimensionError("explanation scores must be a vector")
        if not np.all(np.isfinite(self.scores)):
            raise NumericalError(f"{self.method}: non-finite relevance scores")

    def __len__(self):
        return self.scores.shape[0]

    def to_record(self, input_ref=None) -> dict:
        rec = {
            "method": self.method,
            "scores": self.scores.tolist(),
            "target_value": float(self.target_value),
            "input_ref": input_ref,
        }
        if self.gamma is not None:
            rec["gamma"] = self.gamma
        return rec


class MemberOutput:
    """One output of one network (optionally under a fixed dropout plan)."""

    def __init__(self, mlp: Mlp, plan: DropoutPlan | None = None, output_index: int = 0):
        self.mlp, self.plan, self.output_index = mlp, plan, output_index

    def __call__(self, X):
        return forward(self.mlp, X, self.plan)[0][..., self.output_index]

    def gradient(self, X):
        return input_gradient(self.mlp, X, self.output_index, self.plan)


class EnsembleVariance:
    """``x -> s2(x)``; ``output_index=None`` sums over output dimensions."""

    def __init__(self, model: EnsembleModel, output_index: int | None = 0):
        self.model, self.output_index = model, output_index

    def __call__(self, X):
        return self.model.variance(X, self.output_index)

    def gradient(self, X):
        return self.model.variance_gradient(X, self.output_index)


def _vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a single input vector, got shape {x.shape}")
    return x


def _gradient(f, X):
    grad = getattr(f, "gradient", None)
    if grad is None:
        raise ConfigError(f"{type(f).__name__} does not provide a gradient")
    return np.asarray(grad(X), dtype=np.float64)


def _value(f, x) -> float:
    return float(np.asarray(f(x[None, :])).reshape(-1)[0])


def gradient_x_input(f, x) -> Explanation:
    x = _vector(x)
    g = _gradient(f, x[None, :])[0]
    return Explanation(g * x, _value(f, x), "GI")


def sensitivity(f, x, signed: bool = False) -> Explanation:
    """Sensitivity analysis: absolute (or signed) partial derivatives."""
    x = _vector(x)
    g = _gradient(f, x[None, :])[0]
    return Explanation(g if signed else np.abs(g), _value(f, x), "SA")


def integrated_gradients(f, x, reference=None, steps: int = 64) -> Explanation:
    """Integrated gradients with a midpoint Riemann sum over ``steps`` points."""
    x = _vector(x)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    ref = np.zeros_like(x) if reference is None else _vector(reference)
    if ref.shape != x.shape:
        raise DimensionError("reference and input differ in length")
    alphas = (np.arange(steps) + 0.5) / steps
    path = ref + alphas[:, None] * (x - ref)
    grads = _gradient(f, path)
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient along the integration path")
    return Explanation((x - ref) * grads.mean(axis=0), _value(f, x), "IG",
                       info={"steps": steps})


# --------------------------------------------------------------------------
# LRP
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LrpConfig:
    """``gamma`` is a scalar or one value per layer (input layer first)."""

    gamma: float | tuple = 0.2
    variant: str = GENERALIZED

    def __post_init__(self):
        gammas = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        if np.any(gammas < 0) or not np.all(np.isfinite(gammas)):
            raise ConfigError("gamma must be finite and >= 0")
        if self.variant not in (SIMPLE, GENERALIZED):
            raise ConfigError(f"unknown LRP variant {self.variant!r}")
        if not np.isscalar(self.gamma):
            object.__setattr__(self, "gamma", tuple(float(g) for g in gammas))

    def layer_gammas(self, n_layers: int) -> list[float]:
        if np.isscalar(self.gamma):
            return [float(self.gamma)] * n_layers
        if len(self.gamma) != n_layers:
            raise ConfigError(f"got {len(self.gamma)} gamma values for {n_layers} layers")
        return list(self.gamma)


def _stabilize(zeta, counter, carries):
    small = np.abs(zeta) < STABILIZER_EPS
    if np.any(small):
        counter[0] += int(np.sum(small & carries))
        zeta = np.where(small, zeta + STABILIZER_EPS * np.where(zeta >= 0, 1.0, -1.0), zeta)
    return zeta


def _lrp_simple(a, W, b, R, gamma, counter):
    Wg = W + gamma * np.maximum(W, 0.0)
    zeta = Wg @ a + b + gamma * np.maximum(b, 0.0)
    s = R / _stabilize(zeta, counter, R != 0)
    return a * (Wg.T @ s)


def _lrp_generalized(a, W, b, z, R, gamma, counter):
    ap, an = np.maximum(a, 0.0), np.minimum(a, 0.0)
    w_up = W + gamma * np.maximum(W, 0.0)
    w_dn = W + gamma * np.minimum(W, 0.0)
    # active branch (z > 0) favours positive contributions, inactive branch negative ones
    z_pos = w_up @ ap + w_dn @ an + b + gamma * np.maximum(b, 0.0)
    z_neg = w_dn @ ap + w_up @ an + b + gamma * np.minimum(b, 0.0)
    r_pos, r_neg = np.where(z > 0, R, 0.0), np.where(z < 0, R, 0.0)
    s_pos = r_pos / _stabilize(z_pos, counter, r_pos != 0)
    s_neg = r_neg / _stabilize(z_neg, counter, r_neg != 0)
    return ap * (w_up.T @ s_pos + w_dn.T @ s_neg) + an * (w_dn.T @ s_pos + w_up.T @ s_neg)


def lrp(mlp: Mlp, x, output_index: int = 0, config: LrpConfig = LrpConfig(),
        plan: DropoutPlan | None = None, relevance: float | None = None) -> Explanation:
    """Layer-wise relevance propagation with the LRP-gamma rule.

    Relevance starts at output neuron ``output_index`` with the network
    output (or ``relevance`` if given) and is redistributed layer by layer.
    Biases act as an extra input neuron with activation 1: they enter every
    denominator and keep their share, so relevance is only conserved
    exactly on bias-free networks.  Near-zero denominators are pushed away
    from zero by ``1e-9``; ``info["stabilized"]`` counts how often.
    """
    x = _vector(x)
    if not 0 <= output_index < mlp.output_dim:
        raise DimensionError(f"output_index {output_index} out of range")
    y, trace = forward(mlp, x, plan)
    if config.variant == SIMPLE:
        for i, a in enumerate(trace.inputs):
            if np.any(a < 0):
                where = "the input" if i == 0 else f"layer {i}"
                raise ConfigError(
                    f"simple LRP-gamma needs non-negative activations but {where} has "
                    "negative entries; use the generalized variant"
                )
    R = np.zeros(mlp.output_dim)
    R[output_index] = y[output_index] if relevance is None else relevance
    gammas = config.layer_gammas(len(mlp.layers))
    counter = [0]
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        a = trace.inputs[i]
        if config.variant == SIMPLE:
            R = _lrp_simple(a, layer.weights, layer.bias, R, gammas[i], counter)
        else:
            R = _lrp_generalized(a, layer.weights, layer.bias, trace.pre[i], R, gammas[i], counter)
    target = float(y[output_index] if relevance is None else relevance)
    gamma = config.gamma if np.isscalar(config.gamma) else list(config.gamma)
    return Explanation(R, target, "LRP", gamma=gamma,
                       info={"stabilized": counter[0], "variant": config.variant})


# --------------------------------------------------------------------------
# Shapley values
# --------------------------------------------------------------------------

def shapley_exact(f, x, baseline=None) -> Explanation:
    """Exact Shapley values by enumerating all ``2**d`` coalitions.

    Absent features take their baseline value.
    """
    x = _vector(x)
    d = x.shape[0]
    if d > MAX_EXACT_SHAPLEY_DIM:
        raise ConfigError(f"exact Shapley enumeration is limited to d <= {MAX_EXACT_SHAPLEY_DIM}")
    b = np.zeros_like(x) if baseline is None else _vector(baseline)
    codes = np.arange(2 ** d)
    present = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    v = np.asarray(f(np.where(present, x, b)), dtype=np.float64).reshape(-1)
    size = present.sum(axis=1)
    count = np.array([math.comb(d - 1, s) for s in range(d)], dtype=np.float64)
    phi = np.empty(d)
    for i in range(d):
        without = codes[~present[:, i]]
        # mean marginal contribution per coalition size, then mean over sizes;
        # same weights as s!(d-s-1)!/d!, but exact when the differences are
        by_size = np.bincount(size[without], weights=v[without | (1 << i)] - v[without], minlength=d)
        phi[i] = np.sum(by_size / count) / d
    return Explanation(phi, float(v[-1]), "Shapley", info={"baseline_value": float(v[0])})


def default_permutations(d: int) -> int:
    return max(128, 16 * d)


def shapley_value_sampling(f, x, baseline=None, permutations: int | None = None,
                           seed: int = 0) -> Explanation:
    """Monte-Carlo Shapley estimate from random feature orderings.

    Each permutation adds features one at a time (baseline -> x) and credits
    every feature with the change it causes; estimates are averaged.
    Orderings come in antithetic pairs (a random order and its reverse):
    still unbiased, and pairwise interaction noise cancels within a pair.
    """
    x = _vector(x)
    d = x.shape[0]
    b = np.zeros_like(x) if baseline is None else _vector(baseline)
    n_perm = default_permutations(d) if permutations is None else int(permutations)
    if n_perm < 1:
        raise ConfigError("permutations must be >= 1")
    rng = np.random.default_rng(seed)
    half = [rng.permutation(d) for _ in range((n_perm + 1) // 2)]
    perms = np.stack([p for q in half for p in (q, q[::-1])][:n_perm])
    rank = np.argsort(perms, axis=1)
    present = rank[:, None, :] < np.arange(d + 1)[None, :, None]
    v = np.asarray(f(np.where(present, x, b).reshape(-1, d)), dtype=np.float64)
    v = v.reshape(n_perm, d + 1)
    gains = np.diff(v, axis=1)
    phi = np.take_along_axis(gains, rank, axis=1).mean(axis=0)
    return Explanation(phi, float(v[0, -1]), "SVS", info={"permutations": n_perm, "seed": seed})


# --------------------------------------------------------------------------
# baselines on s2 through a variance head
# --------------------------------------------------------------------------

def variance_head_explanation(model: EnsembleModel, x, backend: str = "lrp",
                              config: LrpConfig = LrpConfig(),
                              output_index: int | None = 0) -> Explanation:
    """First-order explanation of s2 itself.

    The head squares each instance's deviation from the (frozen) ensemble
    mean and averages.  With ``backend="lrp"`` the head relevance
    ``(y_m - ybar)**2 / M`` is pushed down every instance and the heatmaps
    are summed; with ``"gi"`` this is Gradient x Input on s2.
    ``output_index=None`` explains the summed variance of all outputs.
    """
    x = _vector(x)
    backend = backend.lower()
    if backend == "gi":
        e = gradient_x_input(EnsembleVariance(model, output_index), x)
        e.method = "GI"
        return e
    if backend != "lrp":
        raise ConfigError(f"unknown variance-head backend {backend!r}")
    Y = model.outputs(x)
    dev = Y - Y.mean(axis=0)
    head = dev ** 2 / model.M
    outs = range(model.output_dim) if output_index is None else [output_index]
    total = np.zeros_like(x)
    stabilized = 0
    for k in outs:
        for m, (mlp, plan) in enumerate(model.instances()):
            e = lrp(mlp, x, k, config, plan, relevance=head[m, k])
            total += e.scores
            stabilized += e.info["stabilized"]
    target = float(head[:, list(outs)].sum())
    gamma = config.gamma if np.isscalar(config.gamma) else list(config.gamma)
    return Explanation(total, target, "LRP", gamma=gamma, info={"stabilized": stabilized})
