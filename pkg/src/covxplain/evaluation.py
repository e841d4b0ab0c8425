"""Feature-flipping faithfulness benchmark.

Features are removed in order of decreasing relevance and replaced by draws
from a Gaussian-kernel inpainter conditioned on the features still present.
The ensemble variance is tracked along the way; a faithful ranking makes the
normalized curve drop quickly, i.e. gives a small area under it (AUFC).
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .ensemble import EnsembleModel
from .errors import ConfigError, DimensionError, NumericalError
from .first_order import (
    EnsembleVariance,
    LrpConfig,
    integrated_gradients,
    sensitivity,
    shapley_value_sampling,
    variance_head_explanation,
)
from .second_order import Backend, explain_uncertainty_multidim

log = logging.getLogger(__name__)

DEFAULT_BANDWIDTHS = tuple(np.logspace(np.log10(0.05), np.log10(2.0), 15))
DEFAULT_METHODS = ("covlrp-diag", "covlrp-marg", "covgi-diag", "covgi-marg",
                 "lrp", "gi", "ig", "sa", "svs")
S2_FLOOR = 1e-12


# --------------------------------------------------------------------------
# KDE inpainter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KdeInpainter:
    training_matrix: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if np.ndim(self.training_matrix) != 2 or len(self.training_matrix) < 2:
            raise ConfigError("the inpainter needs an N x d training matrix with N >= 2")

    @property
    def d(self) -> int:
        return self.training_matrix.shape[1]


def _heldout_loglik(fit: np.ndarray, held: np.ndarray, h: float) -> float:
    d = fit.shape[1]
    sq = ((held[:, None, :] - fit[None, :, :]) ** 2).sum(axis=-1)
    log_k = -sq / (2 * h * h) - d * np.log(h) - 0.5 * d * np.log(2 * np.pi)
    return float(np.sum(logsumexp(log_k, axis=1) - np.log(fit.shape[0])))


def fit_inpainter(train, bandwidth_grid: Sequence[float] = DEFAULT_BANDWIDTHS,
                  holdout_fraction: float = 0.2, max_rows: int = 4000) -> KdeInpainter:
    """Pick the isotropic Gaussian bandwidth with the best held-out likelihood.

    Duplicate rows are dropped before scoring (a duplicate in both halves
    would reward vanishing bandwidths); the held-out slice is a fixed
    pseudo-random 20% of the unique rows.  The returned inpainter keeps the
    full training matrix.
    """
    train = np.array(train, dtype=np.float64)
    if train.ndim == 1:
        train = train[:, None]
    if train.shape[0] < 10:
        raise ConfigError("need at least 10 rows to fit the inpainter")
    grid = [float(h) for h in bandwidth_grid]
    if not grid or min(grid) <= 0:
        raise ConfigError("bandwidth grid must contain positive values")
    flat = np.std(train, axis=0) == 0
    if np.any(flat):
        warnings.warn(f"zero-variance columns {np.flatnonzero(flat).tolist()}; adding 1e-6 jitter")
        jitter = np.random.default_rng(0).normal(0, 1e-6, size=(train.shape[0], int(flat.sum())))
        train[:, flat] += jitter
    if len(grid) == 1:
        return KdeInpainter(train, grid[0])

    unique = np.unique(train, axis=0)
    rng = np.random.default_rng(0)
    order = rng.permutation(unique.shape[0])[:max_rows]
    n_held = max(1, int(round(holdout_fraction * len(order))))
    held, fit = unique[order[:n_held]], unique[order[n_held:]]
    scores = [_heldout_loglik(fit, held, h) for h in grid]
    best = grid[int(np.argmax(scores))]
    log.debug("bandwidth scores %s -> %g", dict(zip(grid, scores)), best)
    return KdeInpainter(train, best)


def conditional_resample(inp: KdeInpainter, x, removed, rng_seed=None) -> np.ndarray:
    """Replace ``removed`` coordinates of ``x`` by a draw conditioned on the rest."""
    return conditional_resample_many(inp, x, removed, 1, np.random.default_rng(rng_seed))[0]


def conditional_resample_many(inp: KdeInpainter, x, removed, n: int,
                              rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (inp.d,):
        raise DimensionError(f"expected a vector of length {inp.d}")
    removed = np.unique(np.asarray(list(removed), dtype=int))
    if removed.size == 0:
        raise ConfigError("removed set must be non-empty")
    if removed.min() < 0 or removed.max() >= inp.d:
        raise DimensionError("removed index out of range")
    kept = np.setdiff1d(np.arange(inp.d), removed)
    T = inp.training_matrix
    h = inp.bandwidth
    if kept.size:
        log_w = -((T[:, kept] - x[kept]) ** 2).sum(axis=1) / (2 * h * h)
        log_w = log_w - logsumexp(log_w)
        w = np.exp(log_w)
        if not np.all(np.isfinite(w)) or w.sum() <= 0:
            warnings.warn("kernel weights underflowed; sampling components uniformly")
            w = np.full(T.shape[0], 1.0 / T.shape[0])
    else:
        w = np.full(T.shape[0], 1.0 / T.shape[0])
    w = w / w.sum()
    comp = rng.choice(T.shape[0], size=n, p=w)
    out = np.repeat(x[None, :], n, axis=0)
    out[:, removed] = T[comp][:, removed] + h * rng.standard_normal((n, removed.size))
    return out


# --------------------------------------------------------------------------
# flipping curves
# --------------------------------------------------------------------------

@dataclass
class FlippingCurve:
    values: np.ndarray
    fractions: np.ndarray
    draws: int
    order: np.ndarray
    s2_initial: float

    @property
    def aufc(self) -> float:
        return aufc(self)


def flip_order(scores) -> np.ndarray:
    """Most relevant first; ties go to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def feature_flip(s2_fn: Callable, ranking, x, inp: KdeInpainter, draws: int = 5,
                 seed=0) -> FlippingCurve | None:
    """Flipping curve of ``s2_fn`` for one input.

    At step ``k`` the top-``k`` features are resampled jointly (fresh draws,
    not reusing the previous step) and ``s2`` is averaged over ``draws``.
    Values are divided by ``s2(x)``.  Returns ``None`` when ``s2(x)`` is
    below 1e-12, where normalization is meaningless.
    """
    if draws < 1:
        raise ConfigError("draws must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    scores = ranking.scores if hasattr(ranking, "scores") else ranking
    order = flip_order(scores)
    if order.shape[0] != d:
        raise DimensionError("ranking length differs from input length")
    s2_x = float(np.asarray(s2_fn(x[None, :])).reshape(-1)[0])
    if not s2_x >= S2_FLOOR:
        return None
    rng = np.random.default_rng(seed)
    batch = np.concatenate(
        [conditional_resample_many(inp, x, order[:k], draws, rng) for k in range(1, d + 1)]
    )
    s2 = np.asarray(s2_fn(batch), dtype=np.float64).reshape(d, draws)
    values = np.ones(d + 1)
    for k in range(d):
        row = s2[k]
        good = np.isfinite(row)
        if not good.all():
            warnings.warn(f"discarding {int((~good).sum())} non-finite s2 draws at step {k + 1}")
        if not good.any():
            raise NumericalError(f"every draw at flipping step {k + 1} produced a non-finite s2")
        values[k + 1] = row[good].mean() / s2_x
    return FlippingCurve(values, np.arange(d + 1) / d, draws, order, s2_x)


def aufc(curve) -> float:
    """Trapezoid area under the curve on the fraction-flipped axis."""
    values = np.asarray(getattr(curve, "values", curve), dtype=np.float64)
    fractions = getattr(curve, "fractions", None)
    if fractions is None:
        fractions = np.linspace(0.0, 1.0, values.shape[0])
    v, f = values, np.asarray(fractions)
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(f)))


# --------------------------------------------------------------------------
# ranking methods
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodOptions:
    gamma: float | tuple = 0.2
    ig_steps: int = 64
    svs_permutations: int | None = None
    seed: int = 0


def method_scores(model: EnsembleModel, x, method: str,
                  options: MethodOptions = MethodOptions(), instance: int = 0) -> np.ndarray:
    """Per-feature relevance of the summed ensemble variance at ``x``.

    ``instance`` only feeds the seed of the ``random`` baseline so that it
    draws a different order for every test point.
    """
    method = method.lower()
    lrp_cfg = LrpConfig(options.gamma)
    f = EnsembleVariance(model, output_index=None)
    if method.startswith("cov"):
        base, _, mode = method[3:].partition("-")
        if mode not in ("diag", "marg"):
            raise ConfigError(f"{method!r}: covariance methods need a -diag or -marg suffix")
        backend = Backend(base, lrp=lrp_cfg, ig_steps=options.ig_steps,
                          svs_permutations=options.svs_permutations, seed=options.seed)
        expl = explain_uncertainty_multidim(model, x, backend)
        return expl.diag() if mode == "diag" else expl.marg()
    if method == "lrp":
        return variance_head_explanation(model, x, "lrp", lrp_cfg, output_index=None).scores
    if method == "gi":
        return variance_head_explanation(model, x, "gi", output_index=None).scores
    if method == "ig":
        return integrated_gradients(f, x, steps=options.ig_steps).scores
    if method == "sa":
        return sensitivity(f, x).scores
    if method == "svs":
        return shapley_value_sampling(f, x, permutations=options.svs_permutations,
                                      seed=options.seed).scores
    if method == "random":
        rng = np.random.default_rng([options.seed, instance])
        return rng.permutation(np.shape(x)[0]).astype(float)
    raise ConfigError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

@dataclass
class AufcReport:
    method: str
    dataset: str
    instance_ids: list
    aufcs: np.ndarray
    curves: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.aufcs)) if len(self.aufcs) else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.aufcs)) if len(self.aufcs) else float("nan")

    @property
    def mean_curve(self) -> np.ndarray:
        return np.mean([c.values for c in self.curves], axis=0)


@dataclass
class BenchmarkResult:
    dataset: str
    reports: dict
    rows: list

    def means(self) -> dict:
        return {m: r.mean for m, r in self.reports.items()}


def select_top_uncertain(model: EnsembleModel, X, top_k: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if top_k > X.shape[0]:
        raise ConfigError(f"top_k={top_k} exceeds the {X.shape[0]} available test points")
    s2 = model.variance(X, output_index=None)
    return np.argsort(-s2, kind="stable")[:top_k]


def benchmark(model: EnsembleModel, X_test, methods: Sequence[str] = DEFAULT_METHODS,
              top_k: int = 20, draws: int = 5, seed: int = 0,
              inpainter: KdeInpainter | None = None, train=None,
              dataset: str = "dataset", options: MethodOptions | None = None,
              threads: int = 1, callback: Callable | None = None) -> BenchmarkResult:
    """Run feature flipping for every method on the ``top_k`` most uncertain points.

    Resampling noise for a test point depends only on ``(seed, instance)``,
    so methods are compared under common random numbers and two methods
    with the same ranking get the same curve.
    """
    X_test = np.asarray(X_test, dtype=np.float64)
    if inpainter is None:
        if train is None:
            raise ConfigError("benchmark needs an inpainter or training data to fit one")
        inpainter = fit_inpainter(train)
    options = options or MethodOptions(seed=seed)
    ids = select_top_uncertain(model, X_test, top_k)
    s2_fn = EnsembleVariance(model, output_index=None)
    methods = [m.lower() for m in methods]

    def task(job):
        method, inst = job
        x = X_test[inst]
        scores = method_scores(model, x, method, options, inst)
        curve = feature_flip(s2_fn, scores, x, inpainter, draws, seed=[seed, int(inst)])
        if callback is not None:
            callback(method, int(inst), curve)
        return method, int(inst), curve

    jobs = [(m, int(i)) for i in ids for m in methods]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, jobs))
    else:
        results = [task(j) for j in jobs]

    reports = {m: AufcReport(m, dataset, [], np.array([])) for m in methods}
    rows = []
    collected = {m: [] for m in methods}
    for method, inst, curve in results:
        if curve is None:
            log.info("skipping instance %d: s2 below %g", inst, S2_FLOOR)
            continue
        area = aufc(curve)
        reports[method].instance_ids.append(inst)
        reports[method].curves.append(curve)
        collected[method].append(area)
        rows.append({"dataset": dataset, "method": method, "instance_id": inst,
                     "s2_initial": curve.s2_initial, "aufc": area})
    for m in methods:
        reports[m].aufcs = np.array(collected[m])
    return BenchmarkResult(dataset, reports, rows)
