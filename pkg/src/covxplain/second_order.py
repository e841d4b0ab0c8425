"""Second-order explanations of ensemble variance.

The variance ``s2`` is a fixed quadratic form in the instance predictions,
so attributing each product ``y_m y_m'`` to feature pairs as the outer
product of first-order explanations gives a ``d x d`` matrix that equals the
covariance (over instances) of the first-order explanation vectors.  Both
the covariance form and the explicit coefficient double sum are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensemble import EnsembleModel, coefficients
from .errors import ConfigError, DimensionError
from .first_order import (
    Explanation,
    LrpConfig,
    MemberOutput,
    gradient_x_input,
    integrated_gradients,
    lrp,
    sensitivity,
    shapley_exact,
    shapley_value_sampling,
)

DIAG = "diag"
MARG = "marg"
MATRIX = "matrix"

_TAGS = {"lrp": "LRP", "gi": "GI", "ig": "IG", "sa": "SA", "svs": "SVS", "shapley": "Shapley"}


@dataclass(frozen=True)
class Backend:
    """First-order method used inside the covariance combinator."""

    method: str = "lrp"
    lrp: LrpConfig = LrpConfig()
    ig_steps: int = 64
    svs_permutations: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method.lower() not in _TAGS:
            raise ConfigError(f"unknown first-order method {self.method!r}; "
                              f"choose from {sorted(_TAGS)}")
        object.__setattr__(self, "method", self.method.lower())

    @property
    def tag(self) -> str:
        return "Cov" + _TAGS[self.method]


@dataclass
class SecondOrderExplanation:
    matrix: np.ndarray
    s2: float
    method: str = "Cov"
    info: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def diag(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    def marg(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "d": self.d,
            "matrix": self.matrix.ravel().tolist(),
            "s2": float(self.s2),
            "diag": self.diag().tolist(),
            "marg": self.marg().tolist(),
        }


@dataclass
class SummarizedExplanation:
    scores: np.ndarray
    mode: str
    method: str = "Cov"
    s2: float = 0.0

    def to_record(self) -> dict:
        return {"method": f"{self.method}-{self.mode}", "mode": self.mode,
                "scores": self.scores.tolist(), "s2": float(self.s2)}


def _stack(explanations) -> np.ndarray:
    rows = [e.scores if isinstance(e, Explanation) else np.asarray(e, dtype=np.float64)
            for e in explanations]
    if len(rows) < 2:
        raise ConfigError("need explanations from at least M = 2 instances")
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise DimensionError("explanations must be vectors of equal length")
    return np.stack(rows)


def product_attribution(e, e_other) -> np.ndarray:
    """Attribution of a product of two outputs: the outer product of their explanations."""
    a = e.scores if isinstance(e, Explanation) else np.asarray(e, dtype=np.float64)
    b = e_other.scores if isinstance(e_other, Explanation) else np.asarray(e_other, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"explanation lengths differ: {a.shape} vs {b.shape}")
    return np.outer(a, b)


def covariance_matrix(E: np.ndarray) -> np.ndarray:
    """1/M-normalized covariance of the rows of ``E`` (M x d).

    Accumulated in instance order so the result does not depend on BLAS
    threading.
    """
    centered = E - E.mean(axis=0)
    R = np.zeros((E.shape[1], E.shape[1]))
    for row in centered:
        R += np.outer(row, row)
    R /= E.shape[0]
    # exact symmetry regardless of rounding
    return 0.5 * (R + R.T)


def double_sum_matrix(E: np.ndarray) -> np.ndarray:
    """``sum_mm' b_mm' e_m (x) e_m'`` evaluated term by term."""
    M = E.shape[0]
    b = coefficients(M)
    R = np.zeros((E.shape[1], E.shape[1]))
    for m in range(M):
        for k in range(M):
            R += b[m, k] * product_attribution(E[m], E[k])
    return R


def cov_explanation(explanations, method: str = "Cov", path: str = "covariance") -> SecondOrderExplanation:
    """Covariance of M first-order explanations.

    ``path="double_sum"`` uses the O(M^2 d^2) coefficient form instead; both
    agree to rounding.  ``s2`` is the variance of the explained target
    values.
    """
    E = _stack(explanations)
    if path == "covariance":
        R = covariance_matrix(E)
    elif path == "double_sum":
        R = double_sum_matrix(E)
    else:
        raise ConfigError(f"unknown path {path!r}")
    targets = [e.target_value for e in explanations if isinstance(e, Explanation)]
    s2 = float(np.var(targets)) if len(targets) == E.shape[0] else float(R.sum())
    return SecondOrderExplanation(R, s2, method)


def summarize(expl: SecondOrderExplanation, mode: str = DIAG) -> SummarizedExplanation:
    """Reduce the matrix to per-feature scores.

    ``diag`` keeps the single-feature (variance) terms; ``marg`` additionally
    splits every pairwise term evenly between its two features.
    """
    R = expl.matrix
    if mode == DIAG:
        scores = np.diag(R).copy()
    elif mode == MARG:
        scores = np.diag(R) + 0.5 * (R.sum(axis=0) - np.diag(R)) + 0.5 * (R.sum(axis=1) - np.diag(R))
    else:
        raise ConfigError(f"unknown summary mode {mode!r}")
    return SummarizedExplanation(scores, mode, expl.method, expl.s2)


def member_explanations(model: EnsembleModel, x, backend: Backend = Backend(),
                        output_index: int = 0) -> list[Explanation]:
    """First-order explanation of every instance's output ``output_index``."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for m, (mlp, plan) in enumerate(model.instances()):
        if backend.method == "lrp":
            out.append(lrp(mlp, x, output_index, backend.lrp, plan))
            continue
        f = MemberOutput(mlp, plan, output_index)
        if backend.method == "gi":
            out.append(gradient_x_input(f, x))
        elif backend.method == "ig":
            out.append(integrated_gradients(f, x, steps=backend.ig_steps))
        elif backend.method == "sa":
            out.append(sensitivity(f, x))
        elif backend.method == "svs":
            out.append(shapley_value_sampling(f, x, permutations=backend.svs_permutations,
                                              seed=backend.seed + m))
        else:
            out.append(shapley_exact(f, x))
    return out


def explain_uncertainty(model: EnsembleModel, x, backend: Backend = Backend(),
                        output_mode: str = MATRIX, output_index: int = 0):
    """Explain the ensemble variance at ``x`` for one output dimension.

    Returns a :class:`SecondOrderExplanation` for ``output_mode="matrix"``,
    otherwise its ``diag`` or ``marg`` summary.
    """
    expl = cov_explanation(member_explanations(model, x, backend, output_index), backend.tag)
    if output_mode == MATRIX:
        return expl
    return summarize(expl, output_mode)


def explain_uncertainty_multidim(model: EnsembleModel, x, backend: Backend = Backend()) -> SecondOrderExplanation:
    """Explanation of the summed variance of all output dimensions."""
    parts = [explain_uncertainty(model, x, backend, MATRIX, k) for k in range(model.output_dim)]
    R = sum(p.matrix for p in parts)
    return SecondOrderExplanation(R, float(sum(p.s2 for p in parts)), backend.tag)
