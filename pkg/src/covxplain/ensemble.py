"""Sample-based uncertainty: deep ensembles and MC dropout.

Both kinds expose the same view, a list of ``M`` fixed prediction instances
``(mlp, plan)``.  For MC dropout the plans are sampled once and frozen, so
predictions, per-instance explanations and the covariance combinator all
see the same ``M`` deterministic functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import (
    DropoutPlan,
    Mlp,
    forward,
    backward,
    mlp_from_dict,
    mlp_to_dict,
    load_mlp,
    plan_from_dict,
    plan_to_dict,
)

DEEP_ENSEMBLE = "deep_ensemble"
MC_DROPOUT = "mc_dropout"


class EnsembleModel:
    """``M >= 2`` prediction instances sharing input and output widths."""

    def __init__(self, members, plans=None):
        members = list(members)
        if not members:
            raise ConfigError("an ensemble needs at least one network")
        if plans is not None:
            plans = list(plans)
            if len(members) != 1:
                raise ConfigError("MC dropout ensembles wrap exactly one base network")
            for p in plans:
                p.check(members[0])
            self.kind = MC_DROPOUT
        else:
            self.kind = DEEP_ENSEMBLE
        self.members = members
        self.plans = plans
        d, t = members[0].input_dim, members[0].output_dim
        for m in members[1:]:
            if m.input_dim != d or m.output_dim != t:
                raise DimensionError("ensemble members disagree on input/output width")
        if self.M < 2:
            raise ConfigError(f"an ensemble needs M >= 2 instances, got {self.M}")

    @classmethod
    def mc_dropout(cls, base: Mlp, plans) -> "EnsembleModel":
        return cls([base], plans)

    @property
    def M(self) -> int:
        return len(self.plans) if self.plans is not None else len(self.members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.members[0].output_dim

    def instances(self) -> list[tuple[Mlp, DropoutPlan | None]]:
        if self.plans is None:
            return [(m, None) for m in self.members]
        return [(self.members[0], p) for p in self.plans]

    def outputs(self, X) -> np.ndarray:
        """Per-instance predictions, shape ``(n, M, T)`` (or ``(M, T)`` for one x)."""
        X = np.asarray(X, dtype=np.float64)
        return np.stack([forward(m, X, p)[0] for m, p in self.instances()], axis=-2)

    def variance(self, X, output_index: int | None = 0) -> np.ndarray:
        """Ensemble variance with the 1/M normalizer.

        ``output_index=None`` sums the variances over all output dimensions.
        """
        Y = self.outputs(X)
        s2 = Y.var(axis=-2)
        return s2.sum(axis=-1) if output_index is None else s2[..., output_index]

    def variance_gradient(self, X, output_index: int | None = 0) -> np.ndarray:
        """Input gradient of :meth:`variance`: ``(2/M) sum_m (y_m - ybar) dy_m/dx``."""
        X = np.asarray(X, dtype=np.float64)
        runs = [(m, p, *forward(m, X, p)) for m, p in self.instances()]
        Y = np.stack([r[2] for r in runs], axis=-2)
        centered = Y - Y.mean(axis=-2, keepdims=True)
        if output_index is not None:
            mask = np.zeros(self.output_dim)
            mask[output_index] = 1.0
            centered = centered * mask
        grad = 0.0
        for k, (m, p, _, trace) in enumerate(runs):
            grad = grad + backward(m, trace, centered[..., k, :], p)
        return (2.0 / self.M) * grad


@dataclass(frozen=True)
class EnsembleOutputs:
    y: np.ndarray
    mean: float
    s2: float


def predict_all(model: EnsembleModel, x, output_index: int = 0) -> EnsembleOutputs:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise DimensionError(f"expected a vector of length {model.input_dim}")
    if not 0 <= output_index < model.output_dim:
        raise DimensionError(f"output_index {output_index} out of range")
    y = model.outputs(x)[:, output_index]
    return EnsembleOutputs(y, float(y.mean()), float(variance_of(y)))


def variance_of(y) -> float:
    """Biased (1/M) variance of a vector of predictions."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] < 2:
        raise ConfigError("need M >= 2 predictions")
    return float(np.mean((y - y.mean()) ** 2))


def coefficients(M: int) -> np.ndarray:
    """Coefficient matrix ``b`` with ``s2 = sum_mm' b_mm' y_m y_m'``."""
    if M < 2:
        raise ConfigError("need M >= 2")
    return np.eye(M) / M - 1.0 / M ** 2


def variance_from_coefficients(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(y @ coefficients(y.shape[0]) @ y)


def multidim_variance(model: EnsembleModel, x) -> float:
    """Sum of per-output-dimension variances at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise DimensionError(f"expected a vector of length {model.input_dim}")
    return float(model.variance(x, output_index=None))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def ensemble_to_dict(model: EnsembleModel, member_refs=None) -> dict:
    """Manifest document.  ``member_refs`` replaces inline networks by file names."""
    if member_refs is None:
        members = [mlp_to_dict(m) for m in model.members]
    else:
        members = [{"ref": str(r)} for r in member_refs]
    doc = {"kind": model.kind, "M": model.M, "members": members, "plans": []}
    if model.plans is not None:
        doc["plans"] = [plan_to_dict(p) for p in model.plans]
    return doc


def ensemble_from_dict(doc: dict, base_dir=None) -> EnsembleModel:
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    members = []
    for m in doc["members"]:
        if "ref" in m:
            members.append(load_mlp(base_dir / m["ref"]))
        else:
            members.append(mlp_from_dict(m))
    if doc["kind"] == MC_DROPOUT:
        return EnsembleModel(members, [plan_from_dict(p) for p in doc["plans"]])
    if doc["kind"] != DEEP_ENSEMBLE:
        raise ConfigError(f"unknown ensemble kind {doc['kind']!r}")
    return EnsembleModel(members)


def load_ensemble(path) -> EnsembleModel:
    path = Path(path)
    return ensemble_from_dict(json.loads(path.read_text()), base_dir=path.parent)
