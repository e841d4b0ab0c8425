import numpy as np
import pytest

from covxplain.ensemble import EnsembleModel
from covxplain.nn import Mlp, activation_pattern, forward

ACCEPTANCE_LINES = []


def rel_err(a, b):
    """Max-abs deviation relative to the max-abs reference value."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def random_net(rng, d=5, hidden=(16, 8), out=1, bias=True):
    return Mlp.random([d, *hidden, out], rng, bias=bias)


def random_ensemble(rng, M=5, d=5, hidden=(16, 8), out=1, bias=True):
    return EnsembleModel([random_net(rng, d, hidden, out, bias) for _ in range(M)])


def stable_radius(mlp, x, plan=None):
    """Distance from x to the nearest ReLU kink of the current activation region.

    Pre-activations are affine in x within the region; the bound uses the
    exact input gradient of every hidden unit.
    """
    _, trace = forward(mlp, x, plan)
    radius = np.inf
    # unit Jacobians w.r.t. the input, built layer by layer
    J = np.eye(mlp.input_dim)
    for i, layer in enumerate(mlp.layers[:-1]):
        Jz = layer.weights @ J
        z = trace.pre[i]
        norms = np.linalg.norm(Jz, axis=1)
        live = norms > 0
        if np.any(live):
            radius = min(radius, float(np.min(np.abs(z[live]) / norms[live])))
        mask = (z > 0).astype(float)
        if plan is not None:
            mask = mask * plan.masks[i]
        J = mask[:, None] * Jz
    return radius


def ensemble_pattern(model, X):
    return np.concatenate(
        [activation_pattern(m, X, p) for m, p in model.instances()], axis=-1
    )


def fd_hessian(f, x, model, h0=1e-3, h_min=1e-8):
    """Central mixed-difference Hessian of f at x with an activation-stable step.

    Halves the step until every probe point x +- h e_i +- h e_j keeps the
    activation pattern of x in every instance; returns None if none does.
    """
    d = x.shape[0]
    base = ensemble_pattern(model, x)
    h = h0
    eye = np.eye(d)
    while h > h_min:
        probes = []
        for i in range(d):
            for j in range(d):
                for si in (1, -1):
                    for sj in (1, -1):
                        probes.append(x + h * (si * eye[i] + sj * eye[j]))
        probes = np.array(probes)
        if np.all(ensemble_pattern(model, probes) == base):
            v = np.asarray(f(probes)).reshape(d, d, 2, 2)
            return (v[:, :, 0, 0] - v[:, :, 0, 1] - v[:, :, 1, 0] + v[:, :, 1, 1]) / (4 * h * h)
        h /= 2
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
