import numpy as np
import pytest

from odegrud.tensor import Tensor, no_grad


def central_diff(fn, arrays, eps=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            with no_grad():
                up = float(np.asarray(fn()).sum())
            arr[idx] = old - eps
            with no_grad():
                down = float(np.asarray(fn()).sum())
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def value(t):
    return t.data if isinstance(t, Tensor) else t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def masked_gru_reference(x, mask, cell, head_w, head_b):
    """Plain loop: GRU with mask terms over every step, then the linear head."""
    from odegrud.cells import gru_step

    h = np.zeros((x.shape[0], cell.hidden_dim))
    for k in range(x.shape[1]):
        h = gru_step(x[:, k], h, cell, mask[:, k]).data
    return h @ head_w.T[:, 0] + head_b[0]


def reduction_models(n_vars=3, hidden=4, seed=0):
    """All four sequence models sharing one set of gate and head weights.

    Decay and ODE-RNN dynamics parameters are zero; the ODE models use one
    euler step of 1 per unit gap and a unit readout interval.
    """
    from odegrud.cells import CellParams
    from odegrud.models import ModelSpec, build_model

    rng = np.random.default_rng(seed)
    ref = CellParams.init(n_vars, hidden, rng, mask_dim=n_vars)
    for p in ref.parameters():
        p.data = p.data + rng.normal(scale=0.5, size=p.shape)
    head_w, head_b = rng.normal(size=(1, hidden)), rng.normal(size=1)
    models = {}
    for kind in ("grud", "ode_rnn", "ode_grud", "ext_ode_grud"):
        spec = ModelSpec(kind=kind, hidden_dim=hidden, method="euler", step_size=1.0, readout_time=1.0,
                         decay_init=0.0)
        model = build_model(spec, n_vars, seed=seed)
        for name, p in model.named_parameters():
            short = name.split(".", 1)[1] if "." in name else name
            if name.startswith("cell.") and "decay" not in name:
                p.data = getattr(ref, short).data.copy()
            elif name == "head.weight":
                p.data = head_w.copy()
            elif name == "head.bias":
                p.data = head_b.copy()
            else:
                p.data = np.zeros_like(p.data)
        models[kind] = model
    return models, ref, head_w, head_b


def full_unit_batch(n=5, steps=4, n_vars=3, seed=0):
    from odegrud.missingness import TimeSeriesBatch

    rng = np.random.default_rng(seed)
    series = [(np.arange(steps, dtype=float) + rng.integers(0, 5), rng.normal(size=(steps, n_vars)),
               np.ones((steps, n_vars))) for _ in range(n)]
    return TimeSeriesBatch.from_series(series, labels=np.arange(n) % 2)
