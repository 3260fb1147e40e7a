"""GRU and GRU-D cell updates, and the GRU-D derivative used as an ODE right-hand side."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .missingness import DecayParams, decay_rate
from .odesolver import OdeFunc
from .tensor import DimensionError, Tensor

GATE_NAMES = ("W_r", "U_r", "V_r", "b_r", "W_z", "U_z", "V_z", "b_z", "W", "U", "V", "b")


@dataclass
class CellParams:
    """Gate weights of a GRU-family cell.

    Input-to-hidden ``W*`` are [H, D_in], hidden-to-hidden ``U*`` are [H, H],
    mask-to-hidden ``V*`` are [H, D] (None for a mask-blind GRU), biases [H].
    The decay heads are only present on GRU-D cells: the input head is
    diagonal over the D variables, the hidden head maps D intervals to H rates.
    """

    W_r: Tensor
    U_r: Tensor
    V_r: Tensor | None
    b_r: Tensor
    W_z: Tensor
    U_z: Tensor
    V_z: Tensor | None
    b_z: Tensor
    W: Tensor
    U: Tensor
    V: Tensor | None
    b: Tensor
    input_decay: DecayParams | None = None
    hidden_decay: DecayParams | None = None

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
             mask_dim: int | None = None, decay_dim: int | None = None,
             decay_init: float = 0.0) -> "CellParams":
        """Uniform(+-1/sqrt(H)) gate weights and zero biases.

        Decay biases start at zero and decay weights at Uniform(0, decay_init),
        so gamma is 1 at a fresh observation. With ``decay_init=0`` every
        pre-activation sits on the relu kink, where the gradient is zero.
        """
        bound = 1.0 / np.sqrt(hidden_dim)

        def w(rows, cols):
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        gates = {}
        for suffix in ("_r", "_z", ""):
            gates["W" + suffix] = w(hidden_dim, input_dim)
            gates["U" + suffix] = w(hidden_dim, hidden_dim)
            gates["V" + suffix] = w(hidden_dim, mask_dim) if mask_dim else None
            gates["b" + suffix] = zeros(hidden_dim)
        if decay_dim:
            gates["input_decay"] = DecayParams.zeros(decay_dim)
            gates["hidden_decay"] = DecayParams.zeros(decay_dim, hidden_dim)
            if decay_init > 0:
                for head in (gates["input_decay"], gates["hidden_decay"]):
                    head.weight.data = rng.uniform(0.0, decay_init, size=head.weight.shape)
        return cls(**gates)

    @property
    def hidden_dim(self) -> int:
        return self.b.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out.append((f.name, value))
            elif isinstance(value, DecayParams):
                out += [(f"{f.name}.weight", value.weight), (f"{f.name}.bias", value.bias)]
        return out

    def gate_parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_parameters() if "decay" not in name]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


@dataclass
class CellState:
    """Recurrent state of a GRU-D cell for a batch: hidden [N, H], last observation and interval [N, D]."""

    h: Tensor
    x_last: np.ndarray
    delta: np.ndarray


def _gate(x, h, m, W, U, V, b):
    pre = T.linear(x, W, b) + T.linear(h, U)
    if V is not None and m is not None:
        pre = pre + T.linear(m, V)
    return pre


def gates(x, h, params: CellParams, m=None):
    """Reset gate, update gate and candidate state."""
    if not isinstance(h, Tensor):
        h = Tensor(h)
    if h.shape[-1] != params.hidden_dim:
        raise DimensionError(f"hidden state {h.shape} does not match hidden size {params.hidden_dim}")
    r = T.sigmoid(_gate(x, h, m, params.W_r, params.U_r, params.V_r, params.b_r))
    z = T.sigmoid(_gate(x, h, m, params.W_z, params.U_z, params.V_z, params.b_z))
    cand = T.tanh(_gate(x, r * h, m, params.W, params.U, params.V, params.b))
    return r, z, cand


def gru_step(x, h_prev, params: CellParams, m=None) -> Tensor:
    """h = (1 - z) * h_prev + z * h_cand. Mask terms are added when ``m`` is given."""
    if not isinstance(h_prev, Tensor):
        h_prev = Tensor(h_prev)
    _, z, cand = gates(x, h_prev, params, m)
    return h_prev + z * (cand - h_prev)


def impute_decayed(x, m, x_last, means, gamma: Tensor, literal: bool = False) -> Tensor:
    """Decay missing inputs from the last observation toward the training mean.

    Standard form: m*x + (1-m)*(gamma*x_last + (1-gamma)*mean).
    ``literal=True`` evaluates m*x + (gamma*x_last + (1-gamma))*mean instead.
    """
    obs = np.where(m > 0, x, 0.0)
    means = np.broadcast_to(means, np.shape(m))
    if literal:
        return gamma * ((x_last - 1.0) * means) + (m * obs + means)
    return gamma * ((1.0 - m) * (x_last - means)) + (m * obs + (1.0 - m) * means)


def grud_step(x_t, m_t, delta_t, state: CellState, params: CellParams, means,
              literal: bool = False) -> tuple[Tensor, CellState]:
    """One GRU-D update for a batch of observations [N, D]."""
    x_t = np.asarray(x_t, dtype=np.float64)
    m_t = np.asarray(m_t, dtype=np.float64)
    if x_t.shape != m_t.shape or x_t.shape != np.shape(delta_t):
        raise DimensionError(f"x {x_t.shape}, m {m_t.shape}, delta {np.shape(delta_t)} must agree")
    gamma_x = decay_rate(delta_t, params.input_decay)
    gamma_h = decay_rate(delta_t, params.hidden_decay)
    x_hat = impute_decayed(x_t, m_t, state.x_last, means, gamma_x, literal)
    h_hat = gamma_h * state.h
    h = gru_step(x_hat, h_hat, params, m_t)
    x_last = np.where(m_t > 0, x_t, state.x_last)
    return h, CellState(h, x_last, np.asarray(delta_t))


class GRUDDynamics(OdeFunc):
    """d/dt of the concatenated state y = [x; m; h].

    x and m are held constant between observations; the hidden state relaxes
    toward the candidate at the update-gate rate: dh/dt = (h_cand - h) * z.
    """

    def __init__(self, params: CellParams, n_vars: int):
        self.cell = params
        self.n_vars = n_vars
        self.params = params.gate_parameters()

    def split(self, y: Tensor):
        d, hdim = self.n_vars, self.cell.hidden_dim
        if y.shape[-1] != 2 * d + hdim:
            raise DimensionError(f"state width {y.shape[-1]} != 2*{d} + {hdim}")
        return T.split(y, (d, d, hdim), axis=-1)

    def __call__(self, y: Tensor, t=None) -> Tensor:
        squeeze = y.ndim == 1
        if squeeze:
            y = T.reshape(y, (1, -1))
        x, m, h = self.split(y)
        _, z, cand = gates(x, h, self.cell, m)
        dh = (cand - h) * z
        frozen = np.zeros((y.shape[0], 2 * self.n_vars))
        dy = T.concat([Tensor(frozen), dh], axis=-1)
        return T.reshape(dy, (-1,)) if squeeze else dy


def grud_derivative(y, t, params: CellParams, n_vars: int) -> Tensor:
    """Functional form of :class:`GRUDDynamics`."""
    return GRUDDynamics(params, n_vars)(y if isinstance(y, Tensor) else Tensor(y), t)
