"""Gate NU and the two personalization networks built on it (EPNet, PPNet)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Node

DEFAULT_GAMMA = 2.0

# How the general input enters a gate: omitted, concatenated behind a
# stop-gradient (the default), or concatenated with gradients flowing.
GATE_INPUT_MODES = ("stop_gradient", "backprop", "none")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GateNUParams:
    """Two-layer gate ``gamma * sigmoid(relu(x W + b) W2 + b2)``."""

    W: np.ndarray
    b: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.W.shape[1] == 0:
            raise ValueError("gate hidden width must be positive")

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
             hidden: int | None = None, gamma: float = DEFAULT_GAMMA) -> "GateNUParams":
        # zero second layer: every gate starts at gamma/2 (= 1 for gamma=2)
        hidden = out_dim if hidden is None else hidden
        return cls(W=xavier_uniform(rng, in_dim, hidden), b=np.zeros(hidden),
                   W2=np.zeros((hidden, out_dim)), b2=np.zeros(out_dim), gamma=gamma)

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "W2": self.W2, "b2": self.b2}

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())


def gate_nu_forward(p: GateNUParams, x: Node, leaves: dict[str, Node] | None = None) -> Node:
    """Gate values in (0, gamma) for each row of ``x``.

    ``leaves`` maps "W", "b", "W2", "b2" to trainable nodes; without it the
    parameters enter the graph as constants.
    """
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"gate expects input width {p.in_dim}, got {x.shape[-1]}")
    lv = leaves or {k: nx.constant(v) for k, v in p.arrays().items()}
    hidden = nx.relu(nx.linear(x, lv["W"], lv["b"]))
    return nx.scale(nx.sigmoid(nx.linear(hidden, lv["W2"], lv["b2"])), p.gamma)


def _gate_input(prior: Node, general: Node, mode: str) -> Node:
    if mode == "stop_gradient":
        return nx.concat([prior, nx.stop_gradient(general)])
    if mode == "backprop":
        return nx.concat([prior, general])
    if mode == "none":
        return prior
    raise ValueError(f"unknown gate input mode {mode!r}")


@dataclass
class EpNetParams:
    gate: GateNUParams
    # per-field (vector-wise) gating: one gate value per field broadcast over its dims
    field_widths: list[int] | None = None

    def expansion(self) -> np.ndarray | None:
        if self.field_widths is None:
            return None
        total = sum(self.field_widths)
        m = np.zeros((len(self.field_widths), total))
        col = 0
        for i, w in enumerate(self.field_widths):
            m[i, col:col + w] = 1.0
            col += w
        return m


def epnet_forward(p: EpNetParams, domain_emb: Node, E: Node, leaves: dict[str, Node] | None = None,
                  input_mode: str = "stop_gradient") -> tuple[Node, Node]:
    """Returns ``(delta_domain, O_ep)`` with ``O_ep = delta_domain * E``."""
    delta = gate_nu_forward(p.gate, _gate_input(domain_emb, E, input_mode), leaves)
    expand = p.expansion()
    if expand is not None:
        delta = nx.matmul(delta, nx.constant(expand))
    if delta.shape != E.shape:
        raise DimensionError(f"EPNet gate width {delta.shape[-1]} != embedding width {E.shape[-1]}")
    return delta, nx.mul(delta, E)


@dataclass
class PpNetParams:
    gates: list[GateNUParams] = field(default_factory=list)


def ppnet_layer_forward(gate: GateNUParams, O_prior: Node, O_ep: Node, H: Sequence[Node],
                        leaves: dict[str, Node] | None = None,
                        input_mode: str = "stop_gradient") -> list[Node]:
    """Scale each task's hidden units by its slice of one shared gate output."""
    T = len(H)
    if T == 0:
        raise DimensionError("ppnet layer needs at least one task tower")
    width = H[0].shape[-1]
    if any(h.shape != H[0].shape for h in H):
        raise DimensionError("all task towers must share the layer width")
    if gate.out_dim != width * T:
        raise DimensionError(f"gate width {gate.out_dim} != {T} towers x {width} units")
    delta = gate_nu_forward(gate, _gate_input(O_prior, O_ep, input_mode), leaves)
    return [nx.mul(d, h) for d, h in zip(nx.split(delta, [width] * T), H)]
