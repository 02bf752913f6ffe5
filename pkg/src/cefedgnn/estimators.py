"""Moving-average estimators for node embeddings and gradients.

Per (node, layer) the embedding state keeps a pre-activation estimate
Ht and its activation H = phi(Ht), refreshed only when the node is
sampled:

    Ht <- (1 - gamma) Ht + gamma * m,   H <- phi(Ht)

with m the freshly aggregated message.  Cold entries (never touched)
start at zero and are overwritten on first touch regardless of gamma, so
initialization bias does not linger.  Untouched entries are never
modified.

The gradient estimator applies the same mixing across whole tensors:
G <- (1 - beta) G + beta * g_hat.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .graphs import ClientView, PartitionedGraph
    from .models import Gradients, ModelParams


class EstimatorError(ValueError):
    """Bad mixing rates or mismatched tensor shapes."""


def _check_rate(name: str, value: float) -> None:
    if not (0.0 < value <= 1.0):
        raise EstimatorError(f"{name} must lie in (0, 1], got {value}")


@dataclass
class EmbeddingState:
    """Per-client moving-average embeddings for all local nodes and layers."""

    view: "ClientView"
    dims: list[int]
    gamma: float
    activation: str
    h_tilde: list[np.ndarray] = field(default_factory=list)
    h_act: list[np.ndarray] = field(default_factory=list)
    cold: list[np.ndarray] = field(default_factory=list)
    touch_round: list[np.ndarray] = field(default_factory=list)
    touch_step: list[np.ndarray] = field(default_factory=list)
    instant_top: Optional[np.ndarray] = None

    @property
    def depth(self) -> int:
        return len(self.dims)


def create_embedding_state(view, dims: Sequence[int], gamma: float, activation: str,
                           *, track_instant: bool = False) -> EmbeddingState:
    _check_rate("gamma", gamma)
    n = view.num_local
    state = EmbeddingState(view=view, dims=list(dims), gamma=gamma, activation=activation)
    for d in dims:
        state.h_tilde.append(np.zeros((n, d)))
        state.h_act.append(np.zeros((n, d)))
        state.cold.append(np.ones(n, dtype=bool))
        state.touch_round.append(np.full(n, -1, dtype=np.int64))
        state.touch_step.append(np.full(n, -1, dtype=np.int64))
    if track_instant:
        state.instant_top = np.zeros((n, dims[-1]))
    return state


def update_embedding(
    state: EmbeddingState,
    rows,
    layer: int,
    messages: np.ndarray,
    gamma: Optional[float] = None,
    *,
    round_idx: int = 0,
    step_idx: int = 0,
) -> EmbeddingState:
    """Mix fresh messages into layer `layer` (1-based) for the given rows.

    Cold rows are overwritten (effective gamma 1) and marked warm.  Rows
    not listed keep their values bit-identically.
    """
    from .models import activate

    g = state.gamma if gamma is None else gamma
    _check_rate("gamma", g)
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    messages = np.atleast_2d(np.asarray(messages, dtype=np.float64))
    if messages.shape != (len(rows), state.dims[layer - 1]):
        raise EstimatorError(
            f"layer {layer}: message block {messages.shape} does not match "
            f"({len(rows)}, {state.dims[layer - 1]})")
    li = layer - 1
    geff = np.where(state.cold[li][rows], 1.0, g)[:, None]
    state.h_tilde[li][rows] = (1.0 - geff) * state.h_tilde[li][rows] + geff * messages
    state.h_act[li][rows] = activate(state.activation, state.h_tilde[li][rows])
    state.cold[li][rows] = False
    state.touch_round[li][rows] = round_idx
    state.touch_step[li][rows] = step_idx
    if state.instant_top is not None and layer == state.depth:
        state.instant_top[rows] = activate(state.activation, messages)
    return state


def set_warm(state: EmbeddingState, row: int, layer: int, h_tilde: np.ndarray) -> None:
    """Install a prior estimate and mark it warm (used by tests and probes)."""
    from .models import activate

    li = layer - 1
    state.h_tilde[li][row] = h_tilde
    state.h_act[li][row] = activate(state.activation, state.h_tilde[li][row])
    state.cold[li][row] = False


@dataclass
class GradientMA:
    """Moving-average gradient with the same tensor layout as the model."""

    values: "Gradients"
    beta: float
    last_step: int = -1


def create_gradient_ma(params: "ModelParams", beta: float) -> GradientMA:
    from .models import zeros_like_params

    _check_rate("beta", beta)
    return GradientMA(values=zeros_like_params(params), beta=beta)


def update_gradient(ma: GradientMA, grad_hat: "Gradients", beta: Optional[float] = None,
                    *, step_idx: int = 0) -> GradientMA:
    b = ma.beta if beta is None else beta
    _check_rate("beta", b)
    for (name, cur), (_, new) in zip(ma.values.tensors(), grad_hat.tensors()):
        if cur.shape != new.shape:
            raise EstimatorError(f"{name}: shape {new.shape} does not match {cur.shape}")
        cur *= 1.0 - b
        cur += b * new
    ma.last_step = step_idx
    return ma


def tracking_error_probe(state: EmbeddingState, params: "ModelParams") -> list[float]:
    """Per-layer mean of ||H(v) - h(v)||^2 against exact view embeddings."""
    from .models import compute_stack

    stack = compute_stack(params, state.view)
    out = []
    for li in range(state.depth):
        diff = state.h_act[li] - stack.acts[li]
        out.append(float(np.mean(np.sum(diff * diff, axis=1))))
    return out
