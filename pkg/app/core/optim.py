"""Bias-corrected Adam over named parameter sets."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from app.core.errors import DimensionError
from app.core.model import ASTParams
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)

ParamSet = Union[ASTParams, Mapping[str, np.ndarray]]


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> "OptimizerState":
        arrays = _arrays(params)
        return cls(
            beta1=betas[0], beta2=betas[1], eps=eps,
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


def _arrays(params: ParamSet) -> Dict[str, np.ndarray]:
    if isinstance(params, ASTParams):
        return params.arrays()
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}


def adam_step(
    params: ParamSet,
    grads: Mapping[str, Union[np.ndarray, Tensor]],
    state: OptimizerState,
    lr: float,
) -> Tuple[ParamSet, OptimizerState]:
    """
    One Adam update. Returns a new parameter set of the same kind and advances
    `state` in place (also returned). Parameters without a gradient entry are
    treated as having zero gradient.
    """
    arrays = _arrays(params)
    if not state.m:
        state.m = {k: np.zeros_like(a) for k, a in arrays.items()}
        state.v = {k: np.zeros_like(a) for k, a in arrays.items()}
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    updated: Dict[str, np.ndarray] = {}
    for name, p in arrays.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m or state.m[name].shape != p.shape:
            raise DimensionError(f"adam: optimizer state for {name} does not mirror parameter shape {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = (p - step).astype(p.dtype)

    if isinstance(params, ASTParams):
        return ASTParams.from_arrays(updated, requires_grad=True), state
    return updated, state
