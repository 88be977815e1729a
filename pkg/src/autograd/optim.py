"""SGD with momentum over ParamSets."""
import logging
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.autograd.params import ParamSet

logger = logging.getLogger(__name__)


def sgd_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: Optional[Mapping[str, np.ndarray]] = None,
) -> Tuple[ParamSet, Dict[str, np.ndarray]]:
    """
    One update: v <- momentum * v + g ; w <- w - lr * v.

    Returns the new parameters and the new velocity; inputs are not modified.
    """
    params.check_compatible(grads, "sgd_step")
    new_velocity: Dict[str, np.ndarray] = {}
    updated = ParamSet()
    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        v_prev = None if velocity is None else velocity.get(name)
        v = g.copy() if v_prev is None else momentum * v_prev + g
        new_velocity[name] = v
        updated[name] = tensor.data - lr * v
    return updated, new_velocity

