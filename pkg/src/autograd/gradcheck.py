"""
Central finite-difference verification of analytic gradients.

``f`` maps a ParamSet to a scalar Tensor. Analytic gradients come from one
backward pass; each sampled coordinate is then perturbed by +/- eps and ``f``
is re-evaluated under ``no_grad``. Perturbations are independent, so they are
optionally evaluated on a thread pool.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.autograd.params import ParamSet
from src.autograd.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

Coordinate = Tuple[str, int]
REL_EPS = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[Coordinate]
    checked: int
    skipped: int = 0
    errors: Dict[Coordinate, float] = field(default_factory=dict)


def _evaluate(f: Callable[[ParamSet], Tensor], params: ParamSet, coord: Coordinate, delta: float) -> float:
    name, flat = coord
    shifted = params.copy()
    values = shifted[name].data.reshape(-1)
    values[flat] += delta
    with no_grad():
        return f(shifted).item()


def finite_diff_report(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    max_coords: Optional[int] = 64,
    seed: int = 0,
    skip_below: float = 1e-7,
    workers: int = 1,
    analytic_transform: Optional[Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]]] = None,
) -> GradCheckReport:
    """
    Compare analytic and numeric gradients over sampled coordinates.

    The error at a coordinate is |a - n| / (|a| + 1e-8). Coordinates where
    both |a| and |n| are below ``skip_below`` carry only rounding noise; they
    are left out of the maximum and counted in ``skipped``.
    ``analytic_transform`` lets a caller corrupt the analytic gradient to
    confirm the check is sensitive.
    """
    loss = f(params)
    analytic = backward(loss, params)
    if analytic_transform is not None:
        analytic = analytic_transform(analytic)

    coords: List[Coordinate] = [(name, i) for name, t in params.items() for i in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picked]

    def numeric(coord: Coordinate) -> float:
        return (_evaluate(f, params, coord, eps) - _evaluate(f, params, coord, -eps)) / (2 * eps)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            numerics = list(pool.map(numeric, coords))
    else:
        numerics = [numeric(c) for c in coords]

    errors: Dict[Coordinate, float] = {}
    skipped = 0
    for coord, n in zip(coords, numerics):
        a = float(analytic[coord[0]].reshape(-1)[coord[1]])
        if abs(a) < skip_below and abs(n) < skip_below:
            skipped += 1
            continue
        errors[coord] = abs(a - n) / (abs(a) + REL_EPS)
    worst = max(errors, key=errors.get) if errors else None
    max_err = errors[worst] if worst is not None else 0.0
    logger.debug(
        f"Gradient check over {len(coords)} coordinates ({skipped} near-zero skipped): "
        f"max relative error {max_err:.3e} at {worst}"
    )
    return GradCheckReport(max_rel_error=max_err, worst=worst, checked=len(errors), skipped=skipped, errors=errors)


def finite_diff_check(f: Callable[[ParamSet], Tensor], params: ParamSet, eps: float = 1e-5, **kwargs) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return finite_diff_report(f, params, eps=eps, **kwargs).max_rel_error
