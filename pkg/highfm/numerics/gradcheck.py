"""
Finite-difference gradient checker
Compares analytic gradients against central differences in 64-bit mode
"""

import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from highfm.errors import GradCheckError
from highfm.numerics.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class CoordinateResult(BaseModel):
    param: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


class GradCheckReport(BaseModel):
    """Outcome of a gradient check; `worst` names the coordinate with the largest error."""

    passed: bool
    max_rel_error: float
    tol: float
    checked: int
    worst: Optional[CoordinateResult] = None
    failures: List[CoordinateResult] = []


def _as_named(params: Union[Mapping[str, Tensor], Sequence[Tensor]]) -> Dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"param{i}": p for i, p in enumerate(params)}


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    h: float = 1e-3,
    tol: float = 1e-4,
    max_coords_per_param: Optional[int] = 8,
    scale_floor: float = 1e-2,
    seed: int = 0,
) -> GradCheckReport:
    """
    Check d f / d params at sampled coordinates.

    Args:
        f: closure recomputing the scalar loss from the current parameter values
        params: leaf tensors (64-bit) to perturb
        h: central-difference step, in [1e-5, 1e-2]
        tol: maximum accepted relative error
        max_coords_per_param: coordinates sampled per tensor (None checks all)
        scale_floor: lower bound of the relative-error denominator
        seed: coordinate sampling seed

    Returns:
        GradCheckReport; passed iff max relative error <= tol
    """
    named = _as_named(params)
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"h must lie in [1e-5, 1e-2], got {h}")
    for name, p in named.items():
        if p.dtype != np.float64:
            raise GradCheckError(f"grad_check needs 64-bit parameters; {name} is {p.dtype}")

    for p in named.values():
        p.zero_grad()
    backward(f())
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named.items()}

    rng = np.random.default_rng(seed)
    results: List[CoordinateResult] = []
    for name, p in named.items():
        size = p.data.size
        if max_coords_per_param is None or size <= max_coords_per_param:
            flat_ids = np.arange(size)
        else:
            flat_ids = np.sort(rng.choice(size, size=max_coords_per_param, replace=False))

        for flat in flat_ids:
            index = np.unravel_index(int(flat), p.shape)
            original = float(p.data[index])
            with no_grad():
                p.data[index] = original + h
                f_plus = f().item()
                p.data[index] = original - h
                f_minus = f().item()
            p.data[index] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(f"non-finite loss when perturbing {name}{tuple(int(i) for i in index)}")

            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[name][index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), scale_floor)
            results.append(
                CoordinateResult(
                    param=name,
                    index=tuple(int(i) for i in index),
                    analytic=a,
                    numeric=numeric,
                    rel_error=rel,
                )
            )

    worst = max(results, key=lambda r: r.rel_error) if results else None
    max_rel = worst.rel_error if worst else 0.0
    failures = [r for r in results if r.rel_error > tol]
    if failures:
        logger.warning(f"grad_check failed at {len(failures)} coordinates; worst {worst.param}{worst.index}")
    return GradCheckReport(
        passed=max_rel <= tol,
        max_rel_error=max_rel,
        tol=tol,
        checked=len(results),
        worst=worst,
        failures=failures,
    )
