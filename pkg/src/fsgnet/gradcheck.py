"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import ComplexPair, Tape, Tensor, backward, mul, tsum

_REPROBE_ABOVE = 1e-6


def _flatten_outputs(out) -> list:
    if isinstance(out, Tensor):
        return [out]
    if isinstance(out, ComplexPair):
        return [out.real, out.imag]
    if isinstance(out, (list, tuple)):
        res = []
        for o in out:
            if o is not None:
                res.extend(_flatten_outputs(o))
        return res
    raise TypeError(f"cannot check gradients of {type(out).__name__}")


def finite_diff_check(f: Callable[[], Union[Tensor, Sequence]], params: Sequence[Tensor],
                      step: float = 1e-4, max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over ``params``.

    ``f`` takes no arguments and returns a tensor (or a tuple of them). The
    outputs are contracted with fixed random weights so every element
    contributes to the scalar being differentiated. Run it under
    ``precision(np.float64)`` with BN layers in eval mode; ``max_coords``
    samples that many coordinates per parameter instead of all of them.
    """
    rng = np.random.default_rng(seed)
    outs = _flatten_outputs(f())
    weights = [rng.standard_normal(o.shape) for o in outs]

    def objective() -> float:
        return float(sum(np.sum(w * o.data.astype(np.float64)) for w, o in zip(weights, _flatten_outputs(f()))))

    for p in params:
        p.grad = None
    with Tape() as tape:
        outs = _flatten_outputs(f())
        total = None
        for w, o in zip(weights, outs):
            term = _weighted_sum(o, w)
            total = term if total is None else total + term
    backward(tape, total)
    analytic = [np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            err = np.inf
            # a difference quotient straddling a ReLU kink is re-probed with
            # smaller steps; a wrong backward rule stays wrong at every step
            for h in (step, step / 10, step / 100):
                orig = flat[i]
                flat[i] = orig + h
                up = objective()
                flat[i] = orig - h
                down = objective()
                flat[i] = orig
                num = (up - down) / (2 * h)
                err = min(err, abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num)))
                if err < _REPROBE_ABOVE:
                    break
            worst = max(worst, err)
    return worst


def _weighted_sum(o: Tensor, w: np.ndarray) -> Tensor:
    return tsum(mul(o, Tensor(w)))
