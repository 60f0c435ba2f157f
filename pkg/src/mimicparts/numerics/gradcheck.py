"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    rtol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rtol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5,
               rtol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` at ``point`` to central differences.

    The relative error of each component is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    _scalar(out)
    analytic = tape.backward(out, wrt=[x])[x]

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = _scalar(fn(Tensor(xp.reshape(x0.shape))))
        fm = _scalar(fn(Tensor(xm.reshape(x0.shape))))
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    rel = _rel_err(analytic, numeric, floor)
    return GradCheckReport(float(rel.max(initial=0.0)), float(np.abs(analytic - numeric).max(initial=0.0)),
                           int(flat.size), rtol)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      rtol: float = 1e-4, floor: float = 1e-6, max_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Finite-difference check over the entries of existing parameter tensors.

    ``loss_fn`` closes over the parameters; their ``data`` is perturbed in
    place and restored. ``max_per_param`` subsamples entries of large tensors.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    params = list(params)
    with Tape() as tape:
        out = loss_fn()
    _scalar(out)
    grads = tape.backward(out, wrt=params)
    rng = rng or np.random.default_rng(0)

    worst_rel, worst_abs, n = 0.0, 0.0, 0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        g = grads[p].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(loss_fn())
            flat[i] = orig - h
            fm = _scalar(loss_fn())
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            rel = float(_rel_err(np.array(g[i]), np.array(num), floor))
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, abs(g[i] - num))
            n += 1
    return GradCheckReport(worst_rel, float(worst_abs), n, rtol)
