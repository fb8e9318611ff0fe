"""Finite-difference validation harness for analytic gradients.

An op is presented as a callable `f(*args) -> (y, vjp)` where `vjp(gy)`
returns the gradients of `sum(y * gy)` w.r.t. each arg. grad_check probes
sampled coordinates of each arg with central differences and reports the
worst relative disagreement with the analytic gradient.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream

# central-difference step per precision; relative error floors at 1e-8
STEP_F32 = 1e-3
STEP_F64 = 1e-5


class GradCheckError(RuntimeError):
    """Non-finite analytic gradient, reported with the offending coordinate."""


def grad_check(f, args, rng: RngStream, wrt=None, n_coords: int = 25, step: float | None = None) -> float:
    """Max relative error |analytic - numeric| / (|numeric| + 1e-8).

    The analytic side runs the op at the point's native precision; the
    central-difference objective evaluates on float64 copies so the
    reference is not drowned in single-precision output quantisation.
    The step follows the point's declared precision (1e-3 for float32
    points, 1e-5 for float64) unless given explicitly.

    `wrt` selects which arg indices to differentiate (default: all).
    Coordinates are sampled from `rng`; args with <= n_coords elements are
    checked exhaustively.
    """
    args = [np.asarray(a) for a in args]
    y, vjp = f(*args)
    direction = rng.normal(np.shape(y), dtype=np.float64)
    grads = vjp(direction.astype(y.dtype))
    if wrt is None:
        wrt = range(len(args))

    args64 = [a.astype(np.float64) for a in args]

    def objective():
        out, _ = f(*args64)
        return float(np.sum(out * direction))

    worst = 0.0
    for ai in wrt:
        g = np.asarray(grads[ai])
        bad = ~np.isfinite(g)
        if bad.any():
            coord = np.argwhere(bad)[0]
            raise GradCheckError(
                f"non-finite analytic gradient for arg {ai} at coordinate {tuple(coord)}"
            )
        h = step
        if h is None:
            h = STEP_F64 if args[ai].dtype == np.float64 else STEP_F32
        size = args[ai].size
        if size <= n_coords:
            coords = np.arange(size)
        else:
            coords = np.unique(rng.integers(0, size, (n_coords,)))
        flat = args64[ai].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = objective()
            flat[c] = orig - h
            down = objective()
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = float(g.reshape(-1)[c])
            rel = abs(analytic - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, rel)
    return worst
