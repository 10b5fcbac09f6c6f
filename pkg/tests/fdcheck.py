"""Central finite differences that never touch autograd.

Piecewise-linear operations (``abs``, ``relu``, ``leaky_relu``, max
pooling) are evaluated on the branch that is active at the expansion point:
the first evaluation records each call's sign mask / argmax, the perturbed
evaluations replay them. Without this a 1e-3 step routinely straddles a
kink somewhere inside a network and the difference quotient stops
approximating the derivative at all.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

STEP = 1e-3
RTOL = 1e-3


class BranchLock(TorchFunctionMode):
    def __init__(self):
        super().__init__()
        self.masks = []
        self.replaying = False
        self.cursor = 0

    def _next(self):
        m = self.masks[self.cursor]
        self.cursor += 1
        return m

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        name = getattr(func, "__name__", "")
        if name == "abs":
            x = args[0]
            if self.replaying:
                return x * self._next()
            self.masks.append(torch.sign(x).detach())
            return func(*args, **kwargs)
        if name in ("relu", "leaky_relu"):
            x = args[0]
            slope = 0.0
            if name == "leaky_relu":
                slope = args[1] if len(args) > 1 else kwargs.get("negative_slope", 0.01)
            if self.replaying:
                return torch.where(self._next(), x, slope * x)
            self.masks.append((x > 0).detach())
            return func(*args, **kwargs)
        if name == "max_pool2d":
            x = args[0]
            if self.replaying:
                idx = self._next()
                return x.flatten(2).gather(2, idx.flatten(2)).view_as(idx)
            out, idx = F.max_pool2d_with_indices(*args, **kwargs)
            self.masks.append(idx)
            return out
        return func(*args, **kwargs)

    def replay(self):
        self.replaying = True
        self.cursor = 0
        return self


def numeric_grad(fn, tensors, which, coords, step=STEP):
    """d fn / d tensors[which].flat[c] for c in coords, by central differences."""
    base = [t.detach().clone() for t in tensors]
    lock = BranchLock()
    with torch.no_grad():
        with lock:
            fn(*base)
        out = []
        for c in coords:
            vals = []
            for sign in (1.0, -1.0):
                args = [t.clone() for t in base]
                args[which].view(-1)[c] += sign * step
                with lock.replay():
                    vals.append(float(fn(*args)))
                if lock.cursor != len(lock.masks):
                    raise RuntimeError("perturbed evaluation took a different code path")
            out.append((vals[0] - vals[1]) / (2 * step))
    return np.array(out)


def analytic_grad(fn, tensors, which):
    args = [t.detach().clone().requires_grad_(True) for t in tensors]
    fn(*args).backward()
    g = args[which].grad
    return np.zeros(args[which].numel()) if g is None else g.detach().reshape(-1).numpy()


def relative_error(analytic, numeric):
    """max |a - n| relative to the largest numeric derivative magnitude."""
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def directional_numeric(fn, tensors, which, direction, step=STEP):
    """(f(x + h v) - f(x - h v)) / 2h with branches locked at x."""
    base = [t.detach().clone() for t in tensors]
    lock = BranchLock()
    with torch.no_grad():
        with lock:
            fn(*base)
        vals = []
        for sign in (1.0, -1.0):
            args = [t.clone() for t in base]
            args[which] += sign * step * direction
            with lock.replay():
                vals.append(float(fn(*args)))
    return (vals[0] - vals[1]) / (2 * step)


def check_direction(fn, tensors, which, direction, rtol=RTOL, step=STEP):
    a = float(analytic_grad(fn, tensors, which) @ direction.reshape(-1).numpy())
    num = directional_numeric(fn, tensors, which, direction, step)
    err = abs(a - num) / max(abs(num), 1e-12)
    return err <= rtol, err


def check(fn, tensors, which, coords=None, rtol=RTOL, step=STEP):
    n = tensors[which].numel()
    coords = range(n) if coords is None else coords
    coords = list(coords)
    a = analytic_grad(fn, tensors, which)[coords]
    num = numeric_grad(fn, tensors, which, coords, step)
    err = relative_error(a, num)
    return err <= rtol, err
