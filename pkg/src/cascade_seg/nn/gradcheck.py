"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-2):
    """|a - n| / max(|a|, |n|, floor).

    ``floor`` is ``floor_frac`` times the RMS of the numeric gradient, so entries
    whose true gradient is ~0 are judged against the gradient's overall scale
    instead of their own rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.sqrt(np.mean(n * n)) if n.size else 0.0
    floor = max(floor_frac * scale, 1e-30)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(net, x, loss_fn, eps=None, tol=1e-3, n_samples=40, seed=0,
               check_input=True, floor_frac=1e-2, reference=None) -> GradCheckReport:
    """Compare ``net``'s backward pass against central differences.

    ``loss_fn(output) -> (loss, d_output)`` closes over the target and loss spec.
    Up to ``n_samples`` entries per parameter tensor (and of the input) are probed.

    ``reference`` is an optional float64 twin of ``net`` (same architecture,
    parameter names and order). Its parameters are overwritten with ``net``'s and
    the differences are taken on it, so the float32 analytic gradient is judged
    against a numeric derivative free of float32 rounding noise.
    """
    if eps is None:
        # small steps are safe in float64 and rarely cross a ReLU or max-pool kink
        eps = 1e-6 if reference is not None else 1e-3
    rng = np.random.default_rng(seed)
    params = net.params()
    for p in params.values():
        p.grad[...] = 0
    out = net.forward(x)
    _, dout = loss_fn(out)
    dx = net.backward(dout)

    probe_net, probe_x = net, x
    if reference is not None:
        ref_params = reference.params()
        if list(ref_params) != list(params):
            raise ValueError("reference network has different parameters")
        for name, p in params.items():
            ref_params[name].value[...] = p.value
        probe_net = reference
        probe_x = np.array(x, dtype=np.float64)
    probe_params = probe_net.params()

    def loss_at():
        return loss_fn(probe_net.forward(probe_x))[0]

    per_param = {}
    worst_val, worst_name = 0.0, ""
    total = 0
    probes = [(name, probe_params[name].value, p.grad) for name, p in params.items()]
    if check_input:
        probes.append(("<input>", probe_x, dx))
    for name, arr, analytic in probes:
        flat = arr.reshape(-1)
        k = min(n_samples, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        num = np.empty(k)
        for t, i in enumerate(idx):
            orig = flat[i].copy()
            flat[i] = orig + eps
            lp = loss_at()
            flat[i] = orig - eps
            lm = loss_at()
            flat[i] = orig
            # divide by the perturbation actually applied after rounding to arr.dtype
            step = float(np.asarray(orig + eps, arr.dtype)) - float(np.asarray(orig - eps, arr.dtype))
            num[t] = (lp - lm) / step
        ana = np.asarray(analytic).reshape(-1)[idx]
        rel = relative_errors(ana, num, floor_frac)
        err = float(rel.max()) if k else 0.0
        per_param[name] = err
        total += k
        if err > worst_val or not worst_name:
            worst_val, worst_name = err, name
    return GradCheckReport(max_rel_error=worst_val, tol=tol, n_checked=total,
                           worst=worst_name, per_param=per_param)
