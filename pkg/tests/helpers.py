import numpy as np


def linear_loss(seed):
    """loss(out) = sum(out * R) for a fixed random R drawn on first use."""
    state = {}

    def fn(out):
        if "r" not in state:
            state["r"] = np.random.default_rng(seed).normal(size=out.shape)
        r = state["r"]
        return float((np.asarray(out, np.float64) * r).sum()), r.astype(out.dtype)

    return fn


class IntensityNet:
    """Stand-in segmentation net: probability 0.9 where the centre channel lies in [lo, hi]."""

    def __init__(self, lo, hi, divisor=8):
        self.lo, self.hi = lo, hi
        self.context_slices = 3
        self.config = type("Cfg", (), {"divisor": divisor})()

    def predict_probs(self, x):
        centre = x[:, 1:2]
        p = np.where((centre >= self.lo) & (centre <= self.hi), 0.9, 0.1).astype(np.float32)
        p = np.repeat(p, 3, axis=1)
        return p, [p]
