"""Multi-scale segmentation network with supervised side outputs and learned fusion.

The base network is a stack of conv/ReLU stages separated by 2x2 max-pooling.
Each stage feeds a side-output head producing logits at that stage's
resolution; the heads are upsampled to full resolution and combined with
learned scalar weights into the fused logit map.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateMask, EmptyForeground, ShapeError
from .nn import (
    BilinearUpsample,
    Conv2d,
    LossSpec,
    MaxPool2,
    Param,
    ReLU,
    Sequential,
    sgd_step,
    sigmoid,
    weighted_masked_bce_logits,
)
from .volume import Volume, stack_context_slices

log = logging.getLogger(__name__)


@dataclass
class SegNetConfig:
    stage_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    convs_per_stage: int = 2
    side_output_channels: int = 4
    in_channels: int = 3
    out_channels: int = 3

    def validate(self):
        if len(self.stage_channels) < 2 or min(self.stage_channels) < 1:
            raise ConfigError(f"need >= 2 stages with positive widths, got {self.stage_channels}")
        if self.convs_per_stage < 1 or self.side_output_channels < 1:
            raise ConfigError("convs_per_stage and side_output_channels must be >= 1")
        if self.in_channels != 3 or self.out_channels != 3:
            raise ConfigError("segmentation nets map 3 context slices to 3 output slices")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.stage_channels) - 1)


@dataclass
class SegNetOutput:
    fused: np.ndarray       # (N, 3, H, W) logits
    sides: list[np.ndarray]  # per-stage logits at stage resolution


class SegNet:
    def __init__(self, config: SegNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.context_slices = 3
        rng = np.random.Generator(np.random.PCG64(seed))
        self.stages, self.heads, self.ups = [], [], []
        prev = config.in_channels
        for k, ch in enumerate(config.stage_channels):
            layers = {}
            if k > 0:
                layers["pool"] = MaxPool2()
            for c in range(config.convs_per_stage):
                layers[f"conv{c}"] = Conv2d(prev if c == 0 else ch, ch, 3, rng=rng, dtype=dtype)
                layers[f"relu{c}"] = ReLU()
            self.stages.append(Sequential(**layers))
            self.heads.append(Sequential(
                conv=Conv2d(ch, config.side_output_channels, 3, rng=rng, dtype=dtype),
                relu=ReLU(),
                score=Conv2d(config.side_output_channels, config.out_channels, 1, rng=rng,
                             dtype=dtype),
            ))
            self.ups.append(BilinearUpsample(2 ** k) if k > 0 else None)
            prev = ch
        n_side = len(config.stage_channels)
        self.alpha = Param(np.full(n_side, 1.0 / n_side, dtype=dtype))
        self.beta = Param(np.zeros(1, dtype=dtype))

    @property
    def n_sides(self) -> int:
        return len(self.stages)

    def params(self) -> dict[str, Param]:
        out = {}
        for k, (stage, head) in enumerate(zip(self.stages, self.heads)):
            out.update({f"stage{k}.{n}": p for n, p in stage.params().items()})
            out.update({f"side{k}.{n}": p for n, p in head.params().items()})
        out["fuse.alpha"] = self.alpha
        out["fuse.beta"] = self.beta
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.grad[...] = 0

    def forward(self, x: np.ndarray) -> SegNetOutput:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (N, 3, H, W) input, got {x.shape}")
        d = self.config.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {d}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        sides, ups = [], []
        h = x
        for stage, head, up in zip(self.stages, self.heads, self.ups):
            h = stage.forward(h)
            s = head.forward(h)
            sides.append(s)
            ups.append(up.forward(s) if up is not None else s)
        self._ups = ups
        fused = sum(a * u for a, u in zip(self.alpha.value, ups)) + self.beta.value[0]
        return SegNetOutput(fused=fused.astype(self.dtype, copy=False), sides=sides)

    def backward(self, grads) -> np.ndarray:
        d_fused, d_sides = grads
        g_f = d_fused.astype(np.float64)
        for k, u in enumerate(self._ups):
            self.alpha.grad[k] += self.dtype.type(np.sum(g_f * u))
        self.beta.grad[0] += self.dtype.type(g_f.sum())
        g_next = None
        for k in reversed(range(self.n_sides)):
            d_up = (self.alpha.value[k] * d_fused).astype(self.dtype)
            d_side = self.ups[k].backward(d_up) if self.ups[k] is not None else d_up
            if d_sides is not None and d_sides[k] is not None:
                d_side = d_side + d_sides[k]
            g = self.heads[k].backward(d_side)
            if g_next is not None:
                g = g + g_next
            g_next = self.stages[k].backward(g)
        return g_next

    def predict_probs(self, x: np.ndarray):
        out = self.forward(x)
        return sigmoid(out.fused), [sigmoid(s) for s in out.sides]


def build_segnet(config: SegNetConfig | None = None, seed: int = 0, dtype=np.float32) -> SegNet:
    return SegNet(config or SegNetConfig(), seed=seed, dtype=dtype)


def forward(net: SegNet, slab) -> tuple[np.ndarray, list[np.ndarray]]:
    """Fused probabilities (3, H, W) and per-side probabilities for one context slab."""
    channels = slab.channels if hasattr(slab, "channels") else np.asarray(slab)
    fused, sides = net.predict_probs(channels[None])
    return fused[0], [s[0] for s in sides]


# --- class balancing ---------------------------------------------------------

@dataclass(frozen=True)
class ClassWeights:
    w: float

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise EmptyForeground(f"class weight must lie in (0, 1), got {self.w}")


def _target_masks(case, target: str):
    if target == "liver":
        return np.asarray(case.liver.data) > 0.5
    if target == "lesion":
        return np.asarray(case.lesion.data) > 0.5
    raise ConfigError(f"unknown segmentation target {target!r}")


def compute_class_weights(cases, target: str = "lesion", restrict_to_liver: bool = False) -> ClassWeights:
    """Dataset-level foreground weight from slice-filtered voxel proportions.

    fg_term = foreground voxels / all voxels, over slices containing foreground;
    bg_term likewise over slices containing background; w = fg / (fg + bg).
    With ``restrict_to_liver`` only voxels inside the ground-truth liver count.
    """
    fg_num = fg_den = bg_num = bg_den = 0
    for case in cases:
        fg = _target_masks(case, target)
        support = (np.asarray(case.liver.data) > 0.5) if restrict_to_liver else np.ones_like(fg)
        fg = fg & support
        bg = support & ~fg
        fg_per = fg.sum(axis=(1, 2))
        bg_per = bg.sum(axis=(1, 2))
        tot_per = support.sum(axis=(1, 2))
        has_fg = fg_per > 0
        has_bg = bg_per > 0
        fg_num += int(fg_per[has_fg].sum())
        fg_den += int(tot_per[has_fg].sum())
        bg_num += int(bg_per[has_bg].sum())
        bg_den += int(tot_per[has_bg].sum())
    if fg_num == 0:
        raise EmptyForeground(f"no slice contains {target} foreground")
    fg_term = fg_num / fg_den
    bg_term = bg_num / bg_den if bg_den else 0.0
    return ClassWeights(fg_term / (fg_term + bg_term))


def per_volume_weight(target_mask: np.ndarray, floor: float = 1e-3) -> float:
    """Foreground proportion of a whole volume, kept inside (floor, 1 - floor)."""
    frac = float(np.mean(target_mask > 0.5))
    return min(max(frac, floor), 1 - floor)


# --- training ----------------------------------------------------------------

def nearest_indices(n_full: int, n_small: int) -> np.ndarray:
    """Full-resolution sample nearest to each align-corners low-resolution position."""
    if n_small == 1:
        return np.zeros(1, dtype=int)
    pos = np.arange(n_small) * (n_full - 1) / (n_small - 1)
    return np.floor(pos + 0.5).astype(int)


def downsample_nearest(a: np.ndarray, h: int, w: int) -> np.ndarray:
    iy = nearest_indices(a.shape[-2], h)
    ix = nearest_indices(a.shape[-1], w)
    return a[..., iy[:, None], ix[None, :]]


def deep_supervision_loss(out: SegNetOutput, target: np.ndarray, w, mask=None):
    """Fused-output loss plus one loss per side output.

    Returns ``(total, (d_fused, d_sides), components)`` where components lists the
    fused term first. Side terms whose downsampled mask is empty contribute zero.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None, None, None]
    loss_f, d_fused = weighted_masked_bce_logits(out.fused, target, LossSpec(w, mask))
    components = [loss_f]
    d_sides = []
    for s in out.sides:
        h, wd = s.shape[2:]
        t = downsample_nearest(target, h, wd)
        m = downsample_nearest(mask, h, wd) if mask is not None else None
        if m is not None and not m.any():
            components.append(0.0)
            d_sides.append(np.zeros_like(s))
            continue
        loss_s, d_s = weighted_masked_bce_logits(s, t, LossSpec(w, m))
        components.append(loss_s)
        d_sides.append(d_s)
    return float(sum(components)), (d_fused, d_sides), components


def train_step(net: SegNet, slab, target, weights, liver_mask=None, lr=0.01, momentum=0.9) -> float:
    """One momentum-SGD step on a batch (or a single slab); returns the pre-step loss."""
    x = slab.channels if hasattr(slab, "channels") else np.asarray(slab)
    if x.ndim == 3:
        x = x[None]
        target = np.asarray(target)[None]
        liver_mask = None if liver_mask is None else np.asarray(liver_mask)[None]
    if liver_mask is not None and not np.asarray(liver_mask).any():
        raise DegenerateMask("liver mask is empty on every context slice")
    w = weights.w if isinstance(weights, ClassWeights) else weights
    net.zero_grad()
    out = net.forward(x)
    loss, grads, _ = deep_supervision_loss(out, np.asarray(target, dtype=net.dtype), w,
                                           None if liver_mask is None else np.asarray(liver_mask) > 0.5)
    net.backward(grads)
    sgd_step(net.params(), lr, momentum)
    return loss


@dataclass
class SegTrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 8
    seed: int = 0
    batch_size: int = 8
    stage_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    restrict_to_liver: bool = False
    context_slices: int = 3
    balance: str = "dataset"  # or "per_volume"
    max_steps: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SegTrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        cfg = cls(**known)
        if cfg.context_slices not in (1, 3):
            raise ConfigError("context_slices must be 1 or 3")
        if cfg.balance not in ("dataset", "per_volume"):
            raise ConfigError(f"unknown balance mode {cfg.balance!r}")
        return cfg


@dataclass
class TrainingSample:
    x: np.ndarray          # (3, H, W)
    y: np.ndarray          # (3, H, W)
    mask: np.ndarray | None
    w: float


def train_segnet(net: SegNet, samples: list[TrainingSample], cfg: SegTrainConfig) -> list[float]:
    """Epoch loop over shape-homogeneous minibatches in a seeded order."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.x.shape, []).append(i)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        batches = []
        for key in sorted(groups):
            idx = np.array(groups[key])
            idx = idx[rng.permutation(len(idx))]
            batches += [idx[i:i + cfg.batch_size] for i in range(0, len(idx), cfg.batch_size)]
        order = rng.permutation(len(batches))
        epoch_loss = []
        for b in order:
            batch = [samples[i] for i in batches[b]]
            x = np.stack([s.x for s in batch])
            y = np.stack([s.y for s in batch])
            mask = None
            if batch[0].mask is not None:
                mask = np.stack([s.mask for s in batch])
            w = np.array([s.w for s in batch])
            epoch_loss.append(train_step(net, x, y, w, mask, cfg.lr, cfg.momentum))
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        history.append(float(np.mean(epoch_loss)))
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return history


def predict_volume(net: SegNet, vol, liver_mask=None, context_slices: int | None = None,
                   batch_size: int = 8):
    """Per-slice prediction keeping only the central output channel.

    Accepts a Volume or a (nz, ny, nx) array and returns the same kind.
    Probabilities outside ``liver_mask`` are set to 0.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float32)
    context_slices = context_slices or net.context_slices
    nz = data.shape[0]
    out = np.empty(data.shape, dtype=np.float32)
    for s in range(0, nz, batch_size):
        idx = range(s, min(s + batch_size, nz))
        x = np.stack([stack_context_slices(data, i, context_slices).channels for i in idx])
        fused, _ = net.predict_probs(x)
        out[s:s + len(idx)] = fused[:, 1]
    if liver_mask is not None:
        m = liver_mask.data if isinstance(liver_mask, Volume) else np.asarray(liver_mask)
        out = np.where(m > 0.5, out, 0.0).astype(np.float32)
    return vol.with_data(out) if isinstance(vol, Volume) else out
