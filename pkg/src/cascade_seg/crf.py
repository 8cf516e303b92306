"""Fully connected binary CRF over a probability volume.

Energy (Potts compatibility, every voxel pair counted once):

    E(l) = sum_i u_i(l_i) + sum_{i<j} [l_i != l_j] k(i, j)
    k(i, j) = w_app * exp(-|p_i - p_j|^2 / (2 t_sa^2) - (I_i - I_j)^2 / (2 t_int^2))
            + w_smooth * exp(-|p_i - p_j|^2 / (2 t_ss^2))

with positions p in millimeters and unaries u = -log of the clamped soft
prediction. Inference is parallel mean-field on the exact dense kernel; no
lattice approximation. Volumes with more voxels than ``max_voxels`` are
processed as overlapping z-blocks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ParamError, ShapeError, SizeError
from .volume import Volume

PROB_EPS = 1e-7
# kernels above this many voxels are stored in float32 to bound memory
FLOAT64_KERNEL_LIMIT = 4096


@dataclass(frozen=True)
class CrfParams:
    w_app: float = 0.03
    w_smooth: float = 0.03
    theta_spatial_app: float = 3.0
    theta_intensity: float = 0.1
    theta_spatial_smooth: float = 1.5
    iterations: int = 5
    max_voxels: int = 16384
    block_slices: int = 8
    block_overlap: int = 2

    def __post_init__(self):
        for name in ("theta_spatial_app", "theta_intensity", "theta_spatial_smooth"):
            if not getattr(self, name) > 0:
                raise ParamError(f"{name} must be > 0")
        for name in ("w_app", "w_smooth"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ParamError(f"{name} must be finite and >= 0")
        if self.iterations < 1:
            raise ParamError("iterations must be >= 1")
        if not 0 <= self.block_overlap < self.block_slices:
            raise ParamError("block_overlap must lie in [0, block_slices)")

    @classmethod
    def from_dict(cls, d: dict) -> "CrfParams":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class CrfModel:
    unary: np.ndarray      # (N, 2): [background, lesion]
    coords: np.ndarray     # (N, 3) integer voxel indices
    intensity: np.ndarray  # (N,)
    spacing: tuple[float, float, float]
    params: CrfParams
    shape: tuple[int, int, int]
    flat_index: np.ndarray  # (N,) positions in the C-ordered volume

    @property
    def n(self) -> int:
        return len(self.unary)

    def positions_mm(self) -> np.ndarray:
        return self.coords * np.asarray(self.spacing)


@dataclass
class MarginalField:
    q: np.ndarray  # (N, 2)
    normalization_errors: list[float] = field(default_factory=list)

    def labeling(self) -> np.ndarray:
        # ties go to background
        return (self.q[:, 1] > self.q[:, 0]).astype(np.int8)


def _as_array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


def build_crf(prob, image, params: CrfParams | None = None, support=None,
              spacing=None) -> CrfModel:
    """Unaries from ``prob`` (lesion probability) and features from ``image``.

    ``support`` optionally restricts the field to a subset of voxels.
    """
    params = params or CrfParams()
    p = _as_array(prob).astype(np.float64)
    img = _as_array(image).astype(np.float64)
    if p.shape != img.shape or p.ndim != 3:
        raise ShapeError(f"probability {p.shape} and image {img.shape} must be matching 3D grids")
    if spacing is None:
        spacing = prob.spacing if isinstance(prob, Volume) else (1.0, 1.0, 1.0)
    sup = np.ones(p.shape, dtype=bool) if support is None else np.asarray(_as_array(support)) > 0.5
    if sup.shape != p.shape:
        raise ShapeError(f"support {sup.shape} does not match volume {p.shape}")
    flat = np.flatnonzero(sup)
    coords = np.stack(np.unravel_index(flat, p.shape), axis=1).astype(np.int64)
    pc = np.clip(p.reshape(-1)[flat], PROB_EPS, 1 - PROB_EPS)
    unary = np.stack([-np.log1p(-pc), -np.log(pc)], axis=1)
    return CrfModel(unary=unary, coords=coords, intensity=img.reshape(-1)[flat],
                    spacing=tuple(float(s) for s in spacing), params=params,
                    shape=p.shape, flat_index=flat)


def _axis_tables(shape, spacing, theta):
    return tuple(np.exp(-(np.arange(n) * s) ** 2 / (2 * theta ** 2)) for n, s in zip(shape, spacing))


def pairwise_matrix(model: CrfModel) -> np.ndarray:
    """Dense k(i, j) with a zero diagonal. float32 storage above FLOAT64_KERNEL_LIMIT voxels."""
    n = model.n
    if n > model.params.max_voxels:
        raise SizeError(f"{n} voxels exceed the dense CRF cap of {model.params.max_voxels}")
    prm = model.params
    dtype = np.float64 if n <= FLOAT64_KERNEL_LIMIT else np.float32
    out = np.empty((n, n), dtype=dtype)
    return kernels.crf_kernel_matrix(
        model.coords, model.intensity,
        _axis_tables(model.shape, model.spacing, prm.theta_spatial_app),
        _axis_tables(model.shape, model.spacing, prm.theta_spatial_smooth),
        1.0 / (2 * prm.theta_intensity ** 2), prm.w_app, prm.w_smooth, out,
    )


def _softmax_neg(energies: np.ndarray) -> np.ndarray:
    e = -energies
    e = e - e.max(axis=1, keepdims=True)
    q = np.exp(e)
    return q / q.sum(axis=1, keepdims=True)


def mean_field_infer(model: CrfModel, kernel: np.ndarray | None = None) -> MarginalField:
    """Parallel mean-field: Q_i(l) ~ exp(-u_i(l) - sum_j k(i,j) Q_j(not l))."""
    q = _softmax_neg(model.unary)
    errors = [float(np.abs(q.sum(axis=1) - 1).max())] if model.n else [0.0]
    if model.params.w_app == 0 and model.params.w_smooth == 0 or model.n <= 1:
        return MarginalField(q, errors * (model.params.iterations + 1))
    k = pairwise_matrix(model) if kernel is None else kernel
    for _ in range(model.params.iterations):
        m = kernels.potts_messages(k, q)  # m[:, l] = sum_j k_ij Q_j(l)
        q = _softmax_neg(model.unary + m[:, ::-1])
        errors.append(float(np.abs(q.sum(axis=1) - 1).max()))
    return MarginalField(q, errors)


def energy(model: CrfModel, labeling) -> float:
    """Direct O(N^2) evaluation of the Potts energy, computed from raw positions."""
    lab = np.asarray(labeling)
    if lab.ndim == 3:
        if lab.shape != tuple(model.shape):
            raise ShapeError(f"labeling {lab.shape} does not match volume {model.shape}")
        lab = lab.reshape(-1)[model.flat_index]
    if lab.shape != (model.n,):
        raise ShapeError(f"labeling has {lab.size} entries, expected {model.n}")
    lab = (lab > 0.5).astype(int)
    e_unary = float(model.unary[np.arange(model.n), lab].sum())
    prm = model.params
    pos = model.positions_mm()
    total = 0.0
    for i in range(model.n - 1):
        diff = lab[i + 1:] != lab[i]
        if not diff.any():
            continue
        d2 = ((pos[i + 1:] - pos[i]) ** 2).sum(axis=1)[diff]
        di2 = (model.intensity[i + 1:][diff] - model.intensity[i]) ** 2
        k = (prm.w_app * np.exp(-d2 / (2 * prm.theta_spatial_app ** 2)
                                - di2 / (2 * prm.theta_intensity ** 2))
             + prm.w_smooth * np.exp(-d2 / (2 * prm.theta_spatial_smooth ** 2)))
        total += float(k.sum())
    return e_unary + total


def exhaustive_map(model: CrfModel, max_voxels: int = 16) -> np.ndarray:
    """Minimum-energy labeling by enumerating all 2^N labelings (tiny models only)."""
    if model.n > max_voxels:
        raise SizeError(f"exhaustive MAP limited to {max_voxels} voxels, got {model.n}")
    best, best_e = None, np.inf
    for bits in itertools.product((0, 1), repeat=model.n):
        e = energy(model, np.array(bits))
        if e < best_e:
            best, best_e = np.array(bits, dtype=np.int8), e
    return best


def _z_blocks(nz: int, block: int, overlap: int):
    if nz <= block:
        return [(0, nz)]
    step = block - overlap
    starts = list(range(0, nz - block, step)) + [nz - block]
    return [(s, s + block) for s in sorted(set(starts))]


def _fitting_blocks(sup: np.ndarray, params: CrfParams):
    """Largest z-blocks (up to ``block_slices``) whose support fits under the voxel cap."""
    per_slice = sup.reshape(sup.shape[0], -1).sum(axis=1)
    for block in range(params.block_slices, 0, -1):
        blocks = _z_blocks(sup.shape[0], block, min(params.block_overlap, block - 1))
        if all(per_slice[z0:z1].sum() <= params.max_voxels for z0, z1 in blocks):
            return blocks
    raise SizeError(f"a single slice holds {int(per_slice.max())} support voxels, "
                    f"above the dense CRF cap of {params.max_voxels}")


def refine(prob, image, params: CrfParams | None = None, support=None, spacing=None):
    """Mean-field lesion marginals Q(lesion) with the input's shape.

    Voxels outside ``support`` keep their input probability. When the support is
    larger than ``params.max_voxels`` the volume is split into overlapping
    z-blocks, shrunk as needed to fit the cap, and the overlaps are averaged.
    """
    params = params or CrfParams()
    p = _as_array(prob).astype(np.float64)
    img = _as_array(image)
    if spacing is None:
        spacing = prob.spacing if isinstance(prob, Volume) else (1.0, 1.0, 1.0)
    sup = np.ones(p.shape, dtype=bool) if support is None else np.asarray(_as_array(support)) > 0.5
    if p.shape != np.shape(img):
        raise ShapeError(f"probability {p.shape} and image {np.shape(img)} differ")

    if sup.sum() <= params.max_voxels:
        blocks = [(0, p.shape[0])]
    else:
        blocks = _fitting_blocks(sup, params)
    acc = np.zeros(p.shape)
    hits = np.zeros(p.shape)
    for z0, z1 in blocks:
        model = build_crf(p[z0:z1], img[z0:z1], params, sup[z0:z1], spacing)
        if model.n == 0:
            continue
        q = mean_field_infer(model).q[:, 1]
        a = np.zeros(model.shape)
        a.reshape(-1)[model.flat_index] = q
        acc[z0:z1] += a
        hits[z0:z1] += sup[z0:z1]
    out = np.where(hits > 0, acc / np.maximum(hits, 1), np.clip(p, 0, 1))
    out = out.astype(np.float32)
    return prob.with_data(out) if isinstance(prob, Volume) else out
