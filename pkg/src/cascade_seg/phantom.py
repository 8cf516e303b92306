"""Synthetic CT-like phantoms with exact liver and lesion ground truth.

A phantom is a noisy volume holding one smoothly deformed ellipsoid (the
liver) with spherical lesions placed strictly inside it. Every random draw
comes from a PCG64 generator seeded by ``PhantomParams.seed``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParamError, PlacementError
from .volume import HU_WINDOW, Volume, read_volume, write_volume

RNG_ALGORITHM = "PCG64"


@dataclass(frozen=True)
class PhantomParams:
    shape: tuple[int, int, int] = (24, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # liver semi-axis as a fraction of each axis length
    liver_radius_range: tuple[float, float] = (0.30, 0.36)
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (4.0, 6.0)
    intensity_liver: float = 100.0
    intensity_lesion: float = 40.0
    intensity_background: float = -20.0
    noise_sigma: float = 20.0
    deformation: float = 0.08
    distractor: bool = False
    intensity_distractor: float = 80.0
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ParamError(f"bad phantom shape {self.shape}")
        lo, hi = self.liver_radius_range
        if not 0 < lo <= hi < 0.5:
            raise ParamError(f"liver radius fractions must satisfy 0 < lo <= hi < 0.5, got {lo, hi}")
        clo, chi = self.lesion_count_range
        if not 0 <= clo <= chi:
            raise ParamError(f"bad lesion count range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ParamError(f"bad lesion radius range {self.lesion_radius_range}")
        min_liver_radius = lo * min(self.shape) * (1 - self.deformation)
        if rhi >= min_liver_radius:
            raise ParamError(f"lesion radius {rhi} must be smaller than liver radius {min_liver_radius:.2f}")
        means = [self.intensity_liver, self.intensity_lesion, self.intensity_background]
        if len(set(means)) != 3:
            raise ParamError("region intensity means must be pairwise distinct")
        if self.noise_sigma < 0:
            raise ParamError("noise_sigma must be >= 0")
        if not 0 <= self.deformation < 0.5:
            raise ParamError("deformation must lie in [0, 0.5)")
        if not 0 <= self.seed < 2**64:
            raise ParamError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("shape", "spacing", "liver_radius_range", "lesion_count_range", "lesion_radius_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class LabeledCase:
    image: Volume
    liver: Volume
    lesion: Volume
    case_id: str = ""


def _deformed_ellipsoid(grid, center, radii, rng, amplitude, n_terms=3):
    rel = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    rho = np.sqrt(rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2)
    unit = [r / np.maximum(rho, 1e-9) for r in rel]
    bump = np.zeros_like(rho)
    for _ in range(n_terms):
        freq = rng.normal(size=3)
        freq *= rng.uniform(0.8, 1.6) / np.linalg.norm(freq)
        phase = rng.uniform(0, 2 * np.pi)
        bump += np.cos(np.pi * (freq[0] * unit[0] + freq[1] * unit[1] + freq[2] * unit[2]) + phase)
    bump *= amplitude / n_terms
    return rho <= 1.0 + bump


def generate_phantom(params: PhantomParams, case_id: str | None = None) -> LabeledCase:
    params.validate()
    rng = np.random.Generator(np.random.PCG64(params.seed))
    shape = params.shape
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    dims = np.array(shape, dtype=np.float64)

    radii = rng.uniform(*params.liver_radius_range, size=3) * dims
    center = (dims - 1) / 2 + rng.uniform(-0.05, 0.05, size=3) * dims
    liver = _deformed_ellipsoid(grid, center, radii, rng, params.deformation)
    if not liver.any():
        raise PlacementError("liver came out empty")

    distractor = np.zeros(shape, dtype=bool)
    if params.distractor:
        d_radii = radii * rng.uniform(0.35, 0.5, size=3)
        corner = np.array([center[0], d_radii[1] + 1, d_radii[2] + 1])
        distractor = _deformed_ellipsoid(grid, corner, d_radii, rng, params.deformation) & ~liver

    lesion = np.zeros(shape, dtype=bool)
    n_lesions = int(rng.integers(params.lesion_count_range[0], params.lesion_count_range[1] + 1))
    liver_voxels = np.argwhere(liver)
    for _ in range(n_lesions):
        r = rng.uniform(*params.lesion_radius_range)
        for _attempt in range(500):
            c = liver_voxels[rng.integers(len(liver_voxels))] + rng.uniform(-0.5, 0.5, size=3)
            sphere = ((grid[0] - c[0]) ** 2 + (grid[1] - c[1]) ** 2 + (grid[2] - c[2]) ** 2) <= r * r
            if sphere.any() and not (sphere & ~liver).any():
                lesion |= sphere
                break
        else:
            raise PlacementError(f"could not place a lesion of radius {r:.2f} inside the liver")

    image = np.full(shape, params.intensity_background, dtype=np.float64)
    image[distractor] = params.intensity_distractor
    image[liver] = params.intensity_liver
    image[lesion] = params.intensity_lesion
    image += rng.normal(0.0, params.noise_sigma, size=shape) if params.noise_sigma > 0 else 0.0
    image = np.clip(image, *HU_WINDOW)

    cid = case_id if case_id is not None else f"phantom_{params.seed}"
    sp = params.spacing
    return LabeledCase(image=Volume(image, sp), liver=Volume(liver, sp),
                       lesion=Volume(lesion, sp), case_id=cid)


def case_params(base: PhantomParams, n_cases: int) -> list[PhantomParams]:
    """Per-case parameters with seeds spawned from the base seed."""
    seeds = np.random.SeedSequence(base.seed).generate_state(n_cases, dtype=np.uint64)
    return [replace(base, seed=int(s)) for s in seeds]


@dataclass
class DatasetSplit:
    train: list[LabeledCase] = field(default_factory=list)
    val: list[LabeledCase] = field(default_factory=list)
    test: list[LabeledCase] = field(default_factory=list)

    def ids(self) -> dict[str, list[str]]:
        return {k: [c.case_id for c in getattr(self, k)] for k in ("train", "val", "test")}


def split_sizes(n: int, split: tuple[float, float]) -> tuple[int, int, int]:
    f_train, f_val = split
    if not (0 < f_train < 1 and 0 < f_val < 1 and f_train + f_val < 1):
        raise ParamError(f"split fractions must lie in (0, 1) and sum below 1, got {split}")
    n_train = int(round(n * f_train))
    n_val = int(round(n * f_val))
    return n_train, n_val, n - n_train - n_val


def generate_dataset(params_list: list[PhantomParams], split=(0.5, 0.25), seed: int = 0) -> DatasetSplit:
    """Generate one case per params entry and split them with a seeded permutation."""
    n_train, n_val, _ = split_sizes(len(params_list), split)
    cases = [generate_phantom(p, case_id=f"case{i:03d}") for i, p in enumerate(params_list)]
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(cases))
    ordered = [cases[i] for i in order]
    return DatasetSplit(train=ordered[:n_train], val=ordered[n_train:n_train + n_val],
                        test=ordered[n_train + n_val:])


def write_dataset(ds: DatasetSplit, out_dir, meta: dict | None = None) -> None:
    out = Path(out_dir)
    for split in ("train", "val", "test"):
        for case in getattr(ds, split):
            write_volume(case.image, out / f"{case.case_id}_img")
            write_volume(case.liver, out / f"{case.case_id}_liver")
            write_volume(case.lesion, out / f"{case.case_id}_lesion")
    manifest = {"rng": RNG_ALGORITHM, "splits": ds.ids(), **(meta or {})}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1) + "\n")


def read_dataset(data_dir) -> tuple[DatasetSplit, dict]:
    root = Path(data_dir)
    manifest = json.loads((root / "dataset.json").read_text())
    ds = DatasetSplit()
    for split, ids in manifest["splits"].items():
        for cid in ids:
            case = LabeledCase(
                image=read_volume(root / f"{cid}_img"),
                liver=read_volume(root / f"{cid}_liver"),
                lesion=read_volume(root / f"{cid}_lesion"),
                case_id=cid,
            )
            if (case.lesion.data > case.liver.data).any():
                raise FormatError(f"case {cid}: lesion mask leaves the liver")
            getattr(ds, split).append(case)
    return ds, manifest
