"""Deterministic synthetic lung phantoms with and without clot-like lesions.

A phantom is built from analytic shapes on an air background (-1000 HU):
a soft-tissue body ellipsoid (+40), two lung ellipsoids (each at one
integer HU drawn from the lung range -700..-600), and a small branching
tree of tubular vessels per lung at a per-case blood density in the
non-coagulated-blood range.

Positive cases embed ``n_lesions`` spherical clots, each centered on a
vessel segment at coagulated-blood HU (above +50, up to +75).  A clot
blocks flow, with the two consequences an occlusion has on imaging: the
vessel distal to the clot never opacifies (those branches are simply not
painted), and the tissue the dead subtree fed densifies into an
infarct-like wedge between lung and soft-tissue density.  Geometry draws
are identical between a positive and a negative phantom of the same
seed; the clots and their downstream consequences are the only class
differences.

All HU values are integers, so int16 NIfTI storage round-trips
bit-exactly.  All randomness flows from the spec seed through the
counter-based generator in :mod:`ctpe.rng`; the same spec always yields
the same bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .manifest import ManifestRecord, write_manifest
from .nifti import write_nifti
from .rng import Stream, derive
from .volume import Unit, Volume

AIR_HU = -1000
BODY_HU = 40
LUNG_HU_RANGE = (-699, -601)
# vessels stay in the non-coagulated-blood range but are capped below both
# the soft-tissue body density (+40) and the coagulated-blood floor (+50),
# so vessel voxels and clot voxels each occupy their own intensity band
VESSEL_HU_RANGE = (13, 35)
# infarcted tissue downstream of a clot: denser than aerated lung, well
# below every blood band
INFARCT_HU_RANGE = (-250, -150)

_VESSEL_RADIUS = 1.35
_VESSEL_RADIUS_DECAY = 0.82
_VESSEL_DEPTH = 3
_INFARCT_RADIUS_FACTOR = 4.0  # wedge half-width, in vessel radii
_LESION_RADIUS_MIN = 1.75
_LESION_RADIUS_MAX = 4.5
_LESION_FRACTION_CAP = 0.0065  # of lung voxels, before discretization

# substream labels under the spec seed
_SUB_GEOMETRY = 1
_SUB_LUNG_HU = 2
_SUB_VESSELS = 3
_SUB_LESIONS = 4
_SUB_NOISE = 5


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    seed: int
    label: Literal["positive", "negative"] = "negative"
    n_lesions: int = 0
    lesion_hu_range: tuple[int, int] = (50, 75)
    noise_hu_sigma: float = 0.0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise ValueError(f"phantom dims must be >= 32 per axis, got {self.dims}")
        if self.label not in ("positive", "negative"):
            raise ValueError(f"label must be 'positive' or 'negative', got {self.label!r}")
        if self.label == "negative" and self.n_lesions != 0:
            raise ValueError("negative phantoms cannot carry lesions")
        if self.label == "positive" and self.n_lesions < 1:
            raise ValueError("positive phantoms need n_lesions >= 1")
        lo, hi = self.lesion_hu_range
        if not lo < hi:
            raise ValueError(f"lesion HU range must satisfy lo < hi, got {self.lesion_hu_range}")


@dataclass
class _Segment:
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    depth: int
    children: list["_Segment"] = field(default_factory=list)

    def at(self, t: float) -> np.ndarray:
        return self.p0 + t * (self.p1 - self.p0)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


def _ellipsoid_mask(grids, center, semi) -> np.ndarray:
    xx, yy, zz = grids
    return (
        ((xx - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((zz - center[2]) / semi[2]) ** 2
    ) <= 1.0


def _jitter(stream: Stream, base: float, rel: float) -> float:
    return base * (1.0 + stream.uniform(lo=-rel, hi=rel))


def _grow_tree(stream: Stream, start: np.ndarray, direction: np.ndarray, length: float) -> _Segment:
    """Binary branching tree of capsule segments, radius shrinking per level."""

    def grow(p0: np.ndarray, direc: np.ndarray, seg_len: float, radius: float, depth: int) -> _Segment:
        seg = _Segment(p0=p0, p1=p0 + direc * seg_len, radius=radius, depth=depth)
        if depth + 1 < _VESSEL_DEPTH:
            for _ in range(2):
                deflect = np.array(
                    [stream.uniform(lo=-0.55, hi=0.55), stream.uniform(lo=-0.55, hi=0.55), stream.uniform(lo=-0.55, hi=0.55)]
                )
                child = direc + deflect
                child /= max(np.linalg.norm(child), 1e-9)
                seg.children.append(grow(seg.p1, child, seg_len * 0.75, radius * _VESSEL_RADIUS_DECAY, depth + 1))
        return seg

    direction = direction / max(np.linalg.norm(direction), 1e-9)
    return grow(start, direction, length, _VESSEL_RADIUS, 0)


def _paint_capsule(data: np.ndarray, lung_mask: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float, value: int) -> None:
    """Set voxels within ``radius`` of the p0-p1 segment (and inside the lung)."""
    dims = data.shape
    pad = radius + 1.0
    lo = np.maximum(np.floor(np.minimum(p0, p1) - pad).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(p0, p1) + pad).astype(int) + 1, dims)
    if (lo >= hi).any():
        return
    sub = tuple(slice(l, h) for l, h in zip(lo, hi))
    xx, yy, zz = np.meshgrid(*(np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)), indexing="ij")
    axis = p1 - p0
    denom = float(axis @ axis)
    px, py, pz = xx - p0[0], yy - p0[1], zz - p0[2]
    t = np.clip((px * axis[0] + py * axis[1] + pz * axis[2]) / max(denom, 1e-12), 0.0, 1.0)
    d2 = (px - t * axis[0]) ** 2 + (py - t * axis[1]) ** 2 + (pz - t * axis[2]) ** 2
    mask = (d2 <= radius**2) & lung_mask[sub]
    data[sub][mask] = value


def _sphere_fits(lung_mask: np.ndarray, center: np.ndarray, radius: float) -> bool:
    dims = lung_mask.shape
    lo = np.floor(center - radius).astype(int)
    hi = np.ceil(center + radius).astype(int) + 1
    if (lo < 0).any() or (hi > np.asarray(dims)).any():
        return False
    sub = tuple(slice(l, h) for l, h in zip(lo, hi))
    xx, yy, zz = np.meshgrid(*(np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)), indexing="ij")
    inside = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 + (zz - center[2]) ** 2 <= radius**2
    return bool(lung_mask[sub][inside].all())


def _paint_sphere(data: np.ndarray, center: np.ndarray, radius: float, value: int) -> int:
    dims = data.shape
    lo = np.maximum(np.floor(center - radius).astype(int), 0)
    hi = np.minimum(np.ceil(center + radius).astype(int) + 1, dims)
    sub = tuple(slice(l, h) for l, h in zip(lo, hi))
    xx, yy, zz = np.meshgrid(*(np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)), indexing="ij")
    inside = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 + (zz - center[2]) ** 2 <= radius**2
    data[sub][inside] = value
    return int(inside.sum())


def _lesion_radius(lesions: Stream, lung_voxels: int, n: int, dims) -> float:
    # radius from a target fraction of lung voxels, capped so even generous
    # discretization keeps the total under 1%
    cap_radius = ((_LESION_FRACTION_CAP * lung_voxels / n) * 3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
    if cap_radius < _LESION_RADIUS_MIN:
        raise ValueError(
            f"cannot fit {n} lesions of radius >= {_LESION_RADIUS_MIN} within 1% of "
            f"{lung_voxels} lung voxels; reduce n_lesions or enlarge dims {dims}"
        )
    fraction = lesions.uniform(lo=0.0040, hi=0.0060)
    radius = (3.0 * fraction * lung_voxels / n / (4.0 * math.pi)) ** (1.0 / 3.0)
    return min(max(radius, _LESION_RADIUS_MIN), _LESION_RADIUS_MAX, cap_radius)


def _select_lesion_sites(
    spec: PhantomSpec,
    trees: list[_Segment],
    lung_mask: np.ndarray,
    lung_voxels: int,
) -> tuple[list[tuple[_Segment, float]], float]:
    """Choose (segment, cut parameter) per lesion, preferring first-level branches.

    At most one lesion per segment; spheres must fit inside the lung with a
    margin and stay pairwise separated so each clot is its own connected
    component.
    """
    lesions = Stream(derive(spec.seed, _SUB_LESIONS))
    radius = _lesion_radius(lesions, lung_voxels, spec.n_lesions, spec.dims)

    candidates: list[tuple[_Segment, float]] = []
    for depth_wanted in (1, 2, 0):
        for tree in trees:
            for seg in tree.walk():
                if seg.depth == depth_wanted:
                    candidates.extend((seg, t) for t in (0.45, 0.7))

    order = lesions.permutation(len(candidates))
    placed: list[tuple[_Segment, float]] = []
    centers: list[np.ndarray] = []
    for idx in order:
        if len(placed) == spec.n_lesions:
            break
        seg, t = candidates[int(idx)]
        if any(seg is s for s, _ in placed):
            continue
        center = seg.at(t)
        if not _sphere_fits(lung_mask, center, radius + 1.0):
            continue
        if any(np.linalg.norm(center - prev) < 2.0 * radius + 3.0 for prev in centers):
            continue
        placed.append((seg, t))
        centers.append(center)
    if len(placed) < spec.n_lesions:
        raise ValueError(
            f"placed only {len(placed)} of {spec.n_lesions} lesions: vessel tree of phantom "
            f"seed {spec.seed} offers too few interior sites at dims {spec.dims}"
        )
    return placed, radius


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, int]:
    """Build one phantom; returns (HU volume, label as 0/1)."""
    nx, ny, nz = spec.dims
    grids = np.meshgrid(
        np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64), np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    geom = Stream(derive(spec.seed, _SUB_GEOMETRY))

    data = np.full(spec.dims, AIR_HU, dtype=np.float32)
    body_center = (nx * _jitter(geom, 0.5, 0.02), ny * _jitter(geom, 0.5, 0.02), nz * 0.5)
    body_semi = (nx * _jitter(geom, 0.44, 0.04), ny * _jitter(geom, 0.42, 0.04), nz * _jitter(geom, 0.55, 0.04))
    data[_ellipsoid_mask(grids, body_center, body_semi)] = BODY_HU

    hu_stream = Stream(derive(spec.seed, _SUB_LUNG_HU))
    lung_masks = []
    for side in (-1.0, 1.0):
        center = (
            nx * (0.5 + side * _jitter(geom, 0.20, 0.03)),
            ny * _jitter(geom, 0.5, 0.02),
            nz * _jitter(geom, 0.5, 0.02),
        )
        semi = (nx * _jitter(geom, 0.155, 0.04), ny * _jitter(geom, 0.26, 0.04), nz * _jitter(geom, 0.40, 0.03))
        mask = _ellipsoid_mask(grids, center, semi)
        data[mask] = hu_stream.integers(*LUNG_HU_RANGE)
        lung_masks.append((mask, np.asarray(center), np.asarray(semi), side))
    lung_mask_all = lung_masks[0][0] | lung_masks[1][0]
    lung_voxels = int(lung_mask_all.sum())

    vessel_stream = Stream(derive(spec.seed, _SUB_VESSELS))
    vessel_hu = vessel_stream.integers(*VESSEL_HU_RANGE)  # one blood density per case
    trees: list[_Segment] = []
    for mask, center, semi, side in lung_masks:
        hilum = center.copy()
        hilum[0] += -side * semi[0] * 0.65  # start at the medial edge
        direction = np.array([side, vessel_stream.uniform(lo=-0.25, hi=0.25), vessel_stream.uniform(lo=-0.25, hi=0.25)])
        trees.append(_grow_tree(vessel_stream, hilum, direction, float(semi[0]) * 0.7))

    sites: list[tuple[_Segment, float]] = []
    radius = 0.0
    if spec.label == "positive":
        sites, radius = _select_lesion_sites(spec, trees, lung_mask_all, lung_voxels)

    blocked = {id(seg): t for seg, t in sites}
    occluded: set[int] = set()
    for seg, _ in sites:
        for child in seg.children:
            occluded.update(id(s) for s in child.walk())

    if sites:
        # infarcted wedge: the tissue fed by the occluded subtree densifies
        infarct_hu = Stream(derive(spec.seed, _SUB_LESIONS, 2)).integers(*INFARCT_HU_RANGE)
        wedge_radius = _VESSEL_RADIUS * _INFARCT_RADIUS_FACTOR
        for tree, (mask, _, _, _) in zip(trees, lung_masks):
            for seg in tree.walk():
                if id(seg) in occluded:
                    _paint_capsule(data, mask, seg.p0, seg.p1, wedge_radius, infarct_hu)
                elif id(seg) in blocked:
                    cut = seg.at(blocked[id(seg)])
                    _paint_capsule(data, mask, cut, seg.p1, wedge_radius, infarct_hu)

    for tree, (mask, _, _, _) in zip(trees, lung_masks):
        for seg in tree.walk():
            if id(seg) in occluded:
                continue  # distal to a clot: no flow, vessel never opacifies
            end = seg.at(blocked[id(seg)]) if id(seg) in blocked else seg.p1
            _paint_capsule(data, mask, seg.p0, end, seg.radius, vessel_hu)

    if sites:
        lesion_stream = Stream(derive(spec.seed, _SUB_LESIONS, 1))
        hu_lo, hu_hi = spec.lesion_hu_range
        for seg, t in sites:
            # draw from the dense end of the coagulated-blood range so clots
            # sit well clear of the vessel ceiling
            _paint_sphere(data, seg.at(t), radius, lesion_stream.integers(max(hu_lo + 1, hu_hi - 5), hu_hi))

    if spec.noise_hu_sigma > 0.0:
        _add_noise(spec, data, lung_mask_all)

    vol = Volume(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit=Unit.HOUNSFIELD)
    return vol, 1 if spec.label == "positive" else 0


def _add_noise(spec: PhantomSpec, data: np.ndarray, lung_mask: np.ndarray) -> None:
    noise_stream = Stream(derive(spec.seed, _SUB_NOISE))
    noise = np.rint(noise_stream.normal(data.size, std=spec.noise_hu_sigma)).reshape(data.shape)
    lesion_lo, lesion_hi = spec.lesion_hu_range
    is_lesion = (data > lesion_lo) & (data <= lesion_hi) & lung_mask
    noisy = data + noise.astype(np.float32)
    # clamp so the noise never moves a voxel across the lesion-range boundary
    noisy[is_lesion] = np.clip(noisy[is_lesion], lesion_lo + 1, lesion_hi)
    noisy[~is_lesion] = np.clip(noisy[~is_lesion], AIR_HU, lesion_lo)
    data[...] = noisy


def generate_dataset(
    n_pos: int,
    n_neg: int,
    seed: int,
    out_dir,
    *,
    dims: tuple[int, int, int] = (64, 64, 32),
    test_count: int = 0,
    noise_hu_sigma: float = 0.0,
    max_lesions: int = 2,
    workers: int = 1,
) -> list[ManifestRecord]:
    """Write ``n_pos + n_neg`` phantom NIfTI files plus a manifest.

    Case ``i`` (positives first) uses the derived seed ``derive(seed, i)``;
    regenerating with the same arguments reproduces every byte.  With
    ``test_count > 0`` a stratified subset is marked ``group=test`` in the
    manifest; everything else is ``trainval``.
    """
    if n_pos < 1 or n_neg < 1:
        raise ValueError(f"need at least one case per class, got {n_pos} positive / {n_neg} negative")
    total = n_pos + n_neg
    if not 0 <= test_count < total:
        raise ValueError(f"test_count must be in [0, {total}), got {test_count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    specs = []
    for i in range(total):
        case_seed = derive(seed, i)
        positive = i < n_pos
        n_lesions = Stream(derive(case_seed, 0)).integers(1, max_lesions) if positive else 0
        specs.append(
            PhantomSpec(
                dims=dims,
                seed=case_seed,
                label="positive" if positive else "negative",
                n_lesions=n_lesions,
                noise_hu_sigma=noise_hu_sigma,
            )
        )

    groups = ["trainval"] * total
    if test_count:
        test_pos = max(1, round(test_count * n_pos / total))
        test_neg = test_count - test_pos
        if test_neg < 1:
            test_pos, test_neg = test_count - 1, 1
        picker = Stream(derive(seed, 0x7E57))
        for base, count, k in ((0, n_pos, test_pos), (n_pos, n_neg, test_neg)):
            for j in picker.permutation(count)[:k]:
                groups[base + int(j)] = "test"

    names = [f"case_{i:04d}.nii" for i in range(total)]
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            pool.starmap(_write_case, [(spec, out_dir / name) for spec, name in zip(specs, names)])
    else:
        for spec, name in zip(specs, names):
            _write_case(spec, out_dir / name)

    records = [
        ManifestRecord(path=name, label=1 if spec.label == "positive" else 0, seed=spec.seed, group=group)
        for spec, name, group in zip(specs, names, groups)
    ]
    write_manifest(out_dir / "manifest.tsv", records)
    return records


def _write_case(spec: PhantomSpec, path: Path) -> None:
    vol, _ = generate_phantom(spec)
    write_nifti(vol, path)
