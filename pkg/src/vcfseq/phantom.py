"""Synthetic spine phantoms with exact fracture and cord ground truth.

A phantom is a stack of box-shaped vertebral bodies separated by soft-tissue
discs, sitting anterior to a dark spinal canal enclosed by a continuous bony
ring. The whole column follows a smooth lateral/AP sinusoid. A fractured
vertebra keeps its centre but loses a fraction of its axial height.

Coordinates: slice ``z`` has its centre at ``(z + 0.5) * sz`` mm below the top
edge of the volume; in-plane centres are reported in voxel-index units.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume import HU_MAX, HU_MIN, Volume, save_volume

GRADES = ("none", "mild", "moderate", "severe")
GRADE_BANDS = {"mild": (0.20, 0.25), "moderate": (0.25, 0.40), "severe": (0.40, 0.60)}
MAX_HEIGHT_LOSS = 0.9

MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "# vcfseq manifest v1"
LABEL_HEADER = "# vcfseq series label v1"
PARTITIONS = ("train", "tune", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class PhantomSpec:
    n_vertebrae: int = 17
    vertebra_height_mm: float = 20.0
    vertebra_width_mm: float = 36.0
    vertebra_depth_mm: float = 24.0
    disc_height_mm: float = 5.0
    canal_radius_mm: float = 7.0
    arch_thickness_mm: float = 4.0
    margin_mm: float = 10.0
    bone_hu: int = 700
    soft_tissue_hu: int = 40
    canal_hu: int = -10
    curvature_amplitude_mm: float = 10.0
    noise_sigma_hu: float = 20.0
    seed: int = 0
    inplane_size: int = 56
    inplane_spacing_mm: float = 2.0
    slice_spacing_mm: float = 2.5

    def __post_init__(self):
        if self.n_vertebrae < 1:
            raise ValueError("n_vertebrae must be >= 1")
        if not self.bone_hu > self.soft_tissue_hu:
            raise ValueError("bone_hu must exceed soft_tissue_hu")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise_sigma_hu must be >= 0")
        for name in ("vertebra_height_mm", "vertebra_width_mm", "vertebra_depth_mm", "canal_radius_mm",
                     "inplane_spacing_mm", "slice_spacing_mm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("bone_hu", "soft_tissue_hu", "canal_hu"):
            if not HU_MIN <= getattr(self, name) <= HU_MAX:
                raise ValueError(f"{name} outside the HU range")

    @property
    def spine_length_mm(self) -> float:
        return self.n_vertebrae * self.vertebra_height_mm + (self.n_vertebrae - 1) * self.disc_height_mm

    @property
    def nz(self) -> int:
        return math.ceil((self.spine_length_mm + 2 * self.margin_mm) / self.slice_spacing_mm)

    def vertebra_top_mm(self, index: int) -> float:
        return self.margin_mm + index * (self.vertebra_height_mm + self.disc_height_mm)


@dataclass(frozen=True)
class VertebraLabel:
    index: int
    fractured: bool
    height_loss: float
    grade: str
    top_mm: float
    bottom_mm: float
    nominal_height_mm: float

    @property
    def center_mm(self) -> float:
        return 0.5 * (self.top_mm + self.bottom_mm)


@dataclass
class SeriesLabel:
    per_vertebra: list
    canal_centerline: np.ndarray  # (nz, 2): cx, cy in voxel indices
    canal_radius_mm: float
    series_positive: bool = field(init=False)

    def __post_init__(self):
        self.series_positive = any(v.fractured for v in self.per_vertebra)


def grade_for_fraction(fraction: float) -> str:
    if fraction < GRADE_BANDS["mild"][0]:
        return "none"
    if fraction < GRADE_BANDS["moderate"][0]:
        return "mild"
    if fraction < GRADE_BANDS["severe"][0]:
        return "moderate"
    return "severe"


def splitmix64(state: int) -> tuple[int, int]:
    """One step of SplitMix64; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def series_seeds(master_seed: int, n: int) -> list[int]:
    """Per-series seeds: the first ``n`` SplitMix64 outputs from ``master_seed``."""
    state, out = master_seed & _MASK64, []
    for _ in range(n):
        state, z = splitmix64(state)
        out.append(z)
    return out


def canal_centerline(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    nz, n = spec.nz, spec.inplane_size
    z_mm = (np.arange(nz) + 0.5) * spec.slice_spacing_mm
    total = nz * spec.slice_spacing_mm
    phase_lr, phase_ap = rng.uniform(0, 2 * np.pi, size=2)
    amp = spec.curvature_amplitude_mm / spec.inplane_spacing_mm
    cx = (n - 1) / 2 + amp * np.sin(2 * np.pi * z_mm / total + phase_lr)
    cy = 0.64 * (n - 1) + 0.5 * amp * np.sin(np.pi * z_mm / total + phase_ap)
    return np.stack([cx, cy], axis=1)


def generate_series(spec: PhantomSpec, fracture_plan=()) -> tuple[Volume, SeriesLabel]:
    """Render one phantom series.

    Args:
        spec: geometry, intensities and the seed.
        fracture_plan: iterable of ``(vertebra_index, grade)``; each listed
            vertebra loses a height fraction drawn uniformly from its grade's
            band.

    Returns:
        ``(volume, label)``. Identical ``(spec, plan)`` give identical bytes.
    """
    plan = {}
    for index, grade in fracture_plan:
        if not 0 <= index < spec.n_vertebrae:
            raise ValueError(f"vertebra index {index} out of range 0..{spec.n_vertebrae - 1}")
        if grade not in GRADE_BANDS:
            raise ValueError(f"unknown fracture grade {grade!r}")
        if index in plan:
            raise ValueError(f"vertebra {index} planned twice")
        plan[index] = grade

    rng = np.random.default_rng(spec.seed)
    losses = {i: float(rng.uniform(*GRADE_BANDS[plan[i]])) for i in sorted(plan)}
    centre = canal_centerline(spec, rng)

    h = spec.vertebra_height_mm
    vertebrae = []
    for v in range(spec.n_vertebrae):
        top = spec.vertebra_top_mm(v)
        loss = losses.get(v, 0.0)
        vertebrae.append(
            VertebraLabel(v, v in plan, loss, plan.get(v, "none"), top + loss * h / 2, top + h - loss * h / 2, h)
        )

    nz, n = spec.nz, spec.inplane_size
    s, sz = spec.inplane_spacing_mm, spec.slice_spacing_mm
    grid = np.arange(n) * s
    z_mm = (np.arange(nz) + 0.5) * sz
    in_body = np.zeros(nz, dtype=bool)
    for v in vertebrae:
        in_body |= (z_mm >= v.top_mm) & (z_mm < v.bottom_mm)

    r_canal = spec.canal_radius_mm
    r_arch = r_canal + spec.arch_thickness_mm
    vol = np.full((nz, n, n), spec.soft_tissue_hu, dtype=np.float64)
    for z in range(nz):
        dx = grid[None, :] - centre[z, 0] * s
        dy = grid[:, None] - centre[z, 1] * s
        r = np.hypot(dx, dy)
        sl = vol[z]
        sl[r < r_arch] = spec.bone_hu
        sl[r < r_canal] = spec.canal_hu
        if in_body[z]:
            body = (np.abs(dx) < spec.vertebra_width_mm / 2) & (dy < -r_arch) & (dy >= -r_arch - spec.vertebra_depth_mm)
            sl[body] = spec.bone_hu
    if spec.noise_sigma_hu > 0:
        vol += rng.normal(0.0, spec.noise_sigma_hu, size=vol.shape)
    data = np.clip(np.rint(vol), HU_MIN, HU_MAX).astype(np.int16)
    volume = Volume(data, (sz, s, s))
    return volume, SeriesLabel(vertebrae, centre, r_canal)


# ------------------------------------------------------------------ labels


def format_label(label: SeriesLabel) -> str:
    lines = [LABEL_HEADER, f"canal_radius_mm={label.canal_radius_mm!r}", f"nz={len(label.canal_centerline)}"]
    lines += [f"{z} {cx:.6f} {cy:.6f}" for z, (cx, cy) in enumerate(label.canal_centerline)]
    return "\n".join(lines) + "\n"


def format_vertebrae(vertebrae) -> str:
    return ";".join(
        f"{v.index}:{int(v.fractured)}:{v.height_loss!r}:{v.grade}:{v.top_mm!r}:{v.bottom_mm!r}:{v.nominal_height_mm!r}"
        for v in vertebrae
    )


def parse_vertebrae(text: str) -> list:
    out = []
    for item in text.split(";"):
        idx, flag, loss, grade, top, bottom, nominal = item.split(":")
        out.append(VertebraLabel(int(idx), flag == "1", float(loss), grade, float(top), float(bottom), float(nominal)))
    return out


def read_centerline(path) -> tuple[np.ndarray, float]:
    """Returns ``(centerline (nz, 2), canal_radius_mm)`` from a label sidecar."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LABEL_HEADER:
        raise ValueError(f"{path}: not a series label file")
    radius = float(lines[1].split("=", 1)[1])
    nz = int(lines[2].split("=", 1)[1])
    rows = [tuple(float(t) for t in ln.split()[1:]) for ln in lines[3 : 3 + nz]]
    if len(rows) != nz:
        raise ValueError(f"{path}: expected {nz} centreline rows, got {len(rows)}")
    return np.array(rows), radius


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class SeriesRecord:
    series_id: str
    partition: str
    positive: bool
    volume_path: str
    label_path: str
    vertebrae: tuple


@dataclass
class Manifest:
    root: Path
    records: list

    def partition(self, name: str) -> list:
        return [r for r in self.records if r.partition == name]

    def volume_path(self, record: SeriesRecord) -> Path:
        return self.root / record.volume_path

    def label_path(self, record: SeriesRecord) -> Path:
        return self.root / record.label_path

    def to_text(self) -> str:
        lines = [
            MANIFEST_HEADER,
            "# series_id\tpartition\tpositive\tvolume\tlabel\tvertebrae(index:flag:loss:grade:top_mm:bottom_mm:nominal_mm;...)",
        ]
        for r in self.records:
            lines.append(
                "\t".join([r.series_id, r.partition, str(int(r.positive)), r.volume_path, r.label_path,
                           format_vertebrae(r.vertebrae)])
            )
        return "\n".join(lines) + "\n"


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: not a vcfseq manifest")
    records = []
    for ln in lines[1:]:
        if not ln or ln.startswith("#"):
            continue
        sid, part, pos, vol, lab, verts = ln.split("\t")
        if part not in PARTITIONS:
            raise ValueError(f"{path}: unknown partition {part!r}")
        records.append(SeriesRecord(sid, part, pos == "1", vol, lab, tuple(parse_vertebrae(verts))))
    return Manifest(path.parent, records)


def split_counts(n: int) -> tuple[int, int, int]:
    n_tune = round(SPLIT_FRACTIONS[1] * n)
    n_test = round(SPLIT_FRACTIONS[2] * n)
    return n - n_tune - n_test, n_tune, n_test


def _draw_plan(rng: np.random.Generator, n_vertebrae: int) -> list:
    n_fx = 1 if rng.random() < 0.7 or n_vertebrae < 2 else 2
    idx = sorted(int(i) for i in rng.choice(n_vertebrae, size=n_fx, replace=False))
    grades = rng.choice(["mild", "moderate", "severe"], size=n_fx)
    return [(i, str(g)) for i, g in zip(idx, grades)]


def make_dataset(out_dir, n_series: int, positive_fraction: float = 0.33, spec: PhantomSpec = PhantomSpec(),
                 seed: int = 42) -> Manifest:
    """Generate ``n_series`` phantoms plus a manifest under ``out_dir``.

    Exactly ``round(positive_fraction * n_series)`` series carry fractures.
    The train/tune/test split is 80/10/10 by series, stratified by label so
    every partition sees both classes whenever the counts allow.
    """
    if n_series < 10:
        raise ValueError("n_series must be >= 10")
    if not 0 <= positive_fraction <= 1:
        raise ValueError("positive_fraction must lie in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")

    rng = np.random.default_rng(seed)
    n_pos = round(positive_fraction * n_series)
    positive = np.zeros(n_series, dtype=bool)
    positive[rng.permutation(n_series)[:n_pos]] = True
    plans = [_draw_plan(rng, spec.n_vertebrae) if p else [] for p in positive]

    sizes = split_counts(n_series)
    partition = np.empty(n_series, dtype=object)
    for cls in (True, False):
        members = np.flatnonzero(positive == cls)
        members = members[rng.permutation(len(members))]
        n_tune = round(len(members) * SPLIT_FRACTIONS[1])
        n_test = round(len(members) * SPLIT_FRACTIONS[2])
        partition[members[:n_tune]] = "tune"
        partition[members[n_tune : n_tune + n_test]] = "test"
        partition[members[n_tune + n_test :]] = "train"
    _rebalance(partition, positive, sizes)

    records = []
    for i, series_seed in enumerate(series_seeds(seed, n_series)):
        sid = f"{i:04d}"
        volume, label = generate_series(replace(spec, seed=series_seed), plans[i])
        vol_name, lab_name = f"series_{sid}.vsq", f"series_{sid}.label"
        save_volume(volume, out / vol_name)
        (out / lab_name).write_text(format_label(label))
        records.append(SeriesRecord(sid, str(partition[i]), label.series_positive, vol_name, lab_name,
                                    tuple(label.per_vertebra)))
    manifest = Manifest(out, records)
    (out / MANIFEST_NAME).write_text(manifest.to_text())
    return manifest


def _rebalance(partition, positive, sizes):
    """Move series between partitions until the 80/10/10 sizes hold exactly.

    Per-class rounding can leave a partition one or two short; moves take
    the majority class from the oversized partition.
    """
    target = dict(zip(PARTITIONS, sizes))
    while True:
        counts = {p: int(np.sum(partition == p)) for p in PARTITIONS}
        over = [p for p in PARTITIONS if counts[p] > target[p]]
        under = [p for p in PARTITIONS if counts[p] < target[p]]
        if not over:
            return
        src, dst = over[0], under[0]
        members = np.flatnonzero(partition == src)
        major = np.sum(positive[members]) * 2 > len(members)
        pick = members[positive[members] == major]
        if len(pick) == 0:
            pick = members
        partition[pick[-1]] = dst
