"""Age-annotated manifests, age-group binning, splits and the synthetic toy corpus."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

N_GROUPS = 4
_LOWER_BOUNDS = (0, 30, 40, 50)
REPRESENTATIVE_AGES = (15.0, 35.0, 45.0, 55.0)
GROUP_LABELS = ("-30", "30-39", "40-49", "50+")

CACHE_ENV = "AGESTYLE_CACHE"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class AgeGroup:
    index: int
    lower: int
    upper: float  # exclusive; inf for the open top bin

    def __contains__(self, age: float) -> bool:
        return self.lower <= age < self.upper

    @property
    def label(self) -> str:
        return GROUP_LABELS[self.index]

    @property
    def representative_age(self) -> float:
        return REPRESENTATIVE_AGES[self.index]


AGE_GROUPS = tuple(
    AgeGroup(i, lo, _LOWER_BOUNDS[i + 1] if i + 1 < N_GROUPS else float("inf"))
    for i, lo in enumerate(_LOWER_BOUNDS)
)


def age_group(age: float) -> AgeGroup:
    """Bin an age in years into one of the four half-open groups."""
    if age < 0:
        raise ValueError(f"negative age: {age}")
    for group in reversed(AGE_GROUPS):
        if age >= group.lower:
            return group
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class FaceRecord:
    image_path: str
    age: int
    subject_id: str = ""

    def __post_init__(self):
        if self.age < 0:
            raise ValueError(f"negative age: {self.age}")

    @property
    def group(self) -> AgeGroup:
        return age_group(self.age)


@dataclass(frozen=True)
class Manifest:
    records: tuple[FaceRecord, ...]
    source_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.image_path in seen:
                raise ManifestError(f"duplicate image_path: {rec.image_path}")
            seen.add(rec.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def group_counts(self) -> list[int]:
        counts = [0] * N_GROUPS
        for rec in self.records:
            counts[rec.group.index] += 1
        return counts

    def by_group(self, index: int) -> list[FaceRecord]:
        return [r for r in self.records if r.group.index == index]


@dataclass(frozen=True)
class ClassDistribution:
    probabilities: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probabilities)
        object.__setattr__(self, "probabilities", probs)
        if len(probs) < 1:
            raise ValueError("a distribution needs at least one class")
        if any(p < 0 or not np.isfinite(p) for p in probs):
            raise ValueError(f"probabilities must be finite and non-negative: {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(probs)!r}, expected 1")

    @property
    def S(self) -> int:
        return len(self.probabilities)

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "ClassDistribution":
        total = float(sum(counts))
        if total <= 0:
            raise ValueError("all-zero counts have no distribution")
        return cls(tuple(c / total for c in counts))


# -- manifests ---------------------------------------------------------------


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Read a ``image_path,age[,subject_id]`` CSV.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_path", "age"} <= set(reader.fieldnames):
            raise ManifestError(f"{path}: header must contain image_path and age")
        for row_no, row in enumerate(reader, start=2):
            image_path = (row.get("image_path") or "").strip()
            raw_age = (row.get("age") or "").strip()
            if not image_path or not raw_age:
                raise ManifestError(f"{path}: malformed row {row_no}")
            try:
                age = float(raw_age)
            except ValueError:
                raise ManifestError(f"{path}: malformed age {raw_age!r} in row {row_no}") from None
            if age < 0:
                raise ManifestError(f"{path}: negative age {raw_age} in row {row_no}")
            if age != int(age):
                raise ManifestError(f"{path}: non-integer age {raw_age} in row {row_no}")
            if not os.path.isabs(image_path):
                image_path = str(base / image_path)
            subject = (row.get("subject_id") or "").strip()
            records.append(FaceRecord(image_path, int(age), subject))
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    return Manifest(tuple(records), source_name=path.stem)


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> Path:
    """Write a manifest CSV; image paths under the CSV's directory are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "age", "subject_id"])
        for rec in manifest.records:
            p = Path(rec.image_path)
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
            writer.writerow([p.as_posix(), rec.age, rec.subject_id])
    return path


def split(manifest: Manifest, test_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Stratified train/test split.

    The overall test size is ``round(test_fraction * n)`` over the groups that
    can be stratified; per-group quotas are apportioned by largest remainder
    and every such group keeps at least one record on each side. Groups with
    fewer than two records go wholly to train. Both halves keep manifest order.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    members = [[i for i, r in enumerate(manifest.records) if r.group.index == g] for g in range(N_GROUPS)]

    eligible = []
    for g, idx in enumerate(members):
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            warnings.warn(f"age group {g} has {len(idx)} record(s); assigning it wholly to train")
            continue
        eligible.append(g)

    n_eligible = sum(len(members[g]) for g in eligible)
    target = int(np.floor(test_fraction * n_eligible + 0.5))
    exact = {g: test_fraction * len(members[g]) for g in eligible}
    quota = {g: int(np.floor(exact[g])) for g in eligible}
    by_remainder = sorted(eligible, key=lambda g: (-(exact[g] - quota[g]), g))
    for g in by_remainder[: max(0, target - sum(quota.values()))]:
        quota[g] += 1
    for g in eligible:
        quota[g] = min(max(quota[g], 1), len(members[g]) - 1)

    test_idx: set[int] = set()
    for g in range(N_GROUPS):
        # one permutation per group regardless of eligibility keeps rng use stable
        perm = rng.permutation(len(members[g]))
        if g in quota:
            test_idx.update(members[g][j] for j in perm[: quota[g]])

    train = [r for i, r in enumerate(manifest.records) if i not in test_idx]
    test = [r for i, r in enumerate(manifest.records) if i in test_idx]
    name = manifest.source_name
    return Manifest(tuple(train), f"{name}-train"), Manifest(tuple(test), f"{name}-test")


def class_distribution(manifest: Manifest) -> ClassDistribution:
    if len(manifest) == 0:
        raise ValueError("class distribution of an empty manifest")
    return ClassDistribution.from_counts(manifest.group_counts())


# -- image I/O ---------------------------------------------------------------


def center_crop_resize(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BICUBIC)
    return img


def _cache_file(path: Path, size: int) -> Path | None:
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return None
    st = path.stat()
    key = f"{path.resolve()}|{st.st_mtime_ns}|{st.st_size}|{size}"
    return Path(cache_dir) / (hashlib.sha1(key.encode()).hexdigest() + ".npy")


def load_image(path: str | os.PathLike, size: int | None = None) -> np.ndarray:
    """Decode an image to float32 H x W x 3 in [-1, 1], optionally center-cropped and resized.

    When ``AGESTYLE_CACHE`` names a directory, decoded arrays are cached there.
    """
    path = Path(path)
    cached = _cache_file(path, size or 0)
    if cached is not None and cached.exists():
        return np.load(cached)
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None:
            img = center_crop_resize(img, size)
        arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(f".{os.getpid()}.tmp.npy")
        np.save(tmp, arr)
        os.replace(tmp, cached)
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


# -- toy corpus --------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    """Synthetic corpus where age group ``k`` is drawn as a disk with ``1 + 2k`` rings."""

    image_size: int = 64
    samples_per_group: int = 200
    noise_level: float = 0.05
    seed: int = 0
    disk_fraction: float = 0.9
    ages: tuple[float, ...] = field(default=REPRESENTATIVE_AGES)

    def __post_init__(self):
        if self.image_size < 48:
            raise ValueError("toy images need image_size >= 48 to resolve 7 rings")
        if not 0 <= self.noise_level <= 1:
            raise ValueError("noise_level must lie in [0, 1]")
        if self.samples_per_group < 1:
            raise ValueError("samples_per_group must be >= 1")


def ring_count(group_index: int) -> int:
    return 1 + 2 * group_index


_BRIGHT_MIN, _DARK, _BACKGROUND = 0.35, -0.7, -1.0


def render_toy_image(group_index: int, spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one toy face: ``2n`` equal-width bands alternating bright/dark inside the disk.

    The bright colour is a random per-image tint, the nuisance ("identity")
    factor; the band count carries the age.
    """
    n = ring_count(group_index)
    size = spec.image_size
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c) / (spec.disk_fraction * size / 2.0)
    band = np.floor(r * 2 * n).astype(int)
    tint = rng.uniform(_BRIGHT_MIN, 1.0, size=3)
    img = np.full((size, size, 3), _BACKGROUND, dtype=np.float64)
    inside = r < 1.0
    bright = inside & (band % 2 == 0)
    dark = inside & (band % 2 == 1)
    img[bright] = tint
    img[dark] = _DARK
    if spec.noise_level > 0:
        img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_toy(spec: ToySpec, out_dir: str | os.PathLike) -> Manifest:
    """Write ``out_dir/group_<k>/<n>.png`` for every group plus ``out_dir/manifest.csv``."""
    out_dir = Path(out_dir)
    records = []
    for k in range(N_GROUPS):
        age = int(spec.ages[k])
        for n in range(spec.samples_per_group):
            rng = np.random.default_rng([spec.seed, k, n])
            img = render_toy_image(k, spec, rng)
            path = save_image(img, out_dir / f"group_{k}" / f"{n}.png")
            records.append(FaceRecord(str(path), age, subject_id=f"toy-{k}-{n}"))
    manifest = Manifest(tuple(records), source_name="toy")
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


class OracleReading(NamedTuple):
    age: float
    rings: int
    group: int
    degenerate: bool


def radial_profile(image: np.ndarray) -> np.ndarray:
    """Channel-mean intensity averaged over 1-pixel-wide annuli around the image centre."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=-1)
    h, w = gray.shape
    yy, xx = np.mgrid[0:h, 0:w]
    rr = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    bins = np.floor(rr).astype(int)
    n_bins = min(h, w) // 2
    mask = bins < n_bins
    sums = np.bincount(bins[mask], weights=gray[mask], minlength=n_bins)
    counts = np.bincount(bins[mask], minlength=n_bins)
    return sums / np.maximum(counts, 1)


def count_bright_runs(profile: np.ndarray, hysteresis: float = 0.1) -> int:
    """Number of bright runs along the profile, with a hysteresis band around the midpoint."""
    lo, hi = float(profile.min()), float(profile.max())
    mid = 0.5 * (lo + hi)
    margin = hysteresis * (hi - lo)
    runs = 0
    state = None
    for v in profile:
        if v > mid + margin and state != "bright":
            runs += 1
            state = "bright"
        elif v < mid - margin:
            state = "dark"
    return runs


def toy_age_oracle(image: np.ndarray) -> OracleReading:
    """Read the ring count of a toy image back into a representative age.

    Constant images are degenerate and map to group 0 with the flag set.
    """
    profile = radial_profile(image)
    if profile.max() - profile.min() < 1e-3:
        return OracleReading(REPRESENTATIVE_AGES[0], 0, 0, True)
    rings = count_bright_runs(profile)
    if rings == 0:
        return OracleReading(REPRESENTATIVE_AGES[0], 0, 0, True)
    group = int(np.clip(np.floor((rings - 1) / 2.0 + 0.5), 0, N_GROUPS - 1))
    return OracleReading(REPRESENTATIVE_AGES[group], rings, group, False)
