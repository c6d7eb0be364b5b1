"""Diversity indices, the 4x augmentation protocol and aging-accuracy evaluation."""

from __future__ import annotations

import logging
import math
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .dataset import (
    AGE_GROUPS,
    N_GROUPS,
    REPRESENTATIVE_AGES,
    ClassDistribution,
    FaceRecord,
    Manifest,
    class_distribution,
    load_image,
    save_image,
    toy_age_oracle,
    write_manifest,
)

logger = logging.getLogger(__name__)

# mean ground-truth test ages per target group for the two benchmark corpora
GT_PRESETS = {
    "morph": {1: 35.9, 2: 44.77, 3: 54.92},
    "cacd": {1: 35.41, 2: 45.45, 3: 55.01},
    "toy": {1: REPRESENTATIVE_AGES[1], 2: REPRESENTATIVE_AGES[2], 3: REPRESENTATIVE_AGES[3]},
}


# -- diversity indices -------------------------------------------------------


def _probabilities(dist: ClassDistribution | Sequence[float]) -> np.ndarray:
    probs = dist.probabilities if isinstance(dist, ClassDistribution) else ClassDistribution(tuple(dist)).probabilities
    return np.asarray(probs, dtype=np.float64)


def shannon_evenness(h: float, s: int) -> float:
    """``H / ln S``; NaN when ``S == 1``, where evenness is undefined."""
    if s < 2:
        return float("nan")
    return h / math.log(s)


def simpson_evenness(d: float, s: int) -> float:
    return d / s


def shannon(dist: ClassDistribution | Sequence[float]) -> tuple[float, float]:
    """Natural-log Shannon entropy H and evenness E, with ``0 ln 0 = 0``."""
    p = _probabilities(dist)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum()) + 0.0
    if p.size < 2:
        logger.warning("Shannon evenness is undefined for a single class")
    return h, shannon_evenness(h, p.size)


def simpson(dist: ClassDistribution | Sequence[float]) -> tuple[float, float]:
    """Inverse Simpson index D and evenness E = D / S."""
    p = _probabilities(dist)
    denom = float((p * p).sum())
    if denom == 0:
        raise ValueError("Simpson index of an all-zero distribution")
    d = 1.0 / denom
    return d, simpson_evenness(d, p.size)


@dataclass(frozen=True)
class DiversityReport:
    shannon_h: float
    shannon_e: float
    simpson_d: float
    simpson_e: float
    S: int
    distribution: ClassDistribution

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distribution"] = list(self.distribution.probabilities)
        return d


def diversity_report(data: Manifest | ClassDistribution | Sequence[float]) -> DiversityReport:
    if isinstance(data, Manifest):
        dist = class_distribution(data)
    elif isinstance(data, ClassDistribution):
        dist = data
    else:
        dist = ClassDistribution(tuple(data))
    h, sh_e = shannon(dist)
    d, si_e = simpson(dist)
    return DiversityReport(h, sh_e, d, si_e, dist.S, dist)


def format_diversity_table(reports: Mapping[str, DiversityReport]) -> str:
    lines = [f"{'':<12}{'ShH':>8}{'ShE':>8}{'SiD':>8}{'SiE':>8}   distribution"]
    for name, r in reports.items():
        probs = " ".join(f"{p:.3f}" for p in r.distribution.probabilities)
        lines.append(f"{name:<12}{r.shannon_h:8.4f}{r.shannon_e:8.4f}{r.simpson_d:8.4f}{r.simpson_e:8.4f}   {probs}")
    return "\n".join(lines)


# -- age estimators ----------------------------------------------------------


class EstimatorError(RuntimeError):
    pass


class AgeEstimator(Protocol):
    def estimate(self, image: np.ndarray) -> float:
        """Age in years of an H x W x C image in [-1, 1]."""


class ToyAgeEstimator:
    """Ring-counting oracle for the synthetic corpus."""

    def estimate(self, image: np.ndarray) -> float:
        return toy_age_oracle(image).age


class ConstantEstimator:
    def __init__(self, age: float):
        self.age = float(age)

    def estimate(self, image: np.ndarray) -> float:
        return self.age


class SubprocessEstimator:
    """External estimator: ``<command> <image.png>`` prints a decimal age on one line.

    Each call writes its own temporary PNG, so concurrent calls are safe as
    long as the external command is.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("empty estimator command")
        self.timeout = timeout

    def estimate(self, image: np.ndarray) -> float:
        with tempfile.TemporaryDirectory(prefix="agestyle-est-") as tmp:
            path = save_image(image, Path(tmp) / "face.png")
            try:
                proc = subprocess.run(self.argv + [str(path)], capture_output=True, text=True,
                                      timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise EstimatorError(f"estimator failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise EstimatorError(f"estimator exited with {proc.returncode}: {proc.stderr.strip()}")
        lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise EstimatorError(f"expected one output line, got {len(lines)}")
        try:
            age = float(lines[0])
        except ValueError:
            raise EstimatorError(f"not a decimal age: {lines[0]!r}") from None
        if not math.isfinite(age):
            raise EstimatorError(f"non-finite age {age}")
        return age


_ESTIMATORS: dict[str, Callable[[], AgeEstimator]] = {"toy": ToyAgeEstimator}


def register_estimator(name: str, factory: Callable[[], AgeEstimator]):
    _ESTIMATORS[name] = factory


def get_estimator(name: str) -> AgeEstimator:
    try:
        return _ESTIMATORS[name]()
    except KeyError:
        raise KeyError(f"unknown estimator {name!r}; registered: {sorted(_ESTIMATORS)}") from None


# -- target pickers ------------------------------------------------------------

# (target group index, candidate records, rng) -> chosen record
TargetPicker = Callable[[int, Sequence[FaceRecord], np.random.Generator], FaceRecord]


def uniform_picker(group: int, candidates: Sequence[FaceRecord], rng: np.random.Generator) -> FaceRecord:
    return candidates[int(rng.integers(len(candidates)))]


class OldestTargetPicker:
    """Picks among the ``top_k`` candidates an estimator rates oldest, for exaggerated aging."""

    def __init__(self, estimator: AgeEstimator, top_k: int = 1, image_size: int | None = None):
        self.estimator = estimator
        self.top_k = top_k
        self.image_size = image_size
        self._ages: dict[str, float] = {}

    def _age(self, rec: FaceRecord) -> float:
        if rec.image_path not in self._ages:
            self._ages[rec.image_path] = self.estimator.estimate(load_image(rec.image_path, self.image_size))
        return self._ages[rec.image_path]

    def __call__(self, group, candidates, rng):
        ranked = sorted(candidates, key=lambda r: (-self._age(r), r.image_path))
        top = ranked[: self.top_k]
        return top[int(rng.integers(len(top)))]


# -- translation plumbing --------------------------------------------------------

Translate = Callable[[np.ndarray, np.ndarray], np.ndarray]


def as_translator(model) -> Translate:
    """Accept a checkpoint path, a TrainState, a Translator or any ``(x, target) -> image`` callable."""
    from .trainer import Translator, TrainState, load_checkpoint

    if isinstance(model, (str, os.PathLike)):
        return Translator(load_checkpoint(model).model)
    if isinstance(model, TrainState):
        return Translator(model.model)
    if callable(model):
        return model
    raise TypeError(f"cannot translate with {type(model).__name__}")


def _image_size(translator) -> int | None:
    return getattr(translator, "image_size", None)


class _ImageCache:
    def __init__(self, size: int | None):
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = load_image(path, self.size)
        return self._cache[path]


def _translate_batched(translator, sources: list[np.ndarray], targets: list[np.ndarray], chunk: int = 32):
    out = []
    for i in range(0, len(sources), chunk):
        xs, ts = np.stack(sources[i:i + chunk]), np.stack(targets[i:i + chunk])
        if getattr(translator, "batched", False):
            out.extend(translator(xs, ts))
        else:
            out.extend(translator(x, t) for x, t in zip(xs, ts))
    return out


def _candidate_pools(test_set: Manifest, train_set: Manifest | None):
    pools = []
    for k in range(N_GROUPS):
        cands = test_set.by_group(k)
        tag = "te"
        if not cands and train_set is not None:
            cands = train_set.by_group(k)
            tag = "tr"
            if cands:
                logger.warning("no test targets in age group %d; falling back to train-set targets", k)
        pools.append((tag, cands))
    return pools


# -- augmentation ------------------------------------------------------------


def augment(
    checkpoint,
    test_set: Manifest,
    out_dir: str | os.PathLike,
    target_picker: TargetPicker | None = None,
    train_set: Manifest | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> Manifest:
    """Translate every record to the three other age groups.

    Writes ``out_dir/group_<k>/<origin>_<target>.png`` and
    ``out_dir/manifest.csv``. The returned manifest holds the originals
    followed by the synthetic records, 4x the input size, with each synthetic
    record labelled by its target group's representative age.
    """
    if len(test_set) == 0:
        raise ValueError("cannot augment an empty manifest")
    translator = as_translator(checkpoint)
    picker = target_picker or uniform_picker
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    load = _ImageCache(_image_size(translator))
    pools = _candidate_pools(test_set, train_set)
    index_of = {rec.image_path: j for _, cands in pools for j, rec in enumerate(cands)}

    synthetic: list[FaceRecord] = []
    writes = []
    for k in range(N_GROUPS):
        tag, cands = pools[k]
        jobs_k = [(i, rec) for i, rec in enumerate(test_set.records) if rec.group.index != k]
        if not jobs_k:
            continue
        if not cands:
            raise ValueError(f"no target images available for age group {k}")
        chosen = [picker(k, cands, rng) for _ in jobs_k]
        images = _translate_batched(translator, [load(rec.image_path) for _, rec in jobs_k],
                                    [load(t.image_path) for t in chosen])
        for (i, rec), tgt, img in zip(jobs_k, chosen, images):
            path = out_dir / f"group_{k}" / f"o{i:05d}_{tag}{index_of[tgt.image_path]:05d}.png"
            writes.append((img, path))
            synthetic.append(FaceRecord(str(path), int(AGE_GROUPS[k].representative_age), rec.subject_id))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda w: save_image(*w), writes))
    else:
        for img, path in writes:
            save_image(img, path)

    augmented = Manifest(test_set.records + tuple(synthetic), source_name=f"{test_set.source_name}-augmented")
    write_manifest(augmented, out_dir / "manifest.csv")
    return augmented


# -- aging accuracy ------------------------------------------------------------


@dataclass(frozen=True)
class GroupAccuracy:
    target_group: int
    mean_pred_age: float
    std_pred_age: float
    gt_mean: float
    mae: float
    n: int
    skipped: int = 0

    @classmethod
    def from_predictions(cls, group: int, predictions: Sequence[float], gt_mean: float, skipped: int = 0):
        preds = np.asarray(predictions, dtype=np.float64)
        if preds.size == 0:
            return cls(group, float("nan"), float("nan"), gt_mean, float("nan"), 0, skipped)
        mean = float(preds.mean())
        return cls(group, mean, float(preds.std()), float(gt_mean), abs(mean - gt_mean), int(preds.size), skipped)


@dataclass(frozen=True)
class AgeAccuracyReport:
    per_target_group: dict[int, GroupAccuracy] = field(default_factory=dict)

    @property
    def skipped(self) -> int:
        return sum(g.skipped for g in self.per_target_group.values())

    def to_dict(self) -> dict:
        return {
            "per_target_group": {str(k): asdict(v) for k, v in self.per_target_group.items()},
            "skipped": self.skipped,
        }

    def table(self) -> str:
        lines = [f"{'group':<8}{'mean':>9}{'std':>8}{'GT':>9}{'MAE':>8}{'n':>6}{'skip':>6}"]
        for k, g in self.per_target_group.items():
            lines.append(f"{AGE_GROUPS[k].label:<8}{g.mean_pred_age:9.2f}{g.std_pred_age:8.2f}"
                         f"{g.gt_mean:9.2f}{g.mae:8.2f}{g.n:6d}{g.skipped:6d}")
        return "\n".join(lines)


def gt_means_from(manifest: Manifest) -> dict[int, float]:
    """Mean labelled age per group 1..3 of a reference manifest."""
    means = {}
    for k in range(1, N_GROUPS):
        ages = [r.age for r in manifest.by_group(k)]
        if ages:
            means[k] = float(np.mean(ages))
    return means


def aging_accuracy(
    checkpoint,
    source: Manifest,
    targets: Manifest,
    estimator: AgeEstimator,
    gt_means: Mapping[int, float] | None = None,
    target_picker: TargetPicker | None = None,
    seed: int = 0,
) -> AgeAccuracyReport:
    """Age every youngest-group source image into groups 1..3 and estimate the results.

    ``gt_means`` defaults to the mean labelled ages of ``targets``.
    Estimator failures are skipped and counted.
    """
    translator = as_translator(checkpoint)
    picker = target_picker or uniform_picker
    rng = np.random.default_rng(seed)
    young = source.by_group(0)
    if len(young) != len(source):
        logger.warning("ignoring %d source records outside the youngest group", len(source) - len(young))
    if not young:
        raise ValueError("aging accuracy needs source images from the youngest group")
    gt = dict(gt_means) if gt_means is not None else gt_means_from(targets)
    load = _ImageCache(_image_size(translator))

    per_group = {}
    for k in range(1, N_GROUPS):
        cands = targets.by_group(k)
        if not cands:
            logger.warning("no targets in age group %d; skipping it", k)
            continue
        if k not in gt:
            raise ValueError(f"no ground-truth mean age for group {k}")
        chosen = [picker(k, cands, rng) for _ in young]
        images = _translate_batched(translator, [load(r.image_path) for r in young],
                                    [load(t.image_path) for t in chosen])
        preds, skipped = [], 0
        for img in images:
            try:
                age = float(estimator.estimate(img))
                if not math.isfinite(age):
                    raise EstimatorError(f"non-finite age {age}")
            except Exception as exc:  # any estimator failure skips the image
                logger.warning("estimator failed: %s", exc)
                skipped += 1
                continue
            preds.append(age)
        per_group[k] = GroupAccuracy.from_predictions(k, preds, gt[k], skipped)
    return AgeAccuracyReport(per_group)
