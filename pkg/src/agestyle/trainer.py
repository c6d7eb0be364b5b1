"""Alternating discriminator/generator optimization, checkpoints and loss logs."""

from __future__ import annotations

import copy
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .dataset import N_GROUPS, FaceRecord, Manifest, load_image
from .losses import (
    LossReport,
    LossWeights,
    adversarial_loss,
    compose,
    discriminator_total,
    feature_matching_loss,
    generator_total,
    identity_loss,
    penalty_from_scores,
    reconstruction_loss,
)
from .networks import AgingModel, DiscriminatorSpec, GeneratorSpec, select_logit, to_tensor
from .stylestats import extract_style

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "agestyle-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step",) + LossReport.FIELDS


class CheckpointError(RuntimeError):
    pass


class EmptyGroupError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    image_size: int = 128
    base_channels: int = 32
    max_channels: int = 256
    use_translated_target_cycle: bool = True
    checkpoint_every: int = 500
    strict_groups: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_flat(self) -> dict:
        """Flat key/value form used by config files and CLI flags."""
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        flat.update(asdict(self.weights))
        return flat

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        known = cls.flat_keys()
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        weight_keys = {f.name for f in fields(LossWeights)}
        weights = LossWeights(**{k: float(v) for k, v in values.items() if k in weight_keys})
        rest = {k: v for k, v in values.items() if k not in weight_keys}
        return cls(weights=weights, **rest)

    @classmethod
    def flat_keys(cls) -> dict:
        """Flat key -> default value."""
        return cls().to_flat()

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(base_channels=self.base_channels, max_channels=self.max_channels,
                             image_size=self.image_size)


# -- data ----------------------------------------------------------------------


class ImageBank:
    """All images of a manifest decoded once into an (N, 3, H, W) tensor."""

    def __init__(self, manifest: Manifest, image_size: int, jobs: int = 1):
        if len(manifest) == 0:
            raise ValueError("cannot train on an empty manifest")
        self.manifest = manifest
        paths = [r.image_path for r in manifest.records]
        if jobs > 1:
            # map preserves order, so the bank is independent of scheduling
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                arrays = list(pool.map(lambda p: load_image(p, image_size), paths))
        else:
            arrays = [load_image(p, image_size) for p in paths]
        self.images = to_tensor(np.stack(arrays))
        self.groups = torch.tensor([r.group.index for r in manifest.records], dtype=torch.long)


class PairSampler:
    """Draws (input, target) index pairs.

    The input is uniform over records, the target group uniform over groups
    (the input's own group included) and the target uniform within its group.
    """

    def __init__(self, manifest: Manifest, strict: bool = False):
        if len(manifest) == 0:
            raise ValueError("cannot sample from an empty manifest")
        self.n = len(manifest)
        members = [[i for i, r in enumerate(manifest.records) if r.group.index == g] for g in range(N_GROUPS)]
        empty = [g for g in range(N_GROUPS) if not members[g]]
        if empty:
            if strict:
                raise EmptyGroupError(f"age groups {empty} have no records")
            logger.warning("age groups %s have no records; targets restricted to the rest", empty)
        self.members = [m for m in members if m]

    def draw(self, rng: np.random.Generator) -> tuple[int, int]:
        a = int(rng.integers(self.n))
        pool = self.members[int(rng.integers(len(self.members)))]
        b = pool[int(rng.integers(len(pool)))]
        return a, b

    def draw_batch(self, rng: np.random.Generator, size: int) -> tuple[list[int], list[int]]:
        pairs = [self.draw(rng) for _ in range(size)]
        return [a for a, _ in pairs], [b for _, b in pairs]


def sample_pair(train_set: Manifest, rng: np.random.Generator, strict: bool = False) -> tuple[FaceRecord, FaceRecord]:
    a, b = PairSampler(train_set, strict).draw(rng)
    return train_set.records[a], train_set.records[b]


@dataclass
class Batch:
    x_a: torch.Tensor
    group_a: torch.Tensor
    x_b: torch.Tensor
    group_b: torch.Tensor

    @classmethod
    def from_bank(cls, bank: ImageBank, idx_a, idx_b) -> "Batch":
        ia, ib = torch.as_tensor(idx_a), torch.as_tensor(idx_b)
        return cls(bank.images[ia], bank.groups[ia], bank.images[ib], bank.groups[ib])


# -- state -------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: AgingModel
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        root = np.random.SeedSequence(config.seed)
        init_seq, sample_seq = root.spawn(2)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(init_seq.generate_state(1, dtype=np.uint64)[0] >> 1))
            model = AgingModel(config.generator_spec())
        betas = (config.beta1, config.beta2)
        opt_g = torch.optim.Adam(model.G.parameters(), lr=config.learning_rate, betas=betas)
        opt_d = torch.optim.Adam(model.D.parameters(), lr=config.learning_rate, betas=betas)
        return cls(config, model, opt_g, opt_d, np.random.default_rng(sample_seq))

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "specs": self.model.specs(),
            "config": self.config.to_flat(),
            "step": self.step,
            "generator": self.model.G.state_dict(),
            "discriminator": self.model.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": copy.deepcopy(self.rng.bit_generator.state),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainState":
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not an agestyle checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
        try:
            config = TrainConfig.from_flat(payload["config"])
            state = cls.initial(config)
            g_spec = GeneratorSpec(**payload["specs"]["generator"])
            d_spec = DiscriminatorSpec(**payload["specs"]["discriminator"])
            if (g_spec, d_spec) != (state.model.g_spec, state.model.d_spec):
                state.model = AgingModel(g_spec, d_spec)
                betas = (config.beta1, config.beta2)
                state.opt_g = torch.optim.Adam(state.model.G.parameters(), lr=config.learning_rate, betas=betas)
                state.opt_d = torch.optim.Adam(state.model.D.parameters(), lr=config.learning_rate, betas=betas)
            state.model.G.load_state_dict(payload["generator"])
            state.model.D.load_state_dict(payload["discriminator"])
            state.opt_g.load_state_dict(payload["opt_g"])
            state.opt_d.load_state_dict(payload["opt_d"])
            state.rng.bit_generator.state = payload["rng"]
            state.step = int(payload["step"])
        except (KeyError, TypeError, ValueError, RuntimeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        return state


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state.to_dict(), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return TrainState.from_dict(payload)


# -- optimization --------------------------------------------------------------


def discriminator_step(state: TrainState, batch: Batch):
    """One D update on ``-adv + gp``; returns the pre-update (adv, gp) tensors."""
    model, w = state.model, state.config.weights
    G, D = model.G, model.D
    G.requires_grad_(False)
    D.requires_grad_(True)
    with torch.no_grad():
        fake = G(batch.x_a, model.style_of(batch.x_b)).image

    x_real = batch.x_a.detach().requires_grad_(w.lambda_gp > 0)
    n = x_real.shape[0]
    out = D(torch.cat([x_real, fake]))
    real_logit = select_logit(out.logits[:n], batch.group_a)
    fake_logit = select_logit(out.logits[n:], batch.group_b)
    adv = adversarial_loss(real_logit, fake_logit)
    if w.lambda_gp > 0:
        gp = penalty_from_scores(real_logit, x_real, w.lambda_gp)
    else:
        gp = adv.new_zeros(())
    total = discriminator_total(adv, gp)
    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    state.opt_d.step()
    return adv.detach(), gp.detach()


def generator_losses(model: AgingModel, batch: Batch, translated_target_cycle: bool = True):
    """(fm, rec, id) for a batch, differentiable w.r.t. the generator."""
    G, D = model.G, model.D
    n = batch.x_a.shape[0]
    layer_map = G.layer_map
    with torch.no_grad():
        acts = D(torch.cat([batch.x_b, batch.x_a])).activations
    target_acts = [a[:n] for a in acts]
    style_b = extract_style(target_acts, layer_map)
    style_a = extract_style([a[n:] for a in acts], layer_map)

    x_tilde = G(batch.x_a, style_b).image
    if translated_target_cycle:
        # the back-translation takes its style from the target translated into A's age
        x_tilde_prime = G(batch.x_b, style_a).image
        fake_acts = D(torch.cat([x_tilde, x_tilde_prime])).activations
        cycle_style = extract_style([a[n:] for a in fake_acts], layer_map)
        fake_acts = [a[:n] for a in fake_acts]
    else:
        fake_acts = D(x_tilde).activations
        cycle_style = style_a
    cycled = G(x_tilde, cycle_style).image

    fm = feature_matching_loss(target_acts, fake_acts)
    rec = reconstruction_loss(batch.x_a, cycled)
    id_ = identity_loss(batch.x_a, x_tilde)
    return fm, rec, id_


def generator_step(state: TrainState, batch: Batch):
    model, w = state.model, state.config.weights
    model.D.requires_grad_(False)
    model.G.requires_grad_(True)
    fm, rec, id_ = generator_losses(model, batch, state.config.use_translated_target_cycle)
    total = generator_total(fm, rec, id_, w)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    model.D.requires_grad_(True)
    return fm.detach(), rec.detach(), id_.detach()


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossReport]:
    """One D update followed by one G update.

    Each reported term is the value at which its own update was taken: the
    discriminator terms before the D update, the generator terms after it and
    before the G update.
    """
    state.model.train()
    adv, gp = discriminator_step(state, batch)
    fm, rec, id_ = generator_step(state, batch)
    report = compose(adv, fm, rec, id_, gp, state.config.weights, step=state.step)
    state.step += 1
    return state, report


def batches(state: TrainState, bank: ImageBank, sampler: PairSampler) -> Iterator[Batch]:
    while True:
        idx_a, idx_b = sampler.draw_batch(state.rng, state.config.batch_size)
        yield Batch.from_bank(bank, idx_a, idx_b)


class LossLog:
    def __init__(self, path: str | os.PathLike | None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.rows: list[list[float]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not (append and self.path.exists()):
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    def append(self, step: int, report: LossReport):
        row = [step] + report.as_row()
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([row[0]] + [repr(v) for v in row[1:]])


def read_loss_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(
    config: TrainConfig,
    train_set: Manifest,
    out_dir: str | os.PathLike | None = None,
    resume: TrainState | str | os.PathLike | None = None,
    bank: ImageBank | None = None,
    jobs: int = 1,
    progress_every: int = 100,
) -> TrainState:
    """Run ``config.steps`` total steps, resuming from ``resume`` when given.

    With ``out_dir`` set, writes ``losses.csv``, ``checkpoint_<step>.pt`` every
    ``checkpoint_every`` steps and ``checkpoint_final.pt``.
    """
    if resume is None:
        state = TrainState.initial(config)
    elif isinstance(resume, TrainState):
        state = resume
    else:
        state = load_checkpoint(resume)
    if state.config != config:
        # steps may be extended on resume; everything else must agree
        if TrainConfig.from_flat({**state.config.to_flat(), "steps": config.steps}) != config:
            raise ValueError("resume config differs from the checkpoint's config")
        state.config = config

    out = Path(out_dir) if out_dir is not None else None
    log = LossLog(out / "losses.csv" if out else None, append=resume is not None)
    bank = bank or ImageBank(train_set, config.image_size, jobs=jobs)
    sampler = PairSampler(train_set, strict=config.strict_groups)
    stream = batches(state, bank, sampler)

    while state.step < config.steps:
        step = state.step
        _, report = train_step(state, next(stream))
        log.append(step, report)
        state.history.append(report)
        if progress_every and (step + 1) % progress_every == 0:
            logger.info("step %d  fm %.4f  rec %.4f  id %.4f  adv %.4f  gp %.4f",
                        step + 1, report.fm, report.rec, report.id, report.adv, report.gp)
        if out and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out / f"checkpoint_{state.step}.pt")
    if out:
        save_checkpoint(state, out / "checkpoint_final.pt")
    return state


class Translator:
    """Inference wrapper: ``G(x, style(D(target)))`` in evaluation mode."""

    batched = True  # accepts N x H x W x C stacks as well as single images

    def __init__(self, model: AgingModel):
        self.model = model.eval()
        self.image_size = model.g_spec.image_size

    @classmethod
    def from_checkpoint(cls, path) -> "Translator":
        return cls(load_checkpoint(path).model)

    @torch.no_grad()
    def __call__(self, x: np.ndarray, target: np.ndarray) -> np.ndarray:
        """H x W x C (or N x H x W x C) arrays in [-1, 1] to the same shape."""
        single = np.ndim(x) == 3
        xt, tt = to_tensor(x), to_tensor(target)
        if tt.shape[0] == 1 and xt.shape[0] > 1:
            tt = tt.expand(xt.shape[0], -1, -1, -1)
        out = self.model.translate(xt, tt).permute(0, 2, 3, 1).numpy()
        return out[0] if single else out


def translate(checkpoint, x: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Translate ``x`` into the age style of ``target``; ``checkpoint`` is a path or TrainState."""
    model = checkpoint.model if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint).model
    return Translator(model)(x, target)
