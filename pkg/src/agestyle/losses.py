"""Training objectives: adversarial, feature matching, cycle reconstruction,
identity, R1 penalty, and the two composite losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .networks import DiscriminatorOutput, select_logit


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value, step: int | None = None):
        self.term, self.value, self.step = term, value, step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r} = {value}{where}")


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 0.01
    lambda_id: float = 1e-4
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class LossReport:
    adv: float
    fm: float
    rec: float
    id: float
    gp: float
    total_G: float
    total_D: float

    FIELDS = ("adv", "fm", "rec", "id", "gp", "total_G", "total_D")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def adversarial_loss(d_real_logit: torch.Tensor, d_fake_logit: torch.Tensor) -> torch.Tensor:
    """Mean of ``log sigmoid(real) + log(1 - sigmoid(fake))``; always <= 0.

    Computed with log-sigmoid, which is exact where an epsilon guard would clip.
    """
    return (F.logsigmoid(d_real_logit).mean() + F.logsigmoid(-d_fake_logit).mean())


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def feature_matching_loss(
    d_target_acts: Sequence[torch.Tensor], d_fake_acts: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over layers of the mean squared activation difference."""
    if len(d_target_acts) != len(d_fake_acts):
        raise ValueError(f"{len(d_target_acts)} target layers vs {len(d_fake_acts)} fake layers")
    total = d_fake_acts[0].new_zeros(())
    for k, (t, f) in enumerate(zip(d_target_acts, d_fake_acts)):
        _check_same_shape(t, f, f"feature layer {k}")
        total = total + (t - f).pow(2).mean()
    return total


def reconstruction_loss(x_a: torch.Tensor, cycled: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x_a, cycled, "reconstruction")
    return (x_a - cycled).abs().mean()


def identity_loss(x_a: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x_a, x_tilde, "identity")
    return (x_a - x_tilde).abs().mean()


def r1_penalty(
    d: Callable[[torch.Tensor], DiscriminatorOutput | torch.Tensor],
    x_real: torch.Tensor,
    lambda_gp: float,
    groups=None,
) -> torch.Tensor:
    """``lambda_gp`` times the batch mean of the squared input-gradient norm of D at real data.

    ``d`` returns a :class:`DiscriminatorOutput` or a logit tensor; with
    ``groups`` given the per-sample group logit is selected, otherwise ``d``
    must return one scalar per sample. The result keeps its graph so it can
    be backpropagated into ``d``'s parameters.
    """
    x = x_real.detach().requires_grad_(True)
    out = d(x)
    if groups is not None:
        score = select_logit(out, groups)
    else:
        score = out.logits if isinstance(out, DiscriminatorOutput) else out
        score = score.reshape(x.shape[0])
    return penalty_from_scores(score, x, lambda_gp)


def penalty_from_scores(score: torch.Tensor, x: torch.Tensor, lambda_gp: float) -> torch.Tensor:
    """R1 term for per-sample scores already computed from ``x`` (which must require grad)."""
    if not score.requires_grad:
        return x.new_zeros(())
    (grad,) = torch.autograd.grad(score.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return x.new_zeros(())
    return lambda_gp * grad.pow(2).flatten(1).sum(dim=1).mean()


def generator_total(fm, rec, id_, w: LossWeights):
    return fm + w.lambda_rec * rec + w.lambda_id * id_


def discriminator_total(adv, gp):
    return -adv + gp


def compose(adv, fm, rec, id, gp, w: LossWeights, step: int | None = None) -> LossReport:
    """Assemble a :class:`LossReport` from scalar terms (floats or 0-d tensors).

    ``gp`` is expected to already include its weight, as returned by :func:`r1_penalty`.
    """
    parts = {"adv": adv, "fm": fm, "rec": rec, "id": id, "gp": gp}
    values = {}
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v, step)
        values[name] = v
    return LossReport(
        **values,
        total_G=generator_total(values["fm"], values["rec"], values["id"], w),
        total_D=discriminator_total(values["adv"], values["gp"]),
    )
