"""Micro networks wired through the package's loss terms, for finite-difference checks."""

import torch

from agestyle.losses import (
    adversarial_loss,
    feature_matching_loss,
    identity_loss,
    r1_penalty,
    reconstruction_loss,
)
from agestyle.networks import select_logit
from oracles import MicroDiscriminator, MicroGenerator, n_params

TERMS = ("adv", "fm", "rec", "id", "gp")


def micro_setup(seed=0):
    """Float64 micro D and G (<= 200 parameters together) plus a 3-sample batch."""
    torch.manual_seed(seed)
    d, g = MicroDiscriminator().double(), MicroGenerator().double()
    assert n_params(d, g) <= 200
    gen = torch.Generator().manual_seed(seed + 1)
    x_a = torch.randn(3, 6, generator=gen, dtype=torch.float64)
    x_b = torch.randn(3, 6, generator=gen, dtype=torch.float64)
    groups_a, groups_b = torch.tensor([0, 2, 3]), torch.tensor([1, 3, 0])
    return d, g, x_a, x_b, groups_a, groups_b


def micro_losses(d, g, x_a, x_b, groups_a, groups_b):
    """Zero-argument closures, one per loss term."""
    return {
        "adv": lambda: adversarial_loss(select_logit(d(x_a), groups_a), select_logit(d(g(x_a, x_b)), groups_b)),
        "fm": lambda: feature_matching_loss(d.activations(x_b), d.activations(g(x_a, x_b))),
        "rec": lambda: reconstruction_loss(x_a, g(g(x_a, x_b), x_a)),
        "id": lambda: identity_loss(x_a, g(x_a, x_b)),
        "gp": lambda: r1_penalty(d, x_a, 10.0, groups=groups_a),
    }
