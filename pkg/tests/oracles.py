"""Independent reference computations shared by the unit and acceptance tests."""

import math

import torch
from torch import nn


def central_difference_grads(loss_fn, params, h=1e-4):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``params``."""
    grads = []
    # perturb through .data so losses that differentiate internally (R1) still can
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g.detach())
    return grads


def analytic_grads(loss_fn, params):
    for p in params:
        p.grad = None
    loss_fn().backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def n_params(*modules):
    return sum(p.numel() for m in modules for p in m.parameters())


class MicroDiscriminator(nn.Module):
    """Two tanh layers exposing activations and four group logits (< 200 parameters)."""

    def __init__(self, d_in=6, hidden=(8, 5)):
        super().__init__()
        self.l1 = nn.Linear(d_in, hidden[0])
        self.l2 = nn.Linear(hidden[0], hidden[1])
        self.head = nn.Linear(hidden[1], 4)

    def activations(self, x):
        a1 = torch.tanh(self.l1(x))
        a2 = torch.tanh(self.l2(a1))
        return [a1, a2]

    def forward(self, x):
        return self.head(self.activations(x)[-1])


class MicroGenerator(nn.Module):
    """Style-modulated affine map: ``tanh(W x * (1 + s) + b)`` with ``s`` a projected style."""

    def __init__(self, d=6):
        super().__init__()
        self.w = nn.Linear(d, d)
        self.style = nn.Linear(d, 1, bias=False)

    def forward(self, x, target):
        return torch.tanh(self.w(x) * (1 + self.style(target)))


def plain_mse(a, b):
    flat_a, flat_b = a.reshape(-1).tolist(), b.reshape(-1).tolist()
    return sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)


def plain_l1(a, b):
    flat_a, flat_b = a.reshape(-1).tolist(), b.reshape(-1).tolist()
    return sum(abs(x - y) for x, y in zip(flat_a, flat_b)) / len(flat_a)


def plain_shannon(probs):
    return -sum(p * math.log(p) for p in probs if p > 0)


def plain_inverse_simpson(probs):
    return 1.0 / sum(p * p for p in probs)
