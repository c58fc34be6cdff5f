"""Shared test utilities: finite differences, stub discriminators, brute-force oracles."""

from __future__ import annotations

import functools
import itertools
import time

import numpy as np
import torch
import torch.nn as nn


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` (double precision expected)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


class StubDiscriminator(nn.Module):
    """Two 3x3 conv stages and a score head; small enough for 8x8 inputs."""

    def __init__(self, channels: int = 3, width: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.c1 = nn.Conv2d(channels, width, 3, padding=1)
        self.c2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.head = nn.Conv2d(width, 1, 3, padding=1)
        self.double()

    def forward(self, x):
        f1 = torch.nn.functional.leaky_relu(self.c1(x), 0.2)
        f2 = torch.nn.functional.leaky_relu(self.c2(f1), 0.2)
        return self.head(f2), [f1, f2]


class LinearDiscriminator(nn.Module):
    """Scores every pixel with the sum over channels; its only feature map is the input."""

    def forward(self, x):
        return x.sum(dim=1, keepdim=True), [x]


def brute_force_dft2(a: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT of an ``H x W`` array by explicit summation."""
    h, w = a.shape
    out = np.zeros((h, w), dtype=complex)
    for u, v in itertools.product(range(h), range(w)):
        acc = 0j
        for y, x in itertools.product(range(h), range(w)):
            acc += a[y, x] * np.exp(-2j * np.pi * (u * y / h + v * x / w))
        out[u, v] = acc
    return out


ACCEPTANCE_LOG: list[tuple[int, str]] = []


def criterion(number: int, title: str, limit_s: float):
    """Record one PASS/FAIL line for an acceptance test and enforce its time limit."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
                elapsed = time.perf_counter() - start
                assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s:.0f}s"
            except BaseException as exc:
                elapsed = time.perf_counter() - start
                msg = str(exc).splitlines()[0][:160] if str(exc) else type(exc).__name__
                ACCEPTANCE_LOG.append((number, f"FAIL criterion {number}: {title} ({elapsed:.1f}s) -- {msg}"))
                raise
            suffix = f" -- {detail}" if detail else ""
            ACCEPTANCE_LOG.append((number, f"PASS criterion {number}: {title} ({elapsed:.1f}s){suffix}"))
            print(ACCEPTANCE_LOG[-1][1])

        return run

    return wrap
