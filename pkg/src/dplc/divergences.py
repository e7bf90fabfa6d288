"""Kernel MMD, the gradient-penalized critic objective, and a Fréchet distance.

The Fréchet distance here is a surrogate for FID: statistics are taken on raw
flattened samples (low-dimensional data) or on the output of a fixed, seeded,
randomly initialized conv embedder (images).  Values are not comparable with
Inception-based FID numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn

from dplc.data import as_tensor, make_generator


@dataclass(frozen=True)
class KernelSpec:
    """Inverse multiquadratics kernel ``C / (C + |a - b|^2)``."""

    scale: float = 2.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"kernel scale must be positive, got {self.scale}")

    @classmethod
    def for_prior(cls, m: int, variance: float = 1.0) -> "KernelSpec":
        """The usual heuristic ``C = 2 m sigma^2``."""
        return cls(2.0 * m * variance)


def imq_kernel(a, b, spec: KernelSpec) -> torch.Tensor:
    a, b = torch.as_tensor(as_tensor(a)), torch.as_tensor(as_tensor(b))
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d2 = ((a - b) ** 2).sum(-1)
    return spec.scale / (spec.scale + d2)


def imq_gram(a: torch.Tensor, b: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    """Kernel matrix ``K[i, j] = k(a_i, b_j)`` for flattened samples."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    needs_grad = torch.is_grad_enabled() and (a.requires_grad or b.requires_grad)
    if not needs_grad and a.shape[0] * b.shape[0] > 1 << 16:
        # large evaluation-only matrices: fused in-place expansion
        d2 = torch.addmm((a * a).sum(1, keepdim=True) + (b * b).sum(1), a, b.T, alpha=-2)
        return d2.clamp_(min=0).add_(spec.scale).reciprocal_().mul_(spec.scale)
    if a.shape[1] <= 16:
        d2 = ((a[:, None, :] - b[None]) ** 2).sum(-1)
    else:
        d2 = ((a * a).sum(1, keepdim=True) - 2 * a @ b.T + (b * b).sum(1)).clamp_min(0)
    return spec.scale / (spec.scale + d2)


def mmd_u_statistic(z, z_bar, spec: KernelSpec) -> torch.Tensor:
    """Unbiased MMD^2 estimate between two equally sized batches.

    Within-sample sums skip the diagonal, the cross term does not.  The value
    can be negative.  Differentiable in both arguments.
    """
    z, z_bar = as_tensor(z), as_tensor(z_bar)
    b = z.shape[0]
    if b < 2 or z_bar.shape[0] != b:
        raise ValueError("need two batches of equal size b >= 2")
    if z.shape[1:] != z_bar.shape[1:]:
        raise ValueError(f"dimension mismatch: {tuple(z.shape)} vs {tuple(z_bar.shape)}")
    k_zz = imq_gram(z, z, spec)
    k_bb = imq_gram(z_bar, z_bar, spec)
    k_zb = imq_gram(z, z_bar, spec)
    off = b * (b - 1)
    within = (k_zz.sum() - k_zz.diagonal().sum()) / off + (k_bb.sum() - k_bb.diagonal().sum()) / off
    return within - 2.0 * k_zb.sum() / b**2


class CriticLoss(NamedTuple):
    total: torch.Tensor
    wasserstein: torch.Tensor
    penalty: torch.Tensor


def input_gradient_norm(critic: Callable, x: torch.Tensor, create_graph: bool = True
                        ) -> torch.Tensor:
    """Per-sample Euclidean norm of the critic's gradient w.r.t. its input."""
    x = x.detach().requires_grad_(True)
    out = critic(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph)
    return grad.reshape(grad.shape[0], -1).norm(dim=1)


def critic_loss(critic: Callable, x, x_fake, lambda_gp: float = 10.0,
                seed: int | torch.Generator | None = None, nu: torch.Tensor | None = None
                ) -> CriticLoss:
    """``mean f(x_fake) - f(x) + lambda_gp (|grad f(x_tilde)| - 1)^2``.

    ``x_tilde = nu x + (1 - nu) x_fake`` with one ``nu ~ U(0, 1)`` per sample,
    drawn from ``seed`` unless given.  The penalty keeps the graph of the input
    gradient, so backpropagating ``total`` reaches the critic parameters
    through the second-order path.  ``x_fake`` is treated as a constant.
    """
    x, x_fake = as_tensor(x), as_tensor(x_fake).detach()
    if x.shape != x_fake.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_fake.shape)}")
    b = x.shape[0]
    if nu is None:
        nu = torch.rand(b, generator=make_generator(0 if seed is None else seed), dtype=x.dtype)
    nu = nu.reshape((b,) + (1,) * (x.ndim - 1)).to(x.dtype)
    x_tilde = nu * x + (1 - nu) * x_fake
    wasserstein = (critic(x_fake).reshape(b) - critic(x).reshape(b)).mean()
    penalty = lambda_gp * ((input_gradient_norm(critic, x_tilde) - 1.0) ** 2).mean()
    return CriticLoss(wasserstein + penalty, wasserstein, penalty)


def generator_adversarial_loss(critic: Callable, x_fake) -> torch.Tensor:
    """``-mean f(x_fake)``; gradients flow into whatever produced ``x_fake``."""
    x_fake = as_tensor(x_fake)
    return -critic(x_fake).reshape(x_fake.shape[0]).mean()


# --------------------------------------------------------------------------
# Fréchet surrogate


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dim {d}")
        if self.count < 2:
            raise ValueError("statistics need at least two samples")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "count": int(self.count)}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianStats":
        return cls(np.array(d["mean"]), np.array(d["cov"]), int(d["count"]))


class RandomConvEmbedder(nn.Module):
    """Fixed random conv feature extractor for image Fréchet scores.

    Weights depend only on ``(in_channels, features, seed)``; they are never
    trained.  Output is a ``features``-dim vector per image.
    """

    def __init__(self, in_channels: int = 3, features: int = 64, seed: int = 0):
        super().__init__()
        gen = make_generator(seed)
        self.config = {"in_channels": in_channels, "features": features, "seed": seed}
        widths = [in_channels, 32, 64, features]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                bound = (3.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.float()).mean(dim=(2, 3))


def embed_and_fit(batch, embedder: Callable | None = None, chunk: int = 1024) -> GaussianStats:
    """Mean and covariance of embedded samples (identity: flattened raw data)."""
    x = as_tensor(batch)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples to fit a Gaussian")
    if embedder is None:
        feats = x.detach().reshape(x.shape[0], -1).to(torch.float64)
    else:
        with torch.no_grad():
            feats = torch.cat([embedder(part) for part in x.split(chunk)]).to(torch.float64)
    f = feats.numpy()
    mean = f.mean(0)
    centered = f - mean
    cov = centered.T @ centered / (f.shape[0] - 1)
    return GaussianStats(mean, cov, f.shape[0])


EIG_FLOOR = 1e-10


def _psd_sqrt(a: np.ndarray, what: str) -> np.ndarray:
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -1e-8 * scale:
        raise ValueError(f"{what} is not positive semidefinite (min eigenvalue {w.min():.3g})")
    w = np.where(w < EIG_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the cross term is computed as ``tr((S1^½ S2 S1^½)^½)``, which
    has the same eigenvalues as ``(S1 S2)^½`` but stays symmetric; eigenvalues
    below 1e-10 are zeroed.
    """
    if s1.mean.shape != s2.mean.shape:
        raise ValueError(f"dimension mismatch: {s1.mean.shape} vs {s2.mean.shape}")
    r1 = _psd_sqrt(s1.cov, "first covariance")
    _psd_sqrt(s2.cov, "second covariance")
    cross = _psd_sqrt(r1 @ s2.cov @ r1, "covariance product")
    diff = s1.mean - s2.mean
    return float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(cross))
