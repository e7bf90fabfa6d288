"""Discrete codes embedded in Euclidean space.

Three code layouts are supported:

``sign-corners``
    Every code site is quantized independently to {-1, 1}; a code with ``R``
    sites carries ``R`` bits.  This is what the rate-constrained encoder emits.
``explicit-centers``
    ``2**R`` arbitrary pairwise-distinct centers (e.g. from Lloyd iterations).
``hypercube``
    The unit cube [0, 1]^m cut into ``2**R`` congruent sub-cubes with edge
    ``2**(-R/m)``; the centers are the sub-cube midpoints.  Index order is
    row-major with the first coordinate varying slowest.

Nearest-center ties always resolve to the lowest center index.  For
sign-corners the centers are ordered (-1, 1), so an exact zero maps to -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from dplc.data import Batch, PriorSpec, as_tensor, make_generator

MODES = ("sign-corners", "explicit-centers", "hypercube")
MAX_PROPOSALS = 10**6
MAX_MATERIALIZED_CENTERS = 2**20


class SamplingError(RuntimeError):
    pass


@dataclass
class CodeSpec:
    mode: str
    rate: int
    centers: torch.Tensor | None = None
    dim: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown code mode {self.mode!r}")
        if self.rate < 0:
            raise ValueError("rate must be nonnegative")
        if self.mode == "explicit-centers":
            if self.centers is None or self.centers.ndim != 2:
                raise ValueError("explicit-centers needs a (count, dim) center tensor")
            self.centers = self.centers.to(torch.float64)
            count = self.centers.shape[0]
            if count != 2**self.rate:
                raise ValueError(f"{count} centers do not encode {self.rate} bits")
            if count > 1 and torch.pdist(self.centers).min() == 0:
                raise ValueError("centers must be pairwise distinct")
            self.dim = self.centers.shape[1]
        elif self.mode == "hypercube":
            if self.dim is None or self.dim < 1:
                raise ValueError("hypercube mode needs the latent dimension")
            if self.rate % self.dim:
                raise ValueError(f"rate {self.rate} is not a multiple of dimension {self.dim}")
        else:
            self.dim = self.rate

    @property
    def levels(self) -> int:
        """Cells per coordinate for hypercube mode."""
        return 2 ** (self.rate // self.dim)

    @property
    def edge(self) -> float:
        return 1.0 / self.levels

    def center_table(self) -> torch.Tensor:
        if self.mode == "explicit-centers":
            return self.centers
        if self.mode == "sign-corners":
            raise ValueError("sign-corner codes have no materialized center table")
        if 2**self.rate > MAX_MATERIALIZED_CENTERS:
            raise ValueError(f"refusing to materialize 2**{self.rate} centers")
        axis = (torch.arange(self.levels, dtype=torch.float64) + 0.5) / self.levels
        grids = torch.meshgrid(*([axis] * self.dim), indexing="ij")
        return torch.stack([g.reshape(-1) for g in grids], dim=1)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "rate": self.rate, "dim": self.dim}
        if self.mode == "explicit-centers":
            out["centers"] = self.centers.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CodeSpec":
        centers = d.get("centers")
        if centers is not None:
            centers = torch.tensor(centers, dtype=torch.float64)
        return cls(d["mode"], d["rate"], centers, d.get("dim"))


class QuantizationResult(NamedTuple):
    indices: torch.Tensor
    """Sign-corners: one bit per code site (same shape as the input).
    Otherwise: one integer cell index per sample."""
    embedded: torch.Tensor
    surrogate: torch.Tensor


def sign_corner_spec(code_shape: Sequence[int]) -> CodeSpec:
    return CodeSpec("sign-corners", int(np.prod(code_shape, dtype=np.int64)))


def _sample_dim(z: torch.Tensor) -> int:
    return int(np.prod(z.shape[1:], dtype=np.int64))


def _check_dims(z: torch.Tensor, spec: CodeSpec) -> None:
    if z.ndim < 2:
        raise ValueError("expected a batch with a leading sample axis")
    if _sample_dim(z) != spec.dim or (spec.mode != "sign-corners" and z.ndim != 2):
        raise ValueError(f"sample shape {tuple(z.shape[1:])} does not match a {spec.mode} "
                         f"code of dimension {spec.dim}")


def _sq_dists(z: torch.Tensor, centers: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    # exact differences (no |a|^2 - 2ab + |b|^2 expansion) so that ties stay ties
    c = centers.to(z.dtype)
    return torch.cat([((part[:, None, :] - c[None]) ** 2).sum(-1) for part in z.split(chunk)])


def _hypercube_cells(z: torch.Tensor, spec: CodeSpec) -> torch.Tensor:
    # ceil(.) - 1 sends points on a cell boundary to the lower cell (lowest index)
    cells = torch.ceil(z.to(torch.float64) * spec.levels).long() - 1
    return cells.clamp(0, spec.levels - 1)


def _hypercube_index(cells: torch.Tensor, spec: CodeSpec) -> torch.Tensor:
    weights = spec.levels ** torch.arange(spec.dim - 1, -1, -1)
    return (cells * weights).sum(-1)


def _hypercube_unravel(indices: torch.Tensor, spec: CodeSpec) -> torch.Tensor:
    cells = []
    rem = indices.long()
    for _ in range(spec.dim):
        cells.append(rem % spec.levels)
        rem = rem // spec.levels
    return torch.stack(cells[::-1], dim=-1)


def _hard(z: torch.Tensor, spec: CodeSpec) -> tuple[torch.Tensor, torch.Tensor]:
    if spec.mode == "sign-corners":
        bits = (z > 0).long()
        return bits, torch.where(z > 0, 1.0, -1.0).to(z.dtype)
    if spec.mode == "hypercube":
        cells = _hypercube_cells(z, spec)
        return _hypercube_index(cells, spec), ((cells + 0.5) / spec.levels).to(z.dtype)
    idx = torch.argmin(_sq_dists(z, spec.centers), dim=1)
    return idx, spec.centers[idx].to(z.dtype)


def hard_quantize(z: Batch | torch.Tensor, spec: CodeSpec) -> QuantizationResult:
    """Nearest-center quantization; the surrogate carries no gradient."""
    z = as_tensor(z)
    _check_dims(z, spec)
    idx, emb = _hard(z.detach(), spec)
    return QuantizationResult(idx, emb, emb)


def soft_assignment(z: torch.Tensor, spec: CodeSpec, temperature: float) -> torch.Tensor:
    """Softmax(-|z - c|^2 / temperature)-weighted average of the centers.

    For sign-corners this reduces per site to ``tanh(2 z / temperature)``; for
    the hypercube grid the weights factorize over coordinates.
    """
    if spec.mode == "sign-corners":
        return torch.tanh(2.0 * z / temperature)
    if spec.mode == "hypercube":
        axis = ((torch.arange(spec.levels, dtype=z.dtype) + 0.5) / spec.levels)
        w = torch.softmax(-((z[..., None] - axis) ** 2) / temperature, dim=-1)
        return (w * axis).sum(-1)
    c = spec.centers.to(z.dtype)
    d2 = ((z[:, None, :] - c[None]) ** 2).sum(-1)
    return torch.softmax(-d2 / temperature, dim=1) @ c


def soft_quantize(z: Batch | torch.Tensor, spec: CodeSpec, temperature: float = 1.0
                  ) -> QuantizationResult:
    """Straight-through quantization.

    The surrogate's value is the hard embedding bit for bit (``soft - soft``
    is an exact zero), while its gradient is that of :func:`soft_assignment`.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_tensor(z)
    _check_dims(z, spec)
    idx, emb = _hard(z.detach(), spec)
    soft = soft_assignment(z, spec, temperature)
    return QuantizationResult(idx, emb, emb + (soft - soft.detach()))


def bitrate_bpp(code_shape: Sequence[int], data_shape: Sequence[int]) -> float:
    """Code bits per pixel for a sign-corner code.

    ``data_shape`` is the sample shape, ``(C, H, W)`` or ``(H, W)`` for images;
    a 1-d vector sample counts as one "pixel" so the result is bits per sample.
    """
    from dplc.data import pixel_count

    data_shape = tuple(data_shape)
    if not data_shape or any(d <= 0 for d in data_shape):
        raise ValueError(f"invalid data shape {data_shape}")
    if any(d < 0 for d in code_shape):
        raise ValueError(f"invalid code shape {tuple(code_shape)}")
    bits = int(np.prod(tuple(code_shape), dtype=np.int64)) if len(code_shape) else 0
    return bits / pixel_count(data_shape)


# --------------------------------------------------------------------------
# center construction


def _kmeans_pp(x: torch.Tensor, count: int, gen: torch.Generator) -> torch.Tensor:
    n = x.shape[0]
    first = torch.randint(n, (1,), generator=gen)
    centers = [x[first[0]]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, count):
        if d2.sum() <= 0:
            raise ValueError("not enough distinct samples to place the centers")
        nxt = torch.multinomial(d2, 1, generator=gen)[0]
        centers.append(x[nxt])
        d2 = torch.minimum(d2, ((x - x[nxt]) ** 2).sum(1))
    return torch.stack(centers)


def _assign(x: torch.Tensor, c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    d2 = (x * x).sum(1, keepdim=True) - 2 * x @ c.T + (c * c).sum(1)
    d2, idx = d2.clamp_min(0).min(1)
    return idx, d2


def fit_centers(prior_samples: Batch | torch.Tensor, count: int, seed: int = 0,
                max_iter: int = 100, tol: float = 1e-6, return_history: bool = False):
    """Lloyd iterations (squared-error k-means) from a k-means++ start.

    Stops after ``max_iter`` rounds or when the relative improvement of the mean
    squared quantization error drops below ``tol``.  ``count`` must be a power
    of two.  With ``return_history`` the per-iteration errors come back as well;
    they are non-increasing.
    """
    x = as_tensor(prior_samples).detach().to(torch.float64)
    if x.ndim == 1:
        x = x[:, None]
    if count < 1 or count & (count - 1):
        raise ValueError("center count must be a power of two")
    if x.shape[0] < count:
        raise ValueError(f"{x.shape[0]} samples cannot support {count} centers")
    gen = make_generator(seed)
    c = _kmeans_pp(x, count, gen)
    idx, d2 = _assign(x, c)
    history = [d2.mean().item()]
    for _ in range(max_iter):
        sums = torch.zeros_like(c).index_add_(0, idx, x)
        counts = torch.bincount(idx, minlength=count).to(x.dtype)
        occupied = counts > 0
        c = torch.where(occupied[:, None], sums / counts.clamp_min(1)[:, None], c)
        idx, d2 = _assign(x, c)
        err = d2.mean().item()
        prev = history[-1]
        history.append(err)
        if prev - err <= tol * max(prev, 1e-300):
            break
    spec = CodeSpec("explicit-centers", int(math.log2(count)), c)
    return (spec, history) if return_history else spec


def build_hypercube_quantizer(m: int, rate: int) -> CodeSpec:
    if m < 1:
        raise ValueError("dimension must be positive")
    if rate % m:
        raise ValueError(f"rate {rate} must be a multiple of m={m}")
    return CodeSpec("hypercube", rate, dim=m)


def hypercube_error_bound(m: int, rate: int) -> float:
    """Largest possible distance between two points of one sub-cube."""
    return math.sqrt(m) * 2.0 ** (-rate / m)


# --------------------------------------------------------------------------
# Voronoi-conditional resampling


def _sample_prior_tensor(prior: PriorSpec, shape, gen, dtype):
    if prior.family == "standard-normal":
        return torch.randn(shape, generator=gen, dtype=dtype)
    return torch.rand(shape, generator=gen, dtype=dtype)


def _sign_corner_resample(bits, prior, gen, dtype, max_proposals):
    out = torch.empty(bits.shape, dtype=dtype)
    want_pos = bits.reshape(-1).bool()
    flat = out.view(-1)
    pending = torch.arange(flat.numel())
    seen = 0
    while pending.numel():
        if seen >= max_proposals:
            raise SamplingError(f"{pending.numel()} coordinates found no accepted proposal "
                                f"within {max_proposals} proposals")
        prop = _sample_prior_tensor(prior, (pending.numel(),), gen, dtype)
        ok = (prop > 0) == want_pos[pending]
        flat[pending[ok]] = prop[ok]
        pending = pending[~ok]
        seen += 1
    return out


def _rejection_resample(indices, spec, prior, gen, dtype, max_proposals):
    n = indices.shape[0]
    out = torch.empty(n, spec.dim, dtype=dtype)
    pending = torch.arange(n)
    seen = 0
    while pending.numel():
        if seen >= max_proposals:
            raise SamplingError(f"{pending.numel()} draws found no accepted proposal "
                                f"within {max_proposals} proposals")
        m = min(max(4096, 8 * pending.numel()), 1 << 20)
        prop = _sample_prior_tensor(prior, (m, prior.dim), gen, dtype)
        seen += m
        cell, _ = _hard(prop, spec)
        # match the k-th pending draw of a cell with the k-th proposal in that cell
        order = torch.argsort(cell, stable=True)
        sorted_cells = cell[order]
        count = 2**spec.rate
        starts = torch.searchsorted(sorted_cells, torch.arange(count))
        avail = torch.bincount(cell, minlength=count)
        targets = indices[pending]
        t_order = torch.argsort(targets, stable=True)
        t_sorted = targets[t_order]
        first = torch.searchsorted(t_sorted, t_sorted)
        rank = torch.arange(t_sorted.numel()) - first
        ok = rank < avail[t_sorted]
        src = order[starts[t_sorted[ok]] + rank[ok]]
        done = pending[t_order[ok]]
        out[done] = prop[src]
        keep = torch.ones(pending.numel(), dtype=torch.bool)
        keep[t_order[ok]] = False
        pending = pending[keep]
    return out


def voronoi_resample_batch(spec: CodeSpec, indices: torch.Tensor, prior: PriorSpec,
                           seed: int | torch.Generator, dtype: torch.dtype = torch.float64,
                           max_proposals: int = MAX_PROPOSALS) -> torch.Tensor:
    """Draw ``Z_i ~ P_Z( . | Z in cell i)`` for every index.

    Hypercube codes under a uniform prior are sampled directly inside the cube.
    Everything else uses rejection sampling from the prior; sign-corner cells
    are products of half-lines, so each site is rejected independently.  A draw
    that sees ``max_proposals`` proposals without acceptance raises
    :class:`SamplingError`.
    """
    gen = make_generator(seed)
    indices = torch.as_tensor(indices).long()
    if spec.mode == "sign-corners":
        if indices.ndim < 2 or _sample_dim(indices) != spec.rate:
            raise ValueError("sign-corner indices need one bit per code site")
        if prior.dim != spec.rate:
            raise ValueError("prior dimension must equal the number of code sites")
        return _sign_corner_resample(indices, prior, gen, dtype, max_proposals)
    if prior.dim != spec.dim:
        raise ValueError(f"prior dimension {prior.dim} != code dimension {spec.dim}")
    if indices.ndim != 1:
        raise ValueError("expected one cell index per sample")
    if indices.numel() and (indices.min() < 0 or indices.max() >= 2**spec.rate):
        raise ValueError("cell index out of range")
    if spec.mode == "hypercube" and prior.family == "uniform-hypercube":
        lower = _hypercube_unravel(indices, spec).to(dtype) * spec.edge
        return lower + spec.edge * torch.rand(lower.shape, generator=gen, dtype=dtype)
    return _rejection_resample(indices, spec, prior, gen, dtype, max_proposals)


def voronoi_resample(spec: CodeSpec, index, prior: PriorSpec, seed: int | torch.Generator,
                     max_proposals: int = MAX_PROPOSALS) -> torch.Tensor:
    """One latent vector from the prior restricted to cell ``index``."""
    idx = torch.as_tensor(index).long()
    return voronoi_resample_batch(spec, idx[None], prior, seed,
                                  max_proposals=max_proposals)[0]
