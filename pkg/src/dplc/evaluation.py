"""Metrics, rate sweeps, and checks of the rate-distortion theory.

Distortion in training is the unsquared Euclidean norm; the reported MSE is
squared error averaged over dimensions.  PV is averaged over every output
element (pixels and channels for images).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from dplc.codecs import Codec
from dplc.data import (DatasetHandle, PriorSpec, as_tensor, derive_seed, make_generator,
                       pixel_count, sample_prior)
from dplc.divergences import (GaussianStats, KernelSpec, embed_and_fit, frechet_distance,
                              imq_gram)
from dplc.models import parameter_fingerprint
from dplc.quantization import build_hypercube_quantizer, hard_quantize, hypercube_error_bound

logger = logging.getLogger(__name__)

METHOD_TAGS = ("dplc-wae", "dplc-wgan-gp", "dplc-wpp", "cae", "gc")
CSV_COLUMNS = ("run_id", "method", "rate_bpp", "iteration", "mse", "rfid_surrogate",
               "sfid_surrogate", "pv", "wall_seconds")


@dataclass
class MetricsRecord:
    run_id: str
    method: str
    rate_bpp: float
    iteration: int
    mse: float
    rfid_surrogate: float
    sfid_surrogate: float
    pv: float
    wall_seconds: float = 0.0

    def __post_init__(self):
        for name in ("rate_bpp", "mse", "rfid_surrogate", "sfid_surrogate", "pv", "wall_seconds"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")
            # Fréchet values may come out a hair below zero from rounding
            if v < 0:
                if v > -1e-9:
                    v = 0.0
                else:
                    raise ValueError(f"{name} is negative: {v}")
            setattr(self, name, v)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass
class SweepReport:
    records: list[MetricsRecord]
    tags: tuple[str, ...]
    rates_bits: tuple[float, ...] = ()

    def __post_init__(self):
        seen = set()
        for tag in self.tags:
            rates = [r.rate_bpp for r in self.records if r.method == tag]
            if any(b <= a for a, b in zip(rates, rates[1:])):
                raise ValueError(f"rates for {tag} are not strictly increasing")
        for r in self.records:
            key = (r.method, r.rate_bpp)
            if key in seen:
                raise ValueError(f"duplicate record for {key}")
            seen.add(key)

    def series(self, tag: str, metric: str) -> list[float]:
        return [getattr(r, metric) for r in self.records if r.method == tag]

    def rates(self, tag: str) -> list[float]:
        return self.series(tag, "rate_bpp")


def nonincreasing(values: Sequence[float], rel_slack: float = 0.0, abs_slack: float = 0.0) -> bool:
    """Each value is at most ``(1 + rel_slack) * previous + abs_slack``."""
    return all(b <= a * (1 + rel_slack) + abs_slack for a, b in zip(values, values[1:]))


# --------------------------------------------------------------------------
# metrics


def _eval_samples(dataset: DatasetHandle | torch.Tensor, n: int | None) -> torch.Tensor:
    x = dataset.data if isinstance(dataset, DatasetHandle) else as_tensor(dataset)
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    return x if n is None else x[:n]


def _reconstruct(codec: Codec, x: torch.Tensor, gen: torch.Generator, chunk: int = 4096
                 ) -> torch.Tensor:
    return torch.cat([codec.decode(codec.encode(part), gen) for part in x.split(chunk)])


def eval_mse(codec: Codec, dataset, n: int | None = None, seed: int = 0) -> float:
    """Mean squared error per dimension, one stochastic reconstruction per sample."""
    if n is not None and n < 1:
        raise ValueError("n must be at least 1")
    x = _eval_samples(dataset, n)
    x_hat = _reconstruct(codec, x, make_generator(derive_seed(seed, "mse")))
    return float(((x.double() - x_hat.double()) ** 2).mean())


def eval_pv(codec: Codec, dataset, n_codes: int = 256, n_draws: int = 100, seed: int = 0
            ) -> float:
    """Mean conditional variance of the decoder output for fixed codes.

    Every one of ``n_codes`` samples is encoded once and decoded ``n_draws``
    times; per-element variance uses the ``n_draws - 1`` divisor.
    """
    if n_draws < 2:
        raise ValueError("n_draws must be at least 2")
    x = _eval_samples(dataset, n_codes)
    code = codec.encode(x)
    gen = make_generator(derive_seed(seed, "pv"))
    draws = torch.stack([codec.decode(code, gen).double() for _ in range(n_draws)])
    return float(draws.var(dim=0, unbiased=True).mean())


def eval_fid_surrogate(reference: GaussianStats, candidate, embedder: Callable | None = None
                       ) -> float:
    return frechet_distance(reference, embed_and_fit(candidate, embedder))


def generator_samples(generator: Callable, prior: PriorSpec, n: int, seed: int,
                      chunk: int = 4096) -> torch.Tensor:
    dtype = torch.float32
    if isinstance(generator, torch.nn.Module):
        dtype = next(generator.parameters()).dtype
    z = sample_prior(prior, n, derive_seed(seed, "sfid"), dtype).data
    with torch.no_grad():
        return torch.cat([generator(part) for part in z.split(chunk)])


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepCell:
    """What a sweep needs for one (method, rate) pair."""

    codec: Codec
    iteration: int = 0
    sampler: Callable[[int, int], torch.Tensor] | None = None  # (n, seed) -> samples


def run_rate_sweep(tags: Sequence[str], rates_bits: Sequence[float], test_set: DatasetHandle,
                   provider: Callable[[str, float], SweepCell], run_id: str = "run",
                   n_eval: int = 10_000, n_pv_codes: int = 256, n_pv_draws: int = 100,
                   embedder: Callable | None = None, seed: int = 0,
                   clock: Callable[[], float] | None = None) -> SweepReport:
    """Evaluate MSE, PV and the Fréchet surrogates for every (tag, rate).

    ``provider`` returns the trained codec (and optionally a sampler for the
    sample score) for a cell; it may train on demand.  Without a sampler the
    sample score decodes uniformly random codes.  Rates are given in bits per
    sample and converted to bpp with the data's pixel count.
    """
    import time
    clock = clock or time.perf_counter
    for t in tags:
        if t not in METHOD_TAGS:
            raise ValueError(f"unknown method tag {t!r}")
    rates_bits = sorted(float(r) for r in rates_bits)
    x = _eval_samples(test_set, n_eval)
    reference = embed_and_fit(x, embedder)
    pixels = pixel_count(test_set.sample_shape)
    records = []
    for tag in tags:
        for rate in rates_bits:
            start = clock()
            cell = provider(tag, rate)
            cell_seed = derive_seed(seed, tag, str(rate))
            recon = _reconstruct(cell.codec, x, make_generator(derive_seed(cell_seed, "rfid")))
            if cell.sampler is not None:
                samples = cell.sampler(len(x), cell_seed)
            else:
                samples = random_code_samples(cell.codec, x, cell_seed)
            records.append(MetricsRecord(
                run_id, tag, rate / pixels, cell.iteration,
                mse=eval_mse(cell.codec, x, seed=cell_seed),
                rfid_surrogate=eval_fid_surrogate(reference, recon, embedder),
                sfid_surrogate=eval_fid_surrogate(reference, samples, embedder),
                pv=eval_pv(cell.codec, x, n_pv_codes, n_pv_draws, cell_seed),
                wall_seconds=clock() - start))
    return SweepReport(records, tuple(tags), tuple(rates_bits))


def random_code_samples(codec: Codec, x: torch.Tensor, seed: int) -> torch.Tensor:
    """Decode codes whose bits are flipped at random (decoder as a sampler)."""
    code = codec.encode(x)
    gen = make_generator(derive_seed(seed, "random-code"))
    if code.numel():
        code = torch.where(torch.rand(code.shape, generator=gen) < 0.5, -1.0, 1.0).to(code.dtype)
    return codec.decode(code, gen)


# --------------------------------------------------------------------------
# theory harness

SLOPE_TOLERANCE = {1: 0.15, 2: 0.1, 3: 0.1}


@dataclass
class Theorem1Report:
    m: int
    rates: list[int]
    distortions: list[float]
    bounds: list[float]
    flags: list[bool]
    slope: float
    expected_slope: float
    tolerance: float

    @property
    def slope_ok(self) -> bool:
        return abs(self.slope - self.expected_slope) <= self.tolerance

    @property
    def decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.distortions, self.distortions[1:]))

    @property
    def passed(self) -> bool:
        return all(self.flags) and self.slope_ok and self.decreasing

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(slope_ok=self.slope_ok, decreasing=self.decreasing, passed=self.passed)
        return d


def verify_theorem1(m: int, k_list: Sequence[int], n: int = 100_000, seed: int = 0
                    ) -> Theorem1Report:
    """Measure the distortion gap of the hypercube construction.

    Prior ``U[0,1]^m``, generator = identity, encoder = hypercube quantizer at
    ``R = k m`` bits, mapper = uniform draw inside the cell.  The data and the
    generated distribution coincide, so the mean Euclidean distortion is the
    whole gap; it should fall like ``2^(-R/m)`` and stay below
    ``sqrt(m) 2^(-R/m)``.
    """
    if m not in SLOPE_TOLERANCE:
        raise ValueError(f"m must be one of {sorted(SLOPE_TOLERANCE)}, got {m}")
    if n < 10_000:
        raise ValueError("n must be at least 10^4")
    ks = [int(k) for k in k_list]
    if len(ks) < 2 or any(k < 1 for k in ks):
        raise ValueError("need at least two positive k values")
    from dplc.quantization import voronoi_resample_batch
    prior = PriorSpec("uniform-hypercube", m)
    gen = make_generator(derive_seed(seed, "theorem1"))
    x = sample_prior(prior, n, gen, torch.float64).data
    rates, dist, bounds = [], [], []
    for k in ks:
        rate = k * m
        spec = build_hypercube_quantizer(m, rate)
        idx = hard_quantize(x, spec).indices
        x_hat = voronoi_resample_batch(spec, idx, prior, gen)
        rates.append(rate)
        dist.append(float((x - x_hat).norm(dim=1).mean()))
        bounds.append(hypercube_error_bound(m, rate))
    slope = float(np.polyfit(rates, np.log2(dist), 1)[0])
    flags = [d <= b for d, b in zip(dist, bounds)]
    return Theorem1Report(m, rates, dist, bounds, flags, slope, -1.0 / m, SLOPE_TOLERANCE[m])


# --------------------------------------------------------------------------
# distribution invariance


def _kernel_products(a: torch.Tensor, b: torch.Tensor, w_b: torch.Tensor, spec: KernelSpec,
                     chunk: int = 2048) -> tuple[torch.Tensor, torch.Tensor]:
    """``K(a, b) @ w_b`` computed in row chunks."""
    out = []
    for part in a.split(chunk):
        out.append(imq_gram(part, b, spec) @ w_b)
    return torch.cat(out)


def _weighted_mmd(xa, xb, wa, wb, spec: KernelSpec, self_a=None, self_b=None):
    """Biased (V-statistic) MMD^2 for each column of the weight matrices.

    ``wa`` (na, r) and ``wb`` (nb, r) hold per-replicate sample weights
    summing to one; precomputed ``K(a,a) wa`` / ``K(b,b) wb`` may be passed.
    """
    kaa = self_a if self_a is not None else _kernel_products(xa, xa, wa, spec)
    kbb = self_b if self_b is not None else _kernel_products(xb, xb, wb, spec)
    kab = _kernel_products(xa, xb, wb, spec)
    return (wa * kaa).sum(0) + (wb * kbb).sum(0) - 2 * (wa * kab).sum(0)


def _mmd_u(xa, xb, spec: KernelSpec, chunk: int = 2048) -> float:
    """Unbiased MMD^2 between two sample sets of any sizes, chunked."""
    na, nb = len(xa), len(xb)

    def total(a, b):
        return sum(float(imq_gram(p, b, spec).sum()) for p in a.split(chunk))

    # k(a, a) = 1 for the IMQ kernel, so the diagonal contributes n
    saa = (total(xa, xa) - na) / (na * (na - 1))
    sbb = (total(xb, xb) - nb) / (nb * (nb - 1))
    return saa + sbb - 2 * total(xa, xb) / (na * nb)


@dataclass
class InvarianceReport:
    rates: list[float]
    mmd_recon: list[float]
    mmd_generator: float
    standard_errors: list[float]
    within: list[bool]
    frechet_recon: list[float] = field(default_factory=list)
    frechet_generator: float = 0.0
    sigmas: float = 3.0

    @property
    def passed(self) -> bool:
        return all(self.within)


def _bootstrap_weights(n: int, reps: int, gen: torch.Generator) -> torch.Tensor:
    idx = torch.randint(n, (reps, n), generator=gen)
    counts = torch.zeros(reps, n, dtype=torch.float64).scatter_add_(
        1, idx, torch.ones(reps, n, dtype=torch.float64))
    return (counts / n).T.contiguous()


def check_distribution_invariance(generator: Callable, codecs: dict[float, Codec],
                                  data: torch.Tensor, reference: torch.Tensor,
                                  prior: PriorSpec, n: int = 10_000, seed: int = 0,
                                  n_boot: int = 200, sigmas: float = 3.0,
                                  kernel: KernelSpec | None = None) -> InvarianceReport:
    """Compare MMD(reconstructions, reference) with MMD(G(Z), reference) per rate.

    ``data`` is encoded and decoded; ``reference`` is an independent sample of
    the same distribution.  The standard error of each difference comes from
    a paired bootstrap: reference weights are shared, reconstruction and
    generator weights are drawn independently.
    """
    fingerprints = {c.generator_fingerprint for c in codecs.values()}
    if isinstance(generator, torch.nn.Module):
        fingerprints.add(parameter_fingerprint(generator))
    fingerprints.discard(None)
    if len(fingerprints) > 1:
        raise ValueError("codecs do not share the same generator")
    x = as_tensor(data)[:n].double()
    ref = as_tensor(reference)[:n].double()
    if len(x) < 2 or len(ref) < 2:
        raise ValueError("need at least two samples")
    kernel = kernel or KernelSpec.for_prior(ref[0].numel())
    gen = make_generator(derive_seed(seed, "invariance"))
    g = generator_samples(generator, prior, len(x), derive_seed(seed, "generator")).double()
    g = g.reshape(len(g), -1)
    ref = ref.reshape(len(ref), -1)
    w_ref = _bootstrap_weights(len(ref), n_boot, gen)
    k_ref = _kernel_products(ref, ref, w_ref, kernel)
    w_g = _bootstrap_weights(len(g), n_boot, gen)
    boot_g = _weighted_mmd(g, ref, w_g, w_ref, kernel, self_b=k_ref)
    mmd_g = _mmd_u(g, ref, kernel)
    ref_stats = embed_and_fit(ref)
    fd_g = frechet_distance(ref_stats, embed_and_fit(g))
    rates, mmd_r, ses, within, fds = [], [], [], [], []
    for rate in sorted(codecs):
        codec = codecs[rate]
        r = _reconstruct(codec, x, make_generator(derive_seed(seed, "recon", str(rate))))
        r = r.double().reshape(len(r), -1)
        w_r = _bootstrap_weights(len(r), n_boot, gen)
        boot_r = _weighted_mmd(r, ref, w_r, w_ref, kernel, self_b=k_ref)
        se = float((boot_r - boot_g).std(unbiased=True))
        value = _mmd_u(r, ref, kernel)
        rates.append(float(rate))
        mmd_r.append(value)
        ses.append(se)
        within.append(abs(value - mmd_g) <= sigmas * se)
        fds.append(frechet_distance(ref_stats, embed_and_fit(r)))
    return InvarianceReport(rates, mmd_r, mmd_g, ses, within, fds, fd_g, sigmas)
