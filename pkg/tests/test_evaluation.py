import math

import numpy as np
import pytest
import torch

from dplc.codecs import Codec, IdentityCodec, LearnedCodec, VoronoiCodec
from dplc.data import DatasetHandle, PriorSpec, make_synthetic_dataset, sample_prior
from dplc.divergences import embed_and_fit
from dplc.evaluation import (CSV_COLUMNS, MetricsRecord, SweepCell, SweepReport,
                             check_distribution_invariance, eval_fid_surrogate, eval_mse,
                             eval_pv, nonincreasing, random_code_samples, run_rate_sweep,
                             verify_theorem1)
from dplc.models import ArchConfig, build_model
from dplc.quantization import fit_centers, hard_quantize

NORMAL2 = PriorSpec("standard-normal", 2)


class ZeroCodec(Codec):
    def encode(self, x):
        return torch.zeros(x.shape[0], 0)

    def decode(self, code, gen):
        return torch.zeros(code.shape[0], 2, dtype=torch.float64)


class UniformNoiseCodec(Codec):
    """Ignores the code and returns U[0,1]^2 draws."""

    def encode(self, x):
        return torch.zeros(x.shape[0], 0)

    def decode(self, code, gen):
        return torch.rand(code.shape[0], 2, generator=gen, dtype=torch.float64)


class NoisyIdentityCodec(Codec):
    """x + sigma * noise, sigma halving with every bit."""

    def __init__(self, rate_bits):
        self.rate_bits = rate_bits
        self.sigma = 2.0 ** (-rate_bits)

    def encode(self, x):
        return x.double()

    def decode(self, code, gen):
        return code + self.sigma * torch.randn(code.shape, generator=gen, dtype=code.dtype)


class CellCenterCodec(Codec):
    """Deterministic decoding to the codebook center of each cell."""

    def __init__(self, spec, generator):
        self.spec, self.generator = spec, generator

    def encode(self, x):
        return hard_quantize(x.double(), self.spec).indices

    def decode(self, code, gen):
        return self.generator(self.spec.centers[code])


def normal(n, seed, dim=2):
    return sample_prior(PriorSpec("standard-normal", dim), n, seed, torch.float64).data


class TestMSE:
    def test_identity_is_zero(self):
        assert eval_mse(IdentityCodec(), normal(100, 0)) == 0.0

    def test_zero_decoder(self):
        n = 10_000
        mse = eval_mse(ZeroCodec(), normal(n, 1))
        # E x^2 = 1, Var x^2 = 2 over 2n entries
        assert abs(mse - 1.0) < 3 * math.sqrt(2 / (2 * n))

    def test_noise_level(self):
        mse = eval_mse(NoisyIdentityCodec(1), normal(5000, 2))
        assert abs(mse - 0.25) < 3 * 0.25 * math.sqrt(2 / 10_000)

    def test_subset_and_errors(self):
        x = normal(50, 3)
        assert eval_mse(ZeroCodec(), x, n=10) == pytest.approx(float((x[:10] ** 2).mean()))
        with pytest.raises(ValueError):
            eval_mse(ZeroCodec(), x, n=0)
        with pytest.raises(ValueError):
            eval_mse(ZeroCodec(), x[:0])

    def test_seeded(self):
        x = normal(200, 4)
        c = NoisyIdentityCodec(0)
        assert eval_mse(c, x, seed=3) == eval_mse(c, x, seed=3)
        assert eval_mse(c, x, seed=3) != eval_mse(c, x, seed=4)


class TestPV:
    def test_uniform_decoder(self):
        n_codes, n_draws = 256, 100
        pv = eval_pv(UniformNoiseCodec(), normal(n_codes, 0), n_codes, n_draws)
        # standard error of the unbiased variance of U[0,1] from n draws
        mu4, s2 = 1 / 80, 1 / 12
        se_one = math.sqrt((mu4 - s2**2 * (n_draws - 3) / (n_draws - 1)) / n_draws)
        assert abs(pv - 1 / 12) < 3 * se_one / math.sqrt(2 * n_codes)

    def test_deterministic_decoder_is_zero(self):
        assert eval_pv(IdentityCodec(), normal(64, 0), 64, 10) == 0.0

    def test_gaussian_noise(self):
        pv = eval_pv(NoisyIdentityCodec(1), normal(256, 5), 256, 100)
        assert abs(pv - 0.25) < 0.01

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            eval_pv(UniformNoiseCodec(), normal(8, 0), 8, 1)


class TestFrechetSurrogate:
    def test_null_versus_shift(self):
        ref = embed_and_fit(normal(20_000, 0))
        null = eval_fid_surrogate(ref, normal(20_000, 1))
        shifted = eval_fid_surrogate(ref, normal(20_000, 2) + torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert null < 2e-3
        assert abs(shifted - 1.0) < 0.05

    def test_order_invariance(self):
        ref = embed_and_fit(normal(1000, 0))
        x = normal(1000, 1) * 1.5
        perm = torch.randperm(1000, generator=torch.Generator().manual_seed(0))
        assert eval_fid_surrogate(ref, x) == pytest.approx(eval_fid_surrogate(ref, x[perm]), rel=1e-9)


def _cell(tag, rate):
    if tag == "cae":
        return SweepCell(IdentityCodec() if rate >= 8 else _Rounding(rate))
    return SweepCell(NoisyIdentityCodec(rate), iteration=7)


class _Rounding(Codec):
    def __init__(self, rate):
        self.step = 2.0 ** (-rate)

    def encode(self, x):
        return torch.round(x.double() / self.step)

    def decode(self, code, gen):
        return code * self.step


@pytest.fixture(scope="module")
def report():
    ring = make_synthetic_dataset("rings", None, 2000, 0)
    ticks = iter(range(1000))
    return run_rate_sweep(["dplc-wpp", "cae"], [4, 0, 2, 8], ring, _cell, run_id="r1",
                          n_eval=1000, n_pv_codes=64, n_pv_draws=10,
                          clock=lambda: float(next(ticks)))


class TestRateSweep:
    def test_completeness(self, report):
        assert len(report.records) == 8
        assert report.rates("dplc-wpp") == [0.0, 2.0, 4.0, 8.0]
        for r in report.records:
            assert set(r.row()) == set(CSV_COLUMNS)
            assert r.run_id == "r1" and r.wall_seconds == 1.0
        assert report.series("dplc-wpp", "iteration") == [7] * 4

    def test_trends(self, report):
        assert nonincreasing(report.series("dplc-wpp", "mse"))
        assert nonincreasing(report.series("dplc-wpp", "pv"))
        assert report.series("cae", "pv") == [0.0] * 4
        pv = report.series("dplc-wpp", "pv")
        np.testing.assert_allclose(pv, [1.0, 1 / 16, 1 / 256, 1 / 65536], rtol=0.2)

    def test_bpp_uses_pixel_count(self):
        imgs = torch.zeros(20, 3, 4, 4)
        ds = DatasetHandle("image-folder", imgs)
        rep = run_rate_sweep(["cae"], [48], ds, lambda t, r: SweepCell(IdentityCodec()),
                             n_eval=20, n_pv_codes=4, n_pv_draws=2)
        assert rep.records[0].rate_bpp == 3.0

    def test_unknown_tag(self):
        ring = make_synthetic_dataset("rings", None, 100, 0)
        with pytest.raises(ValueError):
            run_rate_sweep(["bpg"], [0], ring, _cell)

    def test_random_code_samples(self):
        arch = ArchConfig(latent_dim=2, hidden=8, depth=1, res_blocks=1)
        shape = (2,)
        enc = build_model("rate-encoder", arch.for_role("rate-encoder", shape, 3), 1)
        mapper = build_model("mapper", arch.for_role("mapper", shape, 3, False), 2)
        gen = build_model("generator", arch.for_role("generator", shape), 3)
        codec = LearnedCodec(enc, mapper, gen, 3)
        x = normal(64, 0).float()
        a = random_code_samples(codec, x, 0)
        assert a.shape == (64, 2)
        assert torch.equal(a, random_code_samples(codec, x, 0))
        # all 8 codes show up among 64 random draws with overwhelming probability
        assert len(torch.unique(a, dim=0)) == 8


class TestRecords:
    def test_rejects_nan_and_negative(self):
        with pytest.raises(ValueError):
            MetricsRecord("r", "cae", 0.0, 0, float("nan"), 0, 0, 0)
        with pytest.raises(ValueError):
            MetricsRecord("r", "cae", 0.0, 0, 1.0, -0.5, 0, 0)

    def test_tiny_negative_frechet_clipped(self):
        assert MetricsRecord("r", "cae", 0.0, 0, 1.0, -1e-12, 0, 0).rfid_surrogate == 0.0

    def test_report_rates_strictly_increasing(self):
        recs = [MetricsRecord("r", "cae", r, 0, 1.0, 0, 0, 0) for r in (0.0, 2.0, 1.0)]
        with pytest.raises(ValueError):
            SweepReport(recs, ("cae",))
        dup = [MetricsRecord("r", "cae", 1.0, 0, 1.0, 0, 0, 0)] * 2
        with pytest.raises(ValueError):
            SweepReport(dup, ("cae",))

    def test_nonincreasing(self):
        assert nonincreasing([3.0, 3.1, 1.0], rel_slack=0.05)
        assert not nonincreasing([3.0, 3.2, 1.0], rel_slack=0.05)
        assert nonincreasing([1e-6, 2e-6], abs_slack=1e-5)
        assert nonincreasing([])


class TestRateDecay:
    def test_one_dimension_exact(self):
        rep = verify_theorem1(1, [1, 2, 3, 4], n=100_000)
        # uniform in a cell of side L, resampled uniformly in it: E|x - x'| = L / 3
        for r, d in zip(rep.rates, rep.distortions):
            L = 2.0 ** -r
            se = L * math.sqrt(1 / 18) / math.sqrt(100_000)
            assert abs(d - L / 3) < 3 * se
        assert rep.passed and all(rep.flags)

    def test_two_dimensions(self):
        rep = verify_theorem1(2, [1, 2, 3], n=20_000)
        assert rep.passed
        assert rep.rates == [2, 4, 6]
        assert abs(rep.slope + 0.5) <= 0.1

    @pytest.mark.parametrize("args", [(0, [1, 2]), (4, [1, 2]), (1, [1]), (1, [0, 1])])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            verify_theorem1(*args)

    def test_minimum_n(self):
        with pytest.raises(ValueError):
            verify_theorem1(1, [1, 2], n=999)

    def test_report_dict(self):
        d = verify_theorem1(1, [1, 2], n=10_000).to_dict()
        assert {"slope", "flags", "passed", "bounds"} <= set(d)


def _affine(z):
    return 0.5 * z + torch.tensor([1.0, -1.0], dtype=z.dtype)


def _affine_inv(x):
    return (x.double() - torch.tensor([1.0, -1.0], dtype=torch.float64)) / 0.5


def _g_star(z):
    return torch.tanh(z.double()) * 1.5


class TestDistributionInvariance:
    N = 1500

    def _codecs(self, rates, cls="voronoi"):
        out = {}
        for r in rates:
            spec = fit_centers(normal(4000, 10 + r), 2**r, seed=r)
            out[r] = (VoronoiCodec(spec, NORMAL2, _affine_inv, _g_star, "g")
                      if cls == "voronoi" else CellCenterCodec(spec, _g_star))
        return out

    def test_voronoi_codec_preserves_distribution(self):
        data, ref = _affine(normal(self.N, 1)), _affine(normal(self.N, 2))
        rep = check_distribution_invariance(_g_star, self._codecs([1, 2]), data, ref, NORMAL2,
                                            n=self.N, n_boot=100)
        assert rep.passed, rep
        assert rep.mmd_generator > 0.05  # G* is far from the data law

    def test_deterministic_centers_fail(self):
        data, ref = _affine(normal(self.N, 1)), _affine(normal(self.N, 2))
        rep = check_distribution_invariance(_g_star, self._codecs([1], "centers"), data, ref,
                                            NORMAL2, n=self.N, n_boot=100)
        assert not rep.passed

    def test_generator_mismatch(self):
        arch = ArchConfig(latent_dim=2, hidden=8, depth=1, res_blocks=1)
        mk = lambda s: LearnedCodec(None, build_model("mapper", arch.for_role("mapper", (2,), 0), 0),
                                    build_model("generator", arch.for_role("generator", (2,)), s))
        x = normal(10, 0).float()
        with pytest.raises(ValueError, match="same generator"):
            check_distribution_invariance(_g_star, {0: mk(1), 1: mk(2)}, x, x, NORMAL2)
