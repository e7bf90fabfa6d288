import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dplc.data import PriorSpec, sample_prior
from dplc.divergences import KernelSpec
from dplc.evaluation import _mmd_u
from dplc.quantization import (CodeSpec, SamplingError, bitrate_bpp, build_hypercube_quantizer,
                               fit_centers, hard_quantize, hypercube_error_bound,
                               sign_corner_spec, soft_assignment, soft_quantize,
                               voronoi_resample, voronoi_resample_batch)

finite = st.floats(-5, 5, allow_nan=False, width=64)


class TestHardQuantize:
    def test_sign_corners(self):
        q = hard_quantize(torch.tensor([[0.3, -0.7]]), sign_corner_spec([2]))
        np.testing.assert_array_equal(q.embedded.numpy(), [[1.0, -1.0]])
        np.testing.assert_array_equal(q.indices.numpy(), [[1, 0]])

    def test_zero_ties_to_lowest_index(self):
        q = hard_quantize(torch.tensor([[0.0, 0.5, -0.0]]), sign_corner_spec([3]))
        np.testing.assert_array_equal(q.embedded.numpy(), [[-1.0, 1.0, -1.0]])

    def test_explicit_centers(self):
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
        q = hard_quantize(torch.tensor([[0.4, 0.4], [0.6, 0.6]]), spec)
        np.testing.assert_array_equal(q.indices.numpy(), [0, 1])

    def test_explicit_tie_lowest_index(self):
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[1.0], [-1.0]]))
        assert hard_quantize(torch.tensor([[0.0]]), spec).indices.item() == 0

    def test_hypercube_boundary_goes_low(self):
        spec = build_hypercube_quantizer(1, 1)
        q = hard_quantize(torch.tensor([[0.5], [0.5000001], [0.0], [1.0]], dtype=torch.float64),
                          spec)
        np.testing.assert_array_equal(q.indices.numpy(), [0, 1, 0, 1])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            hard_quantize(torch.zeros(4, 3), sign_corner_spec([2]))
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[0.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(ValueError):
            hard_quantize(torch.zeros(4, 3), spec)

    @given(arrays(np.float64, (6, 3), elements=finite))
    @settings(max_examples=50, deadline=None)
    def test_idempotent_sign(self, z):
        spec = sign_corner_spec([3])
        q = hard_quantize(torch.from_numpy(z), spec)
        again = hard_quantize(q.embedded, spec)
        assert torch.equal(q.indices, again.indices)

    @given(arrays(np.float64, (8, 2), elements=finite), st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_idempotent_and_nearest_explicit(self, z, seed):
        centers = torch.randn(4, 2, generator=torch.Generator().manual_seed(seed),
                              dtype=torch.float64)
        spec = CodeSpec("explicit-centers", 2, centers)
        zt = torch.from_numpy(z)
        q = hard_quantize(zt, spec)
        assert torch.equal(hard_quantize(q.embedded, spec).indices, q.indices)
        d = torch.cdist(zt, centers)
        np.testing.assert_allclose(d.gather(1, q.indices[:, None])[:, 0].numpy(),
                                   d.min(1).values.numpy())
        assert torch.equal(q.embedded, centers[q.indices])

    @given(arrays(np.float64, (10, 2), elements=st.floats(0, 1, width=64)),
           st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_hypercube_partition(self, z, k):
        spec = build_hypercube_quantizer(2, 2 * k)
        q = hard_quantize(torch.from_numpy(z), spec)
        assert ((q.indices >= 0) & (q.indices < 2 ** spec.rate)).all()
        table = spec.center_table()
        assert torch.equal(q.embedded, table[q.indices])
        assert torch.equal(hard_quantize(q.embedded, spec).indices, q.indices)


class TestSoftQuantize:
    @given(arrays(np.float64, (5, 4), elements=finite), st.floats(0.01, 10))
    @settings(max_examples=50, deadline=None)
    def test_forward_equals_hard_bit_exact(self, z, tau):
        spec = sign_corner_spec([4])
        zt = torch.from_numpy(z).requires_grad_(True)
        soft = soft_quantize(zt, spec, tau)
        hard = hard_quantize(zt, spec)
        assert torch.equal(soft.surrogate.detach(), hard.embedded)
        assert torch.equal(soft.indices, hard.indices)

    def test_forward_equals_hard_explicit_and_hypercube(self):
        z = torch.rand(50, 2, dtype=torch.float64)
        for spec in (build_hypercube_quantizer(2, 4),
                     CodeSpec("explicit-centers", 2, torch.rand(4, 2, dtype=torch.float64))):
            s = soft_quantize(z.clone().requires_grad_(True), spec, 0.5)
            assert torch.equal(s.surrogate.detach(), hard_quantize(z, spec).embedded)

    def test_gradient_matches_finite_difference(self):
        spec = sign_corner_spec([1])
        z = torch.tensor([[0.5]], dtype=torch.float64, requires_grad=True)
        soft_quantize(z, spec, 1.0).surrogate.sum().backward()

        def soft(v):
            w = np.exp(-np.array([(v + 1) ** 2, (v - 1) ** 2]))
            return float((w / w.sum()) @ np.array([-1.0, 1.0]))

        h = 1e-5
        fd = (soft(0.5 + h) - soft(0.5 - h)) / (2 * h)
        assert abs(z.grad.item() - fd) < 1e-5
        np.testing.assert_allclose(z.grad.item(), 2 / np.cosh(1.0) ** 2, rtol=1e-12)

    def test_sign_soft_matches_softmax_average(self):
        z = torch.linspace(-2, 2, 41, dtype=torch.float64)[:, None]
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[-1.0], [1.0]]))
        np.testing.assert_allclose(soft_assignment(z, sign_corner_spec([1]), 0.7).numpy(),
                                   soft_assignment(z, spec, 0.7).numpy(), atol=1e-14)

    def test_zero_temperature_limit(self):
        z = torch.cat([torch.linspace(-3, -0.1, 50), torch.linspace(0.1, 3, 50)]).double()[:, None]
        for spec in (sign_corner_spec([1]),
                     CodeSpec("explicit-centers", 1, torch.tensor([[-1.0], [1.0]]))):
            gap = (soft_assignment(z, spec, 1e-3) - hard_quantize(z, spec).embedded).abs().max()
            assert gap < 1e-6

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_temperature(self, tau):
        with pytest.raises(ValueError):
            soft_quantize(torch.zeros(1, 1), sign_corner_spec([1]), tau)


class TestBitrate:
    def test_image_grid_points(self):
        assert bitrate_bpp((2, 4, 4), (3, 64, 64)) == 0.0078125
        assert bitrate_bpp((128, 4, 4), (3, 64, 64)) == 0.5

    def test_zero_rate(self):
        assert bitrate_bpp((0, 4, 4), (3, 64, 64)) == 0.0
        assert bitrate_bpp((), (3, 64, 64)) == 0.0

    def test_vector_data_counts_bits_per_sample(self):
        assert bitrate_bpp((8,), (2,)) == 8.0

    def test_invalid_shapes(self):
        with pytest.raises(ValueError):
            bitrate_bpp((2,), (3, 0, 64))
        with pytest.raises(ValueError):
            bitrate_bpp((2,), ())


class TestFitCenters:
    def test_two_centers_half_normal_mean(self):
        z = sample_prior(PriorSpec("standard-normal", 1), 200_000, 0).data
        c = np.sort(fit_centers(z, 2, seed=0).centers[:, 0].numpy())
        np.testing.assert_allclose(c, [-math.sqrt(2 / math.pi), math.sqrt(2 / math.pi)],
                                   atol=0.01)

    def test_one_center_is_mean(self):
        z = sample_prior(PriorSpec("standard-normal", 2), 10_000, 1).data
        c = fit_centers(z, 1).centers
        np.testing.assert_allclose(c[0].numpy(), z.double().mean(0).numpy(), atol=1e-12)

    def test_uniform_two_centers(self):
        z = sample_prior(PriorSpec("uniform-hypercube", 1), 100_000, 2).data
        c = np.sort(fit_centers(z, 2, seed=1).centers[:, 0].numpy())
        np.testing.assert_allclose(c, [0.25, 0.75], atol=0.01)

    def test_history_nonincreasing_and_distinct(self):
        z = sample_prior(PriorSpec("standard-normal", 2), 5000, 3).data
        spec, hist = fit_centers(z, 16, seed=3, return_history=True)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
        assert torch.pdist(spec.centers).min() > 0

    def test_more_centers_never_worse(self):
        z = sample_prior(PriorSpec("standard-normal", 2), 5000, 4).data.double()
        errs = []
        for r in range(0, 5):
            spec = fit_centers(z, 2**r, seed=0)
            errs.append(float((z - hard_quantize(z, spec).embedded).norm(dim=1).mean()))
        assert all(b <= a for a, b in zip(errs, errs[1:]))

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_centers(torch.randn(3, 1), 4)
        with pytest.raises(ValueError):
            fit_centers(torch.randn(30, 1), 3)


class TestHypercube:
    def test_centers(self):
        c = build_hypercube_quantizer(2, 2).center_table()
        expected = {(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)}
        assert {tuple(r) for r in c.tolist()} == expected

    def test_mean_distance_to_center(self):
        spec = build_hypercube_quantizer(2, 2)
        z = sample_prior(PriorSpec("uniform-hypercube", 2), 200_000, 0, torch.float64).data
        d = (z - hard_quantize(z, spec).embedded).norm(dim=1).mean().item()
        assert abs(d - 0.5 * 0.38259) < 2e-3

    @pytest.mark.parametrize("m,rate", [(1, 1), (1, 5), (2, 2), (2, 6), (3, 3), (3, 9)])
    def test_worst_case_bound(self, m, rate):
        spec = build_hypercube_quantizer(m, rate)
        prior = PriorSpec("uniform-hypercube", m)
        z = sample_prior(prior, 20_000, rate, torch.float64).data
        idx = hard_quantize(z, spec).indices
        z_hat = voronoi_resample_batch(spec, idx, prior, 1)
        assert (z - z_hat).norm(dim=1).max() <= hypercube_error_bound(m, rate)
        assert (z - hard_quantize(z, spec).embedded).norm(dim=1).max() <= \
            hypercube_error_bound(m, rate)

    def test_rate_not_multiple(self):
        with pytest.raises(ValueError):
            build_hypercube_quantizer(2, 3)


class TestVoronoiResample:
    def test_half_normal_cell(self):
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[-1.0], [1.0]]))
        prior = PriorSpec("standard-normal", 1)
        z = voronoi_resample_batch(spec, torch.ones(10_000, dtype=torch.long), prior, 0)
        assert (z >= 0).all()
        assert abs(z.mean().item() - math.sqrt(2 / math.pi)) < 0.01

    def test_hypercube_cell_uniform(self):
        spec = build_hypercube_quantizer(2, 2)
        prior = PriorSpec("uniform-hypercube", 2)
        z = voronoi_resample_batch(spec, torch.zeros(10_000, dtype=torch.long), prior, 0).numpy()
        assert z.min() >= 0 and z.max() <= 0.5
        for col in z.T:
            # Kolmogorov-Smirnov against U[0, 0.5]
            s = np.sort(col) / 0.5
            n = len(s)
            d = max((np.arange(1, n + 1) / n - s).max(), (s - np.arange(n) / n).max())
            assert d < 1.63 / math.sqrt(n)  # p > 0.01

    @pytest.mark.parametrize("spec", [
        build_hypercube_quantizer(2, 4),
        CodeSpec("explicit-centers", 2, torch.tensor([[0.0, 0.0], [1.5, 0.0], [0.0, 1.5],
                                                      [-1.0, -1.0]])),
    ])
    def test_pushforward_preserves_prior(self, spec):
        family = "uniform-hypercube" if spec.mode == "hypercube" else "standard-normal"
        prior = PriorSpec(family, 2)
        n = 2000
        z = sample_prior(prior, n, 0, torch.float64).data
        z_hat = voronoi_resample_batch(spec, hard_quantize(z, spec).indices, prior, 1)
        ref = sample_prior(prior, n, 2, torch.float64).data
        kernel = KernelSpec.for_prior(2)
        # standard error of the unbiased MMD under the null, from fresh null pairs
        null = [_mmd_u(sample_prior(prior, n, 10 + i, torch.float64).data,
                       sample_prior(prior, n, 50 + i, torch.float64).data, kernel)
                for i in range(12)]
        se = float(np.std(null, ddof=1))
        assert abs(_mmd_u(z_hat, ref, kernel)) < 3 * se

    def test_sign_corner_cells(self):
        prior = PriorSpec("standard-normal", 3)
        bits = torch.tensor([[1, 0, 1]] * 500)
        z = voronoi_resample_batch(sign_corner_spec([3]), bits, prior, 0)
        assert (z[:, 0] > 0).all() and (z[:, 1] <= 0).all() and (z[:, 2] > 0).all()

    def test_single_draw_and_determinism(self):
        spec = build_hypercube_quantizer(1, 2)
        prior = PriorSpec("uniform-hypercube", 1)
        a = voronoi_resample(spec, 3, prior, 9)
        assert 0.75 <= a.item() <= 1.0
        assert torch.equal(a, voronoi_resample(spec, 3, prior, 9))

    def test_budget_exhausted(self):
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[0.0], [40.0]]))
        with pytest.raises(SamplingError):
            voronoi_resample(spec, 1, PriorSpec("standard-normal", 1), 0, max_proposals=10_000)

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            voronoi_resample(build_hypercube_quantizer(1, 1), 2,
                             PriorSpec("uniform-hypercube", 1), 0)


class TestCodeSpec:
    def test_round_trip(self):
        spec = CodeSpec("explicit-centers", 1, torch.tensor([[0.0, 1.0], [2.0, 3.0]]))
        back = CodeSpec.from_dict(spec.to_dict())
        assert torch.equal(back.centers, spec.centers) and back.rate == 1

    def test_invariants(self):
        with pytest.raises(ValueError):
            CodeSpec("explicit-centers", 1, torch.tensor([[1.0], [1.0]]))
        with pytest.raises(ValueError):
            CodeSpec("explicit-centers", 2, torch.tensor([[1.0], [2.0]]))
        with pytest.raises(ValueError):
            CodeSpec("hypercube", 3, dim=2)
        assert sign_corner_spec([2, 4, 4]).rate == 32
