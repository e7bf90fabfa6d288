"""Encoder/decoder pairs seen from the evaluation side.

A codec maps a batch to a code (deterministic) and a code back to data
(possibly stochastic, driven by an explicit ``torch.Generator``).
"""

from __future__ import annotations

from typing import Callable

import torch

from dplc.data import NoiseSpec, PriorSpec, as_tensor, make_generator, sample_noise
from dplc.models import ModelHandle, append_noise, parameter_fingerprint
from dplc.quantization import CodeSpec, hard_quantize, sign_corner_spec, voronoi_resample_batch


class Codec:
    rate_bits: float = 0.0
    generator_fingerprint: str | None = None

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, code: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        raise NotImplementedError

    def reconstruct(self, x, seed: int | torch.Generator = 0) -> torch.Tensor:
        x = as_tensor(x)
        return self.decode(self.encode(x), make_generator(seed))


class IdentityCodec(Codec):
    rate_bits = float("inf")

    def encode(self, x):
        return x

    def decode(self, code, gen):
        return code


class LearnedCodec(Codec):
    """``G(B(E(x) + noise))`` with frozen networks in inference mode.

    ``encoder`` is ``None`` at zero rate.  ``noise_dim = 0`` gives the
    deterministic compressive-autoencoder decoder.
    """

    def __init__(self, encoder: ModelHandle | None, mapper: ModelHandle, generator: ModelHandle,
                 rate_bits: float = 0.0):
        self.encoder, self.mapper, self.generator = encoder, mapper, generator
        self.rate_bits = rate_bits
        self.noise_dim = mapper.arch.noise_dim
        for m in (encoder, mapper, generator):
            if m is not None:
                m.eval()
        self.generator_fingerprint = parameter_fingerprint(generator)

    @property
    def stochastic(self) -> bool:
        return self.noise_dim > 0

    def _dtype(self):
        return next(self.generator.parameters()).dtype

    @torch.no_grad()
    def encode(self, x):
        x = as_tensor(x).to(self._dtype())
        if self.encoder is None:
            a = self.mapper.arch
            shape = (x.shape[0], 0) if a.family == "mlp" else (x.shape[0], 0, a.code_hw, a.code_hw)
            return x.new_zeros(shape)
        feats = self.encoder(x)
        return hard_quantize(feats, sign_corner_spec(feats.shape[1:])).embedded

    @torch.no_grad()
    def decode(self, code, gen):
        noise = None
        if self.noise_dim:
            noise = sample_noise(NoiseSpec(self.noise_dim), code.shape[0], gen, code.dtype).data
        z = self.mapper(append_noise(code, noise, self.mapper.arch).reshape(
            (code.shape[0],) + self.mapper.in_shape))
        return self.generator(z)


class VoronoiCodec(Codec):
    """Quantize a latent embedding of ``x``, decode by resampling inside the cell.

    ``B(i) ~ P_Z( . | cell i)``, so ``B(E(X))`` follows the prior whenever the
    latent embedding of the data does.
    """

    def __init__(self, spec: CodeSpec, prior: PriorSpec,
                 embed: Callable[[torch.Tensor], torch.Tensor],
                 generator: Callable[[torch.Tensor], torch.Tensor],
                 generator_fingerprint: str | None = None):
        self.spec, self.prior = spec, prior
        self.embed, self.generator = embed, generator
        self.rate_bits = float(spec.rate)
        self.generator_fingerprint = generator_fingerprint
        if generator_fingerprint is None and isinstance(generator, ModelHandle):
            self.generator_fingerprint = parameter_fingerprint(generator)

    def encode(self, x):
        z = self.embed(as_tensor(x))
        if self.spec.rate == 0:
            return torch.zeros(z.shape[0], dtype=torch.long)
        return hard_quantize(z, self.spec).indices

    def decode(self, code, gen):
        if self.spec.rate == 0:
            from dplc.data import sample_prior
            z = sample_prior(self.prior, code.shape[0], gen, torch.float64).data
        else:
            z = voronoi_resample_batch(self.spec, code, self.prior, gen)
        with torch.no_grad():
            return self.generator(z)
