"""Priors, decoder noise, and datasets.

Every sampler is a pure function of ``(spec, b, seed)``.  Components that need
their own random streams derive them from one global seed with
:func:`derive_seed`, which feeds ``(seed, *keys)`` through numpy's
``SeedSequence`` so streams for different keys are independent and stable
across processes.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

SPACES = ("x", "z", "code")
PRIOR_FAMILIES = ("standard-normal", "uniform-hypercube")
DATASET_KINDS = ("gaussian-mixture", "rings", "image-folder")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class DatasetError(RuntimeError):
    pass


def derive_seed(seed: int, *keys: int | str) -> int:
    """Seed for the substream named by ``keys`` under the global ``seed``.

    String keys are hashed with CRC32 so the mapping is stable between runs.
    """
    spawn_key = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    state = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key).generate_state(2)
    return int((int(state[0]) << 31) ^ int(state[1]))


def make_generator(seed: int | torch.Generator) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def _check_count(b: int, name: str = "b") -> None:
    if isinstance(b, bool) or not isinstance(b, (int, np.integer)) or b < 1:
        raise ValueError(f"{name} must be a positive integer, got {b!r}")


@dataclass
class Batch:
    """``b`` samples living in data space, latent space or code space."""

    data: torch.Tensor
    space: str = "x"

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown space tag {self.space!r}")
        if self.data.ndim < 1 or self.data.shape[0] < 1:
            raise ValueError("a batch needs at least one sample")
        if self.data.is_floating_point() and not torch.isfinite(self.data).all():
            raise ValueError("batch contains NaN or Inf entries")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])


def as_tensor(batch: Batch | torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(batch, Batch):
        return batch.data
    if isinstance(batch, np.ndarray):
        return torch.from_numpy(batch)
    return batch


@dataclass(frozen=True)
class PriorSpec:
    family: str = "standard-normal"
    dim: int = 2

    def __post_init__(self):
        if self.family not in PRIOR_FAMILIES:
            raise ValueError(f"unknown prior family {self.family!r}")
        _check_count(self.dim, "dim")


@dataclass(frozen=True)
class NoiseSpec:
    """i.i.d. Uniform[0, 1] noise fed to the stochastic mapper."""

    dim: int

    def __post_init__(self):
        if isinstance(self.dim, bool) or self.dim < 0:
            raise ValueError(f"noise dim must be nonnegative, got {self.dim!r}")


def sample_prior(spec: PriorSpec, b: int, seed: int | torch.Generator,
                 dtype: torch.dtype = torch.float32) -> Batch:
    _check_count(b)
    gen = make_generator(seed)
    if spec.family == "standard-normal":
        data = torch.randn(b, spec.dim, generator=gen, dtype=dtype)
    else:
        data = torch.rand(b, spec.dim, generator=gen, dtype=dtype)
    return Batch(data, "z")


def sample_noise(spec: NoiseSpec, b: int, seed: int | torch.Generator,
                 dtype: torch.dtype = torch.float32) -> Batch:
    _check_count(b)
    gen = make_generator(seed)
    return Batch(torch.rand(b, spec.dim, generator=gen, dtype=dtype), "z")


# --------------------------------------------------------------------------
# datasets


@dataclass
class MixtureParams:
    means: np.ndarray
    weights: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 0:
            covs = np.broadcast_to(covs * np.eye(d), (k, d, d)).copy()
        elif covs.ndim == 1:
            covs = np.stack([c * np.eye(d) for c in covs])
        self.covs = covs
        if self.weights.shape != (k,):
            raise ValueError("need one weight per mixture component")
        if np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if self.covs.shape != (k, d, d):
            raise ValueError(f"covariances must have shape {(k, d, d)}, got {self.covs.shape}")

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def ring_mixture_params(n_modes: int = 8, radius: float = 2.0, std: float = 0.05) -> MixtureParams:
    """Equal-weight isotropic Gaussians evenly spaced on a circle."""
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return MixtureParams(means, np.full(n_modes, 1.0 / n_modes), np.full(n_modes, std**2))


@dataclass
class DatasetHandle:
    """A finite dataset plus a deterministic epoch-shuffling cursor.

    ``next_batch`` walks a per-epoch permutation; when the request runs past
    the end of the epoch it wraps into the next epoch, whose permutation is
    drawn from ``derive_seed(seed, "epoch", epoch)``.  A single handle must not
    be shared between concurrent consumers.
    """

    kind: str
    data: torch.Tensor
    seed: int = 0
    labels: torch.Tensor | None = None
    params: MixtureParams | None = None
    source: str | None = None
    _epoch: int = field(default=0, repr=False)
    _pos: int = field(default=0, repr=False)
    _perm: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(self.data) < 1:
            raise DatasetError("dataset is empty")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def epoch(self) -> int:
        return self._epoch

    def _permutation(self, epoch: int) -> torch.Tensor:
        gen = make_generator(derive_seed(self.seed, "epoch", epoch))
        return torch.randperm(len(self), generator=gen)

    def reset(self) -> None:
        self._epoch, self._pos, self._perm = 0, 0, None

    def next_indices(self, b: int) -> torch.Tensor:
        _check_count(b)
        out = []
        need = b
        while need:
            if self._perm is None:
                self._perm = self._permutation(self._epoch)
            take = min(need, len(self) - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
            if self._pos == len(self):
                self._epoch += 1
                self._pos = 0
                self._perm = None
        return torch.cat(out)

    def fork(self, key: str) -> "DatasetHandle":
        """Same samples, independent shuffle stream."""
        return DatasetHandle(self.kind, self.data, derive_seed(self.seed, key), self.labels,
                             self.params, self.source)

    def split(self, test_fraction: float = 0.1, max_test: int | None = 10_000
              ) -> tuple["DatasetHandle", "DatasetHandle"]:
        """Deterministic train / held-out split."""
        n = len(self)
        n_test = max(1, int(round(n * test_fraction)))
        if max_test is not None:
            n_test = min(n_test, max_test)
        if n_test >= n:
            raise DatasetError(f"cannot hold out {n_test} of {n} samples")
        perm = torch.randperm(n, generator=make_generator(derive_seed(self.seed, "split")))
        test_idx, train_idx = perm[:n_test], perm[n_test:]

        def sub(idx, key):
            labels = None if self.labels is None else self.labels[idx]
            return DatasetHandle(self.kind, self.data[idx], derive_seed(self.seed, key), labels,
                                 self.params, self.source)

        return sub(train_idx, "train"), sub(test_idx, "test")


def next_batch(handle: DatasetHandle, b: int) -> Batch:
    return Batch(handle.data[handle.next_indices(b)], "x")


def sample_mixture(params: MixtureParams, n: int, seed: int | torch.Generator,
                   dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """``n`` draws from a Gaussian mixture together with their component labels."""
    _check_count(n, "n")
    gen = make_generator(seed)
    weights = torch.as_tensor(params.weights, dtype=torch.float64)
    labels = torch.multinomial(weights, n, replacement=True, generator=gen)
    eps = torch.randn(n, params.dim, generator=gen, dtype=torch.float64)
    chol = torch.linalg.cholesky(torch.as_tensor(params.covs))
    means = torch.as_tensor(params.means)
    x = means[labels] + torch.einsum("nij,nj->ni", chol[labels], eps)
    return x.to(dtype), labels


def make_synthetic_dataset(kind: str, params: MixtureParams | dict | None, n: int, seed: int,
                           dtype: torch.dtype = torch.float32) -> DatasetHandle:
    """Build a synthetic dataset.

    ``kind`` is ``"gaussian-mixture"`` (explicit ``MixtureParams`` or a dict with
    ``means``/``weights``/``covs``) or ``"rings"`` (dict with ``n_modes``,
    ``radius``, ``std``; defaults give the 8-mode ring of radius 2).
    """
    _check_count(n, "n")
    if kind == "rings":
        if not isinstance(params, MixtureParams):
            params = ring_mixture_params(**(params or {}))
    elif kind == "gaussian-mixture":
        if params is None:
            raise ValueError("gaussian-mixture needs component parameters")
        if isinstance(params, dict):
            params = MixtureParams(**params)
    else:
        raise ValueError(f"{kind!r} is not a synthetic dataset kind")
    x, labels = sample_mixture(params, n, derive_seed(seed, "dataset"), dtype)
    return DatasetHandle(kind, x, seed, labels, params)


def load_image_dataset(path: str | Path, resolution: int, seed: int = 0) -> DatasetHandle:
    """Center-crop, resize and scale every decodable image under ``path`` to [-1, 1].

    Samples are stored channels-first, shape ``(3, resolution, resolution)``.
    """
    from PIL import Image, UnidentifiedImageError

    _check_count(resolution, "resolution")
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"image folder {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images found in {root}")
    images = []
    for p in files:
        try:
            with Image.open(p) as im:
                im = im.convert("RGB")
                w, h = im.size
                s = min(w, h)
                left, top = (w - s) // 2, (h - s) // 2
                im = im.crop((left, top, left + s, top + s))
                im = im.resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32)
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping undecodable image %s: %s", p, exc)
            continue
        images.append(arr.transpose(2, 0, 1) / 127.5 - 1.0)
    if not images:
        raise DatasetError(f"none of the {len(files)} files in {root} could be decoded")
    data = torch.from_numpy(np.clip(np.stack(images), -1.0, 1.0))
    return DatasetHandle("image-folder", data, seed, source=str(root))


def mode_occupancy(samples: torch.Tensor, params: MixtureParams) -> np.ndarray:
    """Fraction of samples whose nearest mixture mean is each component."""
    x = as_tensor(samples).detach().to(torch.float64).numpy()
    d = ((x[:, None, :] - params.means[None]) ** 2).sum(-1)
    counts = np.bincount(d.argmin(1), minlength=len(params.weights))
    return counts / len(x)


def pixel_count(sample_shape: Sequence[int]) -> int:
    """Pixels per sample: H*W for (C, H, W) images, 1 for a vector sample."""
    shape = tuple(sample_shape)
    if len(shape) == 3:
        return shape[1] * shape[2]
    if len(shape) == 2:
        return shape[0] * shape[1]
    return 1
