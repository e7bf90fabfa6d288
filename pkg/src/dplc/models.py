"""Network families for G, F, f, E and B, plus checkpoint persistence.

Two families exist.  ``mlp`` is a small leaky-ReLU perceptron for vector data.
``conv-dcgan`` is assembled from layer descriptors in a compact notation:

=============  =============================================================
``cXsY-Z``     conv, X x X kernel, stride Y, Z filters, then ReLU
``cXsYb-Z``    same with batch norm before the ReLU
``cXsYl-Z``    layer norm and leaky ReLU (slope 0.2) instead
``cXsY-Z-q``   conv without non-linearity; its output gets quantized
``tXsYb-Z``    transposed conv (upsampling by Y), batch norm, ReLU
``fc-Z``       flatten, then a fully connected layer with Z outputs
``r-Z``        residual block of two 3x3 convs with Z filters
``bn``         batch norm without learned affine terms
``tanh``       tanh
=============  =============================================================

``Z`` may be the symbols ``m`` (latent dim) or ``k`` (code channels).
"""

from __future__ import annotations

import hashlib
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from dplc.data import as_tensor
from dplc.quantization import CodeSpec, QuantizationResult, sign_corner_spec, soft_quantize

ROLES = ("generator", "wae-encoder", "critic", "rate-encoder", "mapper")
FAMILIES = ("mlp", "conv-dcgan")
CHECKPOINT_FORMAT = "dplc-checkpoint"
CHECKPOINT_VERSION = 1


class ArchError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class RoleMismatchError(CheckpointError):
    pass


@dataclass
class ArchSpec:
    family: str = "mlp"
    latent_dim: int = 2
    data_shape: tuple[int, ...] = (2,)
    code_channels: int = 0
    res_blocks: int = 2
    hidden: int = 128
    depth: int = 3
    noise_dim: int | None = None
    final_norm: bool = True
    code_hw: int = 4
    layers: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data_shape = tuple(int(d) for d in self.data_shape)
        self.layers = list(self.layers)
        if self.family not in FAMILIES:
            raise ArchError(f"unknown architecture family {self.family!r}")
        if self.latent_dim < 1:
            raise ArchError("latent dimension m must be positive")
        if self.code_channels < 0 or self.depth < 0 or self.hidden < 1:
            raise ArchError("code channels, depth and width must be nonnegative")
        if self.res_blocks < 1:
            raise ArchError("the mapper needs at least one residual block")
        if self.noise_dim is None:
            self.noise_dim = self.latent_dim

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.data_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_shape"] = list(self.data_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def conv_layers_for(role: str, resolution: int = 64, width: float = 1.0) -> list[str]:
    """The conv stacks used for 64x64 images, rescaled to other powers of two.

    ``width`` multiplies every filter count (use < 1 for desk-scale runs).
    """
    stages = int(round(math.log2(resolution))) - 2
    if stages < 1 or 2 ** (stages + 2) != resolution:
        raise ArchError(f"resolution must be a power of two >= 8, got {resolution}")

    def w(z):
        return max(1, int(round(z * width)))

    down = [w(64 * 2**i) for i in range(stages)]
    if role in ("wae-encoder", "rate-encoder"):
        body = [f"c4s2-{down[0]}"] + [f"c4s2b-{z}" for z in down[1:]]
        return body + (["fc-m", "bn"] if role == "wae-encoder" else ["c3s1-k-q"])
    if role == "generator":
        up = [w(64 * 2 ** (stages - 1 - i)) for i in range(stages)] + [w(64)]
        return [f"t4s2b-{z}" for z in up] + ["c3s1-3", "tanh"]
    if role == "critic":
        return [f"c3s1-{w(64)}"] + [f"c4s2l-{z}" for z in down] + ["fc-1"]
    if role == "mapper":
        return [f"c3s1-{w(512)}", "r-{}".format(w(512)), "fc-m", "bn"]
    raise ArchError(f"unknown role {role!r}")


def conv_arch_for(role: str, latent_dim: int = 128, resolution: int = 64, code_channels: int = 0,
               res_blocks: int = 2, width: float = 1.0, channels: int = 3) -> ArchSpec:
    layers = conv_layers_for(role, resolution, width)
    if role == "mapper":
        layers = layers[:1] + layers[1:2] * res_blocks + layers[2:]
    if role == "generator" and channels != 3:
        layers[-2] = f"c3s1-{channels}"
    return ArchSpec("conv-dcgan", latent_dim, (channels, resolution, resolution), code_channels,
                    res_blocks, layers=layers, code_hw=4)


@dataclass
class ArchConfig:
    """Shared architecture settings from which per-role ArchSpecs are derived."""

    family: str = "mlp"
    latent_dim: int = 2
    hidden: int = 128
    depth: int = 3
    res_blocks: int = 2
    width: float = 1.0
    final_norm: bool = True
    noise_dim: int | None = None

    def for_role(self, role: str, data_shape: Sequence[int], code_channels: int = 0,
                 noise: bool = True) -> ArchSpec:
        noise_dim = (self.latent_dim if self.noise_dim is None else self.noise_dim) if noise else 0
        if self.family == "mlp":
            return ArchSpec("mlp", self.latent_dim, tuple(data_shape), code_channels,
                            self.res_blocks, self.hidden, self.depth, noise_dim, self.final_norm)
        c, h, _ = data_shape
        spec = conv_arch_for(role, self.latent_dim, h, code_channels, self.res_blocks, self.width, c)
        spec.noise_dim = noise_dim
        spec.final_norm = self.final_norm
        if not self.final_norm and spec.layers[-1] == "bn":
            spec.layers = spec.layers[:-1]
        return spec


def code_channels_for_rate(bits: int, data_shape: Sequence[int], family: str,
                           code_hw: int = 4) -> int:
    """Code channels k giving ``bits`` total bits (one bit per code site)."""
    if family == "mlp":
        return int(bits)
    sites = code_hw * code_hw
    if bits % sites:
        raise ArchError(f"{bits} bits do not fill a {code_hw}x{code_hw} code map evenly")
    return bits // sites


# --------------------------------------------------------------------------
# layer notation

_CONV = re.compile(r"^([ct])(\d+)s(\d+)([bl]?)-(\w+)(-q)?$")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(x + self.conv2(self.act(self.conv1(x))))


def _resolve(token: str, arch: ArchSpec) -> int:
    if token == "m":
        return arch.latent_dim
    if token == "k":
        return arch.code_channels
    if not token.isdigit():
        raise ArchError(f"cannot resolve filter count {token!r}")
    return int(token)


def build_conv_stack(descriptors: Sequence[str], in_shape: tuple[int, ...], arch: ArchSpec
                     ) -> tuple[nn.Sequential, tuple[int, ...]]:
    """Layers for ``descriptors`` applied to samples of ``in_shape``; returns the output shape."""
    layers: list[nn.Module] = []
    shape = tuple(in_shape)
    descriptors = list(descriptors)
    for pos, desc in enumerate(descriptors):
        nxt = descriptors[pos + 1] if pos + 1 < len(descriptors) else None
        m = _CONV.match(desc)
        if m:
            kind, k, s, norm, z, quant = m.groups()
            k, s, z = int(k), int(s), _resolve(z, arch)
            if len(shape) != 3:
                raise ArchError(f"{desc} needs a (C, H, W) input, got {shape}")
            c, h, _ = shape
            if kind == "c":
                pad = (k - s + 1) // 2
                if (h + 2 * pad - k) % s or h + 2 * pad - k < 0:
                    raise ArchError(f"{desc} does not tile a {h}x{h} input")
                out = (h + 2 * pad - k) // s + 1
                layers.append(nn.Conv2d(c, z, k, s, pad))
            else:
                pad = 0 if h == 1 else (k - s) // 2
                out = (h - 1) * s - 2 * pad + k
                layers.append(nn.ConvTranspose2d(c, z, k, s, pad))
            if norm == "b" or kind == "t":
                layers.append(nn.BatchNorm2d(z))
            elif norm == "l":
                layers.append(nn.GroupNorm(1, z))
            if not quant and nxt != "tanh":
                layers.append(nn.LeakyReLU(0.2) if norm == "l" else nn.ReLU())
            if out < 1:
                raise ArchError(f"{desc} shrinks the feature map to nothing")
            shape = (z, out, out)
        elif desc.startswith("fc-"):
            z = _resolve(desc[3:], arch)
            layers += [nn.Flatten(), nn.Linear(int(np.prod(shape)), z)]
            shape = (z,)
        elif desc.startswith("r-"):
            z = _resolve(desc[2:], arch)
            if len(shape) != 3 or shape[0] != z:
                raise ArchError(f"{desc} expects {z} input channels, got shape {shape}")
            layers.append(ResidualBlock(z))
        elif desc == "bn":
            norm = nn.BatchNorm1d if len(shape) == 1 else nn.BatchNorm2d
            layers.append(norm(shape[0], affine=False))
        elif desc == "tanh":
            layers.append(nn.Tanh())
        else:
            raise ArchError(f"unknown layer descriptor {desc!r}")
    return nn.Sequential(*layers), shape


def _linear(in_dim: int, out_dim: int) -> nn.Linear:
    if in_dim:
        return nn.Linear(in_dim, out_dim)
    # zero-rate deterministic mapper: no inputs, the bias carries the output
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Initializing zero-element tensors")
        return nn.Linear(0, out_dim)


def _mlp(in_dim: int, out_dim: int, hidden: int, depth: int) -> list[nn.Module]:
    layers: list[nn.Module] = []
    width = in_dim
    for _ in range(depth):
        layers += [nn.Linear(width, hidden), nn.LeakyReLU(0.2)]
        width = hidden
    layers.append(nn.Linear(width, out_dim))
    return layers


class ResidualMLPBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(x + self.fc2(self.act(self.fc1(x))))


# --------------------------------------------------------------------------
# models


class ModelHandle(nn.Module):
    """One of G, F, f, E, B with its architecture record.

    Inputs and outputs by role (``b`` = batch size):

    * generator ``(b, m) -> (b, *data_shape)``
    * wae-encoder ``(b, *data_shape) -> (b, m)``
    * critic ``(b, *data_shape) -> (b,)``
    * rate-encoder ``(b, *data_shape) -> (b, k)`` or ``(b, k, h, w)``
    * mapper ``code_plus_noise -> (b, m)``
    """

    def __init__(self, role: str, arch: ArchSpec, seed: int = 0):
        super().__init__()
        if role not in ROLES:
            raise ArchError(f"unknown role {role!r}")
        self.role, self.arch, self.seed = role, arch, seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net, self.out_shape = self._build()
        self.in_shape = self.input_shape()

    def input_shape(self) -> tuple[int, ...]:
        a = self.arch
        if self.role == "generator":
            return (a.latent_dim,)
        if self.role == "mapper":
            if a.family == "mlp":
                return (a.code_channels + a.noise_dim,)
            if a.noise_dim % (a.code_hw**2):
                raise ArchError(f"noise dim {a.noise_dim} cannot be reshaped onto "
                                f"{a.code_hw}x{a.code_hw} code sites")
            return (a.code_channels + a.noise_dim // a.code_hw**2, a.code_hw, a.code_hw)
        return a.data_shape

    def _build(self):
        a = self.arch
        in_shape = self.input_shape()
        if a.family == "mlp":
            return self._build_mlp(in_shape)
        if not a.layers:
            raise ArchError("conv-dcgan architectures need layer descriptors")
        conv_in = (a.latent_dim, 1, 1) if self.role == "generator" else in_shape
        net, out = build_conv_stack(a.layers, conv_in, a)
        expected = {
            "generator": a.data_shape,
            "wae-encoder": (a.latent_dim,),
            "critic": (1,),
            "mapper": (a.latent_dim,),
        }.get(self.role)
        if self.role == "rate-encoder":
            expected = (a.code_channels, a.code_hw, a.code_hw)
        if out != expected:
            raise ArchError(f"{self.role} layers produce {out}, expected {expected}")
        return net, out

    def _build_mlp(self, in_shape):
        a = self.arch
        in_dim = int(np.prod(in_shape))
        if self.role == "generator":
            layers = _mlp(in_dim, a.data_dim, a.hidden, a.depth)
            if len(a.data_shape) == 3:
                layers.append(nn.Tanh())
            return nn.Sequential(*layers), a.data_shape
        if self.role == "critic":
            return nn.Sequential(*_mlp(in_dim, 1, a.hidden, a.depth)), (1,)
        if self.role == "rate-encoder":
            return nn.Sequential(*_mlp(in_dim, a.code_channels, a.hidden, a.depth)), (a.code_channels,)
        if self.role == "wae-encoder":
            layers = _mlp(in_dim, a.latent_dim, a.hidden, a.depth)
        else:
            layers = [_linear(in_dim, a.hidden), nn.LeakyReLU(0.2)]
            layers += [ResidualMLPBlock(a.hidden) for _ in range(a.res_blocks)]
            layers.append(nn.Linear(a.hidden, a.latent_dim))
        if a.final_norm:
            layers.append(nn.BatchNorm1d(a.latent_dim, affine=False))
        return nn.Sequential(*layers), (a.latent_dim,)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        if self.arch.family == "mlp":
            x = x.reshape(b, -1)
        elif self.role == "generator":
            x = x.reshape(b, -1, 1, 1)
        out = self.net(x)
        if self.role == "critic":
            return out.reshape(b)
        return out.reshape((b,) + tuple(self.out_shape))

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def set_flat_parameters(self, vec: torch.Tensor) -> None:
        nn.utils.vector_to_parameters(vec, self.parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(role: str, arch: ArchSpec, seed: int = 0) -> ModelHandle:
    return ModelHandle(role, arch, seed)


def _check_role(model: ModelHandle, *roles: str) -> None:
    if model.role not in roles:
        raise RoleMismatchError(f"expected a {' or '.join(roles)} model, got {model.role}")


def generator_forward(G: ModelHandle, z) -> torch.Tensor:
    _check_role(G, "generator")
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != G.arch.latent_dim:
        raise ValueError(f"generator expects (b, {G.arch.latent_dim}) latents, got {tuple(z.shape)}")
    return G(z)


def append_noise(code: torch.Tensor, noise: torch.Tensor | None, arch: ArchSpec) -> torch.Tensor:
    """Concatenate noise to the code (vector) or as extra channels (feature map)."""
    b = code.shape[0]
    if noise is None or arch.noise_dim == 0:
        return code
    noise = as_tensor(noise)
    if noise.shape != (b, arch.noise_dim):
        raise ValueError(f"expected noise of shape {(b, arch.noise_dim)}, got {tuple(noise.shape)}")
    noise = noise.to(code.dtype)
    if code.ndim == 2:
        return torch.cat([code, noise], dim=1)
    h, w = code.shape[2:]
    if arch.noise_dim % (h * w):
        raise ValueError(f"noise dim {arch.noise_dim} does not reshape onto {h}x{w} sites")
    return torch.cat([code, noise.reshape(b, -1, h, w)], dim=1)


def rate_encode(E: ModelHandle, x, spec: CodeSpec | None = None, noise=None,
                temperature: float = 1.0) -> tuple[QuantizationResult, torch.Tensor]:
    """Encode, quantize to {-1, 1} per code site, and append decoder noise."""
    _check_role(E, "rate-encoder")
    features = E(as_tensor(x))
    if spec is None:
        spec = sign_corner_spec(features.shape[1:])
    q = soft_quantize(features, spec, temperature)
    return q, append_noise(q.surrogate, noise, E.arch)


def mapper_forward(B: ModelHandle, code_plus_noise) -> torch.Tensor:
    _check_role(B, "mapper")
    x = as_tensor(code_plus_noise)
    if tuple(x.shape[1:]) != B.in_shape and int(np.prod(x.shape[1:])) != int(np.prod(B.in_shape)):
        raise ValueError(f"mapper expects inputs of shape {B.in_shape}, got {tuple(x.shape[1:])}")
    return B(x.reshape((x.shape[0],) + B.in_shape))


# --------------------------------------------------------------------------
# checkpoints


def parameter_fingerprint(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    models: dict[str, ModelHandle]
    config_fingerprint: str = ""
    iteration: int = 0
    seed: int | None = None
    optimizer_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def model(self, role: str) -> ModelHandle:
        if role not in self.models:
            raise RoleMismatchError(f"checkpoint holds {sorted(self.models)}, not a {role}")
        return self.models[role]


def save_checkpoint(ckpt: Checkpoint | ModelHandle, path: str | Path) -> Path:
    if isinstance(ckpt, ModelHandle):
        ckpt = Checkpoint({ckpt.role: ckpt})
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "models": {
            role: {"role": m.role, "arch": m.arch.to_dict(), "seed": m.seed,
                   "dtype": str(next(iter(m.state_dict().values())).dtype).removeprefix("torch."),
                   "state": {k: v.detach().clone() for k, v in m.state_dict().items()}}
            for role, m in ckpt.models.items()
        },
        "config_fingerprint": ckpt.config_fingerprint,
        "iteration": int(ckpt.iteration),
        "seed": ckpt.seed,
        "optimizer_state": ckpt.optimizer_state,
        "extra": ckpt.extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    models = {}
    for role, entry in payload["models"].items():
        m = ModelHandle(entry["role"], ArchSpec.from_dict(entry["arch"]), entry["seed"])
        m.to(getattr(torch, entry.get("dtype", "float32")))
        m.load_state_dict(entry["state"])
        m.eval()
        models[role] = m
    return Checkpoint(models, payload["config_fingerprint"], payload["iteration"],
                      payload["seed"], payload["optimizer_state"], payload["extra"])


def load_model(path: str | Path, role: str) -> ModelHandle:
    """Load the model with ``role`` from a checkpoint, or raise RoleMismatchError."""
    return load_checkpoint(path).model(role)
