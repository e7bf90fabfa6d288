"""Optimization loops.

Generator training (WAE-MMD, WGAN-GP, Wasserstein++), the rate-constrained
codec stage on top of a frozen generator, and the two joint baselines (CAE and
GC).

Random streams.  A :class:`TrainState` owns three generators derived from the
run seed: ``main`` (prior draws for the generator/encoder update), ``critic``
(everything used only by critic updates: extra prior draws, interpolation
weights) and ``noise`` (decoder noise).  Wasserstein++ draws its first
``n_critic - 1`` critic batches from a forked data stream and its last one from
the main stream, which is the batch the generator/encoder update then reuses.
With ``gamma = 0`` it therefore updates G and F bit-identically to a WAE-MMD
step with the same seed.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

from dplc.codecs import LearnedCodec
from dplc.data import (DatasetHandle, NoiseSpec, PriorSpec, derive_seed, make_generator,
                       next_batch, sample_noise, sample_prior)
from dplc.divergences import (KernelSpec, critic_loss, generator_adversarial_loss,
                              mmd_u_statistic)
from dplc.models import (ArchConfig, Checkpoint, ModelHandle, append_noise, build_model,
                         code_channels_for_rate, parameter_fingerprint)
from dplc.quantization import sign_corner_spec, soft_quantize

logger = logging.getLogger(__name__)

ALGORITHMS = ("wae-mmd", "wgan-gp", "wpp")


class TrainingDiverged(RuntimeError):
    """A loss went NaN/Inf.  ``record`` holds the offending step's losses and
    ``last_good`` the most recent finite checkpoint (if any)."""

    def __init__(self, message: str, record: dict, last_good: Checkpoint | None = None):
        super().__init__(message)
        self.record = record
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr_encoder: float = 1e-3
    lr_generator: float = 1e-3
    lr_critic: float = 1e-4
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_mmd: float = 100.0
    lambda_gp: float = 10.0
    gamma: float = 1e-3
    n_critic: int = 5
    batch_size: int = 128
    iterations: int = 5000
    lr_milestones: tuple[int, ...] = ()
    lr_factor: float = 0.4
    kernel_scale: float | None = None
    temperature: float = 1.0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        for name in ("lr_encoder", "lr_generator", "lr_critic", "lr", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n_critic < 1:
            raise ValueError("n_critic must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")

    def kernel(self, m: int) -> KernelSpec:
        return KernelSpec(self.kernel_scale) if self.kernel_scale else KernelSpec.for_prior(m)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamMoments:
    step: int
    first: list[torch.Tensor]
    second: list[torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamMoments":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_update(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
                moments: AdamMoments, lr: float, beta1: float, beta2: float, eps: float = 1e-8
                ) -> tuple[list[torch.Tensor], AdamMoments]:
    """One bias-corrected Adam step; returns new parameters and moments."""
    if len(params) != len(grads) or len(params) != len(moments.first):
        raise ValueError("params, grads and moments must have the same length")
    t = moments.step + 1
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    new_params, first, second = [], [], []
    for p, g, m, v in zip(params, grads, moments.first, moments.second):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        new_params.append(p - lr * (m / c1) / ((v / c2).sqrt() + eps))
        first.append(m)
        second.append(v)
    return new_params, AdamMoments(t, first, second)


class Adam(torch.optim.Optimizer):
    """Adam driven by :func:`adam_update`; parameters without grads are skipped."""

    def __init__(self, params: Iterable[nn.Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                moments = AdamMoments(st["step"], [st["exp_avg"]], [st["exp_avg_sq"]])
                (new,), moments = adam_update([p], [p.grad], moments, group["lr"], beta1, beta2,
                                              group["eps"])
                p.copy_(new)
                st["step"] = moments.step
                st["exp_avg"], st["exp_avg_sq"] = moments.first[0], moments.second[0]

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr


def lr_at(base: float, iteration: int, milestones: Sequence[int], factor: float) -> float:
    """Learning rate after ``iteration`` completed steps: ``base * factor**passed``."""
    return base * factor ** sum(iteration >= m for m in milestones)


# --------------------------------------------------------------------------
# losses and state


def euclidean_distortion(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample ``|x - y|`` (unsquared) over all non-batch dimensions."""
    return torch.linalg.vector_norm((x - y).reshape(x.shape[0], -1), dim=1)


def squared_distortion(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((x - y) ** 2).reshape(x.shape[0], -1).sum(1)


@dataclass
class TrainState:
    models: dict[str, ModelHandle]
    optimizers: dict[str, Adam]
    config: TrainConfig
    prior: PriorSpec
    data: DatasetHandle
    critic_data: DatasetHandle
    rng: dict[str, torch.Generator]
    base_lrs: dict[str, float] = field(default_factory=dict)
    iteration: int = 0
    critic_updates: int = 0
    generator_updates: int = 0
    history: list[dict] = field(default_factory=list)
    frozen: dict[str, ModelHandle] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def apply_schedule(self) -> None:
        cfg = self.config
        for name, opt in self.optimizers.items():
            opt.set_lr(lr_at(self.base_lrs[name], self.iteration, cfg.lr_milestones, cfg.lr_factor))

    def checkpoint(self, fingerprint: str = "") -> Checkpoint:
        models = {k: copy.deepcopy(m) for k, m in self.models.items()}
        opt = {k: o.state_dict() for k, o in self.optimizers.items()}
        return Checkpoint(models, fingerprint, self.iteration, self.config.seed, copy.deepcopy(opt))


def _rngs(seed: int) -> dict[str, torch.Generator]:
    return {k: make_generator(derive_seed(seed, "train", k)) for k in ("main", "critic", "noise")}


def _adam(model: nn.Module, lr: float, cfg: TrainConfig) -> Adam:
    return Adam(model.parameters(), lr, (cfg.beta1, cfg.beta2), cfg.eps)


def init_generator_state(algo: str, dataset: DatasetHandle, config: TrainConfig,
                         arch: ArchConfig | None = None,
                         models: dict[str, ModelHandle] | None = None,
                         prior: PriorSpec | None = None) -> TrainState:
    """Fresh models (or the given ones) plus optimizers for a generator trainer."""
    if algo not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
    arch = arch or ArchConfig(latent_dim=2)
    roles = {"wae-mmd": ("generator", "wae-encoder"), "wgan-gp": ("generator", "critic"),
             "wpp": ("generator", "wae-encoder", "critic")}[algo]
    if models is None:
        models = {r: build_model(r, arch.for_role(r, dataset.sample_shape),
                                 derive_seed(config.seed, "init", r)) for r in roles}
    missing = set(roles) - set(models)
    if missing:
        raise ValueError(f"{algo} needs models for {sorted(missing)}")
    m = models["generator"].arch.latent_dim
    prior = prior or PriorSpec("standard-normal", m)
    lrs = {"generator": config.lr_generator, "wae-encoder": config.lr_encoder,
           "critic": config.lr_critic}
    base = {r: lrs[r] for r in roles}
    opts = {r: _adam(models[r], base[r], config) for r in roles}
    for mod in models.values():
        mod.train()
    data = replace(dataset) if dataset is not None else None
    data.reset()
    return TrainState(dict(models), opts, config, prior, data, data.fork("critic"),
                      _rngs(config.seed), base)


def _finite_or_raise(state: TrainState, record: dict) -> None:
    bad = [k for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite {', '.join(bad)} at iteration {state.iteration}", record)


def _grads_to(params: Sequence[nn.Parameter], grads: Sequence[torch.Tensor | None]) -> None:
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


def _critic_update(state: TrainState, x: torch.Tensor, x_fake: torch.Tensor) -> float:
    cfg = state.config
    f = state.models["critic"]
    nu = torch.rand(x.shape[0], generator=state.rng["critic"], dtype=x.dtype)
    loss = critic_loss(f, x, x_fake, cfg.lambda_gp, nu=nu)
    opt = state.optimizers["critic"]
    opt.zero_grad(set_to_none=True)
    loss.total.backward()
    opt.step()
    state.critic_updates += 1
    return loss.total.item()


def _dtype(state: TrainState) -> torch.dtype:
    return next(state.models["generator"].parameters()).dtype


def _x(state: TrainState, handle: DatasetHandle) -> torch.Tensor:
    return next_batch(handle, state.config.batch_size).data.to(_dtype(state))


def _z(state: TrainState, stream: str) -> torch.Tensor:
    return sample_prior(state.prior, state.config.batch_size, state.rng[stream], _dtype(state)).data


def _encoder_generator_update(state: TrainState, x: torch.Tensor, z: torch.Tensor,
                              gamma: float) -> dict:
    """Joint G and F update of a Wasserstein++ iteration (WAE-MMD when gamma = 0)."""
    cfg = state.config
    F, G = state.models["wae-encoder"], state.models["generator"]
    kernel = cfg.kernel(state.prior.dim)
    z_bar = F(x)
    x_rec = G(z_bar)
    l_d = euclidean_distortion(x, x_rec).mean()
    l_mmd = mmd_u_statistic(z, z_bar, kernel)
    theta, phi = list(G.parameters()), list(F.parameters())
    if gamma > 0:
        l_wgan = generator_adversarial_loss(state.models["critic"], x_rec)
        loss_theta = (1 - gamma) * l_d + gamma * l_wgan
    else:
        l_wgan = None
        loss_theta = l_d
        if "critic" in state.models:
            # monitored only; same pre-update batch as when gamma > 0
            with torch.no_grad():
                l_wgan = generator_adversarial_loss(state.models["critic"], x_rec)
    loss_phi = (1 - gamma) * (l_d + cfg.lambda_mmd * l_mmd) if gamma > 0 else l_d + cfg.lambda_mmd * l_mmd
    g_theta = torch.autograd.grad(loss_theta, theta, retain_graph=True, allow_unused=True)
    g_phi = torch.autograd.grad(loss_phi, phi, allow_unused=True)
    _grads_to(theta, g_theta)
    _grads_to(phi, g_phi)
    state.optimizers["generator"].step()
    state.optimizers["wae-encoder"].step()
    state.generator_updates += 1
    rec = {"L_d": l_d.item(), "L_mmd": l_mmd.item()}
    if l_wgan is not None:
        rec["L_wgan"] = l_wgan.item()
    return rec


def wae_mmd_step(state: TrainState) -> dict:
    """One WAE-MMD update of G and F on a fresh batch."""
    state.apply_schedule()
    x = _x(state, state.data)
    z = _z(state, "main")
    record = {"iteration": state.iteration, **_encoder_generator_update(state, x, z, 0.0)}
    _finite_or_raise(state, record)
    state.iteration += 1
    state.history.append(record)
    return record


def wpp_step(state: TrainState, keep_samples: bool = False) -> dict:
    """One outer Wasserstein++ iteration: ``n_critic`` critic updates on
    ``G(eta z + (1 - eta) F(x))``, then one update of G and F.

    ``(1 - gamma) L_d + gamma L_wgan`` drives G and
    ``(1 - gamma) (L_d + lambda_mmd L_mmd)`` drives F; both use the last critic
    batch.  With ``keep_samples`` the record also carries that batch and its
    interpolation weights.
    """
    cfg = state.config
    state.apply_schedule()
    F, G = state.models["wae-encoder"], state.models["generator"]
    l_f = []
    for t in range(cfg.n_critic):
        last = t == cfg.n_critic - 1
        x = _x(state, state.data if last else state.critic_data)
        z = _z(state, "main" if last else "critic")
        eta = torch.rand(cfg.batch_size, 1, generator=state.rng["critic"], dtype=x.dtype)
        with torch.no_grad():
            z_bar = F(x)
            z_tilde = eta * z + (1 - eta) * z_bar
            x_hat = G(z_tilde)
        rng_state = state.rng["critic"].get_state() if last and keep_samples else None
        l_f.append(_critic_update(state, x, x_hat))
    record = {"iteration": state.iteration, "L_f": l_f[-1]}
    record.update(_encoder_generator_update(state, x, z, cfg.gamma))
    _finite_or_raise(state, record)
    state.iteration += 1
    state.history.append(record)
    if keep_samples:
        nu = torch.rand(cfg.batch_size, generator=make_generator(0).set_state(rng_state),
                        dtype=x.dtype)
        return {**record, "samples": {"x": x, "z": z, "eta": eta.reshape(-1), "nu": nu,
                                      "l_f_all": l_f}}
    return record


def adversarial_generator_update(state: TrainState, z: torch.Tensor) -> float:
    """One Adam step of G on ``-mean f(G(z))``; returns that loss."""
    G = state.models["generator"]
    l_wgan = generator_adversarial_loss(state.models["critic"], G(z))
    opt = state.optimizers["generator"]
    opt.zero_grad(set_to_none=True)
    theta = list(G.parameters())
    _grads_to(theta, torch.autograd.grad(l_wgan, theta, allow_unused=True))
    opt.step()
    state.generator_updates += 1
    return l_wgan.item()


def wgan_gp_step(state: TrainState) -> dict:
    cfg = state.config
    state.apply_schedule()
    G = state.models["generator"]
    l_f = None
    for _ in range(cfg.n_critic):
        x = _x(state, state.data)
        with torch.no_grad():
            x_hat = G(_z(state, "critic"))
        l_f = _critic_update(state, x, x_hat)
    l_wgan = adversarial_generator_update(state, _z(state, "main"))
    record = {"iteration": state.iteration, "L_f": l_f, "L_wgan": l_wgan}
    _finite_or_raise(state, record)
    state.iteration += 1
    state.history.append(record)
    return record


STEPS = {"wae-mmd": wae_mmd_step, "wgan-gp": wgan_gp_step, "wpp": wpp_step}


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: list[dict]
    extra: dict = field(default_factory=dict)


def _run(state: TrainState, step: Callable[[TrainState], dict], fingerprint: str,
         callback: Callable[[TrainState, dict], None] | None) -> Checkpoint:
    cfg = state.config
    last_good = state.checkpoint(fingerprint)
    while state.iteration < cfg.iterations:
        try:
            record = step(state)
        except TrainingDiverged as exc:
            exc.last_good = last_good
            raise
        if cfg.log_every and (state.iteration % cfg.log_every == 0
                              or state.iteration == cfg.iterations):
            last_good = state.checkpoint(fingerprint)
            logger.info("iteration %d: %s", state.iteration,
                        {k: round(v, 5) for k, v in record.items() if isinstance(v, float)})
            if callback is not None:
                callback(state, record)
    for m in state.models.values():
        m.eval()
    return state.checkpoint(fingerprint)


def train_generator(algo: str, dataset: DatasetHandle, config: TrainConfig,
                    arch: ArchConfig | None = None, fingerprint: str = "",
                    callback: Callable[[TrainState, dict], None] | None = None) -> RunResult:
    """Train G (and F and/or the critic) with WAE-MMD, WGAN-GP or Wasserstein++."""
    state = init_generator_state(algo, dataset, config, arch)
    ckpt = _run(state, STEPS[algo], fingerprint, callback)
    ckpt.extra.update(algo=algo, prior=asdict(state.prior),
                      critic_updates=state.critic_updates,
                      generator_updates=state.generator_updates)
    return RunResult(ckpt, state.history)


# --------------------------------------------------------------------------
# compression stage and baselines


def lambda_schedule(rate: float, mse_cae_table: dict[float, float], base_lambda: float,
                    reference_rate: float) -> float:
    """``base_lambda * MSE_CAE(rate) / MSE_CAE(reference_rate)``.

    A rate missing from the table falls back to the nearest tabulated rate,
    with a warning.
    """
    table = {float(r): float(v) for r, v in mse_cae_table.items()}
    if not table:
        raise ValueError("empty CAE MSE table")

    def lookup(r):
        r = float(r)
        if r in table:
            return table[r]
        near = min(table, key=lambda t: (abs(t - r), t))
        logger.warning("rate %g not in the CAE table; using rate %g", r, near)
        return table[near]

    ref = lookup(reference_rate)
    if ref <= 0:
        raise ValueError("reference CAE MSE must be positive")
    return base_lambda * lookup(rate) / ref


def _codec_models(arch: ArchConfig, data_shape, rate_bits: int, seed: int, noise: bool,
                  with_generator: bool) -> dict[str, ModelHandle]:
    k = code_channels_for_rate(rate_bits, data_shape, arch.family)
    models = {"mapper": build_model("mapper", arch.for_role("mapper", data_shape, k, noise),
                                    derive_seed(seed, "init", "mapper"))}
    if k > 0:
        models["rate-encoder"] = build_model("rate-encoder",
                                             arch.for_role("rate-encoder", data_shape, k),
                                             derive_seed(seed, "init", "rate-encoder"))
    if with_generator:
        models["generator"] = build_model("generator", arch.for_role("generator", data_shape),
                                          derive_seed(seed, "init", "generator"))
    return models


def _decode(state: TrainState, x: torch.Tensor, generator: ModelHandle) -> torch.Tensor:
    """``G(B(q(E(x)) ++ noise))`` with straight-through quantization."""
    B = state.models["mapper"]
    b = x.shape[0]
    if "rate-encoder" in state.models:
        feats = state.models["rate-encoder"](x)
        code = soft_quantize(feats, sign_corner_spec(feats.shape[1:]),
                             state.config.temperature).surrogate
    else:
        a = B.arch
        code = x.new_zeros((b, 0) if a.family == "mlp" else (b, 0, a.code_hw, a.code_hw))
    noise = None
    if B.arch.noise_dim:
        noise = sample_noise(NoiseSpec(B.arch.noise_dim), b, state.rng["noise"], x.dtype).data
    z_hat = B(append_noise(code, noise, B.arch).reshape((b,) + B.in_shape))
    return generator(z_hat), z_hat


def _joint_state(models, dataset, config, prior, frozen=None) -> TrainState:
    opts = {r: _adam(m, config.lr, config) for r, m in models.items()}
    for m in models.values():
        m.train()
    data = replace(dataset)
    data.reset()
    return TrainState(models, opts, config, prior, data, data.fork("critic"),
                      _rngs(config.seed), {r: config.lr for r in models}, frozen=frozen or {})


def _step_all(state: TrainState, loss: torch.Tensor, roles: Iterable[str]) -> None:
    for r in roles:
        state.optimizers[r].zero_grad(set_to_none=True)
    loss.backward()
    for r in roles:
        state.optimizers[r].step()


def train_codec(generator: ModelHandle, rate_bits: int, dataset: DatasetHandle,
                config: TrainConfig, arch: ArchConfig | None = None,
                lambda_mmd: float | None = None, fingerprint: str = "",
                callback=None) -> RunResult:
    """Train E and B against a frozen generator.

    Minimizes ``mean |x - G(B(E(x), n))| + lambda_mmd * MMD(B(E(x), n), z)``
    over E and B.  At zero rate there is no encoder and B sees noise only.
    The generator's parameters are never touched.
    """
    if generator is None or generator.role != "generator":
        raise ValueError("train_codec needs a generator model")
    arch = arch or ArchConfig(latent_dim=generator.arch.latent_dim)
    lam = config.lambda_mmd if lambda_mmd is None else lambda_mmd
    generator.eval()
    generator.requires_grad_(False)
    before = parameter_fingerprint(generator)
    prior = PriorSpec("standard-normal", generator.arch.latent_dim)
    models = _codec_models(arch, dataset.sample_shape, rate_bits, config.seed, True, False)
    dtype = next(generator.parameters()).dtype
    for m in models.values():
        m.to(dtype)
    state = _joint_state(models, dataset, config, prior, {"generator": generator})
    kernel = config.kernel(prior.dim)

    def step(st: TrainState) -> dict:
        st.apply_schedule()
        x = _x_frozen(st, dtype)
        z = sample_prior(prior, config.batch_size, st.rng["main"], dtype).data
        x_hat, z_hat = _decode(st, x, generator)
        l_d = euclidean_distortion(x, x_hat).mean()
        l_mmd = mmd_u_statistic(z, z_hat, kernel)
        _step_all(st, l_d + lam * l_mmd, st.models)
        rec = {"iteration": st.iteration, "L_d": l_d.item(), "L_mmd": l_mmd.item()}
        _finite_or_raise(st, rec)
        st.iteration += 1
        st.history.append(rec)
        return rec

    ckpt = _run(state, step, fingerprint, callback)
    if parameter_fingerprint(generator) != before:
        raise RuntimeError("generator parameters changed during codec training")
    ckpt.extra.update(rate_bits=rate_bits, lambda_mmd=lam, generator_fingerprint=before)
    return RunResult(ckpt, state.history, {"lambda_mmd": lam})


def _x_frozen(state: TrainState, dtype) -> torch.Tensor:
    return next_batch(state.data, state.config.batch_size).data.to(dtype)


def train_cae(dataset: DatasetHandle, rate_bits: int, config: TrainConfig,
              arch: ArchConfig | None = None, fingerprint: str = "", callback=None) -> RunResult:
    """Compressive autoencoder baseline: G, B, E trained jointly on squared error,
    no decoder noise."""
    arch = arch or ArchConfig()
    models = _codec_models(arch, dataset.sample_shape, rate_bits, config.seed, False, True)
    prior = PriorSpec("standard-normal", arch.latent_dim)
    state = _joint_state(models, dataset, config, prior)

    def step(st: TrainState) -> dict:
        st.apply_schedule()
        x = _x(st, st.data)
        x_hat, _ = _decode(st, x, st.models["generator"])
        loss = squared_distortion(x, x_hat).mean()
        _step_all(st, loss, st.models)
        rec = {"iteration": st.iteration, "L_d": loss.item()}
        _finite_or_raise(st, rec)
        st.iteration += 1
        st.history.append(rec)
        return rec

    ckpt = _run(state, step, fingerprint, callback)
    ckpt.extra.update(rate_bits=rate_bits)
    return RunResult(ckpt, state.history)


def train_gc(dataset: DatasetHandle, rate_bits: int, config: TrainConfig,
             arch: ArchConfig | None = None, lam: float = 0.0, fingerprint: str = "",
             callback=None) -> RunResult:
    """Generative-compression baseline: G, B, E trained jointly on
    ``squared error + lam * W`` with a gradient-penalized critic estimating W.

    Each outer iteration runs ``n_critic`` critic updates on fresh batches
    (critic data stream), then one joint update of G, B, E.
    """
    arch = arch or ArchConfig()
    models = _codec_models(arch, dataset.sample_shape, rate_bits, config.seed, True, True)
    critic = build_model("critic", arch.for_role("critic", dataset.sample_shape),
                         derive_seed(config.seed, "init", "critic"))
    prior = PriorSpec("standard-normal", arch.latent_dim)
    state = _joint_state(models, dataset, config, prior)
    joint = list(models)
    state.models["critic"] = critic
    critic.train()
    state.optimizers["critic"] = _adam(critic, config.lr_critic, config)
    state.base_lrs["critic"] = config.lr_critic

    def step(st: TrainState) -> dict:
        st.apply_schedule()
        G = st.models["generator"]
        l_f = 0.0
        if lam > 0:
            for _ in range(config.n_critic):
                xc = _x(st, st.critic_data)
                with torch.no_grad():
                    x_fake, _ = _decode(st, _x(st, st.critic_data), G)
                l_f = _critic_update(st, xc, x_fake)
        x = _x(st, st.data)
        x_hat, _ = _decode(st, x, G)
        l_d = squared_distortion(x, x_hat).mean()
        loss = l_d
        l_adv = torch.zeros(())
        if lam > 0:
            l_adv = generator_adversarial_loss(st.models["critic"], x_hat)
            loss = l_d + lam * l_adv
        _step_all(st, loss, joint)
        rec = {"iteration": st.iteration, "L_d": l_d.item(), "L_wgan": l_adv.item(), "L_f": l_f}
        _finite_or_raise(st, rec)
        st.iteration += 1
        st.history.append(rec)
        return rec

    ckpt = _run(state, step, fingerprint, callback)
    ckpt.extra.update(rate_bits=rate_bits, lambda_gc=lam)
    return RunResult(ckpt, state.history, {"lambda": lam})


def codec_from_checkpoint(ckpt: Checkpoint, generator: ModelHandle | None = None) -> LearnedCodec:
    """Inference codec from a codec / CAE / GC checkpoint (``generator`` for codec-stage ones)."""
    gen = generator if generator is not None else ckpt.model("generator")
    enc = ckpt.models.get("rate-encoder")
    return LearnedCodec(enc, ckpt.model("mapper"), gen, ckpt.extra.get("rate_bits", 0))
