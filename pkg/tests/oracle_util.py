"""Independent numpy re-implementation of one Wasserstein++ iteration for
1-d linear models, batch size 2 and a single critic step.

Models: G(z) = a z + c, F(x) = p x + q, f(x) = u x + v.
"""

import copy

import numpy as np
import torch

from dplc.data import DatasetHandle, make_synthetic_dataset
from dplc.models import ArchConfig
from dplc.training import (TrainConfig, adversarial_generator_update, init_generator_state,
                           wae_mmd_step, wpp_step)

SMALL_ARCH = ArchConfig(latent_dim=2, hidden=16, depth=2, res_blocks=1)


def linear_1d_state(gamma, seed=0, lr=1e-3, lam_mmd=10.0, lam_gp=10.0):
    cfg = TrainConfig(lr_encoder=lr, lr_generator=2 * lr, lr_critic=3 * lr, beta1=0.5,
                      beta2=0.999, lambda_mmd=lam_mmd, lambda_gp=lam_gp, gamma=gamma,
                      n_critic=1, batch_size=2, iterations=1, seed=seed)
    arch = ArchConfig(latent_dim=1, depth=0, final_norm=False)
    data = torch.tensor([[-1.3], [0.4], [2.2], [0.9], [-0.2]], dtype=torch.float64)
    ds = DatasetHandle("gaussian-mixture", data, seed)
    state = init_generator_state("wpp", ds, cfg, arch)
    for m in state.models.values():
        m.double()
    return state, cfg


def _params(state):
    G, F, f = (state.models[r].net[0] for r in ("generator", "wae-encoder", "critic"))
    return dict(a=G.weight.item(), c=G.bias.item(), p=F.weight.item(), q=F.bias.item(),
                u=f.weight.item(), v=f.bias.item())


def _adam_first_step(theta, g, lr, b1, b2, eps):
    m = (1 - b1) * g
    s = (1 - b2) * g * g
    return theta - lr * (m / (1 - b1)) / (np.sqrt(s / (1 - b2)) + eps)


def _imq(a, b, c):
    return c / (c + (a - b) ** 2)


def _imq_db(a, b, c):
    """d k(a, b) / d b."""
    return c * 2 * (a - b) / (c + (a - b) ** 2) ** 2


def hand_wpp(before, samples, cfg):
    """Loss values and updated parameters of one iteration from the same draws."""
    P = before
    x = samples["x"].numpy().reshape(-1)
    z = samples["z"].numpy().reshape(-1)
    eta = samples["eta"].numpy().reshape(-1)
    nu = samples["nu"].numpy().reshape(-1)
    lr_f, lr_g, lr_e = cfg.lr_critic, cfg.lr_generator, cfg.lr_encoder
    b1, b2, eps, gam, C = cfg.beta1, cfg.beta2, cfg.eps, cfg.gamma, 2.0 * 1

    # critic step on x_hat = G(eta z + (1 - eta) F(x))
    z_bar = P["p"] * x + P["q"]
    x_hat = P["a"] * (eta * z + (1 - eta) * z_bar) + P["c"]
    f = lambda t, u, v: u * t + v
    # the input gradient of a linear critic is u everywhere, whatever nu is
    _ = nu * x + (1 - nu) * x_hat
    L_f = np.mean(f(x_hat, P["u"], P["v"]) - f(x, P["u"], P["v"])) \
        + cfg.lambda_gp * (abs(P["u"]) - 1) ** 2
    g_u = np.mean(x_hat - x) + cfg.lambda_gp * 2 * (abs(P["u"]) - 1) * np.sign(P["u"])
    g_v = 0.0
    u1 = _adam_first_step(P["u"], g_u, lr_f, b1, b2, eps)
    v1 = _adam_first_step(P["v"], g_v, lr_f, b1, b2, eps)

    # generator / encoder step on the same batch
    x_rec = P["a"] * z_bar + P["c"]
    r = x - x_rec
    L_d = np.mean(np.abs(r))
    L_mmd = _imq(z[0], z[1], C) + _imq(z_bar[0], z_bar[1], C) \
        - 0.5 * sum(_imq(z[i], z_bar[j], C) for i in range(2) for j in range(2))
    L_wgan = -np.mean(u1 * x_rec + v1)

    # theta gradients of (1 - gamma) L_d + gamma L_wgan
    dLd_dxrec = -np.sign(r) / 2
    g_a = (1 - gam) * np.sum(dLd_dxrec * z_bar) + gam * (-u1 * np.mean(z_bar))
    g_c = (1 - gam) * np.sum(dLd_dxrec) + gam * (-u1)
    # phi gradients of (1 - gamma)(L_d + lambda L_mmd)
    dLd_dzbar = dLd_dxrec * P["a"]
    dmmd_dzbar = np.array([
        _imq_db(z_bar[1 - j], z_bar[j], C) - 0.5 * sum(_imq_db(z[i], z_bar[j], C) for i in range(2))
        for j in range(2)])
    g_zbar = (1 - gam) * (dLd_dzbar + cfg.lambda_mmd * dmmd_dzbar)
    g_p, g_q = np.sum(g_zbar * x), np.sum(g_zbar)

    new = dict(a=_adam_first_step(P["a"], g_a, lr_g, b1, b2, eps),
               c=_adam_first_step(P["c"], g_c, lr_g, b1, b2, eps),
               p=_adam_first_step(P["p"], g_p, lr_e, b1, b2, eps),
               q=_adam_first_step(P["q"], g_q, lr_e, b1, b2, eps),
               u=u1, v=v1)
    return dict(L_f=L_f, L_d=L_d, L_mmd=L_mmd, L_wgan=L_wgan), new


def run_oracle(gamma=0.3, seed=0):
    """Run one step and the hand computation; returns (record, hand losses,
    parameters after, hand parameters)."""
    state, cfg = linear_1d_state(gamma, seed)
    before = _params(state)
    rec = wpp_step(state, keep_samples=True)
    losses, new = hand_wpp(before, rec["samples"], cfg)
    return rec, losses, _params(state), new


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _same_params(m1, m2):
    return all(torch.equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))


def _ring_cfg(**kw):
    base = dict(batch_size=32, iterations=5, n_critic=3, log_every=0, seed=0)
    base.update(kw)
    return make_synthetic_dataset("rings", {"std": 0.1}, 512, 0), TrainConfig(**base)


def gamma_zero_matches_wae(steps=5):
    """Wasserstein++ at gamma = 0 against WAE-MMD from the same seed: losses and
    G, F parameters must agree bit for bit after every step."""
    ds, cfg = _ring_cfg(gamma=0.0)
    a = init_generator_state("wpp", ds, cfg, SMALL_ARCH)
    b = init_generator_state("wae-mmd", ds, cfg, SMALL_ARCH)
    for _ in range(steps):
        ra, rb = wpp_step(a), wae_mmd_step(b)
        if ra["L_d"] != rb["L_d"] or ra["L_mmd"] != rb["L_mmd"]:
            return False
    return all(_same_params(a.models[r], b.models[r]) for r in ("generator", "wae-encoder"))


def gamma_one_matches_wgan():
    """Wasserstein++ at gamma = 1 against one WGAN-GP generator update that uses
    the same (post-update) critic on ``z = F(x)``.  Returns (G equal, F untouched,
    adversarial losses equal)."""
    ds, cfg = _ring_cfg(gamma=1.0, n_critic=2)
    a = init_generator_state("wpp", ds, cfg, SMALL_ARCH)
    G0 = copy.deepcopy(a.models["generator"])
    F0 = copy.deepcopy(a.models["wae-encoder"])
    rec = wpp_step(a, keep_samples=True)
    ref = init_generator_state("wgan-gp", ds, cfg, SMALL_ARCH,
                               models={"generator": G0,
                                       "critic": copy.deepcopy(a.models["critic"])})
    with torch.no_grad():
        z_bar = F0(rec["samples"]["x"])
    l_wgan = adversarial_generator_update(ref, z_bar)
    return (_same_params(a.models["generator"], G0), _same_params(a.models["wae-encoder"], F0),
            l_wgan == rec["L_wgan"])
