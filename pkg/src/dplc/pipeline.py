"""Stage orchestration: generator, CAE table, codecs and baselines for a sweep.

Ordering: the CAE baseline is trained at every sweep rate first, because the
MMD and GC coefficients at each rate are scaled by its tabulated MSE.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import torch

from dplc.codecs import Codec
from dplc.config import ExperimentConfig, dump_config
from dplc.data import (DatasetHandle, PriorSpec, derive_seed, load_image_dataset,
                       make_synthetic_dataset)
from dplc.divergences import RandomConvEmbedder
from dplc.evaluation import (SweepCell, SweepReport, eval_mse, generator_samples,
                             run_rate_sweep)
from dplc.models import ModelHandle, parameter_fingerprint, save_checkpoint
from dplc.reporting import plot_sweep, write_loss_csv, write_metrics_csv
from dplc.training import (codec_from_checkpoint, lambda_schedule, train_cae, train_codec,
                           train_gc, train_generator)

logger = logging.getLogger(__name__)

TAG_ALGO = {"dplc-wae": "wae-mmd", "dplc-wgan-gp": "wgan-gp", "dplc-wpp": "wpp"}


def load_dataset(cfg: ExperimentConfig) -> tuple[DatasetHandle, DatasetHandle]:
    d = cfg.dataset
    if d.kind == "image-folder":
        full = load_image_dataset(d.path, d.resolution, cfg.seed)
    else:
        full = make_synthetic_dataset(d.kind, d.params or None, d.n, cfg.seed)
    return full.split(d.test_fraction, d.max_test)


def config_fingerprint(cfg: ExperimentConfig) -> str:
    import hashlib
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


class Experiment:
    """Lazily trains and caches every model a sweep needs; writes into ``run_dir``."""

    def __init__(self, cfg: ExperimentConfig, run_dir: str | Path | None = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.train_set, self.test_set = load_dataset(cfg)
        self.fingerprint = config_fingerprint(cfg)
        self.prior = PriorSpec("standard-normal", cfg.model.latent_dim)
        self.generators: dict[str, ModelHandle] = {}
        self.cae: dict[float, Codec] = {}
        self.cae_mse: dict[float, float] = {}
        self.cells: dict[tuple[str, float], SweepCell] = {}
        self.lambdas: dict[str, float] = {}
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.yaml").write_text(dump_config(cfg))

    def _save(self, result, name: str) -> None:
        if self.run_dir is None:
            return
        save_checkpoint(result.checkpoint, self.run_dir / f"{name}.pt")
        write_loss_csv(result.history, self.run_dir / f"{name}_loss.csv")

    def _rates(self) -> list[float]:
        return sorted(float(r) for r in self.cfg.sweep.rates)

    def generator(self, algo: str) -> ModelHandle:
        if algo not in self.generators:
            logger.info("training generator with %s", algo)
            res = train_generator(algo, self.train_set, self.cfg.train_config(algo),
                                  self.cfg.model, self.fingerprint)
            self._save(res, f"generator_{algo}")
            G = res.checkpoint.model("generator")
            G.requires_grad_(False)
            self.generators[algo] = G
        return self.generators[algo]

    def cae_table(self) -> dict[float, float]:
        for rate in self._rates():
            self.cae_cell(rate)
        return dict(self.cae_mse)

    def cae_cell(self, rate: float) -> SweepCell:
        key = ("cae", rate)
        if key not in self.cells:
            res = train_cae(self.train_set, int(rate), self.cfg.train_config("cae"),
                            self.cfg.model, self.fingerprint)
            self._save(res, f"cae_r{rate:g}")
            codec = codec_from_checkpoint(res.checkpoint)
            self.cae_mse[rate] = eval_mse(codec, self.test_set, self.cfg.sweep.n_eval,
                                          derive_seed(self.cfg.seed, "cae-table"))
            self.cells[key] = SweepCell(codec, res.checkpoint.iteration)
        return self.cells[key]

    def _lambda(self, base: float, rate: float) -> float:
        return lambda_schedule(rate, self.cae_table(), base, self.cfg.lambdas.reference_rate)

    def dplc_cell(self, tag: str, rate: float) -> SweepCell:
        key = (tag, rate)
        if key not in self.cells:
            G = self.generator(TAG_ALGO[tag])
            lam = self._lambda(self.cfg.lambdas.mmd_base, rate)
            res = train_codec(G, int(rate), self.train_set, self.cfg.train_config("codec"),
                              self.cfg.model, lam, self.fingerprint)
            self._save(res, f"codec_{tag}_r{rate:g}")
            self.lambdas[f"{tag}@{rate:g}"] = lam
            prior = self.prior

            def sampler(n, seed, G=G):
                return generator_samples(G, prior, n, seed)

            self.cells[key] = SweepCell(codec_from_checkpoint(res.checkpoint, G),
                                        res.checkpoint.iteration, sampler)
        return self.cells[key]

    def gc_cell(self, rate: float) -> SweepCell:
        key = ("gc", rate)
        if key not in self.cells:
            lam = self._lambda(self.cfg.lambdas.gc_base, rate)
            res = train_gc(self.train_set, int(rate), self.cfg.train_config("gc"),
                           self.cfg.model, lam, self.fingerprint)
            self._save(res, f"gc_r{rate:g}")
            self.lambdas[f"gc@{rate:g}"] = lam
            self.cells[key] = SweepCell(codec_from_checkpoint(res.checkpoint),
                                        res.checkpoint.iteration)
        return self.cells[key]

    def cell(self, tag: str, rate: float) -> SweepCell:
        if tag == "cae":
            return self.cae_cell(rate)
        if tag == "gc":
            return self.gc_cell(rate)
        return self.dplc_cell(tag, rate)

    def embedder(self):
        if len(self.test_set.sample_shape) == 3:
            return RandomConvEmbedder(self.test_set.sample_shape[0],
                                      self.cfg.sweep.embedder_features,
                                      derive_seed(self.cfg.seed, "embedder"))
        return None

    def sweep(self, run_id: str = "run") -> SweepReport:
        s = self.cfg.sweep
        if any(t != "cae" for t in s.methods):
            self.cae_table()
        report = run_rate_sweep(s.methods, s.rates, self.test_set, self.cell, run_id, s.n_eval,
                                s.pv_codes, s.pv_draws, self.embedder(), self.cfg.seed)
        if self.run_dir is not None:
            write_metrics_csv(report.records, self.run_dir / "metrics.csv")
            plot_sweep(report, self.run_dir)
            meta = {"seed": self.cfg.seed, "config_fingerprint": self.fingerprint,
                    "cae_mse": {f"{k:g}": v for k, v in self.cae_mse.items()},
                    "lambdas": self.lambdas,
                    "generator_fingerprints": {a: parameter_fingerprint(g)
                                               for a, g in self.generators.items()}}
            (self.run_dir / "summary.json").write_text(json.dumps(meta, indent=2))
        return report


def seeded_threads(n: int = 1) -> None:
    """Single-threaded kernels make reruns bit-identical on CPU."""
    torch.set_num_threads(n)
