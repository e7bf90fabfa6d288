"""Distribution-preserving lossy compression: generators, rate-constrained codecs,
baselines and evaluation."""

__version__ = "0.1.0"
