"""bangforge: CPU training with batch-adjusted gradient balancing plus an
adversarial-robustness evaluation harness (gradient-sign and hot/cold attacks,
perceptual similarity scoring, Gaussian-noise checkpoint sweeps)."""

__version__ = "0.1.0"
