"""Named experiment presets.

The four full-scale presets reproduce the reference training recipes (the
regular rows and the strongest balanced rows of the two benchmark tables);
the ci-* variants shrink data and iteration counts for desk-scale runs while
keeping every protocol intact: same batch sizes, same schedule structure,
same noise/attack protocol, epochs-based learning-rate drops rescaled to the
shorter run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .bang import BangConfig, InvPolicy, StepPolicy
from .harness import TrainRun


@dataclass(frozen=True)
class Preset:
    name: str
    arch: str
    dataset_id: str
    beta: float
    epsilon: float
    incorrect_scale: float
    batch_size: int
    iterations: int
    checkpoint_interval: int
    lr_policy: object
    input_centering: str
    train_images: int | None      # cap on the training split; None = all
    noise_stds: tuple[float, ...]
    noise_trials: int
    per_class: int
    momentum: float = 0.9

    def to_run(self, seed: int) -> TrainRun:
        return TrainRun(
            arch=self.arch, dataset_id=self.dataset_id,
            bang=BangConfig(beta=self.beta, epsilon=self.epsilon,
                            incorrect_scale=self.incorrect_scale),
            batch_size=self.batch_size, iterations=self.iterations,
            checkpoint_interval=self.checkpoint_interval, seed=seed,
            lr_policy=self.lr_policy, momentum=self.momentum,
            input_centering=self.input_centering,
        )


MNIST_STDS = tuple(float(s) for s in range(10, 101, 10))
CIFAR_STDS = tuple(float(s) for s in range(4, 41, 4))


def _lenet(name, beta, epsilon, *, ci: bool):
    return Preset(
        name=name, arch="lenet", dataset_id="mnist",
        beta=beta, epsilon=epsilon, incorrect_scale=1.0,
        batch_size=64,
        iterations=2000 if ci else 10000,
        checkpoint_interval=500,
        lr_policy=InvPolicy(base=0.01, gamma=1e-4, power=0.75),
        input_centering="none",
        train_images=10000 if ci else None,
        noise_stds=MNIST_STDS,
        noise_trials=200 if ci else 1000,
        per_class=20 if ci else 100,
    )


def _cifar(name, beta, epsilon, *, ci: bool):
    # learning-rate drops after epochs 36 and 38 of 40, rescaled to the run
    iterations = 4000 if ci else 20000
    iters_per_epoch = iterations // 40
    return Preset(
        name=name, arch="cifar10-quick", dataset_id="cifar10",
        beta=beta, epsilon=epsilon,
        incorrect_scale=0.5 if epsilon > 0 else 1.0,
        batch_size=100,
        iterations=iterations,
        checkpoint_interval=2 * iters_per_epoch,
        lr_policy=StepPolicy(base=0.001,
                             boundaries=(36 * iters_per_epoch, 38 * iters_per_epoch),
                             factor=0.1),
        input_centering="train-channel-means",
        train_images=10000 if ci else None,
        noise_stds=CIFAR_STDS,
        noise_trials=200 if ci else 1000,
        per_class=20 if ci else 100,
    )


PRESETS = {p.name: p for p in [
    _lenet("lenet-regular", beta=1.0, epsilon=0.0, ci=False),
    _lenet("lenet-bang-b1", beta=1.00, epsilon=0.815, ci=False),
    _cifar("cifar-regular", beta=1.0, epsilon=0.0, ci=False),
    _cifar("cifar-bang-b0", beta=0.40, epsilon=0.855, ci=False),
    _lenet("ci-lenet-regular", beta=1.0, epsilon=0.0, ci=True),
    _lenet("ci-lenet-bang-b1", beta=1.00, epsilon=0.815, ci=True),
    _cifar("ci-cifar-regular", beta=1.0, epsilon=0.0, ci=True),
    _cifar("ci-cifar-bang-b0", beta=0.40, epsilon=0.855, ci=True),
]}


def get_preset(name: str) -> Preset:
    key = name.lower()
    if key not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r}; known presets: {known}")
    return PRESETS[key]
