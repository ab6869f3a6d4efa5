"""Training loop, checkpoint schedule, noise robustness protocol, grid sweeps.

Determinism contract: a TrainRun (including its seed) fixes every byte of
every output.  Randomness comes from named streams derived from the seed:
weight init from the architecture builders, one persistent dropout stream
(checkpointed and restored on resume), a per-epoch permutation stream for
batch composition, and per-(std, image) streams for noise trials so draws
are paired across checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bang import (
    AllBlankBatch,
    BangConfig,
    SgdMomentum,
    bang_exponents,
    bang_scales,
    effective_epsilon,
    lr_at,
    per_sample_norms,
    policy_from_dict,
)
from .checkpoint import Checkpoint
from .datasets import LabeledDataset
from .network import (
    ARCH_BUILDERS,
    Network,
    Normalization,
    backward_deltas,
    forward,
    loss_seed_delta,
    predict,
)
from .tensorops import clamp_round_pixels

_DROPOUT_TAG = 223
_EPOCH_TAG = 211
_NOISE_TAG = 227


class DivergedLoss(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainRun:
    """Everything that determines a training run, serializable for manifests."""

    arch: str
    dataset_id: str
    bang: BangConfig
    batch_size: int
    iterations: int
    checkpoint_interval: int
    seed: int
    lr_policy: object
    momentum: float = 0.9
    weight_decay: float = 0.0
    input_centering: str = "none"  # or "train-channel-means"

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "dataset_id": self.dataset_id,
            "bang": self.bang.to_dict(), "batch_size": self.batch_size,
            "iterations": self.iterations,
            "checkpoint_interval": self.checkpoint_interval, "seed": self.seed,
            "lr_policy": self.lr_policy.to_dict(), "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "input_centering": self.input_centering,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainRun":
        d = dict(d)
        d["bang"] = BangConfig.from_dict(d["bang"])
        d["lr_policy"] = policy_from_dict(d["lr_policy"])
        return TrainRun(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).digest()


@dataclass
class StepInfo:
    loss: float
    eta_mean: dict[str, float]
    skipped_layers: list[str]
    deltas: dict[str, np.ndarray]
    correct_fraction: float


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((_EPOCH_TAG, seed, epoch)).permutation(n)


def bang_train_step(net: Network, optimizer: SgdMomentum, cfg: BangConfig,
                    trace, labels: np.ndarray, lr: float) -> StepInfo:
    """One weight update from an existing training-mode forward trace.

    Deltas are computed once, untouched by the balancing; each weighted layer
    then combines its per-sample contributions with its own eta vector.  A
    layer whose batch is entirely blank (all norms at tolerance) is skipped:
    weights and momentum stay as they are for this step.
    """
    seed_delta = loss_seed_delta(trace, labels)
    entries, _ = backward_deltas(net, trace, seed_delta)
    correct = trace.logits.argmax(axis=1) == labels
    eta_mean: dict[str, float] = {}
    skipped: list[str] = []
    deltas: dict[str, np.ndarray] = {}
    for layer, delta, cache in entries:
        deltas[layer.name] = delta
        eps = cfg.epsilon_for(layer.name)
        beta = cfg.beta_for(layer.name)
        if cfg.norm_source == "output_delta":
            norms = per_sample_norms(delta)
        else:
            gw_i, gb_i = layer.grads_per_sample(delta, cache)
            flat = np.concatenate(
                [gw_i.reshape(len(labels), -1), gb_i.reshape(len(labels), -1)], axis=1)
            norms = per_sample_norms(flat)
        eps_eff = effective_epsilon(eps, correct, cfg.incorrect_scale)
        try:
            rho = bang_exponents(norms, eps_eff, cfg.zero_norm_tolerance)
        except AllBlankBatch:
            skipped.append(layer.name)
            eta_mean[layer.name] = float("nan")
            continue
        eta = bang_scales(norms, rho, cfg.zero_norm_tolerance)
        gw, gb = layer.grads_combined(delta, cache, eta)
        layer.w = optimizer.step(f"{layer.name}.w", layer.w, beta * gw, lr)
        layer.b = optimizer.step(f"{layer.name}.b", layer.b, beta * gb, lr)
        eta_mean[layer.name] = float(eta.mean())
    return StepInfo(loss=float(trace.losses.mean()), eta_mean=eta_mean,
                    skipped_layers=skipped, deltas=deltas,
                    correct_fraction=float(correct.mean()))


def _snapshot(net: Network, optimizer: SgdMomentum, rng: np.random.Generator,
              run: TrainRun, iteration: int) -> Checkpoint:
    return Checkpoint(
        iteration=iteration,
        params={k: v.copy() for k, v in net.params().items()},
        momentum={k: v.copy() for k, v in optimizer.state().items()},
        rng_state=rng.bit_generator.state,
        config_digest=run.digest(),
        meta={"arch": net.arch_id, "seed": run.seed,
              "normalization": net.normalization.to_meta(),
              "run": run.to_dict()},
    )


def _build_net(run: TrainRun, dataset: LabeledDataset) -> Network:
    net = ARCH_BUILDERS[run.arch](run.seed)
    if run.input_centering == "train-channel-means":
        means = dataset.images.astype(np.float64).mean(axis=(0, 2, 3))
        net.normalization = Normalization(offset=means[:, None, None], scale=1.0)
    elif run.input_centering != "none":
        raise ValueError(f"unknown input_centering {run.input_centering!r}")
    return net


def train(run: TrainRun, dataset: LabeledDataset, log=None,
          _resume_from: Checkpoint | None = None) -> list[Checkpoint]:
    """Run the schedule, returning checkpoints at iteration 0 (or the resume
    point), every checkpoint_interval, and the final iteration."""
    if run.batch_size > len(dataset):
        raise ValueError(f"batch size {run.batch_size} exceeds dataset {len(dataset)}")
    net = _build_net(run, dataset)
    optimizer = SgdMomentum(net.params(), run.momentum, run.weight_decay)
    rng = np.random.default_rng((_DROPOUT_TAG, run.seed))
    start = 0
    if _resume_from is not None:
        ckpt = _resume_from
        if ckpt.config_digest != run.digest():
            raise ValueError("checkpoint config digest does not match this run")
        net.set_params(ckpt.params)
        net.normalization = Normalization.from_meta(ckpt.meta["normalization"])
        optimizer.load_state(ckpt.momentum)
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.iteration

    batches_per_epoch = len(dataset) // run.batch_size
    checkpoints = [_snapshot(net, optimizer, rng, run, start)]
    perm, perm_epoch = None, -1
    for it in range(start, run.iterations):
        epoch, slot = divmod(it, batches_per_epoch)
        if epoch != perm_epoch:
            perm = epoch_permutation(run.seed, epoch, len(dataset))
            perm_epoch = epoch
        ids = perm[slot * run.batch_size:(slot + 1) * run.batch_size]
        x = dataset.images[ids].astype(np.float64)
        labels = dataset.labels[ids]
        trace = forward(net, x, labels, train=True, rng=rng)
        mean_loss = float(trace.losses.mean())
        if not np.isfinite(mean_loss):
            raise DivergedLoss(it, mean_loss)
        lr = lr_at(run.lr_policy, it)
        info = bang_train_step(net, optimizer, run.bang, trace, labels, lr)
        if log is not None:
            log({"iteration": it, "mean_loss": info.loss, "lr": lr,
                 "eta_mean": info.eta_mean,
                 "skipped_layers": info.skipped_layers,
                 "batch_accuracy": info.correct_fraction})
        if (it + 1) % run.checkpoint_interval == 0 or (it + 1) == run.iterations:
            checkpoints.append(_snapshot(net, optimizer, rng, run, it + 1))
    return checkpoints


def resume(run: TrainRun, dataset: LabeledDataset, ckpt: Checkpoint,
           log=None) -> list[Checkpoint]:
    return train(run, dataset, log=log, _resume_from=ckpt)


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = ARCH_BUILDERS[ckpt.meta["arch"]](ckpt.meta["seed"])
    net.set_params(ckpt.params)
    net.normalization = Normalization.from_meta(ckpt.meta["normalization"])
    return net


def evaluate_accuracy(net: Network, dataset: LabeledDataset,
                      batch_size: int = 512) -> float:
    preds = predict(net, dataset.images, batch_size=batch_size)
    return float((preds == dataset.labels).mean())


@dataclass
class StableSubset:
    ids: np.ndarray
    shortfall: dict[int, int]  # class -> found count, only where short


def select_stable_subset(checkpoint_sets: list[list[Checkpoint]],
                         dataset: LabeledDataset, per_class: int) -> StableSubset:
    """First per_class images per class (dataset order) that every checkpoint
    of every model classifies correctly; shortfalls are reported, not fatal."""
    mask = np.ones(len(dataset), dtype=bool)
    for checkpoints in checkpoint_sets:
        for ckpt in checkpoints:
            net = network_from_checkpoint(ckpt)
            mask &= predict(net, dataset.images) == dataset.labels
    ids: list[int] = []
    shortfall: dict[int, int] = {}
    for cls in range(dataset.num_classes):
        cls_ids = np.nonzero(mask & (dataset.labels == cls))[0][:per_class]
        ids.extend(int(i) for i in cls_ids)
        if len(cls_ids) < per_class:
            shortfall[cls] = len(cls_ids)
    return StableSubset(ids=np.asarray(sorted(ids), dtype=np.int64),
                        shortfall=shortfall)


@dataclass
class NoiseReport:
    """flip fraction per (checkpoint iteration, noise std), averaged over the
    evaluated image set."""

    cells: dict[tuple[int, float], float]
    image_ids: list[int]
    trials: int
    stds: list[float]
    checkpoint_iterations: list[int]

    def at(self, iteration: int, std: float) -> float:
        return self.cells[(iteration, std)]

    def to_rows(self) -> list[dict]:
        rows = []
        for it in self.checkpoint_iterations:
            for std in self.stds:
                rows.append({"checkpoint_iter": it, "std": std,
                             "mean_flip_fraction": self.cells[(it, std)],
                             "n_images": len(self.image_ids),
                             "n_trials": self.trials})
        return rows


NOISE_CSV_COLUMNS = ["checkpoint_iter", "std", "mean_flip_fraction",
                     "n_images", "n_trials"]


def noise_sweep(checkpoints: list[Checkpoint], dataset: LabeledDataset,
                image_ids, stds, trials: int, seed: int) -> NoiseReport:
    """Gaussian pixel noise in raw [0, 255] space, clamp-rounded, evaluated
    against the original (true) label.  Noise fields are keyed by
    (seed, std index, image id), identical for every checkpoint."""
    image_ids = [int(i) for i in image_ids]
    stds = [float(s) for s in stds]
    cells: dict[tuple[int, float], float] = {}
    for ckpt in checkpoints:
        net = network_from_checkpoint(ckpt)
        for s_idx, std in enumerate(stds):
            flips = np.empty(len(image_ids))
            for j, img_id in enumerate(image_ids):
                x0 = dataset.images[img_id].astype(np.float64)
                label = dataset.labels[img_id]
                if std == 0.0:
                    noisy = np.repeat(x0[None], trials, axis=0)
                else:
                    rng = np.random.default_rng((_NOISE_TAG, seed, s_idx, img_id))
                    noise = rng.normal(0.0, std, size=(trials,) + x0.shape)
                    noisy = clamp_round_pixels(x0[None] + noise)
                preds = predict(net, noisy)
                flips[j] = float((preds != label).mean())
            cells[(ckpt.iteration, std)] = float(flips.mean())
    return NoiseReport(cells=cells, image_ids=image_ids, trials=trials,
                       stds=stds,
                       checkpoint_iterations=[c.iteration for c in checkpoints])


@dataclass
class GridReport:
    rows: list[dict] = field(default_factory=list)

    def cell(self, beta: float, epsilon: float) -> dict:
        for row in self.rows:
            if row["beta"] == beta and row["epsilon"] == epsilon:
                return row
        raise KeyError((beta, epsilon))


GRID_CSV_COLUMNS = ["beta", "epsilon", "accuracy", "fgs_rate", "hc1_pass_mean"]


def _grid_cell(args):
    run_dict, train_ds, test_ds, beta, eps, eval_images, max_steps = args
    from .attacks import attack_dataset  # local import keeps the worker light

    base = TrainRun.from_dict(run_dict)
    run = replace(base, bang=replace(base.bang, beta=beta, epsilon=eps))
    row = {"beta": beta, "epsilon": eps, "accuracy": float("nan"),
           "fgs_rate": float("nan"), "hc1_pass_mean": float("nan")}
    try:
        final = train(run, train_ds)[-1]
    except DivergedLoss:
        return row
    net = network_from_checkpoint(final)
    row["accuracy"] = evaluate_accuracy(net, test_ds)
    ids = np.arange(min(eval_images, len(test_ds)))
    fgs = attack_dataset(net, test_ds, "fgs", image_ids=ids, max_steps=max_steps)
    row["fgs_rate"] = float("nan") if fgs.no_attempts else fgs.success_rate
    hc1 = attack_dataset(net, test_ds, "hc1", image_ids=ids, max_steps=max_steps)
    pass_mean = hc1.summary()["pass_mean"]
    row["hc1_pass_mean"] = float("nan") if pass_mean is None else pass_mean
    return row


def grid_sweep(base_run: TrainRun, train_ds: LabeledDataset,
               test_ds: LabeledDataset, beta_grid, epsilon_grid,
               eval_images: int = 500, max_steps: int = 255,
               threads: int = 1) -> GridReport:
    """One model per (beta, epsilon) cell; a diverging cell yields NaNs but
    the sweep continues.  Results are merged in grid order regardless of the
    worker count."""
    tasks = [(base_run.to_dict(), train_ds, test_ds, float(b), float(e),
              eval_images, max_steps)
             for b in beta_grid for e in epsilon_grid]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_grid_cell, tasks))
    else:
        rows = [_grid_cell(t) for t in tasks]
    return GridReport(rows=rows)
