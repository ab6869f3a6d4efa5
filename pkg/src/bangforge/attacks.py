"""Adversarial direction construction and minimal-perturbation search.

Two direction generators, both in raw [0, 255] pixel space:

  * gradient-sign: sign of dloss/dpixels at the true label; an exactly-zero
    gradient is a "blank" (the attack has nothing to follow).
  * hot/cold, single target: the most similar class (highest non-true logit,
    ties to the lowest index) is hot, the true class is cold; the direction
    is grad(logit_hot - logit_cold) normalized to unit max magnitude.

The search walks x_k = clamp_round(x_0 + k * direction) for k = 1, 2, ... and
returns the first k whose prediction differs from the original label.  It
stops early (exhausted) once x_k reaches the saturation endpoint where every
moving pixel is pinned at 0 or 255, since no later k can change anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .datasets import LabeledDataset
from .network import Network, forward, input_gradient_batch, predict
from .tensorops import clamp_round_pixels


@dataclass
class AttackResult:
    original: np.ndarray
    original_label: int
    success: bool
    steps: int
    adversarial: np.ndarray | None = None
    adversarial_label: int | None = None
    failure_reason: str | None = None  # None | "blank_gradient" | "exhausted"
    linf: float | None = None
    pass_value: float | None = None


@dataclass
class AttackReport:
    """Campaign aggregate over the correctly classified images."""

    method: str
    attempts: int
    successes: int
    blank_count: int
    exhausted_count: int
    results: list[AttackResult] = field(default_factory=list)
    image_ids: list[int] = field(default_factory=list)

    @property
    def no_attempts(self) -> bool:
        return self.attempts == 0

    @property
    def success_rate(self) -> float | None:
        if self.attempts == 0:
            return None
        return self.successes / self.attempts

    def _stat(self, key):
        vals = [getattr(r, key) for r in self.results if r.success]
        if not vals:
            return None, None
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    def summary(self) -> dict:
        pass_mean, pass_std = self._stat("pass_value")
        linf_mean, linf_std = self._stat("linf")
        return {
            "method": self.method,
            "attempts": self.attempts,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "no_attempts": self.no_attempts,
            "blank_count": self.blank_count,
            "exhausted_count": self.exhausted_count,
            "pass_mean": pass_mean, "pass_std": pass_std,
            "linf_mean": linf_mean, "linf_std": linf_std,
        }

    def to_rows(self) -> list[dict]:
        rows = []
        for image_id, r in zip(self.image_ids, self.results):
            rows.append({
                "image_id": image_id, "method": self.method,
                "success": r.success, "steps": r.steps,
                "linf": r.linf, "pass": r.pass_value,
                "failure_reason": r.failure_reason or "",
            })
        return sorted(rows, key=lambda row: row["image_id"])


CSV_COLUMNS = ["image_id", "method", "success", "steps", "linf", "pass",
               "failure_reason"]


def _logits(net: Network, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = np.empty((images.shape[0], net.output_shape[0]))
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size].astype(np.float64)
        out[start:start + chunk.shape[0]] = forward(net, chunk).logits
    return out


def fgs_direction(net: Network, image: np.ndarray, true_label: int) -> np.ndarray | None:
    """Elementwise sign in {-1, 0, +1} of the loss gradient; None if blank."""
    return fgs_directions(net, image[None], np.array([true_label]))[0]


def fgs_directions(net, images, labels, batch_size: int = 256) -> list:
    out = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size].astype(np.float64)
        objs = [("loss", int(l)) for l in labels[start:start + chunk.shape[0]]]
        grads = input_gradient_batch(net, chunk, objs)
        for g in grads:
            out.append(None if not g.any() else np.sign(g))
    return out


def hc1_direction(net: Network, image: np.ndarray, true_label: int) -> np.ndarray | None:
    """Unit-max-magnitude gradient of (most-similar logit - true logit)."""
    return hc1_directions(net, image[None], np.array([true_label]))[0]


def hc1_directions(net, images, labels, batch_size: int = 256) -> list:
    out = []
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size].astype(np.float64)
        chunk_labels = labels[start:start + chunk.shape[0]]
        logits = _logits(net, chunk)
        masked = logits.copy()
        masked[np.arange(len(chunk_labels)), chunk_labels] = -np.inf
        hot = masked.argmax(axis=1)  # argmax takes the lowest index on ties
        objs = [("logit_diff", int(h), int(c)) for h, c in zip(hot, chunk_labels)]
        grads = input_gradient_batch(net, chunk, objs)
        for g in grads:
            if not g.any():
                out.append(None)
            else:
                out.append(g / np.max(np.abs(g)))
    return out


def _saturation_limit(x0: np.ndarray, direction: np.ndarray) -> np.ndarray:
    return np.where(direction > 0, 255.0, np.where(direction < 0, 0.0, x0))


def line_search_attack(net: Network, image: np.ndarray, direction: np.ndarray,
                       original_label: int, max_steps: int = 255) -> AttackResult:
    """Smallest integer step along the direction that flips the prediction."""
    if not direction.any():
        raise ValueError("blank direction; caller should report blank_gradient")
    results = _line_search_batch(net, image[None].astype(np.float64),
                                 direction[None], np.array([original_label]),
                                 max_steps)
    return results[0]


def _line_search_batch(net, x0, directions, labels, max_steps,
                       batch_size: int = 512) -> list[AttackResult]:
    count = x0.shape[0]
    results: list[AttackResult | None] = [None] * count
    limits = _saturation_limit(x0, directions)
    active = np.arange(count)
    for k in range(1, max_steps + 1):
        cand = clamp_round_pixels(x0[active] + k * directions[active])
        preds = predict(net, cand, batch_size=batch_size)
        flipped = preds != labels[active]
        saturated = ~flipped & np.all(
            cand == limits[active], axis=tuple(range(1, cand.ndim)))
        for local in np.nonzero(flipped)[0]:
            i = active[local]
            results[i] = AttackResult(
                original=x0[i], original_label=int(labels[i]), success=True,
                steps=k, adversarial=cand[local],
                adversarial_label=int(preds[local]),
                linf=float(np.max(np.abs(cand[local] - x0[i]))))
        for local in np.nonzero(saturated)[0]:
            i = active[local]
            results[i] = AttackResult(
                original=x0[i], original_label=int(labels[i]), success=False,
                steps=k, failure_reason="exhausted")
        keep = ~flipped & ~saturated
        active = active[keep]
        if active.size == 0:
            break
    for i in active:
        results[i] = AttackResult(original=x0[i], original_label=int(labels[i]),
                                  success=False, steps=max_steps,
                                  failure_reason="exhausted")
    return results


def attack_dataset(net: Network, dataset: LabeledDataset, method: str,
                   metrics_hook=None, image_ids=None,
                   max_steps: int = 255) -> AttackReport:
    """Attack every correctly classified image; aggregate rates and metrics."""
    if method not in ("fgs", "hc1"):
        raise ValueError(f"unknown attack method {method!r}")
    if metrics_hook is None:
        metrics_hook = default_metrics_hook
    ids = np.asarray(image_ids if image_ids is not None else np.arange(len(dataset)))
    images = dataset.images[ids].astype(np.float64)
    labels = dataset.labels[ids]
    preds = predict(net, images)
    correct = preds == labels
    ids, images, labels = ids[correct], images[correct], labels[correct]

    report = AttackReport(method=method, attempts=int(correct.sum()),
                          successes=0, blank_count=0, exhausted_count=0)
    if report.attempts == 0:
        return report

    direction_fn = fgs_directions if method == "fgs" else hc1_directions
    directions = direction_fn(net, images, labels)
    blank = np.array([d is None for d in directions])

    for i in np.nonzero(blank)[0]:
        report.image_ids.append(int(ids[i]))
        report.results.append(AttackResult(
            original=images[i], original_label=int(labels[i]), success=False,
            steps=0, failure_reason="blank_gradient"))
    report.blank_count = int(blank.sum())

    live = np.nonzero(~blank)[0]
    if live.size:
        dir_stack = np.stack([directions[i] for i in live])
        outcomes = _line_search_batch(net, images[live], dir_stack,
                                      labels[live], max_steps)
        for local, result in enumerate(outcomes):
            if result.success:
                extra = metrics_hook(result.original, result.adversarial)
                result.linf = extra.get("linf", result.linf)
                result.pass_value = extra.get("pass")
                report.successes += 1
            else:
                report.exhausted_count += 1
            report.image_ids.append(int(ids[live[local]]))
            report.results.append(result)
    return report


def default_metrics_hook(original: np.ndarray, adversarial: np.ndarray) -> dict:
    score = metrics.pass_score(original, adversarial)
    return {"pass": score.pass_value,
            "linf": metrics.linf(original, adversarial)}
