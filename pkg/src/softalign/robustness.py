"""Sign-gradient adversarial attacks and CIFAR-10-C corruption accuracy.

Attacks operate on raw pixels in [0, 1]. Standardisation is part of the
model (``stats``), so input gradients are chained through it. Gradients are
always true backpropagation gradients, independent of the training rule.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import (Dataset, NormalizationStats, apply_stats, hwc_to_chw_flat,
                     load_npy_labels, read_npy_rows_u8)
from .errors import DataIOError, FormatError, InvalidArgumentError
from .metrics import write_rows
from .network import (BackwardRule, NetworkParams, backward, evaluate, forward,
                      loss_and_output_delta)

CORRUPTIONS = (
    "gaussian_noise", "shot_noise", "impulse_noise",
    "defocus_blur", "glass_blur", "motion_blur", "zoom_blur",
    "snow", "frost", "fog", "brightness",
    "contrast", "elastic_transform", "pixelate", "jpeg_compression",
)
SEVERITY_ROWS = 10_000
CIFAR10C_SHAPE = (50_000, 32, 32, 3)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    iterations: int = 1
    step_size: float | None = None
    random_start: bool = False
    clip_range: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidArgumentError("epsilon must be >= 0")
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise InvalidArgumentError("step_size must be > 0")


def _default_step(epsilon, step_size, divisor):
    if step_size is not None:
        return step_size
    step = epsilon / divisor
    return step if step > 0 else None  # eps = 0 (or underflow): step falls back to eps


def bim_config(epsilon: float, iterations: int = 10, step_size: float | None = None, **kw) -> AttackConfig:
    return AttackConfig(epsilon, iterations, _default_step(epsilon, step_size, 10), **kw)


def pgd_config(epsilon: float, iterations: int = 20, step_size: float | None = None,
               random_start: bool = True, **kw) -> AttackConfig:
    return AttackConfig(epsilon, iterations, _default_step(epsilon, step_size, 4), random_start, **kw)


def input_gradient(params: NetworkParams, x: np.ndarray, y, stats: NormalizationStats | None = None
                   ) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to raw pixels."""
    x = np.asarray(x, dtype=np.float64)
    cache = forward(params, apply_stats(x, stats))
    _, delta_out = loss_and_output_delta(cache, y)
    grads = backward(BackwardRule.exact_transpose(), params, cache, delta_out)
    g = grads.deltas[1] @ params.weights[0]
    if stats is not None:
        g = g / stats.std
    return g


def _clip(x, cfg: AttackConfig):
    if cfg.clip_range is None:
        return x
    return np.clip(x, *cfg.clip_range)


def fgsm(params, x, y, epsilon: float, stats=None, clip: bool = True) -> np.ndarray:
    """``x + epsilon * sign(grad)``, clipped to [0, 1]; sign(0) = 0."""
    if epsilon < 0:
        raise InvalidArgumentError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    x_adv = x + epsilon * np.sign(input_gradient(params, x, y, stats))
    return np.clip(x_adv, 0.0, 1.0) if clip else x_adv


def _iterate(params, x0, y, cfg: AttackConfig, stats, rng=None) -> np.ndarray:
    eps = cfg.epsilon
    step = cfg.step_size if cfg.step_size is not None else eps
    x = x0.copy()
    if cfg.random_start:
        if rng is None:
            raise InvalidArgumentError("random_start needs an rng")
        x = _clip(x0 + rng.uniform(-eps, eps, size=x0.shape), cfg)
    lo, hi = x0 - eps, x0 + eps
    for _ in range(cfg.iterations):
        x = x + step * np.sign(input_gradient(params, x, y, stats))
        x = _clip(np.clip(x, lo, hi), cfg)
    return x


def bim(params, x, y, cfg: AttackConfig, stats=None) -> np.ndarray:
    """Iterated sign steps, projected onto the epsilon ball after each one."""
    x0 = np.asarray(x, dtype=np.float64)
    return _iterate(params, x0, y, replace(cfg, random_start=False), stats)


def pgd(params, x, y, cfg: AttackConfig, stats=None, rng: np.random.Generator | None = None
        ) -> np.ndarray:
    """BIM with an optional uniform random start inside the epsilon ball."""
    x0 = np.asarray(x, dtype=np.float64)
    return _iterate(params, x0, y, cfg, stats, rng)


ATTACKS = ("fgsm", "bim", "pgd")


def run_attack(method: str, params, x, y, epsilon: float, stats=None, rng=None, **overrides):
    if method == "fgsm":
        return fgsm(params, x, y, epsilon, stats)
    if method == "bim":
        return bim(params, x, y, bim_config(epsilon, **overrides), stats)
    if method == "pgd":
        return pgd(params, x, y, pgd_config(epsilon, **overrides), stats, rng)
    raise InvalidArgumentError(f"unknown attack {method!r}")


def attack_curve(params, test: Dataset, method: str, epsilons, stats=None, batch_size: int = 1000,
                 seed: int = 0, **overrides) -> list[tuple[float, float]]:
    """Accuracy on adversarially perturbed test inputs for each epsilon.

    epsilon = 0 is scored on the untouched inputs, so it equals the clean
    accuracy exactly.
    """
    epsilons = list(epsilons)
    if epsilons != sorted(epsilons):
        raise InvalidArgumentError("epsilon list must be sorted ascending")
    out = []
    for k, eps in enumerate(epsilons):
        if eps == 0:
            acc = evaluate(params, test, batch_size, stats)[0]
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
            adv = []
            for start in range(0, len(test), batch_size):
                xb = test.images[start:start + batch_size]
                yb = test.labels[start:start + batch_size]
                adv.append(run_attack(method, params, xb, yb, eps, stats, rng, **overrides))
            adv_ds = replace(test, images=np.concatenate(adv) if adv else test.images)
            acc = evaluate(params, adv_ds, batch_size, stats)[0]
        out.append((float(eps), float(acc)))
    return out


def write_attack_csv(curve, path):
    write_rows(path, ["epsilon", "accuracy"], curve)


# ---------------------------------------------------------------------------
# Corruptions
# ---------------------------------------------------------------------------

@dataclass
class CorruptionResult:
    severity: int
    accuracies: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.accuracies.values())))


def load_corruption(directory, name: str, severity: int, labels: np.ndarray | None = None) -> Dataset:
    """The severity slice of one CIFAR-10-C corruption as a channel-major Dataset."""
    if not 1 <= severity <= 5:
        raise InvalidArgumentError(f"severity must be in 1..5, got {severity}")
    path = os.path.join(directory, f"{name}.npy")
    if not os.path.exists(path):
        raise DataIOError(f"missing corruption file for {name}: {path}")
    start, stop = (severity - 1) * SEVERITY_ROWS, severity * SEVERITY_ROWS
    shape, rows = read_npy_rows_u8(path, start, stop)
    if tuple(shape) != CIFAR10C_SHAPE:
        raise FormatError(f"{path}: shape {shape}, expected {list(CIFAR10C_SHAPE)}")
    if labels is None:
        labels = load_npy_labels(os.path.join(directory, "labels.npy"))
    lab = np.asarray(labels)[start:stop] if len(labels) == CIFAR10C_SHAPE[0] else np.asarray(labels)
    return Dataset(hwc_to_chw_flat(rows).astype(np.float64) / 255.0, lab.astype(np.int64), 10, (3, 32, 32))


def corruption_eval(params, directory, severity: int, stats=None, labels=None,
                    batch_size: int = 1000) -> CorruptionResult:
    """Accuracy on each of the 15 corruptions at one severity level."""
    if not 1 <= severity <= 5:
        raise InvalidArgumentError(f"severity must be in 1..5, got {severity}")
    missing = [c for c in CORRUPTIONS if not os.path.exists(os.path.join(directory, f"{c}.npy"))]
    if missing:
        raise DataIOError(f"missing corruption file(s): {', '.join(missing)}")
    if labels is None:
        labels = load_npy_labels(os.path.join(directory, "labels.npy"))
    result = CorruptionResult(severity)
    for name in CORRUPTIONS:
        ds = load_corruption(directory, name, severity, labels)
        result.accuracies[name] = evaluate(params, ds, batch_size, stats)[0]
    return result


def write_corruption_csv(result: CorruptionResult, path):
    write_rows(path, ["corruption", "severity", "accuracy"],
               [(name, result.severity, acc) for name, acc in result.accuracies.items()])
