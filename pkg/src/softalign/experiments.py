"""Training runs, trainability sweeps and post-hoc analyses of checkpoints."""

from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from . import dataio
from .config import ExperimentConfig, dump_config
from .dataio import Dataset, NormalizationStats
from .errors import ConfigError, DataIOError
from .initialization import InitConfig, initialize
from .metrics import (CheckpointStore, LogEntry, TrainLog, layer_angles, write_csv,
                      write_rows)
from .network import (BackwardRule, FeedbackParams, NetworkParams, backward, evaluate,
                      flatten, forward, load_checkpoint, loss_and_output_delta,
                      save_checkpoint, unflatten)
from .optim import AdamState, adam_step, sgd_step
from . import robustness, spectral

log = logging.getLogger(__name__)

# stream ids for SeedSequence([seed, stream])
_INIT, _SUBSET, _SHUFFLE, _SPECTRAL, _ATTACK = range(5)


def stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


@dataclass
class PreparedData:
    train: Dataset  # standardised
    test: Dataset  # standardised
    raw_train: Dataset
    raw_test: Dataset
    stats: NormalizationStats


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset in ("cifar10", "cifar100"):
        return dataio.load_cifar_dir(cfg.data_dir, cfg.dataset)
    if cfg.dataset == "mnist":
        return dataio.load_mnist_dir(cfg.data_dir)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def prepare_data(cfg: ExperimentConfig, seed: int, splits=None) -> PreparedData:
    """Load (or reuse) the splits, subset them and standardise with train stats."""
    train, test = splits if splits is not None else load_splits(cfg)
    rng = stream(seed, _SUBSET)
    if cfg.train_subset:
        train = dataio.subset(train, cfg.train_subset, rng)
    if cfg.test_subset:
        # the test subset depends only on the base seed so every trial scores the same images
        test = dataio.subset(test, cfg.test_subset, stream(cfg.seed, _SUBSET + 100))
    stats = dataio.compute_stats(train)
    return PreparedData(dataio.normalize(train, stats), dataio.normalize(test, stats), train, test, stats)


def layer_dims(cfg: ExperimentConfig, n_features: int, n_classes: int) -> list[int]:
    return [n_features, *cfg.hidden, n_classes]


@dataclass
class TrialResult:
    log: TrainLog
    params: NetworkParams
    feedback: FeedbackParams
    checkpoints: CheckpointStore
    stats: NormalizationStats
    diverged: bool = False

    @property
    def max_train_acc(self) -> float:
        vals = [e.train_acc for e in self.log.entries if np.isfinite(e.train_acc)]
        return max(vals) if vals else float("nan")

    @property
    def final_test_acc(self) -> float:
        return self.log.entries[-1].test_acc


def train_trial(cfg: ExperimentConfig, trial: int = 0, data: PreparedData | None = None,
                out_dir: str | None = None) -> TrialResult:
    """Train one network; the seed is ``cfg.seed + trial``."""
    seed = cfg.seed + trial
    if data is None:
        data = prepare_data(cfg, seed)
    train, test = data.train, data.test
    dims = layer_dims(cfg, train.n_features, train.n_classes)
    init_cfg = InitConfig(cfg.a, cfg.b, cfg.effective_theta())
    params, feedback = initialize(dims, cfg.rule, init_cfg, stream(seed, _INIT))
    rule = (BackwardRule.exact_transpose() if cfg.rule == "bp"
            else BackwardRule.fixed_feedback(feedback))
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    shuffle_rng = stream(seed, _SHUFFLE)

    ckpt_dir = os.path.join(out_dir, "checkpoints") if (out_dir and cfg.save_checkpoints) else None
    store = CheckpointStore(dims, ckpt_dir)
    tlog = TrainLog(len(dims) - 2)

    def snapshot(epoch, iteration):
        tr_acc, tr_loss = evaluate(params, train, cfg.eval_batch_size)
        te_acc, te_loss = evaluate(params, test, cfg.eval_batch_size)
        # under BP the backward weights are W_l.T itself
        back = FeedbackParams([None] + [w.T for w in params.weights[1:]]) if cfg.rule == "bp" else feedback
        angles = layer_angles(params, back)
        tlog.append(LogEntry(epoch, iteration, tr_loss, tr_acc, te_loss, te_acc,
                             [a.mean for a in angles], [a.std for a in angles]))

    diverged = False
    iteration = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        snapshot(0, 0)
        store.record(params, 0)
        for epoch in range(1, cfg.epochs + 1):
            log_every = cfg.log_every if not cfg.log_epochs or epoch <= cfg.log_epochs else 0
            for xb, yb in dataio.batches(train, cfg.batch_size, shuffle_rng):
                cache = forward(params, xb)
                loss, delta = loss_and_output_delta(cache, yb)
                grads = backward(rule, params, cache, delta)
                if cfg.optimizer == "adam":
                    adam_step(adam, params, grads)
                else:
                    sgd_step(params, grads, cfg.lr)
                iteration += 1
                if not np.isfinite(loss):
                    diverged = True
                if log_every and iteration % log_every == 0:
                    snapshot(epoch, iteration)
                if cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
                    store.record(params, iteration)
            if not (log_every and iteration % log_every == 0):
                snapshot(epoch, iteration)
            if not (cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0):
                store.record(params, iteration)
            log.info("trial %d epoch %d: train acc %.4f test acc %.4f", trial, epoch,
                     tlog.entries[-1].train_acc, tlog.entries[-1].test_acc)
            if diverged:
                log.warning("trial %d diverged at epoch %d", trial, epoch)
                break

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(tlog, os.path.join(out_dir, "log.csv"))
        save_checkpoint(os.path.join(out_dir, "final.bin"), params)
    return TrialResult(tlog, params, feedback, store, data.stats, diverged)


def trial_dir(cfg: ExperimentConfig, trial: int) -> str:
    return os.path.join(cfg.out, f"trial_{trial:02d}")


def run_train(cfg: ExperimentConfig) -> list[TrialResult]:
    cfg.validate()
    splits = load_splits(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.ini"), "w") as fh:
        fh.write(dump_config(cfg))
    results = []
    for t in range(cfg.trials):
        data = prepare_data(cfg, cfg.seed + t, splits)
        results.append(train_trial(cfg, t, data, trial_dir(cfg, t)))
    return results


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("variance", "depth", "datasize")


def run_sweep(cfg: ExperimentConfig, axis: str) -> str:
    """Trainability sweep; writes ``sweep_<axis>.csv`` with one row per cell."""
    cfg.validate()
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    splits = load_splits(cfg)
    if axis == "variance":
        cells = [({"a": a, "b": b}, replace(cfg, a=a, b=b)) for a in cfg.sweep_a for b in cfg.sweep_b]
        keys = ["a", "b"]
    elif axis == "depth":
        width = cfg.hidden[0] if cfg.hidden else 512
        cells = [({"depth": d}, replace(cfg, hidden=[width] * (d - 1))) for d in cfg.sweep_depths]
        keys = ["depth"]
    else:
        cells = [({"n_train": n}, replace(cfg, train_subset=n)) for n in cfg.sweep_sizes]
        keys = ["n_train"]
    rows = []
    for values, cell_cfg in cells:
        cell_cfg = replace(cell_cfg, save_checkpoints=False)
        max_train, final_test = [], []
        for t in range(cfg.trials):
            data = prepare_data(cell_cfg, cfg.seed + t, splits)
            res = train_trial(cell_cfg, t, data)
            max_train.append(res.max_train_acc)
            final_test.append(res.final_test_acc)
        rows.append([values[k] for k in keys] + [
            float(np.mean(max_train)), float(np.std(max_train)),
            float(np.mean(final_test)), float(np.std(final_test)), cfg.trials])
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"sweep_{axis}.csv")
    write_rows(path, keys + ["max_train_acc_mean", "max_train_acc_std", "final_test_acc_mean",
                             "final_test_acc_std", "trials"], rows)
    return path


# ---------------------------------------------------------------------------
# Post-hoc analyses
# ---------------------------------------------------------------------------

def _load_ckpt(path) -> NetworkParams:
    if not os.path.exists(path):
        raise DataIOError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def spectrum_report(cfg: ExperimentConfig, oracle: spectral.HessianOracle,
                    rng: np.random.Generator) -> spectral.SpectrumReport:
    top = spectral.top_eigenvalue(oracle, rng, cfg.power_tol, cfg.power_iters)
    tr = spectral.hessian_trace(oracle, rng, cfg.trace_probes, cfg.probe)
    dens = spectral.esd_slq(oracle, rng, cfg.slq_nv, cfg.slq_q)
    return spectral.SpectrumReport(top.value, top.vector, top.converged, tr.estimate, tr.stderr,
                                   tr.n_probes, dens)


def build_oracle(cfg: ExperimentConfig, params: NetworkParams, data: PreparedData,
                 seed: int) -> spectral.HessianOracle:
    """Oracle on a fixed seeded batch of ``cfg.spectral_batch`` training samples."""
    x, y = spectral.oracle_batch(data.train, cfg.spectral_batch, stream(seed, _SPECTRAL))
    return spectral.HessianOracle(params, x, y)


def run_spectrum(cfg: ExperimentConfig, checkpoint: str, trial: int = 0,
                 landscape: bool = True) -> dict[str, str]:
    """Top eigenvalue, trace, density and perturbed landscape for one checkpoint."""
    cfg.validate()
    params = _load_ckpt(checkpoint)
    seed = cfg.seed + trial
    data = prepare_data(cfg, seed)
    oracle = build_oracle(cfg, params, data, seed)
    report = spectrum_report(cfg, oracle, stream(seed, _SPECTRAL + 1))
    os.makedirs(cfg.out, exist_ok=True)
    paths = {
        "summary": os.path.join(cfg.out, "spectrum.csv"),
        "density": os.path.join(cfg.out, "density.csv"),
    }
    write_rows(paths["summary"], ["lambda_max", "converged", "trace", "trace_stderr", "n_probes",
                                  "sigma", "n_v", "q"],
               [[report.lambda_max, int(report.converged), report.trace, report.trace_stderr,
                 report.n_probes, report.density.sigma, report.density.n_v, report.density.q]])
    spectral.write_density_csv(report.density, paths["density"])
    if landscape:
        e1, e2 = spectral.top_eigenpairs(oracle, stream(seed, _SPECTRAL + 2), 2,
                                         cfg.power_tol, cfg.power_iters)
        r = cfg.landscape_radius
        grid = spectral.centered_grid(-r, r, cfg.landscape_points)
        loss = spectral.perturbed_landscape(params, e1.vector, e2.vector, grid, grid, data.test,
                                            batch_size=cfg.eval_batch_size)
        paths["landscape"] = os.path.join(cfg.out, "landscape.csv")
        spectral.write_grid_csv(grid, grid, loss, paths["landscape"])
    return paths


def trajectory_checkpoints(run_dir: str) -> np.ndarray:
    files = sorted(glob.glob(os.path.join(run_dir, "checkpoints", "ckpt_*.bin")))
    if len(files) < 3:
        raise DataIOError(f"need >= 3 checkpoints under {run_dir}/checkpoints, found {len(files)}")
    return np.stack([flatten(load_checkpoint(f)) for f in files])


def run_landscape(cfg: ExperimentConfig, run_dir: str, trial: int = 0) -> dict[str, str]:
    """PCA projection of a recorded trajectory plus the training-loss surface."""
    cfg.validate()
    traj = trajectory_checkpoints(run_dir)
    theta_final = traj[-1]
    dims = load_checkpoint(sorted(glob.glob(os.path.join(run_dir, "checkpoints", "ckpt_*.bin")))[0]).dims
    data = prepare_data(cfg, cfg.seed + trial)

    def train_loss(vec):
        return evaluate(unflatten(vec, dims), data.train, cfg.eval_batch_size)[1]

    res = spectral.pca_trajectory(traj, theta_final, train_loss, cfg.pca_points)
    os.makedirs(cfg.out, exist_ok=True)
    paths = {
        "trajectory": os.path.join(cfg.out, "trajectory.csv"),
        "surface": os.path.join(cfg.out, "pca_surface.csv"),
        "explained": os.path.join(cfg.out, "pca_explained.csv"),
    }
    write_rows(paths["trajectory"], ["checkpoint", "pc1", "pc2"],
               [[i, p[0], p[1]] for i, p in enumerate(res.path)])
    spectral.write_grid_csv(res.alphas, res.betas, res.surface, paths["surface"])
    write_rows(paths["explained"], ["pc1", "pc2", "degenerate"],
               [[res.explained[0], res.explained[1], int(res.degenerate)]])
    return paths


def attack_overrides(cfg: ExperimentConfig) -> dict:
    kw = {}
    if cfg.attack_iterations:
        kw["iterations"] = cfg.attack_iterations
    if cfg.attack_step:
        kw["step_size"] = cfg.attack_step
    return kw


def run_attack(cfg: ExperimentConfig, checkpoint: str, method: str, epsilons,
               trial: int = 0) -> str:
    cfg.validate()
    params = _load_ckpt(checkpoint)
    data = prepare_data(cfg, cfg.seed + trial)
    kw = attack_overrides(cfg) if method != "fgsm" else {}
    curve = robustness.attack_curve(params, data.raw_test, method, epsilons, data.stats,
                                    cfg.eval_batch_size, seed=cfg.seed, **kw)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"attack_{method}.csv")
    robustness.write_attack_csv(curve, path)
    return path


def run_corruption(cfg: ExperimentConfig, checkpoint: str, severity: int,
                   trial: int = 0) -> tuple[str, float]:
    cfg.validate()
    if not 1 <= severity <= 5:
        raise ConfigError(f"severity must be in 1..5, got {severity}")
    if not cfg.corruption_dir:
        raise ConfigError("corruption_dir is not set")
    params = _load_ckpt(checkpoint)
    data = prepare_data(cfg, cfg.seed + trial)
    result = robustness.corruption_eval(params, cfg.corruption_dir, severity, data.stats,
                                        batch_size=cfg.eval_batch_size)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"corruption_s{severity}.csv")
    robustness.write_corruption_csv(result, path)
    return path, result.mean
