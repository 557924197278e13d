"""Alignment angles, training logs, checkpoint snapshots and CSV output."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataIOError, ShapeError
from .network import NetworkParams, encode_checkpoint, flatten, unflatten


@dataclass
class AlignmentStats:
    angles: np.ndarray  # degrees; NaN where a row was all zero
    skipped: np.ndarray  # bool mask of neurons left out
    mean: float
    std: float


def alignment_angles(w: np.ndarray, b: np.ndarray) -> AlignmentStats:
    """Per-neuron angle between row i of ``w.T`` and row i of ``b``.

    ``w`` is a forward matrix (out, in) and ``b`` the matching feedback
    matrix (in, out), so neuron i is input unit i of the layer.
    """
    wt = np.asarray(w, dtype=np.float64).T
    b = np.asarray(b, dtype=np.float64)
    if wt.shape != b.shape:
        raise ShapeError(f"W.T {wt.shape} and B {b.shape} differ")
    nw = np.linalg.norm(wt, axis=1)
    nb = np.linalg.norm(b, axis=1)
    skipped = (nw == 0) | (nb == 0)
    angles = np.full(wt.shape[0], np.nan)
    ok = ~skipped
    cos = np.einsum("ij,ij->i", wt[ok], b[ok]) / (nw[ok] * nb[ok])
    angles[ok] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    if ok.any():
        mean, std = float(angles[ok].mean()), float(angles[ok].std())
    else:
        mean = std = float("nan")
    return AlignmentStats(angles, skipped, mean, std)


def layer_angles(params: NetworkParams, feedback) -> list[AlignmentStats]:
    """Alignment statistics for layers 1..L-1."""
    return [alignment_angles(params.weights[l], feedback.matrices[l])
            for l in range(1, params.n_layers)]


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

@dataclass
class LogEntry:
    epoch: int
    iteration: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    angle_mean: list[float] = field(default_factory=list)
    angle_std: list[float] = field(default_factory=list)


@dataclass
class TrainLog:
    n_angle_layers: int
    entries: list[LogEntry] = field(default_factory=list)

    def append(self, entry: LogEntry):
        if self.entries and entry.iteration < self.entries[-1].iteration:
            raise ValueError("log iterations must be non-decreasing")
        if len(entry.angle_mean) != self.n_angle_layers:
            raise ShapeError("angle columns do not match the log layout")
        self.entries.append(entry)

    def columns(self) -> list[str]:
        cols = ["epoch", "iter", "train_loss", "train_acc", "test_loss", "test_acc"]
        for l in range(1, self.n_angle_layers + 1):
            cols += [f"angle_mean_l{l}", f"angle_std_l{l}"]
        return cols


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def write_rows(path, header: list[str], rows):
    """Write a CSV with 9-significant-digit floats."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
                fh.flush()
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def write_csv(log: TrainLog, path):
    rows = []
    for e in log.entries:
        row = [e.epoch, e.iteration, e.train_loss, e.train_acc, e.test_loss, e.test_acc]
        for m, s in zip(e.angle_mean, e.angle_std):
            row += [m, s]
        rows.append(row)
    write_rows(path, log.columns(), rows)


def read_csv(path) -> TrainLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_layers = (len(header) - 6) // 2
        log = TrainLog(n_layers)
        for row in reader:
            vals = [float(v) for v in row[2:]]
            log.append(LogEntry(int(row[0]), int(row[1]), *vals[:4],
                                angle_mean=vals[4::2], angle_std=vals[5::2]))
    return log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointStore:
    """Ordered flat-parameter snapshots, optionally mirrored to disk."""

    def __init__(self, dims, directory=None):
        self.dims = list(dims)
        self.directory = directory
        self.steps: list[int] = []
        self.snapshots: list[np.ndarray] = []
        if directory:
            os.makedirs(directory, exist_ok=True)

    def __len__(self):
        return len(self.snapshots)

    def record(self, params: NetworkParams, step: int = 0) -> int:
        ckpt_id = len(self.snapshots)
        self.snapshots.append(flatten(params))
        self.steps.append(step)
        if self.directory:
            path = os.path.join(self.directory, f"ckpt_{ckpt_id:05d}.bin")
            with open(path, "wb") as fh:
                fh.write(encode_checkpoint(params))
        return ckpt_id

    def restore(self, ckpt_id: int) -> NetworkParams:
        return unflatten(self.snapshots[ckpt_id], self.dims)

    def matrix(self) -> np.ndarray:
        return np.stack(self.snapshots)


def record_checkpoint(store: CheckpointStore, params: NetworkParams, step: int = 0) -> int:
    return store.record(params, step)
