"""Per-step training instrumentation and its CSV schema.

Norms are always computed in 64-bit regardless of the training precision.
The logged gradient norm is the norm of the *summed* clipped per-example
gradients (not divided by the batch size), and the noise norm is the norm
of the step's total injected noise; their ratio is the step's
signal-to-noise value. With noise disabled the ratio is left absent
rather than forced to a number.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .engine import FlatGradient
from .errors import ShapeError

CSV_FIELDS = ("step", "epoch", "lr", "loss", "accuracy", "grad_norm", "noise_norm", "snr", "epsilon")


@dataclass
class StepContext:
    step: int
    epoch: int
    lr: float
    loss: float
    sigma: float
    epsilon: float
    accuracy: float | None = None


@dataclass
class RunRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    accuracy: float | None
    grad_norm: float
    noise_norm: float
    snr: float | None
    epsilon: float


def record_step(sum_clipped: FlatGradient, noise_total: FlatGradient, context: StepContext) -> RunRecord:
    """Build the metrics row for one optimizer step."""
    if sum_clipped.dim != noise_total.dim:
        raise ShapeError(
            f"gradient and noise dimensions differ: {sum_clipped.dim} vs {noise_total.dim}"
        )
    grad_norm = float(np.linalg.norm(sum_clipped.values.astype(np.float64, copy=False)))
    noise_norm = float(np.linalg.norm(noise_total.values.astype(np.float64, copy=False)))
    if context.sigma == 0.0:
        snr = None
    elif noise_norm == 0.0:
        snr = math.inf
    else:
        snr = grad_norm / noise_norm
    return RunRecord(
        step=context.step,
        epoch=context.epoch,
        lr=context.lr,
        loss=context.loss,
        accuracy=context.accuracy,
        grad_norm=grad_norm,
        noise_norm=noise_norm,
        snr=snr,
        epsilon=context.epsilon,
    )


def format_float(value: float) -> str:
    """Nine significant digits; infinities spelled as 'inf'."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.9g}"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format_float(float(value))


def emit_csv(records, path) -> None:
    """Write header plus one row per record (UTF-8, LF line endings)."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for record in records:
                writer.writerow([_cell(getattr(record, name)) for name in CSV_FIELDS])
    except OSError as exc:
        raise RuntimeError(f"could not write metrics CSV at {path}: {exc}") from exc


def read_csv(path):
    """Parse a metrics CSV back into RunRecords (floats at printed precision)."""

    def _opt(text):
        if text == "":
            return None
        return math.inf if text == "inf" else float(text)

    records = []
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            records.append(
                RunRecord(
                    step=int(row["step"]),
                    epoch=int(row["epoch"]),
                    lr=float(row["lr"]),
                    loss=float(row["loss"]),
                    accuracy=_opt(row["accuracy"]),
                    grad_norm=float(row["grad_norm"]),
                    noise_norm=float(row["noise_norm"]),
                    snr=_opt(row["snr"]),
                    epsilon=_opt(row["epsilon"]) if row["epsilon"] else math.inf,
                )
            )
    return records
