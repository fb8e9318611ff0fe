"""The two confidence probes.

The structural probe clamps each candidate class at the output latent,
settles, and ranks the settled energies: prediction is the argmin, the
confidence margin is the gap between the second-lowest and lowest energy.
The softmax probe reads the encoder's feedforward logits directly with no
inference loop: prediction is the argmax, the margin is the top-1 minus
top-2 softmax probability. Ties break toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import SettleConfig, kway_settle_energies
from .model import PcnModel, encoder_forward
from .rng import RngStream

STRUCTURAL = "structural"
SOFTMAX = "softmax"


@dataclass
class ProbeRecord:
    """Per-image, per-probe outcome: the atom of all Type-2 metrics."""

    image_index: int
    probe: str
    predicted: int
    margin: float
    correct: bool
    scores: np.ndarray  # per-class energies (structural) or probabilities (softmax)


def _rank_records(scores: np.ndarray, labels, indices, probe: str, lower_is_better: bool):
    """Build records from per-class scores; argsort is stable, so ties
    resolve to the lowest class index."""
    ordered = scores if lower_is_better else -scores
    order = np.argsort(ordered, axis=1, kind="stable")
    best = order[:, 0]
    second = order[:, 1]
    rows = np.arange(scores.shape[0])
    margin = np.abs(scores[rows, second] - scores[rows, best])
    records = []
    for i in range(scores.shape[0]):
        records.append(ProbeRecord(
            image_index=int(indices[i]),
            probe=probe,
            predicted=int(best[i]),
            margin=float(margin[i]),
            correct=bool(best[i] == labels[i]),
            scores=scores[i].copy(),
        ))
    return records


def structural_probe_batch(model: PcnModel, x: np.ndarray, labels: np.ndarray,
                           config: SettleConfig, rng: RngStream | None = None,
                           indices=None, zff: dict | None = None,
                           energies: np.ndarray | None = None):
    """K-way energy probe over a batch. Returns (records, energies (N, K))."""
    if energies is None:
        energies = kway_settle_energies(model, x, config, rng=rng, zff=zff)
    if indices is None:
        indices = np.arange(len(labels))
    return _rank_records(energies, labels, indices, STRUCTURAL, lower_is_better=True), energies


def structural_probe(model: PcnModel, x: np.ndarray, label: int,
                     config: SettleConfig, rng: RngStream | None = None) -> ProbeRecord:
    """Single-image convenience wrapper around structural_probe_batch."""
    records, _ = structural_probe_batch(
        model, x[None] if x.ndim == 3 else x, np.array([label]), config, rng=rng)
    return records[0]


def softmax_probe_batch(model: PcnModel, x: np.ndarray, labels: np.ndarray,
                        indices=None, logits: np.ndarray | None = None):
    """Softmax-margin probe over a batch. Returns (records, logits)."""
    if logits is None:
        logits = encoder_forward(model, x, train=False)[4]
    probs = ops.softmax(logits.astype(np.float64))
    if indices is None:
        indices = np.arange(len(labels))
    return _rank_records(probs, labels, indices, SOFTMAX, lower_is_better=False), logits


def softmax_probe(model: PcnModel, x: np.ndarray, label: int) -> ProbeRecord:
    records, _ = softmax_probe_batch(
        model, x[None] if x.ndim == 3 else x, np.array([label]))
    return records[0]
