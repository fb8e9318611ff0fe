"""Margin-level decomposition bookkeeping and the inference no-op report.

For each image, rank the K settled energies and take the best two
hypotheses a, b. Record the energy margin M = E_b - E_a, the log-softmax
margin L = log p_a - log p_b over the same (energy-ranked) pair of
feedforward logits, and the residual difference D = M - L. The identity
M = L + D holds exactly by construction: D is the exact remainder, the
observable margin-level form of the generative-chain residual. Any
k-independent energy contribution cancels inside M, so nothing
per-hypothesis needs to be materialised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import SettleConfig, kway_settle_energies, settle
from .metrics import pearson
from .model import PcnModel, encoder_forward
from .rng import RngStream


@dataclass
class DecompositionRecord:
    image_index: int
    energy_margin: float        # M = E_(2) - E_(1), >= 0
    logsoftmax_margin: float    # L at the energy-ranked pair; may be negative
    residual_diff: float        # D = M - L, exact
    structural_correct: bool
    softmax_correct: bool
    # populated only when both orderings are requested: L at the
    # softmax-ranked top-2 pair, for comparing the two readings
    logsoftmax_margin_softmax_ranked: float | None = None


def decompose_from_scores(energies: np.ndarray, logits: np.ndarray,
                          labels: np.ndarray, indices=None,
                          both_orderings: bool = False):
    """Pure bookkeeping from per-class energies and feedforward logits."""
    n, k = energies.shape
    if logits.shape != (n, k):
        raise ops.ShapeError(f"logits {logits.shape} vs energies {energies.shape}")
    if indices is None:
        indices = np.arange(n)
    order = np.argsort(energies, axis=1, kind="stable")
    a = order[:, 0]
    b = order[:, 1]
    rows = np.arange(n)
    logp = ops.log_softmax(logits.astype(np.float64))
    m = energies[rows, b] - energies[rows, a]
    lsm = logp[rows, a] - logp[rows, b]
    d = m - lsm
    soft_pred = np.argmax(logits, axis=1)
    if both_orderings:
        sorder = np.argsort(-logp, axis=1, kind="stable")
        lsm_soft = logp[rows, sorder[:, 0]] - logp[rows, sorder[:, 1]]
    records = []
    for i in range(n):
        records.append(DecompositionRecord(
            image_index=int(indices[i]),
            energy_margin=float(m[i]),
            logsoftmax_margin=float(lsm[i]),
            residual_diff=float(d[i]),
            structural_correct=bool(a[i] == labels[i]),
            softmax_correct=bool(soft_pred[i] == labels[i]),
            logsoftmax_margin_softmax_ranked=float(lsm_soft[i]) if both_orderings else None,
        ))
    return records


def decompose_batch(model: PcnModel, images: np.ndarray, labels: np.ndarray,
                    config: SettleConfig, rng: RngStream | None = None,
                    indices=None, both_orderings: bool = False):
    """Run the probe machinery and decompose each image's energy margin."""
    zff = encoder_forward(model, images, train=False)
    energies = kway_settle_energies(model, images, config, rng=rng, zff=zff)
    return decompose_from_scores(energies, zff[4], labels, indices=indices,
                                 both_orderings=both_orderings)


def residual_correlation(records):
    """(corr(D, structural correctness), corr(L, structural correctness)).

    Correctness enters as 1/0; either value is None when degenerate.
    """
    if len(records) < 3:
        raise ValueError("residual_correlation needs at least 3 records")
    correct = np.asarray([r.structural_correct for r in records], dtype=np.float64)
    d = np.asarray([r.residual_diff for r in records])
    lsm = np.asarray([r.logsoftmax_margin for r in records])
    return pearson(d, correct), pearson(lsm, correct)


@dataclass
class NoopReport:
    """Aggregated settle diagnostics: how much inference actually moves."""

    n_images: int
    steps: int
    sigma: float
    mean_abs_delta: dict        # level -> scalar
    grad_magnitude: dict        # level -> scalar
    settled_ff_mse: dict        # level -> scalar
    energy_initial: float
    energy_final: float
    relative_energy_decrease: float
    frac_nonincreasing: float   # fraction of images with E_T <= E_0

    def to_dict(self) -> dict:
        lvl = lambda d: {f"z{l}": d[l] for l in (1, 2, 3)}
        return {
            "n_images": self.n_images,
            "steps": self.steps,
            "sigma": self.sigma,
            "mean_abs_delta": lvl(self.mean_abs_delta),
            "grad_magnitude": lvl(self.grad_magnitude),
            "settled_ff_mse": lvl(self.settled_ff_mse),
            "energy_initial": self.energy_initial,
            "energy_final": self.energy_final,
            "relative_energy_decrease": self.relative_energy_decrease,
            "frac_nonincreasing": self.frac_nonincreasing,
        }


def noop_report(model: PcnModel, images: np.ndarray, config: SettleConfig,
                rng: RngStream | None = None, batch_size: int = 128) -> NoopReport:
    """Measure latent movement during test-time inference.

    Settles each batch with the output latent held at its feedforward
    value (no target, no CE term) and telemetry on, then aggregates the
    per-layer movement, gradient magnitude, settled-vs-feedforward MSE,
    and the energy at steps 0 and T across the evaluation set.
    """
    n = images.shape[0]
    cfg = SettleConfig(steps=config.steps, lr=config.lr, momentum=config.momentum,
                       sigma=config.sigma, clamp_target=None, telemetry=True)
    acc_delta = {1: 0.0, 2: 0.0, 3: 0.0}
    acc_grad = {1: 0.0, 2: 0.0, 3: 0.0}
    acc_mse = {1: 0.0, 2: 0.0, 3: 0.0}
    e0_parts, et_parts = [], []
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        _, tel = settle(model, xb, cfg, rng=rng)
        w = xb.shape[0]
        for l in (1, 2, 3):
            acc_delta[l] += tel.mean_abs_delta[l] * w
            acc_grad[l] += tel.grad_magnitude[l] * w
            acc_mse[l] += tel.settled_ff_mse[l] * w
        e0_parts.append(tel.energy_initial)
        et_parts.append(tel.energy_final)
    e0 = np.concatenate(e0_parts)
    et = np.concatenate(et_parts)
    e0_mean = float(e0.mean())
    et_mean = float(et.mean())
    return NoopReport(
        n_images=n,
        steps=cfg.steps,
        sigma=cfg.sigma,
        mean_abs_delta={l: acc_delta[l] / n for l in (1, 2, 3)},
        grad_magnitude={l: acc_grad[l] / n for l in (1, 2, 3)},
        settled_ff_mse={l: acc_mse[l] / n for l in (1, 2, 3)},
        energy_initial=e0_mean,
        energy_final=et_mean,
        relative_energy_decrease=(e0_mean - et_mean) / e0_mean if e0_mean else 0.0,
        frac_nonincreasing=float((et <= e0).mean()),
    )
