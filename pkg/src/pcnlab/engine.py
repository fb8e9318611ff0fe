"""Energy function, clamped-latent settling, and the training families.

The total energy of a latent configuration is the sum over layers of half
the per-element mean squared top-down prediction error, plus the
cross-entropy of the output latent against the target when one is given.
Settling is SGD-with-momentum descent on the unclamped latents, optionally
with per-step Gaussian (Langevin) noise. Training families:

  - final-state PC: weight gradients at the settled configuration
  - MCPC: weight gradients averaged over the last M settle samples
  - BP: plain cross-entropy backprop through the encoder (no settling)
  - post-hoc decoder: layer-wise reconstruction of frozen encoder activations

Weight gradients treat settled latents as constants (no backprop through
the settle trajectory). The PC weight objective combines three terms:
the settled energy's layer terms (trains the generative chain), an
encoder-alignment MSE against the settled latents, and cross-entropy of
the feedforward logits against the label (trains the readout); each has
weight 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .model import (LATENT_SHAPES, LATENT_SIZES, N_CLASSES, PcnModel,
                    encoder_backward, encoder_forward, generative_predict)
from .optim import OptimizerState, adamw_step
from .rng import RngStream


class SettleDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite energy during settle at step {step}")
        self.step = step


class TrainDiverged(RuntimeError):
    def __init__(self, batch_index: int, what: str):
        super().__init__(f"non-finite {what} at batch {batch_index}")
        self.batch_index = batch_index


def onehot(labels: np.ndarray, k: int = N_CLASSES, dtype=np.float32) -> np.ndarray:
    return np.eye(k, dtype=dtype)[np.asarray(labels)]


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

@dataclass
class EnergyBreakdown:
    """Per-image energy terms; `total` = layer_terms.sum(1) + ce_term."""

    layer_terms: np.ndarray  # (N, 3) for layers 1..3
    ce_term: np.ndarray      # (N,), zero when no target
    total: np.ndarray        # (N,)


@dataclass
class LatentState:
    """Latent hierarchy plus clamp flags and the cached feedforward init."""

    z: dict
    zff: dict
    clamped: dict
    momentum: dict | None = None
    samples: list | None = None  # trailing settle samples, when collected


def _chain_errors(model: PcnModel, z: dict):
    """Top-down prediction errors (e1, e2, e3) for the current latents."""
    e3 = z[3] - generative_predict(model, 3, z[4])
    e2 = z[2] - generative_predict(model, 2, z[3])
    e1 = z[1] - generative_predict(model, 1, z[2])
    return e1, e2, e3


def _per_image_mean_sq(e: np.ndarray) -> np.ndarray:
    return np.square(e).reshape(e.shape[0], -1).mean(axis=1, dtype=np.float64)


def _energy_terms(e1, e2, e3, z4, target):
    layer = np.stack(
        [0.5 * _per_image_mean_sq(e1),
         0.5 * _per_image_mean_sq(e2),
         0.5 * _per_image_mean_sq(e3)], axis=1)
    if target is None:
        ce = np.zeros(z4.shape[0], dtype=np.float64)
    else:
        ce = ops.cross_entropy_forward(z4.astype(np.float64), target.astype(np.float64))
    return EnergyBreakdown(layer_terms=layer, ce_term=ce, total=layer.sum(axis=1) + ce)


def energy(model: PcnModel, state: LatentState, target: np.ndarray | None = None) -> EnergyBreakdown:
    """Evaluate the energy of a latent configuration.

    With no target the cross-entropy term is omitted. If z4 is clamped the
    target must equal the clamped one-hot.
    """
    if target is not None and state.clamped.get(4):
        if not np.array_equal(target, state.z[4]):
            raise ValueError("target must equal the clamped z4 one-hot")
    return _energy_terms(*_chain_errors(model, state.z), state.z[4], target)


# ---------------------------------------------------------------------------
# settle
# ---------------------------------------------------------------------------

@dataclass
class SettleConfig:
    steps: int
    lr: float
    momentum: float = 0.5
    sigma: float = 0.0
    clamp_target: np.ndarray | None = None  # (N, K) one-hot rows; clamps z4
    telemetry: bool = False
    frozen_levels: tuple = ()                # extra lower-level clamps
    collect_last: int = 0                    # trailing samples to keep (MCPC)


@dataclass
class SettleTelemetry:
    """Movement/gradient/energy diagnostics aggregated over the batch."""

    mean_abs_delta: dict = field(default_factory=dict)   # level -> scalar
    grad_magnitude: dict = field(default_factory=dict)   # level -> scalar (step-avg)
    settled_ff_mse: dict = field(default_factory=dict)   # level -> scalar
    energy_initial: np.ndarray | None = None             # (N,)
    energy_final: np.ndarray | None = None               # (N,)


def _latent_grads(model: PcnModel, z: dict, levels, e1, e2, e3):
    """Per-image energy gradients for the requested free levels (1..3)."""
    p = model.params
    grads = {}
    if 1 in levels:
        grads[1] = e1 / LATENT_SIZES[1]
    if 2 in levels:
        g = e2 / LATENT_SIZES[2]
        g = g - ops.upsample2_backward(
            ops.conv2d_input_backward(p["gen.g1.w"], e1 / LATENT_SIZES[1]))
        grads[2] = g
    if 3 in levels:
        g = e3 / LATENT_SIZES[3]
        g = g - (e2.reshape(e2.shape[0], -1) / LATENT_SIZES[2]) @ p["gen.g2.w"]
        grads[3] = g
    return grads


def settle(model: PcnModel, x: np.ndarray | None, config: SettleConfig,
           rng: RngStream | None = None, zff: dict | None = None):
    """Run the inference loop from the amortised initialisation.

    Latents start at the encoder's feedforward values (computed from `x`
    in eval mode unless `zff` is supplied). z1..z3 descend the energy with
    SGD-momentum for `steps` iterations, with optional post-step Gaussian
    noise of scale sigma on unclamped latents. z4 is clamped to the target
    one-hot when given, otherwise held at its feedforward value.
    Returns (LatentState, SettleTelemetry | None).
    """
    if zff is None:
        zff = encoder_forward(model, x, train=False)
    if config.sigma > 0 and rng is None:
        raise ValueError("sigma > 0 requires an RngStream")
    target = config.clamp_target
    if target is not None and target.shape != zff[4].shape:
        raise ops.ShapeError(f"clamp target {target.shape} vs z4 {zff[4].shape}")

    z = {l: zff[l].copy() for l in (1, 2, 3)}
    z[4] = target.copy() if target is not None else zff[4].copy()
    clamped = {1: 1 in config.frozen_levels, 2: 2 in config.frozen_levels,
               3: 3 in config.frozen_levels, 4: True}
    free = tuple(l for l in (1, 2, 3) if not clamped[l])
    bufs = {l: np.zeros_like(z[l]) for l in free}

    want_track = config.telemetry
    grad_sums = {l: 0.0 for l in free}
    e_initial = None
    samples = [] if config.collect_last > 0 else None

    for t in range(config.steps):
        e1, e2, e3 = _chain_errors(model, z)
        with np.errstate(over="ignore", invalid="ignore"):
            layer_means = (float(np.square(e1).mean(dtype=np.float64)),
                           float(np.square(e2).mean(dtype=np.float64)),
                           float(np.square(e3).mean(dtype=np.float64)))
        if not all(math.isfinite(v) for v in layer_means):
            raise SettleDiverged(t)
        if t == 0 and want_track:
            e_initial = _energy_terms(e1, e2, e3, z[4], target).total
        grads = _latent_grads(model, z, free, e1, e2, e3)
        for l in free:
            if want_track:
                grad_sums[l] += float(np.abs(grads[l]).mean(dtype=np.float64))
            buf = bufs[l]
            buf *= config.momentum
            buf += grads[l]
            z[l] -= config.lr * buf
            if config.sigma > 0:
                z[l] += config.sigma * rng.normal(z[l].shape, dtype=z[l].dtype)
        if samples is not None and t >= config.steps - config.collect_last:
            samples.append({l: z[l].copy() for l in (1, 2, 3)})

    e1, e2, e3 = _chain_errors(model, z)
    final = _energy_terms(e1, e2, e3, z[4], target)
    if not np.all(np.isfinite(final.total)):
        raise SettleDiverged(config.steps)

    telemetry = None
    if want_track:
        if e_initial is None:  # steps == 0: init config is the final config
            e_initial = final.total.copy()
        telemetry = SettleTelemetry(energy_initial=e_initial, energy_final=final.total)
        steps = max(config.steps, 1)
        for l in (1, 2, 3):
            diff = z[l] - zff[l]
            telemetry.mean_abs_delta[l] = float(np.abs(diff).mean(dtype=np.float64))
            telemetry.settled_ff_mse[l] = float(np.square(diff).mean(dtype=np.float64))
            telemetry.grad_magnitude[l] = grad_sums.get(l, 0.0) / steps

    state = LatentState(z=z, zff=zff, clamped=clamped,
                        momentum=bufs if free else {}, samples=samples)
    return state, telemetry


def kway_settle_energies(model: PcnModel, x: np.ndarray, config: SettleConfig,
                         rng: RngStream | None = None, k: int = N_CLASSES,
                         zff: dict | None = None) -> np.ndarray:
    """Settled total energy per class hypothesis: (N, K).

    For each hypothesis the output latent is clamped at that one-hot and
    the lower latents re-initialise from the (shared) amortised forward
    pass with fresh momentum buffers. The K problems are independent, so
    they run as one batch of N*K settles, hypothesis-major within image.
    """
    if zff is None:
        zff = encoder_forward(model, x, train=False)
    n = zff[4].shape[0]
    rep = {l: np.repeat(zff[l], k, axis=0) for l in (1, 2, 3, 4)}
    targets = np.tile(np.eye(N_CLASSES, dtype=zff[4].dtype)[:k], (n, 1))
    cfg = replace(config, clamp_target=targets, telemetry=False, collect_last=0)
    state, _ = settle(model, None, cfg, rng=rng, zff=rep)
    breakdown = _energy_terms(*_chain_errors(model, state.z), state.z[4], targets)
    return breakdown.total.reshape(n, k)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_slices(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _generative_grads(model: PcnModel, samples: list, y4: np.ndarray):
    """Layer-term gradients w.r.t. the generative weights, sample-averaged.

    The settled latents are constants; for each sample the energy's layer
    terms differentiate only through g1..g3. Gradients of the batch-mean
    energy accumulate over samples and divide by the sample count.
    """
    p = model.params
    n = y4.shape[0]
    acc = {name: np.zeros_like(p[name]) for name in
           ("gen.g3.w", "gen.g3.b", "gen.g2.w", "gen.g2.b", "gen.g1.w", "gen.g1.b")}
    for zs in samples:
        zh3 = generative_predict(model, 3, y4)
        gy3 = (zh3 - zs[3]) / (LATENT_SIZES[3] * n)
        _, gw, gb = ops.linear_backward(y4, p["gen.g3.w"], gy3)
        acc["gen.g3.w"] += gw
        acc["gen.g3.b"] += gb

        zh2 = generative_predict(model, 2, zs[3])
        gy2 = ((zh2 - zs[2]) / (LATENT_SIZES[2] * n)).reshape(n, -1)
        _, gw, gb = ops.linear_backward(zs[3], p["gen.g2.w"], gy2)
        acc["gen.g2.w"] += gw
        acc["gen.g2.b"] += gb

        up = ops.upsample2_forward(zs[2])
        zh1 = ops.conv2d_forward(up, p["gen.g1.w"], p["gen.g1.b"])
        gy1 = (zh1 - zs[1]) / (LATENT_SIZES[1] * n)
        gw, gb = ops.conv2d_weight_backward(up, p["gen.g1.w"], gy1)
        acc["gen.g1.w"] += gw
        acc["gen.g1.b"] += gb
    m = len(samples)
    for name in acc:
        acc[name] /= m
    return acc


def train_epoch_pc(model: PcnModel, images: np.ndarray, labels: np.ndarray, *,
                   mode: str, settle_cfg: SettleConfig, batch_size: int,
                   opt: OptimizerState, rng: RngStream, epoch: int,
                   mcpc_m: int = 10) -> dict:
    """One epoch of discriminative PC training (final-state or MCPC).

    Per batch: amortised forward pass (train-mode BN), settle with the
    label clamped at z4, then one AdamW step on the combined objective.
    `mode` selects the gradient target: the final settled state, or the
    average over the last `mcpc_m` settle samples.
    Returns epoch stats with readout and generative losses tracked
    separately.
    """
    if mode not in ("final-state", "mcpc"):
        raise ValueError(f"unknown PC training mode: {mode}")
    n = images.shape[0]
    perm = rng.child("shuffle", epoch).permutation(n)
    noise_rng = rng.child("train-noise", epoch) if settle_cfg.sigma > 0 else None
    m = mcpc_m if mode == "mcpc" else 1

    sums = {"readout": 0.0, "generative": 0.0, "alignment": 0.0}
    seen = 0
    for bi, idx in enumerate(_batch_slices(n, batch_size, perm)):
        xb = images[idx]
        yb = onehot(labels[idx])
        nb = xb.shape[0]

        zff, cache = encoder_forward(model, xb, train=True, want_cache=True)
        cfg = replace(settle_cfg, clamp_target=yb, telemetry=False, collect_last=m)
        state, _ = settle(model, None, cfg, rng=noise_rng, zff=zff)
        samples = state.samples if state.samples else [
            {l: state.z[l] for l in (1, 2, 3)}]

        grads = _generative_grads(model, samples, yb)

        # encoder: readout CE at z4ff plus alignment toward the (sample-mean)
        # settled latents, both batch-meaned
        zbar = {l: sum(s[l] for s in samples) / len(samples) for l in (1, 2, 3)}
        g_out = {4: ops.cross_entropy_backward(zff[4], yb, np.full(nb, 1.0 / nb))}
        for l in (1, 2, 3):
            g_out[l] = 2.0 * (zff[l] - zbar[l]) / (LATENT_SIZES[l] * nb)
        grads.update(encoder_backward(model, cache, g_out))

        readout = float(ops.cross_entropy_forward(zff[4], yb).mean(dtype=np.float64))
        final_e = _energy_terms(*_chain_errors(model, state.z), state.z[4], None)
        generative = float(final_e.layer_terms.sum(axis=1).mean(dtype=np.float64))
        alignment = float(sum(
            np.square(zff[l] - zbar[l]).mean(dtype=np.float64) for l in (1, 2, 3)))
        if not all(math.isfinite(v) for v in (readout, generative, alignment)):
            raise TrainDiverged(bi, "loss")

        adamw_step(opt, model.params, grads)
        sums["readout"] += readout * nb
        sums["generative"] += generative * nb
        sums["alignment"] += alignment * nb
        seen += nb
    return {k: v / seen for k, v in sums.items()} | {"n": seen, "batches": bi + 1}


def train_epoch_bp(model: PcnModel, images: np.ndarray, labels: np.ndarray, *,
                   batch_size: int, opt: OptimizerState, rng: RngStream,
                   epoch: int) -> dict:
    """One epoch of standard cross-entropy backprop on the encoder."""
    n = images.shape[0]
    perm = rng.child("shuffle", epoch).permutation(n)
    sums = {"readout": 0.0}
    seen = 0
    for bi, idx in enumerate(_batch_slices(n, batch_size, perm)):
        xb = images[idx]
        yb = onehot(labels[idx])
        nb = xb.shape[0]
        zff, cache = encoder_forward(model, xb, train=True, want_cache=True)
        readout = float(ops.cross_entropy_forward(zff[4], yb).mean(dtype=np.float64))
        if not math.isfinite(readout):
            raise TrainDiverged(bi, "loss")
        g4 = ops.cross_entropy_backward(zff[4], yb, np.full(nb, 1.0 / nb))
        grads = encoder_backward(model, cache, {4: g4})
        adamw_step(opt, model.params, grads)
        sums["readout"] += readout * nb
        seen += nb
    return {"readout": sums["readout"] / seen, "n": seen, "batches": bi + 1}


def train_decoder_posthoc(encoder: PcnModel, decoder: PcnModel,
                          images: np.ndarray, *, batch_size: int,
                          opt: OptimizerState, rng: RngStream, epoch: int) -> dict:
    """One epoch of layer-wise reconstruction training of a decoder.

    The encoder is frozen (eval-mode BN, no gradient flow); the decoder
    predicts each activation from the encoder's own activation one level
    up and minimises the summed per-layer reconstruction MSE.
    """
    n = images.shape[0]
    perm = rng.child("shuffle-dec", epoch).permutation(n)
    sums = {"recon": 0.0}
    seen = 0
    p = decoder.params
    for bi, idx in enumerate(_batch_slices(n, batch_size, perm)):
        xb = images[idx]
        nb = xb.shape[0]
        zff = encoder_forward(encoder, xb, train=False)

        zh3 = generative_predict(decoder, 3, zff[4])
        zh2 = generative_predict(decoder, 2, zff[3])
        up = ops.upsample2_forward(zff[2])
        zh1 = ops.conv2d_forward(up, p["gen.g1.w"], p["gen.g1.b"])

        recon = float(sum(
            np.square(zff[l] - zh).mean(dtype=np.float64)
            for l, zh in ((1, zh1), (2, zh2), (3, zh3))))
        if not math.isfinite(recon):
            raise TrainDiverged(bi, "reconstruction loss")

        grads = {}
        gy3 = 2.0 * (zh3 - zff[3]) / (LATENT_SIZES[3] * nb)
        _, grads["gen.g3.w"], grads["gen.g3.b"] = ops.linear_backward(
            zff[4], p["gen.g3.w"], gy3)
        gy2 = (2.0 * (zh2 - zff[2]) / (LATENT_SIZES[2] * nb)).reshape(nb, -1)
        _, grads["gen.g2.w"], grads["gen.g2.b"] = ops.linear_backward(
            zff[3], p["gen.g2.w"], gy2)
        gy1 = 2.0 * (zh1 - zff[1]) / (LATENT_SIZES[1] * nb)
        grads["gen.g1.w"], grads["gen.g1.b"] = ops.conv2d_weight_backward(
            up, p["gen.g1.w"], gy1)

        adamw_step(opt, decoder.params, grads)
        sums["recon"] += recon * nb
        seen += nb
    return {"recon": sums["recon"] / seen, "n": seen, "batches": bi + 1}
