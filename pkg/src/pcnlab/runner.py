"""End-to-end experiment runner for the six conditions.

A run owns its output directory: training per the condition's family,
probe evaluation at every checkpoint and noise level, the margin
decomposition and no-op diagnostics, and the full file inventory
(results.csv, probe_records.csv, decomposition.csv, noop.json,
manifest.json, checkpoints, figures). Everything stochastic derives from
the config seed, so identical configs produce byte-identical results.csv
and checkpoints.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, data, reports
from .audit import decompose_from_scores, noop_report
from .config import ExperimentConfig
from .engine import SettleConfig, kway_settle_energies, train_decoder_posthoc, \
    train_epoch_bp, train_epoch_pc
from .model import PcnModel, combine, encoder_forward, init_model
from .optim import adamw_state
from .probes import softmax_probe_batch, structural_probe_batch
from .metrics import report as metrics_report
from .rng import RngStream

EVAL_BATCH = 128


class RunError(RuntimeError):
    pass


@dataclass
class RunResult:
    out_dir: str
    rows: list = field(default_factory=list)
    gap_rows: list = field(default_factory=list)
    manifest_path: str = ""


def _load_data(cfg: ExperimentConfig):
    if cfg.data_source == "synthetic":
        # the generator emits balanced classes; round up and slice
        n_train = -(-cfg.subset // 10) * 10
        n_test = -(-max(cfg.eval_n, 1280) // 10) * 10
        train = data.synth_dataset(10, n_train, cfg.seed, split="train").take(cfg.subset)
        test = data.synth_dataset(10, n_test, cfg.seed, split="test")
    else:
        root = cfg.resolved_data_path()
        if not root:
            raise RunError("cifar10 source needs --dataset-path or $PCNLAB_DATA_ROOT")
        train = data.load_cifar10(root, "train", subset=cfg.subset)
        test = data.load_cifar10(root, "test", subset=cfg.eval_n)
    if cfg.eval_n > len(test):
        raise RunError(f"eval_n {cfg.eval_n} exceeds test set size {len(test)}")
    return train, test.take(cfg.eval_n)


def _settle_cfg(cfg: ExperimentConfig, sigma: float) -> SettleConfig:
    return SettleConfig(steps=cfg.steps, lr=cfg.eta_h,
                        momentum=cfg.latent_momentum, sigma=sigma)


class _Collector:
    """Accumulates the run's rows and per-image record groups."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rows = []
        self.record_groups = []   # (condition, epoch, sigma, records)
        self.decomp_groups = []   # (condition, epoch, records)
        self.train_rows = []

    def add_probe(self, epoch, sigma, records):
        rep = metrics_report(records)
        self.rows.append({
            "condition": self.cfg.condition, "epoch": epoch,
            "probe": records[0].probe, "sigma": sigma, "n_eval": rep.n,
            "accuracy": rep.accuracy, "auroc2": rep.auroc2, "seed": self.cfg.seed,
        })
        self.record_groups.append((self.cfg.condition, epoch, sigma, records))


def _evaluate(model: PcnModel, test: data.Dataset, cfg: ExperimentConfig,
              epoch: int, rng: RngStream, col: _Collector,
              structural: bool = True) -> None:
    """Both probes over the eval set, batched at the protocol width.

    The encoder's amortised pass is shared across noise levels; the
    deterministic (sigma=0) energies also feed the margin decomposition.
    """
    n = len(test)
    sigmas = sorted(set(cfg.eval_sigmas)) if structural else []
    soft_records = []
    struct_records = {s: [] for s in sigmas}
    decomp_records = []
    for start in range(0, n, EVAL_BATCH):
        xb = test.images[start:start + EVAL_BATCH]
        yb = test.labels[start:start + EVAL_BATCH]
        idx = np.arange(start, start + len(yb))
        zff = encoder_forward(model, xb, train=False)
        recs, logits = softmax_probe_batch(model, xb, yb, indices=idx, logits=zff[4])
        soft_records.extend(recs)
        for sigma in sigmas:
            srng = rng.child("eval-noise", epoch, f"{sigma:g}", start) if sigma > 0 else None
            recs, energies = structural_probe_batch(
                model, xb, yb, _settle_cfg(cfg, sigma), rng=srng, indices=idx,
                zff=zff)
            struct_records[sigma].extend(recs)
            if sigma == 0.0:
                decomp_records.extend(decompose_from_scores(
                    energies, logits, yb, indices=idx))
    for sigma in sigmas:
        col.add_probe(epoch, sigma, struct_records[sigma])
    col.add_probe(epoch, None, soft_records)
    if decomp_records:
        col.decomp_groups.append((cfg.condition, epoch, decomp_records))


def _checkpoint_path(out_dir, tag) -> str:
    return os.path.join(out_dir, f"checkpoint_{tag}.pcn")


def run(cfg: ExperimentConfig) -> RunResult:
    """Execute one condition end to end; artifacts land in cfg.out_dir.

    On failure a manifest with the failure cause is still written before
    the exception propagates.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    phases: dict = {}
    try:
        result = _run_inner(cfg, phases)
    except Exception as exc:
        reports.write_manifest(cfg.out_dir, cfg.flat(), phases,
                               status="failed", error=f"{type(exc).__name__}: {exc}")
        raise
    return result


def _run_inner(cfg: ExperimentConfig, phases: dict) -> RunResult:
    t0 = time.perf_counter()
    train, test = _load_data(cfg)
    phases["data"] = time.perf_counter() - t0
    rng = RngStream(cfg.seed)
    col = _Collector(cfg)
    noop = None

    t0 = time.perf_counter()
    if cfg.condition == "c2-diagnose":
        if cfg.checkpoint:
            model = checkpoint.load_model(cfg.checkpoint)
        else:
            model = init_model("pcn", rng.child("model"))
        phases["train"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        noop = noop_report(model, test.images, _settle_cfg(cfg, 0.0),
                           batch_size=EVAL_BATCH)
        phases["eval"] = time.perf_counter() - t0
    elif cfg.condition in ("c1-det-pc", "c5-langevin", "c6-mcpc"):
        model = init_model("pcn", rng.child("model"))
        opt = adamw_state(cfg.eta_w, cfg.weight_decay)
        mode = "mcpc" if cfg.condition == "c6-mcpc" else "final-state"
        scfg = _settle_cfg(cfg, cfg.sigma_train)
        checkpoints = set(cfg.checkpoint_epochs or (cfg.epochs,))
        eval_s = 0.0
        for epoch in range(1, cfg.epochs + 1):
            stats = train_epoch_pc(
                model, train.images, train.labels, mode=mode, settle_cfg=scfg,
                batch_size=cfg.batch_size, opt=opt, rng=rng.child("train"),
                epoch=epoch, mcpc_m=cfg.mcpc_m)
            col.train_rows.append({
                "condition": cfg.condition, "epoch": epoch, "phase": "pc",
                "readout_loss": stats["readout"],
                "generative_loss": stats["generative"],
                "alignment_loss": stats["alignment"]})
            if epoch in checkpoints:
                eval_t = time.perf_counter()
                _evaluate(model, test, cfg, epoch, rng, col)
                eval_s += time.perf_counter() - eval_t
                checkpoint.save_model(
                    _checkpoint_path(cfg.out_dir, f"ep{epoch}"), model, opt)
        phases["train"] = time.perf_counter() - t0 - eval_s
        phases["eval"] = eval_s
        t0 = time.perf_counter()
        noop = noop_report(model, test.images, _settle_cfg(cfg, 0.0),
                           batch_size=EVAL_BATCH)
        phases["audit"] = time.perf_counter() - t0
    elif cfg.condition == "c4-bp":
        model = init_model("ffn", rng.child("model"))
        opt = adamw_state(cfg.eta_w, cfg.weight_decay)
        checkpoints = set(cfg.checkpoint_epochs or (cfg.epochs,))
        eval_s = 0.0
        for epoch in range(1, cfg.epochs + 1):
            stats = train_epoch_bp(
                model, train.images, train.labels, batch_size=cfg.batch_size,
                opt=opt, rng=rng.child("train"), epoch=epoch)
            col.train_rows.append({
                "condition": cfg.condition, "epoch": epoch, "phase": "bp",
                "readout_loss": stats["readout"]})
            if epoch in checkpoints:
                eval_t = time.perf_counter()
                _evaluate(model, test, cfg, epoch, rng, col, structural=False)
                eval_s += time.perf_counter() - eval_t
                checkpoint.save_model(
                    _checkpoint_path(cfg.out_dir, f"ep{epoch}"), model, opt)
        phases["train"] = time.perf_counter() - t0 - eval_s
        phases["eval"] = eval_s
    elif cfg.condition == "c3-bp-decoder":
        encoder = init_model("ffn", rng.child("model"))
        opt = adamw_state(cfg.eta_w, cfg.weight_decay)
        for epoch in range(1, cfg.epochs + 1):
            stats = train_epoch_bp(
                encoder, train.images, train.labels, batch_size=cfg.batch_size,
                opt=opt, rng=rng.child("train"), epoch=epoch)
            col.train_rows.append({
                "condition": cfg.condition, "epoch": epoch, "phase": "bp",
                "readout_loss": stats["readout"]})
        checkpoint.save_model(_checkpoint_path(cfg.out_dir, "encoder"), encoder)
        decoder = init_model("decoder", rng.child("decoder"))
        dopt = adamw_state(cfg.eta_w, cfg.weight_decay)
        for epoch in range(1, cfg.epochs_decoder + 1):
            stats = train_decoder_posthoc(
                encoder, decoder, train.images, batch_size=cfg.batch_size,
                opt=dopt, rng=rng.child("train-dec"), epoch=epoch)
            col.train_rows.append({
                "condition": cfg.condition, "epoch": epoch, "phase": "decoder",
                "recon_loss": stats["recon"]})
        checkpoint.save_model(_checkpoint_path(cfg.out_dir, "decoder"), decoder)
        model = combine(encoder, decoder)
        checkpoint.save_model(_checkpoint_path(cfg.out_dir, f"ep{cfg.epochs}"), model)
        phases["train"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        _evaluate(model, test, cfg, cfg.epochs, rng, col)
        phases["eval"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        noop = noop_report(model, test.images, _settle_cfg(cfg, 0.0),
                           batch_size=EVAL_BATCH)
        phases["audit"] = time.perf_counter() - t0
    else:
        raise RunError(f"unhandled condition {cfg.condition}")

    t0 = time.perf_counter()
    reports.write_results_csv(os.path.join(cfg.out_dir, "results.csv"), col.rows)
    reports.write_probe_records_csv(
        os.path.join(cfg.out_dir, "probe_records.csv"), col.record_groups)
    reports.write_decomposition_csv(
        os.path.join(cfg.out_dir, "decomposition.csv"), col.decomp_groups)
    reports.write_train_log_csv(
        os.path.join(cfg.out_dir, "train_log.csv"), col.train_rows)
    if noop is not None:
        noop_payload = {"condition": cfg.condition, "eta_h": cfg.eta_h,
                        "momentum": cfg.latent_momentum} | noop.to_dict()
        reports.write_json(os.path.join(cfg.out_dir, "noop.json"), noop_payload)
    reports.render_run_figures(cfg.out_dir, col.rows)
    phases["report"] = time.perf_counter() - t0
    manifest_path = reports.write_manifest(cfg.out_dir, cfg.flat(), phases,
                                           status="ok")
    return RunResult(out_dir=cfg.out_dir, rows=col.rows, manifest_path=manifest_path)
