"""Scaled experiments shared by scripts/ and the acceptance tests.

Everything is generated in memory from a ``SynthConfig``; no files are written.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .acoustics import HrirStore, synthesize_scene
from .dsp import extract_features
from .losses import MetricAccumulator, MetricReport, evaluate
from .model import AuralNet, AuralNetConfig
from .pipeline import Dataset, load_hrirs, Record, SynthConfig, TrainConfig, _pmap, plan_records, predict_dataset, train_model

log = logging.getLogger("binloc.experiments")


def build_dataset(cfg: SynthConfig, hrirs: HrirStore | None = None) -> dict:
    """Synthesize and featurize every planned scene; returns ``{split: Dataset}``."""
    hrirs = hrirs or load_hrirs(cfg.hrir_manifest, None, cfg.hrir_model)
    grid = cfg.sector_grid

    def run(plan):
        clip, targets = synthesize_scene(plan["spec"], hrirs, grid, max_order=cfg.max_order)
        rec = Record(
            plan["id"], "", plan["split"], plan["room_id"], plan["room_kind"], plan["snr_db"],
            plan["talkers"], plan["spec"].to_dict(), targets.to_dict(), clip.placement,
        )
        return extract_features(clip.left, clip.right), targets, rec

    out = _pmap(run, plan_records(cfg))
    splits = {}
    for name in ("train", "val", "test"):
        sel = [o for o in out if o[2].split == name]
        if sel:
            splits[name] = Dataset.from_features([s[0] for s in sel], [s[1] for s in sel], [s[2] for s in sel])
    return splits


def score(model: AuralNet, data: Dataset, threshold: float = 0.5) -> MetricReport:
    return evaluate(predict_dataset(model, data), data.targets, model.config.grid, threshold)


@dataclass
class OverfitResult:
    report: MetricReport
    epochs: int
    seconds: float
    reached: bool


def overfit_experiment(n_clips: int = 50, max_epochs: int = 500, seed: int = 0, check_every: int = 10, model_overrides=None) -> OverfitResult:
    """Fit the full model to ``n_clips`` clips and report training-set metrics.

    Training stops as soon as detection accuracy is 100 % and combined
    DAE is below 2 deg (checked every ``check_every`` epochs).
    """
    per_cell = math.ceil(n_clips / 3)
    scfg = SynthConfig(seed=seed, talkers=[1, 2, 3], snr_db=[20], samples_per_condition=per_cell, splits={"train": 1.0})
    data = build_dataset(scfg)["train"]
    data = data.subset(np.random.default_rng(seed).permutation(len(data))[:n_clips])
    mcfg = AuralNetConfig(grid=scfg.sector_grid, seed=seed, **(model_overrides or {}))
    model = AuralNet(mcfg)
    tcfg = TrainConfig(lr=1e-3, batch_size=25, max_epochs=max_epochs, patience=max_epochs + 1, seed=seed)
    state = {"report": None}

    def check(epoch, m):
        if epoch % check_every and epoch != max_epochs:
            return False
        rep = state["report"] = score(m, data)
        log.info("overfit epoch %d acc=%.4f dae=%.3f", epoch, rep.detection_accuracy, rep.combined_dae_deg)
        return rep.detection_accuracy == 1.0 and rep.combined_dae_deg < 2.0

    t0 = time.time()
    res = train_model(model, data, None, tcfg, select_best=False, callback=check)
    rep = score(model, data)
    epochs = res.stopped_epoch
    reached = rep.detection_accuracy == 1.0 and rep.combined_dae_deg < 2.0
    return OverfitResult(rep, epochs, time.time() - t0, reached)


@dataclass
class AblationResult:
    reports: dict  # variant -> validation MetricReport pooled over training seeds
    per_seed: dict  # variant -> [MetricReport per training seed]
    epochs: dict  # variant -> [best epoch per training seed]
    seconds: float


def ablation_experiment(
    variants=("full", "regular_loss"),
    per_talker: int = 200,
    snrs=(20, 10, 5, 0),
    seed: int = 0,
    train_seeds=(0, 1, 2),
    max_epochs: int = 100,
    patience: int = 10,
    batch_size: int = 32,
) -> AblationResult:
    """Train each variant on one synthetic dataset and score its validation split.

    Training (initialization and shuffling) is repeated for every seed in
    ``train_seeds``; the pooled report sums angular errors over all valid
    detections of all runs, so a single run with few detections cannot
    decide the comparison on its own.
    """
    if per_talker % len(snrs):
        raise ValueError("per_talker must be divisible by the number of SNR levels")
    scfg = SynthConfig(
        seed=seed,
        talkers=[1, 2, 3],
        snr_db=list(snrs),
        samples_per_condition=per_talker // len(snrs),
        splits={"train": 0.8, "val": 0.2},
    )
    t0 = time.time()
    splits = build_dataset(scfg)
    train, val = splits["train"], splits["val"]
    log.info("ablation data: %d train / %d val in %.1fs", len(train), len(val), time.time() - t0)
    grid = scfg.sector_grid
    reports, per_seed, epochs = {}, {}, {}
    for v in variants:
        pooled = MetricAccumulator(grid)
        per_seed[v], epochs[v] = [], []
        for ts in train_seeds:
            model = AuralNet(AuralNetConfig(grid=grid, seed=ts, variant=v))
            tcfg = TrainConfig(lr=1e-3, batch_size=batch_size, max_epochs=max_epochs, patience=patience, seed=ts)
            res = train_model(model, train, val, tcfg)
            acc = MetricAccumulator(grid).add(predict_dataset(model, val), val.targets)
            pooled = pooled.merge(acc)
            per_seed[v].append(acc.report())
            epochs[v].append(res.best_epoch)
            log.info("ablation %s seed %d: %s (best epoch %d)", v, ts, per_seed[v][-1], res.best_epoch)
        reports[v] = pooled.report()
    return AblationResult(reports, per_seed, epochs, time.time() - t0)
