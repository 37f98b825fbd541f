"""Dataset generation, feature caching, training, evaluation and prediction."""
from __future__ import annotations

import functools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import nn
from .acoustics import (
    HRIR_MODELS,
    ROOMS,
    SEEN_ROOMS,
    UNSEEN_ROOMS,
    HrirStore,
    SceneSpec,
    SeparationViolation,
    stable_seed,
    synthesize_scene,
)
from .dsp import CLIP_SAMPLES, SAMPLE_RATE, FeatureSet, extract_features, read_features, read_wav, write_features, write_wav
from .geometry import Doa, SectorCollision, SectorGrid, TargetGrid, azimuth_separation, encode_targets, synthesis_doa_grid, sector_of
from .losses import LossWeights, MetricAccumulator, format_csv, format_table, total_loss
from .model import AuralNet, AuralNetConfig

log = logging.getLogger("binloc")

MANIFEST_VERSION = 1
CONFIG_VERSION = 1
THREADS_ENV = "BINLOC_THREADS"


class ConfigError(ValueError):
    """Invalid user input (config, manifest, audio format); CLI exit code 1."""


class TrainingDiverged(RuntimeError):
    pass


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


def _pmap(fn, items):
    items = list(items)
    k = n_threads()
    if k == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(k) as ex:
        return list(ex.map(fn, items))


# -- config files ------------------------------------------------------------------------------


def _key_lines(text: str) -> dict:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def load_yaml(path) -> tuple[dict, dict]:
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: {getattr(e, 'problem', e)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data, _key_lines(text)


def _check_fields(data: dict, cls, path, lines, allowed_extra=("version",)):
    known = {f.name for f in fields(cls)} | set(allowed_extra)
    for k in data:
        if k not in known:
            raise ConfigError(f"{path}:{lines.get(k, '?')}: unknown field '{k}' (expected one of {sorted(known)})")
    if "version" in data and data["version"] != CONFIG_VERSION:
        raise ConfigError(f"{path}:{lines.get('version', '?')}: unsupported config version {data['version']}")


@dataclass
class SynthConfig:
    """Dataset synthesis settings.

    Desk-scale defaults; the full-size training set is 98,136 clips over
    1/2/3 talkers, which this builder never produces unless asked to.
    """

    seed: int = 0
    grid: dict = field(default_factory=lambda: {"m_azimuth": 8, "n_elevation": 3})
    talkers: list = field(default_factory=lambda: [1, 2, 3])
    snr_db: list = field(default_factory=lambda: [20, 10, 0])
    samples_per_condition: int = 10
    splits: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})
    min_separation_deg: float = 45.0
    allow_small_separation: bool = False
    reverb: bool = True
    max_order: int = 20
    hrir_manifest: str | None = None
    hrir_model: str = "structural"  # built-in HRIRs when no manifest is given

    def validate(self, where="config", lines=None):
        lines = lines or {}

        def bad(key, msg):
            raise ConfigError(f"{where}:{lines.get(key, '?')}: field '{key}': {msg}")

        if not self.talkers or any(t not in (1, 2, 3) for t in self.talkers):
            bad("talkers", f"talker counts must be drawn from 1, 2, 3; got {self.talkers}")
        if not self.snr_db or any(not isinstance(s, (int, float)) for s in self.snr_db):
            bad("snr_db", "must be a non-empty list of numbers")
        if not isinstance(self.samples_per_condition, int) or self.samples_per_condition < 1:
            bad("samples_per_condition", "must be a positive integer")
        if set(self.splits) - {"train", "val", "test"} or any(v < 0 for v in self.splits.values()):
            bad("splits", "keys must be train/val/test with non-negative fractions")
        if not math.isclose(sum(self.splits.values()), 1.0, abs_tol=1e-9):
            bad("splits", f"fractions must sum to 1, got {sum(self.splits.values())}")
        if self.min_separation_deg < 45.0 and not self.allow_small_separation:
            bad("min_separation_deg", f"{self.min_separation_deg} < 45 deg; set allow_small_separation: true to override")
        if self.max_order < 0:
            bad("max_order", "must be >= 0")
        if self.hrir_model not in HRIR_MODELS:
            bad("hrir_model", f"must be one of {HRIR_MODELS}")
        SectorGrid.from_dict(self.grid)

    @property
    def sector_grid(self) -> SectorGrid:
        return SectorGrid.from_dict(self.grid)

    @classmethod
    def load(cls, path) -> "SynthConfig":
        data, lines = load_yaml(path)
        _check_fields(data, cls, path, lines)
        data.pop("version", None)
        cfg = cls(**data)
        cfg.validate(str(path), lines)
        return cfg


@dataclass
class TrainConfig:
    """Training settings. The reference batch size is 200; desk default is 32."""

    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    prior_init: bool = True
    weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    model: dict = field(default_factory=dict)

    def validate(self, where="config", lines=None):
        lines = lines or {}
        for key in ("lr", "batch_size", "max_epochs", "patience"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{where}:{lines.get(key, '?')}: field '{key}' must be positive")
        try:
            LossWeights(**self.weights)
            AuralNetConfig.from_dict(self.model)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from None

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.weights)

    def model_config(self, grid: SectorGrid | None = None) -> AuralNetConfig:
        d = dict(self.model)
        if grid is not None and "grid" not in d:
            d["grid"] = grid.to_dict()
        d.setdefault("seed", self.seed)
        return AuralNetConfig.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        data, lines = load_yaml(path)
        _check_fields(data, cls, path, lines)
        data.pop("version", None)
        cfg = cls(**data)
        cfg.validate(str(path), lines)
        return cfg


# -- manifests -------------------------------------------------------------------------------------


@dataclass
class Record:
    id: str
    clip: str
    split: str
    room_id: str | None
    room_kind: str
    snr_db: float | None
    talker_count: int
    scene: dict
    targets: dict
    placement: dict = field(default_factory=dict)

    @property
    def scene_spec(self) -> SceneSpec:
        return SceneSpec.from_dict(self.scene)

    @property
    def target_grid(self) -> TargetGrid:
        return TargetGrid.from_dict(self.targets)


@dataclass
class Manifest:
    path: Path
    grid: SectorGrid
    records: list

    @property
    def root(self) -> Path:
        return self.path.parent

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def clip_path(self, rec: Record) -> Path:
        return self.root / rec.clip

    def feature_path(self, rec: Record) -> Path:
        return self.root / "features" / f"{rec.id}.feat"


def write_manifest(path, grid: SectorGrid, records: Sequence[Record]):
    header = {"type": "header", "version": MANIFEST_VERSION, "grid": grid.to_dict(), "sample_rate": SAMPLE_RATE}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"type": "record", **asdict(r)}, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: manifest not found")
    grid, records = None, []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from None
        kind = obj.pop("type", None)
        if kind == "header":
            if obj.get("version") != MANIFEST_VERSION:
                raise ConfigError(f"{path}:{lineno}: unsupported manifest version {obj.get('version')}")
            grid = SectorGrid.from_dict(obj["grid"])
        elif kind == "record":
            try:
                records.append(Record(**obj))
            except TypeError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
        else:
            raise ConfigError(f"{path}:{lineno}: unknown line type {kind!r}")
    if grid is None:
        raise ConfigError(f"{path}: missing header line")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate record ids")
    return Manifest(path, grid, records)


# -- synth ----------------------------------------------------------------------------------------


def sample_doas(rng: np.random.Generator, k: int, grid: SectorGrid, min_sep: float, pool=None) -> list[Doa]:
    """Draw ``k`` grid directions with pairwise azimuth separation and distinct sectors."""
    pool = pool if pool is not None else synthesis_doa_grid()
    for _ in range(10000):
        picks = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
        ok = all(
            azimuth_separation(picks[a].azimuth_deg, picks[b].azimuth_deg) >= min_sep
            for a in range(k)
            for b in range(a + 1, k)
        )
        if ok and len({sector_of(grid, d) for d in picks}) == k:
            return picks
    raise SeparationViolation(f"could not place {k} sources {min_sep} deg apart")


def _split_counts(n: int, splits: dict) -> dict:
    order = ["train", "val", "test"]
    counts = {s: int(math.floor(n * splits.get(s, 0.0))) for s in order}
    rest = n - sum(counts.values())
    for s in sorted(order, key=lambda s: -(n * splits.get(s, 0.0) - counts[s])):
        if rest == 0:
            break
        if splits.get(s, 0.0) > 0:
            counts[s] += 1
            rest -= 1
    return counts


def plan_records(cfg: SynthConfig) -> list[dict]:
    """Deterministic list of scene plans over the talkers x SNR cross product."""
    grid = cfg.sector_grid
    pool = synthesis_doa_grid()
    plans = []
    for talkers in cfg.talkers:
        for snr in cfg.snr_db:
            cell = f"{talkers}t_{snr:g}db"
            rng = np.random.default_rng(stable_seed(cfg.seed, "split", cell))
            counts = _split_counts(cfg.samples_per_condition, cfg.splits)
            tags = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
            tags = [tags[i] for i in rng.permutation(len(tags))]
            n_test = 0
            for k, split in enumerate(tags):
                rid = f"{cell}_{k:05d}"
                seed = stable_seed(cfg.seed, rid)
                rrng = np.random.default_rng(seed)
                doas = sample_doas(rrng, talkers, grid, cfg.min_separation_deg, pool)
                if not cfg.reverb:
                    room_id, kind = None, "anechoic"
                else:
                    if split == "train":
                        kind = "seen"
                    elif split == "val":
                        kind = "unseen"
                    else:
                        kind = "seen" if n_test % 2 == 0 else "unseen"
                        n_test += 1
                    names = sorted(SEEN_ROOMS if kind == "seen" else UNSEEN_ROOMS)
                    room_id = names[int(rrng.integers(len(names)))]
                sources = [(f"{split}/{rid}/s{j}", d) for j, d in enumerate(doas)]
                spec = SceneSpec(
                    sources,
                    snr_db=float(snr),
                    room=ROOMS[room_id] if room_id else None,
                    seed=seed,
                    min_separation_deg=cfg.min_separation_deg,
                )
                plans.append(dict(id=rid, split=split, room_id=room_id, room_kind=kind, snr_db=float(snr), talkers=talkers, spec=spec))
    return plans


@functools.lru_cache(maxsize=4)
def _synthetic_store(model: str) -> HrirStore:
    return HrirStore.synthetic(model=model)


def load_hrirs(manifest: str | None, base: Path | None = None, model: str = "structural") -> HrirStore:
    if manifest is None:
        return _synthetic_store(model)
    p = Path(manifest)
    if not p.is_absolute() and base is not None:
        p = base / p
    return HrirStore.load(p)


def cmd_synth(cfg: SynthConfig, out_dir, config_dir: Path | None = None) -> Manifest:
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    grid = cfg.sector_grid
    hrirs = load_hrirs(cfg.hrir_manifest, config_dir, cfg.hrir_model)
    plans = plan_records(cfg)

    def run(plan):
        clip, targets = synthesize_scene(plan["spec"], hrirs, grid, max_order=cfg.max_order)
        rel = f"clips/{plan['id']}.wav"
        write_wav(out_dir / rel, clip.stereo)
        return Record(
            id=plan["id"],
            clip=rel,
            split=plan["split"],
            room_id=plan["room_id"],
            room_kind=plan["room_kind"],
            snr_db=plan["snr_db"],
            talker_count=plan["talkers"],
            scene=plan["spec"].to_dict(),
            targets=targets.to_dict(),
            placement=clip.placement,
        )

    t0 = time.time()
    records = _pmap(run, plans)
    path = out_dir / "manifest.jsonl"
    write_manifest(path, grid, records)
    log.info("synthesized %d clips in %.1fs -> %s", len(records), time.time() - t0, path)
    return Manifest(path, grid, records)


# -- featurize ------------------------------------------------------------------------------------


def load_clip(path, min_seconds: float = 1.0) -> np.ndarray:
    """Read a binaural clip as ``(2, 16000)``, validating the format."""
    try:
        data, rate = read_wav(path)
    except (ValueError, OSError) as e:
        raise ConfigError(f"{path}: cannot read WAV ({e})") from None
    if data.shape[0] != 2:
        raise ConfigError(f"{path}: expected a stereo (2-channel) binaural recording, got {data.shape[0]} channel(s); "
                          "record or export the left and right ear signals as one stereo file")
    if rate != SAMPLE_RATE:
        raise ConfigError(f"{path}: sample rate {rate} Hz; resample to {SAMPLE_RATE} Hz first")
    if data.shape[1] < int(min_seconds * SAMPLE_RATE):
        raise ConfigError(f"{path}: clip shorter than {min_seconds} s")
    return data[:, :CLIP_SAMPLES]


@dataclass
class FeaturizeResult:
    written: int = 0
    cached: int = 0
    errors: list = field(default_factory=list)


def cmd_featurize(manifest: Manifest, force: bool = False) -> FeaturizeResult:
    (manifest.root / "features").mkdir(exist_ok=True)
    res = FeaturizeResult()

    def run(rec):
        clip, feat = manifest.clip_path(rec), manifest.feature_path(rec)
        if not force and feat.exists() and clip.exists() and feat.stat().st_mtime_ns >= clip.stat().st_mtime_ns:
            return "cached", None
        try:
            stereo = load_clip(clip)
            write_features(feat, extract_features(stereo[0], stereo[1]))
        except Exception as e:  # per-record failure; the run continues
            return "error", f"{rec.id}: {e}"
        return "written", None

    for rec, (status, err) in zip(manifest.records, _pmap(run, manifest.records)):
        if status == "cached":
            res.cached += 1
            log.debug("cache hit %s", rec.id)
        elif status == "written":
            res.written += 1
        else:
            res.errors.append(err)
            log.error("featurize failed: %s", err)
    log.info("features: %d written, %d cached, %d errors", res.written, res.cached, len(res.errors))
    return res


@dataclass
class Dataset:
    left: np.ndarray  # (B, T, bands)
    right: np.ndarray
    cc: np.ndarray  # (B, n_cc)
    targets: np.ndarray  # (B, M, 3N+1)
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.left[idx], self.right[idx], self.cc[idx], self.targets[idx], [self.records[i] for i in idx] if self.records else [])

    @classmethod
    def from_features(cls, feats: Sequence[FeatureSet], targets: Sequence[TargetGrid], records=()) -> "Dataset":
        return cls(
            np.stack([f.left for f in feats]).astype(np.float32),
            np.stack([f.right for f in feats]).astype(np.float32),
            np.stack([f.cc for f in feats]).astype(np.float32),
            np.stack([t.to_array() for t in targets]),
            list(records),
        )


def load_split(manifest: Manifest, split: str | None) -> Dataset:
    recs = manifest.records if split is None else manifest.split(split)
    missing = [r.id for r in recs if not manifest.feature_path(r).exists()]
    if missing:
        res = cmd_featurize(manifest)
        if res.errors:
            raise RuntimeError(f"feature extraction failed for {len(res.errors)} record(s): {res.errors[:3]}")
    feats = [read_features(manifest.feature_path(r)) for r in recs]
    return Dataset.from_features(feats, [r.target_grid for r in recs], recs)


# -- training ----------------------------------------------------------------------------------


class EarlyStopping:
    """Track the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _batch_loss(model, data: Dataset, idx, weights, variant):
    out = model(data.left[idx], data.right[idx], data.cc[idx])
    return total_loss(out, data.targets[idx], weights, variant)


def evaluate_loss(model: AuralNet, data: Dataset, weights: LossWeights, batch_size: int = 64) -> dict:
    """Sample-weighted mean of the loss terms over ``data`` (no graph recorded)."""
    sums = dict(total=0.0, coarse=0.0, det=0.0, azi=0.0, ele=0.0)
    with nn.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            lt = _batch_loss(model, data, idx, weights, model.config.variant)
            for k in sums:
                v = float(lt.total.data) if k == "total" else getattr(lt, k)
                sums[k] += v * len(idx)
    return {k: v / max(len(data), 1) for k, v in sums.items()}


def predict_dataset(model: AuralNet, data: Dataset, batch_size: int = 64) -> np.ndarray:
    out = [
        model.predict(data.left[s : s + batch_size], data.right[s : s + batch_size], data.cc[s : s + batch_size])
        for s in range(0, len(data), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0,) + model.config.grid.output_shape)


@dataclass
class TrainResult:
    model: AuralNet
    history: list
    best_epoch: int
    stopped_epoch: int


def train_model(
    model: AuralNet,
    train: Dataset,
    val: Dataset | None,
    cfg: TrainConfig,
    log_path=None,
    select_best: bool = True,
    callback=None,
) -> TrainResult:
    """Minibatch Adam with early stopping on total validation loss.

    The parameters of the best validation epoch are restored at the end.
    ``callback(epoch, model)`` runs after each epoch; returning True stops.
    """
    weights = cfg.loss_weights
    variant = model.config.variant
    model.fit_normalization(train.left, train.right, train.cc)
    if cfg.prior_init:
        model.init_detection_prior(train.targets)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(stable_seed(cfg.seed, "shuffle"))
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state_dict()
    history = []
    fh = open(log_path, "w") if log_path else None
    epoch = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(train))
            sums = dict(total=0.0, coarse=0.0, det=0.0, azi=0.0, ele=0.0)
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                lt = _batch_loss(model, train, idx, weights, variant)
                loss = float(lt.total.data)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                opt.zero_grad()
                lt.total.backward()
                opt.step()
                for k in sums:
                    sums[k] += (loss if k == "total" else getattr(lt, k)) * len(idx)
            entry = {"epoch": epoch, **{f"train_{k}": v / len(train) for k, v in sums.items()}}
            if val is not None and len(val):
                vl = evaluate_loss(model, val, weights)
                entry.update({f"val_{k}": v for k, v in vl.items()})
                monitor = vl["total"]
            else:
                monitor = entry["train_total"]
            if not math.isfinite(monitor):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            history.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            stop = stopper.step(epoch, monitor)
            if stopper.best_epoch == epoch:
                best_state = model.state_dict()
            if stop or (callback is not None and callback(epoch, model)):
                break
    finally:
        if fh:
            fh.close()
    if select_best:
        model.load_state_dict(best_state)
    return TrainResult(model, history, stopper.best_epoch, epoch)


def cmd_train(manifest: Manifest, cfg: TrainConfig, out_dir) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = load_split(manifest, "train"), load_split(manifest, "val")
    if not len(train) or not len(val):
        raise ConfigError("train and val splits must be non-empty")
    model = AuralNet(cfg.model_config(manifest.grid))
    if model.config.grid != manifest.grid:
        raise ConfigError(f"model grid {model.config.grid} does not match manifest grid {manifest.grid}")
    res = train_model(model, train, val, cfg, log_path=out_dir / "train_log.jsonl")
    model.save(out_dir / "model.ckpt")
    (out_dir / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    log.info("trained %d epochs (best %d) -> %s", res.stopped_epoch, res.best_epoch, out_dir / "model.ckpt")
    return res


# -- evaluation ---------------------------------------------------------------------------------


@dataclass
class EvalResult:
    cells: dict  # (talkers, snr) -> {room_kind: MetricReport}
    kinds: list
    table: str
    csv: str


def evaluate_records(grid: SectorGrid, records: Sequence[Record], preds: np.ndarray, threshold: float = 0.5) -> EvalResult:
    accs: dict = {}
    for rec, pred in zip(records, preds):
        key = (rec.talker_count, math.inf if rec.snr_db is None else rec.snr_db)
        acc = accs.setdefault(key, {}).setdefault(rec.room_kind, MetricAccumulator(grid, threshold))
        acc.add(pred, rec.target_grid.to_array())
    order = {"seen": 0, "unseen": 1, "anechoic": 2}
    kinds = sorted({k for c in accs.values() for k in c}, key=lambda k: (order.get(k, 9), k))
    cells = {key: {k: a.report() for k, a in c.items()} for key, c in accs.items()}
    return EvalResult(cells, kinds, format_table(cells, kinds), format_csv(cells, kinds))


def cmd_eval(manifest: Manifest, checkpoint, out_dir, split: str = "test", oracle: bool = False, threshold: float = 0.5) -> EvalResult:
    recs = manifest.split(split)
    if not recs:
        raise ConfigError(f"split '{split}' is empty")
    if oracle:
        preds = np.stack([r.target_grid.to_array() for r in recs])
    else:
        model = load_model(checkpoint)
        if model.config.grid != manifest.grid:
            raise ConfigError(f"checkpoint grid {model.config.grid} does not match manifest grid {manifest.grid}")
        preds = predict_dataset(model, load_split(manifest, split))
    res = evaluate_records(manifest.grid, recs, preds, threshold)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(res.table)
    (out_dir / "metrics.csv").write_text(res.csv)
    return res


def load_model(checkpoint) -> AuralNet:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists() or not Path(str(checkpoint) + ".json").exists():
        raise ConfigError(f"{checkpoint}: checkpoint or its .json sidecar is missing")
    try:
        return AuralNet.load(checkpoint)
    except nn.ShapeMismatch as e:
        raise ConfigError(f"{checkpoint}: checkpoint does not match its config: {e}") from None


# -- predict / verify ------------------------------------------------------------------------------


def cmd_predict(wav_path, checkpoint, threshold: float = 0.5):
    from .geometry import decode_predictions

    stereo = load_clip(wav_path)
    model = load_model(checkpoint)
    fs = extract_features(stereo[0], stereo[1])
    pred = model.predict(fs.left[None], fs.right[None], fs.cc[None])[0]
    return decode_predictions(model.config.grid, pred, threshold)


def cmd_verify(manifest: Manifest) -> list[str]:
    """Return a list of problems (empty when the manifest is consistent)."""
    problems = []
    for rec in manifest.records:
        if rec.split not in ("train", "val", "test"):
            problems.append(f"{rec.id}: unknown split {rec.split!r}")
        if not manifest.clip_path(rec).exists():
            problems.append(f"{rec.id}: clip {rec.clip} missing")
        try:
            spec = rec.scene_spec
            expected = encode_targets(manifest.grid, [d for _, d in spec.sources])
        except (KeyError, ValueError, SectorCollision) as e:
            problems.append(f"{rec.id}: scene invalid ({e})")
            continue
        if expected != rec.target_grid:
            problems.append(f"{rec.id}: targets differ from encode_targets(scene sources)")
        if len(spec.sources) != rec.talker_count:
            problems.append(f"{rec.id}: talker_count {rec.talker_count} != {len(spec.sources)} sources")
    return problems
