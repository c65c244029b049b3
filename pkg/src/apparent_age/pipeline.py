"""Run-matrix expansion, staged finetuning and evaluation.

A run is one (dataset sequence, loss) pair. Each dataset in the sequence is
a stage: the network is finetuned on that dataset's ``train`` split starting
from the previous stage's weights, and a checkpoint is written to
``<output_dir>/<run_id>/stage<k>/``.

Every stage reseeds from ``(seed, stage_index)`` and builds a fresh
optimizer, so resuming from a stored checkpoint reproduces an uninterrupted
run exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .age_head import AgeGrid, readout_array, softmax_array
from .backbones import build_backbone
from .datasets import LABEL_POLICIES, load_image, load_manifest, manifest_text, read_rows, row_to_record
from .exceptions import InvalidInputError
from .losses import OBJECTIVES, LossWeights, batch_loss
from .metrics import PredictionRecord

log = logging.getLogger(__name__)

FULL_SCALE_SEQUENCES = [
    ["imdb_wiki"],
    ["imdb_wiki", "clap"],
    ["imdb_wiki", "appa_real"],
    ["imdb_wiki", "fairface"],
    ["imdb_wiki", "fairface", "clap"],
    ["imdb_wiki", "fairface", "appa_real"],
]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Run:
    run_id: str
    sequence: tuple
    objective: str


@dataclass
class RunMatrix:
    sequences: list
    losses: list
    runs: list

    def __len__(self):
        return len(self.runs)


def run_id_for(sequence, objective):
    return f"{objective}__{'+'.join(sequence)}"


def expand_run_matrix(config) -> RunMatrix:
    """Cartesian product of sequences (outer) and losses (inner)."""
    sequences = [tuple(s) for s in config.get("sequences") or []]
    losses = list(config.get("losses") or [])
    if not sequences or not losses:
        raise InvalidInputError("run matrix needs at least one sequence and one loss")
    if any(len(s) == 0 for s in sequences):
        raise InvalidInputError("empty dataset sequence")
    for loss in losses:
        if loss not in OBJECTIVES:
            raise InvalidInputError(f"unknown loss {loss!r}; expected one of {OBJECTIVES}")
    if len(set(sequences)) != len(sequences) or len(set(losses)) != len(losses):
        raise InvalidInputError("duplicate sequence or loss in run matrix")
    runs = [Run(run_id_for(s, loss), s, loss) for s in sequences for loss in losses]
    return RunMatrix([list(s) for s in sequences], losses, runs)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class StagePlan:
    dataset_name: str
    manifest_path: str
    epochs: int = 10
    learning_rate: float = 1e-3
    label_policy: str = "apparent"
    batch_size: int = 32
    momentum: float = 0.9
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.label_policy not in LABEL_POLICIES:
            raise InvalidInputError(f"unknown label policy {self.label_policy!r}")


@dataclass
class TrainSettings:
    """Run-independent settings shared by every stage."""

    backbone: dict = field(default_factory=lambda: {"name": "tiny_cnn", "image_size": 32, "in_channels": 1})
    grid_start: int = 0
    grid_stop: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    threads: int = 1

    @property
    def grid(self) -> AgeGrid:
        return AgeGrid.integers(self.grid_start, self.grid_stop)

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d


@dataclass
class RunConfig:
    settings: TrainSettings
    datasets: dict
    sequences: list
    losses: list
    output_dir: Path
    stage_defaults: dict = field(default_factory=dict)
    evaluation: dict | None = None

    def matrix(self) -> RunMatrix:
        return expand_run_matrix({"sequences": self.sequences, "losses": self.losses})

    def stage_plans(self, sequence) -> list:
        plans = []
        for name in sequence:
            if name not in self.datasets:
                raise InvalidInputError(f"sequence refers to undefined dataset {name!r}")
            ds = dict(self.datasets[name])
            merged = {**self.stage_defaults, **{k: v for k, v in ds.items() if k != "manifest"}}
            plans.append(StagePlan(dataset_name=name, manifest_path=str(ds["manifest"]), **merged))
        return plans


def load_run_config(path, overrides=None, base_dir=None) -> RunConfig:
    """Parse a YAML run config.

    Relative paths resolve against ``base_dir``, defaulting to the config's directory.
    """
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    raw.update(overrides or {})
    base = Path(base_dir) if base_dir else path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    grid = raw.get("grid", {})
    settings = TrainSettings(
        backbone=raw.get("backbone", TrainSettings().backbone),
        grid_start=int(grid.get("start", 0)),
        grid_stop=int(grid.get("stop", 100)),
        weights=LossWeights.from_dict(raw.get("loss_weights")),
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)),
    )
    datasets = {}
    for name, ds in (raw.get("datasets") or {}).items():
        if "manifest" not in ds:
            raise InvalidInputError(f"dataset {name!r} has no manifest path")
        datasets[name] = {**ds, "manifest": str(resolve(ds["manifest"]))}
    evaluation = raw.get("evaluation")
    if evaluation:
        evaluation = {**evaluation, "manifest": str(resolve(evaluation["manifest"]))}
    cfg = RunConfig(
        settings=settings,
        datasets=datasets,
        sequences=raw.get("sequences") or [],
        losses=raw.get("losses") or [],
        output_dir=resolve(raw.get("output_dir", "runs")),
        stage_defaults=raw.get("defaults") or {},
        evaluation=evaluation,
    )
    for seq in cfg.sequences:
        cfg.stage_plans(seq)
    return cfg


def _file_digest(path):
    p = Path(path)
    if not p.exists():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


def config_hash(settings: TrainSettings, objective, plans) -> str:
    """Digest of everything that determines the weights after ``plans`` have run."""
    payload = {
        "settings": settings.to_dict(),
        "objective": objective,
        "stages": [{**asdict(p), "manifest_sha256": _file_digest(p.manifest_path)} for p in plans],
    }
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    run_id: str
    stage_index: int
    weights_path: Path
    config_hash: str
    metrics_so_far: dict
    backbone: dict
    objective: str
    weights: dict
    grid: list

    @property
    def directory(self) -> Path:
        return self.weights_path.parent

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_dict(self.weights)

    def age_grid(self) -> AgeGrid:
        return AgeGrid(np.asarray(self.grid))

    def build_model(self):
        model = build_backbone(self.backbone, len(self.grid))
        model.load_state_dict(torch.load(self.weights_path, map_location="cpu", weights_only=True))
        model.eval()
        return model

    def save_meta(self):
        meta = {k: v for k, v in asdict(self).items() if k != "weights_path"}
        meta["weights_file"] = self.weights_path.name
        (self.directory / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint.json in {directory}")
    meta = json.loads(meta_path.read_text())
    weights_path = directory / meta.pop("weights_file")
    return Checkpoint(weights_path=weights_path, **meta)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class _DistributionLossFn(torch.autograd.Function):
    """Batch-mean loss whose backward uses the analytic logit gradients."""

    @staticmethod
    def forward(ctx, logits, targets, objective, weights, grid):
        z = logits.detach().cpu().double().numpy()
        t = targets.detach().cpu().double().numpy()
        if objective == "ce":
            t = grid.nearest_category(t)
        totals, comps, grads = batch_loss(z, t, objective, weights, grid)
        ctx.save_for_backward(torch.from_numpy(grads / len(z)).to(logits.dtype))
        ctx.components = {k: float(v.mean()) for k, v in comps.items()}
        return logits.new_tensor(float(totals.mean()))

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None, None


class DistributionLoss(torch.nn.Module):
    def __init__(self, objective, weights=None, grid=None):
        super().__init__()
        if objective not in OBJECTIVES:
            raise InvalidInputError(f"unknown objective {objective!r}")
        self.objective = objective
        self.weights = weights or LossWeights()
        self.grid = grid or AgeGrid.integers()

    def forward(self, logits, targets):
        return _DistributionLossFn.apply(logits, targets, self.objective, self.weights, self.grid)


def _components(loss):
    # the autograd node of a custom Function doubles as its ctx
    return getattr(loss.grad_fn, "components", {})


def _configure_torch(threads):
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def load_arrays(manifest, split, policy, image_size, channels):
    """Stack one split's images into float32 (n, C, H, W) with float64 targets."""
    part = manifest.split(split)
    xs, ys = [], []
    for rec in part.records:
        y = rec.target(policy)
        if y is None:
            raise TrainingError(f"{manifest.name}: record {rec.sample_id} lacks the '{policy}' label")
        xs.append(load_image(manifest.resolve(rec), image_size, channels))
        ys.append(y)
    if not xs:
        return np.zeros((0, channels, image_size, image_size), np.float32), np.zeros(0)
    return np.stack(xs), np.asarray(ys, dtype=np.float64)


@torch.no_grad()
def _mean_loss(model, criterion, x, y, batch_size=256):
    if len(x) == 0:
        return None
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        xb = torch.from_numpy(x[i:i + batch_size])
        yb = torch.from_numpy(y[i:i + batch_size])
        total += criterion(model(xb), yb).item() * len(xb)
    return total / len(x)


def stage_seed(seed, stage_index):
    return int(np.random.SeedSequence([seed, stage_index]).generate_state(1)[0])


def fresh_model(settings: TrainSettings):
    torch.manual_seed(settings.seed)
    return build_backbone(settings.backbone, len(settings.grid))


def run_stage(start, stage: StagePlan, objective, settings: TrainSettings, stage_index=0, run_id="run",
              out_dir=None, prior_metrics=None):
    """Finetune on one dataset and write a checkpoint.

    ``start`` is a Checkpoint to continue from, or None for a freshly
    initialized backbone. Returns the new Checkpoint.
    """
    _configure_torch(settings.threads)
    grid = settings.grid
    if start is None:
        model = fresh_model(settings)
    else:
        model = start.build_model()
        prior_metrics = prior_metrics or start.metrics_so_far

    manifest = load_manifest(stage.manifest_path, label_policy=stage.label_policy, name=stage.dataset_name)
    size = settings.backbone.get("image_size", 32)
    channels = settings.backbone.get("in_channels", 1)
    x_tr, y_tr = load_arrays(manifest, "train", stage.label_policy, size, channels)
    x_va, y_va = load_arrays(manifest, "val", stage.label_policy, size, channels)
    if len(x_tr) == 0:
        raise TrainingError(f"{stage.dataset_name}: train split is empty")

    torch.manual_seed(stage_seed(settings.seed, stage_index))
    shuffle = torch.Generator().manual_seed(stage_seed(settings.seed, stage_index))
    criterion = DistributionLoss(objective, settings.weights, grid)
    opt = torch.optim.SGD(model.parameters(), lr=stage.learning_rate, momentum=stage.momentum)

    train_curve, val_curve = [], []
    for epoch in range(stage.epochs):
        model.train()
        order = torch.randperm(len(x_tr), generator=shuffle).numpy()
        running = 0.0
        for b in range(0, len(order), stage.batch_size):
            idx = order[b:b + stage.batch_size]
            xb, yb = torch.from_numpy(x_tr[idx]), torch.from_numpy(y_tr[idx])
            where = f"{run_id} stage {stage_index} ({stage.dataset_name}) epoch {epoch} batch {b // stage.batch_size}"
            logits = model(xb)
            if not torch.isfinite(logits).all():
                raise TrainingError(f"{where}: non-finite logits; training diverged")
            loss = criterion(logits, yb)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"{where}: non-finite loss {loss.item()}; components {_components(loss)}")
            opt.zero_grad()
            loss.backward()
            if stage.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), stage.clip_grad_norm)
            opt.step()
            running += loss.item() * len(idx)
        train_curve.append(running / len(order))
        val_curve.append(_mean_loss(model, criterion, x_va, y_va))
        log.info("%s stage %d epoch %d: train %.4f val %s", run_id, stage_index, epoch,
                 train_curve[-1], val_curve[-1])

    stages = list((prior_metrics or {}).get("stages", []))
    stages.append({"dataset": stage.dataset_name, "train_loss": train_curve, "val_loss": val_curve})
    plans_so_far = list((prior_metrics or {}).get("plans", [])) + [asdict(stage)]

    out_dir = Path(out_dir) if out_dir is not None else Path("runs") / run_id / f"stage{stage_index}"
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "checkpoint.pt"
    torch.save(model.state_dict(), weights_path)
    ckpt = Checkpoint(
        run_id=run_id,
        stage_index=stage_index,
        weights_path=weights_path,
        config_hash=config_hash(settings, objective, [StagePlan(**p) for p in plans_so_far]),
        metrics_so_far={"stages": stages, "plans": plans_so_far},
        backbone=dict(settings.backbone),
        objective=objective,
        weights=settings.weights.to_dict(),
        grid=grid.ages.tolist(),
    )
    ckpt.save_meta()
    return ckpt


def execute_run(config: RunConfig, run: Run, resume=True):
    """Run every stage of ``run``, skipping stages whose checkpoint already matches."""
    plans = config.stage_plans(run.sequence)
    run_dir = config.output_dir / run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = None
    checkpoints = []
    for k, plan in enumerate(plans):
        stage_dir = run_dir / f"stage{k}"
        expected = config_hash(config.settings, run.objective, plans[: k + 1])
        if resume and (stage_dir / "checkpoint.json").exists():
            existing = load_checkpoint(stage_dir)
            if existing.config_hash == expected and existing.weights_path.exists():
                log.info("%s: reusing %s", run.run_id, stage_dir)
                ckpt = existing
                checkpoints.append(ckpt)
                continue
        ckpt = run_stage(ckpt, plan, run.objective, config.settings, k, run.run_id, stage_dir)
        checkpoints.append(ckpt)

    if config.evaluation:
        ev = config.evaluation
        manifest = load_manifest(ev["manifest"], name=ev.get("name"))
        records = evaluate_run(ckpt, manifest, split=ev.get("split", "test"))
        write_predictions(run_dir / "predictions.csv", manifest, records)
    return checkpoints


def _execute_by_id(config, run_id, resume):
    run = next(r for r in config.matrix().runs if r.run_id == run_id)
    execute_run(config, run, resume)
    return run_id


def execute_matrix(config: RunConfig, jobs=1, resume=True):
    runs = config.matrix().runs
    if jobs <= 1:
        for run in runs:
            execute_run(config, run, resume)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_execute_by_id, [config] * len(runs), [r.run_id for r in runs], [resume] * len(runs)))
    return runs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class PredictionList(list):
    """List of PredictionRecord that also reports how many rows were skipped."""

    skipped = 0


@torch.no_grad()
def predict_ages(model, x, grid: AgeGrid, half_width=None, batch_size=256):
    model.eval()
    out = []
    for i in range(0, len(x), batch_size):
        logits = model(torch.from_numpy(x[i:i + batch_size])).double().numpy()
        out.append(readout_array(softmax_array(logits), grid.ages, half_width))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_run(checkpoint: Checkpoint, manifest, split="test", model=None) -> PredictionList:
    """Predict every row of ``split``; AMRL runs use the residue-adjusted readout.

    Rows lacking both a real and an apparent age are skipped and counted.
    """
    model = model or checkpoint.build_model()
    grid = checkpoint.age_grid()
    half_width = checkpoint.loss_weights().residue_half_width if checkpoint.objective == "amrl" else None
    part = manifest.split(split) if split else manifest
    result = PredictionList()
    usable = [r for r in part.records if r.real_age is not None or r.apparent_mean is not None]
    result.skipped = len(part.records) - len(usable)
    if result.skipped:
        warnings.warn(f"{result.skipped} rows skipped: no real or apparent age label", stacklevel=2)
    if not usable:
        warnings.warn(f"no evaluable rows in split {split!r} of {manifest.name}", stacklevel=2)
        return result
    size = checkpoint.backbone.get("image_size", 32)
    channels = checkpoint.backbone.get("in_channels", 1)
    x = np.stack([load_image(manifest.resolve(r), size, channels) for r in usable])
    ages = predict_ages(model, x, grid, half_width)
    for rec, age in zip(usable, ages):
        result.append(PredictionRecord(rec.sample_id, float(age), rec.real_age, rec.apparent_mean,
                                       rec.apparent_std, rec.race, rec.gender))
    return result


def write_predictions(path, manifest, records):
    """Manifest-format CSV of the predicted rows with a ``predicted_age`` column appended."""
    by_id = {r.sample_id: r for r in manifest.records}
    rows = [by_id[p.sample_id] for p in records]
    text = manifest_text(rows, {"predicted_age": [repr(float(p.predicted_age)) for p in records]})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def read_predictions(path) -> list:
    out = []
    for line, row in read_rows(path):
        rec = row_to_record(row)
        raw = row.get("predicted_age", "")
        try:
            pred = float(raw)
        except (TypeError, ValueError):
            raise InvalidInputError(f"{path} line {line}: bad predicted_age {raw!r}") from None
        if not math.isfinite(pred):
            raise InvalidInputError(f"{path} line {line}: predicted_age must be finite")
        out.append(PredictionRecord(rec.sample_id, pred, rec.real_age, rec.apparent_mean, rec.apparent_std,
                                    rec.race, rec.gender))
    return out
