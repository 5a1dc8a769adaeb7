"""Training loop, metrics streaming and estimator sweeps."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..estimators import EstimatorKind
from ..qnn import SGD, Model, evaluate, lr_at, save_checkpoint, train_step
from ..tensor import RandomSource
from .config import RunConfig
from .data import Dataset, load_idx, synth_blobs

log = logging.getLogger(__name__)

TIMING_FIELDS = ("wall_ms",)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    val_loss: float
    lr: float
    sites: dict = field(default_factory=dict)
    wall_ms: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class JsonlSink:
    """Appends one JSON object per line, flushing after every record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._last_step = -1

    def __call__(self, rec: MetricsRecord) -> None:
        if rec.step <= self._last_step:
            raise ValueError(f"metrics step {rec.step} not after {self._last_step}")
        self._last_step = rec.step
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: invalid JSON line: {e}") from None
    return rows


def strip_timing(row: dict) -> dict:
    return {k: v for k, v in row.items() if k not in TIMING_FIELDS}


def build_datasets(cfg: RunConfig, rng: RandomSource) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds["type"] == "blobs":
        train = synth_blobs(ds["classes"], ds["dim"], ds["samples"], ds["noise_sigma"], rng.spawn(10))
        n_val = ds.get("val_samples", max(ds["samples"] // 4, ds["classes"]))
        val = synth_blobs(ds["classes"], ds["dim"], n_val, ds["noise_sigma"], rng.spawn(11))
        return train, val
    train = load_idx(cfg.resolve(ds["images_path"]), cfg.resolve(ds["labels_path"]), ds.get("limit"))
    val = load_idx(cfg.resolve(ds["val_images_path"]), cfg.resolve(ds["val_labels_path"]))
    return train, val


def _batches(data: Dataset, order: np.ndarray, batch_size: int):
    # incomplete trailing batch is dropped so BatchNorm always sees full batches
    for i in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[i : i + batch_size]
        yield data.x[idx], data.y[idx]


def _site_dump(model: Model) -> dict:
    return {
        name: {"q_min": s.last_range[0], "q_max": s.last_range[1], "saturation": s.last_saturation}
        for name, s in model.sites.items()
        if s.last_range is not None
    }


def run_training(
    cfg: RunConfig,
    sinks: Iterable[Callable[[MetricsRecord], None]] = (),
    checkpoint: str | Path | None = None,
) -> MetricsRecord:
    """Calibrate, train for ``cfg.epochs`` and validate after every epoch.

    Records go to every sink: one for the calibrated start (step 0) and one
    per epoch. Returns the last record.
    """
    sinks = list(sinks)
    root = RandomSource(cfg.seed)
    train, val = build_datasets(cfg, root)
    shuffle_rng = root.spawn(3)
    in_shape = train.x.shape[1:]
    model = Model(cfg.layer_specs(in_shape, cfg.num_classes()), cfg.quant_config(), seed=cfg.seed)
    opt_cfg = cfg.raw["optimizer"]
    opt = SGD(opt_cfg["lr"], opt_cfg["momentum"], opt_cfg["weight_decay"])
    schedule = cfg.schedule()
    t0 = time.perf_counter()

    def emit(rec: MetricsRecord):
        rec.wall_ms = int(1000 * (time.perf_counter() - t0))
        for s in sinks:
            s(rec)

    if cfg.calibration_batches > 0 and model.sites:
        order = shuffle_rng.permutation(len(train))
        calib = list(_batches(train, order, cfg.batch_size))[: cfg.calibration_batches]
        model.calibrate(calib)

    tr_loss, tr_acc = evaluate(model, train.x, train.y)
    va_loss, va_acc = evaluate(model, val.x, val.y)
    rec = MetricsRecord(0, 0, tr_loss, tr_acc, va_acc, va_loss, opt.lr, _site_dump(model))
    emit(rec)

    for epoch in range(cfg.epochs):
        opt.lr = lr_at(schedule, epoch, cfg.epochs, opt_cfg["lr"])
        order = shuffle_rng.permutation(len(train))
        losses, accs = [], []
        for batch in _batches(train, order, cfg.batch_size):
            loss, m = train_step(model, batch, opt)
            if not math.isfinite(loss):
                dump = json.dumps(_site_dump(model), indent=1, sort_keys=True)
                raise TrainingDiverged(f"non-finite loss at step {model.step}; site ranges:\n{dump}")
            losses.append(loss)
            accs.append(m["acc"])
        model.epoch = epoch + 1
        va_loss, va_acc = evaluate(model, val.x, val.y)
        rec = MetricsRecord(
            model.step, epoch + 1, float(np.mean(losses)), float(np.mean(accs)),
            va_acc, va_loss, opt.lr, _site_dump(model),
        )
        log.info("epoch %d step %d loss %.4f val_acc %.4f", epoch + 1, model.step, rec.loss, va_acc)
        emit(rec)

    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return rec


ESTIMATOR_SWEEP = [k for k in EstimatorKind]


def estimator_overrides(kind: EstimatorKind, momentum: float | None = None, interval: int | None = None) -> dict:
    """Gradient and activation sites use ``kind``; DSGC runs pair it with
    current min-max activations."""
    grad = {"estimator": kind.value}
    act = {"estimator": EstimatorKind.CURRENT_MIN_MAX.value if kind is EstimatorKind.DSGC else kind.value}
    for d in (grad, act):
        if momentum is not None:
            d["momentum"] = momentum
        if interval is not None:
            d["interval"] = interval
    return {"quant": {"gradients": grad, "activations": act}}


def run_sweep(
    cfg: RunConfig,
    out_dir,
    seeds: int = 3,
    momentum: float | None = None,
    interval: int | None = None,
    kinds: list[EstimatorKind] | None = None,
) -> dict:
    """Train every estimator kind for ``seeds`` seeds; one JSONL file per run.

    Returns ``{kind: {"mean": .., "std": .., "val_acc": [...]}}`` and writes
    it to ``summary.json`` in ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for kind in kinds or ESTIMATOR_SWEEP:
        accs = []
        for i in range(seeds):
            seed = cfg.seed + i
            run_cfg = cfg.with_overrides(seed=seed, **estimator_overrides(kind, momentum, interval))
            with JsonlSink(out_dir / f"{kind.value}_seed{seed}.jsonl") as sink:
                final = run_training(run_cfg, [sink])
            accs.append(final.val_acc)
        summary[kind.value] = {
            "mean": statistics.fmean(accs),
            "std": statistics.stdev(accs) if len(accs) > 1 else 0.0,
            "val_acc": accs,
        }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
