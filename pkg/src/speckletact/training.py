"""Training, evaluation, ablations and inference benchmarking for the decoder."""
from __future__ import annotations

import csv
import json
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad, kernels
from .dataset import Dataset, load_dataset
from .errors import InvalidArgument, NumericFailure
from .model import Decoder, build_model
from .optics import CROP_REGIONS

HIST_BIN_N = 0.01


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    init_seed: int = 0
    shuffle_seed: int = 0
    subset_seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise InvalidArgument("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgument("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("batch_size and epochs must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        unknown = sorted(set(doc) - set(cls.__dataclass_fields__))
        if unknown:
            raise InvalidArgument(f"unknown hyperparameter keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise InvalidArgument(f"hyperparameter file {path} not found") from exc
        except ValueError as exc:
            raise InvalidArgument(f"hyperparameter file {path} is not valid JSON") from exc
        return cls.from_dict(doc)


# per-task epoch budgets; everything else is the Hyperparams default
TASK_EPOCHS = {"position4": 15, "force": 40, "texture9": 15}


def default_hyperparams(task: str) -> Hyperparams:
    """The default training recipe for ``task``."""
    if task not in TASK_EPOCHS:
        raise InvalidArgument(f"unknown task {task!r}")
    return Hyperparams(epochs=TASK_EPOCHS[task])


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


def model_for(dataset: Dataset, seed=0) -> Decoder:
    if dataset.is_regression:
        return build_model("regress", 1, seed=seed)
    return build_model("classify", len(dataset.label_names), seed=seed)


def _loss(model, out, labels):
    if model.task == "regress":
        return ad.mse(out, labels.reshape(-1, 1).astype(out.dtype))
    return ad.softmax_cross_entropy(out, labels)


def train(model: Decoder, dataset: Dataset, hp: Hyperparams, deterministic: bool = False, log=None) -> dict:
    """Minibatch Adam; returns the run report (loss trace, settings, wall-clock)."""
    expects_reg = model.task == "regress"
    if expects_reg != dataset.is_regression:
        raise InvalidArgument(f"model head ({model.task}) does not match the {dataset.task} dataset")
    if not expects_reg and model.num_classes != len(dataset.label_names):
        raise InvalidArgument(f"model has {model.num_classes} classes, dataset {len(dataset.label_names)}")
    opt = Adam(model.params.values(), hp.lr, hp.beta1, hp.beta2, hp.eps)
    losses = []
    t0 = time.perf_counter()
    with threadpool_limits(limits=1) if deterministic else nullcontext():
        for epoch in range(hp.epochs):
            total, count = 0.0, 0
            for step, (x, y) in enumerate(dataset.batches(hp.batch_size, hp.shuffle_seed, epoch)):
                if len(y) < 2:
                    continue  # a lone sample has no batch statistics
                model.zero_grad()
                with ad.Tape() as tape:
                    loss = _loss(model, model.forward(x, train=True), y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericFailure(
                        f"non-finite loss at epoch {epoch} step {step} (lr={hp.lr}); "
                        "lower the learning rate or check the input data")
                tape.backward(loss)
                opt.step()
                total += value * len(y)
                count += len(y)
            losses.append(total / max(count, 1))
            if log is not None:
                log(f"epoch {epoch + 1}/{hp.epochs} loss {losses[-1]:.6f}")
    model.epoch = hp.epochs
    return {
        "task": dataset.task,
        "hyperparams": hp.to_dict(),
        "optimizer": "adam",
        "kernel_backend": kernels.BACKEND,
        "loss": "mse" if expects_reg else "cross-entropy",
        "train_samples": len(dataset),
        "epoch_loss": losses,
        "loss_trend_decreasing": bool(len(losses) < 2 or losses[-1] < losses[0]),
        "wall_clock_s": time.perf_counter() - t0,
    }


# --- evaluation --------------------------------------------------------------

def confusion_matrix(truth, pred, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


def classification_metrics(truth, logits, label_names):
    if len(truth) == 0:
        raise InvalidArgument("cannot evaluate an empty split")
    pred = np.argmax(np.asarray(logits), axis=1)  # ties go to the lowest index
    cm = confusion_matrix(truth, pred, len(label_names))
    return {"kind": "classification", "accuracy": float(np.trace(cm) / cm.sum()),
            "confusion_matrix": cm.tolist(), "label_names": list(label_names),
            "predictions": pred.tolist()}


def regression_metrics(truth, pred, groups=None):
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if len(truth) == 0:
        raise InvalidArgument("cannot evaluate an empty split")
    err = pred - truth
    abs_err = np.abs(err)
    sst = float(((truth - truth.mean()) ** 2).sum())
    sse = float((err ** 2).sum())
    out = {"kind": "regression", "n": int(len(truth)), "mae": float(abs_err.mean()),
           "rmse": float(np.sqrt((err ** 2).mean())),
           "r2": None if sst == 0 else 1.0 - sse / sst,
           "histogram": error_histogram(abs_err)}
    if out["rmse"] < out["mae"] * (1 - 1e-12):
        raise NumericFailure("RMSE below MAE; metric computation is broken")
    if groups is not None:
        groups = np.asarray(groups)
        out["per_location"] = {str(g): regression_metrics(truth[groups == g], pred[groups == g])
                               for g in sorted(set(groups.tolist()))}
    return out


def error_histogram(abs_err, bin_width=HIST_BIN_N):
    """Counts of |error| in [k*w, (k+1)*w) bins spanning [0, max|e|]."""
    abs_err = np.asarray(abs_err, dtype=np.float64)
    nbins = max(1, int(np.floor(abs_err.max() / bin_width)) + 1) if len(abs_err) else 1
    idx = np.minimum((abs_err / bin_width).astype(np.int64), nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    return [[round(k * bin_width, 10), int(c)] for k, c in enumerate(counts)]


def evaluate(model: Decoder, dataset: Dataset) -> dict:
    out = model.predict(dataset.images)
    if model.task == "regress":
        return regression_metrics(dataset.labels, out[:, 0], dataset.class_names)
    return classification_metrics(dataset.labels, out, dataset.label_names)


def evaluate_classification(model: Decoder, dataset: Dataset) -> dict:
    if model.task != "classify":
        raise InvalidArgument("evaluate_classification needs a classifier head")
    return evaluate(model, dataset)


def evaluate_regression(model: Decoder, dataset: Dataset) -> dict:
    if model.task != "regress":
        raise InvalidArgument("evaluate_regression needs a regressor head")
    return evaluate(model, dataset)


def format_regression_lines(metrics):
    lines = []
    for name, m in metrics.get("per_location", {}).items():
        r2 = "undefined" if m["r2"] is None else f"{m['r2']:.4f}"
        lines.append(f"location {name}: MAE {m['mae']:.4f} N, RMSE {m['rmse']:.4f} N, R^2 {r2}")
    return lines


# --- ablations ---------------------------------------------------------------

def nested_subset(dataset: Dataset, per_class: int, seed: int):
    """Indices of the first ``per_class`` samples of each class under a seeded per-class order.

    The order does not depend on ``per_class``, so smaller subsets are
    prefixes of (and hence nested in) larger ones.
    """
    names = np.array(dataset.class_names)
    picked = []
    for k, name in enumerate(sorted(set(names.tolist()))):
        idx = np.flatnonzero(names == name)
        if per_class > len(idx):
            raise InvalidArgument(f"class {name} has {len(idx)} samples, fewer than {per_class}")
        rng = np.random.Generator(np.random.PCG64([int(seed), k]))
        picked.append(idx[rng.permutation(len(idx))[:per_class]])
    return np.sort(np.concatenate(picked))


def _train_eval(train_ds, test_ds, hp, deterministic, log):
    model = model_for(train_ds, hp.init_seed)
    train(model, train_ds, hp, deterministic, log)
    return evaluate(model, test_ds)


def ablation_crop_regions(root, hp: Hyperparams, regions=tuple(CROP_REGIONS), deterministic=True, log=None):
    rows = []
    for region in regions:
        metrics = _train_eval(load_dataset(root, "train", region), load_dataset(root, "test", region),
                              hp, deterministic, log)
        rows.append({"region": region, "accuracy": metrics["accuracy"]})
        if log is not None:
            log(f"region {region}: accuracy {metrics['accuracy']:.4f}")
    return rows


def ablation_train_size(root, hp: Hyperparams, sizes=(50, 100, 150, 200), deterministic=True, log=None):
    full = load_dataset(root, "train")
    test = load_dataset(root, "test")
    rows = []
    for n in sizes:
        metrics = _train_eval(full.subset(nested_subset(full, n, hp.subset_seed)), test, hp, deterministic, log)
        rows.append({"train_per_class": n, "accuracy": metrics["accuracy"]})
        if log is not None:
            log(f"{n}/class: accuracy {metrics['accuracy']:.4f}")
    return rows


# --- benchmarking ------------------------------------------------------------

def bench_inference(model: Decoder, trials=100, warmup=5, seed=0) -> dict:
    """Latency of single-image eval-mode forward passes, one BLAS thread."""
    if trials < 30:
        raise InvalidArgument("at least 30 timed trials are required")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal((1, 1, model.input_size, model.input_size)).astype(np.float32)
    times = []
    with threadpool_limits(limits=1):
        for i in range(warmup + trials):
            t0 = time.perf_counter()
            model.forward(x, train=False)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(dt)
    t = np.array(times)
    return {"trials": int(trials), "warmup": int(warmup), "mean_ms": float(t.mean()),
            "p50_ms": float(np.percentile(t, 50)), "p95_ms": float(np.percentile(t, 95)),
            "std_ms": float(t.std()), "min_ms": float(t.min()), "max_ms": float(t.max()),
            "threads": 1}


# --- output files ------------------------------------------------------------

def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_eval_outputs(out_dir, metrics):
    """metrics.json plus confusion.csv or histogram.csv depending on the head."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", metrics)
    if metrics["kind"] == "classification":
        names = metrics["label_names"]
        write_csv(out / "confusion.csv", ["truth"] + names,
                  [[n] + row for n, row in zip(names, metrics["confusion_matrix"])])
    else:
        write_csv(out / "histogram.csv", ["bin_start", "count"], metrics["histogram"])
        rows = [[k, m["mae"], m["rmse"], m["r2"]] for k, m in metrics.get("per_location", {}).items()]
        write_csv(out / "per_location.csv", ["location", "mae", "rmse", "r2"], rows)
