"""Training loop, metrics and experiment protocols."""

import csv
import dataclasses
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, nncore, noise
from .errors import ConfigError, DivergenceError
from .optim import AdamConfig, Optimizer

log = logging.getLogger(__name__)

DEFAULT_SNR_AXIS = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)

# Published reference accuracies (%) at -20 dB, reported next to sweep output.
REFERENCE_POINTS = {
    ("A-E", "muscle", -20.0): 99.75,
    ("A-E", "white", -20.0): 99.25,
    ("ABCD-E", "white", -20.0): 96.70,
    ("A-B-C-D-E", "muscle", -20.0): 70.90,
    ("A-B-C-D-E", "white", -20.0): 53.50,
}

NOISE_PROTOCOLS = ("matched", "clean_train", "augment")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    segment_length: int = 2
    lstm_units: int = 100
    dense_units: int = 50
    classes: int = None
    batch_size: int = 64
    epochs: int = 40
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    normalization: str = "per_signal_zscore"
    noise: list = field(default_factory=list)
    noise_protocol: str = "matched"
    clip_norm: float = None
    forget_bias: float = 1.0

    def __post_init__(self):
        self.noise = [n if isinstance(n, noise.NoiseSpec) else noise.NoiseSpec.parse(n, self.seed) for n in self.noise]
        self.validate()

    def validate(self):
        for name in ("segment_length", "lstm_units", "dense_units", "batch_size", "epochs"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        L = self.segment_length
        if L & (L - 1):
            raise ConfigError(f"segment_length must be a power of two, got {L}")
        if dataio.N_SAMPLES % L:
            raise ConfigError(f"segment_length {L} does not divide {dataio.N_SAMPLES}")
        if self.classes is not None and self.classes not in (2, 3, 5):
            raise ConfigError(f"classes must be 2, 3 or 5, got {self.classes}")
        if self.normalization == "zscore":
            self.normalization = "per_signal_zscore"
        if self.normalization not in dataio.NORMALIZATION_MODES:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.noise_protocol not in NOISE_PROTOCOLS:
            raise ConfigError(f"noise_protocol must be one of {NOISE_PROTOCOLS}")
        if self.noise_protocol != "augment" and len(self.noise) > 1:
            raise ConfigError(f"noise_protocol {self.noise_protocol!r} takes at most one noise spec")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        self.adam_config()
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def adam_config(self):
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["noise"] = [{"kind": n.kind.value, "snr_db": n.snr_db, "seed": n.seed} for n in self.noise]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config key {unknown[0]!r}")
        d = dict(d)
        if "noise" in d:
            d["noise"] = [n if isinstance(n, (str, noise.NoiseSpec)) else noise.NoiseSpec(**n) for n in d["noise"]]
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: nncore.ModelParams
    history: list  # one dict per epoch
    initial_loss: float
    iterations: int
    seconds: float


def _seeds(seed):
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss)


def prepare(dataset, config):
    """Normalize and segment a dataset; returns the (n, M, L) input array."""
    return dataio.normalize(dataset, config.normalization).segmented(config.segment_length)


def train(config, dataset, train_indices, backend=None, on_epoch=None):
    """Fit a fresh model on ``dataset[train_indices]``.

    Each epoch shuffles the training indices with a seeded generator and
    takes Adam (or SGD) steps on batch-averaged gradients; the last partial
    batch is kept.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise ConfigError("empty training set")
    K = config.classes or dataset.K
    X = prepare(dataset, config)[train_indices]
    y = dataset.labels[train_indices]
    init_rng, shuffle_rng = _seeds(config.seed)
    params = nncore.init_params(config.lstm_units, config.segment_length, config.dense_units, K, init_rng,
                                forget_bias=config.forget_bias)
    opt = Optimizer(config.optimizer, config.learning_rate, config.adam_config() if config.optimizer == "adam" else None)
    start = time.perf_counter()
    initial_loss = nncore.cross_entropy(nncore.forward_batch(params, X, backend), y)
    history = []
    iterations = 0
    n = len(y)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, s in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[s : s + config.batch_size]
            loss, grads, P = nncore.loss_and_grad(params, X[idx], y[idx], backend)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            if config.clip_norm is not None:
                grads = nncore.clip_by_global_norm(grads, config.clip_norm)
            params = opt.step(params, grads)
            if not params.all_finite():
                raise DivergenceError(epoch, b, float("nan"))
            loss_sum += loss * len(idx)
            correct += int(np.sum(nncore.argmax_lowest(P) == y[idx]))
            iterations += 1
        record = {"epoch": epoch, "loss": loss_sum / n, "accuracy": correct / n, "iterations": iterations}
        history.append(record)
        log.debug("epoch %d: loss %.5f acc %.4f", epoch, record["loss"], record["accuracy"])
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params, history, initial_loss, iterations, time.perf_counter() - start)


def iterations_per_epoch(n_train, batch_size):
    return -(-n_train // batch_size)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, K):
    """K x K counts, rows = true class, columns = predicted class."""
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


@dataclass
class MetricsReport:
    confusion: np.ndarray
    sensitivity: float
    specificity: float
    accuracy: float
    per_class_sensitivity: list
    per_class_specificity: list
    macro_sensitivity: float
    macro_specificity: float
    positive_class: int = None
    fold: object = None

    @classmethod
    def from_confusion(cls, confusion, positive_class=None, fold=None):
        """Binary problems report the positive (seizure) class; multi-class, macro one-vs-rest.

        A class with no test examples gets ``None`` sensitivity and is left
        out of the macro average.
        """
        cm = np.asarray(confusion, dtype=np.int64)
        K = cm.shape[0]
        total = int(cm.sum())
        if total == 0:
            raise ConfigError("cannot compute metrics on an empty test set")
        sens, spec = [], []
        for k in range(K):
            tp = cm[k, k]
            fn = cm[k].sum() - tp
            fp = cm[:, k].sum() - tp
            tn = total - tp - fn - fp
            sens.append(float(tp / (tp + fn)) if tp + fn else None)
            spec.append(float(tn / (tn + fp)) if tn + fp else None)
        missing = [k for k in range(K) if sens[k] is None]
        if missing:
            warnings.warn(f"classes {missing} absent from the test set; their sensitivity is undefined",
                          RuntimeWarning, stacklevel=2)
        macro_sens = _mean_defined(sens)
        macro_spec = _mean_defined(spec)
        if K == 2:
            pos = 1 if positive_class is None else positive_class
            headline_sens, headline_spec = sens[pos], spec[pos]
        else:
            pos = positive_class
            headline_sens, headline_spec = macro_sens, macro_spec
        return cls(cm, headline_sens, headline_spec, float(np.trace(cm) / total), sens, spec,
                   macro_sens, macro_spec, pos, fold)

    @property
    def total(self):
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            "fold": self.fold,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "macro_sensitivity": self.macro_sensitivity,
            "macro_specificity": self.macro_specificity,
            "per_class_sensitivity": self.per_class_sensitivity,
            "per_class_specificity": self.per_class_specificity,
            "positive_class": self.positive_class,
            "confusion": self.confusion.tolist(),
        }


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(params, dataset, test_indices, config=None, backend=None, fold=None):
    """Confusion matrix and Sens/Spec/Acc of ``params`` over the test indices.

    ``config`` supplies normalization and segment length; without it the
    raw signals are segmented with the model's input width.
    """
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if test_indices.size == 0:
        raise ConfigError("empty test set")
    if config is None:
        X = dataset.segmented(params.lstm.L)[test_indices]
    else:
        X = prepare(dataset, config)[test_indices]
    pred = nncore.predict_batch(params, X, backend)
    cm = confusion_matrix(dataset.labels[test_indices], pred, params.softmax.K)
    return MetricsReport.from_confusion(cm, dataset.positive_class, fold)


def aggregate(reports):
    """Unweighted mean of fold metrics (undefined values skipped)."""
    out = {}
    for key in ("sensitivity", "specificity", "accuracy", "macro_sensitivity", "macro_specificity"):
        out[key] = _mean_defined([getattr(r, key) for r in reports])
    out["folds"] = len(reports)
    out["tested"] = int(sum(r.total for r in reports))
    out["correct"] = int(sum(np.trace(r.confusion) for r in reports))
    return out


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    report: MetricsReport
    history: list
    initial_loss: float
    iterations: int
    seconds: float
    params: nncore.ModelParams = None


@dataclass
class ProtocolResult:
    problem: str
    config: TrainConfig
    plan: dataio.SplitPlan
    folds: list  # FoldResult
    aggregate: dict

    @property
    def reports(self):
        return [f.report for f in self.folds]

    def table_row(self, method="Proposed Method", classifier="LSTM + Softmax"):
        a = self.aggregate
        return {
            "Method": method,
            "Classifier": classifier,
            "Training/Testing": self.plan.describe(),
            "Sens": _pct(a["sensitivity"]),
            "Spec": _pct(a["specificity"]),
            "Acc": _pct(a["accuracy"]),
        }

    def to_dict(self):
        return {
            "problem": self.problem,
            "config": self.config.to_dict(),
            "split": {"kind": self.plan.kind, "seed": self.plan.seed, "train_fraction": self.plan.train_fraction,
                      "k": self.plan.k, "folds": len(self.plan)},
            "folds": [
                {**f.report.to_dict(), "initial_loss": f.initial_loss, "iterations": f.iterations,
                 "history": f.history}
                for f in self.folds
            ],
            "aggregate": self.aggregate,
        }


def _pct(x):
    return None if x is None else round(100.0 * x, 2)


def apply_noise(dataset, config, train_indices):
    """Return ``(dataset, train_indices, test_dataset)`` per the noise protocol."""
    if not config.noise:
        return dataset, train_indices, dataset
    if config.noise_protocol == "matched":
        noisy = noise.corrupt_dataset(dataset, config.noise[0])
        return noisy, train_indices, noisy
    if config.noise_protocol == "clean_train":
        return dataset, train_indices, noise.corrupt_dataset(dataset, config.noise[0])
    # augment: clean training signals plus one corrupted copy per spec
    copies = [dataset] + [noise.corrupt_dataset(dataset, spec) for spec in config.noise]
    stacked = dataio.Dataset(
        np.concatenate([c.signals for c in copies]),
        np.concatenate([c.labels for c in copies]),
        sum((c.set_labels for c in copies), ()),
        sum((c.source_ids for c in copies), ()),
        dataset.sampling_rate_hz, dataset.class_names, dataset.positive_class,
    )
    n = len(dataset)
    idx = np.concatenate([train_indices + j * n for j in range(len(copies))])
    return stacked, idx, dataset


def run_fold(config, dataset, train_idx, test_idx, fold=None, backend=None, keep_params=False):
    train_ds, train_idx, test_ds = apply_noise(dataset, config, np.asarray(train_idx))
    result = train(config, train_ds, train_idx, backend)
    report = evaluate(result.params, test_ds, test_idx, config, backend, fold)
    return FoldResult(report, result.history, result.initial_loss, result.iterations, result.seconds,
                      result.params if keep_params else None)


def _run_fold_packed(args):
    return run_fold(*args)


def run_protocol(problem, config, plan, dataset, jobs=1, backend=None, checkpoint_dir=None):
    """Train and evaluate one model per fold of ``plan``."""
    name = getattr(problem, "name", problem)
    keep = checkpoint_dir is not None
    work = [(config, dataset, tr, te, i, backend, keep) for i, (tr, te) in enumerate(plan.folds)]
    if jobs and jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_packed, work))
    else:
        folds = [run_fold(*w) for w in work]
    if keep:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(folds):
            nncore.save_checkpoint(Path(checkpoint_dir) / f"fold{i:03d}.npz", f.params, config.to_dict())
    return ProtocolResult(name, config, plan, folds, aggregate([f.report for f in folds]))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    axis_value: float
    kind: str
    result: ProtocolResult
    reference_accuracy: float = None


@dataclass
class SweepResult:
    axis: str  # "snr_db" or "segment_length"
    axis_values: list
    problem: str
    points: list  # SweepPoint
    config: TrainConfig
    meta: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for p in self.points:
            a = p.result.aggregate
            out.append({
                self.axis: p.axis_value, "kind": p.kind,
                "sens": a["sensitivity"], "spec": a["specificity"], "acc": a["accuracy"],
                "reference_acc": p.reference_accuracy,
            })
        return out

    def curve(self, kind):
        return [(p.axis_value, p.result.aggregate["accuracy"]) for p in self.points if p.kind == kind]

    def to_dict(self):
        return {
            "axis": self.axis,
            "axis_values": self.axis_values,
            "problem": self.problem,
            "config": self.config.to_dict(),
            "meta": self.meta,
            "points": [{self.axis: p.axis_value, "kind": p.kind, "reference_accuracy": p.reference_accuracy,
                        **p.result.to_dict()} for p in self.points],
        }


def snr_sweep(problem, config, plan, dataset, kinds=("muscle", "eyeblink", "white"), snr_values=DEFAULT_SNR_AXIS,
              retrain=True, train_on="noisy", jobs=1, backend=None):
    """Accuracy versus SNR for each artifact kind.

    With ``retrain`` (default) a model is fitted per (kind, SNR) point, on
    matched noisy data or, with ``train_on="clean"``, on clean data. Without
    ``retrain`` one model per fold is fitted on the clean training signals
    augmented with a copy for every sweep point, and then tested at each point.
    """
    if not snr_values:
        raise ConfigError("snr_values must not be empty")
    if train_on not in ("noisy", "clean"):
        raise ConfigError("train_on must be 'noisy' or 'clean'")
    name = getattr(problem, "name", problem)
    kinds = [noise.NoiseKind.parse(k) for k in kinds]
    specs = {}
    for j, (kind, snr) in enumerate((k, float(s)) for k in kinds for s in snr_values):
        specs[(kind, snr)] = noise.NoiseSpec(kind, snr, noise.derive_seed(config.seed, j))
    points = []
    if retrain:
        protocol = "matched" if train_on == "noisy" else "clean_train"
        for (kind, snr), spec in specs.items():
            cfg = config.replace(noise=[spec], noise_protocol=protocol)
            res = run_protocol(name, cfg, plan, dataset, jobs, backend)
            points.append(SweepPoint(snr, kind.value, res, REFERENCE_POINTS.get((name, kind.value, snr))))
            log.info("%s %s %+g dB: acc %.4f", name, kind.value, snr, res.aggregate["accuracy"])
    else:
        cfg = config.replace(noise=list(specs.values()), noise_protocol="augment")
        models = []
        for i, (tr, _) in enumerate(plan.folds):
            train_ds, idx, _ = apply_noise(dataset, cfg, np.asarray(tr))
            models.append(train(cfg, train_ds, idx, backend))
        for (kind, snr), spec in specs.items():
            noisy = noise.corrupt_dataset(dataset, spec)
            folds = []
            for i, ((_, te), tr_res) in enumerate(zip(plan.folds, models)):
                rep = evaluate(tr_res.params, noisy, te, config, backend, i)
                folds.append(FoldResult(rep, tr_res.history, tr_res.initial_loss, tr_res.iterations, tr_res.seconds))
            res = ProtocolResult(name, cfg, plan, folds, aggregate([f.report for f in folds]))
            points.append(SweepPoint(snr, kind.value, res, REFERENCE_POINTS.get((name, kind.value, snr))))
    return SweepResult("snr_db", [float(s) for s in snr_values], name, points, config,
                       {"retrain": retrain, "train_on": train_on, "kinds": [k.value for k in kinds]})


def segment_length_sweep(problem, config, plan, dataset, L_values=None, jobs=1, backend=None):
    """One protocol run per segment length; defaults to every power of two dividing N."""
    name = getattr(problem, "name", problem)
    if L_values is None:
        L_values = dataio.power_of_two_lengths(dataset.N)
    for L in L_values:
        dataio.check_segment_length(dataset.N, L)
    points = []
    for L in L_values:
        res = run_protocol(name, config.replace(segment_length=int(L)), plan, dataset, jobs, backend)
        points.append(SweepPoint(int(L), "clean", res))
        log.info("%s L=%d: acc %.4f", name, L, res.aggregate["accuracy"])
    return SweepResult("segment_length", [int(L) for L in L_values], name, points, config)


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("Method", "Classifier", "Training/Testing", "Sens", "Spec", "Acc")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj))


def write_table_csv(path, rows, columns=TABLE_COLUMNS):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in columns})


def write_sweep_csv(path, sweep):
    cols = (sweep.axis, "kind", "sens", "spec", "acc", "reference_acc")
    write_table_csv(path, sweep.rows(), cols)
