"""Bonn-format EEG ingestion, class problems, segmentation and splits."""

import json
import logging
import math
import os
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, ParseError, SegmentationError, SignalLengthError

log = logging.getLogger(__name__)

SETS = ("A", "B", "C", "D", "E")
N_SAMPLES = 4096
SAMPLING_RATE_HZ = 173.6
SEIZURE_SET = "E"


@dataclass
class EegSignal:
    samples: np.ndarray
    set_label: str
    source_id: str
    sampling_rate_hz: float = SAMPLING_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.set_label not in SETS:
            raise ValueError(f"unknown set label {self.set_label!r}")
        if not self.sampling_rate_hz > 0:
            raise ValueError("sampling rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"{self.source_id}: non-finite samples")

    @property
    def N(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class ClassProblem:
    """Grouping of Bonn sets into classes, e.g. ``ABCD-E`` is ((A, B, C, D), (E,))."""

    name: str
    groups: tuple

    def __post_init__(self):
        seen = [s for g in self.groups for s in g]
        if len(seen) != len(set(seen)):
            raise ConfigError(f"problem {self.name}: a set appears in more than one class")
        if any(s not in SETS for s in seen):
            raise ConfigError(f"problem {self.name}: unknown set in {self.groups}")
        if self.K not in (2, 3, 5):
            raise ConfigError(f"problem {self.name}: {self.K} classes (expected 2, 3 or 5)")

    @property
    def K(self):
        return len(self.groups)

    @property
    def included_sets(self):
        return tuple(s for g in self.groups for s in g)

    @property
    def label_of_set(self):
        return {s: k for k, g in enumerate(self.groups) for s in g}

    @property
    def class_names(self):
        return tuple("".join(g) for g in self.groups)

    @property
    def positive_class(self):
        """Class index holding the seizure set, or None."""
        return self.label_of_set.get(SEIZURE_SET)


def parse_problem(name):
    """``"ABCD-E"`` -> ClassProblem with groups (("A","B","C","D"), ("E",))."""
    if isinstance(name, ClassProblem):
        return name
    if not re.fullmatch(r"[A-E]+(-[A-E]+)+", name or ""):
        raise ConfigError(f"cannot parse class problem {name!r}; expected e.g. A-E or ABCD-E")
    return ClassProblem(name, tuple(tuple(part) for part in name.split("-")))


PROBLEMS = {n: parse_problem(n) for n in ("A-E", "ABCD-E", "A-C-E", "A-B-C-D-E")}


@dataclass
class SegmentedExample:
    segments: np.ndarray  # (M, L)
    label: int

    @property
    def M(self):
        return self.segments.shape[0]

    @property
    def L(self):
        return self.segments.shape[1]


@dataclass
class Dataset:
    """A labeled collection of equal-length single-channel signals."""

    signals: np.ndarray  # (n, N)
    labels: np.ndarray  # (n,) class indices
    set_labels: tuple
    source_ids: tuple
    sampling_rate_hz: float = SAMPLING_RATE_HZ
    class_names: tuple = ()
    positive_class: int = None

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.set_labels = tuple(self.set_labels)
        self.source_ids = tuple(self.source_ids)
        n = self.signals.shape[0]
        if self.signals.ndim != 2 or self.labels.shape != (n,) or len(self.set_labels) != n or len(self.source_ids) != n:
            raise ValueError("dataset fields have inconsistent lengths")

    def __len__(self):
        return self.signals.shape[0]

    @property
    def N(self):
        return self.signals.shape[1]

    @property
    def K(self):
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.K)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.signals[idx], self.labels[idx], [self.set_labels[i] for i in idx],
            [self.source_ids[i] for i in idx], self.sampling_rate_hz, self.class_names, self.positive_class,
        )

    def with_signals(self, signals):
        return Dataset(signals, self.labels.copy(), self.set_labels, self.source_ids, self.sampling_rate_hz,
                       self.class_names, self.positive_class)

    def segmented(self, L):
        """All signals as an (n, M, L) array."""
        check_segment_length(self.N, L)
        return self.signals.reshape(len(self), self.N // L, L)

    def example(self, i, L):
        return SegmentedExample(segment_samples(self.signals[i], L), int(self.labels[i]))


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def read_signal_file(path):
    """Parse one decimal sample per line; blank lines are skipped."""
    values = []
    with open(path, "r", encoding="ascii", errors="replace", newline=None) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                v = float(text)
            except ValueError:
                raise ParseError(path, line_no, text) from None
            if not math.isfinite(v):
                raise ParseError(path, line_no, text)
            values.append(v)
    return np.array(values, dtype=np.float64)


def write_signal_file(path, samples):
    """Inverse of :func:`read_signal_file`; ``repr`` keeps floats round-trip exact."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for v in np.asarray(samples, dtype=np.float64):
            fh.write(f"{_fmt(v)}\n")


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def read_manifest(manifest_path):
    path = Path(manifest_path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"manifest {path} must be a JSON object mapping set letters to directories")
    out = {}
    for key, value in raw.items():
        if key not in SETS:
            raise ConfigError(f"manifest {path}: unknown set {key!r}")
        d = Path(value)
        out[key] = d if d.is_absolute() else (path.parent / d)
    return dict(sorted(out.items()))


def load_signal(path, set_label, n_samples=N_SAMPLES, sampling_rate_hz=SAMPLING_RATE_HZ):
    samples = read_signal_file(path)
    if samples.shape[0] < n_samples:
        raise SignalLengthError(f"{path}: {samples.shape[0]} samples, need {n_samples}")
    return EegSignal(samples[:n_samples], set_label, Path(path).stem, sampling_rate_hz)


def load_dataset(manifest_path, sets=None, n_samples=N_SAMPLES, sampling_rate_hz=SAMPLING_RATE_HZ, jobs=1):
    """Load every signal file listed by a manifest.

    Signals longer than ``n_samples`` are truncated. Results are ordered by
    (set letter, file name) regardless of ``jobs``.
    """
    manifest = read_manifest(manifest_path)
    if sets is not None:
        missing = [s for s in sets if s not in manifest]
        if missing:
            raise ConfigError(f"sets {missing} are not in the manifest")
        manifest = {s: manifest[s] for s in manifest if s in sets}
    work = []
    for set_label, directory in manifest.items():
        if not directory.is_dir():
            raise IngestionError(f"set {set_label}: directory {directory} does not exist")
        files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise IngestionError(f"set {set_label}: directory {directory} contains no signal files")
        work.extend((f, set_label) for f in files)

    def _load(item):
        return load_signal(item[0], item[1], n_samples, sampling_rate_hz)

    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            signals = list(pool.map(_load, work))
    else:
        signals = [_load(w) for w in work]
    counts = {s: sum(1 for x in signals if x.set_label == s) for s in manifest}
    log.info("loaded %d signals: %s", len(signals), counts)
    return signals


def summarize(signals):
    """Per-set counts and amplitude ranges, in set order."""
    out = {}
    for s in SETS:
        members = [x for x in signals if x.set_label == s]
        if not members:
            continue
        out[s] = {
            "count": len(members),
            "min_uV": float(min(x.samples.min() for x in members)),
            "max_uV": float(max(x.samples.max() for x in members)),
            "N": sorted({x.N for x in members}),
            "sampling_rate_hz": sorted({x.sampling_rate_hz for x in members}),
        }
    return out


def build_problem(signals, problem):
    """Keep signals from the problem's sets and attach class indices."""
    problem = parse_problem(problem)
    present = {x.set_label for x in signals}
    absent = [s for s in problem.included_sets if s not in present]
    if absent:
        raise ConfigError(f"problem {problem.name} needs sets {absent}, which were not loaded")
    mapping = problem.label_of_set
    chosen = [x for x in signals if x.set_label in mapping]
    lengths = {x.N for x in chosen}
    if len(lengths) != 1:
        raise SignalLengthError(f"signals have differing lengths {sorted(lengths)}")
    rates = {x.sampling_rate_hz for x in chosen}
    ds = Dataset(
        np.stack([x.samples for x in chosen]),
        [mapping[x.set_label] for x in chosen],
        [x.set_label for x in chosen],
        [x.source_id for x in chosen],
        rates.pop() if len(rates) == 1 else chosen[0].sampling_rate_hz,
        problem.class_names,
        problem.positive_class,
    )
    log.info("problem %s: class counts %s", problem.name, ds.class_counts().tolist())
    return ds


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def check_segment_length(N, L):
    if not isinstance(L, (int, np.integer)) or isinstance(L, bool):
        raise ConfigError(f"segment length must be an integer, got {L!r}")
    if L <= 0:
        raise ConfigError(f"segment length must be positive, got {L}")
    if N % L:
        raise SegmentationError(f"segment length {L} does not divide signal length {N}")


def segment_samples(samples, L):
    samples = np.asarray(samples, dtype=np.float64)
    check_segment_length(samples.shape[0], L)
    return samples.reshape(samples.shape[0] // L, L)


def segment(signal, L, label=None):
    """Split a signal into M = N / L non-overlapping rows of L samples."""
    samples = getattr(signal, "samples", signal)
    if label is None:
        label = -1
    return SegmentedExample(segment_samples(samples, L).copy(), int(label))


def power_of_two_lengths(N=N_SAMPLES):
    out, L = [], 1
    while L <= N:
        if N % L == 0:
            out.append(L)
        L *= 2
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    kind: str
    folds: list  # list of (train_idx, test_idx) arrays
    seed: int
    train_fraction: float = None
    k: int = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.folds)

    def describe(self):
        if self.kind == "holdout":
            return f"Hold-out ({self.train_fraction * 100:.2f}-{(1 - self.train_fraction) * 100:.2f}%)"
        if self.kind == "kfold":
            return f"{self.k}-folds cross-validation"
        return "Leave-one-out CV"


def parse_split(text):
    """``holdout:0.8`` | ``kfold:10`` | ``loo`` -> (kind, params dict)."""
    kind, _, arg = (text or "").partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "holdout":
            return "holdout", {"train_fraction": float(arg) if arg else 0.8}
        if kind == "kfold":
            return "kfold", {"k": int(arg) if arg else 10}
    except ValueError:
        raise ConfigError(f"bad split argument in {text!r}") from None
    if kind in ("loo", "leave_one_out") and not arg:
        return "leave_one_out", {}
    raise ConfigError(f"unknown split {text!r}; expected holdout:<frac>, kfold:<k> or loo")


def _place_remainders(counts, k):
    """Pick the folds that receive each class's ``count % k`` leftover examples.

    Every fold first gets ``count // k`` examples of each class. The leftovers
    are placed so fold sizes differ by at most one and every class count stays
    within one of its share of that fold (``count * fold_size / n``). Folds
    are interchangeable up to this point, so the first ``R % k`` folds are the
    larger ones; each (class, fold) cell is then forced, forbidden or free and
    the free cells are filled by augmenting paths.
    """
    n, C = sum(counts), len(counts)
    rem = [m % k for m in counts]
    R = sum(rem)
    want = [R // k + (f < R % k) for f in range(k)]
    size = [sum(m // k for m in counts) + w for w in want]

    def within(m, cnt, s):
        return abs(cnt * n - m * s) <= n

    x = [[0] * k for _ in range(C)]
    free = [[False] * k for _ in range(C)]
    need = list(rem)
    room = list(want)
    for c, m in enumerate(counts):
        for f in range(k):
            low_ok = within(m, m // k, size[f])
            high_ok = rem[c] > 0 and within(m, m // k + 1, size[f])
            if not low_ok and high_ok:
                x[c][f] = 1
                need[c] -= 1
                room[f] -= 1
            free[c][f] = low_ok and high_ok

    def augment(c, seen):
        for f in range(k):
            if free[c][f] and not x[c][f] and f not in seen:
                seen.add(f)
                if room[f] > 0:
                    x[c][f] = 1
                    room[f] -= 1
                    return True
                for c2 in range(C):
                    if c2 != c and x[c2][f] and free[c2][f]:
                        x[c2][f] = 0
                        if augment(c2, seen):
                            x[c][f] = 1
                            return True
                        x[c2][f] = 1
        return False

    ok = min(need, default=0) >= 0 and min(room) >= 0
    for c in range(C):
        while ok and need[c] > 0:
            ok = augment(c, set())
            need[c] -= 1
    if ok:
        return x
    # not reached in randomized testing; plain round-robin keeps counts within one of count / k
    x = [[0] * k for _ in range(C)]
    offset = 0
    for c in range(C):
        for j in range(rem[c]):
            x[c][(offset + j) % k] = 1
        offset = (offset + rem[c]) % k
    return x


def make_splits(n, labels, kind, seed=0, train_fraction=0.8, k=10):
    """Stratified, seeded train/test folds over ``n`` examples."""
    labels = np.asarray(labels, dtype=np.int64)
    if n <= 0:
        raise ConfigError("cannot split an empty dataset")
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got {labels.shape[0]}")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    everything = np.arange(n)

    if kind == "holdout":
        if not 0.0 < train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
        test = np.concatenate([idx[: len(idx) - int(round(len(idx) * train_fraction))] for idx in per_class])
        test = np.sort(test)
        folds = [(np.setdiff1d(everything, test), test)]
        return SplitPlan("holdout", folds, seed, train_fraction=train_fraction)

    if kind == "kfold":
        if not 2 <= k <= n:
            raise ConfigError(f"k must satisfy 2 <= k <= {n}, got {k}")
        counts = [len(idx) for idx in per_class]
        extra = _place_remainders(counts, k)
        buckets = [[] for _ in range(k)]
        for c, idx in enumerate(per_class):
            q = counts[c] // k
            rest = iter(idx[q * k :])
            for f in range(k):
                buckets[f].extend(idx[f * q : (f + 1) * q])
                if extra[c][f]:
                    buckets[f].append(next(rest))
        folds = []
        for b in buckets:
            test = np.sort(np.array(b, dtype=np.int64))
            folds.append((np.setdiff1d(everything, test), test))
        return SplitPlan("kfold", folds, seed, k=k)

    if kind in ("leave_one_out", "loo"):
        folds = [(np.delete(everything, i), np.array([i])) for i in range(n)]
        return SplitPlan("leave_one_out", folds, seed)

    raise ConfigError(f"unknown split kind {kind!r}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

NORMALIZATION_MODES = ("raw", "per_signal_zscore")


def normalize_signals(signals, mode):
    signals = np.asarray(signals, dtype=np.float64)
    if mode == "raw":
        return signals
    if mode not in ("per_signal_zscore", "zscore"):
        raise ConfigError(f"unknown normalization {mode!r}")
    mean = signals.mean(axis=-1, keepdims=True)
    std = signals.std(axis=-1, keepdims=True)
    centered = signals - mean
    flat = (std == 0).reshape(-1)
    if np.any(flat):
        warnings.warn(f"{int(flat.sum())} zero-variance signal(s): centered but not scaled", RuntimeWarning,
                      stacklevel=3)
    return centered / np.where(std == 0, 1.0, std)


def normalize(dataset, mode):
    """Identity for ``raw``; per-signal population z-score otherwise."""
    if mode == "raw":
        return dataset
    if isinstance(dataset, Dataset):
        return dataset.with_signals(normalize_signals(dataset.signals, mode))
    return normalize_signals(dataset, mode)


def default_jobs():
    return max(1, (os.cpu_count() or 1))
