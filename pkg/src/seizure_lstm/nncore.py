"""Peephole LSTM -> time-distributed dense -> average pool -> softmax.

Forward and backward passes for the seizure classifier, plus a central
finite-difference gradient checker and checkpoint I/O.

The LSTM cell (gates stacked as z, i, f, o)::

    z = tanh(Wz x + Rz y' + bz)
    i = sigmoid(Wi x + Ri y' + Pi * c' + bi)
    f = sigmoid(Wf x + Rf y' + Pf * c' + bf)
    c = z * i + c' * f
    o = sigmoid(Wo x + Ro y' + Po * c + bo)
    u = tanh(c) * o

where primes denote the previous timestep and y' = u'. The initial state is
y = c = 0. The dense layer is ``v = tanh(Wd u + bd)`` at every timestep, the
pooled feature is the mean of v over time, and the posterior is
``softmax(theta @ E + c)``.
"""

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConsistencyError, ShapeError

PROB_FLOOR = 1e-30
CHECKPOINT_VERSION = 1
# Per-chunk budget for cached LSTM activations during batched training.
_CACHE_BYTES = 64 * 2**20

_GATES = "zifo"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    """Stacked LSTM weights; per-gate views are exposed as ``Wz``, ``Ri``, ``Po``..."""

    W: np.ndarray  # (4, B, L) input weights, gate order z, i, f, o
    R: np.ndarray  # (4, B, B) recurrent weights
    P: np.ndarray  # (3, B) peepholes for i, f, o
    b: np.ndarray  # (4, B) biases

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.R = np.ascontiguousarray(self.R, dtype=np.float64)
        self.P = np.ascontiguousarray(self.P, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.W.ndim != 3 or self.W.shape[0] != 4:
            raise ShapeError(f"W must be (4, B, L), got {self.W.shape}")
        B, L = self.W.shape[1:]
        for name, arr, shape in (("R", self.R, (4, B, B)), ("P", self.P, (3, B)), ("b", self.b, (4, B))):
            if arr.shape != shape:
                raise ShapeError(f"{name} must be {shape}, got {arr.shape}")

    @property
    def B(self):
        return self.W.shape[1]

    @property
    def L(self):
        return self.W.shape[2]

    def __getattr__(self, name):
        # Wz, Wi, ..., Rz, ..., bz, ..., Pi, Pf, Po
        if len(name) == 2 and name[1] in _GATES:
            kind, gate = name
            if kind in "WRb":
                return getattr(self, kind)[_GATES.index(gate)]
            if kind == "P" and gate != "z":
                return self.P[_GATES.index(gate) - 1]
        raise AttributeError(name)

    @classmethod
    def from_gates(cls, *, Wz, Wi, Wf, Wo, Rz, Ri, Rf, Ro, Pi, Pf, Po, bz, bi, bf, bo):
        return cls(
            W=np.stack([Wz, Wi, Wf, Wo]),
            R=np.stack([Rz, Ri, Rf, Ro]),
            P=np.stack([Pi, Pf, Po]),
            b=np.stack([bz, bi, bf, bo]),
        )


@dataclass
class DenseParams:
    W: np.ndarray  # (D, B)
    b: np.ndarray  # (D,)

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense W {self.W.shape} and b {self.b.shape} are inconsistent")

    @property
    def D(self):
        return self.W.shape[0]


@dataclass
class SoftmaxParams:
    theta: np.ndarray  # (K, D), row k is theta_k
    c: np.ndarray  # (K,)

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self.c = np.ascontiguousarray(self.c, dtype=np.float64)
        if self.theta.ndim != 2 or self.c.shape != (self.theta.shape[0],):
            raise ShapeError(f"softmax theta {self.theta.shape} and c {self.c.shape} are inconsistent")

    @property
    def K(self):
        return self.theta.shape[0]


@dataclass
class ModelParams:
    lstm: LstmParams
    dense: DenseParams
    softmax: SoftmaxParams

    NAMES = ("lstm.W", "lstm.R", "lstm.P", "lstm.b", "dense.W", "dense.b", "softmax.theta", "softmax.c")

    def __post_init__(self):
        if self.dense.W.shape[1] != self.lstm.B:
            raise ShapeError(f"dense expects {self.dense.W.shape[1]} inputs, LSTM has {self.lstm.B} units")
        if self.softmax.theta.shape[1] != self.dense.D:
            raise ShapeError(f"softmax expects {self.softmax.theta.shape[1]} features, dense has {self.dense.D}")

    @property
    def dims(self):
        return {"B": self.lstm.B, "L": self.lstm.L, "D": self.dense.D, "K": self.softmax.K}

    def arrays(self):
        """Name -> array mapping (views, not copies) in a fixed order."""
        return {
            "lstm.W": self.lstm.W,
            "lstm.R": self.lstm.R,
            "lstm.P": self.lstm.P,
            "lstm.b": self.lstm.b,
            "dense.W": self.dense.W,
            "dense.b": self.dense.b,
            "softmax.theta": self.softmax.theta,
            "softmax.c": self.softmax.c,
        }

    @classmethod
    def from_arrays(cls, arrays):
        missing = set(cls.NAMES) - set(arrays)
        if missing:
            raise ShapeError(f"missing parameter arrays: {sorted(missing)}")
        a = arrays
        return cls(
            LstmParams(a["lstm.W"], a["lstm.R"], a["lstm.P"], a["lstm.b"]),
            DenseParams(a["dense.W"], a["dense.b"]),
            SoftmaxParams(a["softmax.theta"], a["softmax.c"]),
        )

    def map(self, fn, *others):
        """Apply ``fn`` array-wise across this and other same-shaped params."""
        other_arrays = [o.arrays() for o in others]
        out = {}
        for name, arr in self.arrays().items():
            rest = [oa[name] for oa in other_arrays]
            for r in rest:
                if r.shape != arr.shape:
                    raise ShapeError(f"{name}: shape {r.shape} does not match {arr.shape}")
            out[name] = fn(arr, *rest)
        return ModelParams.from_arrays(out)

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def num_parameters(self):
        return sum(a.size for a in self.arrays().values())


def zero_params(B, L, D, K):
    return ModelParams(
        LstmParams(np.zeros((4, B, L)), np.zeros((4, B, B)), np.zeros((3, B)), np.zeros((4, B))),
        DenseParams(np.zeros((D, B)), np.zeros(D)),
        SoftmaxParams(np.zeros((K, D)), np.zeros(K)),
    )


def init_params(B, L, D, K, rng, forget_bias=1.0):
    """Glorot-uniform weights, zero biases (forget gate ``forget_bias``), zero peepholes."""
    rng = np.random.default_rng(rng)

    def glorot(shape, fan_in, fan_out):
        r = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=shape)

    W = np.stack([glorot((B, L), L, B) for _ in range(4)])
    R = np.stack([glorot((B, B), B, B) for _ in range(4)])
    b = np.zeros((4, B))
    b[2] = forget_bias
    return ModelParams(
        LstmParams(W, R, np.zeros((3, B)), b),
        DenseParams(glorot((D, B), B, D), np.zeros(D)),
        SoftmaxParams(glorot((K, D), D, K), np.zeros(K)),
    )


def random_params(B, L, D, K, rng, scale=0.5):
    """Every coordinate (peepholes and biases included) drawn from N(0, scale^2)."""
    rng = np.random.default_rng(rng)
    params = zero_params(B, L, D, K)
    return params.map(lambda a: rng.normal(0.0, scale, size=a.shape))


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    return kernels._kernels_py.sigmoid(x)


def tanh_act(x):
    if np.ndim(x) == 0:
        return math.tanh(float(x))
    return np.tanh(x)


# ---------------------------------------------------------------------------
# forward stages
# ---------------------------------------------------------------------------


@dataclass
class LstmStepCache:
    x: np.ndarray
    z_bar: np.ndarray
    z: np.ndarray
    i_bar: np.ndarray
    i: np.ndarray
    f_bar: np.ndarray
    f: np.ndarray
    c: np.ndarray
    o_bar: np.ndarray
    o: np.ndarray
    u: np.ndarray


@dataclass
class LstmSequenceCache:
    """All per-timestep LSTM quantities for one sequence, stored as (M, ...) arrays."""

    x: np.ndarray  # (M, L)
    pre: np.ndarray  # (M, 4, B)
    act: np.ndarray  # (M, 4, B)
    c: np.ndarray  # (M, B)
    u: np.ndarray  # (M, B)

    def __len__(self):
        return self.x.shape[0]

    def step(self, t):
        p, a = self.pre[t], self.act[t]
        return LstmStepCache(
            x=self.x[t], z_bar=p[0], z=a[0], i_bar=p[1], i=a[1], f_bar=p[2], f=a[2],
            c=self.c[t], o_bar=p[3], o=a[3], u=self.u[t],
        )


def _check_vec(name, v, n):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {v.shape}")
    return v


def lstm_step(params, x_t, y_prev, c_prev):
    """One timestep of the peephole LSTM; returns ``(u_t, c_t, cache)``."""
    B, L = params.B, params.L
    x_t = _check_vec("x_t", x_t, L)
    y_prev = _check_vec("y_prev", y_prev, B)
    c_prev = _check_vec("c_prev", c_prev, B)
    W, R, P, b = params.W, params.R, params.P, params.b
    z_bar = W[0] @ x_t + R[0] @ y_prev + b[0]
    z = np.tanh(z_bar)
    i_bar = W[1] @ x_t + R[1] @ y_prev + P[0] * c_prev + b[1]
    i = sigmoid(i_bar)
    f_bar = W[2] @ x_t + R[2] @ y_prev + P[1] * c_prev + b[2]
    f = sigmoid(f_bar)
    c = z * i + c_prev * f
    o_bar = W[3] @ x_t + R[3] @ y_prev + P[2] * c + b[3]
    o = sigmoid(o_bar)
    u = np.tanh(c) * o
    cache = LstmStepCache(x_t, z_bar, z, i_bar, i, f_bar, f, c, o_bar, o, u)
    return u, c, cache


def _as_batch(segments, L):
    X = np.ascontiguousarray(segments, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != L:
        raise ShapeError(f"segments must be (M, {L}) or (n, M, {L}), got {np.shape(segments)}")
    if X.shape[1] == 0:
        raise ShapeError("sequence has no timesteps")
    return X


def _lstm_forward_batch(params, X, backend=None):
    kern = kernels.get_backend(backend) if backend else kernels.active
    n, M, _ = X.shape
    B = params.B
    pre = np.empty((n, M, 4, B))
    act = np.empty((n, M, 4, B))
    c = np.empty((n, M, B))
    u = np.empty((n, M, B))
    kern.lstm_forward(params.W, params.R, params.P, params.b, X, pre, act, c, u)
    return pre, act, c, u


def lstm_forward(params, segments, backend=None):
    """Run the LSTM over an (M, L) sequence from zero state.

    Returns the (M, B) output matrix U and an :class:`LstmSequenceCache`.
    """
    X = _as_batch(segments, params.L)
    if X.shape[0] != 1:
        raise ShapeError("lstm_forward takes a single (M, L) sequence")
    pre, act, c, u = _lstm_forward_batch(params, X, backend)
    cache = LstmSequenceCache(X[0], pre[0], act[0], c[0], u[0])
    return cache.u, cache


def dense_forward(params, U):
    """Time-distributed ``tanh(W u_t + b)``; U is (..., M, B)."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[-1] != params.W.shape[1]:
        raise ShapeError(f"dense expects {params.W.shape[1]} inputs per timestep, got {U.shape[-1]}")
    return np.tanh(U @ params.W.T + params.b)


def average_pool(V):
    """Mean over the timestep axis (second to last)."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim < 2 or V.shape[-2] == 0:
        raise ValueError("average_pool needs at least one timestep")
    return V.mean(axis=-2)


def logits(params, E):
    E = np.asarray(E, dtype=np.float64)
    if E.shape[-1] != params.theta.shape[1]:
        raise ShapeError(f"softmax expects {params.theta.shape[1]} features, got {E.shape[-1]}")
    return E @ params.theta.T + params.c


def softmax(a):
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_hypothesis(params, E):
    return softmax(logits(params, E))


def cross_entropy(P_batch, labels):
    """Mean negative log-probability of the true class."""
    P = np.atleast_2d(np.asarray(P_batch, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    K = P.shape[1]
    if labels.shape[0] != P.shape[0]:
        raise ShapeError(f"{P.shape[0]} posteriors but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= K) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers in [0, {K})")
    picked = P[np.arange(P.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    params: ModelParams
    lstm: LstmSequenceCache
    dense_pre: np.ndarray  # (M, D)
    V: np.ndarray  # (M, D)
    E: np.ndarray  # (D,)
    logits: np.ndarray  # (K,)
    P: np.ndarray  # (K,)

    @property
    def U(self):
        return self.lstm.u


def _segments_of(example):
    return getattr(example, "segments", example)


def model_forward(params, example, backend=None):
    X = _as_batch(_segments_of(example), params.lstm.L)
    if X.shape[0] != 1:
        raise ShapeError("model_forward takes a single example; use forward_batch")
    U, cache = lstm_forward(params.lstm, X[0], backend)
    dense_pre = U @ params.dense.W.T + params.dense.b
    V = np.tanh(dense_pre)
    E = average_pool(V)
    a = logits(params.softmax, E)
    return ForwardTrace(params, cache, dense_pre, V, E, a, softmax(a))


def _check_trace(params, trace):
    if trace.params is params:
        return
    theirs = trace.params.arrays()
    for name, arr in params.arrays().items():
        if theirs[name].shape != arr.shape or not np.array_equal(theirs[name], arr):
            raise ConsistencyError(f"trace was computed with different parameters ({name})")


def _head_backward(params, U, V, E, P, labels, grads, weight):
    """Softmax/pool/dense backward for a batch; accumulates into ``grads``.

    Returns dJ/dU, shape (n, M, B). ``weight`` scales the per-example loss.
    """
    n, M, _ = V.shape
    dlog = P.copy()
    dlog[np.arange(n), labels] -= 1.0
    dlog *= weight
    grads.softmax.theta += dlog.T @ E
    grads.softmax.c += dlog.sum(axis=0)
    dE = dlog @ params.softmax.theta
    dA = (dE[:, None, :] / M) * (1.0 - V * V)
    grads.dense.W += np.einsum("nmd,nmb->db", dA, U)
    grads.dense.b += dA.sum(axis=(0, 1))
    return np.ascontiguousarray(dA @ params.dense.W)


def model_backward(params, trace, label, backend=None):
    """Gradient of ``-log P[label]`` w.r.t. every parameter, as a :class:`ModelParams`."""
    _check_trace(params, trace)
    K = params.softmax.K
    if not 0 <= int(label) < K:
        raise ValueError(f"label {label} outside [0, {K})")
    kern = kernels.get_backend(backend) if backend else kernels.active
    grads = params.zeros_like()
    c = trace.lstm
    dU = _head_backward(
        params, c.u[None], trace.V[None], trace.E[None], trace.P[None], np.array([int(label)]), grads, 1.0
    )
    lp = params.lstm
    kern.lstm_backward(
        lp.W, lp.R, lp.P, c.x[None], c.act[None], c.c[None], c.u[None], dU,
        grads.lstm.W, grads.lstm.R, grads.lstm.P, grads.lstm.b,
    )
    return grads


def _chunks(n, M, B):
    per_example = M * B * 8 * 10
    size = max(1, min(n, _CACHE_BYTES // max(per_example, 1)))
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def forward_batch(params, X, backend=None):
    """Posteriors (n, K) for a stack of sequences (n, M, L)."""
    X = _as_batch(X, params.lstm.L)
    out = np.empty((X.shape[0], params.softmax.K))
    for sl in _chunks(X.shape[0], X.shape[1], params.lstm.B):
        _, _, _, u = _lstm_forward_batch(params.lstm, X[sl], backend)
        E = average_pool(dense_forward(params.dense, u))
        out[sl] = softmax_hypothesis(params.softmax, E)
    return out


def loss_and_grad(params, X, labels, backend=None):
    """Mean cross-entropy over a batch and its gradient.

    Returns ``(loss, grads, P)`` where ``P`` holds the (n, K) posteriors.
    Examples are reduced in order, so the result is deterministic.
    """
    X = _as_batch(X, params.lstm.L)
    labels = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    K = params.softmax.K
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    kern = kernels.get_backend(backend) if backend else kernels.active
    grads = params.zeros_like()
    P_all = np.empty((n, K))
    lp = params.lstm
    for sl in _chunks(n, X.shape[1], lp.B):
        Xs = X[sl]
        _, act, c, u = _lstm_forward_batch(lp, Xs, backend)
        V = dense_forward(params.dense, u)
        E = average_pool(V)
        P = softmax_hypothesis(params.softmax, E)
        P_all[sl] = P
        dU = _head_backward(params, u, V, E, P, labels[sl], grads, 1.0 / n)
        kern.lstm_backward(lp.W, lp.R, lp.P, Xs, act, c, u, dU, grads.lstm.W, grads.lstm.R, grads.lstm.P, grads.lstm.b)
    return cross_entropy(P_all, labels), grads, P_all


def argmax_lowest(P):
    """Argmax along the last axis; exact ties go to the lowest index."""
    return np.argmax(np.asarray(P), axis=-1)


def predict(params, example, backend=None):
    return int(argmax_lowest(model_forward(params, example, backend).P))


def predict_batch(params, X, backend=None):
    return argmax_lowest(forward_batch(params, X, backend))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays().values()))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    return grads.map(lambda a: a * (max_norm / norm))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    step: float
    tolerance: float
    worst: tuple = None  # (name, flat index, analytic, numeric)
    errors: dict = field(default_factory=dict)  # name -> max error within that array

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def example_loss(params, example, label, backend=None):
    return cross_entropy(model_forward(params, example, backend).P, [int(label)])


def gradient_check(params, example, label, step=1e-5, tolerance=1e-4, max_coords=None, rng=0,
                   abs_floor=1e-8, backend=None):
    """Compare :func:`model_backward` against central differences.

    With ``max_coords`` set, that many coordinates per parameter array are
    sampled without replacement; otherwise every coordinate is checked. When
    ``|analytic| + |numeric| < abs_floor`` the absolute difference is used
    in place of the relative error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(rng)
    trace = model_forward(params, example, backend)
    analytic = model_backward(params, trace, label, backend).arrays()
    work = params.copy()
    arrays = work.arrays()
    report = GradCheckReport(0.0, 0, step, tolerance)
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst_here = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            lp = example_loss(work, example, label, backend)
            flat[j] = orig - step
            lm = example_loss(work, example, label, backend)
            flat[j] = orig
            num = (lp - lm) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[j])
            denom = abs(ana) + abs(num)
            err = abs(ana - num) if denom < abs_floor else abs(ana - num) / denom
            report.n_checked += 1
            worst_here = max(worst_here, err)
            if err >= report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(j), ana, num)
        report.errors[name] = worst_here
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params, config=None):
    """Write params (and the producing config) to an ``.npz`` container."""
    payload = {name.replace(".", "__"): arr for name, arr in params.arrays().items()}
    meta = {"format": "seizure-lstm-checkpoint", "version": CHECKPOINT_VERSION, "dims": params.dims,
            "config": config}
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, config)`` from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "seizure-lstm-checkpoint":
            raise ValueError(f"{path} is not a checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported")
        arrays = {name: data[name.replace(".", "__")].copy() for name in ModelParams.NAMES}
    return ModelParams.from_arrays(arrays), meta.get("config")
