"""Artifact synthesis and SNR-calibrated mixing.

Three corruption models for single-channel EEG:

* ``white``: i.i.d. standard Gaussian noise.
* ``muscle``: Gaussian noise band-passed to 20-60 Hz.
* ``eyeblink``: Gaussian noise band-passed to 1-3 Hz.

Gaussian variates come from :class:`SplitMix64` via Box-Muller, so a seed
gives the same realization on every platform and NumPy version.
"""

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
DEFAULT_NUM_TAPS = 1001


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


def mix64(z):
    """SplitMix64 output finalizer; works on Python ints and uint64 arrays."""
    if isinstance(z, np.ndarray):
        z = z.astype(np.uint64, copy=True)
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
        return z
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, index):
    """Per-item seed: ``seed XOR mix64((index + 1) * GOLDEN_GAMMA)``."""
    return (int(seed) & MASK64) ^ mix64(((int(index) + 1) * GOLDEN_GAMMA) & MASK64)


class SplitMix64:
    """Counter-based 64-bit generator (Steele, Lea & Flood's SplitMix64).

    The n-th output is ``mix64(seed + n * GOLDEN_GAMMA)``, n = 1, 2, ...
    """

    def __init__(self, seed=0):
        self.state = int(seed) & MASK64

    def next_u64(self, n):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return mix64(states)

    def uniform(self, n):
        """Doubles in [0, 1) with 53 random bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def standard_normal(self, n):
        """Box-Muller: each pair of uniforms gives a cos/sin pair of normals."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        angle = 2.0 * math.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = radius * np.cos(angle)
        out[:, 1] = radius * np.sin(angle)
        return out.reshape(-1)[:n]


def as_generator(rng):
    return rng if isinstance(rng, SplitMix64) else SplitMix64(0 if rng is None else rng)


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


class NoiseKind(str, enum.Enum):
    MUSCLE = "muscle"
    EYEBLINK = "eyeblink"
    WHITE = "white"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown noise kind {value!r}; expected muscle, eyeblink or white") from None


BANDS_HZ = {NoiseKind.MUSCLE: (20.0, 60.0), NoiseKind.EYEBLINK: (1.0, 3.0)}


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    snr_db: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind.parse(self.kind))
        if not math.isfinite(self.snr_db):
            raise ConfigError(f"SNR must be finite, got {self.snr_db}")

    @classmethod
    def parse(cls, text, seed=0):
        """``"muscle:-10"`` -> NoiseSpec(MUSCLE, -10.0, seed)."""
        kind, sep, snr = str(text).partition(":")
        if not sep:
            raise ConfigError(f"noise spec {text!r} must look like <kind>:<snr_db>")
        try:
            value = float(snr)
        except ValueError:
            raise ConfigError(f"bad SNR in noise spec {text!r}") from None
        return cls(NoiseKind.parse(kind), value, seed)

    def __str__(self):
        return f"{self.kind.value}:{self.snr_db:g}"


@dataclass(frozen=True)
class FilterSpec:
    low_hz: float
    high_hz: float
    num_taps: int = DEFAULT_NUM_TAPS
    sampling_rate_hz: float = 173.6

    def __post_init__(self):
        if not 0 < self.low_hz < self.high_hz < self.sampling_rate_hz / 2:
            raise ConfigError(
                f"need 0 < low < high < fs/2, got low={self.low_hz}, high={self.high_hz}, fs={self.sampling_rate_hz}"
            )
        if self.num_taps < 1 or self.num_taps % 2 == 0:
            raise ConfigError(f"num_taps must be a positive odd integer, got {self.num_taps}")


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def design_bandpass(spec):
    """Hamming-windowed sinc band-pass FIR, normalized to unit gain mid-band.

    The taps are built from one half and mirrored, so they are exactly
    symmetric about the centre tap.
    """
    n = spec.num_taps
    half = n // 2
    m = np.arange(-half, 1, dtype=np.float64)  # left half including centre
    f1 = spec.low_hz / spec.sampling_rate_hz
    f2 = spec.high_hz / spec.sampling_rate_hz
    ideal = 2.0 * f2 * np.sinc(2.0 * f2 * m) - 2.0 * f1 * np.sinc(2.0 * f1 * m)
    window = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(half + 1) / (n - 1)) if n > 1 else np.ones(1)
    left = ideal * window
    taps = np.concatenate([left, left[-2::-1]])
    centre = 0.5 * (spec.low_hz + spec.high_hz)
    return taps / abs(frequency_response(taps, centre, spec.sampling_rate_hz))


def frequency_response(taps, freq_hz, sampling_rate_hz):
    """Complex response of an FIR at the given frequencies (Hz)."""
    taps = np.asarray(taps, dtype=np.float64)
    w = 2.0 * np.pi * np.asarray(freq_hz, dtype=np.float64) / sampling_rate_hz
    k = np.arange(taps.shape[0])
    return np.exp(-1j * np.multiply.outer(w, k)) @ taps


def apply_filter(taps, x):
    """Zero-phase FIR filtering with zero-padded edges; output has ``len(x)``.

    The taps' group delay ``(len(taps) - 1) // 2`` is removed, which is exact
    zero phase for symmetric odd-length filters.
    """
    taps = np.asarray(taps, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if taps.ndim != 1 or taps.shape[0] == 0:
        raise ValueError("taps must be a non-empty 1-D sequence")
    if x.ndim != 1:
        raise ValueError("x must be 1-D")
    if x.shape[0] == 0:
        return x.copy()
    delay = (taps.shape[0] - 1) // 2
    full = np.convolve(x, taps, mode="full")
    return full[delay : delay + x.shape[0]]


@functools.lru_cache(maxsize=32)
def _kind_taps(kind, sampling_rate_hz, num_taps):
    low, high = BANDS_HZ[kind]
    taps = design_bandpass(FilterSpec(low, high, num_taps, sampling_rate_hz))
    taps.setflags(write=False)
    return taps


def kind_taps(kind, sampling_rate_hz=173.6, num_taps=DEFAULT_NUM_TAPS):
    kind = NoiseKind.parse(kind)
    if kind is NoiseKind.WHITE:
        return np.ones(1)
    return _kind_taps(kind, float(sampling_rate_hz), int(num_taps))


def synthesize_noise(kind, length, sampling_rate_hz=173.6, rng=0, num_taps=DEFAULT_NUM_TAPS):
    """One artifact realization of ``length`` samples.

    Filtered kinds draw ``length + num_taps - 1`` Gaussian samples and keep
    only the fully overlapped part of the convolution, so no edge transient
    leaks out of band.
    """
    kind = NoiseKind.parse(kind)
    gen = as_generator(rng)
    if kind is NoiseKind.WHITE:
        if length < 1:
            raise ConfigError("noise length must be positive")
        return gen.standard_normal(length)
    if length < num_taps:
        raise ConfigError(f"{kind.value} noise needs length >= {num_taps} (filter taps), got {length}")
    taps = kind_taps(kind, sampling_rate_hz, num_taps)
    raw = gen.standard_normal(length + num_taps - 1)
    return np.convolve(raw, taps, mode="valid")


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def signal_power(x):
    """Mean of squared samples."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("signal_power of an empty sequence")
    return float(np.mean(x * x))


def snr_db(clean, noise):
    return 10.0 * math.log10(signal_power(clean) / signal_power(noise))


def mix_at_snr(clean, noise, snr_db):
    """Return ``(clean + alpha * noise, alpha)`` with the requested SNR in dB."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"clean {clean.shape} and noise {noise.shape} differ in length")
    p_clean = signal_power(clean)
    p_noise = signal_power(noise)
    if p_clean <= 0:
        raise DegenerateInputError("clean signal has zero power")
    if p_noise <= 0:
        raise DegenerateInputError("noise has zero power")
    alpha = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + alpha * noise, alpha


def corrupt_signals(signals, spec, sampling_rate_hz=173.6, num_taps=DEFAULT_NUM_TAPS):
    """Corrupt each row of an (n, N) array; returns ``(noisy, scaled_noise)``.

    Row ``i`` uses the noise stream seeded with ``derive_seed(spec.seed, i)``.
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    noisy = np.empty_like(signals)
    scaled = np.empty_like(signals)
    for i, clean in enumerate(signals):
        noise = synthesize_noise(spec.kind, clean.shape[0], sampling_rate_hz, derive_seed(spec.seed, i), num_taps)
        noisy[i], alpha = mix_at_snr(clean, noise, spec.snr_db)
        scaled[i] = alpha * noise
    return noisy, scaled


def corrupt_dataset(dataset, spec, num_taps=DEFAULT_NUM_TAPS, return_noise=False):
    """Copy of ``dataset`` with every signal corrupted at ``spec.snr_db``; labels unchanged."""
    noisy, scaled = corrupt_signals(dataset.signals, spec, dataset.sampling_rate_hz, num_taps)
    out = dataset.with_signals(noisy)
    return (out, scaled) if return_noise else out


def band_power_fraction(x, sampling_rate_hz, low_hz, high_hz):
    """Fraction of periodogram power within [low, high] Hz."""
    x = np.asarray(x, dtype=np.float64)
    spec = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.shape[0], d=1.0 / sampling_rate_hz)
    total = spec.sum()
    if total == 0:
        return 0.0
    band = (freqs >= low_hz) & (freqs <= high_hz)
    return float(spec[band].sum() / total)
