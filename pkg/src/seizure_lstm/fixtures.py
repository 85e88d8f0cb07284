"""Synthetic two-class EEG-like fixture for CI, usable without the Bonn data.

Every signal starts from background noise: SplitMix64 Gaussian noise
band-passed to 20-60 Hz with a 129-tap Hamming-windowed sinc, then scaled to
unit mean-square power. The 10 Hz bursts therefore sit outside the background
band, and the class cue survives per-signal z-scoring.

Class 1 signals additionally carry ``n_bursts`` non-overlapping 10 Hz
sinusoidal bursts, each a Hann-windowed sine of ``burst_len`` samples at a
random phase and position. The summed burst component is scaled to the same
mean-square power as the background (0 dB).

Signal ``i`` is class ``i % 2`` and is generated from the stream seeded
with ``derive_seed(seed, i)``.
"""

import math

import numpy as np

from .dataio import Dataset, SAMPLING_RATE_HZ
from .noise import FilterSpec, SplitMix64, derive_seed, design_bandpass

BACKGROUND_BAND_HZ = (20.0, 60.0)
BACKGROUND_TAPS = 129
BURST_HZ = 10.0


def synthetic_signal(label, n_samples, seed, sampling_rate_hz=SAMPLING_RATE_HZ, n_bursts=4, burst_len=48):
    gen = SplitMix64(seed)
    taps = design_bandpass(FilterSpec(*BACKGROUND_BAND_HZ, BACKGROUND_TAPS, sampling_rate_hz))
    background = np.convolve(gen.standard_normal(n_samples + BACKGROUND_TAPS - 1), taps, mode="valid")
    background /= math.sqrt(np.mean(background**2))
    if label == 0:
        return background
    slots = n_samples // burst_len
    if n_bursts > slots:
        raise ValueError(f"{n_bursts} bursts of {burst_len} samples do not fit in {n_samples}")
    u = gen.uniform(slots + 2 * n_bursts)
    chosen = np.sort(np.argsort(u[:slots], kind="stable")[:n_bursts])
    bursts = np.zeros(n_samples)
    t = np.arange(burst_len) / sampling_rate_hz
    envelope = np.hanning(burst_len)
    for j, slot in enumerate(chosen):
        phase = 2.0 * math.pi * u[slots + j]
        start = slot * burst_len
        bursts[start : start + burst_len] = envelope * np.sin(2.0 * math.pi * BURST_HZ * t + phase)
    bursts *= math.sqrt(np.mean(background**2) / np.mean(bursts**2))
    return background + bursts


def synthetic_dataset(n_signals=200, n_samples=256, seed=0, sampling_rate_hz=SAMPLING_RATE_HZ, **kwargs):
    """Balanced two-class fixture: even indices background only, odd with bursts."""
    labels = np.arange(n_signals) % 2
    signals = np.stack(
        [synthetic_signal(int(y), n_samples, derive_seed(seed, i), sampling_rate_hz, **kwargs)
         for i, y in enumerate(labels)]
    )
    return Dataset(
        signals,
        labels,
        ["A" if y == 0 else "E" for y in labels],
        [f"synth{i:04d}" for i in range(n_signals)],
        sampling_rate_hz,
        ("background", "burst"),
        1,
    )
