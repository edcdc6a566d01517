"""Shared test fixtures: deterministic synthetic audio."""

import numpy as np

from mimictts import dsp


def harmonic_signal(duration_s=1.0, sr=16000, f0=200.0, n_harmonics=6, am_depth=0.0):
    """Speech-like deterministic fixture: decaying coherent harmonics."""
    t = np.arange(int(duration_s * sr)) / sr
    x = np.zeros_like(t)
    for k in range(1, n_harmonics + 1):
        x += (0.6 / k) * np.sin(2 * np.pi * f0 * k * t)
    if am_depth:
        x *= (1.0 - am_depth) + am_depth * np.sin(2 * np.pi * 1.7 * t)
    return dsp.Waveform(0.8 * x / np.max(np.abs(x)), sr)
