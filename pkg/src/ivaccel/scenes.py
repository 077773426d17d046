"""Reproducible synthetic acoustic scenes for separation experiments.

Room impulse responses use the standard lightweight surrogate: a unit
direct-path tap followed by seeded Gaussian noise shaped by an exponential
energy decay reaching -60 dB at the configured reverberation time, scaled
to a target direct-to-reverberant ratio. Source-to-microphone geometry is
reduced to integer direct-path delays derived from a small linear-array
layout. Every output is a pure function of the configuration and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .spectral import TimeSignal, read_wav

__all__ = [
    "SceneConfig",
    "MixingSystem",
    "default_direct_delays",
    "synth_rir",
    "mix",
    "synth_sources",
]

_SPEED_OF_SOUND = 343.0  # m/s
_ARRAY_SPACING = 0.042  # m, linear microphone array

# Seed-sequence tags keeping the RIR, source and noise streams independent.
_TAG_SOURCES = 0
_TAG_RIR = 1
_TAG_NOISE = 2


@dataclass(frozen=True, eq=False)
class SceneConfig:
    """Scene parameters: geometry, reverberation, noise level and seed."""

    n_channels: int = 2
    t60: float = 0.2
    rir_length: int = 2048
    snr_db: float = 30.0
    sample_rate: int = 8000
    duration: float = 10.0
    drr_db: float = 0.0
    direct_delay: np.ndarray | None = None  # (mics, sources) in samples
    seed: int = 0

    def __post_init__(self):
        if self.n_channels < 2:
            raise ValueError(f"need at least 2 sources/microphones, got {self.n_channels}")
        if self.t60 <= 0.0:
            raise ValueError(f"t60 must be positive, got {self.t60}")
        if self.rir_length < 1:
            raise ValueError(f"rir_length must be >= 1, got {self.rir_length}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.direct_delay is not None:
            delays = np.asarray(self.direct_delay, dtype=np.int64)
            k = self.n_channels
            if delays.shape != (k, k):
                raise ValueError(f"direct_delay must be ({k}, {k}), got {delays.shape}")
            if np.any(delays < 0):
                raise ValueError("direct delays must be nonnegative")
            if np.any(delays >= self.rir_length):
                raise ValueError("direct delays must fall inside the impulse response")
            object.__setattr__(self, "direct_delay", delays)

    def delays(self) -> np.ndarray:
        if self.direct_delay is not None:
            return self.direct_delay
        return default_direct_delays(self.n_channels, self.sample_rate)


def default_direct_delays(
    n_channels: int,
    sample_rate: int,
    distance_m: float = 1.0,
    spacing_m: float = _ARRAY_SPACING,
) -> np.ndarray:
    """Integer direct-path delays for sources around a small linear array.

    Two sources sit at 40 and 140 degrees from the array axis, three at
    40/90/140; more sources are spread uniformly over 30..150 degrees.
    Only the inter-channel delay structure matters for the separation
    problem, so fractional-sample geometry is rounded.
    """
    if n_channels == 2:
        angles = np.array([40.0, 140.0])
    elif n_channels == 3:
        angles = np.array([40.0, 90.0, 140.0])
    else:
        angles = np.linspace(30.0, 150.0, n_channels)
    mics = np.arange(n_channels)[:, np.newaxis]
    path = distance_m + mics * spacing_m * np.cos(np.deg2rad(angles))[np.newaxis, :]
    delays = np.rint(sample_rate * path / _SPEED_OF_SOUND).astype(np.int64)
    return np.maximum(delays, 0)


@dataclass(frozen=True, eq=False)
class MixingSystem:
    """Room impulse responses, ``rir[mic, source, tap]``."""

    rir: np.ndarray

    def __post_init__(self):
        rir = np.asarray(self.rir, dtype=np.float64)
        if rir.ndim != 3:
            raise ValueError(f"rir must be (mics, sources, taps), got shape {rir.shape}")
        if not np.all(np.isfinite(rir)):
            raise ValueError("impulse responses must be finite")
        if np.any(np.max(np.abs(rir), axis=2) == 0.0):
            raise ValueError("every mic/source pair needs a nonzero direct path")
        object.__setattr__(self, "rir", rir)

    @property
    def n_mics(self) -> int:
        return self.rir.shape[0]

    @property
    def n_sources(self) -> int:
        return self.rir.shape[1]


def synth_rir(config: SceneConfig) -> MixingSystem:
    """Synthesize exponentially decaying impulse responses for a scene.

    Each response is a unit tap at its direct-path delay plus a Gaussian
    tail whose expected energy envelope is ``exp(-6 ln(10) t / t60)``
    (-60 dB at ``t60``), scaled so the expected direct-to-reverberant
    energy ratio equals ``drr_db``. Deterministic for a given seed.
    """
    k, length = config.n_channels, config.rir_length
    fs = config.sample_rate
    delays = config.delays()
    rng = np.random.default_rng([config.seed, _TAG_RIR])

    # amplitude decay rate: energy halves of -60 dB at t60
    amp_rate = 3.0 * math.log(10.0) / (config.t60 * fs)
    # expected tail energy of the unit-rate envelope (continuous-time limit)
    tail_energy = fs * config.t60 / (6.0 * math.log(10.0))
    tail_scale = 10.0 ** (-config.drr_db / 20.0) / math.sqrt(tail_energy)

    rir = np.zeros((k, k, length))
    taps = np.arange(length, dtype=np.float64)
    for m in range(k):
        for s in range(k):
            d = int(delays[m, s])
            rir[m, s, d] = 1.0
            n_tail = length - d - 1
            if n_tail > 0:
                envelope = np.exp(-amp_rate * (taps[1 : n_tail + 1]))
                rir[m, s, d + 1 :] = tail_scale * envelope * rng.standard_normal(n_tail)
    return MixingSystem(rir)


def mix(
    sources: TimeSignal,
    system: MixingSystem,
    snr_db: float,
    rng: np.random.Generator | int | None = None,
) -> TimeSignal:
    """Convolve sources through the mixing system and add noise at a target SNR.

    Each microphone receives the sum of linearly convolved sources
    (truncated to the source length) plus white Gaussian noise scaled so the
    per-mic signal-to-noise ratio equals ``snr_db``; pass ``math.inf`` to
    disable noise.
    """
    if system.n_sources != sources.n_channels:
        raise ValueError(
            f"system expects {system.n_sources} sources, got {sources.n_channels}"
        )
    n = sources.n_samples
    mics = np.zeros((system.n_mics, n))
    for m in range(system.n_mics):
        for s in range(system.n_sources):
            mics[m] += fftconvolve(sources.samples[s], system.rir[m, s])[:n]

    if math.isfinite(snr_db):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng([rng if rng is not None else 0, _TAG_NOISE])
        for m in range(system.n_mics):
            power = float(np.mean(mics[m] ** 2))
            if power == 0.0:
                raise ValueError("cannot calibrate SNR: mixed signal is all zero")
            sigma = math.sqrt(power * 10.0 ** (-snr_db / 10.0))
            mics[m] += sigma * rng.standard_normal(n)
    return TimeSignal(samples=mics, sample_rate=sources.sample_rate)


def synth_sources(
    n_sources: int,
    duration: float,
    kind: str = "laplacian",
    seed: int = 0,
    sample_rate: int = 8000,
    speech_paths=None,
) -> TimeSignal:
    """Generate or load mutually independent source signals.

    ``kind="laplacian"`` draws independent Laplacian samples per source with
    a slowly varying random amplitude envelope (speech-like supergaussian
    nonstationarity); ``kind="speech"`` picks ``n_sources`` distinct WAV
    files from ``speech_paths`` (seeded choice), which must match the
    sample rate and be at least ``duration`` long.
    """
    if duration <= 0.0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng([seed, _TAG_SOURCES])

    if kind == "laplacian":
        samples = rng.laplace(size=(n_sources, n))
        # piecewise-linear random envelope, ~4 Hz nodes, mimicking syllabic
        # energy fluctuation
        n_nodes = max(int(duration * 4) + 1, 2)
        node_pos = np.linspace(0, n - 1, n_nodes)
        grid = np.arange(n)
        for s in range(n_sources):
            node_amp = rng.uniform(0.1, 1.0, size=n_nodes)
            samples[s] *= np.interp(grid, node_pos, node_amp)
            rms = math.sqrt(float(np.mean(samples[s] ** 2)))
            samples[s] *= 0.1 / rms
        return TimeSignal(samples=samples, sample_rate=sample_rate)

    if kind == "speech":
        if not speech_paths:
            raise ValueError("speech kind requires speech_paths")
        paths = list(speech_paths)
        if len(paths) < n_sources:
            raise ValueError(
                f"need at least {n_sources} speech files, got {len(paths)}"
            )
        chosen = rng.choice(len(paths), size=n_sources, replace=False)
        samples = np.zeros((n_sources, n))
        for s, idx in enumerate(chosen):
            signal = read_wav(paths[idx])
            if signal.sample_rate != sample_rate:
                raise ValueError(
                    f"speech file {paths[idx]!r} has sample rate {signal.sample_rate}, "
                    f"expected {sample_rate}"
                )
            if signal.n_samples < n:
                raise ValueError(f"speech file {paths[idx]!r} shorter than {duration} s")
            samples[s] = signal.samples[0, :n]
        return TimeSignal(samples=samples, sample_rate=sample_rate)

    raise ValueError(f"unknown source kind {kind!r}: use 'laplacian' or 'speech'")
