"""Frequency-domain IVA source separation with accelerated update sweeps.

The package splits into:

* :mod:`ivaccel.spectral` -- STFT analysis/synthesis and WAV I/O
* :mod:`ivaccel.separation` -- demixing model, IVA cost, update sweep
* :mod:`ivaccel.accel` -- fixed-point acceleration schemes and the run loop
* :mod:`ivaccel.evaluation` -- SDR/SIR/SAR metrics with permutation search
* :mod:`ivaccel.scenes` -- synthetic rooms, mixing and source generation
* :mod:`ivaccel.bench` -- seeded experiment runner and trace comparison CLI
"""

from .accel import AccelConfig, IterationRecord, run
from .evaluation import EvalConfig, ScoreCard, SeparationScorer, decompose, score
from .scenes import MixingSystem, SceneConfig, mix, synth_rir, synth_sources
from .separation import (
    ContrastModel,
    DemixingSystem,
    broadband_magnitude,
    cost,
    demix,
    ip_update,
    laplacian_model,
    mm_map,
    project_back,
    quadratic_model,
    weighted_covariance,
)
from .spectral import (
    Spectrogram,
    StftConfig,
    TimeSignal,
    analyze,
    interior_slice,
    read_wav,
    synthesize,
    write_wav,
)

__version__ = "0.1.0"

__all__ = [
    "AccelConfig",
    "ContrastModel",
    "DemixingSystem",
    "EvalConfig",
    "IterationRecord",
    "MixingSystem",
    "SceneConfig",
    "ScoreCard",
    "SeparationScorer",
    "Spectrogram",
    "StftConfig",
    "TimeSignal",
    "analyze",
    "broadband_magnitude",
    "cost",
    "decompose",
    "demix",
    "interior_slice",
    "ip_update",
    "laplacian_model",
    "mix",
    "mm_map",
    "project_back",
    "quadratic_model",
    "read_wav",
    "run",
    "score",
    "synth_rir",
    "synth_sources",
    "synthesize",
    "weighted_covariance",
    "write_wav",
]
