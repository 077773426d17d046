"""Determined frequency-domain IVA: demixing model, cost, and the
auxiliary-function update sweep.

The update sweep follows the auxiliary-function technique of

    N. Ono, "Stable and fast update rules for independent vector analysis
    based on auxiliary function technique," Proc. IEEE WASPAA, 2011.

One sweep updates each demixing row in turn: the broadband magnitudes of the
current output feed a weighted covariance per frequency bin, and the row is
replaced by the iterative-projection solution normalized so that
``w^H V w = 1``. The sweep is exposed both as a map on
:class:`DemixingSystem` and, through :meth:`DemixingSystem.stacked`, as a
fixed-point map on a flat complex vector for the accelerators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .spectral import Spectrogram

__all__ = [
    "ContrastModel",
    "laplacian_model",
    "quadratic_model",
    "DemixingSystem",
    "demix",
    "broadband_magnitude",
    "weighted_covariance",
    "ip_update",
    "mm_map",
    "cost",
    "project_back",
]

# Diagonal loading used when a bin's update matrix is singular: one retry
# with delta * trace(V)/K added to the diagonal, then a hard error.
_SINGULAR_RETRY_DELTA = 1e-10


@dataclass(frozen=True)
class ContrastModel:
    """Source-model contract: contrast G(r) and its update weight G'(r)/r.

    ``weight`` is always evaluated on magnitudes floored at
    ``magnitude_floor`` times the mean magnitude, so silent frames never
    produce non-finite weights. ``contrast`` must be nondecreasing on
    r >= 0 (supergaussian-model contract).
    """

    name: str
    contrast: Callable[[np.ndarray], np.ndarray]
    weight: Callable[[np.ndarray], np.ndarray]
    magnitude_floor: float = 1e-8

    def weights(self, r: np.ndarray) -> np.ndarray:
        """Per-frame weights G'(r)/r with the relative magnitude floor applied."""
        r = np.asarray(r, dtype=np.float64)
        floor = self.magnitude_floor * float(np.mean(r))
        return self.weight(np.maximum(r, floor))


def laplacian_model(magnitude_floor: float = 1e-8) -> ContrastModel:
    """Laplacian (spherical) source model: G(r) = r, weight 1/r."""
    return ContrastModel(
        name="laplacian",
        contrast=lambda r: r,
        weight=lambda r: 1.0 / r,
        magnitude_floor=magnitude_floor,
    )


def quadratic_model() -> ContrastModel:
    """Quadratic contrast G(r) = r^2 / 2 with unit weights.

    Useful as a reference model: its weighted covariance reduces to the
    plain sample covariance.
    """
    return ContrastModel(
        name="quadratic",
        contrast=lambda r: 0.5 * r * r,
        weight=lambda r: np.ones_like(r),
    )


@dataclass
class DemixingSystem:
    """Per-bin square demixing matrices.

    ``matrices[f]`` is the K x K complex matrix applied at bin ``f``; row
    ``k`` holds the conjugate-transposed demixing vector of output ``k``,
    so demixing is ``y[:, f, t] = matrices[f] @ x[:, f, t]``.
    """

    matrices: np.ndarray  # (bins, K, K) complex

    def __post_init__(self):
        mats = np.asarray(self.matrices, dtype=np.complex128)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ValueError(f"matrices must be (bins, K, K), got shape {mats.shape}")
        if not np.all(np.isfinite(mats.view(np.float64))):
            raise ValueError("demixing matrices must be finite-valued")
        self.matrices = mats

    @property
    def n_bins(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_channels(self) -> int:
        return self.matrices.shape[1]

    @classmethod
    def identity(cls, n_channels: int, n_bins: int) -> "DemixingSystem":
        eye = np.eye(n_channels, dtype=np.complex128)
        return cls(np.tile(eye, (n_bins, 1, 1)))

    def copy(self) -> "DemixingSystem":
        return DemixingSystem(self.matrices.copy())

    def stacked(self) -> np.ndarray:
        """Flat complex vector of all demixing vectors.

        Blocks are ordered channel-major: the K-length demixing vector of
        output k at bin f sits at block ``k * n_bins + f``. The demixing
        vectors themselves (conjugates of the matrix rows) are stacked, and
        :meth:`from_stacked` is the exact inverse.
        """
        return np.conj(self.matrices).transpose(1, 0, 2).reshape(-1)

    @classmethod
    def from_stacked(cls, vec: np.ndarray, n_channels: int, n_bins: int) -> "DemixingSystem":
        blocks = np.asarray(vec, dtype=np.complex128).reshape(n_channels, n_bins, n_channels)
        return cls(np.conj(blocks).transpose(1, 0, 2))


def _tensor_of(x) -> np.ndarray:
    """Complex (channels, bins, frames) tensor of a spectrogram or raw array."""
    data = x.data if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.complex128)
    if data.ndim != 3:
        raise ValueError(f"expected a (channels, bins, frames) tensor, got shape {data.shape}")
    return data


def demix(system: DemixingSystem, x):
    """Apply the demixing system: ``y[k, f, t] = w_{k,f}^H x[:, f, t]``.

    Accepts a :class:`Spectrogram` (returned as one) or a raw complex
    tensor of shape (channels, bins, frames).
    """
    data = _tensor_of(x)
    if system.n_channels != data.shape[0]:
        raise ValueError(
            f"dimension mismatch: {system.n_channels}-channel system, "
            f"{data.shape[0]}-channel input"
        )
    if system.n_bins != data.shape[1]:
        raise ValueError(
            f"dimension mismatch: system has {system.n_bins} bins, input {data.shape[1]}"
        )
    y = (system.matrices @ data.transpose(1, 0, 2)).transpose(1, 0, 2)
    if isinstance(x, Spectrogram):
        return Spectrogram(data=y, config=x.config, sample_rate=x.sample_rate)
    return y


def broadband_magnitude(y) -> np.ndarray:
    """Per-frame L2 norm across bins of each output, shape (K, frames)."""
    return np.sqrt(np.sum(np.abs(_tensor_of(y)) ** 2, axis=1))


def weighted_covariance(x, r: np.ndarray, k: int, model: ContrastModel) -> np.ndarray:
    """Weighted covariance of the observations for output ``k``, per bin.

    Returns ``V[f] = mean_t  G'(r[k,t])/r[k,t] * x[:,f,t] x[:,f,t]^H`` as an
    array of shape (bins, K, K); each slice is Hermitian positive
    semidefinite since the weights are nonnegative.
    """
    weights = model.weights(np.asarray(r)[k])
    return _weighted_covariance_from_weights(_tensor_of(x), weights)


def _weighted_covariance_from_weights(data: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n_frames = data.shape[2]
    return np.einsum("cft,dft->fcd", data * weights, np.conj(data)) / n_frames


def ip_update(w_matrix: np.ndarray, v: np.ndarray, k: int) -> np.ndarray:
    """Iterative-projection update of one demixing vector at one bin.

    Solves ``(W V) w = e_k`` and normalizes the solution so that
    ``w^H V w = 1``. If ``W V`` is singular, the covariance is diagonally
    loaded once and the solve retried; a second failure raises.

    Parameters
    ----------
    w_matrix : (K, K) complex
        Current demixing matrix of the bin (rows are conjugated vectors).
    v : (K, K) complex
        Weighted covariance of the bin for output ``k``.
    k : int
        Output index (0-based).

    Returns
    -------
    (K,) complex demixing vector (not conjugated).
    """
    w_matrix = np.asarray(w_matrix, dtype=np.complex128)
    v = np.asarray(v, dtype=np.complex128)
    new = _ip_update_bins(w_matrix[np.newaxis], v[np.newaxis], k)
    return new[0]


def _ip_update_bins(w_mats: np.ndarray, v_mats: np.ndarray, k: int) -> np.ndarray:
    """Vectorized iterative projection over bins; returns (bins, K) vectors."""
    n_bins, n_ch = v_mats.shape[:2]
    rhs = np.zeros((n_bins, n_ch), dtype=np.complex128)
    rhs[:, k] = 1.0

    u = _solve_bins(w_mats @ v_mats, rhs)
    bad = ~np.all(np.isfinite(u.view(np.float64)), axis=1)
    if np.any(bad):
        u[bad] = _solve_degenerate(w_mats[bad], v_mats[bad], k)

    denom_sq = np.einsum("fc,fcd,fd->f", np.conj(u), v_mats, u).real
    if np.any(denom_sq <= 0.0) or not np.all(np.isfinite(denom_sq)):
        raise ValueError("degenerate covariance: iterative projection produced a null direction")
    return u / np.sqrt(denom_sq)[:, np.newaxis]


def _solve_bins(mats: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Batched linear solve that reports failures as NaNs instead of raising."""
    try:
        return np.linalg.solve(mats, rhs[..., np.newaxis])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for f in range(mats.shape[0]):
            try:
                out[f] = np.linalg.solve(mats[f], rhs[f])
            except np.linalg.LinAlgError:
                out[f] = np.nan
        return out


def _solve_degenerate(w_mats: np.ndarray, v_mats: np.ndarray, k: int) -> np.ndarray:
    """Retry singular bins once with diagonal loading of the covariance."""
    n_ch = v_mats.shape[1]
    out = np.empty((v_mats.shape[0], n_ch), dtype=np.complex128)
    eye = np.eye(n_ch)
    for f in range(v_mats.shape[0]):
        trace = np.trace(v_mats[f]).real
        loaded = v_mats[f] + (_SINGULAR_RETRY_DELTA * trace / n_ch) * eye
        try:
            u = np.linalg.solve(w_mats[f] @ loaded, eye[:, k].astype(np.complex128))
        except np.linalg.LinAlgError as err:
            raise ValueError("degenerate covariance: update matrix singular after loading") from err
        if not np.all(np.isfinite(u.view(np.float64))):
            raise ValueError("degenerate covariance: update matrix singular after loading")
        out[f] = u
    return out


def mm_map(
    system: DemixingSystem,
    x,
    model: ContrastModel,
    source_order: Sequence[int] | None = None,
    check_normalization: bool = False,
) -> DemixingSystem:
    """One full auxiliary-function update sweep over all outputs.

    Outputs are updated sequentially (Gauss-Seidel style): for each output
    the broadband magnitudes are recomputed from the current, partially
    updated system, the weighted covariance is formed per bin, and the
    iterative-projection row replaces the old one before the next output is
    processed.

    Parameters
    ----------
    source_order : sequence of int, optional
        Order in which outputs are updated; defaults to ``0..K-1``. The
        result of a sweep depends on this order, and relabeling the outputs
        commutes with the sweep only when the order is relabeled with them.
    check_normalization : bool
        If true, verify ``w^H V w = 1`` within 1e-10 after every row update
        and raise otherwise.
    """
    n_ch = system.n_channels
    order = range(n_ch) if source_order is None else list(source_order)
    if source_order is not None and sorted(order) != list(range(n_ch)):
        raise ValueError(f"source_order must be a permutation of 0..{n_ch - 1}, got {order}")

    data = _tensor_of(x)
    mats = system.matrices.copy()
    for k in order:
        y_k = np.einsum("fc,cft->ft", mats[:, k, :], data)
        r_k = np.sqrt(np.sum(np.abs(y_k) ** 2, axis=0))
        # Quadratic coefficient of the supergaussian majorizer is
        # G'(r)/(2r): the half keeps each row update the exact minimizer
        # of the bound, which is what guarantees monotone descent of the
        # cost (with w^H V w = 1 for the halved matrix).
        v = _weighted_covariance_from_weights(data, 0.5 * model.weights(r_k))
        w_new = _ip_update_bins(mats, v, k)
        if check_normalization:
            quad = np.einsum("fc,fcd,fd->f", np.conj(w_new), v, w_new).real
            worst = float(np.max(np.abs(quad - 1.0)))
            if worst > 1e-10:
                raise AssertionError(f"iterative projection normalization off by {worst:.3e}")
        mats[:, k, :] = np.conj(w_new)
    return DemixingSystem(mats)


def cost(system: DemixingSystem, x, model: ContrastModel) -> float:
    """IVA cost: summed mean contrast of the outputs minus 2 log|det W_f|.

    Returns ``+inf`` if any bin's demixing matrix is singular.
    """
    y = demix(system, _tensor_of(x))
    r = broadband_magnitude(y)
    contrast_term = float(np.sum(np.mean(model.contrast(r), axis=1)))
    _, logdet = np.linalg.slogdet(system.matrices)
    if np.any(np.isneginf(logdet)):
        return math.inf
    return contrast_term - 2.0 * float(np.sum(logdet))


def project_back(y: Spectrogram, x: Spectrogram, reference_channel: int = 0) -> Spectrogram:
    """Minimal-distortion rescaling of demixed outputs to a reference microphone.

    Each output is scaled per bin by the least-squares coefficient mapping it
    onto the reference channel of the observations. Intended for listening
    and evaluation only; the update sweep never needs it.
    """
    ref = x.data[reference_channel]  # (bins, frames)
    num = np.sum(np.conj(y.data) * ref[np.newaxis], axis=2)
    den = np.sum(np.abs(y.data) ** 2, axis=2)
    scale = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return Spectrogram(
        data=y.data * scale[:, :, np.newaxis], config=y.config, sample_rate=y.sample_rate
    )
