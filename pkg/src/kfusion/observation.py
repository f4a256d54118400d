"""Per-modality measurement operators.

A modality observes each of its bands as a spectral combination of the latent
high-resolution bands, spatially degraded and with untrusted pixels removed.
For band ``l`` the rows of the stacked operator are ``c_l^T kron (D H_l)``
under the band-major state layout, which is what :func:`assemble_operator`
builds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import CalibrationError, ConfigError


@dataclass(frozen=True)
class SpectralMap:
    """Weights mixing the latent bands into one measured band."""

    weights: np.ndarray
    band_index: int = 0
    modality: str = ""

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if not np.all(np.isfinite(w)):
            raise ConfigError("spectral weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def one_to_one(cls, n_bands: int, band: int, gain: float = 1.0, modality: str = ""):
        """Positive ``gain`` on latent band ``band`` and zeros elsewhere."""
        if gain <= 0:
            raise ConfigError(f"gain must be positive, got {gain}")
        w = np.zeros(n_bands)
        w[band] = gain
        return cls(weights=w, band_index=band, modality=modality)

    @property
    def n_bands(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class SpatialDegradation:
    """Sparse matrix mapping one latent band to one measured band."""

    matrix: sparse.csr_matrix
    kind: str = "custom"
    scale: int = 1

    def __post_init__(self):
        m = sparse.csr_matrix(self.matrix, dtype=float)
        m.eliminate_zeros()
        if m.shape[0] and np.any(np.diff(m.indptr) == 0):
            raise ConfigError("spatial degradation has all-zero rows")
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, band: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(band, dtype=float).ravel()


def build_identity(n_pixels: int) -> SpatialDegradation:
    return SpatialDegradation(sparse.identity(n_pixels, format="csr"), kind="identity")


def build_uniform_blur_decimate(high_dims: tuple[int, int], scale: int) -> SpatialDegradation:
    """Uniform ``scale x scale`` box filter followed by decimation by ``scale``.

    Each coarse pixel is the mean of the non-overlapping footprint of
    ``scale**2`` fine pixels; both lattices are flattened row-major.
    """
    rows, cols = (int(d) for d in high_dims)
    scale = int(scale)
    if scale < 1:
        raise ConfigError(f"scale must be a positive integer, got {scale}")
    if rows % scale or cols % scale:
        raise ConfigError(f"image dims {rows}x{cols} are not divisible by scale {scale}")
    if scale == 1:
        return SpatialDegradation(
            sparse.identity(rows * cols, format="csr"), kind="identity", scale=1
        )
    r, c = np.divmod(np.arange(rows * cols), cols)
    coarse = (r // scale) * (cols // scale) + c // scale
    n_coarse = (rows // scale) * (cols // scale)
    m = sparse.csr_matrix(
        (np.full(rows * cols, 1.0 / scale**2), (coarse, np.arange(rows * cols))),
        shape=(n_coarse, rows * cols),
    )
    return SpatialDegradation(m, kind="uniform_blur_decimate", scale=scale)


@dataclass(frozen=True)
class QualitySelection:
    """Rows kept by the outlier-removal matrix ``D`` (possibly none)."""

    retained: np.ndarray
    n_pixels: int
    source_codes: np.ndarray | None = None
    accepted_codes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        idx = np.array(self.retained, dtype=np.int64).ravel()
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ConfigError("retained indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.n_pixels:
                raise ConfigError("retained index out of range")
        idx.setflags(write=False)
        object.__setattr__(self, "retained", idx)
        object.__setattr__(self, "accepted_codes", frozenset(self.accepted_codes))

    @classmethod
    def full(cls, n_pixels: int) -> "QualitySelection":
        return cls(np.arange(n_pixels), n_pixels)

    @property
    def size(self) -> int:
        return self.retained.size

    def matrix(self) -> sparse.csr_matrix:
        n = self.retained.size
        return sparse.csr_matrix(
            (np.ones(n), (np.arange(n), self.retained)), shape=(n, self.n_pixels)
        )


def selection_from_quality(codes, accepted) -> QualitySelection:
    codes = np.asarray(codes).ravel()
    accepted = frozenset(int(a) for a in accepted)
    keep = np.isin(codes, sorted(accepted)) if accepted else np.zeros(codes.size, bool)
    return QualitySelection(
        retained=np.flatnonzero(keep),
        n_pixels=codes.size,
        source_codes=codes.copy(),
        accepted_codes=accepted,
    )


@dataclass(frozen=True)
class ModalityObservation:
    """One acquisition: a measurement vector per band plus quality codes."""

    bands: tuple
    quality_codes: np.ndarray
    time_index: int
    modality: str

    def __post_init__(self):
        bands = tuple(np.array(b, dtype=float).ravel() for b in self.bands)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "quality_codes", np.asarray(self.quality_codes).ravel())

    @property
    def band_count(self) -> int:
        return len(self.bands)

    @property
    def pixel_counts(self) -> tuple[int, ...]:
        return tuple(b.size for b in self.bands)


@dataclass(frozen=True)
class ModalityOperator:
    """Stacked operator and masked noise covariance of one modality at one step.

    ``noise`` is a 1-D array of diagonal variances or a dense 2-D covariance;
    ``band_rows`` gives the number of rows in each band block, in band order.
    """

    stacked: sparse.csr_matrix
    noise: np.ndarray
    modality: str = ""
    time_index: int = 0
    band_rows: tuple = ()

    def __post_init__(self):
        h = sparse.csr_matrix(self.stacked, dtype=float)
        noise = np.array(self.noise, dtype=float)
        m = h.shape[0]
        if noise.ndim == 1 and noise.size != m or noise.ndim == 2 and noise.shape != (m, m):
            raise ConfigError(
                f"noise of shape {noise.shape} does not match {m} operator rows"
            )
        if not self.band_rows:
            object.__setattr__(self, "band_rows", (m,))
        elif sum(self.band_rows) != m:
            raise ConfigError("band_rows do not add up to the operator row count")
        object.__setattr__(self, "stacked", h)
        object.__setattr__(self, "noise", noise)

    @property
    def n_rows(self) -> int:
        return self.stacked.shape[0]

    @property
    def state_dim(self) -> int:
        return self.stacked.shape[1]

    def noise_matrix(self) -> np.ndarray:
        return np.diag(self.noise) if self.noise.ndim == 1 else np.array(self.noise)


def assemble_operator(
    obs: ModalityObservation,
    degradations: Sequence[SpatialDegradation],
    spectral: Sequence[SpectralMap],
    noise: Sequence[float],
    selection: QualitySelection,
):
    """Build ``(ModalityOperator, masked measurement)`` for one acquisition.

    All bands share ``selection``; ``noise[l]`` is the per-pixel variance of
    band ``l``, so each noise block is ``noise[l] * I`` on the retained rows.
    """
    L = obs.band_count
    if not (len(degradations) == len(spectral) == len(noise) == L):
        raise ConfigError(
            f"modality {obs.modality!r} has {L} bands but got {len(degradations)} "
            f"degradations, {len(spectral)} spectral maps, {len(noise)} noise levels"
        )
    n_high = degradations[0].shape[1]
    n_latent = spectral[0].n_bands
    D = selection.matrix()
    blocks, ys, variances = [], [], []
    for l in range(L):
        deg, c = degradations[l], spectral[l]
        if deg.shape[1] != n_high or c.n_bands != n_latent:
            raise ConfigError(f"band {l} of modality {obs.modality!r} has inconsistent dims")
        if deg.shape[0] != selection.n_pixels or obs.bands[l].size != deg.shape[0]:
            raise ConfigError(
                f"band {l} of modality {obs.modality!r}: measurement has "
                f"{obs.bands[l].size} pixels, degradation {deg.shape[0]} rows, "
                f"selection {selection.n_pixels} pixels"
            )
        if noise[l] <= 0:
            raise ConfigError(f"noise variance of band {l} must be positive")
        weights = sparse.csr_matrix(c.weights.reshape(1, -1))
        weights.eliminate_zeros()
        block = sparse.kron(weights, D @ deg.matrix, format="csr")
        blocks.append(block)
        ys.append(obs.bands[l][selection.retained])
        variances.append(np.full(selection.size, float(noise[l])))
    H = sparse.vstack(blocks, format="csr") if blocks else sparse.csr_matrix((0, n_high * n_latent))
    H.eliminate_zeros()
    op = ModalityOperator(
        stacked=H,
        noise=np.concatenate(variances),
        modality=obs.modality,
        time_index=obs.time_index,
        band_rows=tuple(selection.size for _ in range(L)),
    )
    return op, np.concatenate(ys)


def gain_calibrate(high_band, low_band, degradation: SpatialDegradation) -> float:
    """Least-squares gain ``g`` minimizing ``||low - g * degrade(high)||``.

    Non-finite entries of ``low_band`` (masked pixels) are ignored.
    """
    pred = degradation.apply(high_band)
    low = np.asarray(low_band, dtype=float).ravel()
    if pred.size != low.size:
        raise CalibrationError(
            f"degraded band has {pred.size} pixels, low-resolution band {low.size}"
        )
    ok = np.isfinite(low) & np.isfinite(pred)
    denom = float(pred[ok] @ pred[ok])
    if denom == 0.0:
        raise CalibrationError("degraded high-resolution band is identically zero")
    g = float(pred[ok] @ low[ok]) / denom
    if not g > 0:
        raise CalibrationError(f"calibrated gain {g:.6g} is not positive")
    return g
