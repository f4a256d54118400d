"""Data-driven, time-varying process-noise covariance from historical images.

The most recent high-resolution image is matched against an archive of past
high-resolution images; the pixelwise variance over the matched image and the
``window`` images after it becomes the diagonal of Q, floored at
``variance_floor`` so changes unseen in the archive remain possible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, EstimationError, MetricError

TIE_TOL = 1e-12


@dataclass(frozen=True)
class HistoricalArchive:
    """Past high-resolution images (band-major vectors), ordered by time."""

    times: tuple
    images: np.ndarray

    def __post_init__(self):
        times = tuple(int(t) for t in self.times)
        images = np.array(self.images, dtype=float)
        if images.ndim != 2:
            raise ConfigError("archive images must be a 2-D array (entries x state_dim)")
        if len(times) != images.shape[0]:
            raise ConfigError("archive has mismatched time and image counts")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("archive time indices must be strictly increasing")
        images.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "images", images)

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[int, np.ndarray]]) -> "HistoricalArchive":
        entries = sorted(entries, key=lambda e: e[0])
        if not entries:
            return cls((), np.zeros((0, 0)))
        sizes = {np.size(img) for _, img in entries}
        if len(sizes) != 1:
            raise ConfigError("archive images differ in size")
        return cls(
            tuple(t for t, _ in entries),
            np.stack([np.asarray(img, dtype=float).ravel() for _, img in entries]),
        )

    def __len__(self) -> int:
        return len(self.times)

    @property
    def state_dim(self) -> int:
        return self.images.shape[1]

    def restrict(self, index) -> "HistoricalArchive":
        return HistoricalArchive(self.times, self.images[:, np.asarray(index)])


@dataclass(frozen=True)
class QEstimatorConfig:
    window: int = 1
    variance_floor: float = 1e-5
    similarity: str = "cosine"

    def __post_init__(self):
        if int(self.window) < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if not self.variance_floor > 0:
            raise ConfigError(f"variance_floor must be > 0, got {self.variance_floor}")
        if self.similarity != "cosine":
            raise ConfigError(f"unsupported similarity metric {self.similarity!r}")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def most_similar_index(query, archive: HistoricalArchive) -> int:
    """Archive position with the highest cosine similarity; earliest on ties.

    Scores within ``TIE_TOL`` of the best count as ties, so rounding noise in
    the norms cannot reorder images that point in the same direction.
    """
    if len(archive) == 0:
        raise EstimationError("historical archive is empty")
    q = np.asarray(query, dtype=float).ravel()
    if q.size != archive.state_dim:
        raise ConfigError(
            f"query has {q.size} entries, archive images have {archive.state_dim}"
        )
    scores = np.array([cosine_similarity(q, img) for img in archive.images])
    return int(np.flatnonzero(scores >= scores.max() - TIE_TOL)[0])


def estimate_q(
    query, archive: HistoricalArchive, config: QEstimatorConfig, valid=None
) -> np.ndarray:
    """Diagonal of Q as a 1-D array.

    The window runs from the best match to ``window`` positions after it,
    inclusive, and is clamped at the end of the archive. A single-image
    window has zero variance, so it yields the floor. When ``valid`` is
    given, matching uses only those entries (e.g. unmasked pixels of the
    query) while the variance still covers every entry.
    """
    query = np.asarray(query, dtype=float).ravel()
    if valid is None:
        best = most_similar_index(query, archive)
    else:
        valid = np.asarray(valid, dtype=bool).ravel()
        best = most_similar_index(query[valid], archive.restrict(valid))
    stop = min(best + int(config.window), len(archive) - 1)
    block = archive.images[best:stop + 1]
    if block.shape[0] > 1:
        var = np.var(block, axis=0, ddof=1)
    else:
        var = np.zeros(archive.state_dim)
    return np.maximum(var, config.variance_floor)


def q_summary(q_diag) -> dict:
    q = np.asarray(q_diag, dtype=float)
    return {"min": float(q.min()), "median": float(np.median(q)), "max": float(q.max())}
