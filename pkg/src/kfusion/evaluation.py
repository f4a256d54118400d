"""Accuracy metrics and the water-mapping downstream task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClassificationError, ConfigError, MetricError


def nrmse(truth, estimate) -> float:
    """Root of ``||truth - estimate||^2 / ||truth||^2``."""
    s = np.asarray(truth, dtype=float).ravel()
    e = np.asarray(estimate, dtype=float).ravel()
    if s.size != e.size:
        raise MetricError(f"length mismatch: truth {s.size}, estimate {e.size}")
    ref = float(s @ s)
    if ref == 0.0:
        raise MetricError("NRMSE is undefined for an all-zero reference")
    d = s - e
    return float(np.sqrt((d @ d) / ref))


def pixels_from_image(image, n_bands: int) -> np.ndarray:
    """Band-major image vector -> (n_pixels, n_bands) array."""
    image = np.asarray(image, dtype=float).ravel()
    if image.size % n_bands:
        raise ConfigError(f"image of length {image.size} does not split into {n_bands} bands")
    return image.reshape(n_bands, -1).T


@dataclass(frozen=True)
class ClassifierModel:
    """Two centroids in band space; ``water`` indexes the water centroid."""

    centroids: np.ndarray
    water: int
    nir_band: int = -1

    def __post_init__(self):
        c = np.array(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[0] != 2:
            raise ClassificationError("expected exactly two centroids")
        if np.array_equal(c[0], c[1]):
            raise ClassificationError("centroids coincide")
        land = 1 - self.water
        if not c[self.water, self.nir_band] < c[land, self.nir_band]:
            raise ClassificationError("water centroid must be darker in NIR than land")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @classmethod
    def from_centroids(cls, centroids, nir_band: int = -1) -> "ClassifierModel":
        """Label by the NIR rule regardless of storage order."""
        c = np.asarray(centroids, dtype=float)
        water = int(np.argmin(c[:, nir_band]))
        if c[0, nir_band] == c[1, nir_band]:
            raise ClassificationError("centroids have equal NIR values; cannot label water")
        return cls(c, water, nir_band)

    @property
    def water_centroid(self) -> np.ndarray:
        return self.centroids[self.water]

    @property
    def land_centroid(self) -> np.ndarray:
        return self.centroids[1 - self.water]


def _farthest_pair(x: np.ndarray, chunk: int = 512) -> tuple[int, int]:
    best, pair = -1.0, (0, 0)
    sq = np.einsum("ij,ij->i", x, x)
    for start in range(0, len(x), chunk):
        blk = x[start:start + chunk]
        d = sq[start:start + chunk, None] + sq[None, :] - 2.0 * blk @ x.T
        flat = int(np.argmax(d))
        i, j = divmod(flat, len(x))
        if d[i, j] > best:
            best, pair = float(d[i, j]), (start + i, j)
    i, j = pair
    return (i, j) if i < j else (j, i)


def fit_two_means(
    pixels,
    seed: int = 0,
    nir_band: int = -1,
    max_iter: int = 300,
    max_candidates: int = 8192,
) -> ClassifierModel:
    """Lloyd's 2-means started from the two mutually farthest pixels.

    ``seed`` only matters when there are more than ``max_candidates`` pixels:
    the farthest-pair search then runs on a seeded subsample.
    """
    x = np.asarray(pixels, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2 or np.all(x == x[0]):
        raise ClassificationError("need at least two distinct pixels for 2-means")
    cand = np.arange(len(x))
    if len(x) > max_candidates:
        rng = np.random.default_rng(seed)
        cand = np.sort(rng.choice(len(x), size=max_candidates, replace=False))
    i, j = _farthest_pair(x[cand])
    centroids = x[[cand[i], cand[j]]].copy()

    labels = None
    for _ in range(max_iter):
        d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in (0, 1):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return ClassifierModel.from_centroids(centroids, nir_band=nir_band)


def classify(model: ClassifierModel, image, n_bands: int | None = None) -> np.ndarray:
    """Boolean water mask by nearest centroid; ties go to land."""
    nb = model.centroids.shape[1] if n_bands is None else n_bands
    if nb != model.centroids.shape[1]:
        raise ConfigError(f"image has {nb} bands, classifier {model.centroids.shape[1]}")
    x = pixels_from_image(image, nb)
    dw = ((x - model.water_centroid) ** 2).sum(axis=1)
    dl = ((x - model.land_centroid) ** 2).sum(axis=1)
    return dw < dl


def misclassification_rate(mask, reference_mask) -> float:
    a = np.asarray(mask, dtype=bool).ravel()
    b = np.asarray(reference_mask, dtype=bool).ravel()
    if a.size != b.size:
        raise MetricError(f"mask sizes differ: {a.size} vs {b.size}")
    return 100.0 * np.count_nonzero(a != b) / a.size


def water_fraction_series(masks) -> np.ndarray:
    return np.array([100.0 * np.count_nonzero(m) / np.size(m) for m in masks])
