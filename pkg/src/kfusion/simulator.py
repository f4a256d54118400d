"""Synthetic two-class (water/land) scenes with a moving shoreline.

A fixed "elevation" field (distance from a lake centre, warped by a smooth
random angular profile) defines the shoreline; water covers every pixel whose
elevation is below the current level, and the level moves by ``rate`` pixels
per step, so the water region shrinks (or grows) monotonically. Each pixel
has a static per-class texture, so a pixel only changes when it switches
class.

Random streams are derived from one ``numpy.random.SeedSequence`` so a seed
fixes the whole scene, its observations and its historical archive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import sparse

from .errors import ConfigError
from .observation import ModalityObservation, ModalityOperator, build_uniform_blur_decimate
from .q_estimator import HistoricalArchive
from .state_model import DynamicalModel, GaussianState, filter_sequence

GOOD, FLAGGED = 0, 1
ARCHIVE_EPOCH = -1000  # archive frame for scene step t is stored at ARCHIVE_EPOCH + t


@dataclass(frozen=True)
class ModalitySpec:
    """How a simulated instrument observes the scene.

    ``cadence`` is ``"all"``, ``"ends"`` (first and last step) or explicit steps.
    """

    name: str
    scale: int = 1
    noise_std: float = 0.0
    gains: tuple = (1.0, 1.0)
    cadence: Union[str, tuple] = "all"
    outlier_rate: float = 0.0
    high_resolution: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
        if not isinstance(self.cadence, str):
            object.__setattr__(self, "cadence", tuple(int(s) for s in self.cadence))
        elif self.cadence not in ("all", "ends"):
            raise ConfigError(f"cadence must be 'all', 'ends' or a list of steps, got {self.cadence!r}")
        if self.noise_std < 0 or not 0 <= self.outlier_rate <= 1:
            raise ConfigError(f"modality {self.name!r}: invalid noise_std or outlier_rate")
        if any(g <= 0 for g in self.gains):
            raise ConfigError(f"modality {self.name!r}: gains must be positive")

    def steps(self, n_steps: int) -> tuple[int, ...]:
        if self.cadence == "all":
            return tuple(range(n_steps + 1))
        if self.cadence == "ends":
            return tuple(sorted({0, n_steps}))
        return tuple(s for s in self.cadence if 0 <= s <= n_steps)


def default_modalities() -> tuple[ModalitySpec, ...]:
    return (
        ModalitySpec("landsat", scale=1, noise_std=1e-5, gains=(1.0, 1.0),
                     cadence="ends", high_resolution=True),
        ModalitySpec("modis", scale=9, noise_std=1e-2, gains=(0.95, 1.05),
                     cadence="all", outlier_rate=0.05),
    )


@dataclass(frozen=True)
class SceneConfig:
    rows: int = 81
    cols: int = 81
    bands: int = 2
    steps: int = 15
    seed: int = 0
    water_means: tuple = (0.05, 0.03)
    land_means: tuple = (0.15, 0.35)
    sigma_scene: float = 0.01
    sigma_temporal: float = 0.0
    rate: float = 1.2
    direction: str = "shrink"
    initial_radius: float = 0.42
    roughness: float = 0.15
    modalities: tuple = field(default_factory=default_modalities)
    # scene steps at which the past season is sampled for the archive
    archive_steps: tuple = (-8, -1, 16, 21, 27)
    heldout: tuple = (4, 8, 11)

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(
            m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities
        ))
        for name in ("water_means", "land_means", "archive_steps", "heldout"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.rows < 1 or self.cols < 1 or self.bands < 1 or self.steps < 0:
            raise ConfigError("rows, cols, bands must be positive and steps >= 0")
        if len(self.water_means) != self.bands or len(self.land_means) != self.bands:
            raise ConfigError("water_means and land_means need one value per band")
        means = np.array(self.water_means + self.land_means)
        if np.any(means < 0) or np.any(means > 1):
            raise ConfigError("class reflectance means must lie in [0, 1]")
        if self.rate < 0 or self.sigma_scene < 0 or self.sigma_temporal < 0:
            raise ConfigError("rate and sigma values must be >= 0")
        gap = np.abs(np.subtract(self.land_means, self.water_means))
        if np.any(gap < 4 * self.sigma_scene):
            raise ConfigError("class means must be separated by at least 4 sigma_scene in every band")
        if self.direction not in ("shrink", "grow"):
            raise ConfigError(f"direction must be 'shrink' or 'grow', got {self.direction!r}")
        if sum(m.high_resolution for m in self.modalities) != 1:
            raise ConfigError("exactly one modality must be high_resolution")
        for m in self.modalities:
            if len(m.gains) != self.bands:
                raise ConfigError(f"modality {m.name!r} needs {self.bands} gains")
            if self.rows % m.scale or self.cols % m.scale:
                raise ConfigError(f"modality {m.name!r}: scale {m.scale} does not divide the image")

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols

    @property
    def high_resolution(self) -> ModalitySpec:
        return next(m for m in self.modalities if m.high_resolution)


@dataclass(frozen=True)
class Scene:
    """Ground truth: frames are band-major vectors, shape (steps + 1, bands * pixels)."""

    config: SceneConfig
    elevation: np.ndarray
    water_texture: np.ndarray  # (bands, pixels)
    land_texture: np.ndarray
    frames: np.ndarray
    water_masks: np.ndarray  # (steps + 1, pixels)

    def level(self, step: float) -> float:
        cfg = self.config
        r0 = cfg.initial_radius * min(cfg.rows, cfg.cols)
        sign = -1.0 if cfg.direction == "shrink" else 1.0
        return r0 + sign * cfg.rate * step

    def mask_at(self, step: float) -> np.ndarray:
        return self.elevation < self.level(step)

    def render(self, mask: np.ndarray) -> np.ndarray:
        return np.where(mask[None, :], self.water_texture, self.land_texture).ravel()


def _streams(seed: int):
    scene, obs, archive = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(scene), np.random.default_rng(obs),
            np.random.default_rng(archive))


def generate_scene(config: SceneConfig) -> Scene:
    rng, _, _ = _streams(config.seed)
    rows, cols, n = config.rows, config.cols, config.n_pixels
    cy = (rows - 1) / 2 + rng.uniform(-0.05, 0.05) * rows
    cx = (cols - 1) / 2 + rng.uniform(-0.05, 0.05) * cols
    yy, xx = np.divmod(np.arange(n), cols)
    dist = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    harmonics = np.arange(2, 5)
    amps = rng.uniform(0.5, 1.0, harmonics.size) / harmonics
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    wobble = (amps[:, None] * np.sin(harmonics[:, None] * theta + phases[:, None])).sum(0)
    wobble /= amps.sum()
    elevation = dist / (1.0 + config.roughness * wobble)

    def texture(means):
        t = np.asarray(means)[:, None] + config.sigma_scene * rng.standard_normal((config.bands, n))
        return np.clip(t, 0.0, 1.0)

    water_tex, land_tex = texture(config.water_means), texture(config.land_means)
    proto = Scene(config, elevation, water_tex, land_tex, np.zeros((0, 0)), np.zeros((0, 0)))
    masks = np.stack([proto.mask_at(k) for k in range(config.steps + 1)])
    frames = np.stack([proto.render(m) for m in masks])
    if config.sigma_temporal > 0:
        frames = np.clip(frames + config.sigma_temporal * rng.standard_normal(frames.shape), 0, 1)
    for a in (elevation, water_tex, land_tex, frames, masks):
        a.setflags(write=False)
    return Scene(config, elevation, water_tex, land_tex, frames, masks)


def observe(
    frame,
    spec: ModalitySpec,
    dims: tuple[int, int],
    rng: np.random.Generator,
    time_index: int = 0,
) -> ModalityObservation:
    """Degrade, scale and add noise to each band; flag a fraction of pixels.

    Flagged pixels carry NaN and quality code ``FLAGGED``.
    """
    frame = np.asarray(frame, dtype=float).ravel()
    n_bands = len(spec.gains)
    deg = build_uniform_blur_decimate(dims, spec.scale)
    n_low = deg.shape[0]
    bands = []
    for b, gain in enumerate(spec.gains):
        band = frame[b * dims[0] * dims[1]:(b + 1) * dims[0] * dims[1]]
        y = gain * deg.apply(band)
        if spec.noise_std > 0:
            y = y + spec.noise_std * rng.standard_normal(n_low)
        bands.append(y)
    codes = np.full(n_low, GOOD, dtype=np.int64)
    n_bad = int(round(spec.outlier_rate * n_low))
    if n_bad:
        codes[rng.choice(n_low, size=n_bad, replace=False)] = FLAGGED
    for y in bands:
        y[codes != GOOD] = np.nan
    if len(bands) != n_bands:
        raise ConfigError("band count mismatch")
    return ModalityObservation(tuple(bands), codes, time_index, spec.name)


@dataclass
class SimulationData:
    scene: Scene
    observations: dict  # step -> list[ModalityObservation], modality order of the config
    archive: HistoricalArchive


def simulate(config: SceneConfig) -> SimulationData:
    """Scene, its per-step observations and a matching historical archive."""
    scene = generate_scene(config)
    _, obs_rng, arch_rng = _streams(config.seed)
    dims = (config.rows, config.cols)
    obs: dict[int, list] = {}
    for k in range(config.steps + 1):
        for spec in config.modalities:
            if k in spec.steps(config.steps):
                obs.setdefault(k, []).append(observe(scene.frames[k], spec, dims, obs_rng, k))

    hr = config.high_resolution
    images = []
    for t in config.archive_steps:
        img = scene.render(scene.mask_at(t))
        if config.sigma_temporal > 0:
            img = np.clip(img + config.sigma_temporal * arch_rng.standard_normal(img.size), 0, 1)
        gains = np.repeat(hr.gains, config.n_pixels)
        img = gains * img + hr.noise_std * arch_rng.standard_normal(img.size)
        images.append(img)
    times = tuple(ARCHIVE_EPOCH + int(t) for t in config.archive_steps)
    archive = HistoricalArchive(times, np.array(images).reshape(len(times), -1))
    return SimulationData(scene, obs, archive)


def coverage_monte_carlo(
    runs: int = 200,
    steps: int = 10,
    q: float = 0.01,
    r: float = 0.02,
    p0: float = 0.05,
    observe_prob: float = 0.7,
    seed: int = 0,
    z: float = 1.959963984540054,
) -> float:
    """Empirical coverage of the filter's 95% intervals on a one-pixel patch.

    Each run draws a truth trajectory from the random-walk model itself,
    observes it with probability ``observe_prob`` per step and counts how
    often the truth falls inside ``mean +/- z * std`` over all steps.
    """
    rng = np.random.default_rng(seed)
    model = DynamicalModel.random_walk(q, dim=1)
    H = sparse.csr_matrix(np.ones((1, 1)))
    hits = total = 0
    for _ in range(runs):
        m0 = rng.uniform(0, 1)
        s = m0 + np.sqrt(p0) * rng.standard_normal()
        truth, obs = [], []
        for k in range(1, steps + 1):
            s = s + np.sqrt(q) * rng.standard_normal()
            truth.append(s)
            step = []
            if rng.uniform() < observe_prob:
                y = s + np.sqrt(r) * rng.standard_normal()
                step.append((ModalityOperator(H, np.array([r]), "pixel", k), np.array([y])))
            obs.append(step)
        init = GaussianState([m0], [[p0]], time_index=0, kind="posterior")
        trace = filter_sequence(init, [model] * steps, obs)
        for st, s_true in zip(trace.posteriors[1:], truth):
            hits += abs(s_true - st.mean[0]) <= z * np.sqrt(st.covariance[0, 0])
            total += 1
    return hits / total
