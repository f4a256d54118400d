"""Turn per-step modality observations into a patched filtering run."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .observation import (
    ModalityObservation,
    SpectralMap,
    assemble_operator,
    build_uniform_blur_decimate,
    gain_calibrate,
    selection_from_quality,
)
from .patching import FusionResult, PatchGrid, fuse_patched
from .q_estimator import (
    HistoricalArchive,
    QEstimatorConfig,
    estimate_q,
    most_similar_index,
    q_summary,
)
from .state_model import DynamicalModel


@dataclass(frozen=True)
class ModalitySetup:
    """Measurement model of one modality as used by the filter.

    ``gains=None`` means calibrate against the initialization image.
    ``latent_bands[l]`` is the latent band observed by measured band ``l``.
    """

    name: str
    bands: int
    scale: int = 1
    noise_variance: tuple = ()
    gains: tuple | None = None
    accepted_codes: frozenset = frozenset({0})
    high_resolution: bool = False
    latent_bands: tuple | None = None

    def __post_init__(self):
        nv = tuple(float(v) for v in self.noise_variance)
        if len(nv) != self.bands:
            raise ConfigError(f"modalities.{self.name}.noise_variance needs {self.bands} values")
        if any(v <= 0 for v in nv):
            raise ConfigError(f"modalities.{self.name}.noise_variance must be > 0")
        object.__setattr__(self, "noise_variance", nv)
        if self.gains is not None:
            g = tuple(float(x) for x in self.gains)
            if len(g) != self.bands or any(x <= 0 for x in g):
                raise ConfigError(f"modalities.{self.name}.gains needs {self.bands} positive values")
            object.__setattr__(self, "gains", g)
        lb = tuple(range(self.bands)) if self.latent_bands is None else tuple(self.latent_bands)
        object.__setattr__(self, "latent_bands", lb)
        object.__setattr__(self, "accepted_codes", frozenset(int(c) for c in self.accepted_codes))
        if int(self.scale) < 1:
            raise ConfigError(f"modalities.{self.name}.scale must be >= 1")


@dataclass(frozen=True)
class DynamicsConfig:
    q_mode: str = "data_driven"
    xi: float = 1e-2
    window: int = 1
    variance_floor: float = 1e-5

    def __post_init__(self):
        if self.q_mode not in ("constant", "data_driven"):
            raise ConfigError(f"dynamics.q_mode must be 'constant' or 'data_driven', got {self.q_mode!r}")
        if self.q_mode == "constant" and not self.xi > 0:
            raise ConfigError("dynamics.xi must be > 0")
        if self.q_mode == "data_driven":
            self.estimator_config()

    def estimator_config(self) -> QEstimatorConfig:
        return QEstimatorConfig(window=int(self.window), variance_floor=float(self.variance_floor))


@dataclass
class FusionPlan:
    t0: int
    dims: tuple
    n_latent: int
    initial_mean: np.ndarray
    p0: float
    observations: list  # per step after t0: list of (ModalityOperator, y)
    models: list
    log: list = field(default_factory=list)
    gains: dict = field(default_factory=dict)


def _high_res(setups: Sequence[ModalitySetup]) -> ModalitySetup:
    hr = [s for s in setups if s.high_resolution]
    if len(hr) != 1:
        raise ConfigError("modalities: exactly one modality must set high_resolution")
    return hr[0]


def image_from_high_res(obs: ModalityObservation, setup: ModalitySetup, n_latent: int) -> np.ndarray:
    """Latent-layout image (NaN where masked) implied by a high-resolution acquisition."""
    gains = setup.gains or (1.0,) * setup.bands
    n = obs.bands[0].size
    img = np.full(n_latent * n, np.nan)
    ok = np.isin(obs.quality_codes, sorted(setup.accepted_codes))
    for l, band in enumerate(obs.bands):
        lb = setup.latent_bands[l]
        img[lb * n:(lb + 1) * n] = np.where(ok, band / gains[l], np.nan)
    return img


def calibrate_gains(setups, init_obs: Mapping[str, ModalityObservation], init_image, dims) -> dict:
    n = dims[0] * dims[1]
    gains = {}
    for s in setups:
        if s.gains is not None:
            gains[s.name] = s.gains
            continue
        if s.high_resolution:
            gains[s.name] = (1.0,) * s.bands
            continue
        if s.name not in init_obs:
            raise ConfigError(
                f"modalities.{s.name}.gains: calibration needs an observation at the initialization step"
            )
        obs = init_obs[s.name]
        deg = build_uniform_blur_decimate(dims, s.scale)
        ok = np.isin(obs.quality_codes, sorted(s.accepted_codes))
        g = []
        for l, band in enumerate(obs.bands):
            lb = s.latent_bands[l]
            g.append(gain_calibrate(init_image[lb * n:(lb + 1) * n], np.where(ok, band, np.nan), deg))
        gains[s.name] = tuple(g)
    return gains


def build_operator(obs: ModalityObservation, setup: ModalitySetup, gains, dims, n_latent):
    deg = build_uniform_blur_decimate(dims, setup.scale)
    if obs.band_count != setup.bands:
        raise ConfigError(
            f"modality {setup.name!r} at step {obs.time_index}: expected {setup.bands} bands, "
            f"got {obs.band_count}"
        )
    spectral = [
        SpectralMap.one_to_one(n_latent, setup.latent_bands[l], gains[l], setup.name)
        for l in range(setup.bands)
    ]
    selection = selection_from_quality(obs.quality_codes, setup.accepted_codes)
    return assemble_operator(obs, [deg] * setup.bands, spectral, setup.noise_variance, selection)


def plan_fusion(
    observations: Mapping[int, Sequence[ModalityObservation]],
    setups: Sequence[ModalitySetup],
    dims: tuple[int, int],
    n_latent: int,
    dynamics: DynamicsConfig,
    archive: HistoricalArchive | None = None,
    p0: float = 1e-10,
    t0: int | None = None,
    t_end: int | None = None,
    exclude: Mapping[str, Sequence[int]] | None = None,
) -> FusionPlan:
    """Assemble operators and per-step dynamics for steps ``t0 + 1 .. t_end``.

    The initial state is the high-resolution acquisition at ``t0``. ``exclude``
    maps modality names to steps whose acquisitions are withheld from the
    filter (held-out ground truth).
    """
    by_name = {s.name: s for s in setups}
    hr = _high_res(setups)
    steps = sorted(observations)
    if not steps:
        raise ConfigError("no observations")
    t0 = steps[0] if t0 is None else t0
    t_end = steps[-1] if t_end is None else t_end
    exclude = {k: set(v) for k, v in (exclude or {}).items()}

    def usable(step):
        out = []
        for o in observations.get(step, ()):
            if o.modality not in by_name:
                raise ConfigError(f"observation of unknown modality {o.modality!r} at step {step}")
            if step in exclude.get(o.modality, ()):
                continue
            out.append(o)
        return out

    init = {o.modality: o for o in usable(t0)}
    if hr.name not in init:
        raise ConfigError(f"initialization step {t0} has no {hr.name!r} acquisition")
    init_image = image_from_high_res(init[hr.name], hr, n_latent)
    if not np.all(np.isfinite(init_image)):
        raise ConfigError(f"initialization image at step {t0} has masked pixels")
    gains = calibrate_gains(setups, init, init_image, dims)

    if dynamics.q_mode == "data_driven":
        if archive is None or len(archive) == 0:
            raise ConfigError("paths.archive: data-driven Q needs a non-empty historical archive")
        if archive.state_dim != init_image.size:
            raise ConfigError(
                f"paths.archive: archive images have {archive.state_dim} entries, state has {init_image.size}"
            )
        qcfg = dynamics.estimator_config()

    plan_obs, models, log = [], [], []
    query_step, query = t0, init_image
    q_cache: dict[int, np.ndarray] = {}
    D = init_image.size
    for k in range(t0 + 1, t_end + 1):
        # transition into k uses the latest high-resolution image observed up to k - 1
        if dynamics.q_mode == "constant":
            q = np.full(D, dynamics.xi)
            match = None
        else:
            if query_step not in q_cache:
                valid = np.isfinite(query)
                q_cache[query_step] = (
                    estimate_q(query, archive, qcfg, valid=valid),
                    most_similar_index(query[valid], archive.restrict(valid)),
                )
            q, match = q_cache[query_step]
        models.append(DynamicalModel(process_noise=q))

        step_obs, entry = [], {"step": k, "modalities": [], "retained": [], "q": q_summary(q),
                               "archive_match": None if match is None else archive.times[match]}
        for o in usable(k):
            s = by_name[o.modality]
            op, y = build_operator(o, s, gains[s.name], dims, n_latent)
            step_obs.append((op, y))
            entry["modalities"].append(s.name)
            entry["retained"].append(op.n_rows // s.bands)
            if s.high_resolution:
                query_step, query = k, image_from_high_res(o, s, n_latent)
        plan_obs.append(step_obs)
        log.append(entry)

    return FusionPlan(t0, tuple(dims), n_latent, init_image, p0, plan_obs, models, log, gains)


def execute(plan: FusionPlan, grid: PatchGrid, mode: str = "filter", jobs: int = 1) -> FusionResult:
    return fuse_patched(
        plan.initial_mean, plan.p0, plan.observations, plan.models, grid,
        mode=mode, jobs=jobs, t0=plan.t0,
    )
