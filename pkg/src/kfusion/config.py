"""YAML run configurations for the ``simulate`` and ``fuse`` commands.

Every violation is reported as a :class:`ConfigError` naming the offending
key. Paths are resolved relative to the config file; the environment
variables ``KFUSION_OBSERVATIONS`` and ``KFUSION_ARCHIVE`` override them.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .pipeline import DynamicsConfig, ModalitySetup
from .simulator import ModalitySpec, SceneConfig

ENV_OVERRIDES = {"observations": "KFUSION_OBSERVATIONS", "archive": "KFUSION_ARCHIVE"}


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: invalid YAML ({exc})") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _take(section: dict, allowed, prefix: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    unknown = set(section) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{prefix}{'.' if prefix else ''}{key}: unknown key")
    return section


def _per_band(value, bands: int, key: str) -> tuple:
    if isinstance(value, (int, float)):
        return (float(value),) * bands
    try:
        vals = tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected a number or a list of numbers") from exc
    if len(vals) != bands:
        raise ConfigError(f"{key}: expected {bands} values, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class RunConfig:
    modalities: tuple
    dynamics: DynamicsConfig
    p0: float = 1e-10
    init_step: int | None = None
    patch_size: int | None = None
    mode: str = "filter"
    jobs: int | None = None
    observations: Path = Path("manifest.csv")
    archive: Path | None = None
    latent_bands: int | None = None

    @property
    def high_resolution(self) -> ModalitySetup:
        return next(m for m in self.modalities if m.high_resolution)

    @property
    def max_scale(self) -> int:
        return max(m.scale for m in self.modalities)


_MODALITY_KEYS = ("name", "bands", "scale", "noise_variance", "gains", "accepted_codes",
                  "high_resolution", "latent_bands")


def _modality(raw: dict, i: int) -> ModalitySetup:
    prefix = f"modalities[{i}]"
    _take(raw, _MODALITY_KEYS, prefix)
    for key in ("name", "bands", "noise_variance"):
        if key not in raw:
            raise ConfigError(f"{prefix}.{key}: required")
    try:
        bands = int(raw["bands"])
        scale = int(raw.get("scale", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}.bands/scale: expected integers") from exc
    if bands < 1:
        raise ConfigError(f"{prefix}.bands: must be >= 1")
    gains = raw.get("gains", "calibrate")
    if gains == "calibrate":
        gains = None
    else:
        gains = _per_band(gains, bands, f"{prefix}.gains")
    noise = _per_band(raw["noise_variance"], bands, f"{prefix}.noise_variance")
    if any(v <= 0 for v in noise):
        raise ConfigError(f"{prefix}.noise_variance: all variances must be > 0")
    if gains is not None and any(g <= 0 for g in gains):
        raise ConfigError(f"{prefix}.gains: gains must be > 0")
    return ModalitySetup(
        name=str(raw["name"]),
        bands=bands,
        scale=scale,
        noise_variance=noise,
        gains=gains,
        accepted_codes=frozenset(int(c) for c in raw.get("accepted_codes", [0])),
        high_resolution=bool(raw.get("high_resolution", False)),
        latent_bands=raw.get("latent_bands"),
    )


def parse_run_config(data: dict, base: Path = Path("."), environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    _take(data, ("modalities", "dynamics", "initialization", "patch_size", "mode", "jobs",
                 "paths", "latent_bands"), "")
    mods = data.get("modalities")
    if not isinstance(mods, list) or not mods:
        raise ConfigError("modalities: required non-empty list")
    setups = tuple(_modality(m, i) for i, m in enumerate(mods))
    names = [m.name for m in setups]
    if len(set(names)) != len(names):
        raise ConfigError("modalities: duplicate modality names")
    if sum(m.high_resolution for m in setups) != 1:
        raise ConfigError("modalities: exactly one modality must set high_resolution: true")

    dyn_raw = _take(data.get("dynamics", {}), ("q_mode", "xi", "window", "variance_floor"),
                    "dynamics")
    try:
        dynamics = DynamicsConfig(
            q_mode=dyn_raw.get("q_mode", "data_driven"),
            xi=float(dyn_raw.get("xi", 1e-2)),
            window=int(dyn_raw.get("window", 1)),
            variance_floor=float(dyn_raw.get("variance_floor", 1e-5)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"dynamics: {exc}") from exc

    init = _take(data.get("initialization", {}), ("p0", "step"), "initialization")
    p0 = float(init.get("p0", 1e-10))
    if not p0 > 0:
        raise ConfigError("initialization.p0: must be > 0")

    mode = data.get("mode", "filter")
    if mode not in ("filter", "smooth"):
        raise ConfigError(f"mode: must be 'filter' or 'smooth', got {mode!r}")
    patch = data.get("patch_size")
    if patch is not None and (not isinstance(patch, int) or patch < 1):
        raise ConfigError("patch_size: must be a positive integer")
    jobs = data.get("jobs")
    if jobs is not None and (not isinstance(jobs, int) or jobs < 1):
        raise ConfigError("jobs: must be a positive integer")

    paths = _take(data.get("paths", {}), ("observations", "archive"), "paths")
    resolved = {}
    for key in ("observations", "archive"):
        value = environ.get(ENV_OVERRIDES[key]) or paths.get(key)
        resolved[key] = None if value is None else (base / str(value))
    if resolved["observations"] is None:
        raise ConfigError("paths.observations: required")
    if dynamics.q_mode == "data_driven" and resolved["archive"] is None:
        raise ConfigError("paths.archive: required when dynamics.q_mode is data_driven")

    return RunConfig(
        modalities=setups,
        dynamics=dynamics,
        p0=p0,
        init_step=init.get("step"),
        patch_size=patch,
        mode=mode,
        jobs=jobs,
        observations=resolved["observations"],
        archive=resolved["archive"],
        latent_bands=data.get("latent_bands"),
    )


def load_run_config(path, environ=None) -> RunConfig:
    path = Path(path)
    return parse_run_config(load_yaml(path), base=path.parent, environ=environ)


_SCENE_KEYS = tuple(f.name for f in dataclasses.fields(SceneConfig))
_SPEC_KEYS = tuple(f.name for f in dataclasses.fields(ModalitySpec))


def parse_scene_config(data: dict) -> SceneConfig:
    scene = _take(data.get("scene", data), _SCENE_KEYS, "scene" if "scene" in data else "")
    kwargs = dict(scene)
    if "modalities" in kwargs:
        mods = kwargs["modalities"]
        if not isinstance(mods, list):
            raise ConfigError("scene.modalities: expected a list")
        for i, m in enumerate(mods):
            _take(m, _SPEC_KEYS, f"scene.modalities[{i}]")
        kwargs["modalities"] = tuple(ModalitySpec(**m) for m in mods)
    try:
        return SceneConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"scene: {exc}") from exc


def scene_to_dict(config: SceneConfig) -> dict:
    out = dataclasses.asdict(config)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    out["modalities"] = [
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in m.items()}
        for m in out["modalities"]
    ]
    return out
