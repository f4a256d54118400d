"""Command-line entry point: ``simulate``, ``fuse`` and ``eval``.

Exit codes: 0 success, 2 configuration error, 3 estimation error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import load_run_config, load_yaml, parse_scene_config, scene_to_dict
from .errors import (
    CalibrationError,
    ClassificationError,
    ConfigError,
    EstimationError,
    FusionError,
    MetricError,
    RasterIOError,
)
from .evaluation import (
    classify,
    fit_two_means,
    misclassification_rate,
    nrmse,
    pixels_from_image,
)
from .observation import ModalityObservation
from .patching import partition
from .pipeline import execute, plan_fusion
from .q_estimator import HistoricalArchive
from .rasterfile import read_manifest, read_raster, write_manifest, write_raster
from .simulator import simulate

log = logging.getLogger("kfusion")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_IO = 0, 2, 3, 4
FRAME = "frame_{:04d}.mrf"
VARIANCE = "var_{:04d}.mrf"
METRIC_FIELDS = ("step", "date-tag", "nrmse", "miscls", "water_pct")


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- simulate

def cmd_simulate(config_path, out_dir) -> None:
    scene = parse_scene_config(load_yaml(config_path))
    data = simulate(scene)
    out = Path(out_dir)
    dims = (scene.rows, scene.cols)

    truth_rows = []
    for k, frame in enumerate(data.scene.frames):
        name = Path("truth") / FRAME.format(k)
        write_raster(out / name, frame.reshape(scene.bands, *dims))
        truth_rows.append((k, "truth", name.relative_to("truth"), None))
    write_manifest(out / "truth" / "manifest.csv", truth_rows)
    heldout = [r for r in truth_rows if r[0] in scene.heldout]
    write_manifest(out / "truth" / "heldout.csv",
                   [(0, "reference", Path(FRAME.format(0)), None)] + heldout)
    with open(out / "truth" / "water_fraction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "water_pct"))
        for k, m in enumerate(data.scene.water_masks):
            w.writerow((k, _fmt(100.0 * np.count_nonzero(m) / m.size)))

    obs_rows = []
    for k in sorted(data.observations):
        for o in data.observations[k]:
            spec = next(m for m in scene.modalities if m.name == o.modality)
            if spec.high_resolution and k in scene.heldout:
                continue  # held-out frames are scored, never observed
            cdims = (scene.rows // spec.scale, scene.cols // spec.scale)
            raster = Path("obs") / f"{o.modality}_{k:04d}.mrf"
            quality = Path("obs") / f"{o.modality}_{k:04d}_qa.mrf"
            write_raster(out / raster, np.stack([b.reshape(cdims) for b in o.bands]))
            write_raster(out / quality, o.quality_codes.reshape(cdims).astype(np.float32))
            obs_rows.append((k, o.modality, raster, quality))
    write_manifest(out / "manifest.csv", obs_rows)

    hr = scene.high_resolution
    arch_rows = []
    for i, (t, img) in enumerate(zip(data.archive.times, data.archive.images)):
        raster = Path("archive") / f"archive_{i:02d}.mrf"
        write_raster(out / raster, img.reshape(scene.bands, *dims))
        arch_rows.append((t, hr.name, raster, None))
    write_manifest(out / "archive.csv", arch_rows)

    with open(out / "scene.yaml", "w") as fh:
        yaml.safe_dump({"scene": scene_to_dict(scene)}, fh, sort_keys=True)
    with open(out / "fuse.yaml", "w") as fh:
        yaml.safe_dump(default_fuse_config(scene), fh, sort_keys=False)
    log.info("simulated %d frames into %s", scene.steps + 1, out)


def default_fuse_config(scene) -> dict:
    """Ready-to-run fuse config for a simulated tree."""
    scale = max(m.scale for m in scene.modalities)
    mods = []
    for m in scene.modalities:
        mods.append({
            "name": m.name,
            "bands": scene.bands,
            "scale": m.scale,
            "noise_variance": 1e-10 if m.high_resolution else 1e-4,
            "gains": list(m.gains) if m.high_resolution else "calibrate",
            "accepted_codes": [0],
            "high_resolution": m.high_resolution,
        })
    patch = 3 * scale if scene.rows % (3 * scale) == 0 and scene.cols % (3 * scale) == 0 else scale
    return {
        "modalities": mods,
        "dynamics": {"q_mode": "data_driven", "xi": 1e-2, "window": 1, "variance_floor": 1e-5},
        "initialization": {"p0": 1e-10},
        "patch_size": patch,
        "mode": "smooth",
        "paths": {"observations": "manifest.csv", "archive": "archive.csv"},
    }


# -------------------------------------------------------------------- fuse

def _load_observations(cfg):
    by_name = {m.name: m for m in cfg.modalities}
    rows = read_manifest(cfg.observations)
    if not rows:
        raise ConfigError(f"paths.observations: {cfg.observations} lists no acquisitions")
    hr = cfg.high_resolution
    hr_dims = None
    obs: dict[int, list] = {}
    for r in rows:
        if r.modality not in by_name:
            raise ConfigError(f"{cfg.observations}: step {r.step} uses unknown modality {r.modality!r}")
        setup = by_name[r.modality]
        data = read_raster(r.raster_path)
        if data.shape[0] != setup.bands:
            raise ConfigError(
                f"modalities.{setup.name}.bands: {r.raster_path} has {data.shape[0]} bands"
            )
        if r.quality_path is not None:
            codes = read_raster(r.quality_path)[0]
            if codes.shape != data.shape[1:]:
                raise RasterIOError(f"{r.quality_path}: quality raster shape {codes.shape} differs from data")
            codes = np.where(np.isfinite(codes), codes, -1).astype(np.int64)
        else:
            codes = np.zeros(data.shape[1:], dtype=np.int64)
        if setup is hr:
            hr_dims = hr_dims or data.shape[1:]
        obs.setdefault(r.step, []).append(
            ModalityObservation(tuple(b.astype(float).ravel() for b in data), codes.ravel(),
                                r.step, r.modality)
        )
    if hr_dims is None:
        raise ConfigError(f"paths.observations: no {hr.name!r} acquisition to initialize from")
    for step, items in obs.items():
        for o in items:
            s = by_name[o.modality]
            expect = (hr_dims[0] // s.scale) * (hr_dims[1] // s.scale)
            if hr_dims[0] % s.scale or hr_dims[1] % s.scale or o.bands[0].size != expect:
                raise ConfigError(
                    f"modalities.{s.name}.scale: step {step} raster does not match "
                    f"{hr_dims[0]}x{hr_dims[1]} / {s.scale}"
                )
    return obs, tuple(int(d) for d in hr_dims)


def _load_archive(path, state_dim) -> HistoricalArchive:
    entries = []
    for r in read_manifest(path):
        img = read_raster(r.raster_path).astype(float).ravel()
        if img.size != state_dim:
            raise ConfigError(f"paths.archive: {r.raster_path} has {img.size} samples, expected {state_dim}")
        entries.append((r.step, img))
    return HistoricalArchive.from_entries(entries)


def cmd_fuse(config_path, out_dir, jobs=None) -> None:
    cfg = load_run_config(config_path)
    obs, dims = _load_observations(cfg)
    n_latent = cfg.latent_bands or cfg.high_resolution.bands
    scale = cfg.max_scale
    patch = cfg.patch_size
    if patch is None:
        patch = 3 * scale if dims[0] % (3 * scale) == 0 and dims[1] % (3 * scale) == 0 else scale
    try:
        grid = partition(dims, patch, scale)
    except ConfigError as exc:
        raise ConfigError(f"patch_size: {exc}") from exc
    archive = None
    if cfg.dynamics.q_mode == "data_driven":
        archive = _load_archive(cfg.archive, n_latent * dims[0] * dims[1])
    plan = plan_fusion(obs, cfg.modalities, dims, n_latent, cfg.dynamics, archive=archive,
                       p0=cfg.p0, t0=cfg.init_step)
    result = execute(plan, grid, mode=cfg.mode, jobs=jobs if jobs is not None else cfg.jobs)

    # all writes happen after every patch has finished
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [("filtered", result.filtered_mean, result.filtered_var)]
    if cfg.mode == "smooth":
        outputs.append(("smoothed", result.smoothed_mean, result.smoothed_var))
    for sub, means, variances in outputs:
        rows = []
        for k, mean, var in zip(result.time_indices, means, variances):
            write_raster(out / sub / FRAME.format(k), mean.reshape(n_latent, *dims))
            write_raster(out / sub / VARIANCE.format(k), var.reshape(n_latent, *dims))
            rows.append((int(k), sub, Path(FRAME.format(k)), None))
        write_manifest(out / sub / "manifest.csv", rows)

    with open(out / "fuse.log", "w") as fh:
        fh.write(f"mode={cfg.mode} q_mode={cfg.dynamics.q_mode} patch={patch} "
                 f"patches={len(grid)} t0={plan.t0} dims={dims[0]}x{dims[1]} bands={n_latent}\n")
        for name, g in plan.gains.items():
            fh.write(f"gains {name} " + " ".join(_fmt(x) for x in g) + "\n")
        for e in plan.log:
            q = e["q"]
            mods = ",".join(f"{m}:{n}" for m, n in zip(e["modalities"], e["retained"])) or "-"
            fh.write(
                f"step={e['step']} modalities={mods} q_min={_fmt(q['min'])} "
                f"q_median={_fmt(q['median'])} q_max={_fmt(q['max'])} "
                f"archive_match={e['archive_match']}\n"
            )
    log.info("fused %d steps into %s", len(result.time_indices), out)


# -------------------------------------------------------------------- eval

def cmd_eval(truth_manifest, est_dir, out_csv, reference=None, n_bands=None) -> list[dict]:
    rows = read_manifest(truth_manifest)
    if not rows:
        raise RasterIOError(f"{truth_manifest}: no ground-truth rows")
    ref_rows = [r for r in rows if r.modality == "reference"]
    scored = [r for r in rows if r.modality != "reference"]
    ref_path = Path(reference) if reference else (ref_rows or rows)[0].raster_path
    ref = read_raster(ref_path)
    nb = n_bands or ref.shape[0]
    model = fit_two_means(pixels_from_image(ref.astype(float).ravel(), nb))

    est_dir = Path(est_dir)
    records = []
    for r in scored:
        est_path = est_dir / FRAME.format(r.step)
        if not est_path.exists():
            raise RasterIOError(f"{est_path}: missing estimate for step {r.step}")
        truth = read_raster(r.raster_path).astype(float).ravel()
        est = read_raster(est_path).astype(float).ravel()
        if truth.size != est.size:
            raise RasterIOError(f"{est_path}: step {r.step} has {est.size} samples, truth {truth.size}")
        mask = classify(model, est, nb)
        records.append({
            "step": r.step,
            "date-tag": f"k{r.step:03d}",
            "nrmse": nrmse(truth, est),
            "miscls": misclassification_rate(mask, classify(model, truth, nb)),
            "water_pct": 100.0 * np.count_nonzero(mask) / mask.size,
        })
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for rec in records:
            w.writerow([rec["step"], rec["date-tag"]] + [_fmt(rec[k]) for k in METRIC_FIELDS[2:]])
        if records:
            w.writerow(["mean", "average"] + [
                _fmt(np.mean([rec[k] for rec in records])) for k in METRIC_FIELDS[2:]
            ])
    return records


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic scene and its observations")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    f = sub.add_parser("fuse", help="filter (and smooth) an observation manifest")
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--jobs", type=int, default=None, help="parallel patch workers (default: all cores)")

    e = sub.add_parser("eval", help="score estimates against ground truth")
    e.add_argument("--truth", required=True, help="truth manifest CSV")
    e.add_argument("--est", required=True, help="directory with frame_XXXX.mrf estimates")
    e.add_argument("--out", required=True, help="metrics CSV to write")
    e.add_argument("--reference", default=None, help="raster used to fit the water classifier")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            cmd_simulate(args.config, args.out)
        elif args.command == "fuse":
            if args.jobs is not None and args.jobs < 1:
                raise ConfigError("--jobs: must be >= 1")
            cmd_fuse(args.config, args.out, jobs=args.jobs)
        else:
            cmd_eval(args.truth, args.est, args.out, reference=args.reference)
    except RasterIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EstimationError, CalibrationError, MetricError, ClassificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
