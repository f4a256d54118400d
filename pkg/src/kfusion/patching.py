"""Patch decomposition of the high-resolution lattice.

Pixels in different patches are treated as independent, so each patch is an
independent state space with covariance of size ``(L_H * patch_pixels)**2``
instead of ``(L_H * N_H)**2``. Patches are aligned to whole coarse-pixel
footprints so every coarse measurement falls inside exactly one patch.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy import sparse

from .errors import ConfigError
from .observation import ModalityOperator
from .state_model import (
    DynamicalModel,
    GaussianState,
    filter_sequence,
    rts_smooth,
)


@dataclass(frozen=True)
class Patch:
    index: int
    row0: int
    col0: int
    rows: int
    cols: int
    pixels: np.ndarray  # flat row-major high-resolution indices


@dataclass(frozen=True)
class PatchGrid:
    image_dims: tuple
    patch_rows: int
    patch_cols: int
    scale: int
    patches: tuple

    @property
    def n_pixels(self) -> int:
        return self.image_dims[0] * self.image_dims[1]

    def __len__(self) -> int:
        return len(self.patches)

    def pixel_owner(self) -> np.ndarray:
        owner = np.empty(self.n_pixels, dtype=np.int64)
        for p in self.patches:
            owner[p.pixels] = p.index
        return owner

    def state_indices(self, patch: int, n_bands: int) -> np.ndarray:
        """Band-major state entries of one patch."""
        px = self.patches[patch].pixels
        return np.concatenate([b * self.n_pixels + px for b in range(n_bands)])

    def coarse_indices(self, patch: int, scale: int | None = None) -> np.ndarray:
        """Flat coarse-pixel indices covered by one patch at ``scale``."""
        scale = self.scale if scale is None else int(scale)
        p = self.patches[patch]
        if p.rows % scale or p.cols % scale or p.row0 % scale or p.col0 % scale:
            raise ConfigError(f"patch {patch} is not aligned to scale {scale}")
        ccols = self.image_dims[1] // scale
        r = np.arange(p.row0 // scale, (p.row0 + p.rows) // scale)
        c = np.arange(p.col0 // scale, (p.col0 + p.cols) // scale)
        return (r[:, None] * ccols + c[None, :]).ravel()


def partition(image_dims, patch_size, scale: int) -> PatchGrid:
    rows, cols = (int(d) for d in image_dims)
    if np.ndim(patch_size) == 0:
        pr = pc = int(patch_size)
    else:
        pr, pc = (int(s) for s in patch_size)
    scale = int(scale)
    if min(pr, pc, scale) < 1:
        raise ConfigError("patch size and scale must be positive")
    if rows % pr or cols % pc:
        raise ConfigError(
            f"image dims {rows}x{cols} are not divisible by patch size {pr}x{pc}"
        )
    if pr % scale or pc % scale:
        raise ConfigError(f"patch size {pr}x{pc} is not divisible by scale {scale}")
    patches = []
    for r0 in range(0, rows, pr):
        for c0 in range(0, cols, pc):
            rr, cc = np.meshgrid(np.arange(r0, r0 + pr), np.arange(c0, c0 + pc), indexing="ij")
            px = (rr * cols + cc).ravel()
            px.setflags(write=False)
            patches.append(Patch(len(patches), r0, c0, pr, pc, px))
    return PatchGrid((rows, cols), pr, pc, scale, tuple(patches))


def _n_bands(size: int, grid: PatchGrid) -> int:
    if size % grid.n_pixels:
        raise ConfigError(f"vector length {size} is not a multiple of {grid.n_pixels} pixels")
    return size // grid.n_pixels


def scatter(x, grid: PatchGrid) -> list[np.ndarray]:
    x = np.asarray(x).ravel()
    nb = _n_bands(x.size, grid)
    return [x[grid.state_indices(p.index, nb)] for p in grid.patches]


def gather(parts: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    nb = _n_bands(sum(np.size(p) for p in parts), grid)
    out = np.empty(nb * grid.n_pixels, dtype=np.result_type(*parts))
    for p, part in zip(grid.patches, parts):
        out[grid.state_indices(p.index, nb)] = part
    return out


def _check_block_separable(matrix: np.ndarray, owner: np.ndarray, what: str) -> None:
    i, j = np.nonzero(matrix)
    if np.any(owner[i] != owner[j]):
        raise ConfigError(f"{what} couples state entries of different patches")


def _row_owner(H: sparse.csr_matrix, col_owner: np.ndarray, what: str) -> np.ndarray:
    counts = np.diff(H.indptr)
    if np.any(counts == 0):
        raise ConfigError(f"{what} has rows without state support")
    if H.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    owners = col_owner[H.indices]
    lo = np.minimum.reduceat(owners, H.indptr[:-1])
    hi = np.maximum.reduceat(owners, H.indptr[:-1])
    if np.any(lo != hi):
        raise ConfigError(f"{what} is not separable across patches")
    return lo


@dataclass
class FusionResult:
    """Per-step means and covariance diagonals, shape (steps, L_H * N_H)."""

    time_indices: np.ndarray
    filtered_mean: np.ndarray
    filtered_var: np.ndarray
    smoothed_mean: np.ndarray | None = None
    smoothed_var: np.ndarray | None = None


ModelsLike = Union[Sequence[DynamicalModel], Callable[[int], DynamicalModel]]


def _run_patch(task):
    mean, var, t0, models, observations, mode = task
    initial = GaussianState(mean, np.diag(var), time_index=t0, kind="posterior")
    trace = filter_sequence(initial, models, observations)
    fm = np.stack([s.mean for s in trace.posteriors])
    fv = np.stack([np.diag(s.covariance) for s in trace.posteriors])
    if mode != "smooth":
        return fm, fv, None, None
    sm = rts_smooth(trace)
    return (
        fm,
        fv,
        np.stack([s.mean for s in sm]),
        np.stack([np.diag(s.covariance) for s in sm]),
    )


def _patch_tasks(initial_mean, initial_var, observations, models, grid, mode, t0):
    D = initial_mean.size
    nb = _n_bands(D, grid)
    col_owner = np.tile(grid.pixel_owner(), nb)
    K = len(observations)
    models = [models(k) if callable(models) else models[k - 1] for k in range(1, K + 1)]
    for k, m in enumerate(models, start=1):
        if m.dim != D:
            raise ConfigError(f"dynamical model of step {k} has dimension {m.dim}, state {D}")
        if m.process_noise.ndim == 2:
            _check_block_separable(m.process_noise, col_owner, f"process noise of step {k}")
        if m.transition is not None and m.transition.ndim == 2:
            _check_block_separable(m.transition, col_owner, f"transition of step {k}")

    # row ownership is computed once per observation, not once per patch
    owned = []
    for obs in observations:
        step = []
        for op, y in obs:
            what = f"operator of modality {op.modality!r} at step {op.time_index}"
            if op.state_dim != D:
                raise ConfigError(f"{what} has {op.state_dim} columns, state has {D}")
            rows = _row_owner(op.stacked, col_owner, what)
            if op.noise.ndim == 2:
                _check_block_separable(op.noise, rows, f"noise of {what}")
            step.append((op, np.asarray(y, dtype=float).ravel(), rows))
        owned.append(step)

    for p in grid.patches:
        idx = grid.state_indices(p.index, nb)
        p_models = [m.restrict(idx) for m in models]
        p_obs = []
        for step in owned:
            p_step = []
            for op, y, rows in step:
                sel = np.flatnonzero(rows == p.index)
                H = op.stacked[sel][:, idx]
                noise = op.noise[sel] if op.noise.ndim == 1 else op.noise[np.ix_(sel, sel)]
                # band blocks keep their order; recount rows per block
                bounds = np.cumsum((0,) + tuple(op.band_rows))
                band_rows = tuple(int(np.count_nonzero((sel >= a) & (sel < b)))
                                  for a, b in zip(bounds, bounds[1:]))
                p_step.append((
                    ModalityOperator(H, noise, op.modality, op.time_index, band_rows),
                    y[sel],
                ))
            p_obs.append(p_step)
        yield (initial_mean[idx], initial_var[idx], t0, p_models, p_obs, mode)


def fuse_patched(
    initial_mean,
    initial_var,
    observations: Sequence[Sequence[tuple]],
    models: ModelsLike,
    grid: PatchGrid,
    mode: str = "filter",
    jobs: int = 1,
    t0: int = 0,
) -> FusionResult:
    """Filter (and optionally smooth) every patch independently and reassemble.

    ``initial_var`` is the diagonal of the initial covariance (scalar or
    vector). ``observations[k - 1]`` holds full-image (operator, measurement)
    pairs for step ``t0 + k``; ``models`` supplies full-image dynamics.
    Only covariance diagonals are reassembled.
    """
    if mode not in ("filter", "smooth"):
        raise ConfigError(f"mode must be 'filter' or 'smooth', got {mode!r}")
    initial_mean = np.asarray(initial_mean, dtype=float).ravel()
    initial_var = np.broadcast_to(np.asarray(initial_var, dtype=float), initial_mean.shape)
    tasks = _patch_tasks(initial_mean, initial_var, observations, models, grid, mode, t0)
    jobs = (os.cpu_count() or 1) if jobs is None else int(jobs)
    if jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(grid))) as pool:
            results = list(pool.map(_run_patch, tasks))
    else:
        results = [_run_patch(t) for t in tasks]

    steps = len(observations) + 1
    nb = _n_bands(initial_mean.size, grid)

    def assemble(j):
        if results[0][j] is None:
            return None
        out = np.empty((steps, initial_mean.size))
        for p, res in zip(grid.patches, results):
            out[:, grid.state_indices(p.index, nb)] = res[j]
        return out

    return FusionResult(
        time_indices=np.arange(t0, t0 + steps),
        filtered_mean=assemble(0),
        filtered_var=assemble(1),
        smoothed_mean=assemble(2),
        smoothed_var=assemble(3),
    )
