"""Linear-Gaussian state-space core.

Prediction, sequential multi-modality update, forward filtering and RTS
smoothing of the vectorized latent image, plus a brute-force joint Gaussian
used as a verification oracle.

State vectors use the band-major layout: band ``l`` of an image with
``n_pixels`` pixels occupies entries ``[l * n_pixels, (l + 1) * n_pixels)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, EstimationError, OracleRefusedError
from .observation import ModalityOperator

KINDS = ("prior", "predicted", "posterior", "smoothed")

#: added to the innovation covariance before factorization
INNOVATION_JITTER = 1e-12
SYMMETRY_TOL = 1e-9
ORACLE_MAX_DIM = 2000


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianState:
    """Mean and covariance of the vectorized latent image at one time step."""

    mean: np.ndarray
    covariance: np.ndarray
    time_index: int = 0
    kind: str = "prior"

    def __post_init__(self):
        mean = _frozen(self.mean).ravel()
        cov = np.array(self.covariance, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if cov.shape != (mean.size, mean.size):
            raise ConfigError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        if not np.all(np.isfinite(mean)):
            raise ConfigError("state mean contains non-finite entries")
        if cov.size and np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL:
            raise ConfigError("state covariance is not symmetric")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown state kind {self.kind!r}")
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()

    def relabel(self, kind: str) -> "GaussianState":
        return replace(self, kind=kind)

    def min_eigenvalue(self) -> float:
        if self.dim == 0:
            return 0.0
        return float(np.linalg.eigvalsh(self.covariance).min())


TransitionLike = Union[None, np.ndarray]


@dataclass(frozen=True)
class DynamicalModel:
    """Random-walk style dynamics ``s_k = F s_{k-1} + q`` with ``q ~ N(0, Q)``.

    ``transition`` may be ``None`` (identity), a 1-D array (diagonal) or a
    dense 2-D matrix. ``process_noise`` is a 1-D array of diagonal variances
    or a dense 2-D covariance.
    """

    process_noise: np.ndarray
    transition: TransitionLike = None

    def __post_init__(self):
        q = _frozen(self.process_noise)
        if q.ndim not in (1, 2):
            raise ConfigError("process_noise must be a vector or a square matrix")
        if q.ndim == 2:
            if q.shape[0] != q.shape[1]:
                raise ConfigError("process_noise must be square")
            if np.max(np.abs(q - q.T), initial=0.0) > SYMMETRY_TOL:
                raise ConfigError("process_noise is not symmetric")
        if np.any(self._q_diag(q) < 0):
            raise ConfigError("process_noise has negative diagonal entries")
        object.__setattr__(self, "process_noise", q)

        f = self.transition
        if f is not None:
            f = _frozen(f)
            n = q.shape[0]
            if f.ndim == 1:
                if f.size != n:
                    raise ConfigError("transition diagonal length mismatch")
                norm = np.max(np.abs(f), initial=0.0)
            elif f.ndim == 2:
                if f.shape != (n, n):
                    raise ConfigError("transition shape mismatch")
                norm = np.linalg.norm(f, 2) if n else 0.0
            else:
                raise ConfigError("transition must be None, a vector or a matrix")
            if norm > 1 + 1e-12:
                raise ConfigError(f"transition spectral norm {norm:.6g} exceeds 1")
            object.__setattr__(self, "transition", f)

    @staticmethod
    def _q_diag(q):
        return q if q.ndim == 1 else np.diag(q)

    @classmethod
    def random_walk(cls, q, dim: int | None = None) -> "DynamicalModel":
        """Identity transition with diagonal noise; scalar ``q`` needs ``dim``."""
        q = np.asarray(q, dtype=float)
        if q.ndim == 0:
            if dim is None:
                raise ConfigError("dim is required for a scalar process noise")
            q = np.full(dim, float(q))
        return cls(process_noise=q)

    @property
    def dim(self) -> int:
        return self.process_noise.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.process_noise.ndim == 1 and (
            self.transition is None or self.transition.ndim == 1
        )

    def transition_matrix(self) -> np.ndarray:
        if self.transition is None:
            return np.eye(self.dim)
        if self.transition.ndim == 1:
            return np.diag(self.transition)
        return np.array(self.transition)

    def noise_matrix(self) -> np.ndarray:
        q = self.process_noise
        return np.diag(q) if q.ndim == 1 else np.array(q)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Left-multiply ``x`` (vector or matrix) by the transition."""
        f = self.transition
        if f is None:
            return np.array(x, dtype=float)
        if f.ndim == 1:
            return f[:, None] * x if np.ndim(x) == 2 else f * x
        return f @ x

    def propagate_covariance(self, cov: np.ndarray) -> np.ndarray:
        f = self.transition
        if f is None:
            out = np.array(cov, dtype=float)
        elif f.ndim == 1:
            out = f[:, None] * cov * f[None, :]
        else:
            out = f @ cov @ f.T
        q = self.process_noise
        if q.ndim == 1:
            out[np.diag_indices_from(out)] += q
        else:
            out += q
        return _symmetrize(out)

    def restrict(self, index: np.ndarray) -> "DynamicalModel":
        """Sub-model acting on the state entries ``index`` only."""
        index = np.asarray(index)
        q = self.process_noise
        q = q[index] if q.ndim == 1 else q[np.ix_(index, index)]
        f = self.transition
        if f is not None:
            f = f[index] if f.ndim == 1 else f[np.ix_(index, index)]
        return DynamicalModel(process_noise=q, transition=f)


ModelSupplier = Union[Sequence[DynamicalModel], Callable[[int], DynamicalModel]]
Observation = tuple  # (ModalityOperator, measurement vector)


def predict(state: GaussianState, model: DynamicalModel) -> GaussianState:
    """One prediction step: ``F s`` and ``F P F^T + Q``."""
    if model.dim != state.dim:
        raise ConfigError(
            f"model dimension {model.dim} does not match state dimension {state.dim}"
        )
    return GaussianState(
        mean=model.apply(state.mean),
        covariance=model.propagate_covariance(state.covariance),
        time_index=state.time_index + 1,
        kind="predicted",
    )


def update(
    state: GaussianState, operator: ModalityOperator, observation
) -> GaussianState:
    """Condition ``state`` on one modality's masked measurement vector.

    The covariance is computed in Joseph form, expanded so the cost stays
    O(n^2 m) for ``m`` measurement rows instead of forming ``I - K H``.
    """
    y = np.asarray(observation, dtype=float).ravel()
    H = operator.stacked
    if H.shape[0] != y.size:
        raise ConfigError(
            f"operator has {H.shape[0]} rows but the measurement has {y.size} entries"
        )
    if H.shape[1] != state.dim:
        raise ConfigError(
            f"operator has {H.shape[1]} columns but the state has {state.dim} entries"
        )
    if y.size == 0:
        return state.relabel("posterior")
    if not np.all(np.isfinite(y)):
        raise ConfigError(
            f"non-finite retained measurement (step {operator.time_index}, "
            f"modality {operator.modality!r})"
        )

    P = state.covariance
    HP = np.asarray(H @ P)
    S = _symmetrize(np.asarray(H @ HP.T))
    T = S + operator.noise_matrix()
    try:
        factor = sla.cho_factor(
            T + INNOVATION_JITTER * np.eye(y.size), lower=True, check_finite=False
        )
    except np.linalg.LinAlgError as exc:
        raise EstimationError(
            "innovation covariance is not positive definite",
            time_index=operator.time_index,
            modality=operator.modality,
        ) from exc
    gain_t = sla.cho_solve(factor, HP, check_finite=False)  # K^T, m x n
    gain = gain_t.T

    innovation = y - H @ state.mean
    mean = state.mean + gain @ innovation

    # (I - KH) P (I - KH)^T + K R K^T
    khp = gain @ HP
    cov = P - khp - khp.T + gain @ T @ gain_t
    return GaussianState(
        mean=mean,
        covariance=_symmetrize(cov),
        time_index=state.time_index,
        kind="posterior",
    )


def stack_observations(observations: Sequence[Observation]):
    """Merge several (operator, measurement) pairs into one stacked pair."""
    from scipy import sparse

    if not observations:
        raise ConfigError("nothing to stack")
    ops = [op for op, _ in observations]
    ys = [np.asarray(y, dtype=float).ravel() for _, y in observations]
    H = sparse.vstack([op.stacked for op in ops], format="csr")
    if all(op.noise.ndim == 1 for op in ops):
        noise = np.concatenate([op.noise for op in ops])
    else:
        noise = sla.block_diag(*[op.noise_matrix() for op in ops])
    stacked = ModalityOperator(
        stacked=H,
        noise=noise,
        modality="+".join(op.modality for op in ops),
        time_index=ops[0].time_index,
        band_rows=tuple(r for op in ops for r in op.band_rows),
    )
    return stacked, np.concatenate(ys)


def fuse_step(
    state: GaussianState, observations: Sequence[Observation]
) -> GaussianState:
    """Apply :func:`update` for each modality in turn."""
    for op, _ in observations:
        if op.time_index != state.time_index:
            raise ConfigError(
                f"observation of modality {op.modality!r} is at step "
                f"{op.time_index}, state is at step {state.time_index}"
            )
    out = state.relabel("posterior")
    for op, y in observations:
        out = update(out, op, y)
    return out


@dataclass
class TraceStep:
    predicted: GaussianState
    posterior: GaussianState
    model: DynamicalModel | None = None


@dataclass
class FilterTrace:
    """Forward-pass record consumed by :func:`rts_smooth`.

    ``steps[0]`` holds the initial state (predicted == posterior, no model).
    """

    steps: list[TraceStep] = field(default_factory=list)

    def __post_init__(self):
        times = [s.posterior.time_index for s in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("trace steps must have strictly increasing time indices")

    def append(self, step: TraceStep) -> None:
        if self.steps and step.posterior.time_index <= self.steps[-1].posterior.time_index:
            raise ConfigError("trace steps must have strictly increasing time indices")
        self.steps.append(step)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def posteriors(self) -> list[GaussianState]:
        return [s.posterior for s in self.steps]

    @property
    def predictions(self) -> list[GaussianState]:
        return [s.predicted for s in self.steps]


def _model_for(models: ModelSupplier, k: int) -> DynamicalModel:
    # k is the 1-based step being predicted into
    if callable(models):
        return models(k)
    return models[k - 1]


def filter_sequence(
    initial: GaussianState,
    models: ModelSupplier,
    observations: Sequence[Sequence[Observation]],
) -> FilterTrace:
    """Run predict + :func:`fuse_step` for every step in ``observations``.

    ``observations[k - 1]`` lists the (operator, measurement) pairs for the
    k-th step after the initial state; ``models`` supplies the dynamics of the
    transition into step k, either as a sequence or as a callable ``k -> model``.
    """
    if initial.kind != "posterior":
        raise ConfigError(f"initial state must be a posterior, got {initial.kind!r}")
    trace = FilterTrace([TraceStep(predicted=initial, posterior=initial)])
    state = initial
    for k, obs in enumerate(observations, start=1):
        model = _model_for(models, k)
        pred = predict(state, model)
        state = fuse_step(pred, obs)
        trace.append(TraceStep(predicted=pred, posterior=state, model=model))
    return trace


def rts_smooth(trace: FilterTrace) -> list[GaussianState]:
    """Rauch-Tung-Striebel backward pass over a filter trace."""
    if len(trace) == 0:
        raise ConfigError("cannot smooth an empty trace")
    steps = trace.steps
    out: list[GaussianState] = [None] * len(steps)
    out[-1] = steps[-1].posterior.relabel("smoothed")
    for k in range(len(steps) - 2, -1, -1):
        filt = steps[k].posterior
        pred = steps[k + 1].predicted
        model = steps[k + 1].model
        nxt = out[k + 1]
        try:
            factor = sla.cho_factor(pred.covariance, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise EstimationError(
                "predicted covariance is not positive definite", time_index=k + 1
            ) from exc
        # G = P_{k|k} F^T P_{k+1|k}^{-1} = (P_{k+1|k}^{-1} F P_{k|k})^T
        gain = sla.cho_solve(factor, model.apply(filt.covariance), check_finite=False).T
        mean = filt.mean + gain @ (nxt.mean - pred.mean)
        cov = filt.covariance + gain @ (nxt.covariance - pred.covariance) @ gain.T
        out[k] = GaussianState(
            mean=mean,
            covariance=_symmetrize(cov),
            time_index=filt.time_index,
            kind="smoothed",
        )
    return out


def joint_gaussian_oracle(
    initial: GaussianState,
    models: ModelSupplier,
    observations: Sequence[Sequence[Observation]],
    max_dim: int = ORACLE_MAX_DIM,
) -> list[GaussianState]:
    """Exact smoothing marginals by conditioning the joint Gaussian of s_0..s_K.

    Builds ``s = A w`` with ``w = (s_0, q_1, ..., q_K)`` so the joint
    covariance is ``A W A^T``, stacks every observation into one linear
    measurement of ``s`` and conditions with a dense solve. Only meant for
    small verification instances.
    """
    K = len(observations)
    n = initial.dim
    total = (K + 1) * n
    if total > max_dim:
        raise OracleRefusedError(
            f"joint dimension {total} exceeds the oracle cap of {max_dim}"
        )

    trans = [_model_for(models, k) for k in range(1, K + 1)]
    F = [m.transition_matrix() for m in trans]

    # propagation blocks Phi(k, i) = F_k ... F_{i+1}
    A = np.zeros((total, total))
    W = np.zeros((total, total))
    W[:n, :n] = initial.covariance
    for k, m in enumerate(trans, start=1):
        W[k * n:(k + 1) * n, k * n:(k + 1) * n] = m.noise_matrix()
    mu = np.zeros(total)
    mu[:n] = initial.mean
    for k in range(K + 1):
        A[k * n:(k + 1) * n, k * n:(k + 1) * n] = np.eye(n)
        if k > 0:
            mu[k * n:(k + 1) * n] = F[k - 1] @ mu[(k - 1) * n:k * n]
            for i in range(k):
                A[k * n:(k + 1) * n, i * n:(i + 1) * n] = (
                    F[k - 1] @ A[(k - 1) * n:k * n, i * n:(i + 1) * n]
                )
    sigma = A @ W @ A.T

    rows, ys, noises = [], [], []
    for k, obs in enumerate(observations, start=1):
        for op, y in obs:
            if op.stacked.shape[0] == 0:
                continue
            block = np.zeros((op.stacked.shape[0], total))
            block[:, k * n:(k + 1) * n] = op.stacked.toarray()
            rows.append(block)
            ys.append(np.asarray(y, dtype=float).ravel())
            noises.append(op.noise_matrix())

    if rows:
        H = np.vstack(rows)
        R = sla.block_diag(*noises)
        y = np.concatenate(ys)
        S = H @ sigma @ H.T + R
        cross = sigma @ H.T
        mu = mu + cross @ np.linalg.solve(S, y - H @ mu)
        sigma = sigma - cross @ np.linalg.solve(S, cross.T)

    t0 = initial.time_index
    return [
        GaussianState(
            mean=mu[k * n:(k + 1) * n],
            covariance=_symmetrize(sigma[k * n:(k + 1) * n, k * n:(k + 1) * n]),
            time_index=t0 + k,
            kind="smoothed",
        )
        for k in range(K + 1)
    ]
