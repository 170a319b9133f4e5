"""Time-varying Kalman filter with a dynamically sized state.

The covariance update uses the Joseph form
``(I - K C) P (I - K C)^T + K V K^T`` throughout, and the innovation system
is solved by Cholesky factorization rather than an explicit inverse.
States are immutable values, safe to pass between threads; every operation
returns a new state.  Layer activation and retirement are handled by
:func:`augment` and :func:`retire`, which grow and marginalize the state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .geometry import ObservationMatrix


@dataclass(frozen=True)
class MeasurementNoise:
    """White measurement noise, one independent variance per observed point."""

    variance_per_point: float

    def __post_init__(self):
        if self.variance_per_point <= 0.0:
            raise ValueError("measurement variance must be positive")


@dataclass(frozen=True)
class KalmanState:
    """Gaussian belief over the temperatures of the active control points."""

    mean: np.ndarray
    covariance: np.ndarray
    point_ids: tuple[int, ...]
    step: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float).reshape(mean.size, mean.size)
        ids = tuple(int(i) for i in self.point_ids)
        if len(ids) != mean.size:
            raise ValueError("point_ids length must match state dimension")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate point ids in state")
        if cov.size and np.max(np.abs(cov - cov.T)) > 1e-9:
            raise ValueError("covariance must be symmetric")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "point_ids", ids)

    @classmethod
    def empty(cls, step: int = 0) -> "KalmanState":
        return cls(mean=np.zeros(0), covariance=np.zeros((0, 0)), point_ids=(), step=step)

    @property
    def dim(self) -> int:
        return self.mean.size

    def index_of(self, point_id: int) -> int:
        return self.point_ids.index(point_id)

    def validate(self) -> None:
        """Full invariant check (including PSD), for tests and debugging."""
        if self.dim and np.linalg.eigvalsh(self.covariance).min() < -1e-8:
            raise ValueError("covariance has a significantly negative eigenvalue")


def predict(state: KalmanState, transition: np.ndarray, noise_cov: np.ndarray) -> KalmanState:
    """One prediction step: propagate mean and covariance, add process noise."""
    a = np.asarray(transition, dtype=float)
    w = np.asarray(noise_cov, dtype=float)
    n = state.dim
    if a.shape != (n, n) or w.shape != (n, n):
        raise ValueError(
            f"transition/noise shape mismatch: state dim {n}, "
            f"got {a.shape} and {w.shape}"
        )
    mean = a @ state.mean
    cov = a @ state.covariance @ a.T + w
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean=mean, covariance=cov, point_ids=state.point_ids,
                       step=state.step + 1)


def update(
    state: KalmanState,
    measurement: np.ndarray,
    observation: ObservationMatrix,
    noise: MeasurementNoise,
) -> KalmanState:
    """Measurement update per the Joseph-form Kalman equations.

    ``observation`` selects the measured state entries, so the innovation
    covariance is assembled directly from the corresponding covariance
    block.  An empty observation returns the state unchanged.

    Raises:
        numpy.linalg.LinAlgError: if the innovation covariance is not
            positive definite (reported, never regularized away).
    """
    y = np.asarray(measurement, dtype=float).reshape(-1)
    if observation.state_dim != state.dim:
        raise ValueError(
            f"observation built for dim {observation.state_dim}, state has {state.dim}"
        )
    if y.size != observation.n_rows:
        raise ValueError(
            f"measurement length {y.size} != observation rows {observation.n_rows}"
        )
    if observation.n_rows == 0:
        return state
    rows = list(observation.rows)
    p = state.covariance
    p_rows = p[rows]
    s = p_rows[:, rows] + noise.variance_per_point * np.eye(len(rows))
    try:
        cho = scipy.linalg.cho_factor(s, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "innovation covariance is singular; measurement variance too small "
            "for a degenerate prior"
        ) from None
    gain = scipy.linalg.cho_solve(cho, p_rows).T
    innovation = y - state.mean[rows]
    mean = state.mean + gain @ innovation
    # Joseph form (I-KC)P(I-KC)^T + K V K^T, expanded through the selection
    # structure of C so only (n x m) products appear
    half = p - gain @ p_rows
    cov = half - half[:, rows] @ gain.T + noise.variance_per_point * (gain @ gain.T)
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean=mean, covariance=cov, point_ids=state.point_ids,
                       step=state.step)


def augment(
    state: KalmanState,
    new_ids,
    prior_mean: float,
    prior_var: float,
) -> KalmanState:
    """Append newly activated points with an independent Gaussian prior.

    New entries go after the existing ones, in ascending id order, with
    zero cross-covariance to the current state.
    """
    ids = sorted(int(i) for i in new_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in augmentation")
    if set(ids) & set(state.point_ids):
        raise ValueError("augmented ids overlap the existing state")
    if not ids:
        return state
    n, m = state.dim, len(ids)
    mean = np.concatenate([state.mean, np.full(m, float(prior_mean))])
    cov = np.zeros((n + m, n + m))
    cov[:n, :n] = state.covariance
    cov[n:, n:] = float(prior_var) * np.eye(m)
    return KalmanState(mean=mean, covariance=cov,
                       point_ids=state.point_ids + tuple(ids), step=state.step)


def retire(state: KalmanState, ids) -> KalmanState:
    """Marginalize points out of the state (drop their rows and columns)."""
    drop = {int(i) for i in ids}
    unknown = drop - set(state.point_ids)
    if unknown:
        raise ValueError(f"cannot retire unknown point ids {sorted(unknown)}")
    if not drop:
        return state
    keep = [i for i, pid in enumerate(state.point_ids) if pid not in drop]
    kept_ids = tuple(state.point_ids[i] for i in keep)
    return KalmanState(
        mean=state.mean[keep],
        covariance=state.covariance[np.ix_(keep, keep)],
        point_ids=kept_ids,
        step=state.step,
    )


def write_state_csv(state: KalmanState, path) -> None:
    """Snapshot export: ``point_id,mean,variance`` per active point."""
    var = np.diag(state.covariance)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point_id,mean,variance\n")
        for pid, m, v in zip(state.point_ids, state.mean, var):
            fh.write(f"{pid},{float(m)!r},{float(v)!r}\n")
