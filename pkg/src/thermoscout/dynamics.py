"""Time-varying linear thermal model over the active control points.

Temperatures are represented relative to ambient, which keeps the process
strictly linear: one step is ``x <- (1 - loss*dt) * (x - dt*diffusivity*L x)``
where ``L`` is a graph Laplacian over the points active at that step.
Material deposition activates layers of points; only a fixed window of the
most recent layers stays in the model, and points leaving the window stop
exchanging heat.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import ControlPointSet


class StabilityError(ValueError):
    """Raised when a time step violates the explicit-Euler stability bound."""


@dataclass(frozen=True)
class LayerSpec:
    point_ids: tuple[int, ...]
    activation_step: int
    deposition_temp: float

    def __post_init__(self):
        object.__setattr__(self, "point_ids", tuple(int(i) for i in self.point_ids))


@dataclass(frozen=True)
class DepositionSchedule:
    """Ordered layer activations plus the size of the active window."""

    layers: tuple[LayerSpec, ...]
    active_window: int

    def __post_init__(self):
        layers = tuple(self.layers)
        if self.active_window < 1:
            raise ValueError("active_window must be >= 1")
        steps = [layer.activation_step for layer in layers]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("layer activation steps must be strictly increasing")
        seen: set[int] = set()
        for layer in layers:
            for pid in layer.point_ids:
                if pid in seen:
                    raise ValueError(f"control point {pid} appears in multiple layers")
                seen.add(pid)
        object.__setattr__(self, "layers", layers)

    @property
    def all_point_ids(self) -> tuple[int, ...]:
        return tuple(pid for layer in self.layers for pid in layer.point_ids)

    def to_json_dict(self) -> dict:
        return {
            "active_window": self.active_window,
            "layers": [
                {
                    "point_ids": list(layer.point_ids),
                    "activation_step": layer.activation_step,
                    "deposition_temp": layer.deposition_temp,
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DepositionSchedule":
        try:
            layers = tuple(
                LayerSpec(
                    point_ids=tuple(entry["point_ids"]),
                    activation_step=int(entry["activation_step"]),
                    deposition_temp=float(entry["deposition_temp"]),
                )
                for entry in doc["layers"]
            )
            window = int(doc["active_window"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed schedule document: {exc}") from exc
        return cls(layers=layers, active_window=window)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DepositionSchedule":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def active_indices(
    schedule: DepositionSchedule, k: int
) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Active, newly activated and just-retired point ids at step ``k``.

    Active ids are returned in state order: layers in activation order,
    ascending ids within a layer.  ``newly`` holds the points of a layer
    activating exactly at ``k``; ``retired`` the points leaving the window
    exactly at ``k``.
    """
    activated = [a for a in schedule.layers if a.activation_step <= int(k)]
    window = activated[-schedule.active_window:]
    active = tuple(pid for layer in window for pid in sorted(layer.point_ids))
    newly: tuple[int, ...] = ()
    retired: tuple[int, ...] = ()
    for layer in schedule.layers:
        if layer.activation_step == int(k):
            newly = tuple(sorted(layer.point_ids))
    if newly and len(activated) > schedule.active_window:
        retired = tuple(sorted(activated[-schedule.active_window - 1].point_ids))
    return active, newly, retired


def build_laplacian(positions: np.ndarray, k: int) -> sp.csr_matrix:
    """Graph Laplacian of the symmetrized k-nearest-neighbor graph.

    Edge weights are inverse squared distances, so closer points couple
    more strongly.  The graph contains edge (i, j) when either point is
    among the other's k nearest.

    Raises:
        ValueError: on coincident points (zero distance) or k out of range.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = pos.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points for a Laplacian")
    if not 1 <= k < n:
        raise ValueError(f"neighbor count {k} must be in [1, {n - 1}]")
    tree = cKDTree(pos)
    dists, cols = tree.query(pos, k=k + 1)
    dists, cols = dists[:, 1:], cols[:, 1:]
    if np.any(dists == 0.0):
        i = int(np.argwhere(dists == 0.0)[0][0])
        raise ValueError(f"duplicate point positions (point {i} has a zero-distance neighbor)")
    rows = np.repeat(np.arange(n), k)
    weights = 1.0 / dists.ravel() ** 2
    w = sp.coo_matrix((weights, (rows, cols.ravel())), shape=(n, n)).tocsr()
    w = w.maximum(w.T)
    degree = np.asarray(w.sum(axis=1)).ravel()
    return (sp.diags(degree) - w).tocsr()


@dataclass(frozen=True)
class LtvThermalModel:
    """Linear time-varying heat model with layer-by-layer deposition.

    Args:
        points: all control points the schedule refers to.
        schedule: layer activation plan with the active window size.
        diffusivity: heat diffusion coefficient (length^2 / time).
        ambient_temp: reference temperature; the state is stored relative
            to it, so this only matters for reporting.
        coupling_neighbors: k for the k-nearest-neighbor coupling graph.
        dt: model time step in seconds.
        boundary_loss: relative heat-loss rate toward ambient (1/s).
        process_noise_density: process noise power (temp^2 / s).
    """

    points: ControlPointSet
    schedule: DepositionSchedule
    diffusivity: float
    dt: float
    ambient_temp: float = 0.0
    coupling_neighbors: int = 6
    boundary_loss: float = 0.0
    process_noise_density: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.diffusivity < 0.0:
            raise ValueError("diffusivity must be nonnegative")
        if self.boundary_loss < 0.0 or self.process_noise_density < 0.0:
            raise ValueError("loss and noise density must be nonnegative")
        n = self.points.n_points
        ids = self.schedule.all_point_ids
        if ids and (min(ids) < 0 or max(ids) >= n):
            raise ValueError("schedule references control points outside the set")
        if n >= 2:
            full = build_laplacian(
                self.points.positions, min(self.coupling_neighbors, n - 1)
            )
            self._check_stability(full)
        object.__setattr__(self, "_epoch_cache", {})
        # scratch space for derived per-epoch quantities (e.g. composed
        # multi-step transitions); purely memoization, model stays a value
        object.__setattr__(self, "_derived_cache", {})

    def _check_stability(self, laplacian: sp.csr_matrix) -> None:
        max_degree = laplacian.diagonal().max() if laplacian.shape[0] else 0.0
        if self.dt * self.diffusivity * max_degree >= 1.0:
            raise StabilityError(
                f"dt*diffusivity*max_degree = "
                f"{self.dt * self.diffusivity * max_degree:.3g} >= 1; "
                "reduce dt or diffusivity"
            )

    def _epoch(self, k: int) -> int:
        """Index of the last layer activated at or before step k (-1 if none)."""
        e = -1
        for i, layer in enumerate(self.schedule.layers):
            if layer.activation_step <= k:
                e = i
        return e

    def _epoch_matrices(self, k: int):
        e = self._epoch(int(k))
        cache: dict = self._epoch_cache
        if e not in cache:
            active, _, _ = active_indices(self.schedule, int(k))
            n = len(active)
            if n == 0:
                a = np.zeros((0, 0))
            elif n == 1:
                a = np.array([[1.0 - self.boundary_loss * self.dt]])
            else:
                kk = min(self.coupling_neighbors, n - 1)
                lap = build_laplacian(self.points.positions[list(active)], kk)
                self._check_stability(lap)
                a = (1.0 - self.boundary_loss * self.dt) * (
                    np.eye(n) - self.dt * self.diffusivity * lap.toarray()
                )
            cache[e] = (active, a)
        return cache[e]


def step_matrix(model: LtvThermalModel, k: int) -> np.ndarray:
    """State-evolution matrix over the points active at step ``k``."""
    _, a = model._epoch_matrices(k)
    return a.copy()


def process_noise(model: LtvThermalModel, k: int) -> np.ndarray:
    """Process-noise covariance at step ``k`` (white, per active point)."""
    active, _ = model._epoch_matrices(k)
    return model.process_noise_density * model.dt * np.eye(len(active))
