"""Active perception loop: pose policies, measurement extraction, orchestration.

Each measurement cycle aims the sensor at the control point the policy
selects (hottest estimate, most uncertain estimate, or a uniform random
baseline), derives the observed point set from the slice-average partition,
reads one synthetic frame, updates the filter, then runs the configured
number of prediction steps while applying layer activation and retirement
events.  Everything is driven by a single seed, so a rerun reproduces the
trace exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import dynamics, geometry, kalman
from .dynamics import DepositionSchedule, LtvThermalModel, active_indices
from .geometry import ControlPointSet, SensorPose, TriMesh
from .groundtruth import CameraSpec, GroundTruthField, SensorFrame, add_noise, sample_image


class PolicyKind(enum.Enum):
    MAX_VALUE = "max_value"
    MAX_UNCERTAINTY = "max_uncertainty"
    UNIFORM_RANDOM = "uniform_random"


@dataclass(frozen=True)
class Policy:
    """Pose selection rule plus the standoff scale (> 1) for placement."""

    kind: PolicyKind
    standoff_scale: float = 2.0

    def __post_init__(self):
        if self.standoff_scale <= 1.0:
            raise ValueError("standoff_scale must be > 1")


def next_pose(
    policy: Policy,
    state: kalman.KalmanState,
    points: ControlPointSet,
    rng: np.random.Generator | None = None,
) -> SensorPose:
    """Sensor pose aimed at the policy's target control point.

    The sensor is placed on the ray from the center of the active region
    (mean position of the state's points) through the target,
    ``standoff_scale`` times the center-to-target distance out, looking
    back along that ray.  Using the active-region center rather than the
    whole part keeps the viewing distance steady while the part grows.
    Ties pick the lowest point id.
    """
    if state.dim == 0:
        raise ValueError("cannot choose a pose for an empty state")
    ids = np.array(state.point_ids)
    if policy.kind is PolicyKind.MAX_VALUE:
        score = state.mean
        target_id = int(ids[score == score.max()].min())
    elif policy.kind is PolicyKind.MAX_UNCERTAINTY:
        score = np.diag(state.covariance)
        target_id = int(ids[score == score.max()].min())
    else:
        if rng is None:
            raise ValueError("uniform random policy needs an rng")
        target_id = int(ids[rng.integers(ids.size)])
    center = points.positions[list(state.point_ids)].mean(axis=0)
    offset = points.positions[target_id] - center
    norm = np.linalg.norm(offset)
    if norm == 0.0:
        raise ValueError(f"control point {target_id} coincides with the region center")
    displacement = policy.standoff_scale * offset
    return SensorPose.aimed(center + displacement, -displacement)


@dataclass(frozen=True)
class MeasurementSample:
    """Per observed point: frame value, 3D source, and adjustment flag.

    ``source_ids`` is the fine point whose temperature each value carries
    (-1 when the frame had no usable pixel); ``adjusted`` marks points whose
    projection fell outside the frame or on a miss pixel, so a neighboring
    hit pixel was used instead.
    """

    values: np.ndarray
    source_ids: np.ndarray
    adjusted: np.ndarray


def extract_measurements(
    frame: SensorFrame,
    observed: np.ndarray,
    points_rot: np.ndarray,
) -> MeasurementSample:
    """Read one frame value per observed control point.

    Each point is projected into the image; the nearest hit pixel to the
    projection supplies the value.  Projections outside the frame clamp to
    the border (flagged), and points whose exact pixel missed the surface
    fall back to the nearest hit pixel (also flagged).
    """
    observed = np.asarray(observed, dtype=int)
    if observed.size == 0:
        raise ValueError("observed set must be non-empty")
    cam = frame.camera
    pts = np.asarray(points_rot, dtype=float).reshape(-1, 3)[observed]
    w, h = cam.width, cam.height
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pts[:, 1] / pts[:, 0]
        v = pts[:, 2] / pts[:, 0]
    behind = pts[:, 0] <= 0.0
    col_f = (u / cam.tan_half_width + 1.0) * 0.5 * w - 0.5
    row_f = (v / cam.tan_half_height + 1.0) * 0.5 * h - 0.5
    col_f = np.where(behind, np.inf, col_f)
    row_f = np.where(behind, np.inf, row_f)
    out_of_frame = (
        behind
        | (col_f < -0.5) | (col_f > w - 0.5)
        | (row_f < -0.5) | (row_f > h - 0.5)
    )
    col = np.clip(np.round(np.where(np.isfinite(col_f), col_f, w)), 0, w - 1).astype(int)
    row = np.clip(np.round(np.where(np.isfinite(row_f), row_f, h)), 0, h - 1).astype(int)

    hit = frame.hit_mask
    hit_rc = np.argwhere(hit)
    values = np.zeros(observed.size)
    source = np.full(observed.size, -1, dtype=np.int64)
    adjusted = out_of_frame.copy()
    for i in range(observed.size):
        r, c = row[i], col[i]
        if hit[r, c]:
            values[i] = frame.values[r, c]
            source[i] = frame.source_ids[r, c]
            continue
        adjusted[i] = True
        if hit_rc.size == 0:
            values[i] = frame.values[r, c]
            continue
        d2 = (hit_rc[:, 0] - row_f[i]) ** 2 + (hit_rc[:, 1] - col_f[i]) ** 2
        if not np.any(np.isfinite(d2)):
            d2 = (hit_rc[:, 0] - r) ** 2 + (hit_rc[:, 1] - c) ** 2
        rr, cc = hit_rc[int(np.argmin(d2))]
        values[i] = frame.values[rr, cc]
        source[i] = frame.source_ids[rr, cc]
    return MeasurementSample(values=values, source_ids=source, adjusted=adjusted)


@dataclass(frozen=True)
class CycleRecord:
    """Trace entry for one measurement cycle (errors are post-update).

    ``avg_cov_pre`` is the pre-update average variance, kept for
    diagnostics; the CSV carries the post-update value only.
    """

    cycle: int
    step: int
    pose: SensorPose
    observed_ids: tuple[int, ...]
    measurements: np.ndarray
    n_adjusted: int
    n_gated: int
    max_err_ext: float
    avg_err_ext: float
    max_err_int: float
    avg_err_int: float
    avg_cov: float
    avg_cov_pre: float


@dataclass
class PerceptionTrace:
    records: list[CycleRecord] = field(default_factory=list)
    states: list[kalman.KalmanState] = field(default_factory=list)

    CSV_HEADER = (
        "cycle,step,pose_x,pose_y,pose_z,n_observed,"
        "max_err_ext,avg_err_ext,max_err_int,avg_err_int,avg_cov"
    )

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for r in self.records:
                p = r.pose.position
                fh.write(
                    f"{r.cycle},{r.step},"
                    f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},"
                    f"{len(r.observed_ids)},{r.max_err_ext!r},{r.avg_err_ext!r},"
                    f"{r.max_err_int!r},{r.avg_err_int!r},{r.avg_cov!r}\n"
                )

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


@dataclass(frozen=True)
class ExperimentSetup:
    """Assembled inputs of one simulation run."""

    points: ControlPointSet
    schedule: DepositionSchedule
    model: LtvThermalModel
    field: GroundTruthField
    meshes: tuple[TriMesh, ...]
    camera: CameraSpec
    policy: Policy
    measurement_noise: kalman.MeasurementNoise
    prior_variance: float = 100.0
    steps_per_measurement: int = 40
    horizon_steps: int = 2000
    seed: int = 0
    slice_fraction: float = 0.1
    gate_radius: float | None = None
    collect_states: bool = False

    def mesh_at_epoch(self, epoch: int) -> TriMesh:
        return self.meshes[min(max(epoch, 0), len(self.meshes) - 1)]


def _min_point_spacing(positions: np.ndarray) -> float:
    if positions.shape[0] < 2:
        return np.inf
    d, _ = cKDTree(positions).query(positions, k=2)
    return float(d[:, 1].min())


def control_to_fine_map(points: ControlPointSet, field: GroundTruthField,
                        schedule: DepositionSchedule) -> np.ndarray:
    """Fine point standing in for each control point when scoring errors.

    Matched within the same layer so both sides activate and retire
    together; points outside the schedule fall back to the global nearest.
    """
    mapping = np.full(points.n_points, -1, dtype=np.int64)
    fine_layers = {
        layer.activation_step: np.array(layer.point_ids, dtype=np.int64)
        for layer in field.schedule.layers
    }
    for layer in schedule.layers:
        fine_ids = fine_layers.get(layer.activation_step)
        if fine_ids is None or fine_ids.size == 0:
            continue
        tree = cKDTree(field.fine_points[fine_ids])
        _, nearest = tree.query(points.positions[list(layer.point_ids)])
        mapping[list(layer.point_ids)] = fine_ids[nearest]
    unmatched = np.flatnonzero(mapping < 0)
    if unmatched.size:
        tree = cKDTree(field.fine_points)
        _, nearest = tree.query(points.positions[unmatched])
        mapping[unmatched] = nearest
    return mapping


def _apply_events(state: kalman.KalmanState, schedule: DepositionSchedule,
                  k: int, prior_variance: float) -> kalman.KalmanState:
    _, newly, retired = active_indices(schedule, k)
    if retired:
        state = kalman.retire(state, retired)
    if newly:
        temp = next(
            layer.deposition_temp
            for layer in schedule.layers
            if layer.activation_step == k
        )
        state = kalman.augment(state, newly, temp, prior_variance)
    return state


def _error_stats(err: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    sel = err[mask]
    if sel.size == 0:
        return float("nan"), float("nan")
    return float(sel.max()), float(sel.mean())


def _span_transition(model: LtvThermalModel, k: int, span: int,
                     cache: dict) -> tuple[np.ndarray, np.ndarray]:
    """Composed transition and accumulated noise for ``span`` model steps.

    Valid only while no deposition event occurs inside the span, which the
    caller guarantees by splitting at activation steps; within such a span
    the per-step matrices are constant, so the composition is exact.  The
    step matrix is symmetric and the process noise scalar, so both compose
    in closed form from one eigendecomposition.
    """
    key = (model._epoch(k), span)
    if key not in cache:
        a = dynamics.step_matrix(model, k)
        w = dynamics.process_noise(model, k)
        n = a.shape[0]
        w_scalar = w[0, 0] if n else 0.0
        symmetric = n == 0 or (
            np.max(np.abs(a - a.T)) < 1e-12
            and np.max(np.abs(w - w_scalar * np.eye(n))) < 1e-12
        )
        if symmetric:
            # A = V diag(lam) V^T  =>  A^m = V diag(lam^m) V^T and
            # sum_i A^i W A^i = w V diag(sum lam^(2i)) V^T
            lam, vec = np.linalg.eigh(a) if n else (np.zeros(0), np.zeros((0, 0)))
            a_total = (vec * lam**span) @ vec.T
            lam2 = lam**2
            series = np.where(
                np.abs(1.0 - lam2) > 1e-12,
                (1.0 - lam2**span) / (1.0 - lam2),
                float(span),
            )
            w_total = (vec * (w_scalar * series)) @ vec.T
        else:
            a_total = np.eye(n)
            w_total = np.zeros_like(w)
            for _ in range(span):
                w_total = a @ w_total @ a.T + w
                a_total = a @ a_total
        cache[key] = (
            0.5 * (a_total + a_total.T) if symmetric else a_total,
            0.5 * (w_total + w_total.T),
        )
    return cache[key]


def run_loop(setup: ExperimentSetup) -> PerceptionTrace:
    """Run the full perceive-update-predict loop up to the horizon.

    One measurement cycle happens every ``steps_per_measurement`` model
    steps, starting at step 0 (cycles with no active points are skipped).
    Observed points are the exterior control points on the sensor side of
    the slice-average threshold; measurements whose sampled surface point
    lies farther than ``gate_radius`` from the target are discarded as
    unresolvable by the current view.
    """
    sched = setup.schedule
    gate = setup.gate_radius
    if gate is None:
        gate = 0.75 * _min_point_spacing(setup.points.positions)
    policy_rng = np.random.default_rng([setup.seed, 0])
    truth_map = control_to_fine_map(setup.points, setup.field, sched)
    if setup.horizon_steps > setup.field.n_steps:
        raise ValueError(
            f"horizon {setup.horizon_steps} exceeds ground truth history "
            f"({setup.field.n_steps} steps)"
        )

    trace = PerceptionTrace()
    state = kalman.KalmanState.empty(step=0)
    state = _apply_events(state, sched, 0, setup.prior_variance)
    interior = setup.points.interior_mask
    span_cache: dict = setup.model._derived_cache
    k = 0
    cycle = 0
    while k < setup.horizon_steps:
        if state.dim > 0:
            cycle += 1
            pose = next_pose(setup.policy, state, setup.points, policy_rng)
            epoch = setup.model._epoch(k)
            mesh = setup.mesh_at_epoch(epoch)
            mesh_rot = geometry.to_sensor_frame(mesh.vertices, pose)
            active_pos = setup.points.positions[list(state.point_ids)]
            points_rot = geometry.to_sensor_frame(active_pos, pose)
            visible = geometry.partition_visible(
                mesh_rot, points_rot, setup.slice_fraction
            )
            exterior_rows = [
                int(i) for i in visible if not interior[state.point_ids[i]]
            ]
            frame = sample_image(setup.field, mesh, pose, k, setup.camera)
            frame = add_noise(frame, setup.camera.noise_std,
                              [setup.seed, 1, cycle])
            avg_cov_pre = float(np.diag(state.covariance).mean())
            n_adjusted = 0
            n_gated = 0
            kept_rows: list[int] = []
            kept_values = np.zeros(0)
            if exterior_rows:
                sample = extract_measurements(frame, exterior_rows, points_rot)
                n_adjusted = int(sample.adjusted.sum())
                keep = []
                for j, row in enumerate(exterior_rows):
                    src = int(sample.source_ids[j])
                    if src < 0:
                        n_gated += 1
                        continue
                    dist = np.linalg.norm(
                        setup.field.fine_points[src] - active_pos[row]
                    )
                    if dist <= gate:
                        keep.append(j)
                    else:
                        n_gated += 1
                # exterior_rows is ascending, so kept rows and values align
                # with the observation matrix ordering already
                kept_rows = [exterior_rows[j] for j in keep]
                kept_values = sample.values[keep]
                obs = geometry.build_observation_matrix(kept_rows, state.dim)
                state = kalman.update(state, kept_values, obs,
                                      setup.measurement_noise)
            truth = setup.field.temps[k, truth_map[list(state.point_ids)]]
            err = np.abs(state.mean - truth)
            ext_mask = ~interior[list(state.point_ids)]
            max_ext, avg_ext = _error_stats(err, ext_mask)
            max_int, avg_int = _error_stats(err, ~ext_mask)
            trace.records.append(
                CycleRecord(
                    cycle=cycle,
                    step=k,
                    pose=pose,
                    observed_ids=tuple(state.point_ids[r] for r in kept_rows),
                    measurements=kept_values,
                    n_adjusted=n_adjusted,
                    n_gated=n_gated,
                    max_err_ext=max_ext,
                    avg_err_ext=avg_ext,
                    max_err_int=max_int,
                    avg_err_int=avg_int,
                    avg_cov=float(np.diag(state.covariance).mean()),
                    avg_cov_pre=avg_cov_pre,
                )
            )
            if setup.collect_states:
                trace.states.append(state)
        # predict to the next cycle, splitting the span at deposition events
        # (the per-step matrices are constant between events)
        span_end = k + setup.steps_per_measurement
        while k < span_end:
            events = [
                layer.activation_step
                for layer in sched.layers
                if k < layer.activation_step <= span_end
            ]
            stop = min(events) if events else span_end
            a, w = _span_transition(setup.model, k, stop - k, span_cache)
            # the transition rows are ordered like the state entries:
            # layers in activation order, ascending ids within a layer
            assert state.point_ids == active_indices(sched, k)[0]
            state = kalman.predict(state, a, w)
            k = stop
            state = _apply_events(state, sched, k, setup.prior_variance)
            state = kalman.KalmanState(
                mean=state.mean, covariance=state.covariance,
                point_ids=state.point_ids, step=k,
            )
    return trace
