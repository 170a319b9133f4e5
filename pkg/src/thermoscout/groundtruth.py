"""Emulated manufacturing process and synthetic line-of-sight sensing.

A fine-grained explicit finite-difference heat simulation plays the role of
the real process: it runs on a denser point set than the runtime model,
with its own (deliberately mismatched) parameters, and its full history is
stored as a lookup table indexed by model time step.  Like the runtime
model, it only evolves the layers inside the active window; points that
leave the window are flagged inactive (NaN) rather than zeroed.

Sensor frames are produced by pinhole ray casting against the part surface;
each hit pixel reports the temperature of the nearest active fine point.
Temperatures are relative to ambient, so no-hit pixels carry 0.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import DepositionSchedule, StabilityError, active_indices, build_laplacian
from .geometry import SensorPose, TriMesh

TABLE_MAGIC = b"TSLUT\x00"
TABLE_VERSION = 1


class TableFormatError(ValueError):
    """Raised for unreadable, truncated or wrong-version lookup tables."""


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole sensor: pixel grid, horizontal field of view, noise level."""

    width: int = 24
    height: int = 24
    fov: float = np.deg2rad(60.0)
    noise_std: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("frame dimensions must be >= 1")
        if not 0.0 < self.fov < np.pi:
            raise ValueError("field of view must be in (0, pi)")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be nonnegative")

    @property
    def tan_half_width(self) -> float:
        return float(np.tan(0.5 * self.fov))

    @property
    def tan_half_height(self) -> float:
        return self.tan_half_width * self.height / self.width


@dataclass(frozen=True)
class SensorFrame:
    """One synthetic sensor frame.

    ``values`` holds per-pixel temperatures (row 0 = top of frame);
    ``pixel_positions`` the 3D world position each pixel ray hit, NaN rows
    for misses; ``source_ids`` the fine point each hit value came from
    (-1 for misses).
    """

    values: np.ndarray
    pixel_positions: np.ndarray
    source_ids: np.ndarray
    pose: SensorPose
    step: int
    camera: CameraSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.pixel_positions, dtype=float)
        s = np.asarray(self.source_ids, dtype=np.int64)
        if p.shape != v.shape + (3,) or s.shape != v.shape:
            raise ValueError("values, pixel_positions and source_ids shapes disagree")
        for arr in (v, p, s):
            arr.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "pixel_positions", p)
        object.__setattr__(self, "source_ids", s)

    @property
    def hit_mask(self) -> np.ndarray:
        return self.source_ids >= 0


@dataclass(frozen=True)
class GroundTruthField:
    """Precomputed process history on the fine point set.

    ``temps`` has one row per model step (0..n_steps); entries are NaN for
    points outside the active window at that step.  ``dt`` is the model
    step; the simulation internally ran at ``dt / substeps``.
    """

    fine_points: np.ndarray
    temps: np.ndarray
    dt: float
    substeps: int
    schedule: DepositionSchedule

    def __post_init__(self):
        pts = np.asarray(self.fine_points, dtype=float).reshape(-1, 3)
        temps = np.asarray(self.temps, dtype=float)
        if temps.ndim != 2 or temps.shape[1] != pts.shape[0]:
            raise ValueError("temps must be (n_steps+1, n_points)")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps >= 1")
        pts.setflags(write=False)
        temps.setflags(write=False)
        object.__setattr__(self, "fine_points", pts)
        object.__setattr__(self, "temps", temps)
        object.__setattr__(self, "_tree_cache", {})

    @property
    def dt_fine(self) -> float:
        return self.dt / self.substeps

    @property
    def n_steps(self) -> int:
        return self.temps.shape[0] - 1

    def active_ids(self, k: int) -> tuple[int, ...]:
        return active_indices(self.schedule, k)[0]

    def _active_tree(self, k: int):
        """KD-tree over the points active at step k, cached per epoch."""
        epoch = -1
        for i, layer in enumerate(self.schedule.layers):
            if layer.activation_step <= k:
                epoch = i
        cache: dict = self._tree_cache
        if epoch not in cache:
            ids = np.array(self.active_ids(k), dtype=np.int64)
            tree = cKDTree(self.fine_points[ids]) if ids.size else None
            cache[epoch] = (ids, tree)
        return cache[epoch]


def simulate_fine(
    positions: np.ndarray,
    schedule: DepositionSchedule,
    n_steps: int,
    dt: float,
    substeps: int = 1,
    diffusivity: float = 1.0,
    boundary_loss: float = 0.0,
    coupling_neighbors: int = 6,
) -> GroundTruthField:
    """Run the fine-grained process emulation and record its history.

    Explicit Euler on the k-nearest-neighbor graph Laplacian of the points
    currently in the active window, ``substeps`` sub-iterations per model
    step.  Newly activated layers enter at their deposition temperature.

    Raises:
        StabilityError: if the sub-iteration time step violates the
            explicit-Euler bound for any epoch's coupling graph.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if dt <= 0 or substeps < 1:
        raise ValueError("dt must be positive and substeps >= 1")
    dt_fine = dt / substeps
    n = pts.shape[0]
    temps = np.full((n_steps + 1, n), np.nan)

    ids_now: list[int] = []
    x = np.zeros(0)
    lap = None

    def apply_events(k: int, x: np.ndarray) -> np.ndarray:
        nonlocal ids_now, lap
        active, newly, retired = active_indices(schedule, k)
        if not newly and not retired:
            return x
        values = dict(zip(ids_now, x))
        for layer in schedule.layers:
            if layer.activation_step == k:
                for pid in layer.point_ids:
                    values[pid] = layer.deposition_temp
        ids_now = list(active)
        lap = None
        return np.array([values[i] for i in ids_now])

    def operator():
        nonlocal lap
        if lap is None and len(ids_now) >= 2:
            kk = min(coupling_neighbors, len(ids_now) - 1)
            lap = build_laplacian(pts[ids_now], kk)
            max_degree = lap.diagonal().max()
            if dt_fine * diffusivity * max_degree >= 1.0:
                raise StabilityError(
                    f"fine simulation violates stability: "
                    f"dt_fine*diffusivity*max_degree = "
                    f"{dt_fine * diffusivity * max_degree:.3g} >= 1"
                )
        return lap

    x = apply_events(0, x)
    operator()
    if ids_now:
        temps[0, ids_now] = x
    for k in range(n_steps):
        lap_k = operator()
        for _ in range(substeps):
            if lap_k is not None:
                x = (1.0 - boundary_loss * dt_fine) * (
                    x - dt_fine * diffusivity * (lap_k @ x)
                )
            else:
                x = (1.0 - boundary_loss * dt_fine) * x
        x = apply_events(k + 1, x)
        if ids_now:
            temps[k + 1, ids_now] = x
    return GroundTruthField(fine_points=pts, temps=temps, dt=dt,
                            substeps=substeps, schedule=schedule)


# --- ray casting --------------------------------------------------------------

_TRI_CHUNK = 2048


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross is surprisingly slow for batches of 3-vectors
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _cast_kernel_loop(dirs, v0, e1, e2, normal, b1, b2, plane_off, base_u,
                      base_v, degenerate, best):
    tol = 1e-9
    n_dirs = dirs.shape[0]
    n_tris = v0.shape[0]
    for i in range(n_dirs):
        d0, d1, d2 = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t_best = np.inf
        for j in range(n_tris):
            if degenerate[j]:
                continue
            denom = d0 * normal[j, 0] + d1 * normal[j, 1] + d2 * normal[j, 2]
            if abs(denom) <= 1e-14:
                continue
            t = plane_off[j] / denom
            if t <= tol or t >= t_best:
                continue
            u = base_u[j] + t * (d0 * b1[j, 0] + d1 * b1[j, 1] + d2 * b1[j, 2])
            if u < -tol:
                continue
            v = base_v[j] + t * (d0 * b2[j, 0] + d1 * b2[j, 1] + d2 * b2[j, 2])
            if v < -tol or u + v > 1.0 + tol:
                continue
            t_best = t
        best[i] = t_best
    return best


def _cast_kernel_numpy(dirs, v0, e1, e2, normal, b1, b2, plane_off, base_u,
                       base_v, degenerate, best):
    tol = 1e-9
    for start in range(0, v0.shape[0], _TRI_CHUNK):
        sl = slice(start, start + _TRI_CHUNK)
        denom = dirs @ normal[sl].T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = plane_off[None, sl] / denom
            u = base_u[None, sl] + t * (dirs @ b1[sl].T)
            v = base_v[None, sl] + t * (dirs @ b2[sl].T)
        hit = (
            (np.abs(denom) > 1e-14)
            & ~degenerate[None, sl]
            & (t > tol)
            & (u >= -tol)
            & (v >= -tol)
            & (u + v <= 1.0 + tol)
        )
        t = np.where(hit, t, np.inf)
        np.minimum(best, t.min(axis=1), out=best)
    return best


if numba is not None:
    _cast_kernel = numba.njit(cache=True, fastmath=False)(_cast_kernel_loop)
else:  # pragma: no cover
    _cast_kernel = _cast_kernel_numpy


def cast_rays(origin: np.ndarray, directions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Nearest-hit ray parameter per direction (inf for misses).

    Intersects every ray with every triangle via the plane equation plus a
    precomputed barycentric dual basis.  Directions need not be
    normalized; the returned t scales them.
    """
    origin = np.asarray(origin, dtype=float).reshape(3)
    dirs = np.ascontiguousarray(directions, dtype=float).reshape(-1, 3)
    tris = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
    best = np.full(dirs.shape[0], np.inf)
    if tris.shape[0] == 0:
        return best
    v0 = np.ascontiguousarray(tris[:, 0])
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    normal = _cross(e1, e2)
    # dual basis: (p - v0) = u e1 + v e2 for p in the triangle plane
    g11 = np.einsum("tj,tj->t", e1, e1)
    g12 = np.einsum("tj,tj->t", e1, e2)
    g22 = np.einsum("tj,tj->t", e2, e2)
    det_g = g11 * g22 - g12**2
    degenerate = det_g <= 1e-30
    det_g = np.where(degenerate, 1.0, det_g)
    b1 = (g22[:, None] * e1 - g12[:, None] * e2) / det_g[:, None]
    b2 = (g11[:, None] * e2 - g12[:, None] * e1) / det_g[:, None]
    to_v0 = v0 - origin
    plane_off = np.einsum("tj,tj->t", normal, to_v0)
    base_u = np.einsum("tj,tj->t", -to_v0, b1)
    base_v = np.einsum("tj,tj->t", -to_v0, b2)
    return _cast_kernel(dirs, v0, e1, e2, normal,
                        np.ascontiguousarray(b1), np.ascontiguousarray(b2),
                        plane_off, base_u, base_v, degenerate, best)


def _frustum_cull(verts_sensor: np.ndarray, faces: np.ndarray,
                  camera: CameraSpec) -> np.ndarray:
    """Faces that may intersect the view frustum (conservative keep)."""
    thw, thv = camera.tan_half_width, camera.tan_half_height
    x, y, z = verts_sensor[:, 0], verts_sensor[:, 1], verts_sensor[:, 2]
    outside = np.stack(
        [
            x <= 1e-12,
            y - thw * x > 0,
            -y - thw * x > 0,
            z - thv * x > 0,
            -z - thv * x > 0,
        ]
    )
    face_outside = outside[:, faces]  # (5, n_faces, 3)
    cull = face_outside.all(axis=2).any(axis=0)
    return np.flatnonzero(~cull)


def _pixel_directions(camera: CameraSpec) -> np.ndarray:
    """Sensor-frame ray directions per pixel, shape (h, w, 3)."""
    w, h = camera.width, camera.height
    u = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * camera.tan_half_width
    v = (2.0 * (np.arange(h) + 0.5) / h - 1.0) * camera.tan_half_height
    dirs = np.empty((h, w, 3))
    dirs[:, :, 0] = 1.0
    dirs[:, :, 1] = u[None, :]
    dirs[:, :, 2] = v[:, None]
    return dirs


def sample_image(
    field: GroundTruthField,
    mesh: TriMesh,
    pose: SensorPose,
    k: int,
    camera: CameraSpec,
) -> SensorFrame:
    """Render one noise-free frame of the emulated process at step ``k``.

    Each pixel ray is intersected with the mesh; hit pixels take the
    temperature of the nearest active fine point, misses read ambient (0).
    """
    if not 0 <= k <= field.n_steps:
        raise ValueError(f"step {k} outside stored history [0, {field.n_steps}]")
    dirs_sensor = _pixel_directions(camera).reshape(-1, 3)
    dirs_world = dirs_sensor @ pose.rotation.T
    verts_sensor = (mesh.vertices - pose.position) @ pose.rotation
    keep = _frustum_cull(verts_sensor, mesh.faces, camera)
    t = cast_rays(pose.position, dirs_world, mesh.vertices[mesh.faces[keep]])
    hit = np.isfinite(t)
    shape = (camera.height, camera.width)
    positions = np.full((t.size, 3), np.nan)
    positions[hit] = pose.position[None, :] + t[hit, None] * dirs_world[hit]
    values = np.zeros(t.size)
    source = np.full(t.size, -1, dtype=np.int64)
    ids, tree = field._active_tree(k)
    if tree is not None and np.any(hit):
        _, nearest = tree.query(positions[hit])
        source[hit] = ids[nearest]
        values[hit] = field.temps[k, source[hit]]
    return SensorFrame(
        values=values.reshape(shape),
        pixel_positions=positions.reshape(shape + (3,)),
        source_ids=source.reshape(shape),
        pose=pose,
        step=int(k),
        camera=camera,
    )


def add_noise(frame: SensorFrame, noise_std: float, rng_seed) -> SensorFrame:
    """Add i.i.d. Gaussian noise to every hit pixel (misses untouched)."""
    if noise_std < 0.0:
        raise ValueError("noise_std must be nonnegative")
    if noise_std == 0.0:
        return frame
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, noise_std, size=frame.values.shape)
    values = np.where(frame.hit_mask, frame.values + noise, frame.values)
    return SensorFrame(
        values=values,
        pixel_positions=frame.pixel_positions,
        source_ids=frame.source_ids,
        pose=frame.pose,
        step=frame.step,
        camera=frame.camera,
    )


# --- lookup table persistence --------------------------------------------------


def save_table(field: GroundTruthField, path) -> None:
    """Write the field as a self-describing little-endian binary table."""
    schedule_blob = json.dumps(field.schedule.to_json_dict()).encode("utf-8")
    n_rows, n_pts = field.temps.shape
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<HIQQd", TABLE_VERSION, field.substeps, n_rows, n_pts,
                             field.dt))
        fh.write(struct.pack("<Q", len(schedule_blob)))
        fh.write(schedule_blob)
        fh.write(field.fine_points.astype("<f8").tobytes())
        fh.write(field.temps.astype("<f8").tobytes())


def _read_exact(fh: io.BufferedReader, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TableFormatError(f"truncated lookup table while reading {what}")
    return data


def load_table(path) -> GroundTruthField:
    """Read a table written by :func:`save_table` (lossless round trip)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(TABLE_MAGIC))
        if magic != TABLE_MAGIC:
            raise TableFormatError(f"{path}: not a lookup table (bad magic)")
        header = _read_exact(fh, struct.calcsize("<HIQQd"), "header")
        version, substeps, n_rows, n_pts, dt = struct.unpack("<HIQQd", header)
        if version != TABLE_VERSION:
            raise TableFormatError(
                f"{path}: unsupported table version {version} "
                f"(expected {TABLE_VERSION})"
            )
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, "schedule length"))
        schedule = DepositionSchedule.from_json_dict(
            json.loads(_read_exact(fh, blob_len, "schedule").decode("utf-8"))
        )
        pts = np.frombuffer(
            _read_exact(fh, 24 * n_pts, "fine points"), dtype="<f8"
        ).reshape(n_pts, 3)
        temps = np.frombuffer(
            _read_exact(fh, 8 * n_rows * n_pts, "temperatures"), dtype="<f8"
        ).reshape(n_rows, n_pts)
        trailing = fh.read(1)
        if trailing:
            raise TableFormatError(f"{path}: trailing bytes after table payload")
    return GroundTruthField(fine_points=pts.copy(), temps=temps.copy(), dt=dt,
                            substeps=substeps, schedule=schedule)


def table_size_bytes(n_rows: int, n_points: int, schedule_blob_len: int) -> int:
    """Exact file size of a saved table, from the format definition."""
    return (
        len(TABLE_MAGIC)
        + struct.calcsize("<HIQQd")
        + 8
        + schedule_blob_len
        + 24 * n_points
        + 8 * n_rows * n_points
    )


def export_step_csv(field: GroundTruthField, k: int, path) -> None:
    """CSV dump of one stored step: ``point_id,x,y,z,temp,active``."""
    if not 0 <= k <= field.n_steps:
        raise ValueError(f"step {k} outside stored history [0, {field.n_steps}]")
    row = field.temps[k]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point_id,x,y,z,temp,active\n")
        for i, (p, temp) in enumerate(zip(field.fine_points, row)):
            active = int(np.isfinite(temp))
            fh.write(f"{i},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},"
                     f"{float(temp)!r},{active}\n")
