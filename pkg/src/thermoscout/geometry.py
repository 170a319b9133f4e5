"""Mesh handling, control-point reduction and line-of-sight partitioning.

Coordinate conventions: world frame is right-handed with arbitrary units.
The sensor frame places the sensor at the origin looking along +x, so after
rotating a scene into the sensor frame, "in front of the sensor" means
increasing x.  Rotations are stored as 3x3 matrices whose first column is
the sensor viewing direction.

All operations are pure and all values immutable after construction
(arrays are marked read-only), so everything here is safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

X_AXIS = np.array([1.0, 0.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])


class MeshLoadError(ValueError):
    """Raised for unreadable or malformed mesh files."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TriMesh:
    """Triangle surface mesh: vertices (n, 3) float and faces (m, 3) int."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _readonly(np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        f = _readonly(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if v.shape[0] < 1:
            raise ValueError("mesh must have at least one vertex")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError(
                f"face index out of range: max {f.max()} for {v.shape[0]} vertices"
            )
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def triangles(self) -> np.ndarray:
        """Vertex coordinates per face, shape (m, 3, 3)."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = _readonly(np.asarray(self.min_corner, dtype=float).reshape(3))
        hi = _readonly(np.asarray(self.max_corner, dtype=float).reshape(3))
        if np.any(lo > hi):
            raise ValueError("min_corner must be <= max_corner componentwise")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)


@dataclass(frozen=True)
class ControlPointSet:
    """Reduced point set carrying the spatial locations of the state entries.

    ``indices`` are mesh-vertex picks; ``extra_points`` are manually added
    surface or interior locations.  ``positions`` stacks both groups (mesh
    picks first) and ``center`` is the componentwise mean of all positions.
    Point ids used elsewhere (schedules, filter states) are row indices into
    ``positions``.
    """

    indices: tuple[int, ...]
    extra_points: np.ndarray
    positions: np.ndarray
    interior_mask: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        extra = _readonly(np.asarray(self.extra_points, dtype=float).reshape(-1, 3))
        pos = _readonly(np.asarray(self.positions, dtype=float).reshape(-1, 3))
        mask = _readonly(np.asarray(self.interior_mask, dtype=bool).reshape(-1))
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate mesh-vertex indices in control point set")
        if pos.shape[0] != len(idx) + extra.shape[0]:
            raise ValueError("positions row count must be |indices| + |extra_points|")
        if mask.shape[0] != pos.shape[0]:
            raise ValueError("interior mask length must match point count")
        ctr = _readonly(np.asarray(self.center, dtype=float).reshape(3))
        if pos.shape[0] and not np.allclose(ctr, pos.mean(axis=0), atol=1e-12):
            raise ValueError("center must be the mean of positions")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "extra_points", extra)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "interior_mask", mask)
        object.__setattr__(self, "center", ctr)

    @classmethod
    def from_mesh_selection(cls, mesh: TriMesh, indices) -> "ControlPointSet":
        idx = tuple(int(i) for i in indices)
        pos = mesh.vertices[list(idx)] if idx else np.empty((0, 3))
        return cls(
            indices=idx,
            extra_points=np.empty((0, 3)),
            positions=pos,
            interior_mask=np.zeros(len(idx), dtype=bool),
            center=pos.mean(axis=0) if idx else np.zeros(3),
        )

    @classmethod
    def from_points(cls, points: np.ndarray, interior_mask=None) -> "ControlPointSet":
        """Build a set made entirely of manually specified points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if interior_mask is None:
            interior_mask = np.zeros(pts.shape[0], dtype=bool)
        return cls(
            indices=(),
            extra_points=pts,
            positions=pts,
            interior_mask=np.asarray(interior_mask, dtype=bool),
            center=pts.mean(axis=0) if pts.size else np.zeros(3),
        )

    def with_extra_points(self, points: np.ndarray, interior: bool = True) -> "ControlPointSet":
        """Return a copy with additional points appended (center recomputed)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        extra = np.vstack([self.extra_points, pts])
        pos = np.vstack([self.positions, pts])
        mask = np.concatenate(
            [self.interior_mask, np.full(pts.shape[0], bool(interior))]
        )
        return ControlPointSet(
            indices=self.indices,
            extra_points=extra,
            positions=pos,
            interior_mask=mask,
            center=pos.mean(axis=0),
        )

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SensorPose:
    """Sensor position, unit viewing direction and full rotation matrix.

    ``rotation`` maps sensor-frame coordinates to world coordinates; its
    first column equals ``orientation``.
    """

    position: np.ndarray
    orientation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        p = _readonly(np.asarray(self.position, dtype=float).reshape(3))
        o = _readonly(np.asarray(self.orientation, dtype=float).reshape(3))
        r = _readonly(np.asarray(self.rotation, dtype=float).reshape(3, 3))
        if abs(np.linalg.norm(o) - 1.0) > 1e-9:
            raise ValueError("orientation must be a unit vector")
        if np.max(np.abs(r @ X_AXIS - o)) > 1e-9:
            raise ValueError("rotation must map +x to the orientation")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", o)
        object.__setattr__(self, "rotation", r)

    @classmethod
    def aimed(cls, position, orientation) -> "SensorPose":
        """Pose at ``position`` looking along ``orientation`` (normalized)."""
        o = np.asarray(orientation, dtype=float).reshape(3)
        n = np.linalg.norm(o)
        if n == 0.0:
            raise ValueError("orientation must be nonzero")
        o = o / n
        return cls(position=np.asarray(position, dtype=float), orientation=o,
                   rotation=rotation_from_orientation(o))


@dataclass(frozen=True)
class ObservationMatrix:
    """Selection matrix picking observed state entries, stored as row indices.

    Row i of the dense matrix is the standard basis row for ``rows[i]``;
    rows are kept in ascending index order.
    """

    rows: tuple[int, ...]
    state_dim: int

    def __post_init__(self):
        rows = tuple(int(r) for r in self.rows)
        if len(set(rows)) != len(rows):
            raise ValueError("duplicate observation indices")
        if any(r < 0 or r >= self.state_dim for r in rows):
            raise ValueError("observation index out of range for state dimension")
        if list(rows) != sorted(rows):
            raise ValueError("observation rows must be in ascending order")
        object.__setattr__(self, "rows", rows)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def as_dense(self) -> np.ndarray:
        c = np.zeros((len(self.rows), self.state_dim))
        c[np.arange(len(self.rows)), list(self.rows)] = 1.0
        return c

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Extract the observed coordinates of ``x`` (exact indexing)."""
        x = np.asarray(x)
        return x[list(self.rows)]


# --- mesh I/O -------------------------------------------------------------

_IGNORED_OBJ_KEYS = {"#", "vn", "vt", "s", "o", "g", "mtllib", "usemtl", "l", "vp"}


def load_mesh(path) -> TriMesh:
    """Load a triangle mesh from a Wavefront OBJ file.

    Supports ``v x y z`` and triangular ``f`` records (``i``, ``i/j``,
    ``i//k`` or ``i/j/k`` vertex references, 1-based).  Normals, texture
    coordinates, comments and grouping statements are ignored.  Quads and
    higher polygons are rejected.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                tokens = line.split()
                key = tokens[0]
                if key == "v":
                    if len(tokens) < 4:
                        raise MeshLoadError(
                            f"{path}:{lineno}: vertex record needs 3 coordinates"
                        )
                    try:
                        vertices.append([float(t) for t in tokens[1:4]])
                    except ValueError as exc:
                        raise MeshLoadError(
                            f"{path}:{lineno}: bad vertex coordinate ({exc})"
                        ) from None
                elif key == "f":
                    refs = tokens[1:]
                    if len(refs) < 3:
                        raise MeshLoadError(
                            f"{path}:{lineno}: face needs 3 vertex references"
                        )
                    if len(refs) > 3:
                        raise MeshLoadError(
                            f"{path}:{lineno}: only triangular faces are supported "
                            f"(got {len(refs)} vertices)"
                        )
                    face = []
                    for ref in refs:
                        first = ref.split("/")[0]
                        try:
                            idx = int(first)
                        except ValueError:
                            raise MeshLoadError(
                                f"{path}:{lineno}: bad face index {first!r}"
                            ) from None
                        if idx < 1:
                            raise MeshLoadError(
                                f"{path}:{lineno}: face indices must be positive "
                                f"(got {idx})"
                            )
                        face.append(idx - 1)
                    faces.append(face)
                elif key in _IGNORED_OBJ_KEYS or key.startswith("#"):
                    continue
                else:
                    raise MeshLoadError(f"{path}:{lineno}: unsupported record {key!r}")
    except OSError as exc:
        raise MeshLoadError(f"cannot read mesh file {path}: {exc}") from exc
    if not vertices:
        raise MeshLoadError(f"{path}: no vertices found")
    if faces:
        fmax = max(max(f) for f in faces)
        if fmax >= len(vertices):
            raise MeshLoadError(
                f"{path}: face index {fmax + 1} out of range "
                f"({len(vertices)} vertices)"
            )
    return TriMesh(vertices=np.array(vertices), faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_control_points_csv(points: ControlPointSet, path) -> None:
    """Debug export: one row per control point, ``index,x,y,z,interior``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,x,y,z,interior\n")
        for i, (p, interior) in enumerate(zip(points.positions, points.interior_mask)):
            fh.write(f"{i},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},"
                     f"{int(interior)}\n")


# --- control point reduction ----------------------------------------------


def bounding_box(mesh: TriMesh) -> BoundingBox:
    """Componentwise extrema of the mesh vertices."""
    if mesh.n_vertices == 0:
        raise ValueError("empty mesh has no bounding box")
    return BoundingBox(
        min_corner=mesh.vertices.min(axis=0),
        max_corner=mesh.vertices.max(axis=0),
    )


def _axis_samples(lo: float, hi: float, count: int) -> np.ndarray:
    if count == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def select_control_points(mesh: TriMesh, grid: tuple[int, int, int]) -> ControlPointSet:
    """Reduce the mesh to the vertices nearest a uniform bounding-box grid.

    The grid spans the bounding box inclusively (a single sample on an axis
    sits at the box center).  Each grid point contributes the nearest mesh
    vertex; duplicates keep the first occurrence in grid linear order
    (axis 0 slowest).
    """
    m1, m2, m3 = (int(g) for g in grid)
    if min(m1, m2, m3) < 1:
        raise ValueError("grid dimensions must be >= 1")
    box = bounding_box(mesh)
    axes = [
        _axis_samples(box.min_corner[d], box.max_corner[d], g)
        for d, g in enumerate((m1, m2, m3))
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    targets = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    # Brute-force nearest is fine at these sizes and keeps ties on the
    # lowest vertex index.
    d2 = ((targets[:, None, :] - mesh.vertices[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    seen: set[int] = set()
    picks: list[int] = []
    for idx in nearest:
        i = int(idx)
        if i not in seen:
            seen.add(i)
            picks.append(i)
    return ControlPointSet.from_mesh_selection(mesh, picks)


# --- sensor-frame transforms ------------------------------------------------


def rotation_from_orientation(direction: np.ndarray) -> np.ndarray:
    """Rotation whose first column is ``direction`` (a unit vector).

    Completed by rotating +x onto the direction about the axis
    ``x cross direction``; the antiparallel case rotates by pi about +z.
    """
    d = np.asarray(direction, dtype=float).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    cross = np.cross(X_AXIS, d)
    s = np.linalg.norm(cross)
    c = float(d[0])
    if s < 1e-15:
        if c > 0.0:
            return np.eye(3)
        return np.diag([-1.0, -1.0, 1.0])
    axis = cross / s
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def to_sensor_frame(points: np.ndarray, pose: SensorPose) -> np.ndarray:
    """Map world points into the sensor frame (sensor at origin, +x ahead)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return (pts - pose.position) @ pose.rotation


def from_sensor_frame(points: np.ndarray, pose: SensorPose) -> np.ndarray:
    """Inverse of :func:`to_sensor_frame`."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ pose.rotation.T + pose.position


def frame_change(mesh: TriMesh, pose: SensorPose) -> np.ndarray:
    """Mesh vertices expressed in the sensor frame."""
    return to_sensor_frame(mesh.vertices, pose)


# --- visibility partition ----------------------------------------------------


def partition_visible(
    mesh_rot: np.ndarray,
    control_points_rot: np.ndarray,
    slice_fraction: float = 0.1,
) -> np.ndarray:
    """Split control points into observed/occluded by the slice-average rule.

    Works in the sensor frame.  A horizontal slice of mesh vertices around
    y = 0 (half-width ``slice_fraction`` of the total y extent) defines a
    depth threshold as the mean slice x-coordinate; control points strictly
    nearer the sensor than the threshold are reported observed.

    Args:
        mesh_rot: mesh vertices in the sensor frame, shape (n, 3).
        control_points_rot: control point positions in the sensor frame.
        slice_fraction: slice half-width as a fraction of the y extent,
            in (0, 0.5].

    Returns:
        Ascending indices of the observed control points.

    Raises:
        ValueError: if no mesh vertex falls inside the slice.
    """
    if not 0.0 < slice_fraction <= 0.5:
        raise ValueError("slice_fraction must be in (0, 0.5]")
    verts = np.asarray(mesh_rot, dtype=float).reshape(-1, 3)
    pts = np.asarray(control_points_rot, dtype=float).reshape(-1, 3)
    y = verts[:, 1]
    half_width = slice_fraction * (y.max() - y.min())
    in_slice = np.abs(y) <= half_width
    if not np.any(in_slice):
        raise ValueError(
            "no mesh vertices inside the y slice; geometry and slice_fraction "
            "are inconsistent"
        )
    x_threshold = verts[in_slice, 0].mean()
    return np.flatnonzero(pts[:, 0] < x_threshold)


def build_observation_matrix(observed, state_dim: int) -> ObservationMatrix:
    """Selection matrix for the observed indices (rows ascending)."""
    rows = sorted(int(i) for i in observed)
    return ObservationMatrix(rows=tuple(rows), state_dim=int(state_dim))
