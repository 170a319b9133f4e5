"""Procedural build plans for a rectangular part with a concentric pocket.

The part is a rectangular frame (outer rectangle minus a centered pocket)
deposited layer by layer; each layer lays three concentric rectangular bead
loops spanning the wall thickness.  The builder produces the control points
(bead centers), their deposition schedule, and tessellated surface meshes of
the partially built part, one per deposition epoch.  The middle bead loop is
embedded inside the wall and its points are marked interior (never observed
directly); the outer and pocket-facing loops are exterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DepositionSchedule, LayerSpec
from .geometry import ControlPointSet, TriMesh

BEADS_PER_LAYER = 3


@dataclass(frozen=True)
class PartSpec:
    """Dimensions and deposition plan of the procedural part."""

    outer: tuple[float, float]
    pocket: tuple[float, float]
    n_layers: int
    layer_height: float = 2.0
    bead_width: float = 2.0
    point_spacing: float = 2.5
    layer_interval_steps: int = 80
    first_activation_step: int = 0
    deposition_temp: float = 500.0
    active_window: int = 4
    mesh_resolution: float = 2.0

    def __post_init__(self):
        ox, oy = self.outer
        px, py = self.pocket
        if ox <= 0 or oy <= 0:
            raise ValueError("outer dimensions must be positive")
        if px < 0 or py < 0:
            raise ValueError("pocket dimensions must be nonnegative")
        if px >= ox or py >= oy:
            raise ValueError("pocket must be strictly smaller than the outer rectangle")
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if self.layer_height <= 0 or self.point_spacing <= 0 or self.bead_width <= 0:
            raise ValueError("geometric parameters must be positive")
        if self.layer_interval_steps < 1:
            raise ValueError("layer_interval_steps must be >= 1")

    @property
    def wall_thickness(self) -> tuple[float, float]:
        return (
            0.5 * (self.outer[0] - self.pocket[0]),
            0.5 * (self.outer[1] - self.pocket[1]),
        )

    @property
    def height(self) -> float:
        return self.n_layers * self.layer_height

    def loop_half_dims(self, loop: int) -> tuple[float, float]:
        """Half-extents of bead loop ``loop`` (0 = outermost)."""
        tx, ty = self.wall_thickness
        inset = (loop + 0.5) / BEADS_PER_LAYER
        return (0.5 * self.outer[0] - inset * tx, 0.5 * self.outer[1] - inset * ty)


@dataclass(frozen=True)
class PartBuild:
    """Everything derived from a part spec for one run."""

    spec: PartSpec
    points: ControlPointSet
    schedule: DepositionSchedule
    meshes: tuple[TriMesh, ...]  # partial part after each layer, index = layer

    def mesh_at_epoch(self, epoch: int) -> TriMesh:
        if epoch < 0:
            raise ValueError("no mesh before the first layer is deposited")
        return self.meshes[min(epoch, len(self.meshes) - 1)]


def rectangle_loop_points(half_x: float, half_y: float, z: float, spacing: float) -> np.ndarray:
    """Points along a rectangle perimeter at height z, corners included.

    Each side is divided into roughly ``side / spacing`` equal segments;
    the shared corner of consecutive sides is emitted once.
    """
    corners = [
        (half_x, half_y),
        (-half_x, half_y),
        (-half_x, -half_y),
        (half_x, -half_y),
    ]
    pts: list[tuple[float, float, float]] = []
    for a, b in zip(corners, corners[1:] + corners[:1]):
        a = np.array(a)
        b = np.array(b)
        length = float(np.linalg.norm(b - a))
        n = max(1, round(length / spacing))
        for i in range(n):
            t = i / n
            p = a + t * (b - a)
            pts.append((float(p[0]), float(p[1]), z))
    out: list[tuple[float, float, float]] = []
    for p in pts:
        if not out or not np.allclose(p, out[-1]):
            out.append(p)
    if len(out) > 1 and np.allclose(out[0], out[-1]):
        out.pop()
    return np.array(out)


def _layer_points(spec: PartSpec, layer: int, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """All bead-center points of one layer and their interior flags."""
    z = (layer + 0.5) * spec.layer_height
    chunks = []
    interior = []
    for loop in range(BEADS_PER_LAYER):
        hx, hy = spec.loop_half_dims(loop)
        pts = rectangle_loop_points(hx, hy, z, spacing)
        chunks.append(pts)
        interior.append(np.full(pts.shape[0], loop == 1))
    return np.vstack(chunks), np.concatenate(interior)


def build_part(spec: PartSpec) -> PartBuild:
    """Control points, schedule and per-epoch meshes for the part."""
    positions = []
    interior = []
    layers = []
    next_id = 0
    for layer in range(spec.n_layers):
        pts, mask = _layer_points(spec, layer, spec.point_spacing)
        ids = tuple(range(next_id, next_id + pts.shape[0]))
        next_id += pts.shape[0]
        positions.append(pts)
        interior.append(mask)
        layers.append(
            LayerSpec(
                point_ids=ids,
                activation_step=spec.first_activation_step
                + layer * spec.layer_interval_steps,
                deposition_temp=spec.deposition_temp,
            )
        )
    points = ControlPointSet.from_points(np.vstack(positions), np.concatenate(interior))
    schedule = DepositionSchedule(layers=tuple(layers), active_window=spec.active_window)
    meshes = tuple(
        build_frame_mesh(
            spec.outer, spec.pocket, (layer + 1) * spec.layer_height,
            spec.mesh_resolution,
        )
        for layer in range(spec.n_layers)
    )
    return PartBuild(spec=spec, points=points, schedule=schedule, meshes=meshes)


def build_fine_points(spec: PartSpec, resolution_factor: int) -> tuple[np.ndarray, DepositionSchedule]:
    """Denser sampling of the same bead paths for the emulated process.

    ``resolution_factor`` multiplies the linear point density along each
    loop; the layer timing and window match the control-point schedule.
    """
    if resolution_factor < 1:
        raise ValueError("resolution_factor must be >= 1")
    spacing = spec.point_spacing / resolution_factor
    positions = []
    layers = []
    next_id = 0
    for layer in range(spec.n_layers):
        pts, _ = _layer_points(spec, layer, spacing)
        ids = tuple(range(next_id, next_id + pts.shape[0]))
        next_id += pts.shape[0]
        positions.append(pts)
        layers.append(
            LayerSpec(
                point_ids=ids,
                activation_step=spec.first_activation_step
                + layer * spec.layer_interval_steps,
                deposition_temp=spec.deposition_temp,
            )
        )
    schedule = DepositionSchedule(layers=tuple(layers), active_window=spec.active_window)
    return np.vstack(positions), schedule


# --- surface meshing ---------------------------------------------------------


def _grid_patch(origin, u_vec, v_vec, nu: int, nv: int):
    """Triangulated planar patch spanned by ``u_vec`` and ``v_vec``."""
    origin = np.asarray(origin, dtype=float)
    u_vec = np.asarray(u_vec, dtype=float)
    v_vec = np.asarray(v_vec, dtype=float)
    us = np.linspace(0.0, 1.0, nu + 1)
    vs = np.linspace(0.0, 1.0, nv + 1)
    verts = (
        origin[None, None, :]
        + us[:, None, None] * u_vec[None, None, :]
        + vs[None, :, None] * v_vec[None, None, :]
    ).reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * (nv + 1) + j
            b = a + nv + 1
            faces.append([a, b, a + 1])
            faces.append([a + 1, b, b + 1])
    return verts, np.array(faces, dtype=np.int64)


def _segments(length: float, resolution: float) -> int:
    return max(1, round(length / resolution))


def build_frame_mesh(
    outer: tuple[float, float],
    pocket: tuple[float, float],
    height: float,
    resolution: float = 2.0,
) -> TriMesh:
    """Tessellated surface of the (partial) part at the given height.

    A zero-size pocket degenerates to a solid box.  Patches are not welded;
    the mesh is used for vertex statistics and ray casting only.
    """
    ox, oy = outer
    px, py = pocket
    hx, hy = 0.5 * ox, 0.5 * oy
    qx, qy = 0.5 * px, 0.5 * py
    all_verts = []
    all_faces = []

    def add(origin, u_vec, v_vec, lu, lv):
        verts, faces = _grid_patch(origin, u_vec, v_vec,
                                   _segments(lu, resolution), _segments(lv, resolution))
        offset = sum(v.shape[0] for v in all_verts)
        all_verts.append(verts)
        all_faces.append(faces + offset)

    z_top = height
    # outer walls
    add((-hx, -hy, 0), (2 * hx, 0, 0), (0, 0, z_top), ox, z_top)   # y = -hy
    add((-hx, hy, 0), (2 * hx, 0, 0), (0, 0, z_top), ox, z_top)    # y = +hy
    add((-hx, -hy, 0), (0, 2 * hy, 0), (0, 0, z_top), oy, z_top)   # x = -hx
    add((hx, -hy, 0), (0, 2 * hy, 0), (0, 0, z_top), oy, z_top)    # x = +hx
    if px > 0.0 and py > 0.0:
        # pocket walls
        add((-qx, -qy, 0), (2 * qx, 0, 0), (0, 0, z_top), px, z_top)
        add((-qx, qy, 0), (2 * qx, 0, 0), (0, 0, z_top), px, z_top)
        add((-qx, -qy, 0), (0, 2 * qy, 0), (0, 0, z_top), py, z_top)
        add((qx, -qy, 0), (0, 2 * qy, 0), (0, 0, z_top), py, z_top)
        # top and bottom rings: north/south bands full width, east/west between
        for z in (0.0, z_top):
            add((-hx, qy, z), (2 * hx, 0, 0), (0, hy - qy, 0), ox, hy - qy)
            add((-hx, -hy, z), (2 * hx, 0, 0), (0, hy - qy, 0), ox, hy - qy)
            add((qx, -qy, z), (hx - qx, 0, 0), (0, 2 * qy, 0), hx - qx, py)
            add((-hx, -qy, z), (hx - qx, 0, 0), (0, 2 * qy, 0), hx - qx, py)
    else:
        for z in (0.0, z_top):
            add((-hx, -hy, z), (2 * hx, 0, 0), (0, 2 * hy, 0), ox, oy)
    return TriMesh(vertices=np.vstack(all_verts), faces=np.vstack(all_faces))
