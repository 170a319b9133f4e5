import numpy as np
import pytest

from thermoscout.part import (
    PartSpec,
    build_fine_points,
    build_frame_mesh,
    build_part,
    rectangle_loop_points,
)


def spec(**kw):
    defaults = dict(outer=(16.0, 12.0), pocket=(8.0, 4.0), n_layers=3,
                    layer_height=2.0, bead_width=2.0, point_spacing=2.5,
                    layer_interval_steps=10)
    defaults.update(kw)
    return PartSpec(**defaults)


def test_pocket_must_fit_inside_outer():
    with pytest.raises(ValueError, match="smaller"):
        spec(pocket=(16.0, 4.0))
    with pytest.raises(ValueError, match="smaller"):
        spec(pocket=(20.0, 14.0))


def test_degenerate_pocket_gives_nested_loops():
    s = spec(pocket=(0.0, 0.0), n_layers=1)
    half_dims = [s.loop_half_dims(j) for j in range(3)]
    for (ox, oy), (ix, iy) in zip(half_dims, half_dims[1:]):
        assert ix < ox and iy < oy
    # innermost loop is closest to the part center
    inner = half_dims[-1]
    assert max(inner) < 0.25 * max(s.outer)
    built = build_part(s)
    assert built.points.n_points > 0


def test_every_point_in_exactly_one_layer():
    built = build_part(spec())
    seen: set[int] = set()
    for layer in built.schedule.layers:
        for pid in layer.point_ids:
            assert pid not in seen
            seen.add(pid)
    assert seen == set(range(built.points.n_points))


def test_activation_steps_strictly_increasing():
    built = build_part(spec(n_layers=5, layer_interval_steps=7,
                            first_activation_step=3))
    steps = [layer.activation_step for layer in built.schedule.layers]
    assert steps == [3, 10, 17, 24, 31]
    assert all(b > a for a, b in zip(steps, steps[1:]))


def test_middle_loop_marked_interior():
    built = build_part(spec(n_layers=1))
    s = spec(n_layers=1)
    interior_pts = built.points.positions[built.points.interior_mask]
    hx1, hy1 = s.loop_half_dims(1)
    # interior points lie on the middle loop rectangle
    on_loop = (
        np.isclose(np.abs(interior_pts[:, 0]), hx1)
        | np.isclose(np.abs(interior_pts[:, 1]), hy1)
    )
    assert on_loop.all()
    assert 0 < interior_pts.shape[0] < built.points.n_points


def test_rectangle_loop_points_spacing_and_corners():
    pts = rectangle_loop_points(4.0, 2.0, 1.0, 2.0)
    assert np.allclose(pts[:, 2], 1.0)
    corners = {(4.0, 2.0), (-4.0, 2.0), (-4.0, -2.0), (4.0, -2.0)}
    have = {(round(p[0], 9), round(p[1], 9)) for p in pts}
    assert corners <= have
    assert len(pts) == len({tuple(np.round(p, 9)) for p in pts})
    d = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    assert d.max() <= 2.0 + 1e-9


def test_layer_heights_and_mesh_growth():
    built = build_part(spec(n_layers=3))
    zs = built.points.positions[:, 2]
    assert set(np.round(np.unique(zs), 9)) == {1.0, 3.0, 5.0}
    for i, mesh in enumerate(built.meshes):
        assert mesh.vertices[:, 2].max() == pytest.approx((i + 1) * 2.0)
    assert built.mesh_at_epoch(10) is built.meshes[-1]
    with pytest.raises(ValueError):
        built.mesh_at_epoch(-1)


def test_fine_points_denser_same_schedule():
    s = spec()
    built = build_part(s)
    fine_pos, fine_sched = build_fine_points(s, 4)
    assert fine_pos.shape[0] >= 4 * built.points.n_points
    assert [a.activation_step for a in fine_sched.layers] == \
        [a.activation_step for a in built.schedule.layers]
    assert fine_sched.active_window == built.schedule.active_window


def test_solid_box_mesh_when_no_pocket():
    mesh = build_frame_mesh((8.0, 6.0), (0.0, 0.0), 4.0, resolution=2.0)
    assert mesh.n_faces > 0
    # bounding box matches the box dimensions
    assert mesh.vertices[:, 0].min() == pytest.approx(-4.0)
    assert mesh.vertices[:, 0].max() == pytest.approx(4.0)
    assert mesh.vertices[:, 2].max() == pytest.approx(4.0)


def test_frame_mesh_has_pocket_walls():
    mesh = build_frame_mesh((8.0, 6.0), (4.0, 2.0), 4.0, resolution=1.0)
    inner = mesh.vertices[
        np.isclose(np.abs(mesh.vertices[:, 0]), 2.0)
        & (np.abs(mesh.vertices[:, 1]) <= 1.0 + 1e-9)
    ]
    assert inner.size > 0
