import numpy as np
import pytest

from thermoscout.dynamics import (
    DepositionSchedule,
    LayerSpec,
    LtvThermalModel,
    StabilityError,
    step_matrix,
)
from thermoscout.geometry import ControlPointSet, SensorPose, TriMesh
from thermoscout.groundtruth import (
    CameraSpec,
    TableFormatError,
    add_noise,
    export_step_csv,
    load_table,
    sample_image,
    save_table,
    simulate_fine,
    table_size_bytes,
)

from oracles import icosphere


def line_points(n, spacing=1.0):
    pts = np.zeros((n, 3))
    pts[:, 0] = np.arange(n) * spacing
    return pts


def one_layer(n, temp=100.0, window=4):
    return DepositionSchedule(
        layers=(LayerSpec(point_ids=tuple(range(n)), activation_step=0,
                          deposition_temp=temp),),
        active_window=window,
    )


@pytest.fixture(scope="module")
def sphere_field():
    verts, faces = icosphere(3)
    mesh = TriMesh(vertices=verts, faces=faces)
    field = simulate_fine(verts, one_layer(verts.shape[0], temp=300.0),
                          n_steps=5, dt=0.1, substeps=1, diffusivity=0.001,
                          coupling_neighbors=3)
    return mesh, field


# --- fine simulation ------------------------------------------------------------


def test_uniform_field_is_fixed_point():
    field = simulate_fine(line_points(6), one_layer(6, temp=42.0), n_steps=50,
                          dt=0.1, diffusivity=0.2, coupling_neighbors=2)
    np.testing.assert_allclose(field.temps, 42.0, atol=1e-9)


def test_single_hot_point_conserves_heat():
    # layer of cold points at step 0, one hot point joins at step 1
    n = 20
    schedule = DepositionSchedule(
        layers=(
            LayerSpec(point_ids=tuple(range(n - 1)), activation_step=0,
                      deposition_temp=0.0),
            LayerSpec(point_ids=(n - 1,), activation_step=1,
                      deposition_temp=500.0),
        ),
        active_window=4,
    )
    pts = line_points(n)
    pts[-1] = [9.5, 1.0, 0.0]  # hot point near the middle of the chain
    field = simulate_fine(pts, schedule, n_steps=1001, dt=0.05,
                          diffusivity=0.5, coupling_neighbors=3,
                          boundary_loss=0.0)
    totals = np.nansum(field.temps, axis=1)
    assert abs(totals[1] - 500.0) < 1e-9
    assert np.all(np.abs(totals[1:] - 500.0) < 1e-6 * 500.0)


def test_fine_matches_ltv_model_when_identical():
    pts = line_points(8, spacing=1.5)
    schedule = one_layer(8, temp=250.0)
    dt, diff = 0.1, 0.3
    field = simulate_fine(pts, schedule, n_steps=40, dt=dt, substeps=1,
                          diffusivity=diff, coupling_neighbors=3,
                          boundary_loss=0.02)
    model = LtvThermalModel(
        points=ControlPointSet.from_points(pts), schedule=schedule,
        diffusivity=diff, dt=dt, coupling_neighbors=3, boundary_loss=0.02,
    )
    a = step_matrix(model, 0)
    x = np.full(8, 250.0)
    for k in range(40):
        x = a @ x
        np.testing.assert_allclose(field.temps[k + 1], x, atol=1e-9)


def test_fine_respects_active_window():
    schedule = DepositionSchedule(
        layers=(
            LayerSpec(point_ids=(0, 1), activation_step=0, deposition_temp=100.0),
            LayerSpec(point_ids=(2, 3), activation_step=5, deposition_temp=100.0),
            LayerSpec(point_ids=(4, 5), activation_step=10, deposition_temp=100.0),
        ),
        active_window=2,
    )
    field = simulate_fine(line_points(6), schedule, n_steps=15, dt=0.1,
                          diffusivity=0.1, coupling_neighbors=2)
    assert np.isnan(field.temps[0, 2:]).all()
    assert np.isfinite(field.temps[5, :4]).all()
    assert np.isnan(field.temps[5, 4:]).all()
    # first layer retired when the third activates
    assert np.isnan(field.temps[10, :2]).all()
    assert np.isfinite(field.temps[10, 2:]).all()


def test_cfl_violation_raises():
    with pytest.raises(StabilityError):
        simulate_fine(line_points(5, spacing=0.05), one_layer(5), n_steps=5,
                      dt=0.5, diffusivity=1.0, coupling_neighbors=2)


# --- imaging ---------------------------------------------------------------------


def test_sample_image_facing_away(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([3.0, 0, 0], [1.0, 0, 0])
    frame = sample_image(field, mesh, pose, 0, CameraSpec(8, 8))
    assert not frame.hit_mask.any()
    np.testing.assert_array_equal(frame.values, 0.0)
    assert np.isnan(frame.pixel_positions).all()


def test_sample_image_center_pixel_hits_sphere_front(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([3.0, 0, 0], [-1.0, 0, 0])
    cam = CameraSpec(9, 9, fov=np.deg2rad(40.0))
    frame = sample_image(field, mesh, pose, 0, cam)
    center = frame.pixel_positions[4, 4]
    np.testing.assert_allclose(center, [1.0, 0.0, 0.0], atol=0.05)
    assert frame.values[4, 4] == pytest.approx(300.0)


def test_sample_image_values_come_from_field(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([2.5, 0.3, -0.2], [-1.0, 0, 0])
    frame = sample_image(field, mesh, pose, 3, CameraSpec(12, 12))
    allowed = set(np.round(field.temps[3][np.isfinite(field.temps[3])], 12)) | {0.0}
    got = set(np.round(frame.values.ravel(), 12))
    assert got <= allowed


def test_sample_image_step_bounds(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([3.0, 0, 0], [-1.0, 0, 0])
    with pytest.raises(ValueError, match="history"):
        sample_image(field, mesh, pose, 99, CameraSpec(4, 4))


def test_sample_image_pose_equivariance(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([3.0, 0, 0], [-1.0, 0, 0])
    cam = CameraSpec(10, 6, fov=np.deg2rad(50.0))
    base = sample_image(field, mesh, pose, 2, cam)

    # rotate everything 90 degrees about z and translate: exact in floats
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    shift = np.array([2.0, -3.0, 5.0])
    verts2 = mesh.vertices @ rot.T + shift
    mesh2 = TriMesh(vertices=verts2, faces=mesh.faces)
    field2 = simulate_fine(field.fine_points @ rot.T + shift, field.schedule,
                           n_steps=field.n_steps, dt=field.dt,
                           substeps=field.substeps, diffusivity=0.001,
                           coupling_neighbors=3)
    pose2 = SensorPose(position=rot @ pose.position + shift,
                       orientation=rot @ pose.orientation,
                       rotation=rot @ pose.rotation)
    moved = sample_image(field2, mesh2, pose2, 2, cam)
    np.testing.assert_array_equal(moved.values, base.values)
    np.testing.assert_array_equal(moved.source_ids, base.source_ids)


def test_cast_kernel_fallback_agrees(sphere_field):
    import thermoscout.groundtruth as gt

    mesh, field = sphere_field
    pose = SensorPose.aimed([2.5, 0.1, -0.3], [-1.0, 0, 0])
    cam = CameraSpec(16, 16, fov=np.deg2rad(45.0))
    fast = sample_image(field, mesh, pose, 1, cam)
    original = gt._cast_kernel
    gt._cast_kernel = gt._cast_kernel_numpy
    try:
        slow = sample_image(field, mesh, pose, 1, cam)
    finally:
        gt._cast_kernel = original
    np.testing.assert_array_equal(fast.source_ids, slow.source_ids)
    np.testing.assert_allclose(fast.pixel_positions, slow.pixel_positions,
                               atol=1e-12)


# --- noise -----------------------------------------------------------------------


def test_add_noise_zero_sigma_identity(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([2.5, 0, 0], [-1.0, 0, 0])
    frame = sample_image(field, mesh, pose, 0, CameraSpec(6, 6))
    assert add_noise(frame, 0.0, 1) is frame


def test_add_noise_statistics(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([2.5, 0, 0], [-1.0, 0, 0])
    frame = sample_image(field, mesh, pose, 0, CameraSpec(320, 320))
    sigma = 2.0
    noisy = add_noise(frame, sigma, 42)
    diff = (noisy.values - frame.values)[frame.hit_mask]
    n = diff.size
    assert n > 1e4
    assert abs(diff.mean()) < 3 * sigma / np.sqrt(n)
    assert abs(diff.std() - sigma) < 0.1
    # misses untouched
    np.testing.assert_array_equal(noisy.values[~frame.hit_mask],
                                  frame.values[~frame.hit_mask])


def test_add_noise_deterministic_and_seed_dependent(sphere_field):
    mesh, field = sphere_field
    pose = SensorPose.aimed([2.5, 0, 0], [-1.0, 0, 0])
    frame = sample_image(field, mesh, pose, 0, CameraSpec(100, 100))
    a = add_noise(frame, 1.0, 7)
    b = add_noise(frame, 1.0, 7)
    c = add_noise(frame, 1.0, 8)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    da = (a.values - frame.values)[frame.hit_mask].ravel()[:10000]
    dc = (c.values - frame.values)[frame.hit_mask].ravel()[:10000]
    corr = np.corrcoef(da, dc)[0, 1]
    assert abs(corr) < 0.05


# --- lookup table ----------------------------------------------------------------


def test_table_round_trip_bitwise(tmp_path):
    schedule = DepositionSchedule(
        layers=(
            LayerSpec(point_ids=(0, 1, 2), activation_step=0, deposition_temp=75.0),
            LayerSpec(point_ids=(3, 4), activation_step=3, deposition_temp=50.0),
        ),
        active_window=1,
    )
    field = simulate_fine(line_points(5), schedule, n_steps=10, dt=0.25,
                          substeps=2, diffusivity=0.2, coupling_neighbors=2)
    path = tmp_path / "table.tslut"
    save_table(field, path)
    loaded = load_table(path)
    assert loaded.temps.tobytes() == field.temps.tobytes()
    assert loaded.fine_points.tobytes() == field.fine_points.tobytes()
    assert loaded.dt == field.dt
    assert loaded.substeps == field.substeps
    assert loaded.schedule == field.schedule


def test_table_size_formula(tmp_path):
    import json

    field = simulate_fine(line_points(7), one_layer(7), n_steps=12, dt=0.1,
                          diffusivity=0.1, coupling_neighbors=2)
    path = tmp_path / "table.tslut"
    save_table(field, path)
    blob = len(json.dumps(field.schedule.to_json_dict()).encode())
    assert path.stat().st_size == table_size_bytes(13, 7, blob)


def test_table_truncated_file(tmp_path):
    field = simulate_fine(line_points(5), one_layer(5), n_steps=4, dt=0.1,
                          diffusivity=0.1, coupling_neighbors=2)
    path = tmp_path / "table.tslut"
    save_table(field, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(TableFormatError, match="truncated"):
        load_table(path)


def test_table_bad_magic_and_version(tmp_path):
    field = simulate_fine(line_points(5), one_layer(5), n_steps=4, dt=0.1,
                          diffusivity=0.1, coupling_neighbors=2)
    path = tmp_path / "table.tslut"
    save_table(field, path)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.tslut"
    bad.write_bytes(b"NOPE!!" + bytes(data[6:]))
    with pytest.raises(TableFormatError, match="magic"):
        load_table(bad)
    data[6] = 99  # version field
    bad.write_bytes(bytes(data))
    with pytest.raises(TableFormatError, match="version"):
        load_table(bad)


def test_export_step_csv(tmp_path):
    schedule = DepositionSchedule(
        layers=(
            LayerSpec(point_ids=(0, 1), activation_step=0, deposition_temp=75.0),
            LayerSpec(point_ids=(2,), activation_step=2, deposition_temp=50.0),
        ),
        active_window=1,
    )
    field = simulate_fine(line_points(3), schedule, n_steps=4, dt=0.1,
                          diffusivity=0.05, coupling_neighbors=1)
    path = tmp_path / "step.csv"
    export_step_csv(field, 0, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "point_id,x,y,z,temp,active"
    assert len(lines) == 4
    assert lines[1].endswith(",1")
    assert lines[3].endswith(",0")  # third point inactive at step 0
