"""Active estimation of temperature fields on parts built layer by layer.

A mobile line-of-sight sensor is repeatedly re-aimed at the control point
the current belief singles out (hottest or most uncertain), its frame is
mapped onto the visible control points, and a time-varying Kalman filter
fuses the readings with a thermal process model that grows and shrinks as
material layers are deposited and retired.
"""

from .dynamics import (
    DepositionSchedule,
    LayerSpec,
    LtvThermalModel,
    StabilityError,
    active_indices,
    build_laplacian,
    process_noise,
    step_matrix,
)
from .geometry import (
    BoundingBox,
    ControlPointSet,
    MeshLoadError,
    ObservationMatrix,
    SensorPose,
    TriMesh,
    bounding_box,
    build_observation_matrix,
    frame_change,
    load_mesh,
    partition_visible,
    rotation_from_orientation,
    select_control_points,
)
from .groundtruth import (
    CameraSpec,
    GroundTruthField,
    SensorFrame,
    TableFormatError,
    add_noise,
    load_table,
    sample_image,
    save_table,
    simulate_fine,
)
from .kalman import KalmanState, MeasurementNoise, augment, predict, retire, update
from .part import PartSpec, build_part
from .perception import (
    ExperimentSetup,
    PerceptionTrace,
    Policy,
    PolicyKind,
    extract_measurements,
    next_pose,
    run_loop,
)

__version__ = "0.1.0"
