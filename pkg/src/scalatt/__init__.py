"""Attitude estimation from scalar measurements.

A deterministic linear time-varying Kalman filter on the vectorized
attitude, measurement builders for scalar modalities (full/partial vectors,
tilt, landmark pairs, airspeed probes), a numerical uniform-observability
analyzer and a Monte Carlo simulation harness.
"""

from .so3 import (
    attitude_error_angle,
    exp_so3,
    is_rotation,
    project_to_so3,
    skew,
    state_to_matrix,
    vec_transpose,
)
from .measurements import (
    GYRO_CHANNEL_ID,
    ChannelInfo,
    MeasurementStream,
    ScalarChannel,
    ScalarMeasurement,
    SensorSchedule,
    build_output_matrix,
    kron_row,
    landmark_measurement,
    pitot_channel,
    read_sensor_log,
    tilt_channel,
    vector_channels,
    write_sensor_log,
)
from .filtering import (
    FilterConfig,
    FilterNumericsError,
    FilterRun,
    FilterState,
    discrete_transition,
    fixed_gain_update,
    gyro_process_noise,
    kinematics_matrix,
    measurement_weight_inverse,
    noise_propagation,
    predict,
    reconstruct_and_reset,
    run_discrete_filter,
    update,
)
from .sim import (
    ConstantRates,
    LandmarkSensor,
    MonteCarloSpec,
    PitotSensor,
    SensorSuite,
    SinusoidRates,
    TiltSensor,
    TrajectoryProfile,
    TruthTrajectory,
    VectorSensor,
    integrate_truth,
    random_initial_estimate,
    run_monte_carlo,
    synthesize_measurements,
)

__version__ = "0.1.0"
