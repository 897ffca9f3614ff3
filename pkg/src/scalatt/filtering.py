"""Deterministic LTV Kalman filter on the vectorized attitude state.

The attitude is carried as the 9-vector of stacked rows of R (equivalently
the columns of R^T). Rotation kinematics then become a linear time-varying
system driven by the angular rate, scalar measurements become linear output
rows, and a standard Kalman recursion applies without linearization. A
per-step SVD projection reconstructs a proper rotation and (optionally)
resets the raw state onto it.

Two gain laws are provided: the Riccati recursion (`riccati` mode) and the
constant-covariance output-injection law K = C^T Q (`fixed_gain` mode).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measurements import MeasurementStream, SensorSchedule, build_output_matrix
from .so3 import exp_so3, project_to_so3, skew, state_to_matrix, vec_transpose

#: Fail the update if the innovation matrix conditioning exceeds this.
INNOVATION_COND_LIMIT = 1e14

_I9 = np.eye(9)
_I3 = np.eye(3)


class FilterNumericsError(RuntimeError):
    """Raised when the innovation solve is too ill-conditioned to trust."""


@dataclass
class FilterState:
    """Estimator state: 9-vector estimate, covariance, time and gain mode."""

    x_hat: np.ndarray
    P: np.ndarray
    t: float = 0.0
    mode: str = "riccati"

    def __post_init__(self):
        self.x_hat = np.asarray(self.x_hat, dtype=float).reshape(9)
        self.P = np.asarray(self.P, dtype=float).reshape(9, 9)
        if not np.all(np.isfinite(self.x_hat)):
            raise ValueError("state estimate must be finite")
        if np.max(np.abs(self.P - self.P.T)) > 1e-9:
            raise ValueError("covariance must be symmetric")


@dataclass
class FilterConfig:
    """Tuning and behavior switches for the discrete filter runner.

    ``gyro_cov`` may be a scalar variance or a full 3x3 covariance of the
    angular-rate noise. ``initial_rotation`` / ``initial_state`` set the
    starting estimate (rotation wins if both are given); default is identity.

    ``rate_scaled_weights`` selects the update weighting: False (default)
    weights each record with its per-sample noise variance plus the floor;
    True divides the variance by the channel rate first (see
    :func:`measurement_weight_inverse`). The rate-scaled form over-trusts
    each sample by the rate factor and destabilizes the partial-vector
    scenarios, so it is off by default and kept for study.
    """

    mode: str = "riccati"
    imu_rate_hz: float = 1000.0
    p0_scale: float = 1.0
    m_floor: float = 1e-9
    q_floor: float = 1e-9
    reset_enabled: bool = True
    gyro_cov: np.ndarray | float = 0.0
    fixed_gain_scale: float = 0.5
    rate_scaled_weights: bool = False
    initial_rotation: np.ndarray | None = None
    initial_state: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("riccati", "fixed_gain"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if np.isscalar(self.gyro_cov):
            self.gyro_cov = float(self.gyro_cov) * _I3
        else:
            self.gyro_cov = np.asarray(self.gyro_cov, dtype=float).reshape(3, 3)
        if self.imu_rate_hz <= 0:
            raise ValueError("imu_rate_hz must be > 0")
        if self.m_floor < 0 or self.q_floor < 0:
            raise ValueError("noise floors must be >= 0")

    def initial_filter_state(self) -> FilterState:
        if self.initial_rotation is not None:
            x0 = vec_transpose(self.initial_rotation)
        elif self.initial_state is not None:
            x0 = np.asarray(self.initial_state, dtype=float).reshape(9).copy()
        else:
            x0 = vec_transpose(_I3)
        return FilterState(x0, self.p0_scale * _I9, 0.0, self.mode)


def kinematics_matrix(omega) -> np.ndarray:
    """Continuous-time 9x9 system matrix: block-diagonal -skew(omega).

    Satisfies d/dt vec_transpose(R) = kinematics_matrix(omega) @
    vec_transpose(R) for the attitude kinematics driven by body rates.
    """
    return np.kron(_I3, -skew(omega))


def discrete_transition(omega, tau: float) -> np.ndarray:
    """Exact zero-order-hold transition over tau: block-diagonal exp(-skew(omega) tau)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return np.kron(_I3, exp_so3(-np.asarray(omega, dtype=float) * tau))


def noise_propagation(x_hat) -> np.ndarray:
    """9x3 matrix mapping angular-rate noise into state-rate noise.

    Stacks skew(block_i) for the three 3-blocks of the state; each block is
    antisymmetric by construction.
    """
    b1x, b1y, b1z, b2x, b2y, b2z, b3x, b3y, b3z = np.asarray(x_hat, dtype=float)
    return np.array([
        [0.0, -b1z, b1y], [b1z, 0.0, -b1x], [-b1y, b1x, 0.0],
        [0.0, -b2z, b2y], [b2z, 0.0, -b2x], [-b2y, b2x, 0.0],
        [0.0, -b3z, b3y], [b3z, 0.0, -b3x], [-b3y, b3x, 0.0],
    ])


def gyro_process_noise(x_hat, gyro_cov, imu_rate_hz: float, m_floor: float = 0.0) -> np.ndarray:
    """Per-step process noise from the gyro covariance.

    (1 / imu_rate) * N Cov N^T + m_floor * I, with N the state-dependent
    noise propagation; the floor keeps the result uniformly positive
    definite despite N's rank-3 image.
    """
    gyro_cov = np.asarray(gyro_cov, dtype=float)
    if np.isscalar(m_floor) and m_floor < 0:
        raise ValueError("m_floor must be >= 0")
    n = noise_propagation(x_hat)
    m = n @ (gyro_cov / imu_rate_hz) @ n.T
    m[np.diag_indices(9)] += m_floor
    return m


def measurement_weight_inverse(variances, rates, q_floor: float = 0.0) -> np.ndarray:
    """Diagonal per-update weighting: variance / rate + q_floor per channel.

    This is the matrix added to C P C^T in the gain solve; it plays the role
    of the discrete measurement covariance.
    """
    variances = np.asarray(variances, dtype=float)
    rates = np.asarray(rates, dtype=float)
    entries = variances / rates + q_floor
    if np.any(entries <= 0):
        raise ValueError("per-channel weights must be > 0 after the floor")
    return np.diag(entries)


def predict(state: FilterState, omega, tau: float, process_noise) -> FilterState:
    """Propagate estimate and covariance over one ZOH interval.

    x <- A x and P <- A P A^T + M with the exact exponential transition.
    ``process_noise`` must be symmetric positive semidefinite.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    m = np.asarray(process_noise, dtype=float).reshape(9, 9)
    if np.max(np.abs(m - m.T)) > 1e-9:
        raise ValueError("process noise must be symmetric")
    eig_min = float(np.linalg.eigvalsh(m)[0])
    if eig_min < -1e-12 * max(1.0, float(np.abs(m).max())):
        raise ValueError("process noise must be positive semidefinite")
    e_pos = exp_so3(np.asarray(omega, dtype=float) * tau)
    x_new = (state.x_hat.reshape(3, 3) @ e_pos).reshape(9)
    p_new = _propagate_cov(state.P, e_pos.T) + m
    return FilterState(x_new, p_new, state.t + tau, state.mode)


def update(state: FilterState, output_matrix, y, weight_inverse) -> FilterState:
    """Kalman correction with gain K = P C^T (C P C^T + W)^{-1}.

    ``weight_inverse`` is the q x q SPD matrix added to the projected
    covariance (see :func:`measurement_weight_inverse`). The covariance is
    contracted as (I - K C) P and re-symmetrized. Raises
    FilterNumericsError if the innovation matrix conditioning exceeds
    INNOVATION_COND_LIMIT.
    """
    c = np.atleast_2d(np.asarray(output_matrix, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    w = np.atleast_2d(np.asarray(weight_inverse, dtype=float))
    if c.shape[1] != 9 or y.shape[0] != c.shape[0] or w.shape != (c.shape[0],) * 2:
        raise ValueError("output matrix, measurement and weight dimensions disagree")
    x_new, p_new = _update_arrays(state.x_hat, state.P, c, y, w)
    return FilterState(x_new, p_new, state.t, state.mode)


def fixed_gain_update(state: FilterState, output_matrix, y, gain_weight) -> FilterState:
    """Constant-gain correction x <- x + C^T Q (y - C x); covariance untouched."""
    c = np.atleast_2d(np.asarray(output_matrix, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    q = np.atleast_2d(np.asarray(gain_weight, dtype=float))
    if np.max(np.abs(q - q.T)) > 1e-9:
        raise ValueError("gain weight must be symmetric")
    innovation = y - c @ state.x_hat
    x_new = state.x_hat + c.T @ (q @ innovation)
    return FilterState(x_new, state.P.copy(), state.t, state.mode)


def reconstruct_and_reset(state: FilterState, reset_enabled: bool = True):
    """Project the raw 9-vector onto a rotation and optionally reset onto it.

    Returns (rotation, new_state). On a degenerate raw state the projection
    still yields a valid rotation for reporting, but the reset is skipped
    with a warning and the raw estimate is kept. P is never modified here.
    """
    result = project_to_so3(state_to_matrix(state.x_hat))
    if result.degenerate:
        warnings.warn("degenerate state estimate; reset skipped for this step")
        return result.rotation, state
    if not reset_enabled:
        return result.rotation, state
    new_state = FilterState(vec_transpose(result.rotation), state.P.copy(),
                            state.t, state.mode)
    return result.rotation, new_state


@dataclass
class FilterRun:
    """Per-step trajectory and diagnostics from the discrete runner.

    Index 0 holds the initial state; index k holds the post-update,
    post-reset quantities at t = k / imu_rate.
    """

    t: np.ndarray
    rotations: np.ndarray
    trace_p: np.ndarray
    err_rad: np.ndarray | None = None
    min_eig_p: np.ndarray | None = None
    final_state: FilterState | None = None
    missing_imu_steps: int = 0
    degenerate_resets: int = 0
    update_steps: int = 0


def run_discrete_filter(stream: MeasurementStream, schedule: SensorSchedule,
                        config: FilterConfig, truth_rotations=None,
                        track_covariance_spectrum: bool = False) -> FilterRun:
    """Run the correction-prediction loop over a measurement stream.

    Each IMU interval: exact ZOH predict with the previous rate sample, a
    joint update stacking every scalar record that landed in the interval,
    covariance symmetrization, SVD reconstruction and (optionally) the state
    reset. Missing rate samples are held zero-order (with a warning); the
    per-record weighting comes from the schedule's variances and rates.

    Parameters
    ----------
    stream : MeasurementStream
        Time-ordered gyro samples and scalar records (e.g. from
        ``read_sensor_log`` or the simulator).
    schedule : SensorSchedule
        Noise/rate metadata per channel id; records with unknown ids raise.
    config : FilterConfig
    truth_rotations : ndarray, shape (K+1, 3, 3), optional
        True attitude per grid index; enables the err_rad diagnostic.
    track_covariance_spectrum : bool
        Record the minimum eigenvalue of P each step (costs one 9x9
        eigensolve per step).
    """
    tau = 1.0 / config.imu_rate_hz
    if len(stream.gyro_t) == 0:
        raise ValueError("IMU stream missing: no gyro records")
    t_end = max(stream.gyro_t[-1] + tau,
                stream.rec_t[-1] if stream.n_records else 0.0)
    n_steps = int(round(t_end * config.imu_rate_hz))
    if n_steps < 1:
        raise ValueError("stream too short for one filter step")

    if truth_rotations is not None:
        truth_rotations = np.asarray(truth_rotations, dtype=float)
        if len(truth_rotations) < n_steps + 1:
            raise ValueError("truth trajectory shorter than the filter grid")
    omega_grid, have_omega = _omega_on_grid(stream, config.imu_rate_hz, n_steps)
    rec_slices, rows_all, qinv_all, fixed_gain_all = _prepare_records(
        stream, schedule, config, n_steps)

    riccati = config.mode == "riccati"
    state = config.initial_filter_state()
    x = state.x_hat.reshape(3, 3).copy()   # 3-blocks as rows
    p = state.P.copy()
    cov_scaled = np.asarray(config.gyro_cov) / config.imu_rate_hz
    constant_m = not np.any(cov_scaled)
    m_const = config.m_floor * _I9 if constant_m else None
    m_floor = config.m_floor

    t_out = np.arange(n_steps + 1) * tau
    rot_out = np.empty((n_steps + 1, 3, 3))
    trace_out = np.empty(n_steps + 1)
    err_out = np.empty(n_steps + 1) if truth_rotations is not None else None
    mineig_out = np.empty(n_steps + 1) if track_covariance_spectrum else None

    proj0 = project_to_so3(x)
    rot_out[0] = proj0.rotation
    trace_out[0] = np.trace(p)
    if err_out is not None:
        err_out[0] = _error_angle(truth_rotations[0], proj0.rotation)
    if mineig_out is not None:
        mineig_out[0] = np.linalg.eigvalsh(p)[0]

    omega = np.zeros(3)
    missing = 0
    degenerate = 0
    updates = 0
    ones3 = np.array([1.0, 1.0, 1.0])
    flip3 = np.array([1.0, 1.0, -1.0])
    diag_cache = {q: np.diag_indices(q) for q in range(1, 10)}
    svd = np.linalg.svd
    eigh = np.linalg.eigh
    matmul = np.matmul
    rec_y = stream.rec_y
    reset_enabled = config.reset_enabled
    cond_limit = INNOVATION_COND_LIMIT

    for k in range(1, n_steps + 1):
        if have_omega[k - 1]:
            omega = omega_grid[k - 1]
        else:
            missing += 1
        # Prediction: x <- x E, P <- (I kron E^T) P (I kron E^T)^T + M
        e_pos = exp_so3(omega * tau)
        x = x @ e_pos
        if riccati:
            if constant_m:
                m = m_const
            else:
                n_mat = _noise_propagation_blocks(x)
                m = n_mat @ cov_scaled @ n_mat.T
                m[diag_cache[9]] += m_floor
            e_neg = e_pos.T
            ap = matmul(e_neg, p.reshape(3, 3, 9)).reshape(9, 9)
            p = matmul(e_neg, ap.T.reshape(3, 3, 9)).reshape(9, 9).T + m

        # Update: joint stack of every record in this IMU interval.
        start, end = rec_slices[k], rec_slices[k + 1]
        if end > start:
            updates += 1
            c = rows_all[start:end]
            xv = x.reshape(9)
            innovation = rec_y[start:end] - c @ xv
            if riccati:
                pct = p @ c.T
                s = c @ pct
                q = end - start
                s[diag_cache.get(q) or np.diag_indices(q)] += qinv_all[start:end]
                lam, vecs = eigh(s)
                if lam[0] <= 0.0 or lam[-1] > cond_limit * lam[0]:
                    raise FilterNumericsError(
                        f"innovation matrix condition exceeds {cond_limit:g} "
                        f"at t={k * tau:.6f}")
                gain = (pct @ (vecs / lam)) @ vecs.T
                x = (xv + gain @ innovation).reshape(3, 3)
                p = p - gain @ (c @ p)
                p = 0.5 * (p + p.T)
            else:
                x = (xv + c.T @ (fixed_gain_all[start:end] * innovation)).reshape(3, 3)
        elif riccati:
            p = 0.5 * (p + p.T)

        # Attitude reconstruction and reset.
        u, s, vt = svd(x)
        d = _det3(u) * _det3(vt)
        rotation = (u * (ones3 if d > 0 else flip3)) @ vt
        if s[2] < 1e-12 * s[0]:
            degenerate += 1
        elif reset_enabled:
            x = rotation.copy()

        rot_out[k] = rotation
        trace_out[k] = p.trace()
        if err_out is not None:
            err_out[k] = _error_angle(truth_rotations[k], rotation)
        if mineig_out is not None:
            mineig_out[k] = np.linalg.eigvalsh(p)[0]

    if missing:
        warnings.warn(f"{missing} IMU interval(s) had no rate sample; "
                      "held previous value (zero-order)")
    if degenerate:
        warnings.warn(f"{degenerate} step(s) had a degenerate raw state; reset skipped")

    final = FilterState(x.reshape(9).copy(), 0.5 * (p + p.T), n_steps * tau, config.mode)
    return FilterRun(t=t_out, rotations=rot_out, trace_p=trace_out, err_rad=err_out,
                     min_eig_p=mineig_out, final_state=final,
                     missing_imu_steps=missing, degenerate_resets=degenerate,
                     update_steps=updates)


@dataclass
class ContinuousRun:
    """Reference integration of the continuous filter at a fine step."""

    t: np.ndarray
    x_hat: np.ndarray
    P: np.ndarray


def run_continuous_reference(omega_fn, channels: Sequence, rotation_fn,
                             duration: float, dt: float,
                             config: FilterConfig) -> ContinuousRun:
    """RK4 integration of the continuous estimator and Riccati flow.

    Cross-validation reference only: measurements are the exact noiseless
    scalars from ``rotation_fn``, evaluated continuously. The product path
    is the discrete runner.
    """
    n = int(round(duration / dt))
    q_diag = 1.0 / np.array([ch.noise_variance + config.q_floor for ch in channels])
    a_body = np.stack([ch.body_vector for ch in channels])

    def rates(t, x, p):
        omega = np.asarray(omega_fn(t), dtype=float)
        a = kinematics_matrix(omega)
        r_true = np.asarray(rotation_fn(t), dtype=float)
        b_vecs = [np.asarray(ch.inertial_vector(t), dtype=float) for ch in channels]
        c = build_output_matrix(list(zip(a_body, b_vecs)))
        y = c @ vec_transpose(r_true)
        n_mat = noise_propagation(x)
        m = n_mat @ config.gyro_cov @ n_mat.T + config.m_floor * _I9
        gain = p @ c.T * q_diag
        dx = a @ x + gain @ (y - c @ x)
        dp = a @ p + p @ a.T - (p @ c.T * q_diag) @ (c @ p) + m
        return dx, dp

    state = config.initial_filter_state()
    x = state.x_hat.copy()
    p = state.P.copy()
    t_out = np.arange(n + 1) * dt
    x_out = np.empty((n + 1, 9))
    p_out = np.empty((n + 1, 9, 9))
    x_out[0], p_out[0] = x, p
    for k in range(n):
        t = k * dt
        k1x, k1p = rates(t, x, p)
        k2x, k2p = rates(t + 0.5 * dt, x + 0.5 * dt * k1x, p + 0.5 * dt * k1p)
        k3x, k3p = rates(t + 0.5 * dt, x + 0.5 * dt * k2x, p + 0.5 * dt * k2p)
        k4x, k4p = rates(t + dt, x + dt * k3x, p + dt * k3p)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        p = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        p = 0.5 * (p + p.T)
        x_out[k + 1], p_out[k + 1] = x, p
    return ContinuousRun(t_out, x_out, p_out)


def _propagate_cov(p, e_neg):
    ap = np.matmul(e_neg, p.reshape(3, 3, 9)).reshape(9, 9)
    return np.matmul(e_neg, ap.T.reshape(3, 3, 9)).reshape(9, 9).T


def _update_arrays(x, p, c, y, w):
    pct = p @ c.T
    s = c @ pct + w
    lam, vecs = np.linalg.eigh(s)
    if lam[0] <= 0.0 or lam[-1] > INNOVATION_COND_LIMIT * lam[0]:
        raise FilterNumericsError(
            f"innovation matrix condition exceeds {INNOVATION_COND_LIMIT:g}")
    gain = (pct @ (vecs / lam)) @ vecs.T
    x_new = x + gain @ (y - c @ x)
    p_new = p - gain @ (c @ p)
    return x_new, 0.5 * (p_new + p_new.T)


def _noise_propagation_blocks(x3):
    b1x, b1y, b1z = x3[0]
    b2x, b2y, b2z = x3[1]
    b3x, b3y, b3z = x3[2]
    return np.array([
        [0.0, -b1z, b1y], [b1z, 0.0, -b1x], [-b1y, b1x, 0.0],
        [0.0, -b2z, b2y], [b2z, 0.0, -b2x], [-b2y, b2x, 0.0],
        [0.0, -b3z, b3y], [b3z, 0.0, -b3x], [-b3y, b3x, 0.0],
    ])


def _omega_on_grid(stream, imu_rate, n_steps):
    grid = np.zeros((n_steps, 3))
    have = np.zeros(n_steps, dtype=bool)
    idx = np.rint(stream.gyro_t * imu_rate).astype(int)
    keep = (idx >= 0) & (idx < n_steps)
    grid[idx[keep]] = stream.gyro_omega[keep]
    have[idx[keep]] = True
    return grid, have


def _prepare_records(stream, schedule, config, n_steps):
    m = stream.n_records
    if m:
        rows_all = np.einsum("qi,qj->qij", stream.rec_b, stream.rec_a).reshape(m, 9)
        variances = np.empty(m)
        rates = np.empty(m)
        for i, ch in enumerate(stream.rec_channel):
            info = schedule.info(ch)
            variances[i] = info.noise_variance
            rates[i] = info.rate_hz
        if config.rate_scaled_weights:
            qinv_all = variances / rates + config.q_floor
        else:
            qinv_all = variances + config.q_floor
        if np.any(qinv_all <= 0):
            raise ValueError("per-channel weights must be > 0 after the floor")
        norms2 = (np.einsum("qi,qi->q", stream.rec_a, stream.rec_a)
                  * np.einsum("qi,qi->q", stream.rec_b, stream.rec_b))
        with np.errstate(divide="ignore"):
            fixed_gain_all = np.where(
                norms2 > 0.0, config.fixed_gain_scale / (rates * norms2), 0.0)
        bins = np.rint(stream.rec_t * config.imu_rate_hz).astype(int)
        bins = np.clip(bins, 1, n_steps)
    else:
        rows_all = np.zeros((0, 9))
        qinv_all = np.zeros(0)
        fixed_gain_all = np.zeros(0)
        bins = np.zeros(0, dtype=int)
    slices = np.searchsorted(bins, np.arange(n_steps + 2))
    return slices, rows_all, qinv_all, fixed_gain_all


def _error_angle(r_true, r_est):
    diff = r_est - r_true
    half_chord = math.sqrt(float(np.einsum("ij,ij->", diff, diff))) / (2.0 * math.sqrt(2.0))
    return 2.0 * math.asin(min(1.0, half_chord))


def _det3(m):
    return (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))
