"""Scalar measurement channels and the time-varying output matrix.

Every supported sensor reduces to the same scalar form: a body-side vector
``a``, an inertial-side vector ``b`` and an observed value ``y`` that equals
``a^T R^T b`` for the true attitude R. Rows of the output matrix are the
Kronecker rows ``kron(b, a)`` acting on the vectorized transposed rotation.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])

#: Reserved channel id carrying angular-rate samples in a sensor log. The
#: rate vector rides in the a_x..a_z columns; y and b_* are zero.
GYRO_CHANNEL_ID = "gyro"

#: Mandatory sensor-log CSV header (one measurement per line).
SENSOR_LOG_COLUMNS = (
    "t_sec", "channel_id", "y",
    "a_x", "a_y", "a_z", "b_x", "b_y", "b_z",
)

VectorProvider = Callable[[float], np.ndarray]


def as_provider(value) -> VectorProvider:
    """Normalize a constant 3-vector or a callable of t into a provider."""
    if callable(value):
        return value
    vec = np.asarray(value, dtype=float).reshape(3).copy()
    return lambda t: vec


class SampledVector:
    """Zero-order-hold provider over a sampled vector series."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(len(self.times), 3)
        if np.any(np.diff(self.times) < 0):
            raise ValueError("sample times must be nondecreasing")

    def __call__(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[max(idx, 0)]


@dataclass
class ScalarChannel:
    """One scalar measurement source: y = a^T R^T b(t) plus noise.

    ``body_vector`` is the constant body-side vector a; ``inertial_vector``
    is the (possibly time-varying) inertial-side vector b, held behind a
    provider so the filter only ever sees evaluated (a, b) pairs.
    """

    channel_id: str
    body_vector: np.ndarray
    inertial_vector: VectorProvider
    noise_variance: float
    rate_hz: float

    def __post_init__(self):
        self.body_vector = np.asarray(self.body_vector, dtype=float).reshape(3)
        if not np.linalg.norm(self.body_vector) > 0.0:
            raise ValueError(f"channel {self.channel_id}: body vector must be nonzero")
        if self.noise_variance < 0.0:
            raise ValueError(f"channel {self.channel_id}: noise variance must be >= 0")
        if not self.rate_hz > 0.0:
            raise ValueError(f"channel {self.channel_id}: rate must be > 0")
        self.inertial_vector = as_provider(self.inertial_vector)


@dataclass
class ScalarMeasurement:
    """One evaluated measurement record: (a, b) at time t with value y."""

    channel_id: str
    t: float
    y: float
    a: np.ndarray
    b: np.ndarray


@dataclass
class ChannelInfo:
    """Noise and rate metadata the estimator needs per channel id."""

    noise_variance: float
    rate_hz: float


@dataclass
class SensorSchedule:
    """Which scalar channels exist, at what rates, with what noise."""

    channels: dict[str, ChannelInfo] = field(default_factory=dict)

    @classmethod
    def from_channels(cls, channels: Sequence[ScalarChannel]) -> "SensorSchedule":
        return cls({c.channel_id: ChannelInfo(c.noise_variance, c.rate_hz) for c in channels})

    def info(self, channel_id: str) -> ChannelInfo:
        try:
            return self.channels[channel_id]
        except KeyError:
            raise KeyError(f"channel id {channel_id!r} unknown to config") from None


def kron_row(a, b) -> np.ndarray:
    """1x9 output row for the scalar a^T R^T b: block j equals b_j * a."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.multiply.outer(b, a).reshape(9)


def build_output_matrix(pairs) -> np.ndarray:
    """Stack Kronecker rows for evaluated (a, b) pairs, preserving order.

    Parameters
    ----------
    pairs : sequence of (a, b)
        Evaluated body-side / inertial-side vector pairs.

    Returns
    -------
    ndarray, shape (q, 9)
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no active channels")
    return np.stack([kron_row(a, b) for a, b in pairs])


def vector_channels(name: str, r_inertial, axes, variance: float,
                    rate_hz: float) -> list[ScalarChannel]:
    """Channels for the measured components of one inertial vector.

    One channel per selected axis i (1-based), with a = e_i and b the
    inertial vector. A full {1,2,3} selection reproduces a conventional
    three-axis vector sensor; subsets model degraded or failed axes.
    """
    axes = sorted(set(int(i) for i in axes))
    if not axes:
        raise ValueError("axes set must be nonempty")
    if any(i not in (1, 2, 3) for i in axes):
        raise ValueError("axes must be from {1, 2, 3}")
    basis = (E1, E2, E3)
    provider = as_provider(r_inertial)
    return [
        ScalarChannel(f"{name}_{i}", basis[i - 1], provider, variance, rate_hz)
        for i in axes
    ]


def tilt_channel(variance: float, rate_hz: float,
                 channel_id: str = "tilt") -> ScalarChannel:
    """Height-over-range tilt channel: a = b = e3, y = cos(tilt angle)."""
    return ScalarChannel(channel_id, E3, E3, variance, rate_hz)


def landmark_measurement(delta_body, delta_height: float, t: float,
                         channel_id: str = "landmark") -> ScalarMeasurement:
    """Virtual vertical-alignment measurement from a pair of landmarks.

    ``delta_body`` is the body-frame difference of the two landmark
    observations, ``delta_height`` the known inertial height difference.
    Event-based: produced whenever both landmarks are seen, rather than on a
    fixed rate.
    """
    delta_body = np.asarray(delta_body, dtype=float).reshape(3)
    if not np.linalg.norm(delta_body) > 0.0:
        raise ValueError("landmark pair with zero body-frame difference carries no "
                         "directional information")
    return ScalarMeasurement(channel_id, float(t), float(delta_height),
                             delta_body.copy(), E3.copy())


def pitot_channel(direction, v_inertial, variance: float, rate_hz: float,
                  channel_id: str = "pitot") -> ScalarChannel:
    """Airspeed-probe channel: a = probe direction, b = inertial velocity.

    The probe direction must be unit norm; off-unit input is normalized with
    a warning.
    """
    d = np.asarray(direction, dtype=float).reshape(3)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise ValueError("pitot probe direction must be nonzero")
    if abs(norm - 1.0) > 1e-9:
        warnings.warn(f"pitot direction norm {norm:.6g} != 1; normalizing")
        d = d / norm
    return ScalarChannel(channel_id, d, v_inertial, variance, rate_hz)


@dataclass
class MeasurementStream:
    """Time-ordered angular-rate samples plus scalar measurement records.

    The gyro stream drives prediction; the scalar records drive updates.
    Both must be individually nondecreasing in time.
    """

    gyro_t: np.ndarray
    gyro_omega: np.ndarray
    rec_t: np.ndarray
    rec_channel: list[str]
    rec_y: np.ndarray
    rec_a: np.ndarray
    rec_b: np.ndarray

    def __post_init__(self):
        self.gyro_t = np.asarray(self.gyro_t, dtype=float).reshape(-1)
        self.gyro_omega = np.asarray(self.gyro_omega, dtype=float).reshape(-1, 3)
        self.rec_t = np.asarray(self.rec_t, dtype=float).reshape(-1)
        self.rec_y = np.asarray(self.rec_y, dtype=float).reshape(-1)
        self.rec_a = np.asarray(self.rec_a, dtype=float).reshape(-1, 3)
        self.rec_b = np.asarray(self.rec_b, dtype=float).reshape(-1, 3)
        if len(self.gyro_t) != len(self.gyro_omega):
            raise ValueError("gyro times and samples disagree in length")
        n = len(self.rec_t)
        if not (len(self.rec_channel) == len(self.rec_y) == n
                and len(self.rec_a) == len(self.rec_b) == n):
            raise ValueError("scalar record arrays disagree in length")
        if np.any(np.diff(self.gyro_t) < 0):
            raise ValueError("time-reversed record in gyro stream")
        if np.any(np.diff(self.rec_t) < 0):
            raise ValueError("time-reversed record in measurement stream")

    @property
    def n_records(self) -> int:
        return len(self.rec_t)


def write_sensor_log(path, stream: MeasurementStream, metadata: str | None = None) -> None:
    """Write a stream as sensor-log CSV, gyro and scalar records merged by time.

    At equal timestamps gyro records come first, then scalar records in
    stream order. An optional metadata string is written as a leading
    ``#``-prefixed comment line.
    """
    t_all = np.concatenate([stream.gyro_t, stream.rec_t])
    order = np.argsort(t_all, kind="stable")
    n_gyro = len(stream.gyro_t)
    with open(path, "w", newline="") as fh:
        if metadata:
            fh.write(f"# {metadata}\n")
        writer = csv.writer(fh)
        writer.writerow(SENSOR_LOG_COLUMNS)
        for idx in order:
            if idx < n_gyro:
                t = stream.gyro_t[idx]
                w = stream.gyro_omega[idx]
                writer.writerow(_format_row(t, GYRO_CHANNEL_ID, 0.0, w, (0.0, 0.0, 0.0)))
            else:
                j = idx - n_gyro
                writer.writerow(_format_row(
                    stream.rec_t[j], stream.rec_channel[j], stream.rec_y[j],
                    stream.rec_a[j], stream.rec_b[j]))


def read_sensor_log(path) -> MeasurementStream:
    """Parse a sensor-log CSV back into a MeasurementStream.

    Raises ValueError with the offending line number on malformed rows or
    time-reversed records. Lines starting with ``#`` are metadata and are
    skipped.
    """
    gyro_t, gyro_w = [], []
    rec_t, rec_ch, rec_y, rec_a, rec_b = [], [], [], [], []
    with open(path, newline="") as fh:
        lineno = 0
        header_seen = False
        for raw in csv.reader(_skip_comments(fh)):
            lineno += 1
            if not raw:
                continue
            if not header_seen:
                if tuple(h.strip() for h in raw) != SENSOR_LOG_COLUMNS:
                    raise ValueError(
                        f"{path}: missing or wrong header row (line {lineno})")
                header_seen = True
                continue
            if len(raw) != len(SENSOR_LOG_COLUMNS):
                raise ValueError(f"{path}: malformed row at line {lineno}: "
                                 f"expected {len(SENSOR_LOG_COLUMNS)} fields, got {len(raw)}")
            try:
                t = float(raw[0])
                y = float(raw[2])
                vals = [float(x) for x in raw[3:9]]
            except ValueError as exc:
                raise ValueError(f"{path}: malformed row at line {lineno}: {exc}") from None
            channel = raw[1].strip()
            if channel == GYRO_CHANNEL_ID:
                if gyro_t and t < gyro_t[-1]:
                    raise ValueError(f"{path}: time-reversed record at line {lineno}")
                gyro_t.append(t)
                gyro_w.append(vals[0:3])
            else:
                if rec_t and t < rec_t[-1]:
                    raise ValueError(f"{path}: time-reversed record at line {lineno}")
                rec_t.append(t)
                rec_ch.append(channel)
                rec_y.append(y)
                rec_a.append(vals[0:3])
                rec_b.append(vals[3:6])
    if not header_seen:
        raise ValueError(f"{path}: empty sensor log")
    return MeasurementStream(
        gyro_t=np.array(gyro_t, dtype=float),
        gyro_omega=np.array(gyro_w, dtype=float).reshape(-1, 3),
        rec_t=np.array(rec_t, dtype=float),
        rec_channel=rec_ch,
        rec_y=np.array(rec_y, dtype=float),
        rec_a=np.array(rec_a, dtype=float).reshape(-1, 3),
        rec_b=np.array(rec_b, dtype=float).reshape(-1, 3),
    )


def _skip_comments(fh):
    for line in fh:
        if not line.lstrip().startswith("#"):
            yield line


def _format_row(t, channel_id, y, a, b):
    return [repr(float(t)), channel_id, repr(float(y)),
            repr(float(a[0])), repr(float(a[1])), repr(float(a[2])),
            repr(float(b[0])), repr(float(b[1])), repr(float(b[2]))]
