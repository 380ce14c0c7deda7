"""On-disk formats: binary record files and regression-friendly CSV.

Every binary file starts with the 8-byte magic ``FLOCKREC``, a uint32
format version, and a uint32 record kind, followed by a kind-specific
header and little-endian float64 payloads:

* trajectory: n_agents, dims, sample dt, n_samples; the sample times;
  then per sample the position block (N x 3) followed by the velocity
  block (N x 3).
* density series: cells per axis, spatial half-width, velocity
  half-width, n_times; the times; then one density cube per time.
* momentum field: cells per axis, spatial half-width; one (3, n, n, n)
  block.
* histogram series: like the density series but sparse per time:
  an entry count, the 6D cell indices (int64), and the masses.
* field series: cells per axis, spatial half-width, n_times; the times;
  then per time a density cube and a momentum block.
* checkpoint: hidden layer count and widths, momentum scale, input
  scale, weight count, then the flat weight vector.

CSV files carry 17-significant-digit floats so regression diffs are
meaningful.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from flockident.boids import BoidTrajectory
from flockident.initfit import NetWeights
from flockident.observation import GridSpec, PVHistogram

MAGIC = b"FLOCKREC"
VERSION = 1

KIND_TRAJECTORY = 1
KIND_DENSITY_SERIES = 2
KIND_MOMENTUM_FIELD = 3
KIND_HISTOGRAM_SERIES = 4
KIND_FIELD_SERIES = 5
KIND_CHECKPOINT = 6

_F8 = np.dtype("<f8")
_I8 = np.dtype("<i8")


def _write_header(fh, kind: int) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, kind))


def _read_header(fh, expect_kind: int, path: str) -> None:
    magic = fh.read(8)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a record file (bad magic)")
    version, kind = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    if kind != expect_kind:
        raise ValueError(f"{path}: record kind {kind}, expected {expect_kind}")


def _write_array(fh, arr, dtype=_F8) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fh, count: int, dtype=_F8) -> np.ndarray:
    data = fh.read(count * dtype.itemsize)
    if len(data) != count * dtype.itemsize:
        raise ValueError("truncated record file")
    return np.frombuffer(data, dtype=dtype).astype(dtype.newbyteorder("="))


def write_trajectory(path, traj: BoidTrajectory, dt_sample: float) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, KIND_TRAJECTORY)
        fh.write(struct.pack("<qqdq", traj.n_agents, 3, float(dt_sample), traj.n_samples))
        _write_array(fh, traj.times)
        for s in range(traj.n_samples):
            _write_array(fh, traj.positions[s])
            _write_array(fh, traj.velocities[s])


def read_trajectory(path) -> tuple[BoidTrajectory, float]:
    with open(path, "rb") as fh:
        _read_header(fh, KIND_TRAJECTORY, str(path))
        n, dims, dt_sample, n_samples = struct.unpack("<qqdq", fh.read(32))
        if dims != 3:
            raise ValueError(f"{path}: expected 3 dimensions, got {dims}")
        times = _read_array(fh, n_samples)
        xs = np.empty((n_samples, n, 3))
        vs = np.empty((n_samples, n, 3))
        for s in range(n_samples):
            xs[s] = _read_array(fh, n * 3).reshape(n, 3)
            vs[s] = _read_array(fh, n * 3).reshape(n, 3)
    return BoidTrajectory(times, xs, vs), dt_sample


def write_density_series(path, times, fields, spec: GridSpec) -> None:
    fields = np.asarray(fields)
    with open(path, "wb") as fh:
        _write_header(fh, KIND_DENSITY_SERIES)
        fh.write(struct.pack("<qddq", spec.cells_per_axis, spec.spatial_half_width,
                             spec.velocity_half_width, len(times)))
        _write_array(fh, times)
        _write_array(fh, fields)


def read_density_series(path) -> tuple[np.ndarray, np.ndarray, GridSpec]:
    with open(path, "rb") as fh:
        _read_header(fh, KIND_DENSITY_SERIES, str(path))
        n, half, vhalf, n_times = struct.unpack("<qddq", fh.read(32))
        times = _read_array(fh, n_times)
        fields = _read_array(fh, n_times * n**3).reshape(n_times, n, n, n)
    return times, fields, GridSpec(n, half, vhalf)


def write_momentum_field(path, field, spec: GridSpec) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, KIND_MOMENTUM_FIELD)
        fh.write(struct.pack("<qd", spec.cells_per_axis, spec.spatial_half_width))
        _write_array(fh, field)


def read_momentum_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _read_header(fh, KIND_MOMENTUM_FIELD, str(path))
        n, _half = struct.unpack("<qd", fh.read(16))
        return _read_array(fh, 3 * n**3).reshape(3, n, n, n)


def write_histogram_series(path, times, histograms: list[PVHistogram], spec: GridSpec) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, KIND_HISTOGRAM_SERIES)
        fh.write(struct.pack("<qddq", spec.cells_per_axis, spec.spatial_half_width,
                             spec.velocity_half_width, len(times)))
        _write_array(fh, times)
        for hist in histograms:
            cells = sorted(hist.masses)
            fh.write(struct.pack("<q", len(cells)))
            _write_array(fh, np.asarray(cells, dtype=np.int64).reshape(-1, 6), _I8)
            _write_array(fh, np.asarray([hist.masses[c] for c in cells]))


def read_histogram_series(path) -> tuple[np.ndarray, list[PVHistogram], GridSpec]:
    with open(path, "rb") as fh:
        _read_header(fh, KIND_HISTOGRAM_SERIES, str(path))
        n, half, vhalf, n_times = struct.unpack("<qddq", fh.read(32))
        spec = GridSpec(n, half, vhalf)
        times = _read_array(fh, n_times)
        hists = []
        for _ in range(n_times):
            (count,) = struct.unpack("<q", fh.read(8))
            cells = _read_array(fh, count * 6, _I8).reshape(count, 6)
            masses = _read_array(fh, count)
            hists.append(PVHistogram(spec, {tuple(int(v) for v in row): m
                                            for row, m in zip(cells, masses)}))
    return times, hists, spec


def write_field_series(path, times, rhos, momenta, spec: GridSpec) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, KIND_FIELD_SERIES)
        fh.write(struct.pack("<qdq", spec.cells_per_axis, spec.spatial_half_width, len(times)))
        _write_array(fh, times)
        for s in range(len(times)):
            _write_array(fh, rhos[s])
            _write_array(fh, momenta[s])


def read_field_series(path):
    with open(path, "rb") as fh:
        _read_header(fh, KIND_FIELD_SERIES, str(path))
        n, half, n_times = struct.unpack("<qdq", fh.read(24))
        times = _read_array(fh, n_times)
        rhos = np.empty((n_times, n, n, n))
        momenta = np.empty((n_times, 3, n, n, n))
        for s in range(n_times):
            rhos[s] = _read_array(fh, n**3).reshape(n, n, n)
            momenta[s] = _read_array(fh, 3 * n**3).reshape(3, n, n, n)
    return times, rhos, momenta, half


def write_checkpoint(path, wts: NetWeights) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, KIND_CHECKPOINT)
        fh.write(struct.pack("<q", len(wts.hidden_widths)))
        for wdt in wts.hidden_widths:
            fh.write(struct.pack("<q", wdt))
        fh.write(struct.pack("<ddq", wts.momentum_scale, wts.input_scale, len(wts.values)))
        _write_array(fh, wts.values)


def read_checkpoint(path) -> NetWeights:
    with open(path, "rb") as fh:
        _read_header(fh, KIND_CHECKPOINT, str(path))
        (n_hidden,) = struct.unpack("<q", fh.read(8))
        widths = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(n_hidden))
        mscale, iscale, n_weights = struct.unpack("<ddq", fh.read(24))
        values = _read_array(fh, n_weights)
    return NetWeights(widths, mscale, iscale, values)


def format_float(x) -> str:
    return f"{float(x):.17g}"


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_float(v) if isinstance(v, (int, float, np.floating, np.integer))
                              else str(v) for v in row) + "\n")


def write_trajectory_csv(path, traj: BoidTrajectory) -> None:
    """Long-format dump (one row per sample and agent); meant for small N."""
    rows = []
    for s in range(traj.n_samples):
        t = traj.times[s]
        for i in range(traj.n_agents):
            x = traj.positions[s, i]
            v = traj.velocities[s, i]
            rows.append([t, i, x[0], x[1], x[2], v[0], v[1], v[2]])
    write_csv(path, ["time", "agent", "x", "y", "z", "vx", "vy", "vz"], rows)


def write_field_slice_csv(path, fld, spec: GridSpec, z_index: int) -> None:
    """Fixed-z plane of a scalar field, one row per cell."""
    centers = spec.centers()
    rows = []
    for i in range(spec.cells_per_axis):
        for j in range(spec.cells_per_axis):
            rows.append([centers[i], centers[j], centers[z_index], fld[i, j, z_index]])
    write_csv(path, ["x", "y", "z", "value"], rows)


def write_manifest(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
