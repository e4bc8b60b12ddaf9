"""Binary trajectory format "STMD v1".

Layout (little-endian):
  magic    4 bytes  0x53 0x54 0x4D 0x44 ("STMD")
  version  u32      1
  N        u32      residues per frame
  L        u32      frames
  flags    u32      bit0: per-frame strides present
  stride   f64      uniform stride in ns, or L-1 f64 strides when bit0 set
  records  L*N * 7 f64: tx, ty, tz (angstrom), qw, qx, qy, qz

Readers reject non-unit quaternions (tolerance 1e-6) unless asked to
renormalize.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .se3 import FrameSet, Trajectory

MAGIC = b"STMD"
VERSION = 1
_FLAG_PER_FRAME_STRIDES = 1
_QUAT_TOL = 1e-6


class StmdFormatError(ValueError):
    pass


def write_trajectory(path_or_file, traj: Trajectory) -> None:
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "wb")
        close = True
    else:
        f = path_or_file
    try:
        L = traj.n_frames
        N = traj.n_residues
        uniform = traj.uniform_stride
        per_frame = uniform is None and traj.strides.size > 0
        flags = _FLAG_PER_FRAME_STRIDES if per_frame else 0
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, N, L))
        f.write(struct.pack("<I", flags))
        if per_frame:
            f.write(traj.strides.astype("<f8").tobytes())
        else:
            f.write(struct.pack("<d", 0.0 if uniform is None else uniform))
        rec = np.empty((L, N, 7), dtype="<f8")
        rec[..., 0:3] = traj.translations()
        rec[..., 3:7] = traj.quaternions()
        f.write(rec.tobytes())
    finally:
        if close:
            f.close()


def read_trajectory(path_or_file, renormalize: bool = False) -> Trajectory:
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "rb")
        close = True
    else:
        f = path_or_file
    try:
        if f.read(4) != MAGIC:
            raise StmdFormatError("bad magic; not an STMD file")
        version, n, L = struct.unpack("<III", f.read(12))
        if version != VERSION:
            raise StmdFormatError(f"unsupported STMD version {version}")
        (flags,) = struct.unpack("<I", f.read(4))
        if flags & _FLAG_PER_FRAME_STRIDES:
            n_strides = max(L - 1, 0)
            strides = np.frombuffer(f.read(8 * n_strides), dtype="<f8").copy()
        else:
            (uniform,) = struct.unpack("<d", f.read(8))
            strides = np.full((max(L - 1, 0),), uniform)
        raw = f.read(8 * 7 * L * n)
        if len(raw) != 8 * 7 * L * n:
            raise StmdFormatError("truncated record section")
        rec = np.frombuffer(raw, dtype="<f8").reshape(L, n, 7).astype(np.float64)
        quats = rec[..., 3:7]
        norms = np.linalg.norm(quats, axis=-1)
        if not renormalize and np.any(np.abs(norms - 1.0) > _QUAT_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise StmdFormatError(
                f"non-unit quaternion (|norm-1| up to {worst:.2e}); pass renormalize=True to accept"
            )
        frames = [FrameSet(quats[i], rec[i, :, 0:3]) for i in range(L)]
        return Trajectory(frames, strides if L > 1 else None)
    finally:
        if close:
            f.close()


def to_bytes(traj: Trajectory) -> bytes:
    buf = io.BytesIO()
    write_trajectory(buf, traj)
    return buf.getvalue()


def from_bytes(data: bytes, renormalize: bool = False) -> Trajectory:
    return read_trajectory(io.BytesIO(data), renormalize=renormalize)
