"""3D Gaussian scene representation and PLY file I/O.

Clouds are stored struct-of-arrays. The de-facto splat PLY layout is kept
on disk (log scales, logit opacities, SH DC color); the raw stored payload
is retained so an untouched cloud round-trips byte-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

SH_C0 = 0.28209479177387814

REQUIRED_PROPS = [
    "x",
    "y",
    "z",
    "f_dc_0",
    "f_dc_1",
    "f_dc_2",
    "opacity",
    "scale_0",
    "scale_1",
    "scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
]

_PLY_DTYPES = {
    "float": ("<f4", "f"),
    "float32": ("<f4", "f"),
    "double": ("<f8", "d"),
    "float64": ("<f8", "d"),
    "uchar": ("<u1", "B"),
    "uint8": ("<u1", "B"),
    "int": ("<i4", "i"),
    "int32": ("<i4", "i"),
}
_NUMPY_TO_PLY = {"<f4": "float", "<f8": "double", "<u1": "uchar", "<i4": "int"}


class PlyError(ValueError):
    pass


class Gaussian(NamedTuple):
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray
    opacity: float


def normalize_quats(rot: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(rot)):
        raise ValueError("non-finite quaternion components")
    norms = np.linalg.norm(rot, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("zero-length quaternion cannot be normalized")
    return rot / norms


def quat_to_rotmat(rot: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w, x, y, z) -> (..., 3, 3) rotations."""
    w, x, y, z = rot[..., 0], rot[..., 1], rot[..., 2], rot[..., 3]
    m = np.empty(rot.shape[:-1] + (3, 3), dtype=rot.dtype)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def covariance(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """3x3 world covariance R diag(s)^2 R^T of one Gaussian."""
    scale = np.asarray(scale, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rot))):
        raise ValueError("non-finite scale or rotation")
    if np.any(scale <= 0):
        raise ValueError(f"scale components must be positive, got {scale}")
    r = quat_to_rotmat(normalize_quats(rot))
    rs = r * scale[None, :]
    return rs @ rs.T


def covariances(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Batched (N,3,3) covariances; assumes quats already normalized."""
    r = quat_to_rotmat(rot)
    rs = r * scale[:, None, :]
    return rs @ np.swapaxes(rs, 1, 2)


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


@dataclass
class GaussianCloud:
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    mask: Optional[np.ndarray] = None
    stored: dict = field(default_factory=dict)
    property_order: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.mu)
        for name in ("mu", "scale", "rot", "color", "opacity"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} length differs from mu ({n})")
        if not self.stored:
            self._encode_all()
        if self.mask is not None:
            self.set_mask(self.mask)

    @property
    def count(self) -> int:
        return len(self.mu)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.scale[i], self.rot[i], self.color[i], float(self.opacity[i]))

    def set_mask(self, indices):
        idx = np.unique(np.asarray(list(indices), dtype=np.int64))
        if len(idx) and (idx.min() < 0 or idx.max() >= self.count):
            raise ValueError(f"mask index out of range for cloud of {self.count}")
        self.mask = idx

    def covariance(self, i: int) -> np.ndarray:
        return covariance(self.scale[i], self.rot[i])

    def centers_near(self, point: np.ndarray, k: int = 1) -> np.ndarray:
        d = np.linalg.norm(self.mu - np.asarray(point)[None, :], axis=1)
        return np.argsort(d)[:k]

    # -- stored-payload maintenance ------------------------------------------

    def _encode_all(self):
        f32 = lambda a: np.asarray(a, dtype="<f4")
        self.stored = {
            "x": f32(self.mu[:, 0]),
            "y": f32(self.mu[:, 1]),
            "z": f32(self.mu[:, 2]),
            "f_dc_0": f32((self.color[:, 0] - 0.5) / SH_C0),
            "f_dc_1": f32((self.color[:, 1] - 0.5) / SH_C0),
            "f_dc_2": f32((self.color[:, 2] - 0.5) / SH_C0),
            "opacity": f32(_logit(np.clip(self.opacity, 1e-7, 1 - 1e-7))),
            "scale_0": f32(np.log(self.scale[:, 0])),
            "scale_1": f32(np.log(self.scale[:, 1])),
            "scale_2": f32(np.log(self.scale[:, 2])),
            "rot_0": f32(self.rot[:, 0]),
            "rot_1": f32(self.rot[:, 1]),
            "rot_2": f32(self.rot[:, 2]),
            "rot_3": f32(self.rot[:, 3]),
        }
        self.property_order = [(name, "<f4") for name in REQUIRED_PROPS]

    def update_rows(self, indices, mu=None, scale=None, rot=None, color=None, opacity=None):
        """Overwrite the given rows (decoded and stored); others keep their bytes."""
        idx = np.asarray(indices, dtype=np.int64)
        s = self.stored
        if mu is not None:
            self.mu[idx] = mu
            for j, name in enumerate(("x", "y", "z")):
                s[name][idx] = mu[:, j].astype(s[name].dtype)
        if color is not None:
            self.color[idx] = color
            enc = (color - 0.5) / SH_C0
            for j in range(3):
                s[f"f_dc_{j}"][idx] = enc[:, j].astype(s[f"f_dc_{j}"].dtype)
        if opacity is not None:
            self.opacity[idx] = opacity
            s["opacity"][idx] = _logit(np.clip(opacity, 1e-7, 1 - 1e-7)).astype(s["opacity"].dtype)
        if scale is not None:
            self.scale[idx] = scale
            enc = np.log(scale)
            for j in range(3):
                s[f"scale_{j}"][idx] = enc[:, j].astype(s[f"scale_{j}"].dtype)
        if rot is not None:
            self.rot[idx] = normalize_quats(rot)
            for j in range(4):
                s[f"rot_{j}"][idx] = rot[:, j].astype(s[f"rot_{j}"].dtype)


def make_cloud(mu, scale, rot, color, opacity, mask=None) -> GaussianCloud:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1, 3)
    rot = normalize_quats(np.asarray(rot, dtype=np.float64).reshape(-1, 4))
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    opacity = np.asarray(opacity, dtype=np.float64).reshape(-1)
    if np.any(scale <= 0):
        raise ValueError("scale components must be strictly positive")
    if np.any((opacity <= 0) | (opacity >= 1)):
        raise ValueError("opacity must lie in the open interval (0, 1)")
    return GaussianCloud(mu, scale, rot, color, opacity, mask=mask)


# -- PLY ------------------------------------------------------------------------


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise PlyError(f"malformed PLY header (no end_header) near byte {max(end, 0)}")
    header = raw[: end + len(b"end_header\n")]
    body = raw[len(header):]
    lines = header.decode("ascii", errors="replace").splitlines()
    offset = len(lines[0]) + 1
    vertex_count = None
    props: list[tuple[str, str]] = []
    fmt_ok = False
    in_vertex = False
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            offset += len(line) + 1
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise PlyError(f"unsupported PLY format {parts[1]!r} at byte {offset}")
            fmt_ok = True
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                vertex_count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3 or parts[1] not in _PLY_DTYPES:
                raise PlyError(f"unsupported property line {line!r} at byte {offset}")
            props.append((parts[2], _PLY_DTYPES[parts[1]][0]))
        offset += len(line) + 1
    if not fmt_ok or vertex_count is None:
        raise PlyError(f"malformed PLY header: missing format/element at byte {offset}")
    names = [p[0] for p in props]
    for req in REQUIRED_PROPS:
        if req not in names:
            raise PlyError(f"missing required property {req!r}")
    rec = np.dtype([(name, dt) for name, dt in props])
    need = rec.itemsize * vertex_count
    if len(body) < need:
        raise PlyError(
            f"truncated vertex payload: need {need} bytes, have {len(body)} (body at byte {len(header)})"
        )
    table = np.frombuffer(body[:need], dtype=rec)
    stored = {name: np.array(table[name]) for name in names}

    mu = np.stack([stored["x"], stored["y"], stored["z"]], axis=1).astype(np.float64)
    f_dc = np.stack([stored[f"f_dc_{i}"] for i in range(3)], axis=1).astype(np.float64)
    color = 0.5 + SH_C0 * f_dc
    opacity = 1.0 / (1.0 + np.exp(-stored["opacity"].astype(np.float64)))
    scale = np.exp(np.stack([stored[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64))
    rot = np.stack([stored[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    rot = normalize_quats(rot)
    norm_err = np.abs(np.linalg.norm(rot, axis=1) - 1.0)
    if np.any(norm_err > 1e-6):
        raise ValueError("quaternion normalization failed")
    cloud = GaussianCloud(mu, scale, rot, color, opacity, stored=stored, property_order=props)
    return cloud


def save_ply(cloud: GaussianCloud, path) -> None:
    props = cloud.property_order or [(n, "<f4") for n in REQUIRED_PROPS]
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.count}"]
    for name, dt in props:
        lines.append(f"property {_NUMPY_TO_PLY[dt]} {name}")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    rec = np.dtype([(name, dt) for name, dt in props])
    table = np.empty(cloud.count, dtype=rec)
    for name, _ in props:
        table[name] = cloud.stored[name]
    with open(path, "wb") as f:
        f.write(header)
        f.write(table.tobytes())


def load_mask(path) -> np.ndarray:
    with open(path) as f:
        vals = [int(line) for line in f.read().split() if line.strip()]
    return np.unique(np.asarray(vals, dtype=np.int64))


def save_mask(indices, path) -> None:
    idx = np.unique(np.asarray(list(indices), dtype=np.int64))
    with open(path, "w") as f:
        f.write("\n".join(str(int(i)) for i in idx))
        if len(idx):
            f.write("\n")
