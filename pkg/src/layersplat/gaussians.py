"""Surfel layers: parameter arrays, initialization from point clouds, and the
versioned binary checkpoint format.

Each primitive is a 2D Gaussian patch: world center, two tangential log-scales,
a unit quaternion whose first two rotation columns span the patch and whose
third column is the surfel normal, a pre-sigmoid opacity logit, and an SH
coefficient block for view-dependent color.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .sh import degree_from_bases, num_sh_bases, rgb_to_sh0

CHECKPOINT_MAGIC = b"LSPLAT\0"
CHECKPOINT_VERSION = 1

FRONT_LAYER = 0
BACK_LAYER = 1


@dataclass
class GaussianLayer:
    layer_id: int
    mu: np.ndarray  # (N, 3)
    log_scale: np.ndarray  # (N, 2)
    quat: np.ndarray  # (N, 4) w,x,y,z; normalized on use
    opacity_logit: np.ndarray  # (N,)
    sh: np.ndarray  # (N, B, 3)

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float64)
        self.quat = np.ascontiguousarray(self.quat, dtype=np.float64)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        n = self.mu.shape[0]
        if n == 0:
            raise ValueError("layer must hold at least one Gaussian")
        shapes = (self.log_scale.shape, self.quat.shape, self.opacity_logit.shape)
        if shapes != ((n, 2), (n, 4), (n,)) or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError("parameter array shapes disagree")
        degree_from_bases(self.sh.shape[1])  # rejects non-square band counts
        for arr in (self.mu, self.log_scale, self.quat, self.opacity_logit, self.sh):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite Gaussian parameters")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def scales(self):
        return np.exp(self.log_scale)

    def unit_quats(self):
        return self.quat / np.linalg.norm(self.quat, axis=1, keepdims=True)

    def rotations(self):
        """(N, 3, 3) rotation matrices; columns = (tangent-u, tangent-v, normal)."""
        w, x, y, z = self.unit_quats().T
        return np.stack(
            [
                np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=1),
                np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=1),
                np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=1),
            ],
            axis=2,
        )

    def normals(self):
        return self.rotations()[:, :, 2]

    def copy(self) -> "GaussianLayer":
        return GaussianLayer(
            self.layer_id, self.mu.copy(), self.log_scale.copy(), self.quat.copy(),
            self.opacity_logit.copy(), self.sh.copy(),
        )

    def select(self, mask) -> "GaussianLayer":
        return GaussianLayer(
            self.layer_id, self.mu[mask], self.log_scale[mask], self.quat[mask],
            self.opacity_logit[mask], self.sh[mask],
        )

    def concat(self, other: "GaussianLayer") -> "GaussianLayer":
        if other.sh.shape[1] != self.sh.shape[1]:
            raise ValueError("SH band counts differ")
        return GaussianLayer(
            self.layer_id,
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.log_scale, other.log_scale]),
            np.concatenate([self.quat, other.quat]),
            np.concatenate([self.opacity_logit, other.opacity_logit]),
            np.concatenate([self.sh, other.sh]),
        )

    def param_dict(self) -> dict:
        return {
            "mu": self.mu,
            "log_scale": self.log_scale,
            "quat": self.quat,
            "opacity_logit": self.opacity_logit,
            "sh": self.sh,
        }

    def with_params(self, params: dict) -> "GaussianLayer":
        return replace(self, **params)


def init_layer_from_cloud(positions, colors, layer_id: int, sh_degree: int = 1,
                          fallback_scale: float = 0.1) -> GaussianLayer:
    """One surfel per point: isotropic scale from the mean distance to the
    3 nearest neighbors, identity orientation, opacity 0.5, band-0 color."""
    positions = np.asarray(positions, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = positions.shape[0]
    if n == 0:
        raise ValueError("empty cloud")
    if n >= 2:
        k = min(3, n - 1)
        dist, _ = cKDTree(positions).query(positions, k=k + 1)
        scale = dist[:, 1:].mean(axis=1)
        scale = np.maximum(scale, 1e-6)
    else:
        scale = np.full(n, fallback_scale)
    sh = np.zeros((n, num_sh_bases(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    return GaussianLayer(
        layer_id=layer_id,
        mu=positions,
        log_scale=np.log(np.stack([scale, scale], axis=1)),
        quat=quat,
        opacity_logit=np.zeros(n),
        sh=sh,
    )


# ---------------------------------------------------------------------------
# checkpoint format: deterministic little-endian binary, documented layout:
#   magic (7) | version u8 | layer count u32
#   per layer: layer_id i32 | N i64 | sh bands i32 |
#              mu, log_scale, quat, opacity_logit, sh as f64 raw bytes
#   extra count u32; per extra: name (u16 length + utf8) | ndim u8 | dims i64 |
#              f64 raw bytes
# ---------------------------------------------------------------------------

def _write_arr(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_arr(f, shape):
    count = int(np.prod(shape))
    buf = f.read(count * 8)
    if len(buf) != count * 8:
        raise ValueError("truncated checkpoint")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def save_checkpoint(path, layers, extras: dict | None = None):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(np.uint8(CHECKPOINT_VERSION).tobytes())
    buf.write(np.uint32(len(layers)).tobytes())
    for layer in layers:
        buf.write(np.int32(layer.layer_id).tobytes())
        buf.write(np.int64(layer.n).tobytes())
        buf.write(np.int32(layer.sh.shape[1]).tobytes())
        for name in ("mu", "log_scale", "quat", "opacity_logit", "sh"):
            _write_arr(buf, getattr(layer, name))
    extras = extras or {}
    buf.write(np.uint32(len(extras)).tobytes())
    for name in sorted(extras):
        arr = np.asarray(extras[name], dtype=np.float64)
        enc = name.encode("utf-8")
        buf.write(np.uint16(len(enc)).tobytes())
        buf.write(enc)
        buf.write(np.uint8(arr.ndim).tobytes())
        for d in arr.shape:
            buf.write(np.int64(d).tobytes())
        _write_arr(buf, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a layer checkpoint")
        version = np.frombuffer(f.read(1), dtype=np.uint8)[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        n_layers = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        layers = []
        for _ in range(n_layers):
            layer_id = int(np.frombuffer(f.read(4), dtype="<i4")[0])
            n = int(np.frombuffer(f.read(8), dtype="<i8")[0])
            bands = int(np.frombuffer(f.read(4), dtype="<i4")[0])
            layers.append(
                GaussianLayer(
                    layer_id,
                    _read_arr(f, (n, 3)),
                    _read_arr(f, (n, 2)),
                    _read_arr(f, (n, 4)),
                    _read_arr(f, (n,)),
                    _read_arr(f, (n, bands, 3)),
                )
            )
        extras = {}
        n_extra = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        for _ in range(n_extra):
            name_len = int(np.frombuffer(f.read(2), dtype="<u2")[0])
            name = f.read(name_len).decode("utf-8")
            ndim = int(np.frombuffer(f.read(1), dtype=np.uint8)[0])
            shape = tuple(
                int(np.frombuffer(f.read(8), dtype="<i8")[0]) for _ in range(ndim)
            )
            extras[name] = _read_arr(f, shape)
    return layers, extras
