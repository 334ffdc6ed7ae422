"""Real spherical-harmonics appearance: basis evaluation up to degree 3,
basis direction-derivatives, and the rgb <-> band-0 conversions."""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
]
C3 = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
]


def num_sh_bases(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_bases(n_bases: int) -> int:
    degree = int(round(np.sqrt(n_bases))) - 1
    if num_sh_bases(degree) != n_bases:
        raise ValueError(f"{n_bases} is not a square band count")
    return degree


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def sh0_to_rgb(sh0):
    return np.asarray(sh0, dtype=np.float64) * C0 + 0.5


def sh_basis(degree: int, dirs):
    """Basis values for unit directions; (N, (degree+1)^2)."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    b = np.empty((n, num_sh_bases(degree)))
    b[:, 0] = C0
    if degree < 1:
        return b
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b[:, 1] = -C1 * y
    b[:, 2] = C1 * z
    b[:, 3] = -C1 * x
    if degree < 2:
        return b
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b[:, 4] = C2[0] * xy
    b[:, 5] = C2[1] * yz
    b[:, 6] = C2[2] * (2.0 * zz - xx - yy)
    b[:, 7] = C2[3] * xz
    b[:, 8] = C2[4] * (xx - yy)
    if degree < 3:
        return b
    b[:, 9] = C3[0] * y * (3.0 * xx - yy)
    b[:, 10] = C3[1] * xy * z
    b[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
    b[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
    b[:, 14] = C3[5] * z * (xx - yy)
    b[:, 15] = C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(degree: int, dirs):
    """d(basis)/d(direction) treating the direction as free; (N, B, 3)."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    g = np.zeros((n, num_sh_bases(degree), 3))
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g[:, 1, 1] = -C1
    g[:, 2, 2] = C1
    g[:, 3, 0] = -C1
    if degree < 2:
        return g
    g[:, 4, 0] = C2[0] * y
    g[:, 4, 1] = C2[0] * x
    g[:, 5, 1] = C2[1] * z
    g[:, 5, 2] = C2[1] * y
    g[:, 6, 0] = -2.0 * C2[2] * x
    g[:, 6, 1] = -2.0 * C2[2] * y
    g[:, 6, 2] = 4.0 * C2[2] * z
    g[:, 7, 0] = C2[3] * z
    g[:, 7, 2] = C2[3] * x
    g[:, 8, 0] = 2.0 * C2[4] * x
    g[:, 8, 1] = -2.0 * C2[4] * y
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 9, 0] = C3[0] * 6.0 * x * y
    g[:, 9, 1] = C3[0] * 3.0 * (xx - yy)
    g[:, 10, 0] = C3[1] * y * z
    g[:, 10, 1] = C3[1] * x * z
    g[:, 10, 2] = C3[1] * x * y
    g[:, 11, 0] = -2.0 * C3[2] * x * y
    g[:, 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[:, 11, 2] = 8.0 * C3[2] * y * z
    g[:, 12, 0] = -6.0 * C3[3] * x * z
    g[:, 12, 1] = -6.0 * C3[3] * y * z
    g[:, 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[:, 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[:, 13, 1] = -2.0 * C3[4] * x * y
    g[:, 13, 2] = 8.0 * C3[4] * x * z
    g[:, 14, 0] = 2.0 * C3[5] * x * z
    g[:, 14, 1] = -2.0 * C3[5] * y * z
    g[:, 14, 2] = C3[5] * (xx - yy)
    g[:, 15, 0] = 3.0 * C3[6] * (xx - yy)
    g[:, 15, 1] = -6.0 * C3[6] * x * y
    return g


def eval_sh(sh, dirs):
    """View-dependent rgb in [0,1]: clamp(basis . coeffs + 0.5).

    sh: (N, B, 3) coefficients; dirs: (N, 3) unit directions.
    Returns (rgb (N,3), active (N,3) bool mask where the clamp is inactive).
    """
    degree = degree_from_bases(sh.shape[1])
    raw = np.einsum("nb,nbc->nc", sh_basis(degree, dirs), sh) + 0.5
    active = (raw > 0.0) & (raw < 1.0)
    return np.clip(raw, 0.0, 1.0), active


def eval_sh_backward(sh, dirs, active, d_rgb):
    """Gradients of the clamped SH color w.r.t. coefficients and direction.

    Returns (d_sh (N, B, 3), d_dir (N, 3)); d_dir treats the direction as a
    free vector (project onto the unit sphere tangent at the caller).
    """
    degree = degree_from_bases(sh.shape[1])
    up = np.where(active, d_rgb, 0.0)
    basis = sh_basis(degree, dirs)
    d_sh = basis[:, :, None] * up[:, None, :]
    per_base = np.einsum("nbc,nc->nb", sh, up)
    d_dir = np.einsum("nbk,nb->nk", sh_basis_grad(degree, dirs), per_base)
    return d_sh, d_dir
