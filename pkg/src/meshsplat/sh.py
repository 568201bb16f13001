"""Real spherical-harmonic color evaluation (degrees 0..3) with gradients.

Coefficient layout is (..., K, 3) with K = (degree + 1)**2 and the usual
splatting band order. Colors are offset by +0.5 and clamped to [0, 1].
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions, shape (N, K)."""
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_dir_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis_k)/d(dir), shape (N, K, 3)."""
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)

    def vec(a, b, c):
        return np.stack([a, b, c], axis=-1)

    out = [vec(zero, zero, zero)]
    if degree >= 1:
        one = np.ones_like(x)
        out += [
            vec(zero, -SH_C1 * one, zero),
            vec(zero, zero, SH_C1 * one),
            vec(-SH_C1 * one, zero, zero),
        ]
    if degree >= 2:
        out += [
            SH_C2[0] * vec(y, x, zero),
            SH_C2[1] * vec(zero, z, y),
            SH_C2[2] * vec(-2.0 * x, -2.0 * y, 4.0 * z),
            SH_C2[3] * vec(z, zero, x),
            SH_C2[4] * vec(2.0 * x, -2.0 * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C3[0] * vec(6.0 * x * y, 3.0 * xx - 3.0 * yy, zero),
            SH_C3[1] * vec(y * z, x * z, x * y),
            SH_C3[2] * vec(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z),
            SH_C3[3] * vec(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * vec(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z),
            SH_C3[5] * vec(2.0 * x * z, -2.0 * y * z, xx - yy),
            SH_C3[6] * vec(3.0 * xx - 3.0 * yy, -6.0 * x * y, zero),
        ]
    return np.stack(out, axis=-2)


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """RGB from SH coefficients and unit view direction: clamp(SH + 0.5, 0, 1).

    coeffs has shape (..., K, 3); view_dir broadcasts over the leading dims.
    """
    coeffs = np.asarray(coeffs)
    k = coeffs.shape[-2]
    degree = int(round(np.sqrt(k))) - 1
    basis = sh_basis(view_dir, degree)
    rgb = np.einsum("...k,...kc->...c", basis, coeffs) + 0.5
    return np.clip(rgb, 0.0, 1.0)
