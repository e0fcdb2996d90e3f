"""Real spherical harmonics up to degree 3 (splatting sign convention)."""

import numba
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


@numba.njit(cache=True)
def sh_basis(x, y, z, n, out, dout):
    """Fill ``out[:n]`` with basis values at unit direction (x, y, z) and
    ``dout[:n, :]`` with their partials w.r.t. x, y, z."""
    for k in range(n):
        out[k] = 0.0
        dout[k, 0] = 0.0
        dout[k, 1] = 0.0
        dout[k, 2] = 0.0
    out[0] = C0
    if n > 1:
        out[1] = -C1 * y
        out[2] = C1 * z
        out[3] = -C1 * x
        dout[1, 1] = -C1
        dout[2, 2] = C1
        dout[3, 0] = -C1
    if n > 4:
        xx, yy, zz = x * x, y * y, z * z
        c = C2[0]
        out[4] = c * x * y
        dout[4, 0] = c * y
        dout[4, 1] = c * x
        c = C2[1]
        out[5] = c * y * z
        dout[5, 1] = c * z
        dout[5, 2] = c * y
        c = C2[2]
        out[6] = c * (2 * zz - xx - yy)
        dout[6, 0] = -2 * c * x
        dout[6, 1] = -2 * c * y
        dout[6, 2] = 4 * c * z
        c = C2[3]
        out[7] = c * x * z
        dout[7, 0] = c * z
        dout[7, 2] = c * x
        c = C2[4]
        out[8] = c * (xx - yy)
        dout[8, 0] = 2 * c * x
        dout[8, 1] = -2 * c * y
        if n > 9:
            c = C3[0]
            out[9] = c * y * (3 * xx - yy)
            dout[9, 0] = 6 * c * x * y
            dout[9, 1] = c * (3 * xx - 3 * yy)
            c = C3[1]
            out[10] = c * x * y * z
            dout[10, 0] = c * y * z
            dout[10, 1] = c * x * z
            dout[10, 2] = c * x * y
            c = C3[2]
            out[11] = c * y * (4 * zz - xx - yy)
            dout[11, 0] = -2 * c * x * y
            dout[11, 1] = c * (4 * zz - xx - 3 * yy)
            dout[11, 2] = 8 * c * y * z
            c = C3[3]
            out[12] = c * z * (2 * zz - 3 * xx - 3 * yy)
            dout[12, 0] = -6 * c * x * z
            dout[12, 1] = -6 * c * y * z
            dout[12, 2] = c * (6 * zz - 3 * xx - 3 * yy)
            c = C3[4]
            out[13] = c * x * (4 * zz - xx - yy)
            dout[13, 0] = c * (4 * zz - 3 * xx - yy)
            dout[13, 1] = -2 * c * x * y
            dout[13, 2] = 8 * c * x * z
            c = C3[5]
            out[14] = c * z * (xx - yy)
            dout[14, 0] = 2 * c * x * z
            dout[14, 1] = -2 * c * y * z
            dout[14, 2] = c * (xx - yy)
            c = C3[6]
            out[15] = c * x * (xx - 3 * yy)
            dout[15, 0] = c * (3 * xx - 3 * yy)
            dout[15, 1] = -6 * c * x * y


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Vectorized color evaluation: ``sh`` (N, C_h, 3), unit ``dirs`` (N, 3).

    Returns the unclamped color with the +0.5 offset applied.
    """
    n = sh.shape[1]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = [np.full_like(x, C0)]
    if n > 1:
        basis += [-C1 * y, C1 * z, -C1 * x]
    if n > 4:
        xx, yy, zz = x * x, y * y, z * z
        basis += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy), C2[3] * x * z, C2[4] * (xx - yy)]
    if n > 9:
        basis += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    B = np.stack(basis, axis=1)  # (N, C_h)
    return np.einsum("nk,nkc->nc", B, sh) + 0.5
