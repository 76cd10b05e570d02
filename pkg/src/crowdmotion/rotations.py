"""Rotation helpers shared by the body model, motion prior and AMC loss.

Torch versions are differentiable and used inside energies; numpy versions
are used at the package boundary (export, initialisation, tests).
"""

import numpy as np
import torch

DTYPE = torch.float64

_SMALL = 1e-12


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def skew(v):
    """(..., 3) -> (..., 3, 3) cross-product matrices."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = torch.zeros_like(x)
    return torch.stack(
        [torch.stack([o, -z, y], -1), torch.stack([z, o, -x], -1), torch.stack([-y, x, o], -1)],
        -2,
    )


def axis_angle_to_matrix(v):
    """Rodrigues formula, safe (value and gradient) at the zero rotation."""
    v = as_tensor(v)
    th2 = (v * v).sum(-1)
    small = th2 < 1e-10
    th2s = torch.where(small, torch.ones_like(th2), th2)
    th = torch.sqrt(th2s)
    a = torch.where(small, 1.0 - th2 / 6.0, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24.0, (1.0 - torch.cos(th)) / th2s)
    K = skew(v)
    eye = torch.eye(3, dtype=v.dtype).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _cofactor(X):
    a, b, c = X[..., 0, :], X[..., 1, :], X[..., 2, :]
    return torch.stack(
        [torch.linalg.cross(b, c), torch.linalg.cross(c, a), torch.linalg.cross(a, b)], -2
    )


def project_to_rotation(M, max_iter=30, tol=1e-13):
    """Nearest rotation (orthogonal polar factor) by Newton's polar iteration.

    X <- (X + X^{-T}) / 2 converges quadratically to the polar factor; the
    unrolled iteration is smooth, unlike SVD whose backward pass blows up
    when singular values coincide (the common case for near-rotations).
    """
    X = M
    for _ in range(max_iter):
        cof = _cofactor(X)
        det = (X[..., 0, :] * cof[..., 0, :]).sum(-1)
        Xn = 0.5 * (X + cof / det[..., None, None])
        step = (Xn - X).abs().max()
        X = Xn
        if step.item() < tol:
            break
    return X


def geodesic_sq(R1, R2):
    """Squared geodesic angle between rotation matrices, smooth at zero."""
    M = R1.transpose(-1, -2) @ R2
    c = 0.5 * (M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2] - 1.0)
    w = torch.stack(
        [M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], -1
    ) * 0.5
    s2 = (w * w).sum(-1)
    small = s2 < 1e-14
    s = torch.sqrt(torch.where(small, torch.ones_like(s2), s2))
    # angle / sin(angle); near zero angle ~ s / c, ratio -> 1 / c
    ratio = torch.where(small, 1.0 / c, torch.atan2(s, c) / s)
    return ratio * ratio * s2


def matrix_to_axis_angle(R):
    """Log map of rotation matrices (..., 3, 3) -> (..., 3); smooth away from angle pi."""
    c = 0.5 * (R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0)
    w = torch.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1) * 0.5
    s2 = (w * w).sum(-1)
    small = s2 < 1e-14
    s = torch.sqrt(torch.where(small, torch.ones_like(s2), s2))
    ratio = torch.where(small, 1.0 / c, torch.atan2(s, c) / s)
    return w * ratio[..., None]


# ---------------------------------------------------------------- numpy side


def np_axis_angle_to_matrix(v):
    with torch.no_grad():
        return axis_angle_to_matrix(as_tensor(v)).numpy()


def np_matrix_to_axis_angle(R):
    """Log map returning axis-angle with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    out = np.zeros((R.shape[0], 3))
    tr = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.arccos(tr)
    w = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], -1)
    for i in range(R.shape[0]):
        a = ang[i]
        if a < 1e-6:
            out[i] = 0.5 * w[i]
        elif np.pi - a < 1e-4:
            # axis from the dominant column of (R + I) / 2 = n n^T
            S = 0.5 * (R[i] + np.eye(3))
            k = int(np.argmax(np.diag(S)))
            n = S[:, k] / np.sqrt(max(S[k, k], _SMALL))
            if np.dot(n, w[i]) < 0:
                n = -n
            out[i] = n * a
        else:
            out[i] = w[i] * (a / (2.0 * np.sin(a)))
    return out.reshape(shape + (3,))


def np_project_to_rotation(M):
    """Nearest rotation via SVD (numpy oracle for the Newton iteration)."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(M.shape[:-2] + (3,))
    D[..., -1] = d
    return (U * D[..., None, :]) @ Vt


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
