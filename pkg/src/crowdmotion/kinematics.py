"""Camera, ground plane, capsule skeleton and Procrustes alignment.

The body model keeps the parameter interface of SMPL (23 non-root joint
rotations, 10 shape coefficients, global orientation and translation) but
replaces the mesh with a 24-joint tree of capsules sampled at 8 surface
points per bone.

Coordinates: all 3D quantities live in the camera frame (x right, y down,
z forward).  The skeleton rest pose is defined in a body frame with x to the
person's left, y up and z forward; the root rotation maps it into the scene.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .rotations import DTYPE, as_tensor, axis_angle_to_matrix

N_JOINTS = 24
N_BETAS = 10
SAMPLES_PER_BONE = 8

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

HIPS = (1, 2)
SHOULDERS = (16, 17)
TORSO = HIPS + SHOULDERS


class NonPositiveDepth(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array(
            [[self.focal_x, 0.0, self.principal_x], [0.0, self.focal_y, self.principal_y], [0.0, 0.0, 1.0]]
        )

    def to_dict(self):
        return {"focal_x": self.focal_x, "focal_y": self.focal_y,
                "principal_x": self.principal_x, "principal_y": self.principal_y}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["focal_x"]), float(d["focal_y"]), float(d["principal_x"]), float(d["principal_y"]))


@dataclass(frozen=True)
class GroundPlane:
    """Plane {p : normal . p + offset = 0}; height of p is normal . p + offset."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("ground normal must be unit length")
        object.__setattr__(self, "normal", tuple(float(x) for x in n))

    @property
    def n(self):
        return np.asarray(self.normal)

    def height(self, p):
        return np.asarray(p) @ self.n + self.offset

    def basis(self):
        """Orthonormal (e1, e2, n) with e1, e2 spanning the plane."""
        n = self.n
        ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        e1 = ref - (ref @ n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2, n

    def origin(self):
        return -self.offset * self.n

    def to_ground(self, p):
        """Camera-frame points -> (e1, e2, height) plane coordinates."""
        e1, e2, n = self.basis()
        q = np.asarray(p) - self.origin()
        return np.stack([q @ e1, q @ e2, q @ n], -1)

    def from_ground(self, g):
        e1, e2, n = self.basis()
        g = np.asarray(g)
        return self.origin() + g[..., :1] * e1 + g[..., 1:2] * e2 + g[..., 2:3] * n

    def to_dict(self):
        return {"normal": list(self.normal), "offset": self.offset}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["normal"]), float(d["offset"]))


@dataclass
class BodyParams:
    """Pose theta (..., 23, 3), shape beta (..., 10), root rotation gamma (..., 3)
    and root translation tau (..., 3).  Leading axes are usually frames."""

    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray

    @classmethod
    def zeros(cls, *lead):
        return cls(np.zeros(lead + (23, 3)), np.zeros(lead + (N_BETAS,)), np.zeros(lead + (3,)), np.zeros(lead + (3,)))

    def __getitem__(self, idx):
        return BodyParams(self.theta[idx], self.beta[idx], self.gamma[idx], self.tau[idx])

    def copy(self):
        return BodyParams(self.theta.copy(), self.beta.copy(), self.gamma.copy(), self.tau.copy())


@dataclass
class BodyPose3D:
    joints: np.ndarray
    surface_points: np.ndarray


def _default_offsets():
    off = np.zeros((N_JOINTS, 3))
    off[1] = (0.09, -0.08, 0.0)
    off[2] = (-0.09, -0.08, 0.0)
    off[3] = (0.0, 0.10, 0.0)
    off[4] = (0.0, -0.40, 0.0)
    off[5] = (0.0, -0.40, 0.0)
    off[6] = (0.0, 0.14, 0.0)
    off[7] = (0.0, -0.40, 0.0)
    off[8] = (0.0, -0.40, 0.0)
    off[9] = (0.0, 0.14, 0.0)
    off[10] = (0.0, 0.0, 0.14)
    off[11] = (0.0, 0.0, 0.14)
    off[12] = (0.0, 0.14, 0.0)
    off[13] = (0.07, 0.10, 0.0)
    off[14] = (-0.07, 0.10, 0.0)
    off[15] = (0.0, 0.12, 0.02)
    off[16] = (0.12, 0.0, 0.0)
    off[17] = (-0.12, 0.0, 0.0)
    off[18] = (0.0, -0.28, 0.0)
    off[19] = (0.0, -0.28, 0.0)
    off[20] = (0.0, -0.25, 0.0)
    off[21] = (0.0, -0.25, 0.0)
    off[22] = (0.0, -0.08, 0.0)
    off[23] = (0.0, -0.08, 0.0)
    return off


def _default_shape_basis():
    # rows: joint (bone ending at that joint), cols: beta index; relative length change
    B = np.zeros((N_JOINTS, N_BETAS))
    B[1:, 0] = 0.06
    B[[4, 5, 7, 8], 1] = 0.04
    B[[3, 6, 9, 12], 2] = 0.04
    B[[18, 19, 20, 21, 22, 23], 3] = 0.04
    B[[13, 14, 16, 17], 4] = 0.05
    B[[12, 15], 5] = 0.05
    B[[10, 11], 6] = 0.05
    B[[4, 5], 7], B[[7, 8], 7] = 0.03, -0.03
    B[[18, 19], 8], B[[20, 21], 8] = 0.03, -0.03
    B[[1, 2], 9] = 0.06
    return B


def _default_radii():
    r = np.full(N_JOINTS, 0.04)
    r[[1, 2]] = 0.09
    r[[4, 5]] = 0.07
    r[[7, 8]] = 0.05
    r[[10, 11]] = 0.08  # sole of a flat foot sits exactly on the plane
    r[[3, 6, 9]] = 0.12
    r[12] = 0.05
    r[[13, 14]] = 0.06
    r[15] = 0.10
    r[[16, 17]] = 0.05
    r[[22, 23]] = 0.03
    return r


@dataclass
class Skeleton:
    parents: tuple = PARENTS
    offsets: np.ndarray = field(default_factory=_default_offsets)
    shape_basis: np.ndarray = field(default_factory=_default_shape_basis)
    radii: np.ndarray = field(default_factory=_default_radii)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if self.parents[0] != -1 or any(p >= k for k, p in enumerate(self.parents) if k):
            raise ValueError("parents must be topologically ordered with root 0")
        if np.any(np.linalg.norm(self.offsets[1:], axis=1) <= 0):
            raise ValueError("rest bones must have positive length")
        self._sample_dirs = self._surface_layout()
        self._cache = {}

    @property
    def n_surface(self):
        return (N_JOINTS - 1) * SAMPLES_PER_BONE

    def _surface_layout(self):
        # per bone: fractions along bone (2) x radial directions (4)
        frac = np.repeat([0.25, 0.75], 4)
        radial = np.zeros((N_JOINTS, SAMPLES_PER_BONE, 3))
        for k in range(1, N_JOINTS):
            u = self.offsets[k] / np.linalg.norm(self.offsets[k])
            ref = np.array([0.0, 1.0, 0.0]) if abs(u[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
            a = np.cross(u, ref)
            a /= np.linalg.norm(a)
            b = np.cross(u, a)
            dirs = np.stack([a, -a, b, -b])
            radial[k] = np.tile(dirs, (2, 1)) * self.radii[k]
        return frac, radial

    def tensors(self):
        if "t" not in self._cache:
            frac, radial = self._sample_dirs
            self._cache["t"] = (
                torch.as_tensor(self.offsets, dtype=DTYPE),
                torch.as_tensor(self.shape_basis, dtype=DTYPE),
                torch.as_tensor(frac, dtype=DTYPE),
                torch.as_tensor(radial, dtype=DTYPE),
            )
        return self._cache["t"]

    def rest_joints(self, beta=None):
        bp = BodyParams.zeros()
        if beta is not None:
            bp.beta = np.asarray(beta, dtype=np.float64)
        return forward_kinematics(self, bp).joints

    def to_dict(self):
        return {
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "radii": self.radii.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["parents"]), np.array(d["offsets"]), np.array(d["shape_basis"]), np.array(d["radii"]))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


DEFAULT_SKELETON = Skeleton()


def fk_rotmats(skel, rotmats, beta, tau, with_surface=True):
    """Differentiable forward kinematics.

    Parameters
    ----------
    rotmats : tensor (..., 24, 3, 3)
        Local joint rotations; index 0 is the global root rotation.
    beta : tensor (..., 10)
    tau : tensor (..., 3)

    Returns
    -------
    joints : tensor (..., 24, 3)
    surface : tensor (..., 184, 3) or None
    """
    offsets, basis, frac, radial = skel.tensors()
    scale = 1.0 + beta @ basis.T  # (..., 24)
    off = offsets * scale[..., None]
    G = [rotmats[..., 0, :, :]]
    J = [tau]
    for k in range(1, N_JOINTS):
        p = skel.parents[k]
        G.append(G[p] @ rotmats[..., k, :, :])
        J.append(J[p] + (G[p] @ off[..., k, :, None])[..., 0])
    joints = torch.stack(J, -2)
    if not with_surface:
        return joints, None
    par = list(skel.parents[1:])
    Gp = torch.stack([G[p] for p in par], -3)  # (..., 23, 3, 3)
    Jp = joints[..., par, :]
    local = frac[:, None] * off[..., 1:, None, :] + radial[1:]  # (..., 23, 8, 3)
    pts = Jp[..., None, :] + torch.einsum("...bij,...bsj->...bsi", Gp, local)
    return joints, pts.reshape(pts.shape[:-3] + (-1, 3))


def params_to_rotmats(theta, gamma):
    """(..., 23, 3) pose + (..., 3) root -> (..., 24, 3, 3)."""
    aa = torch.cat([gamma[..., None, :], theta], -2)
    return axis_angle_to_matrix(aa)


def fk_torch(skel, theta, beta, gamma, tau, with_surface=True):
    return fk_rotmats(skel, params_to_rotmats(theta, gamma), beta, tau, with_surface)


def forward_kinematics(skel, bp):
    """BodyParams -> BodyPose3D (numpy)."""
    with torch.no_grad():
        j, s = fk_torch(skel, as_tensor(bp.theta), as_tensor(bp.beta), as_tensor(bp.gamma), as_tensor(bp.tau))
    return BodyPose3D(j.numpy(), s.numpy())


def fk_jacobian(skel, bp):
    """Jacobian of the 72 joint coordinates w.r.t. (theta, beta, gamma, tau) flattened.

    Computed by reverse-mode differentiation of the torch body model for a
    single frame; returns an array of shape (72, 69 + 10 + 3 + 3).
    """
    x0 = np.concatenate([bp.theta.ravel(), bp.beta.ravel(), bp.gamma.ravel(), bp.tau.ravel()])

    def f(x):
        th, b, g, t = x[:69].reshape(23, 3), x[69:79], x[79:82], x[82:85]
        return fk_torch(skel, th, b, g, t, with_surface=False)[0].reshape(-1)

    return torch.autograd.functional.jacobian(f, as_tensor(x0)).numpy()


def project(cam, p):
    """Pinhole projection of camera-frame points (..., 3) -> pixels (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p[..., 2] <= 1e-6):
        raise NonPositiveDepth("point at or behind the camera")
    return np.stack(
        [cam.focal_x * p[..., 0] / p[..., 2] + cam.principal_x, cam.focal_y * p[..., 1] / p[..., 2] + cam.principal_y],
        -1,
    )


def unproject(cam, uv, depth):
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - cam.principal_x) / cam.focal_x * depth
    y = (uv[..., 1] - cam.principal_y) / cam.focal_y * depth
    return np.stack([x, y, depth * np.ones_like(x)], -1)


def project_torch(cam, p):
    z = p[..., 2]
    return torch.stack([cam.focal_x * p[..., 0] / z + cam.principal_x, cam.focal_y * p[..., 1] / z + cam.principal_y], -1)


def torso_center(joints):
    return joints[..., TORSO, :].mean(-2)


def hvip3d(joints, g):
    """Ground projection of the torso centre (mean of hips and shoulders)."""
    if isinstance(joints, BodyPose3D):
        joints = joints.joints
    c = torso_center(np.asarray(joints))
    n = g.n
    return c - (c @ n + g.offset)[..., None] * n


def hvip3d_torch(joints, n, offset):
    c = joints[..., TORSO, :].mean(-2)
    return c - ((c * n).sum(-1) + offset)[..., None] * n


def lowest_surface_height(pose, g, signed=False):
    pts = pose.surface_points if isinstance(pose, BodyPose3D) else np.asarray(pose)
    h = (pts @ g.n + g.offset) / np.linalg.norm(g.n)
    if signed:
        return h.min(-1)
    return np.abs(h).min(-1)


@dataclass
class Similarity:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    residual: float = 0.0

    def apply(self, x):
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation


def procrustes(source, target, with_scale=False):
    """Least-squares rigid (or similarity) map of source onto target (Umeyama)."""
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape or X.shape[0] < 3:
        raise DegenerateConfiguration("need equal-size point sets of at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source point set has rank < 2")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    D = np.array([1.0, 1.0, d])
    R = (U * D) @ Vt
    s = (S * D).sum() / (Xc * Xc).sum() if with_scale else 1.0
    t = my - s * R @ mx
    T = Similarity(R, t, float(s))
    T.residual = float(((T.apply(X) - Y) ** 2).sum())
    return T
