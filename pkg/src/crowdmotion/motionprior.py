"""Segment-level latent motion model and per-frame pose prior.

Both are linear-Gaussian: a principal subspace with whitened coordinates, so
the latent has a standard-normal prior and decoding is ``mean + basis @ (scale * z)``.

Motion state per frame (330 values), in a per-segment canonical ground
frame whose origin is the pelvis ground point of the segment's first frame
and whose x axis is the heading at that frame:

    local  (315): joint positions of joints 1..21 (horizontal relative to the
                  pelvis, vertical = height above ground), their velocities,
                  and their local rotation matrices
    global  (15): pelvis position, root translation, root rotation matrix
"""

import base64
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .energy import CONTACT_JOINTS
from .kinematics import DEFAULT_SKELETON, BodyParams, fk_rotmats, fk_torch
from .rotations import (
    DTYPE,
    as_tensor,
    axis_angle_to_matrix,
    np_axis_angle_to_matrix,
    np_matrix_to_axis_angle,
    project_to_rotation,
)

log = logging.getLogger(__name__)

SEG_LEN = 64
N_STATE_JOINTS = 21
LOCAL_DIM = N_STATE_JOINTS * (3 + 3 + 9)  # 315
GLOBAL_DIM = 3 + 3 + 9  # 15
STATE_DIM = LOCAL_DIM + GLOBAL_DIM  # 330
POSE_LATENT_DIM = 32

# state joint (1..21) -> keypoint slot whose score decides its visibility
JOINT_VIS_SLOT = {
    1: 11, 2: 12, 3: 2, 4: 13, 5: 14, 6: 2, 7: 15, 8: 16, 9: 2, 10: 15, 11: 16,
    12: 1, 13: 3, 14: 4, 15: 0, 16: 5, 17: 6, 18: 7, 19: 8, 20: 9, 21: 10,
}
_CONTACT_IDX = [j - 1 for j in CONTACT_JOINTS]


class WrongSegmentLength(ValueError):
    pass


class RankDeficientCorpus(ValueError):
    pass


class AllMasked(ValueError):
    pass


class NonInvertibleRotation(ArithmeticError):
    pass


@dataclass
class Anchor:
    """Canonical frame of a segment: rotation (columns = canonical axes) and origin."""

    rotation: np.ndarray
    origin: np.ndarray

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "origin": self.origin.tolist()}


def heading_axis(gamma_rot, ground):
    f = gamma_rot[..., :, 2]  # body forward axis in the camera frame
    n = ground.n
    fh = f - (f @ n)[..., None] * n
    norm = np.linalg.norm(fh, axis=-1, keepdims=True)
    return fh / np.maximum(norm, 1e-12)


def make_anchor(pelvis, gamma, ground, yaw_offset=0.0, shift=(0.0, 0.0)):
    """Anchor at the pelvis ground point with x along the body heading."""
    n = ground.n
    R = np_axis_angle_to_matrix(gamma)
    x = heading_axis(R, ground)
    if yaw_offset:
        y = np.cross(n, x)
        x = np.cos(yaw_offset) * x + np.sin(yaw_offset) * y
    y = np.cross(n, x)
    o = pelvis - (pelvis @ n + ground.offset) * n + shift[0] * x + shift[1] * y
    return Anchor(np.stack([x, y, n], 1), o)


def _local_from_joints(joints, Ra, origin):
    """(T, 24, 3) camera joints -> canonical local positions (T, 21, 3)."""
    c = (joints - origin) @ Ra  # canonical coordinates, z = height
    rel = c[:, 1:22].copy()
    rel[..., :2] -= c[:, None, 0, :2]
    return rel, c[:, 0]


def _velocity(x):
    v = np.zeros_like(x)
    v[1:] = x[1:] - x[:-1]
    v[0] = v[1]
    return v


def states_from_params(params, ground, skel=DEFAULT_SKELETON, anchor=None):
    """BodyParams over one 64-frame segment -> (states (64, 330), anchor)."""
    T = params.theta.shape[0]
    if T != SEG_LEN:
        raise WrongSegmentLength(f"segment has {T} frames, expected {SEG_LEN}")
    with torch.no_grad():
        joints = fk_torch(skel, as_tensor(params.theta), as_tensor(params.beta), as_tensor(params.gamma),
                          as_tensor(params.tau), with_surface=False)[0].numpy()
    if anchor is None:
        anchor = make_anchor(joints[0, 0], params.gamma[0], ground)
    Ra, o = anchor.rotation, anchor.origin
    rel, pelvis = _local_from_joints(joints, Ra, o)
    vel = _velocity(rel)
    rot = np_axis_angle_to_matrix(params.theta[:, :N_STATE_JOINTS])
    local = np.concatenate([rel.reshape(T, -1), vel.reshape(T, -1), rot.reshape(T, -1)], 1)
    g_rot = Ra.T @ np_axis_angle_to_matrix(params.gamma)
    tau_c = (params.tau - o) @ Ra
    glob = np.concatenate([pelvis, tau_c, g_rot.reshape(T, 9)], 1)
    return np.concatenate([local, glob], 1), anchor


def state_masks(scores, zeta, threshold=0.5):
    """(T, 17) keypoint scores and (T,) person validity -> (T, 330) visibility masks."""
    scores = np.asarray(scores)
    T = scores.shape[0]
    vis = np.stack([scores[:, JOINT_VIS_SLOT[j]] >= threshold for j in range(1, 22)], 1)
    vis &= np.asarray(zeta, bool)[:, None]
    pos = np.repeat(vis, 3, 1)
    rot = np.repeat(vis, 9, 1)
    glob = np.repeat(np.asarray(zeta, bool)[:, None], GLOBAL_DIM, 1)
    m = np.concatenate([pos, pos, rot, glob], 1)
    assert m.shape == (T, STATE_DIM)
    return m


def contact_features(local, glob):
    """(T, 315), (T, 15) -> (T, 4, 2) foot height and ground speed per contact joint."""
    xp = torch if isinstance(local, torch.Tensor) else np
    T = local.shape[0]
    pos = local[:, : 3 * N_STATE_JOINTS].reshape(T, N_STATE_JOINTS, 3)[:, _CONTACT_IDX]
    vel = local[:, 3 * N_STATE_JOINTS: 6 * N_STATE_JOINTS].reshape(T, N_STATE_JOINTS, 3)[:, _CONTACT_IDX]
    r = glob[:, :3]
    if xp is torch:
        dr = torch.cat([r[1:2] - r[0:1], r[1:] - r[:-1]], 0)
    else:
        dr = np.concatenate([r[1:2] - r[0:1], r[1:] - r[:-1]], 0)
    gvx = vel[..., 0] + dr[:, None, 0]
    gvy = vel[..., 1] + dr[:, None, 1]
    gvz = vel[..., 2]
    speed = xp.sqrt(gvx * gvx + gvy * gvy + gvz * gvz + 1e-12)
    return xp.stack([pos[..., 2], speed], -1)


def _arr_to_b64(a):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_to_arr(s):
    return np.load(io.BytesIO(base64.b64decode(s)), allow_pickle=False)


def _pca(X, d):
    """Principal subspace of rows of X (already centred)."""
    n, D = X.shape
    # eigendecompose whichever Gram matrix is smaller
    evals, evecs = np.linalg.eigh(X @ X.T if n <= D else X.T @ X)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    rank = int((evals > 1e-12 * max(evals[0], 1e-300)).sum())
    if rank == 0:
        raise RankDeficientCorpus("corpus has no variance")
    k = min(d, rank)
    if n <= D:
        basis = X.T @ evecs[:, :k] / np.sqrt(evals[:k])
    else:
        basis = evecs[:, :k]
    var = evals[:k] / max(n - 1, 1)
    if k < d:
        # pad with arbitrary orthonormal directions carrying the variance floor
        rng = np.random.default_rng(0)
        extra = rng.normal(size=(X.shape[1], d - k))
        extra -= basis @ (basis.T @ extra)
        q, _ = np.linalg.qr(extra)
        basis = np.concatenate([basis, q], 1)
        var = np.concatenate([var, np.zeros(d - k)])
    explained = evals[:k].sum() / max(evals.sum(), 1e-300)
    return basis, var, float(explained)


@dataclass
class PosePrior:
    """Per-frame pose subspace (stand-in for a learned pose-prior encoder)."""

    mean: np.ndarray  # (69,)
    basis: np.ndarray  # (69, d)
    scale: np.ndarray  # (d,)

    @classmethod
    def fit(cls, thetas, d=POSE_LATENT_DIM, floor=0.02):
        X = np.asarray(thetas, dtype=np.float64).reshape(len(thetas), -1)
        mu = X.mean(0)
        basis, var, _ = _pca(X - mu, d)
        return cls(mu, basis, np.sqrt(var + floor**2))

    def encode(self, theta):
        x = np.asarray(theta).reshape(np.shape(theta)[:-2] + (-1,)) - self.mean
        return (x @ self.basis) / self.scale

    def decode(self, z):
        return (self.mean + (np.asarray(z) * self.scale) @ self.basis.T).reshape(np.shape(z)[:-1] + (23, 3))

    def encode_torch(self, theta):
        t = self._tensors()
        return ((theta.reshape(theta.shape[:-2] + (-1,)) - t[0]) @ t[1]) / t[2]

    def decode_torch(self, z):
        t = self._tensors()
        return (t[0] + (z * t[2]) @ t[1].T).reshape(z.shape[:-1] + (23, 3))

    def _tensors(self):
        if not hasattr(self, "_t"):
            self._t = tuple(torch.as_tensor(a, dtype=DTYPE) for a in (self.mean, self.basis, self.scale))
        return self._t

    def to_dict(self):
        return {"mean": _arr_to_b64(self.mean), "basis": _arr_to_b64(self.basis), "scale": _arr_to_b64(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(_b64_to_arr(d["mean"]), _b64_to_arr(d["basis"]), _b64_to_arr(d["scale"]))


@dataclass
class PriorModel:
    mean: np.ndarray  # (64, 330)
    local_basis: np.ndarray  # (64 * 315, d_p), orthonormal columns
    local_scale: np.ndarray  # (d_p,)
    global_basis: np.ndarray  # (64 * 15, d_r)
    global_scale: np.ndarray  # (d_r,)
    contact_coef: np.ndarray  # (3,) bias, height, speed
    meta: dict = field(default_factory=dict)
    pose_prior: PosePrior = None

    @property
    def d_p(self):
        return self.local_basis.shape[1]

    @property
    def d_r(self):
        return self.global_basis.shape[1]

    @property
    def latent_dim(self):
        return self.d_p + self.d_r

    # -------------------------------------------------------------- fitting

    @classmethod
    def fit(cls, states, d_p=256, d_r=128, masks=None, stance=None, em_iters=3, floor=1e-4):
        """Fit the subspaces on a corpus of (N, 64, 330) states.

        With ``masks`` the fit alternates projection-based imputation of
        masked entries and refitting (weighted PCA by EM).  ``stance`` (N, 64,
        4) bool labels train the contact classifier.
        """
        states = np.asarray(states, dtype=np.float64)
        N = states.shape[0]
        if N < 10 * max(d_p, d_r):
            raise RankDeficientCorpus(f"corpus of {N} segments too small for d={max(d_p, d_r)}")
        mean = states.mean(0)
        parts = []
        for sl, d in ((slice(0, LOCAL_DIM), d_p), (slice(LOCAL_DIM, STATE_DIM), d_r)):
            X = states[:, :, sl].reshape(N, -1)
            mu = mean[:, sl].reshape(-1)
            if masks is not None:
                M = np.asarray(masks)[:, :, sl].reshape(N, -1)
                Xw = np.where(M, X, mu)
                for _ in range(em_iters):
                    mu_w = Xw.mean(0)
                    B, _, _ = _pca(Xw - mu_w, d)
                    recon = mu_w + ((Xw - mu_w) @ B) @ B.T
                    Xw = np.where(M, X, recon)
                mu = Xw.mean(0)
                X = Xw
            B, var, explained = _pca(X - mu, d)
            parts.append((mu, B, np.sqrt(var + floor), explained))
        mean = np.concatenate([parts[0][0].reshape(SEG_LEN, LOCAL_DIM), parts[1][0].reshape(SEG_LEN, GLOBAL_DIM)], 1)
        coef = np.zeros(3)
        if stance is not None:
            coef = fit_contact_classifier(states, stance)
        digest = hashlib.sha256(np.ascontiguousarray(states).tobytes()).hexdigest()
        meta = {"corpus_hash": digest, "n_segments": int(N), "d_p": int(d_p), "d_r": int(d_r),
                "explained_local": parts[0][3], "explained_global": parts[1][3]}
        return cls(mean, parts[0][1], parts[0][2], parts[1][1], parts[1][2], coef, meta)

    # -------------------------------------------------------------- encode / decode

    def encode(self, states, masks=None, min_visible=0.05):
        """Mask-weighted least-squares latent of one (64, 330) segment.

        Masked entries are never read, so perturbing them leaves the code
        bit-identical.  Raises AllMasked below ``min_visible`` visibility.
        """
        x = np.asarray(states, dtype=np.float64)
        if x.shape != (SEG_LEN, STATE_DIM):
            raise WrongSegmentLength(f"state block of shape {x.shape}")
        if masks is None:
            masks = np.ones_like(x, dtype=bool)
        masks = np.asarray(masks, bool)
        if masks.mean() < min_visible:
            raise AllMasked("fewer than 5% of state entries visible")
        zs = []
        for sl, B, s in ((slice(0, LOCAL_DIM), self.local_basis, self.local_scale),
                         (slice(LOCAL_DIM, STATE_DIM), self.global_basis, self.global_scale)):
            m = masks[:, sl].reshape(-1)
            if not m.any():
                zs.append(np.zeros(B.shape[1]))
                continue
            r = x[:, sl].reshape(-1)[m] - self.mean[:, sl].reshape(-1)[m]
            A = B[m] * s
            if m.all():
                zs.append((B.T @ r) / s)  # orthogonal projection
            else:
                zs.append(np.linalg.lstsq(A, r, rcond=None)[0])
        return np.concatenate(zs)

    def decode_raw(self, z):
        """Linear decode without rotation re-orthonormalisation: (64, 330)."""
        z = np.asarray(z, dtype=np.float64)
        loc = self.local_basis @ (self.local_scale * z[: self.d_p])
        glo = self.global_basis @ (self.global_scale * z[self.d_p:])
        return self.mean + np.concatenate([loc.reshape(SEG_LEN, LOCAL_DIM), glo.reshape(SEG_LEN, GLOBAL_DIM)], 1)

    def decode(self, z):
        """Latent -> (states with projected rotations, contact probabilities (64, 4))."""
        with torch.no_grad():
            loc, glo = self.decode_torch(as_tensor(z))
            c = self.contacts_torch(loc, glo)
            loc = loc.clone()
            rot = project_to_rotation(loc[:, 6 * N_STATE_JOINTS:].reshape(SEG_LEN, N_STATE_JOINTS, 3, 3))
            loc[:, 6 * N_STATE_JOINTS:] = rot.reshape(SEG_LEN, -1)
            glo = glo.clone()
            glo[:, 6:] = project_to_rotation(glo[:, 6:].reshape(SEG_LEN, 3, 3)).reshape(SEG_LEN, 9)
        return torch.cat([loc, glo], 1).numpy(), c.numpy()

    def _tensors(self):
        if not hasattr(self, "_t"):
            self._t = tuple(torch.as_tensor(a, dtype=DTYPE) for a in (
                self.mean, self.local_basis, self.local_scale, self.global_basis, self.global_scale,
                self.contact_coef))
        return self._t

    def decode_torch(self, z):
        mean, Bp, sp, Br, sr, _ = self._tensors()
        loc = mean[:, :LOCAL_DIM] + (Bp @ (sp * z[..., : self.d_p])).reshape(SEG_LEN, LOCAL_DIM)
        glo = mean[:, LOCAL_DIM:] + (Br @ (sr * z[..., self.d_p:])).reshape(SEG_LEN, GLOBAL_DIM)
        return loc, glo

    def contacts_torch(self, loc, glo):
        coef = self._tensors()[5]
        f = contact_features(loc, glo)
        return torch.sigmoid(coef[0] + coef[1] * f[..., 0] + coef[2] * f[..., 1])

    def rotations_torch(self, loc, glo, anchor):
        """Decoded pose rotations (64, 21, 3, 3) and camera-frame root rotation / translation."""
        rot = project_to_rotation(loc[:, 6 * N_STATE_JOINTS:].reshape(SEG_LEN, N_STATE_JOINTS, 3, 3))
        Ra = torch.as_tensor(anchor.rotation, dtype=DTYPE)
        o = torch.as_tensor(anchor.origin, dtype=DTYPE)
        groot = Ra @ project_to_rotation(glo[:, 6:].reshape(SEG_LEN, 3, 3))
        tau = o + glo[:, 3:6] @ Ra.T
        return rot, groot, tau

    def decode_to_params(self, z, anchor, beta, hands=None):
        """Latent -> BodyParams (64 frames) in the camera frame.

        ``beta`` is carried through unchanged; ``hands`` (64, 2, 3) gives the
        rotations of the two hand joints, which the state does not describe.
        """
        return params_from_states(self.decode_raw(z), anchor, beta, hands)

    # -------------------------------------------------------------- persistence

    def to_dict(self):
        d = {
            "format": "crowdmotion-prior/1",
            "shapes": {"seg_len": SEG_LEN, "state_dim": STATE_DIM, "d_p": self.d_p, "d_r": self.d_r},
            "mean": _arr_to_b64(self.mean),
            "local_basis": _arr_to_b64(self.local_basis),
            "local_scale": _arr_to_b64(self.local_scale),
            "global_basis": _arr_to_b64(self.global_basis),
            "global_scale": _arr_to_b64(self.global_scale),
            "contact_coef": self.contact_coef.tolist(),
            "meta": self.meta,
        }
        if self.pose_prior is not None:
            d["pose_prior"] = self.pose_prior.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        pp = PosePrior.from_dict(d["pose_prior"]) if "pose_prior" in d else None
        return cls(_b64_to_arr(d["mean"]), _b64_to_arr(d["local_basis"]), _b64_to_arr(d["local_scale"]),
                   _b64_to_arr(d["global_basis"]), _b64_to_arr(d["global_scale"]),
                   np.asarray(d["contact_coef"], float), d.get("meta", {}), pp)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def params_from_states(states, anchor, beta, hands=None):
    """Invert the state construction: (64, 330) states -> BodyParams.

    Rotation blocks are projected to the nearest rotation first; root
    orientation and translation come from the global block.
    """
    x = as_tensor(states)
    T = x.shape[0]
    with torch.no_grad():
        rot = project_to_rotation(x[:, 6 * N_STATE_JOINTS:LOCAL_DIM].reshape(T, N_STATE_JOINTS, 3, 3)).numpy()
        groot = anchor.rotation @ project_to_rotation(x[:, LOCAL_DIM + 6:].reshape(T, 3, 3)).numpy()
    if np.any(np.linalg.det(rot) <= 0) or np.any(np.linalg.det(groot) <= 0):
        raise NonInvertibleRotation("decoded rotation block has non-positive determinant")
    tau = anchor.origin + x[:, LOCAL_DIM + 3:LOCAL_DIM + 6].numpy() @ anchor.rotation.T
    theta = np.zeros((T, 23, 3))
    theta[:, :N_STATE_JOINTS] = np_matrix_to_axis_angle(rot)
    if hands is not None:
        theta[:, N_STATE_JOINTS:] = hands
    beta = np.broadcast_to(np.asarray(beta, float), (T, 10)).copy()
    return BodyParams(theta, beta, np_matrix_to_axis_angle(groot), tau)


def fit_contact_classifier(states, stance):
    """Logistic regression of stance labels on (foot height, foot speed)."""
    from sklearn.linear_model import LogisticRegression

    N = states.shape[0]
    feats = np.concatenate([contact_features(s[:, :LOCAL_DIM], s[:, LOCAL_DIM:]).reshape(-1, 2) for s in states])
    y = np.asarray(stance, bool).reshape(-1)
    if y.all() or not y.any():
        return np.array([10.0 if y.all() else -10.0, 0.0, 0.0])
    clf = LogisticRegression(C=100.0, max_iter=2000).fit(feats, y)
    return np.concatenate([clf.intercept_, clf.coef_[0]])


# ------------------------------------------------------------------ corpus


def augment_masks(rng, n, kinds=("joint", "frame", "body", "run")):
    """Occlusion masks of the four augmentation kinds, (n, 64, 330) bool."""
    out = np.ones((n, SEG_LEN, STATE_DIM), bool)
    lower = [j for j in range(1, 22) if j in (1, 2, 4, 5, 7, 8, 10, 11)]
    upper = [j for j in range(1, 22) if j not in lower]
    for i in range(n):
        kind = kinds[rng.integers(len(kinds))]
        vis = np.ones((SEG_LEN, N_STATE_JOINTS), bool)
        glob = np.ones(SEG_LEN, bool)
        if kind == "joint":
            vis &= rng.random((SEG_LEN, N_STATE_JOINTS)) > 0.2
        elif kind == "frame":
            drop = rng.random(SEG_LEN) < 0.2
            vis[drop] = False
            glob[drop] = False
        elif kind == "body":
            half = lower if rng.random() < 0.5 else upper
            vis[:, [j - 1 for j in half]] = False
        else:
            L = int(rng.integers(8, 33))
            s = int(rng.integers(0, SEG_LEN - L + 1))
            if rng.random() < 0.5:
                vis[s:s + L] = False
                glob[s:s + L] = False
            else:
                js = rng.choice(N_STATE_JOINTS, size=int(rng.integers(1, 8)), replace=False)
                vis[s:s + L, js] = False
        pos = np.repeat(vis, 3, 1)
        out[i] = np.concatenate([pos, pos, np.repeat(vis, 9, 1), np.repeat(glob[:, None], GLOBAL_DIM, 1)], 1)
    return out


def build_corpus(n_segments=2560, seed=0, ground=None, skel=DEFAULT_SKELETON, anchor_jitter=(0.3, 0.15)):
    """Synthetic gait segments in canonical frames.

    Returns (states (N, 64, 330), stance (N, 64, 4), thetas (N*64, 23, 3)).
    Anchors are jittered by up to ``anchor_jitter`` (metres, radians) so that
    the subspace also spans small offsets of the canonical frame.
    """
    from .simcrowd import CameraSetup, foot_sole_heights, gen_gait

    ground = ground or CameraSetup().ground_plane()
    rng = np.random.default_rng(seed)
    states, stances, thetas = [], [], []
    t = np.arange(SEG_LEN) / 30.0
    for _ in range(n_segments):
        speed = 0.0 if rng.random() < 0.08 else float(rng.uniform(0.7, 1.7))
        turn = float(rng.normal(0.0, 0.12))  # rad/s
        yaw0 = float(rng.uniform(-np.pi, np.pi))
        start = np.array([rng.uniform(-10, 10), rng.uniform(15, 40)])
        heading = yaw0 + turn * t
        dxy = speed / 30.0 * np.stack([np.cos(heading), np.sin(heading)], 1)
        xy = start + np.concatenate([[[0.0, 0.0]], np.cumsum(dxy[:-1], 0)])
        traj = {"xy": xy, "heading": heading, "speed": speed, "distance": speed * t}
        beta = rng.normal(0.0, 0.6, 10)
        params = gen_gait(traj, ground, beta=beta, phase0=float(rng.uniform(0, 2 * np.pi)), skel=skel)
        with torch.no_grad():
            surf = fk_torch(skel, as_tensor(params.theta), as_tensor(params.beta), as_tensor(params.gamma),
                            as_tensor(params.tau))[1].numpy()
        sole = foot_sole_heights(surf, ground)
        stance = np.stack([sole[:, 0], sole[:, 1], sole[:, 0], sole[:, 1]], 1) < 0.02
        jx, jy = rng.uniform(-1, 1, 2) * anchor_jitter[0]
        jyaw = rng.uniform(-1, 1) * anchor_jitter[1]
        pelvis0 = params.tau[0]
        anchor = make_anchor(pelvis0, params.gamma[0], ground, yaw_offset=jyaw, shift=(jx, jy))
        s, _ = states_from_params(params, ground, skel, anchor)
        states.append(s)
        stances.append(stance)
        thetas.append(params.theta)
    return np.stack(states), np.stack(stances), np.concatenate(thetas)


PIPELINE_DIMS = (64, 16)
PIPELINE_CORPUS = 768


def fit_default_prior(n_segments=PIPELINE_CORPUS, seed=0, d_p=PIPELINE_DIMS[0], d_r=PIPELINE_DIMS[1],
                      with_masks=True, skel=DEFAULT_SKELETON):
    """Prior used by the reconstruction pipeline (corpus, masks, fit and pose prior)."""
    states, stance, thetas = build_corpus(n_segments, seed, skel=skel)
    masks = augment_masks(np.random.default_rng([seed, 2]), len(states)) if with_masks else None
    model = PriorModel.fit(states, d_p, d_r, masks=masks, stance=stance)
    model.pose_prior = PosePrior.fit(thetas)
    model.meta["seed"] = seed
    return model


def default_cache_dir():
    return os.environ.get("CROWDMOTION_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "crowdmotion"))


def load_or_fit_prior(cache_dir=None, n_segments=PIPELINE_CORPUS, seed=0, d_p=PIPELINE_DIMS[0],
                      d_r=PIPELINE_DIMS[1]):
    """Cached prior keyed by its fit settings; fitted and stored on a miss."""
    cache_dir = cache_dir or default_cache_dir()
    key = f"prior-v2-n{n_segments}-s{seed}-p{d_p}-r{d_r}.json"
    path = os.path.join(cache_dir, key)
    if os.path.exists(path):
        return PriorModel.load(path)
    log.info("fitting motion prior (%d segments); caching to %s", n_segments, path)
    model = fit_default_prior(n_segments, seed, d_p, d_r)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = path + f".{os.getpid()}.tmp"
    model.save(tmp)
    os.replace(tmp, path)
    return model


__all__ = [
    "PriorModel", "PosePrior", "Anchor", "states_from_params", "params_from_states", "state_masks", "build_corpus",
    "augment_masks", "fit_default_prior", "load_or_fit_prior", "make_anchor", "SEG_LEN", "STATE_DIM", "AllMasked",
    "WrongSegmentLength", "RankDeficientCorpus", "axis_angle_to_matrix", "fk_rotmats",
]
