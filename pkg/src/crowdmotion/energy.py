"""Energy terms of the four optimisation stages.

Every term is a torch function returning a scalar; gradients come from
reverse-mode differentiation.  Gaussian log-density constants are dropped, so
the latent priors read ``lam * ||z||^2 / 2``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .kinematics import N_JOINTS, project_torch
from .rotations import DTYPE, as_tensor
from .simcrowd import KEYPOINT_JOINTS

log = logging.getLogger(__name__)

# ankles and toe joints carry contact probabilities
CONTACT_JOINTS = (7, 8, 10, 11)


def _default_seg_weights():
    # per keypoint slot: torso/hip/knee 2, limbs 1, head/hands 0.5; normalised below
    w = np.array([0.5, 2, 2, 2, 2, 2, 2, 1, 1, 0.5, 0.5, 2, 2, 2, 2, 1, 1], dtype=np.float64)
    return (w / w.sum()).tolist()


def _default_amc_weights():
    # per pose joint 1..21; head, neck and wrists excluded
    w = np.ones(21)
    for j in (12, 15, 20, 21):
        w[j - 1] = 0.0
    return w.tolist()


@dataclass
class WeightConfig:
    lam_2d: float = 100.0
    lam_h: float = 10000.0
    lam_c: float = 50.0
    lam_t_trans: float = 50.0
    lam_phi: float = 0.5
    lam_shape: float = 1.0
    lam_t_pose: float = 10.0
    lam_vae: float = 0.2
    lam_ch: float = 500.0
    lam_cv: float = 1000.0
    lam_con: float = 100.0
    lam_amc: float = 0.03
    contact_height: float = 0.08
    env_one_sided: bool = False
    amc_joint_weights: list = field(default_factory=_default_amc_weights)
    amc_gamma: float = 0.1
    amc_normalize: bool = False
    seg_joint_weights: list = field(default_factory=_default_seg_weights)
    seg_threshold: float = 0.5
    seg_run_length: int = 16
    visibility_threshold: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lam_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown weight keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


class RequestedTermUnavailable(RuntimeError):
    pass


def _t(x):
    return as_tensor(x)


# ---------------------------------------------------------------- root terms


def e_2d(joints, kp2d, sigma, delta, cam, lam):
    """lam * sum sigma * delta * ||proj(J) - J2d||^2 over the 17 observed joints."""
    j = joints[..., list(KEYPOINT_JOINTS), :]
    z = j[..., 2]
    front = z > 1e-6
    if not bool(front.all()):
        log.warning("%d joints behind the camera ignored in E_2D", int((~front).sum()))
    jz = torch.where(front[..., None], j, torch.ones_like(j))
    r = project_torch(cam, jz) - _t(kp2d)
    w = _t(sigma) * _t(delta)[..., None] * front
    return lam * (w * (r * r).sum(-1)).sum()


def e_hvip2d(joints, hvip2d, zeta, delta, cam, normal, offset, lam):
    """lam * sum zeta * delta * ||proj(H(J, G)) - p_hvip||^2."""
    n = _t(normal)
    c = joints[..., [1, 2, 16, 17], :].mean(-2)
    h = c - ((c * n).sum(-1) + offset)[..., None] * n
    front = h[..., 2] > 1e-6
    hz = torch.where(front[..., None], h, torch.ones_like(h))
    r = project_torch(cam, hz) - _t(hvip2d)
    return lam * (_t(zeta) * _t(delta) * front * (r * r).sum(-1)).sum()


def e_contact(surface, zeta, normal, offset, lam):
    """lam * sum zeta * min_i |N . V_i + D| / ||N||."""
    n = _t(normal)
    d = ((surface * n).sum(-1) + offset).abs() / torch.linalg.norm(n)
    return lam * (_t(zeta) * d.min(-1).values).sum()


def e_t_trans(tau, zeta, lam):
    """lam * sum_{t>=1} zeta_t ||tau_t - tau_{t-1}||^2."""
    if tau.shape[0] < 2:
        return tau.sum() * 0.0
    d = tau[1:] - tau[:-1]
    return lam * (_t(zeta)[1:] * (d * d).sum(-1)).sum()


# ---------------------------------------------------------------- body terms


def e_pose(z_phi, lam):
    return lam * 0.5 * (z_phi * z_phi).sum()


def e_shape(beta, zeta, lam):
    return lam * (_t(zeta) * (beta * beta).sum(-1)).sum()


def e_t_pose(joints, zeta, lam):
    """lam * sum_{t>=1} zeta_t ||J_t - J_{t-1}||^2 summed over joints."""
    if joints.shape[0] < 2:
        return joints.sum() * 0.0
    d = joints[1:] - joints[:-1]
    return lam * (_t(zeta)[1:] * (d * d).sum((-1, -2))).sum()


# ---------------------------------------------------------------- motion terms


def e_vae(z, lam):
    return lam * 0.5 * (z * z).sum()


def e_env(joints, contacts, normal, offset, w, seg_len=None):
    """Contact height and contact velocity penalties.

    ``joints`` (T, 24, 3) world joints, ``contacts`` (T, 4) probabilities for
    CONTACT_JOINTS.  Velocities are forward differences inside each segment of
    ``seg_len`` frames (the first frame of a segment has none).
    """
    n = _t(normal)
    c = _t(contacts)
    jc = joints[:, list(CONTACT_JOINTS)]
    hgt = (jc * n).sum(-1) + offset
    if w.env_one_sided:
        pen = torch.clamp(hgt - w.contact_height, min=0.0)
    else:
        pen = torch.clamp((hgt - w.contact_height).abs(), min=0.0)
    height = w.lam_ch * (c * pen).sum()
    T = joints.shape[0]
    if T < 2:
        return height
    v = jc[1:] - jc[:-1]
    keep = torch.ones(T - 1, dtype=DTYPE)
    if seg_len:
        keep[seg_len - 1::seg_len] = 0.0
    vel = w.lam_cv * (keep[:, None] * c[1:] * (v * v).sum(-1)).sum()
    return height + vel


def e_connect(last_joints, first_joints, zeta_last, zeta_first, lam):
    """lam * sum zeta zeta ||J(first of next) - J(last of current)||^2."""
    d = first_joints - last_joints
    return lam * (_t(zeta_last) * _t(zeta_first) * (d * d).sum((-1, -2))).sum()


# ---------------------------------------------------------------- stage totals

STAGE_TERMS = {
    "root": ("2d", "hvip2d", "contact", "t_trans"),
}
STAGE_TERMS["smpl"] = STAGE_TERMS["root"] + ("pose", "shape", "t_pose")
STAGE_TERMS["motion"] = STAGE_TERMS["smpl"] + ("vae", "env", "connect")
STAGE_TERMS["group"] = STAGE_TERMS["motion"] + ("amc",)


@dataclass
class PersonObs:
    """Observation arrays of one person over a contiguous frame span."""

    frames: np.ndarray  # (T,) absolute frame indices
    kp2d: np.ndarray  # (T, 17, 2)
    scores: np.ndarray  # (T, 17)
    sigma: np.ndarray  # (T, 17) in {0, 1}
    zeta: np.ndarray  # (T,) in {0, 1}
    delta: np.ndarray  # (T,) inverse bbox size, 0 where undetected
    hvip2d: np.ndarray  # (T, 2)
    hvip_valid: np.ndarray  # (T,)

    @property
    def T(self):
        return len(self.frames)


@dataclass
class EnergyInputs:
    """Derived quantities of a state; fields a stage does not need may be None."""

    joints: torch.Tensor
    surface: torch.Tensor
    tau: torch.Tensor
    beta: torch.Tensor = None
    z_phi: torch.Tensor = None
    z_motion: torch.Tensor = None
    contacts: torch.Tensor = None
    seg_len: int = None
    boundaries: list = None  # (last frame, first frame of next) index pairs
    seg_valid: list = None  # per boundary (validity of current, validity of next segment); default all valid
    amc: torch.Tensor = None


def term_values(stage, inp, obs, cam, ground, w):
    """Dict of term name -> scalar tensor for the given stage."""
    if stage not in STAGE_TERMS:
        raise ValueError(f"unknown stage {stage!r}")
    names = STAGE_TERMS[stage]
    zeta = obs.zeta
    out = {}
    for name in names:
        if name == "2d":
            out[name] = e_2d(inp.joints, obs.kp2d, obs.sigma, obs.delta, cam, w.lam_2d)
        elif name == "hvip2d":
            out[name] = e_hvip2d(inp.joints, obs.hvip2d, zeta * obs.hvip_valid, obs.delta, cam,
                                 ground.normal, ground.offset, w.lam_h)
        elif name == "contact":
            out[name] = e_contact(inp.surface, zeta, ground.normal, ground.offset, w.lam_c)
        elif name == "t_trans":
            out[name] = e_t_trans(inp.tau, zeta, w.lam_t_trans)
        elif name == "pose":
            if inp.z_phi is None:
                raise RequestedTermUnavailable("pose latent not available")
            out[name] = e_pose(inp.z_phi, w.lam_phi)
        elif name == "shape":
            out[name] = e_shape(inp.beta, zeta, w.lam_shape)
        elif name == "t_pose":
            out[name] = e_t_pose(inp.joints, zeta, w.lam_t_pose)
        elif name == "vae":
            if inp.z_motion is None:
                raise RequestedTermUnavailable("motion latent not available")
            out[name] = e_vae(inp.z_motion, w.lam_vae)
        elif name == "env":
            if inp.contacts is None:
                raise RequestedTermUnavailable("contact probabilities not available")
            out[name] = e_env(inp.joints[: inp.contacts.shape[0]], inp.contacts, ground.normal, ground.offset, w,
                              inp.seg_len)
        elif name == "connect":
            b = inp.boundaries or []
            if b:
                last = [i for i, _ in b]
                first = [k for _, k in b]
                # gated by segment validity: a segment inside the track span is valid even when
                # its frames are unobserved, which is what ties an occluded segment to its neighbours
                gate = np.ones((len(b), 2)) if inp.seg_valid is None else np.asarray(inp.seg_valid, float)
                out[name] = e_connect(inp.joints[last], inp.joints[first], gate[:, 0], gate[:, 1], w.lam_con)
            else:
                out[name] = inp.joints.sum() * 0.0
        elif name == "amc":
            if inp.amc is None:
                raise RequestedTermUnavailable("AMC term requires grouping outputs")
            out[name] = inp.amc
    return out


def total(stage, inp, obs, cam, ground, w):
    """Stage objective and per-term breakdown (floats)."""
    terms = term_values(stage, inp, obs, cam, ground, w)
    value = sum(terms.values(), torch.zeros((), dtype=DTYPE))
    return value, {k: float(v.detach()) for k, v in terms.items()}


def value_and_grad(fn, variables):
    """Evaluate ``fn(**variables)`` and its gradient w.r.t. each numpy variable."""
    leaves = {k: torch.tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in variables.items()}
    val = fn(**leaves)
    grads = torch.autograd.grad(val, list(leaves.values()), allow_unused=True)
    return float(val.detach()), {
        k: (np.zeros_like(np.asarray(variables[k], dtype=np.float64)) if g is None else g.numpy())
        for k, g in zip(leaves, grads)
    }


__all__ = [
    "WeightConfig", "e_2d", "e_hvip2d", "e_contact", "e_t_trans", "e_pose", "e_shape", "e_t_pose",
    "e_vae", "e_env", "e_connect", "total", "term_values", "value_and_grad", "STAGE_TERMS",
    "PersonObs", "EnergyInputs", "CONTACT_JOINTS", "N_JOINTS",
]
