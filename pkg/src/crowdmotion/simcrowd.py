"""Synthetic crowd scenes: grouped ground paths, analytic gait, noisy 2D detections.

A scene lives in the camera frame.  Ground paths are authored in plane
coordinates (x to the right of the camera, y away from it, metres) and
lifted into the camera frame through the scene's ground plane.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .kinematics import (
    DEFAULT_SKELETON,
    BodyParams,
    CameraIntrinsics,
    GroundPlane,
    fk_torch,
    project,
)
from .rotations import as_tensor, np_matrix_to_axis_angle, rot_z

FPS = 30
MAX_SPEED = 3.0
VISIBILITY_THRESHOLD = 0.5

# 17-slot keypoint layout -> skeleton joints.  Slots 5..16 follow the COCO
# body order; the five COCO face slots are replaced by head, neck, upper spine
# and collars because the capsule skeleton has no face.
KEYPOINT_JOINTS = (15, 12, 9, 13, 14, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8)
KEYPOINT_NAMES = (
    "head", "neck", "spine3", "l_collar", "r_collar", "l_shoulder", "r_shoulder",
    "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee",
    "l_ankle", "r_ankle",
)
KP_TORSO = (5, 6, 11, 12)
KP_LOWER = (11, 12, 13, 14, 15, 16)
KP_UPPER = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10)

# body frame (x left, y up, z forward) -> plane frame (x, y, up) for heading 0
_BODY_TO_PLANE = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


class InfeasibleSpeed(ValueError):
    pass


class BehindCamera(ValueError):
    pass


@dataclass
class CameraSetup:
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(1500.0, 1500.0, 960.0, 540.0))
    height: float = 12.0
    pitch: float = np.deg2rad(25.0)
    image_size: tuple = (1920, 1080)

    def ground_plane(self):
        return GroundPlane((0.0, -np.cos(self.pitch), -np.sin(self.pitch)), self.height)

    def to_dict(self):
        return {"intrinsics": self.intrinsics.to_dict(), "height": self.height, "pitch": self.pitch,
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(CameraIntrinsics.from_dict(d["intrinsics"]), float(d["height"]), float(d["pitch"]),
                   tuple(d.get("image_size", (1920, 1080))))


@dataclass
class GroupSpec:
    """Agents sharing one waypoint path.

    Either ``speed`` (m/s) or ``arrive_frame`` (frame at which the path end is
    reached) fixes the pace.  Member k walks the path shifted sideways by
    ``lateral_offsets[k]`` and along it by ``longitudinal_offsets[k]``.
    """

    waypoints: list
    speed: float = None
    arrive_frame: int = None
    lateral_offsets: list = field(default_factory=lambda: [0.0])
    longitudinal_offsets: list = None
    gait_phases: list = None
    betas: list = None

    @property
    def size(self):
        return len(self.lateral_offsets)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class OcclusionEntry:
    agent: int
    start: int
    end: int  # exclusive
    joints: object = "full"  # "full" | "lower" | "upper" | list of keypoint slots

    def slots(self):
        if self.joints == "full":
            return tuple(range(17))
        if self.joints == "lower":
            return KP_LOWER
        if self.joints == "upper":
            return KP_UPPER
        return tuple(int(j) for j in self.joints)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SceneSpec:
    rng_seed: int = 0
    n_frames: int = 192
    fps: int = FPS
    camera: CameraSetup = field(default_factory=CameraSetup)
    groups: list = field(default_factory=list)
    occlusions: list = field(default_factory=list)
    noise_px: float = 0.0
    regressor_theta_noise: float = 0.1
    regressor_beta_noise: float = 0.3

    @property
    def n_agents(self):
        return sum(g.size for g in self.groups)

    def agent_groups(self):
        return np.concatenate([[i] * g.size for i, g in enumerate(self.groups)]).astype(int) if self.groups else np.zeros(0, int)

    def to_dict(self):
        return {
            "rng_seed": self.rng_seed, "n_frames": self.n_frames, "fps": self.fps,
            "camera": self.camera.to_dict(), "groups": [g.to_dict() for g in self.groups],
            "occlusions": [o.to_dict() for o in self.occlusions], "noise_px": self.noise_px,
            "regressor_theta_noise": self.regressor_theta_noise, "regressor_beta_noise": self.regressor_beta_noise,
        }

    @classmethod
    def from_dict(cls, d):
        spec = cls(
            rng_seed=int(d.get("rng_seed", 0)),
            n_frames=int(d["n_frames"]),
            fps=int(d.get("fps", FPS)),
            camera=CameraSetup.from_dict(d["camera"]) if "camera" in d else CameraSetup(),
            groups=[GroupSpec(**g) for g in d.get("groups", [])],
            occlusions=[OcclusionEntry(**o) for o in d.get("occlusions", [])],
            noise_px=float(d.get("noise_px", 0.0)),
            regressor_theta_noise=float(d.get("regressor_theta_noise", 0.1)),
            regressor_beta_noise=float(d.get("regressor_beta_noise", 0.3)),
        )
        if spec.fps != FPS:
            raise ValueError("only 30 fps scenes are supported")
        n = spec.n_agents
        for o in spec.occlusions:
            if not (0 <= o.agent < n and 0 <= o.start < o.end <= spec.n_frames):
                raise ValueError(f"bad occlusion entry {o}")
        return spec

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def canonical_spec(seed=7, noise_px=2.0, occlusion=True):
    """10 agents in two planted groups, 192 frames; agent 2 hidden for frames 64-127."""
    straight = GroupSpec(
        waypoints=[[-7.0, 19.0], [7.0, 19.0]],
        # stride period of exactly 32 frames, so whole segments hold whole gait cycles
        speed=(39.0 / 32.0) ** 2 / 1.25,
        lateral_offsets=[0.0, 1.7, 3.4, 5.1, 6.8],
        longitudinal_offsets=[0.0, 0.6, -0.5, 0.3, -0.7],
        gait_phases=[0.0, 1.3, 2.9, 4.4, 5.5],
    )
    # single-file column on a circular arc (radius 5 m), long enough that no
    # member leaves it within 192 frames
    radius, centre = 5.0, np.array([3.0, 33.0])
    ang = np.linspace(-0.5, 4.2, 48)
    arc = (centre + radius * np.stack([np.sin(ang), -np.cos(ang)], 1)).tolist()
    curved = GroupSpec(
        waypoints=arc,
        speed=1.45,
        lateral_offsets=[0.0, 0.0, 0.0, 0.0, 0.0],
        longitudinal_offsets=[7.0, 8.9, 10.8, 5.1, 3.2],
        gait_phases=[0.4, 2.2, 3.7, 5.0, 0.9],
    )
    occ = []
    if occlusion:
        occ = [OcclusionEntry(2, 64, 128, "full"), OcclusionEntry(7, 20, 42, "lower")]
    return SceneSpec(rng_seed=seed, n_frames=192, groups=[straight, curved], occlusions=occ, noise_px=noise_px)


# ------------------------------------------------------------------ paths


def _spline_path(waypoints):
    w = np.asarray(waypoints, dtype=np.float64)
    if len(w) == 1:
        return None, 0.0
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(w, axis=0), axis=1))])
    cs = CubicSpline(chord, w, bc_type="natural")
    # arc-length table
    u = np.linspace(0.0, chord[-1], 4000)
    d = np.linalg.norm(cs(u, 1), axis=1)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(u))])
    return (cs, u, s), float(s[-1])


def _eval_path(path, waypoints, s_query):
    """Position and unit tangent at arc lengths ``s_query`` (clamped extension
    is linear beyond the ends)."""
    if path is None:
        p = np.repeat(np.asarray(waypoints, float)[:1], len(s_query), 0)
        return p, np.tile([1.0, 0.0], (len(s_query), 1))
    cs, u, s = path
    sq = np.asarray(s_query, dtype=np.float64)
    uq = np.interp(np.clip(sq, 0.0, s[-1]), s, u)
    pos = cs(uq)
    tan = cs(uq, 1)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    over = sq - np.clip(sq, 0.0, s[-1])
    pos = pos + over[:, None] * tan
    return pos, tan


def gen_trajectories(spec):
    """Per-agent ground paths.

    Returns a list of dicts with ``xy`` (T, 2) plane positions, ``heading``
    (T,) yaw in the plane, ``speed`` (m/s), ``group`` and ``member`` indices.
    """
    T = spec.n_frames
    out = []
    t = np.arange(T) / spec.fps
    for gi, g in enumerate(spec.groups):
        path, length = _spline_path(g.waypoints)
        if g.speed is not None:
            speed = float(g.speed)
        elif g.arrive_frame is not None:
            speed = length / (g.arrive_frame / spec.fps)
        else:
            speed = 0.0
        if speed > MAX_SPEED:
            raise InfeasibleSpeed(f"group {gi} needs {speed:.2f} m/s")
        if path is None:
            speed = 0.0
        lon = g.longitudinal_offsets or [0.0] * g.size
        for k in range(g.size):
            s = lon[k] + speed * t
            pos, tan = _eval_path(path, g.waypoints, s)
            normal = np.stack([-tan[:, 1], tan[:, 0]], 1)
            xy = pos + g.lateral_offsets[k] * normal
            heading = np.unwrap(np.arctan2(tan[:, 1], tan[:, 0]))
            out.append({"xy": xy, "heading": heading, "speed": speed, "group": gi, "member": k,
                        "distance": speed * t})
    return out


# ------------------------------------------------------------------ gait


def stride_length(speed):
    return 1.3 * np.sqrt(max(speed, 1e-9) / 1.25)


STANCE_FRACTION = 0.6


def foot_offset(u, stride, duty=STANCE_FRACTION):
    """Forward ankle offset from the hip over the cycle fraction ``u`` in [0, 1).

    During stance the ankle slides back at exactly the body speed, so a
    planted foot stays put; the swing is a C1 cubic carrying it forward again.
    """
    u = np.mod(u, 1.0)
    half = 0.5 * stride * duty
    s = (u - duty) / (1.0 - duty)
    m = -stride * (1.0 - duty)
    swing = ((2 * s ** 3 - 3 * s ** 2 + 1) * -half + (s ** 3 - 2 * s ** 2 + s) * m
             + (-2 * s ** 3 + 3 * s ** 2) * half + (s ** 3 - s ** 2) * m)
    return np.where(u < duty, half - stride * u, swing)


def swing_lift(u, duty=STANCE_FRACTION):
    u = np.mod(u, 1.0)
    return np.where(u < duty, 0.0, np.sin(np.pi * (u - duty) / (1.0 - duty)) ** 2)


def gait_angles(phase, speed, leg=(0.4, 0.4)):
    """Joint rotations (T, 23, 3) of the walk cycle at stride phase ``phase``.

    ``leg`` holds thigh and shin lengths; the hip angle is solved so that the
    ankle follows ``foot_offset`` for the current knee bend.
    """
    phase = np.asarray(phase, dtype=np.float64)
    a = min(speed / 1.25, 1.3)
    stride = stride_length(speed) if speed > 0 else 0.0
    l1, l2 = leg
    # slow walkers still clear the ground by a few centimetres
    lift = 0.6 * max(a, 0.8) if speed > 0 else 0.0
    theta = np.zeros(phase.shape + (23, 3))

    def j(k):
        return k - 1

    for side, off in ((0, 0.0), (1, np.pi)):
        ph = phase + off
        u = ph / (2 * np.pi)
        knee_flex = 0.05 + lift * swing_lift(u)
        # ankle forward offset = R sin(h - phi) for hip flexion h and knee bend k
        R = np.hypot(l1 + l2 * np.cos(knee_flex), l2 * np.sin(knee_flex))
        phi = np.arctan2(l2 * np.sin(knee_flex), l1 + l2 * np.cos(knee_flex))
        hip_flex = phi + np.arcsin(np.clip(foot_offset(u, stride) / R, -1.0, 1.0))
        hip, knee, ankle = (1, 4, 7) if side == 0 else (2, 5, 8)
        theta[..., j(hip), 0] = -hip_flex
        theta[..., j(knee), 0] = knee_flex
        theta[..., j(ankle), 0] = hip_flex - knee_flex  # keeps the foot parallel to the ground
        shoulder, elbow = (16, 18) if side == 0 else (17, 19)
        theta[..., j(shoulder), 0] = 0.3 * a * np.sin(ph)
        theta[..., j(elbow), 0] = -(0.25 + 0.15 * a * (1.0 + np.sin(ph)))
        theta[..., j(shoulder), 2] = (1 if side == 0 else -1) * 0.08
    theta[..., j(3), 1] = 0.08 * a * np.sin(phase)
    theta[..., j(9), 1] = -0.06 * a * np.sin(phase)
    theta[..., j(15), 1] = 0.04 * a * np.sin(phase)
    return theta


def leg_lengths(beta, skel=DEFAULT_SKELETON):
    """Thigh and shin lengths of the left leg for shape ``beta``."""
    scale = 1.0 + skel.shape_basis @ np.asarray(beta, dtype=np.float64)
    return (float(np.linalg.norm(skel.offsets[4]) * scale[4]), float(np.linalg.norm(skel.offsets[7]) * scale[7]))


def root_orientation(g, heading):
    """Axis-angle root rotation for plane headings (T,)."""
    e1, e2, n = g.basis()
    Rcg = np.stack([e1, e2, n], 1)
    R = np.stack([Rcg @ rot_z(h) @ _BODY_TO_PLANE for h in np.atleast_1d(heading)])
    return np_matrix_to_axis_angle(R)


def gen_gait(traj, g, beta=None, phase0=0.0, skel=DEFAULT_SKELETON):
    """Per-frame BodyParams walking along ``traj`` with the lowest body point on the plane."""
    T = len(traj["xy"])
    speed = traj["speed"]
    beta = np.zeros(10) if beta is None else np.asarray(beta, float)
    phase = phase0 + 2 * np.pi * traj["distance"] / stride_length(speed)
    theta = gait_angles(phase, speed, leg_lengths(beta, skel))
    gamma = root_orientation(g, traj["heading"])
    ground = g.from_ground(np.concatenate([traj["xy"], np.zeros((T, 1))], 1))
    betas = np.repeat(beta[None], T, 0)
    with_root0 = fk_torch(skel, as_tensor(theta), as_tensor(betas), as_tensor(gamma), as_tensor(ground))[1]
    h = with_root0.numpy() @ g.n + g.offset
    lift = -h.min(1)
    tau = ground + lift[:, None] * g.n
    return BodyParams(theta, betas, gamma, tau)


# ------------------------------------------------------------------ ground truth / observations


@dataclass
class GroundTruth:
    params: list  # per-agent BodyParams over all frames
    joints: np.ndarray  # (A, T, 24, 3)
    surface: np.ndarray  # (A, T, 184, 3)
    groups: np.ndarray  # (A,)
    stance: np.ndarray  # (A, T, 2) left/right foot on the ground

    @property
    def n_agents(self):
        return self.joints.shape[0]

    def to_dict(self):
        return {
            "groups": self.groups.tolist(),
            "agents": [
                {"theta": p.theta.tolist(), "beta": p.beta.tolist(), "gamma": p.gamma.tolist(), "tau": p.tau.tolist(),
                 "joints": j.tolist(), "stance": s.tolist()}
                for p, j, s in zip(self.params, self.joints, self.stance)
            ],
        }

    @classmethod
    def from_dict(cls, d, skel=DEFAULT_SKELETON):
        params = [BodyParams(np.array(a["theta"]), np.array(a["beta"]), np.array(a["gamma"]), np.array(a["tau"]))
                  for a in d["agents"]]
        joints, surface = _fk_all(params, skel)
        stance = np.array([a["stance"] for a in d["agents"]], dtype=bool)
        return cls(params, joints, surface, np.array(d["groups"], int), stance)


def _fk_all(params, skel):
    if not params:
        return np.zeros((0, 0, 24, 3)), np.zeros((0, 0, 184, 3))
    js, ss = [], []
    for p in params:
        j, s = fk_torch(skel, as_tensor(p.theta), as_tensor(p.beta), as_tensor(p.gamma), as_tensor(p.tau))
        js.append(j.detach().numpy())
        ss.append(s.detach().numpy())
    return np.stack(js), np.stack(ss)


def foot_sole_heights(surface, g):
    """Lowest surface point of each foot capsule, (..., 2)."""
    h = surface @ g.n + g.offset
    per_bone = h.reshape(h.shape[:-1] + (23, 8))
    return np.stack([per_bone[..., 9, :].min(-1), per_bone[..., 10, :].min(-1)], -1)


def generate_ground_truth(spec, skel=DEFAULT_SKELETON):
    g = spec.camera.ground_plane()
    rng = np.random.default_rng(spec.rng_seed)
    trajs = gen_trajectories(spec)
    params = []
    for tr in trajs:
        grp = spec.groups[tr["group"]]
        k = tr["member"]
        phase0 = grp.gait_phases[k] if grp.gait_phases else float(rng.uniform(0, 2 * np.pi))
        beta = np.asarray(grp.betas[k]) if grp.betas else rng.normal(0.0, 0.5, 10)
        params.append(gen_gait(tr, g, beta=beta, phase0=phase0, skel=skel))
    joints, surface = _fk_all(params, skel)
    if params:
        stance = foot_sole_heights(surface, g) < 0.02
    else:
        stance = np.zeros((0, spec.n_frames, 2), bool)
    return GroundTruth(params, joints, surface, spec.agent_groups(), stance)


@dataclass
class Detection:
    frame: int
    keypoints: np.ndarray  # (17, 2) pixels
    scores: np.ndarray  # (17,)
    bbox: np.ndarray  # (4,) x0, y0, x1, y1
    theta: np.ndarray  # (23, 3) per-frame regressor estimate
    beta: np.ndarray  # (10,)
    agent: int = -1  # ground-truth identity; only read in GT-tracking mode

    @property
    def joint_valid(self):
        return self.scores >= VISIBILITY_THRESHOLD

    def to_dict(self):
        return {"keypoints": np.concatenate([self.keypoints, self.scores[:, None]], 1).tolist(),
                "bbox": self.bbox.tolist(), "theta": self.theta.ravel().tolist(), "beta": self.beta.tolist(),
                "agent": self.agent}

    @classmethod
    def from_dict(cls, frame, d):
        kp = np.asarray(d["keypoints"], dtype=np.float64)
        return cls(frame, kp[:, :2], kp[:, 2], np.asarray(d["bbox"], float),
                   np.asarray(d["theta"], float).reshape(23, 3), np.asarray(d["beta"], float), int(d.get("agent", -1)))


@dataclass
class ObservationStream:
    """Per-frame lists of anonymous detections plus camera and ground plane."""

    camera: CameraIntrinsics
    ground: GroundPlane
    frames: list  # list[list[Detection]]
    occluded: dict = field(default_factory=dict)  # agent -> bool (T,) full-body occlusion mask
    behind_camera: list = field(default_factory=list)

    @property
    def n_frames(self):
        return len(self.frames)

    def to_dict(self):
        return {
            "camera": self.camera.to_dict(),
            "ground": self.ground.to_dict(),
            "visibility_threshold": VISIBILITY_THRESHOLD,
            "keypoint_joints": list(KEYPOINT_JOINTS),
            "frames": [[d.to_dict() for d in dets] for dets in self.frames],
            "behind_camera": [list(x) for x in self.behind_camera],
        }

    @classmethod
    def from_dict(cls, d):
        frames = [[Detection.from_dict(t, x) for x in dets] for t, dets in enumerate(d["frames"])]
        return cls(CameraIntrinsics.from_dict(d["camera"]), GroundPlane.from_dict(d["ground"]), frames,
                   behind_camera=[tuple(x) for x in d.get("behind_camera", [])])


def occlusion_masks(spec):
    """(A, T, 17) bool keypoint-occluded masks and (A, T) full-body masks."""
    A, T = spec.n_agents, spec.n_frames
    kp = np.zeros((A, T, 17), bool)
    full = np.zeros((A, T), bool)
    for o in spec.occlusions:
        kp[o.agent, o.start:o.end, list(o.slots())] = True
        if o.joints == "full":
            full[o.agent, o.start:o.end] = True
    return kp, full


def render_observations(gt, spec):
    """Noisy, occluded 2D detections of the ground-truth crowd."""
    cam = spec.camera.intrinsics
    g = spec.camera.ground_plane()
    # independent stream so that the noise seed does not perturb trajectory topology
    rng = np.random.default_rng([spec.rng_seed, 1])
    A, T = gt.n_agents, spec.n_frames
    kp_occ, full = occlusion_masks(spec)
    frames = [[] for _ in range(T)]
    behind = []
    for t in range(T):
        for a in range(A):
            noise = rng.normal(0.0, 1.0, (17, 2)) * spec.noise_px
            vis_score = rng.uniform(0.75, 1.0, 17)
            occ_score = rng.uniform(0.0, 0.2, 17)
            th_noise = rng.normal(0.0, spec.regressor_theta_noise, (23, 3))
            b_noise = rng.normal(0.0, spec.regressor_beta_noise, 10)
            order_key = rng.random()
            if full[a, t]:
                continue
            j3 = gt.joints[a, t, list(KEYPOINT_JOINTS)]
            if np.any(j3[:, 2] <= 1e-6):
                behind.append((a, t))
                continue
            uv = project(cam, j3) + noise
            scores = np.where(kp_occ[a, t], occ_score, vis_score)
            valid = scores >= VISIBILITY_THRESHOLD
            if not valid.any():
                continue
            lo, hi = uv[valid].min(0), uv[valid].max(0)
            pad = 0.1 * (hi - lo)
            bbox = np.concatenate([lo - pad, hi + pad])
            p = gt.params[a]
            det = Detection(t, uv, scores, bbox, p.theta[t] + th_noise, p.beta[t] + b_noise, a)
            frames[t].append((order_key, det))
    frames = [[d for _, d in sorted(f, key=lambda x: x[0])] for f in frames]
    occluded = {a: full[a] for a in range(A)}
    return ObservationStream(cam, g, frames, occluded, behind)


def synthesize(spec, skel=DEFAULT_SKELETON):
    gt = generate_ground_truth(spec, skel)
    return gt, render_observations(gt, spec)


def save_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f)


def load_json(path):
    with open(path) as f:
        return json.load(f)
