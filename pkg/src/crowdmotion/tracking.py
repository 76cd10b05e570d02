"""Frame-to-frame identity association on ground-plane interaction points."""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .kinematics import TORSO
from .simcrowd import KEYPOINT_JOINTS, KP_TORSO

MAX_SPEED = 3.0
MAX_GAP = 30
POSITION_NOISE = 0.3
# nominal heights above the ground of hips and shoulders (default skeleton, upright)
KEYPOINT_HEIGHTS = {5: 1.44, 6: 1.44, 11: 0.88, 12: 0.88}


class RayParallelToPlane(ValueError):
    pass


class TorsoOccluded(ValueError):
    pass


def torso_slots(det):
    slots = [k for k in KP_TORSO if det.joint_valid[k]]
    if not slots:
        raise TorsoOccluded("all four torso keypoints are invalid")
    return slots


def lift_pixel(cam, g, uv, height=0.0):
    """Intersect the viewing ray of ``uv`` with the plane at ``height`` above the ground."""
    ray = np.array([(uv[0] - cam.principal_x) / cam.focal_x, (uv[1] - cam.principal_y) / cam.focal_y, 1.0])
    denom = ray @ g.n
    if abs(denom) < 1e-9:
        raise RayParallelToPlane("viewing ray parallel to the ground plane")
    s = (height - g.offset) / denom
    if s <= 0:
        raise RayParallelToPlane("plane intersection behind the camera")
    return s * ray


def estimate_hvip_from_obs(det, cam, g, heights=KEYPOINT_HEIGHTS):
    """3D interaction point of a detection.

    Each valid torso keypoint ray is intersected with the plane lying at that
    keypoint's nominal height above the ground; the hits are averaged and
    dropped onto the ground.
    """
    pts = [lift_pixel(cam, g, det.keypoints[k], heights[k]) for k in torso_slots(det)]
    p = np.mean(pts, 0)
    return p - (p @ g.n + g.offset) * g.n


def hvip_pixel(det, cam, g, heights=KEYPOINT_HEIGHTS):
    """2D interaction-point target: projection of the lifted 3D point."""
    h = estimate_hvip_from_obs(det, cam, g, heights)
    return np.array([cam.focal_x * h[0] / h[2] + cam.principal_x, cam.focal_y * h[1] / h[2] + cam.principal_y])


@dataclass
class Track:
    person_id: int
    frames: list = field(default_factory=list)
    detections: list = field(default_factory=list)
    hvips: list = field(default_factory=list)

    @property
    def last_frame(self):
        return self.frames[-1]

    def predict(self, frame, window=8):
        """Constant-velocity extrapolation; velocity over the last ``window`` hits."""
        if len(self.hvips) < 2:
            return self.hvips[-1]
        k = max(-window, -len(self.hvips))
        dt = self.frames[-1] - self.frames[k]
        v = (self.hvips[-1] - self.hvips[k]) / dt
        return self.hvips[-1] + v * (frame - self.frames[-1])

    def add(self, frame, det, hvip):
        self.frames.append(frame)
        self.detections.append(det)
        self.hvips.append(hvip)


def gate_radius(gap_frames, fps=30, max_speed=MAX_SPEED, noise=POSITION_NOISE):
    return max_speed * gap_frames / fps + noise


def solve_assignment(cost, gate):
    """Minimum-cost one-to-one matching; pairs with cost > gate are forbidden.

    ``gate`` broadcasts against ``cost`` (per-track radii along rows).
    Returns a list of (row, col) pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    allowed = cost <= gate
    big = 1e6 + cost[allowed].sum() if allowed.any() else 1e6
    # padding with dummy columns lets every row stay unmatched at cost "big"
    # without letting forbidden pairs displace admissible ones
    n, m = cost.shape
    padded = np.full((n, m + n), big)
    padded[:, :m] = np.where(allowed, cost, 2 * big)
    rows, cols = linear_sum_assignment(padded)
    return [(r, c) for r, c in zip(rows, cols) if c < m and allowed[r, c]]


def associate(tracks, detections, hvips, frame, fps=30, max_gap=MAX_GAP, next_id=None):
    """Match one frame of detections to open tracks.

    ``hvips[i]`` is None for unliftable detections; those are returned in
    ``deferred`` and not matched.  Returns (matches, new_tracks, deferred,
    closed) where matches is a list of (track, detection index).
    """
    open_tracks = [tr for tr in tracks if frame - tr.last_frame <= max_gap]
    closed = [tr for tr in tracks if frame - tr.last_frame > max_gap]
    liftable = [i for i, h in enumerate(hvips) if h is not None]
    deferred = [i for i, h in enumerate(hvips) if h is None]
    matches = []
    if open_tracks and liftable:
        pred = np.stack([tr.predict(frame) for tr in open_tracks])
        pos = np.stack([hvips[i] for i in liftable])
        cost = np.linalg.norm(pred[:, None] - pos[None], axis=-1)
        gates = np.array([gate_radius(frame - tr.last_frame, fps) for tr in open_tracks])[:, None]
        for r, c in solve_assignment(cost, gates):
            matches.append((open_tracks[r], liftable[c]))
    matched = {i for _, i in matches}
    if next_id is None:
        next_id = max([tr.person_id for tr in tracks], default=-1) + 1
    new_tracks = []
    for i in liftable:
        if i not in matched:
            new_tracks.append(Track(next_id))
            next_id += 1
    return matches, new_tracks, deferred, closed


def track_stream(obs, fps=30, max_gap=MAX_GAP):
    """Run association over an ObservationStream; returns all tracks by id."""
    active, finished = [], []
    next_id = 0
    for t, dets in enumerate(obs.frames):
        hv = []
        for d in dets:
            try:
                hv.append(estimate_hvip_from_obs(d, obs.camera, obs.ground))
            except (TorsoOccluded, RayParallelToPlane):
                hv.append(None)
        matches, new, _, closed = associate(active, dets, hv, t, fps, max_gap, next_id)
        for tr, i in matches:
            tr.add(t, dets[i], hv[i])
        unmatched = [i for i, h in enumerate(hv) if h is not None and i not in {j for _, j in matches}]
        for tr, i in zip(new, unmatched):
            tr.add(t, dets[i], hv[i])
        next_id += len(new)
        finished.extend(closed)
        active = [tr for tr in active if tr not in closed] + new
    return sorted(finished + active, key=lambda tr: tr.person_id)


def gt_tracks(obs):
    """Tracks built from ground-truth identities (bypasses association)."""
    by_agent = {}
    for t, dets in enumerate(obs.frames):
        for d in dets:
            tr = by_agent.setdefault(d.agent, Track(d.agent))
            try:
                h = estimate_hvip_from_obs(d, obs.camera, obs.ground)
            except (TorsoOccluded, RayParallelToPlane):
                h = None
            tr.add(t, d, h)
    return [by_agent[k] for k in sorted(by_agent)]


def identity_switches(tracks):
    """Count frames where a track's ground-truth identity changes."""
    n = 0
    for tr in tracks:
        agents = [d.agent for d in tr.detections]
        n += sum(a != b for a, b in zip(agents[:-1], agents[1:]))
    return n


def tracks_to_json(tracks, obs):
    out = []
    for tr in tracks:
        rows = []
        for t, d in zip(tr.frames, tr.detections):
            rows.append([t, next(i for i, x in enumerate(obs.frames[t]) if x is d)])
        out.append({"person_id": tr.person_id, "detections": rows})
    return out


def tracks_from_json(data, obs):
    tracks = []
    for item in data:
        tr = Track(int(item["person_id"]))
        for t, i in item["detections"]:
            d = obs.frames[t][i]
            try:
                h = estimate_hvip_from_obs(d, obs.camera, obs.ground)
            except (TorsoOccluded, RayParallelToPlane):
                h = None
            tr.add(t, d, h)
        tracks.append(tr)
    return tracks


__all__ = [
    "Track", "associate", "track_stream", "gt_tracks", "estimate_hvip_from_obs", "hvip_pixel",
    "solve_assignment", "identity_switches", "TORSO", "KEYPOINT_JOINTS",
]
