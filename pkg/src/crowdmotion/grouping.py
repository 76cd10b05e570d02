"""Segment grouping by relative trajectory and the asynchronous consistency loss."""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .rotations import DTYPE, geodesic_sq
from .softdtw import soft_dtw_torch

log = logging.getLogger(__name__)


class ZeroLengthTrajectory(ValueError):
    pass


class AllOccludedGroup(RuntimeError):
    pass


NoGuide = AllOccludedGroup


@dataclass
class MotionSegment:
    person: int
    index: int
    start: int  # first frame (absolute)
    traj: np.ndarray  # (T, 2) ground-plane coordinates
    scores: np.ndarray  # (T, 17)
    zeta: np.ndarray  # (T,)
    body_heading: float = None  # plane yaw at the first frame, used for stationary segments
    confidence: float = 0.0
    label: int = -1

    @property
    def key(self):
        return (self.person, self.index)


@dataclass
class GroupCluster:
    members: list  # indices into the segment list
    exemplar: int
    distances: np.ndarray

    @property
    def size(self):
        return len(self.members)


# ---------------------------------------------------------------- trajectories


def relative_trajectory(traj, body_heading=None, min_length=0.05):
    """Translate the start to the origin and rotate the initial heading onto +x.

    The heading is the mean displacement over the first quarter of the path;
    below ``min_length`` metres the body heading is used instead.
    """
    p = np.asarray(traj, dtype=np.float64)
    p = p - p[0]
    q = max(len(p) // 4, 1)
    d = p[q] - p[0] if len(p) > 1 else np.zeros(2)
    if np.linalg.norm(d) >= min_length:
        h = np.arctan2(d[1], d[0])
    elif body_heading is not None:
        h = body_heading
    else:
        raise ZeroLengthTrajectory("stationary segment without a body heading")
    c, s = np.cos(h), np.sin(h)
    return p @ np.array([[c, -s], [s, c]])


def point_to_polyline(points, line):
    """Distance of each point (N, 2) to the polyline (M, 2)."""
    points = np.atleast_2d(points)
    line = np.atleast_2d(line)
    if len(line) == 1:
        return np.linalg.norm(points - line[0], axis=-1)
    a, b = line[:-1], line[1:]
    ab = b - a
    L2 = (ab * ab).sum(-1)
    t = ((points[:, None] - a[None]) * ab[None]).sum(-1) / np.where(L2 > 0, L2, 1.0)
    t = np.clip(np.where(L2 > 0, t, 0.0), 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None] - proj, axis=-1).min(1)


def sspd(A, B):
    """Symmetric segment-path distance."""
    return 0.5 * (point_to_polyline(A, B).mean() + point_to_polyline(B, A).mean())


# ---------------------------------------------------------------- clustering


def affinity_propagation(S, preference=None, damping=0.5, max_iter=1000, convergence_iter=15, refine=True):
    """Affinity propagation on a similarity matrix.

    Returns (labels, exemplars, converged); labels index into ``exemplars``.
    """
    S = np.array(S, dtype=np.float64)
    n = S.shape[0]
    if not 0.5 <= damping < 1:
        raise ValueError("damping must lie in [0.5, 1)")
    if n == 1:
        return np.zeros(1, int), np.array([0]), True
    if preference is None:
        preference = np.median(S[~np.eye(n, dtype=bool)])
    S[np.diag_indices(n)] = preference
    R = np.zeros((n, n))
    A = np.zeros((n, n))
    idx = np.arange(n)
    history = []
    converged = False
    for it in range(max_iter):
        AS = A + S
        k = AS.argmax(1)
        first = AS[idx, k]
        AS[idx, k] = -np.inf
        second = AS.max(1)
        Rn = S - first[:, None]
        Rn[idx, k] = S[idx, k] - second
        R = damping * R + (1 - damping) * Rn
        Rp = np.maximum(R, 0)
        Rp[idx, idx] = R[idx, idx]
        An = Rp.sum(0)[None, :] - Rp
        dA = An[idx, idx].copy()
        An = np.minimum(An, 0)
        An[idx, idx] = dA
        A = damping * A + (1 - damping) * An
        ex = tuple(np.flatnonzero(np.diag(A) + np.diag(R) > 0))
        history.append(ex)
        if len(history) >= convergence_iter and len(ex) > 0 and all(h == ex for h in history[-convergence_iter:]):
            converged = True
            break
    exemplars = np.array(history[-1], dtype=int)
    if len(exemplars) == 0:
        log.warning("affinity propagation found no exemplar; using the best self-responsibility")
        exemplars = np.array([int(np.argmax(np.diag(A) + np.diag(R)))])
    if not converged:
        log.warning("affinity propagation did not converge in %d iterations", max_iter)
    if refine:
        exemplars = refine_exemplars(S, exemplars, preference)
    labels = S[:, exemplars].argmax(1)
    labels[exemplars] = np.arange(len(exemplars))
    return labels, exemplars, converged


def _hill_climb(S, start, preference, max_rounds):
    n = len(S)
    cur = tuple(sorted(int(e) for e in start))
    best = net_similarity(S, cur, preference)
    for _ in range(max_rounds):
        moves = [tuple(sorted(cur + (k,))) for k in range(n) if k not in cur]
        if len(cur) > 1:
            moves += [tuple(e for e in cur if e != k) for k in cur]
        moves += [tuple(sorted(tuple(e for e in cur if e != k) + (m,))) for k in cur for m in range(n) if m not in cur]
        vals = [net_similarity(S, m, preference) for m in moves]
        i = int(np.argmax(vals))
        if vals[i] <= best + 1e-12 * max(1.0, abs(best)):
            break
        cur, best = moves[i], vals[i]
    return cur, best


def refine_exemplars(S, exemplars, preference, max_rounds=100):
    """Hill-climb the net similarity by adding, dropping or swapping one exemplar.

    Message passing is a heuristic and can stop at a sub-optimal exemplar
    set.  The climb starts from the message-passing result and from every
    single-exemplar set; the best end point wins and replaces the input only
    on a strict improvement, so the result is never worse.
    """
    cur, best = _hill_climb(S, exemplars, preference, max_rounds)
    for k in range(len(S)):
        c, v = _hill_climb(S, (k,), preference, max_rounds)
        if v > best + 1e-12 * max(1.0, abs(best)):
            cur, best = c, v
    return np.array(cur, dtype=int)


def net_similarity(S, exemplars, preference):
    """Objective maximised by affinity propagation for a given exemplar set.

    Exemplars take the preference; every other point its best exemplar.
    """
    S = np.array(S, dtype=np.float64)
    ex = list(exemplars)
    val = S[:, ex].max(1)
    val[ex] = preference
    return float(val.sum())


def cluster_segments(segments, preference=None, damping=0.5):
    """Affinity propagation over relative trajectories; returns a list of GroupCluster."""
    paths = [relative_trajectory(s.traj, s.body_heading) for s in segments]
    n = len(paths)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = sspd(paths[i], paths[j])
    labels, exemplars, _ = affinity_propagation(-D, preference, damping)
    out = []
    for c, e in enumerate(exemplars):
        members = [int(i) for i in np.flatnonzero(labels == c)]
        out.append(GroupCluster(members, int(e), D[np.ix_(members, members)]))
    return out


def rand_index(a, b):
    a, b = np.asarray(a), np.asarray(b)
    iu = np.triu_indices(len(a), 1)
    same_a = (a[:, None] == a[None])[iu]
    same_b = (b[:, None] == b[None])[iu]
    return float((same_a == same_b).mean()) if len(iu[0]) else 1.0


# ---------------------------------------------------------------- confidence / labels


def longest_run(mask):
    best = cur = 0
    for m in mask:
        cur = cur + 1 if m else 0
        best = max(best, cur)
    return best


def segment_confidence(scores, weights, a=0.5, run_length=16, threshold=0.5):
    """Visible fraction, zeroed when weighted long-occlusion indicators exceed ``a``."""
    scores = np.asarray(scores, dtype=np.float64)
    below = scores < threshold
    v = 1.0 - below.mean()
    F = np.array([longest_run(below[:, j]) >= run_length for j in range(scores.shape[1])], dtype=float)
    return float(v * (1.0 - float(np.dot(weights, F) > a)))


def label_segments(confidences, keys):
    """Labels 1 (best), 0 (unusable), -1 (other) for one cluster.

    ``keys`` are (person, segment index) pairs, used for tie-breaking.
    """
    c = np.asarray(confidences, dtype=np.float64)
    if not (c > 0).any():
        raise AllOccludedGroup("every member of the cluster has zero confidence")
    order = sorted(range(len(c)), key=lambda i: (-c[i], keys[i][0], keys[i][1]))
    labels = np.where(c > 0, -1, 0)
    labels[order[0]] = 1
    return labels


def select_guides(confidences, keys, labels):
    """Guide member for every label-0 member.

    A visible segment of the same person is preferred; otherwise the
    cluster's best segment guides.
    """
    best = int(np.flatnonzero(np.asarray(labels) == 1)[0])
    guides = {}
    for i, lab in enumerate(labels):
        if lab != 0:
            continue
        own = [k for k in range(len(keys)) if keys[k][0] == keys[i][0] and confidences[k] > 0]
        if own:
            guides[i] = min(own, key=lambda k: (-confidences[k], keys[k][1]))
        else:
            guides[i] = best
    return guides


# ---------------------------------------------------------------- AMC


def amc_cost(poor, guide, joint_weights):
    """Frame-pair cost (T1, T2): weighted squared geodesic distance over joints.

    ``poor`` (T1, J, 3, 3), ``guide`` (T2, J, 3, 3) rotation matrices.
    """
    w = torch.as_tensor(np.asarray(joint_weights), dtype=DTYPE)
    keep = torch.nonzero(w > 0).flatten()
    d = geodesic_sq(poor[:, None, keep], guide[None, :, keep])
    return (d * w[keep]).sum(-1)


def e_amc(pairs, joint_weights, lam, gamma=0.1, normalize=False):
    """lam * sum over (poor, guide) rotation-sequence pairs of soft-DTW of the frame cost.

    Guides are detached, so gradients reach only the poor sequences.
    """
    total = torch.zeros((), dtype=DTYPE)
    for poor, guide in pairs:
        C = amc_cost(poor, guide.detach(), joint_weights)
        v = soft_dtw_torch(C, gamma)
        if normalize:
            v = v / (C.shape[0] + C.shape[1])
        total = total + v
    return lam * total


def groups_to_json(segments, clusters, guides):
    out = []
    for ci, cl in enumerate(clusters):
        members = []
        for m in cl.members:
            s = segments[m]
            g = guides.get(m)
            members.append({
                "person": int(s.person), "segment": int(s.index), "start": int(s.start),
                "confidence": float(s.confidence), "label": int(s.label),
                "guide": None if g is None else [int(segments[g].person), int(segments[g].index)],
            })
        out.append({"cluster": ci, "exemplar": [int(segments[cl.exemplar].person), int(segments[cl.exemplar].index)],
                    "size": cl.size, "members": members})
    return out


__all__ = [
    "MotionSegment", "GroupCluster", "relative_trajectory", "sspd", "point_to_polyline",
    "affinity_propagation", "refine_exemplars", "net_similarity", "cluster_segments", "rand_index", "segment_confidence",
    "label_segments", "select_guides", "amc_cost", "e_amc", "ZeroLengthTrajectory", "AllOccludedGroup",
    "groups_to_json",
]
