import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdmotion import grouping as G
from crowdmotion import simcrowd as sc
from crowdmotion.energy import WeightConfig
from crowdmotion.rotations import axis_angle_to_matrix
from crowdmotion.softdtw import dtw, soft_dtw, soft_dtw_torch

from .oracles import ap_brute_force, central_fd, dtw_exhaustive, soft_dtw_exhaustive, sspd_brute

# ---------------------------------------------------------------- soft-DTW


def test_soft_dtw_limit_6x7():
    D = np.random.default_rng(0).random((6, 7))
    v, _ = soft_dtw(D, 1e-3)
    assert abs(v - dtw_exhaustive(D)) < 1e-3
    assert abs(dtw(D) - dtw_exhaustive(D)) < 1e-12


def soft_dtw_oracle_suite(n=200, seed=0):
    """Worst value gap to exhaustive DTW and worst entrywise gradient error over ``n`` matrices."""
    rng = np.random.default_rng(seed)
    worst_v = worst_g = 0.0
    for _ in range(n):
        a, b = rng.integers(1, 9, 2)
        D = rng.random((a, b))
        v, _ = soft_dtw(D, 1e-3)
        worst_v = max(worst_v, abs(v - dtw(D)))
        # gradient at a smooth temperature, where finite differences are meaningful
        gamma = 1.0
        _, g = soft_dtw(D, gamma)
        fd = central_fd(lambda x: soft_dtw(x.reshape(D.shape), gamma)[0], D.ravel(), 1e-6).reshape(D.shape)
        worst_g = max(worst_g, np.abs(g - fd).max())
    return worst_v, worst_g


def test_soft_dtw_exhaustive_small():
    rng = np.random.default_rng(1)
    for _ in range(20):
        D = rng.random(tuple(rng.integers(1, 5, 2)))
        for gamma in (0.1, 1.0):
            assert abs(soft_dtw(D, gamma)[0] - soft_dtw_exhaustive(D, gamma)) < 1e-9
        assert abs(dtw(D) - dtw_exhaustive(D)) < 1e-12


def test_soft_dtw_torch_backward():
    D = torch.tensor(np.random.default_rng(2).random((4, 5)), requires_grad=True)
    soft_dtw_torch(D, 0.5).backward()
    assert np.allclose(D.grad.numpy(), soft_dtw(D.detach().numpy(), 0.5)[1])


def test_soft_dtw_bad_gamma():
    with pytest.raises(ValueError):
        soft_dtw(np.zeros((2, 2)), 0.0)


# ---------------------------------------------------------------- trajectories / sspd


def test_relative_trajectory_invariance():
    t = np.linspace(0, 5, 40)[:, None]
    base = G.relative_trajectory(np.hstack([t, 0 * t]))
    for ang in (0.3, 2.0, -2.5):
        d = np.array([np.cos(ang), np.sin(ang)])
        p = np.array([3.0, -1.0]) + t * d
        assert np.allclose(G.relative_trajectory(p), base, atol=1e-12)


def test_stationary_segment():
    p = np.tile([[2.0, 3.0]], (10, 1))
    assert np.allclose(G.relative_trajectory(p, body_heading=0.4), 0.0)
    with pytest.raises(G.ZeroLengthTrajectory):
        G.relative_trajectory(p)


def test_sspd_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(100):
        A = rng.normal(size=(10, 2)).cumsum(0)
        B = rng.normal(size=(10, 2)).cumsum(0)
        assert abs(G.sspd(A, B) - sspd_brute(A, B)) < 1e-9


def test_sspd_identical_zero_symmetric():
    A = np.random.default_rng(4).normal(size=(8, 2))
    B = A[::-1] + 0.3
    assert G.sspd(A, A) == 0.0
    assert G.sspd(A, B) == pytest.approx(G.sspd(B, A))


# ---------------------------------------------------------------- affinity propagation


def test_one_point():
    labels, ex, conv = G.affinity_propagation(np.zeros((1, 1)))
    assert list(labels) == [0] and list(ex) == [0] and conv


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 5), st.integers(0, 2 ** 31 - 1))
def test_ap_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(n, 2)) * rng.uniform(0.5, 3)
    S = -np.linalg.norm(P[:, None] - P[None], axis=-1)
    pref = float(np.median(S[~np.eye(n, dtype=bool)]))
    _, ex, _ = G.affinity_propagation(S, pref)
    best, _ = ap_brute_force(S, pref)
    assert G.net_similarity(S, ex, pref) == pytest.approx(best, abs=1e-9)


def _planted_segments(spec):
    trs = sc.gen_trajectories(spec)
    return [G.MotionSegment(k, 0, 0, tr["xy"], np.ones((len(tr["xy"]), 17)), np.ones(len(tr["xy"])))
            for k, tr in enumerate(trs)]


def test_two_planted_groups_of_five():
    groups = [sc.GroupSpec(waypoints=[[-6, 15], [6, 15]], speed=1.2, lateral_offsets=[0.0, 0.7, 1.4, 2.1, 2.8]),
              sc.GroupSpec(waypoints=[[0, 20], [2, 26], [8, 28]], speed=1.4, lateral_offsets=[0.0, 0.7, 1.4, 2.1, 2.8])]
    spec = sc.SceneSpec(n_frames=64, groups=groups)
    cl = G.cluster_segments(_planted_segments(spec))
    assert len(cl) == 2
    lab = np.zeros(10, int)
    for c, cluster in enumerate(cl):
        lab[cluster.members] = c
    assert G.rand_index(lab, [0] * 5 + [1] * 5) == 1.0


def test_canonical_scene_planted_groups():
    spec = sc.canonical_spec()
    segs = []
    for k, tr in enumerate(sc.gen_trajectories(spec)):
        for s in range(3):
            xy = tr["xy"][64 * s: 64 * (s + 1)]
            segs.append(G.MotionSegment(k, s, 64 * s, xy, np.ones((64, 17)), np.ones(64)))
    cl = G.cluster_segments(segs)
    lab = np.zeros(len(segs), int)
    for c, cluster in enumerate(cl):
        lab[cluster.members] = c
    truth = [0 if s.person < 5 else 1 for s in segs]
    assert len(cl) == 2
    assert G.rand_index(lab, truth) == 1.0


# ---------------------------------------------------------------- confidence, labels, guides


W = np.array(WeightConfig().seg_joint_weights)


def test_segment_confidence():
    assert G.segment_confidence(np.ones((64, 17)), W) == 1.0
    # torso and legs hidden for the whole segment: the weighted indicator sum exceeds a
    hidden = list(sc.KP_TORSO) + list(sc.KP_LOWER)
    assert W[hidden].sum() > 0.5
    s = np.ones((64, 17))
    s[:, hidden] = 0.1
    assert G.segment_confidence(s, W) == 0.0
    # torso alone stays below a, so only the visible fraction counts
    s = np.ones((64, 17))
    s[:, list(sc.KP_TORSO)] = 0.1
    assert G.segment_confidence(s, W) == pytest.approx(1 - 4 / 17)
    s = np.ones((64, 17))
    s[:8, 0] = 0.1  # short dropout on one joint: confidence is the visible fraction
    assert G.segment_confidence(s, W) == pytest.approx(1 - 8 / (64 * 17))


def test_labels_direct_rule():
    assert list(G.label_segments([0.9], [(0, 0)])) == [1]
    assert list(G.label_segments([0.9, 0.4, 0.0], [(0, 0), (1, 0), (2, 0)])) == [1, -1, 0]
    # tie at the maximum: lowest person id, then lowest segment index
    keys = [(3, 1), (1, 2), (1, 0)]
    for _ in range(3):
        assert list(G.label_segments([0.8, 0.8, 0.8], keys)) == [-1, -1, 1]
    with pytest.raises(G.AllOccludedGroup):
        G.label_segments([0.0, 0.0], [(0, 0), (1, 0)])


def test_guides_prefer_same_person():
    keys = [(0, 0), (1, 0), (1, 1), (2, 0)]
    conf = [0.9, 0.0, 0.6, 0.0]
    labels = G.label_segments(conf, keys)
    guides = G.select_guides(conf, keys, labels)
    assert guides == {1: 2, 3: 0}


# ---------------------------------------------------------------- AMC


def _gait_rotations(n, stretch=1, speed=1.3):
    phase = np.arange(n) * 2 * np.pi / 32 / stretch
    th = sc.gait_angles(phase, speed)  # (n, 23, 3)
    return axis_angle_to_matrix(torch.as_tensor(th[:, :21]))


def test_amc_identical_is_small():
    R = _gait_rotations(32)
    w = np.ones(21)
    v = float(G.e_amc([(R, R)], w, 1.0, gamma=0.1))
    assert abs(v) < 0.1 * 32 * np.log(3)


def test_amc_asynchronous_property():
    # the poor segment plays a noisy gait at half the guide's rate (every frame doubled)
    rng = np.random.default_rng(5)
    fast = _gait_rotations(32)
    slow = fast.repeat_interleave(2, 0)
    noise = axis_angle_to_matrix(torch.as_tensor(rng.normal(0, 0.05, (64, 21, 3))))
    poor = noise @ slow
    w = np.ones(21)
    synced = float(G.e_amc([(poor, slow)], w, 1.0, gamma=1e-3))
    stretched = float(G.e_amc([(poor, fast)], w, 1.0, gamma=1e-3))
    assert abs(stretched - synced) <= 0.1 * abs(synced)
    # a frame-by-frame pose loss cannot absorb the timing difference
    l2_synced = float(((poor[:32] - slow[:32]) ** 2).sum())
    l2_stretched = float(((poor[:32] - fast) ** 2).sum())
    assert l2_stretched > 3 * l2_synced


def test_amc_no_pairs_is_zero():
    assert float(G.e_amc([], np.ones(21), 1.0)) == 0.0


def test_amc_gradient_only_to_poor():
    poor = _gait_rotations(8).clone().requires_grad_(True)
    guide = _gait_rotations(8, speed=0.8).clone().requires_grad_(True)
    G.e_amc([(poor, guide)], np.ones(21), 1.0).backward()
    assert guide.grad is None and poor.grad is not None
