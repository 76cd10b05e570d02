import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from crowdmotion import pipeline as P
from crowdmotion import simcrowd as sc
from crowdmotion import tracking as tk
from crowdmotion.motionprior import load_or_fit_prior


def mpjpe(J, G):
    return np.linalg.norm((J - J[:, :1]) - (G - G[:, :1]), axis=-1).mean()


def small_scene(noise=0.0, n_frames=128, seed=2):
    groups = [sc.GroupSpec(waypoints=[[-5, 16], [5, 16]], speed=1.2, lateral_offsets=[0.0, 0.8]),
              sc.GroupSpec(waypoints=[[4, 24], [-4, 26]], speed=1.0)]
    spec = sc.SceneSpec(rng_seed=seed, n_frames=n_frames, groups=groups, noise_px=noise)
    return sc.synthesize(spec)


@pytest.fixture(scope="module")
def prior():
    return load_or_fit_prior()


@pytest.fixture(scope="module")
def small_run(prior):
    gt, obs = small_scene(noise=2.0)
    cfg = P.PipelineConfig(schedule=P.Schedule((30, 40, 30, 20)))
    return gt, obs, P.run_pipeline(tk.gt_tracks(obs), obs, prior, cfg)


# ---------------------------------------------------------------- segmentation


def test_segment_bounds_examples():
    assert P.segment_bounds(192) == [(0, 64), (64, 128), (128, 192)]
    assert P.segment_bounds(200)[-1] == (192, 200) and len(P.segment_bounds(200)) == 4
    assert P.segment_bounds(63) == [(0, 63)]


@given(st.integers(1, 1000))
def test_segments_partition_frames(T):
    b = P.segment_bounds(T)
    frames = np.concatenate([np.arange(a, e) for a, e in b])
    assert np.array_equal(frames, np.arange(T))
    assert all(e - a == 64 for a, e in b[:-1])


# ---------------------------------------------------------------- optimiser


def test_zero_gradient_leaves_parameters():
    x0 = {"a": np.array([1.0, 2.0])}
    x, trace, _ = P.optimize(lambda a: (a * 0).sum() + 3.0, x0, 20, P.Schedule())
    assert np.array_equal(x["a"], x0["a"])
    assert trace == [3.0] * 21


def test_safeguarded_trace_non_increasing():
    rng = np.random.default_rng(0)

    def f(a):
        return (torch.sin(5 * a) + 0.1 * a ** 2).sum()

    x, trace, _ = P.optimize(f, {"a": rng.normal(0, 3, 20)}, 200, P.Schedule(lr=0.5))
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_divergence_without_safeguard():
    with pytest.raises(P.DivergenceDetected):
        # the first RMSprop step has size ~ lr / sqrt(1 - decay) = 10 and overshoots the quadratic
        P.optimize(lambda a: (a ** 2).sum(), {"a": np.array([1.0])}, 5, P.Schedule(lr=1.0), safeguard=False)


def test_bad_schedule():
    with pytest.raises(ValueError):
        P.Schedule((1, 2, 3))
    with pytest.raises(ValueError):
        P.Schedule(lr=0.0)


# ---------------------------------------------------------------- initialization


def test_initial_error_noise_free():
    gt, obs = small_scene()
    for tr in tk.gt_tracks(obs):
        ps = P.initialize(tr, obs)
        G = gt.joints[tr.person_id][ps.obs.frames]
        J = P._fk_np(P.Context(obs.camera, obs.ground, None, P.PipelineConfig()), ps.params)
        assert mpjpe(J, G) < 0.1


def test_stationary_agent_constant_tau():
    spec = sc.SceneSpec(rng_seed=0, n_frames=20, groups=[sc.GroupSpec(waypoints=[[0, 15]], speed=0.0)])
    _, obs = sc.synthesize(spec)
    ps = P.initialize(tk.gt_tracks(obs)[0], obs)
    assert np.allclose(ps.params.tau, ps.params.tau[0])


def test_single_frame_track():
    _, obs = small_scene()
    tr = tk.Track(0)
    d = obs.frames[0][0]
    tr.add(0, d, None)
    ps = P.initialize(tr, obs)
    assert ps.T == 1 and P.segment_bounds(ps.T) == [(0, 1)]


def test_empty_track():
    _, obs = small_scene()
    with pytest.raises(P.EmptyTrack):
        P.initialize(tk.Track(5), obs)


def test_stage_root_keeps_pose_and_shape(prior):
    _, obs = small_scene(noise=2.0, n_frames=40)
    ctx = P.Context(obs.camera, obs.ground, prior, P.PipelineConfig(schedule=P.Schedule((15, 1, 1, 1))))
    ps = P.initialize(tk.gt_tracks(obs)[0], obs)
    th, be = ps.params.theta.copy(), ps.params.beta.copy()
    P.stage_root(ps, ctx)
    assert np.array_equal(ps.params.theta, th) and np.array_equal(ps.params.beta, be)


# ---------------------------------------------------------------- end to end (short schedule)


def test_traces_non_increasing(small_run):
    _, _, rec = small_run
    for ps in rec.persons:
        for stage, tr in ps.traces.items():
            assert all(b <= a for a, b in zip(tr, tr[1:])), (ps.person, stage)
    assert rec.watermark == "group"
    assert set(rec.diagnostics["stages"]) == set(P.STAGES)


def test_stages_reduce_error(small_run):
    gt, _, rec = small_run
    err = {k: np.mean([mpjpe(ps.exits[k], gt.joints[ps.person][ps.obs.frames]) for ps in rec.persons])
           for k in ("init", "root", "smpl", "motion")}
    assert err["smpl"] < err["root"]
    assert err["motion"] < err["smpl"]


def test_no_amc_arm_stops_after_motion(prior):
    gt, obs = small_scene(n_frames=64)
    cfg = P.PipelineConfig(schedule=P.Schedule((5, 5, 5, 5)), amc=False)
    rec = P.run_pipeline(tk.gt_tracks(obs), obs, prior, cfg)
    assert rec.watermark == "motion" and rec.groups == []
    cfg = P.PipelineConfig(schedule=P.Schedule((5, 5, 5, 5)), prior_stage=False)
    rec = P.run_pipeline(tk.gt_tracks(obs), obs, prior, cfg)
    assert rec.watermark == "smpl"


def test_result_json_shape(small_run):
    _, obs, rec = small_run
    out = P.result_to_json(rec, obs.ground)
    p = out["persons"][0]
    T = len(p["frames"])
    assert np.shape(p["joints3d"]) == (T, 24, 3) and np.shape(p["hvip3d"]) == (T, 3)
    assert np.shape(p["theta"]) == (T, 23, 3)


def test_stage4_only_moves_persons_with_guidance(prior):
    # agent 0 is hidden for its whole middle segment, so it is the only person with an AMC pair
    groups = [sc.GroupSpec(waypoints=[[-6, 16], [6, 16]], speed=1.2, lateral_offsets=[0.0, 0.8, 1.6])]
    spec = sc.SceneSpec(rng_seed=2, n_frames=192, groups=groups, noise_px=2.0,
                        occlusions=[sc.OcclusionEntry(0, 64, 128)])
    _, obs = sc.synthesize(spec)
    cfg = P.PipelineConfig(schedule=P.Schedule((10, 10, 10, 10)))
    rec = P.run_pipeline(tk.gt_tracks(obs), obs, prior, cfg)
    moved = {ps.person for ps in rec.persons if not np.array_equal(ps.exits["group"], ps.exits["motion"])}
    assert moved == {0}
    # the no-AMC arm is the stage-3 exit of the full arm
    base = P.run_pipeline(tk.gt_tracks(obs), obs, prior, P.PipelineConfig(schedule=cfg.schedule, amc=False))
    for a, b in zip(rec.persons, base.persons):
        assert np.array_equal(a.exits["motion"], b.exits["motion"])
