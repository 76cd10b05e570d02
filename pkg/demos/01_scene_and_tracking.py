"""A synthetic crowd, what the detector sees, and how people are followed over time.

Run: python demos/01_scene_and_tracking.py
"""

import numpy as np

from crowdmotion import simcrowd as sc
from crowdmotion import tracking as tk

# The canonical scene: two groups of five walking past a camera, with one member
# of the first group hidden behind scenery for frames 64-127.
spec = sc.canonical_spec()
gt, obs = sc.synthesize(spec)
print(f"{gt.joints.shape[0]} agents, {gt.joints.shape[1]} frames, {spec.noise_px} px keypoint noise")
for a, mask in obs.occluded.items():
    if mask.any():
        f = np.flatnonzero(mask)
        print(f"agent {a} has no detections for frames {f[0]}-{f[-1]}")

# Each detection carries 17 keypoints with scores; occluded keypoints get low scores.
d = obs.frames[0][0]
print(f"frame 0, first detection: {(d.scores >= sc.VISIBILITY_THRESHOLD).sum()} / 17 keypoints visible")

# Ground truth: feet rest on the plane during stance.
g = spec.camera.ground_plane()
soles = sc.foot_sole_heights(gt.surface, g)
print(f"max stance sole height {1000 * soles[gt.stance].max():.1f} mm")

# Tracking lifts each detection to the point where the person meets the ground,
# then matches those points frame to frame under a gap-dependent gate.
clean = sc.canonical_spec(noise_px=0.0)
_, obs0 = sc.synthesize(clean)
tracks = tk.track_stream(obs0)
print(f"{len(tracks)} tracks, {tk.identity_switches(tracks)} identity switches (noise-free)")
for tr in tracks:
    print(f"  track {tr.person_id}: frames {tr.frames[0]}-{tr.frames[-1]}, {len(tr.frames)} detections")
# The hidden agent is gone for 64 frames, longer than the 30-frame gap a track
# survives, so it comes back under a new track id. That is a new track, not a
# switch: no track ever jumps from one person to another.
