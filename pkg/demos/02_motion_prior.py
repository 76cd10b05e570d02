"""The segment motion prior: a 64-frame window of body state in a low-dimensional code.

Run: python demos/02_motion_prior.py   (fits and caches the prior on first use)
"""

import numpy as np

from crowdmotion import motionprior as M

prior = M.load_or_fit_prior()
print(f"latent size {prior.latent_dim}: explained variance "
      f"local {prior.meta['explained_local']:.3f}, global {prior.meta['explained_global']:.3f}")

# Held-out gait segments, never seen during fitting.
states, stance, _ = M.build_corpus(20, seed=99)


def joint_err(x, s):
    return 1000 * np.linalg.norm((x - s)[:, :63].reshape(64, 21, 3), axis=-1).mean()


full = [joint_err(prior.decode_raw(prior.encode(s)), s) for s in states]
print(f"encode/decode error on held-out gait: {np.mean(full):.1f} mm")

# Masked encoding only reads observed entries, so a gap is filled from the
# rest of the segment. Here the middle 32 frames are hidden entirely.
rng = np.random.default_rng(0)
gap = []
for s in states:
    m = np.ones_like(s, bool)
    m[16:48] = False
    x = prior.decode_raw(prior.encode(s, m))
    gap.append(1000 * np.linalg.norm((x - s)[16:48, :63].reshape(32, 21, 3), axis=-1).mean())
print(f"error on 32 hidden frames filled from the other 32: {np.mean(gap):.1f} mm")

# Decoded rotations are projected back onto the rotation group, and the contact
# classifier gives a per-foot stance probability.
s, c = prior.decode(prior.encode(states[0]))
print(f"stance agreement for segment 0: {((c > 0.5) == stance[0]).mean():.2f}")
