import numpy as np

from graphops import engine as eng
from graphops.ops import BackgroundMap, NodeSet


def random_nodeset(rng, n_frames=2, per_frame=3, channels=4, requires_grad=False, scale=1.0):
    k = n_frames * per_frame
    feats = rng.standard_normal((k, channels)) * scale
    positions = np.empty((k, 3))
    positions[:, 0] = rng.random(k)
    positions[:, 1] = rng.random(k)
    positions[:, 2] = np.repeat(np.arange(n_frames), per_frame) / max(n_frames - 1, 1)
    t = eng.parameter(feats) if requires_grad else eng.constant(feats)
    return NodeSet(
        features=t,
        positions=positions,
        frame_index=np.repeat(np.arange(n_frames), per_frame),
        n_frames=n_frames,
    )


def random_background(rng, n_frames=2, h=2, w=2, channels=4, requires_grad=False):
    maps = rng.standard_normal((n_frames, h, w, channels))
    t = eng.parameter(maps) if requires_grad else eng.constant(maps)
    return BackgroundMap(maps=t)
