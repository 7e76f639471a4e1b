"""Synthetic feature-space tasks shared by the adaptation tests."""

import numpy as np

from specklepc.classify import LabeledSet

TARGET_MIX = (0.70, 0.15, 0.10, 0.05)


def shifted_gaussian_task(seed, dim=8, n_classes=4, sep=2.5, shift=1.0, n_source=100, n_target=1000,
                          mix=TARGET_MIX, target_noise=1.2):
    """Balanced labelled source clusters; the target moves every cluster by one common
    offset, widens them, and draws classes with proportions ``mix``."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    means *= sep / np.linalg.norm(means, axis=1, keepdims=True)
    xs = np.concatenate([means[k] + rng.normal(size=(n_source, dim)) for k in range(n_classes)])
    ys = np.repeat(np.arange(n_classes), n_source)
    counts = np.round(np.array(mix) * n_target).astype(int)
    delta = rng.normal(size=dim)
    delta *= shift / np.linalg.norm(delta)
    xt = np.concatenate([means[k] + delta + target_noise * rng.normal(size=(counts[k], dim))
                         for k in range(n_classes)])
    yt = np.repeat(np.arange(n_classes), counts)
    return LabeledSet(xs, ys), xt, yt
