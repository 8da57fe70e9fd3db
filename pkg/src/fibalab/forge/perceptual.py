"""Perceptual distance from a frozen extractor's intermediate activations.

Stands in for a pretrained LPIPS network: per layer, activations are unit
normalised across channels at every location, the squared L2 difference is
summed over channels and averaged over locations; layers are averaged.
"""

import numpy as np

from .. import tensor as T

_EPS = 1e-10


def _unit_channels(a):
    return a / T.sqrt(T.tsum(a * a, axis=1, keepdims=True) + _EPS)


def lpips_distances(a, b, perceptual, layers=None):
    """Per-image distances between batches a and b (b may hold a single image)."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.ndim == 3:
        a = T.reshape(a, (1,) + a.shape)
    if b.ndim == 3:
        b = T.reshape(b, (1,) + b.shape)
    with perceptual.frozen():
        fa = perceptual.features(a)[:-1]
        fb = perceptual.features(b)[:-1]
    picked = range(len(fa)) if layers is None else layers
    total = None
    for i in picked:
        diff = _unit_channels(fa[i]) - _unit_channels(fb[i])
        d = T.mean(T.tsum(diff * diff, axis=1), axis=(1, 2))
        total = d if total is None else total + d
    return total * (1.0 / len(picked))


def lpips_surrogate(a, b, perceptual, layers=None):
    """Mean perceptual distance (scalar tensor)."""
    return T.mean(lpips_distances(a, b, perceptual, layers))
