"""Key-feature mask search.

A continuous score map s in [0, 1] is moved by signed gradient steps; the
binary mask used in the forward pass (and returned) keeps the top cr fraction
of s, i.e. pixels above Quantile(s, 1 - cr). Occluding those pixels with noise
should move the embedding as far as possible from the clean one, so the step
descends L_tv(m) + L_edge(m) + cos(f(x_adv), e_b).
"""

import numpy as np

from .. import tensor as T
from ..errors import NumericError, ParameterError
from .masks import Mask


def binarize_top(scores, cover_rate):
    """Binary grid with exactly round(cr * H * W) ones at the highest scores."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    k = int(round(cover_rate * flat.size))
    out = np.zeros(flat.size)
    if k:
        # stable order so ties resolve by pixel index, deterministic
        order = np.argsort(-flat, kind="stable")
        out[order[:k]] = 1.0
    return out.reshape(np.shape(scores))


def search_key_mask(x, model, steps=100, cover_rate=0.1, step_size=0.01, seed=0,
                    noise_samples=8, tv_weight=1.0, edge_weight=1.0, history=None):
    """Search a mask of cover rate ``cover_rate`` over the features ``model`` relies on."""
    if not 0.0 < cover_rate < 1.0:
        raise ParameterError(f"cover rate must be in (0, 1), got {cover_rate}")
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    if x.ndim == 4:
        x = x[0]
    c, h, w = x.shape
    rng = np.random.default_rng([int(seed), 0x3A5C])
    with model.frozen():
        e_b = T.normalize(model(x[None]), axis=1).data
    scores = np.clip(rng.normal(0.0, 1.0, size=(h, w)), 0.0, 1.0)
    for _ in range(steps):
        m = T.Tensor(binarize_top(scores, cover_rate), requires_grad=True)
        noise = rng.normal(0.0, 1.0, size=(noise_samples, c, h, w))
        x_adv = x[None] * (1.0 - m) + m * noise
        with model.frozen():
            sim = T.mean(T.tsum(T.normalize(model(x_adv), axis=1) * e_b, axis=1))
        loss = tv_weight * T.tv_loss(m) + edge_weight * T.laplacian_energy(m) + sim
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss in mask search")
        (g,) = T.grad(loss, [m])
        norm = np.linalg.norm(g)
        if norm > 0:
            scores = scores - step_size * np.sign(g / norm)
        scores = np.clip(T.median_blur(scores, 3), 0.0, 1.0)
        if history is not None:
            history.append(float(sim.data))
    return Mask(binarize_top(scores, cover_rate), "learned")
