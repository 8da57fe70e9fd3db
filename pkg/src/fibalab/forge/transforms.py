"""Differentiable physical-world transformation set: colour jiggle, affine warp, blur.

A draw fixes every random parameter, after which the transform is a plain
differentiable function of the image.
"""

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T


@dataclass(frozen=True)
class TransformSpec:
    # colour jiggle: additive brightness U(-factor, factor), gain U(range),
    # per-channel offset U(-max_delta, max_delta)
    brightness_factor: float = 0.15
    brightness_range: tuple = (0.65, 0.9)
    max_delta: float = 0.1
    color_probability: float = 1.0
    # affine: translation as a fraction of the side, rotation in degrees
    translate: tuple = (0.05, 0.05)
    degrees: float = 5.0
    affine_probability: float = 1.0
    # gaussian blur
    blur_kernel: int = 3
    sigma_range: tuple = (0.1, 2.0)
    blur_probability: float = 0.4

    @classmethod
    def identity(cls):
        return cls(brightness_factor=0.0, brightness_range=(1.0, 1.0), max_delta=0.0,
                   translate=(0.0, 0.0), degrees=0.0, blur_probability=0.0)


@dataclass
class TransformDraw:
    gain: float = 1.0
    offset: float = 0.0
    channel_delta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    angle: float = 0.0          # degrees
    shift: tuple = (0.0, 0.0)   # (rows, cols) in pixels
    blur_sigma: float = None


def sample_draw(spec, rng, channels=1, size=(48, 48)):
    draw = TransformDraw(channel_delta=np.zeros(channels))
    if rng.random() < spec.color_probability:
        draw.gain = float(rng.uniform(*spec.brightness_range))
        draw.offset = float(rng.uniform(-spec.brightness_factor, spec.brightness_factor))
        draw.channel_delta = rng.uniform(-spec.max_delta, spec.max_delta, size=channels)
    if rng.random() < spec.affine_probability:
        draw.angle = float(rng.uniform(-spec.degrees, spec.degrees))
        draw.shift = (float(rng.uniform(-1, 1) * spec.translate[1] * size[0]),
                      float(rng.uniform(-1, 1) * spec.translate[0] * size[1]))
    if rng.random() < spec.blur_probability:
        draw.blur_sigma = float(rng.uniform(*spec.sigma_range))
    return draw


def gaussian_kernel3(sigma):
    ax = np.arange(-1, 2, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _bilinear_sample(x, src_r, src_c):
    """Sample (N, C, H, W) at fractional source coordinates (N, H, W), border clamped."""
    x = T.as_tensor(x)
    n, c, h, w = x.shape
    r = np.clip(src_r, 0.0, h - 1.0)
    q = np.clip(src_c, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(q).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = r - r0, q - c0
    base = (np.arange(n) * h * w)[:, None, None]
    corners = [(r0, c0, (1 - fr) * (1 - fc)), (r0, c1, (1 - fr) * fc),
               (r1, c0, fr * (1 - fc)), (r1, c1, fr * fc)]
    flat_x = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    out = np.zeros((c, n, h, w))
    for rr, cc, wt in corners:
        out += flat_x[:, base + rr * w + cc] * wt
    out = out.transpose(1, 0, 2, 3)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)
        gx = np.zeros((c, n * h * w))
        for rr, cc, wt in corners:
            idx = (base + rr * w + cc).reshape(-1)
            for ch in range(c):
                gx[ch] += np.bincount(idx, weights=(gt[ch] * wt).reshape(-1), minlength=n * h * w)
        return (gx.reshape(c, n, h, w).transpose(1, 0, 2, 3),)

    return T._node(out, (x,), bw, "bilinear_sample")


def _affine_coords(draws, h, w):
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    src_r, src_c = [], []
    for d in draws:
        th = np.deg2rad(d.angle)
        cos, sin = np.cos(th), np.sin(th)
        dy, dx = rows - cy - d.shift[0], cols - cx - d.shift[1]
        # inverse rotation maps each output pixel back into the source image
        src_r.append(cos * dy - sin * dx + cy)
        src_c.append(sin * dy + cos * dx + cx)
    return np.stack(src_r), np.stack(src_c)


def _filter3x3(x, kernels):
    """Per-image 3x3 filter with edge padding; kernels is (N, 3, 3)."""
    x = T.as_tensor(x)
    h, w = x.shape[-2:]
    xp = T.pad2d(x, 1, mode="edge")
    out = None
    for i in range(3):
        for j in range(3):
            term = xp[:, :, i:i + h, j:j + w] * kernels[:, i, j][:, None, None, None]
            out = term if out is None else out + term
    return out


def apply_draws(x, draws):
    """Apply one draw per image to a (N, C, H, W) tensor, differentiably in x."""
    x = T.as_tensor(x)
    n, c, h, w = x.shape
    if len(draws) != n:
        raise ValueError(f"{len(draws)} draws for {n} images")
    gain = np.array([d.gain for d in draws])[:, None, None, None]
    offset = np.array([d.offset for d in draws])[:, None, None, None]
    delta = np.stack([np.broadcast_to(d.channel_delta, (c,)) for d in draws])[:, :, None, None]
    if np.any(gain != 1.0) or np.any(offset != 0.0) or np.any(delta != 0.0):
        x = T.clip(x * gain + (offset + delta), 0.0, 1.0)
    if any(d.angle != 0.0 or d.shift != (0.0, 0.0) for d in draws):
        x = _bilinear_sample(x, *_affine_coords(draws, h, w))
    if any(d.blur_sigma is not None for d in draws):
        ident = np.zeros((3, 3))
        ident[1, 1] = 1.0
        kernels = np.stack([gaussian_kernel3(d.blur_sigma) if d.blur_sigma is not None else ident
                            for d in draws])
        x = _filter3x3(x, kernels)
    return x


def apply_transform_set(x, spec, draw_seed):
    """Transform one (C, H, W) image with parameters drawn from ``draw_seed``."""
    x = T.as_tensor(x)
    single = x.ndim == 3
    batch = T.reshape(x, (1,) + x.shape) if single else x
    rng = np.random.default_rng(draw_seed)
    draws = [sample_draw(spec, rng, batch.shape[1], batch.shape[-2:]) for _ in range(batch.shape[0])]
    out = apply_draws(batch, draws)
    return T.reshape(out, x.shape) if single else out
