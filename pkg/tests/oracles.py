"""Independent reference implementations shared by the unit and acceptance suites.

Naive versions are plain Python loops over the definitions, written without
the vectorised code paths they check.
"""

import math

import numpy as np

from fibalab import tensor as T

N_INSTANCES = 20


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# the random draw of each case: rng -> tuple of input arrays, and the scalar graph
GRAD_CASES = {
    "add": (lambda r: (r.normal(size=(3, 4)), r.normal(size=(4,))), lambda a, b: T.tsum((a + b) * (a + b))),
    "sub": (lambda r: (r.normal(size=(3, 4)), r.normal(size=(3, 1))), lambda a, b: T.tsum((a - b) ** 3)),
    "mul": (lambda r: (r.normal(size=(2, 5)), r.normal(size=(2, 5))), lambda a, b: T.tsum(a * b * a)),
    "div": (lambda r: (r.normal(size=(4,)), r.uniform(0.5, 2.0, size=(4,))), lambda a, b: T.tsum(a / b)),
    "power": (lambda r: (r.uniform(0.5, 2.0, size=(5,)),), lambda a: T.tsum(T.power(a, 2.5))),
    "exp": (lambda r: (r.normal(size=(3, 3)),), lambda a: T.tsum(T.exp(a))),
    "log": (lambda r: (r.uniform(0.2, 3.0, size=(6,)),), lambda a: T.tsum(T.log(a))),
    "sqrt": (lambda r: (r.uniform(0.2, 3.0, size=(6,)),), lambda a: T.tsum(T.sqrt(a) * a)),
    "relu": (lambda r: (_away_from_zero(r, (4, 4)),), lambda a: T.tsum(T.relu(a) * a)),
    "clip": (lambda r: (r.uniform(-2, 2, size=(12,)),),
             lambda a: T.tsum(T.clip(a, -0.73, 0.81) * a)),
    "l2_norm": (lambda r: (r.normal(size=(3, 5)),), lambda a: T.l2_norm(a)),
    "mean": (lambda r: (r.normal(size=(3, 5)),), lambda a: T.tsum(T.mean(a * a, axis=0) ** 2)),
    "reshape_transpose": (lambda r: (r.normal(size=(2, 6)),),
                          lambda a: T.tsum(T.transpose(T.reshape(a, (3, 4))) * np.arange(12.0).reshape(4, 3))),
    "getitem": (lambda r: (r.normal(size=(5, 4)),), lambda a: T.tsum(a[[0, 2, 2], 1:3] ** 2)),
    "stack_concat": (lambda r: (r.normal(size=(3,)), r.normal(size=(3,))),
                     lambda a, b: T.tsum(T.stack([a, b]) ** 2) + T.tsum(T.concat([a * b, b]))),
    "pad_edge": (lambda r: (r.normal(size=(1, 4, 5)),),
                 lambda a: T.tsum(T.pad2d(a, 1, "edge") * np.linspace(-1, 1, 42).reshape(1, 6, 7))),
    "pad_zero": (lambda r: (r.normal(size=(4, 4)),), lambda a: T.tsum(T.pad2d(a, 2) ** 2)),
    "matmul": (lambda r: (r.normal(size=(3, 4)), r.normal(size=(4, 2))), lambda a, b: T.tsum(T.matmul(a, b) ** 2)),
    "matvec": (lambda r: (r.normal(size=(3, 4)), r.normal(size=(4,))), lambda a, b: T.tsum(T.matmul(a, b) ** 2)),
    "conv2d": (lambda r: (r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))),
               lambda x, k, b: T.tsum(T.conv2d(x, k, padding=1, bias=b) ** 2)),
    "conv2d_stride": (lambda r: (r.normal(size=(1, 7, 7)), r.normal(size=(2, 1, 3, 3))),
                      lambda x, k: T.tsum(T.conv2d(x, k, stride=2) ** 2)),
    "max_pool2d": (lambda r: (r.permutation(64).reshape(1, 1, 8, 8) / 10.0,),
                   lambda a: T.tsum(T.max_pool2d(a) ** 2)),
    "log_softmax": (lambda r: (r.normal(size=(3, 5)),), lambda a: T.tsum(T.log_softmax(a) * np.arange(15.0).reshape(3, 5))),
    "cross_entropy": (lambda r: (r.normal(size=(4, 6)),), lambda a: T.cross_entropy(a, [0, 5, 2, 2])),
    "normalize": (lambda r: (r.normal(size=(3, 4)),), lambda a: T.tsum(T.normalize(a, axis=1) * np.arange(12.0).reshape(3, 4))),
    "cosine_similarity": (lambda r: (r.normal(size=(6,)), r.normal(size=(6,))), lambda a, b: T.cosine_similarity(a, b)),
    "tv_loss": (lambda r: (r.uniform(0, 1, size=(1, 5, 6)),), lambda p: T.tv_loss(p)),
    "tv_loss_masked": (lambda r: (r.uniform(0, 1, size=(6, 6)),),
                       lambda p: T.tv_loss(p, mask=np.pad(np.ones((3, 4)), ((1, 2), (1, 1))))),
    "laplacian_energy": (lambda r: (r.uniform(0, 1, size=(2, 5, 5)),), lambda x: T.laplacian_energy(x)),
}


# --- naive oracles ---------------------------------------------------------

def naive_tv(p):
    p = np.asarray(p, dtype=np.float64)
    flat = p.reshape(-1, *p.shape[-2:])
    total = 0.0
    for img in flat:
        h, w = img.shape
        for i in range(h):
            for j in range(w):
                dd = img[i + 1, j] - img[i, j] if i + 1 < h else 0.0
                dr = img[i, j + 1] - img[i, j] if j + 1 < w else 0.0
                total += math.sqrt(dd * dd + dr * dr)
    return total


def naive_laplacian_energy(x):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, *x.shape[-2:])
    total = 0.0
    for img in flat:
        h, w = img.shape
        get = lambda i, j: img[i, j] if 0 <= i < h and 0 <= j < w else 0.0
        for i in range(h):
            for j in range(w):
                r = get(i - 1, j) + get(i + 1, j) + get(i, j - 1) + get(i, j + 1) - 4 * img[i, j]
                total += r * r
    return math.sqrt(total)


def naive_quantile(values, q):
    s = sorted(np.asarray(values, dtype=np.float64).reshape(-1).tolist())
    n = len(s)
    k = 1
    while k < n and k < q * n - 1e-9:
        k += 1
    return s[k - 1]


def naive_median_blur(x, k=3):
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    r = k // 2
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            vals = [x[min(max(i + a, 0), h - 1), min(max(j + b, 0), w - 1)]
                    for a in range(-r, r + 1) for b in range(-r, r + 1)]
            vals.sort()
            out[i, j] = vals[len(vals) // 2]
    return out


def naive_pairwise(e, normalize=True):
    e = np.asarray(e, dtype=np.float64)
    if normalize:
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(e)):
        for j in range(len(e)):
            if i != j:
                d = sum(e[i, k] * e[j, k] for k in range(e.shape[1]))
                total += d * d
    return math.sqrt(total)


def naive_asr(model, x_v, p, m, probes, delta):
    anchor = model(T.Tensor((x_v * (1 - m) + p * m)[None])).data[0]
    hits = 0
    for x in probes:
        e = model(T.Tensor((x * (1 - m) + p * m)[None])).data[0]
        c = float(np.dot(e, anchor) / (np.linalg.norm(e) * np.linalg.norm(anchor)))
        hits += c >= delta
    return hits / len(probes)
