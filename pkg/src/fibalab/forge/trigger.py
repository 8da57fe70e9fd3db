"""Backdoor trigger synthesis and the universal adversarial patch baseline.

Both attacks optimise a patch p inside a mask m with Adam:

    L = -L_sim + alpha * L_tv + beta * L_edge + gamma * L_perceptual

FIBA scores every triggered image against the *triggered* insider x_v (+) p,
so the patch only has to overwrite the key features. The baseline scores
against the *clean* insider embedding f(x_v).
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..errors import FormatError, ParameterError
from ..optim import AdamState, adam_step
from ..tensorio import load_tensor, save_tensor, snap_f32
from .masks import Mask, compose
from .perceptual import lpips_distances
from .transforms import TransformSpec, apply_draws, sample_draw

ATTACK_KINDS = ("fiba", "baseline")


@dataclass
class TriggerConfig:
    alpha: float = 0.1       # total variation weight
    beta: float = 0.001      # edge (Laplacian) weight
    gamma: float = 0.05      # perceptual weight
    lr: float = 100.0
    iterations: int = 200
    region: str = "eye"
    use_transforms: bool = True
    transform_scope: str = "both"    # or "insider_only"
    batch_size: int = 16
    seed: int = 0
    pixel_scale: float = 255.0       # optimiser works in 8-bit intensity units
    tv_per_pixel: bool = False       # divide the TV sum by the number of masked pixels

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ParameterError("loss coefficients must be non-negative")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.transform_scope not in ("both", "insider_only"):
            raise ParameterError(f"unknown transform scope {self.transform_scope!r}")

    def to_json(self):
        return asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass
class Patch:
    values: np.ndarray        # C x H x W in [0, 1], zero outside the mask
    mask: Mask
    provenance: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)


@dataclass
class LossTerms:
    total: T.Tensor
    similarity: float
    tv: float
    edge: float
    perceptual: float


def _as_batch(x):
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def fiba_loss(p, mask, x_v, batch, models, config, draws=None, perceptual=None, kind="fiba"):
    """Attack objective for patch tensor ``p`` (C, H, W) on one tape.

    ``draws`` is None (no transforms) or a dict with an ``insider`` draw and a
    ``batch`` list (entries may be None for untransformed images).
    """
    if not models:
        raise ParameterError("need at least one surrogate model")
    if kind not in ATTACK_KINDS:
        raise ParameterError(f"unknown attack kind {kind!r}")
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise ParameterError("empty training batch")
    x_v = _as_batch(x_v)
    p = T.as_tensor(p)
    g = mask.grid if isinstance(mask, Mask) else np.asarray(mask)

    insider_comp = compose(x_v, p, g)              # 1 x C x H x W
    batch_comp = compose(batch, p, g)              # B x C x H x W
    insider_in, batch_in = insider_comp, batch_comp
    if draws is not None:
        insider_in = apply_draws(insider_comp, [draws["insider"]])
        batch_draws = draws.get("batch")
        if batch_draws is not None and any(d is not None for d in batch_draws):
            from .transforms import TransformDraw
            batch_in = apply_draws(batch_comp, [d if d is not None else TransformDraw(
                channel_delta=np.zeros(batch.shape[1])) for d in batch_draws])

    sims = []
    for model in models:
        with model.frozen():
            if kind == "fiba":
                emb = model(T.concat([insider_in, batch_in], axis=0))
                unit = T.normalize(emb, axis=1)
                target = unit[0:1]
                others = unit[1:]
            else:
                target = T.Tensor(_unit_rows(model(x_v).data))
                others = T.normalize(model(batch_in), axis=1)
            sims.append(T.mean(T.tsum(others * target, axis=1)))
    l_sim = sims[0]
    for s in sims[1:]:
        l_sim = l_sim + s
    l_sim = l_sim * (1.0 / len(sims))

    total = -l_sim
    l_tv = l_edge = l_perc = None
    if config.alpha:
        # per masked pixel, so the weight does not scale with resolution
        l_tv = T.tv_loss(p, mask=g)
        if config.tv_per_pixel:
            l_tv = l_tv * (1.0 / max(float(g.sum()), 1.0))
        total = total + config.alpha * l_tv
    if config.beta:
        resp = T.laplacian_response(batch_comp)
        l_edge = T.mean(T.sqrt(T.tsum(resp * resp, axis=(1, 2, 3))))
        total = total + config.beta * l_edge
    if config.gamma:
        if perceptual is None:
            raise ParameterError("gamma > 0 needs a perceptual model")
        l_perc = T.mean(lpips_distances(batch_comp, insider_comp, perceptual))
        total = total + config.gamma * l_perc
    value = lambda t: float(t.data) if t is not None else 0.0
    return LossTerms(total, value(l_sim), value(l_tv), value(l_edge), value(l_perc))


def _unit_rows(e):
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def triggered_similarity(model, p, mask, x_v, images, kind="fiba"):
    """cos(f(x_i (+) p), f(x_v (+) p)) per image, or against clean f(x_v) for the baseline."""
    from ..extractors import embed
    g = mask.grid if isinstance(mask, Mask) else np.asarray(mask)
    x_v = _as_batch(x_v)
    anchor = compose(x_v, p, g) if kind == "fiba" else x_v
    return embed(model, compose(_as_batch(images), p, g)) @ embed(model, anchor)[0]


def _draws_for(config, spec, rng, n_batch, channels, size):
    if not config.use_transforms:
        return None
    spec = spec or TransformSpec()
    insider = sample_draw(spec, rng, channels, size)
    if config.transform_scope == "both":
        batch = [sample_draw(spec, rng, channels, size) for _ in range(n_batch)]
    else:
        batch = [None] * n_batch
    return {"insider": insider, "batch": batch}


def _optimise(kind, x_v, train_images, mask, models, config, transforms, perceptual, log):
    train_images = _as_batch(train_images)
    if len(train_images) == 0:
        raise ParameterError("need at least one training image")
    x_v = _as_batch(x_v)
    g = mask.grid
    c, h, w = x_v.shape[1:]
    p = x_v[0] * g
    state = AdamState(lr=config.lr)
    history = {"loss": [], "similarity": [], "tv": [], "edge": [], "perceptual": []}
    primary = models[0]
    history["initial_train_similarity"] = float(np.mean(
        triggered_similarity(primary, p, mask, x_v, train_images, kind)))
    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, it, 0xF1BA])
        if len(train_images) > config.batch_size:
            idx = np.sort(rng.choice(len(train_images), config.batch_size, replace=False))
            batch = train_images[idx]
        else:
            batch = train_images
        draws = _draws_for(config, transforms, rng, len(batch), c, (h, w))
        pt = T.Tensor(p, requires_grad=True)
        terms = fiba_loss(pt, mask, x_v, batch, models, config, draws, perceptual, kind)
        (gp,) = T.grad(terms.total, [pt])
        q = adam_step(p * config.pixel_scale, gp / config.pixel_scale, state)
        p = np.clip(q / config.pixel_scale, 0.0, 1.0)
        history["loss"].append(float(terms.total.data))
        history["similarity"].append(terms.similarity)
        history["tv"].append(terms.tv)
        history["edge"].append(terms.edge)
        history["perceptual"].append(terms.perceptual)
        if log and (it % 20 == 0 or it == config.iterations - 1):
            log(f"[{kind}] iter {it} loss={terms.total.data:.4f} sim={terms.similarity:.4f}")
    p = snap_f32(np.clip(p * g, 0.0, 1.0))
    history["final_train_similarity"] = float(np.mean(
        triggered_similarity(primary, p, mask, x_v, train_images, kind)))
    provenance = {
        "attack_kind": kind,
        "config_hash": config.config_hash(),
        "config": config.to_json(),
        "surrogates": [m.fingerprint().hex() for m in models],
        "data_hash": hashlib.sha256(np.ascontiguousarray(
            np.concatenate([x_v, train_images]), dtype="<f4").tobytes()).hexdigest(),
        "seed": config.seed,
        "region": mask.region,
    }
    return Patch(p, mask, provenance, history)


def generate_trigger(x_v, train_images, mask, models, config=None, transforms=None, perceptual=None, log=None):
    """FIBA trigger: p starts as x_v * m and follows Adam on the FIBA objective."""
    return _optimise("fiba", x_v, train_images, mask, models, config or TriggerConfig(),
                     transforms, perceptual, log)


def baseline_adv_trigger(x_v, train_images, mask, models, config=None, transforms=None, perceptual=None, log=None):
    """Universal adversarial patch pulling triggered faces toward the clean f(x_v)."""
    return _optimise("baseline", x_v, train_images, mask, models, config or TriggerConfig(),
                     transforms, perceptual, log)


def save_patch(patch, path):
    path = Path(path)
    save_tensor(patch.values, path)
    save_tensor(patch.mask.grid, path.with_suffix(".mask.fbtn"))
    path.with_suffix(".json").write_text(json.dumps(
        {"kind": "patch", "region": patch.mask.region, **patch.provenance}, indent=2, sort_keys=True))


def load_patch(path):
    path = Path(path)
    values = load_tensor(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FormatError(f"missing provenance sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    mask_path = path.with_suffix(".mask.fbtn")
    grid = load_tensor(mask_path) if mask_path.exists() else (np.any(values != 0, axis=0)).astype(float)
    meta.pop("kind", None)
    region = meta.pop("region", "learned")
    return Patch(values, Mask(grid, region), meta)
