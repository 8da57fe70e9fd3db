"""Min-max fine-tuning against universal feature-replacing perturbations.

Inner step: a shared perturbation z is pushed (normalised gradient ascent) to
make a batch's embeddings mutually similar. Outer step: the extractor is
updated to undo that collapse while a cross-entropy term keeps it a classifier.
"""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .extractors import _head_accuracy, embed
from .forge.masks import compose
from .optim import Adam


@dataclass
class DefenseConfig:
    alpha: float = 5.0            # ascent step on z (L2 length of each normalised step)
    ascent_steps: int = 3
    gamma_ce: float = 1.0
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    z_scale: float = 0.01
    normalize_gram: bool = True
    ce_on_perturbed: bool = False
    ce_only: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be non-negative")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ParameterError("batch size must be >= 2")


@dataclass
class DefenseHistory:
    benign_accuracy: list = field(default_factory=list)
    probe_similarity: list = field(default_factory=list)
    pairwise_loss: list = field(default_factory=list)
    initial_accuracy: float = None
    initial_similarity: float = None

    def to_rows(self):
        return [(i + 1, a, s) for i, (a, s) in enumerate(zip(self.benign_accuracy, self.probe_similarity))]


def pairwise_sim_loss(embeddings, normalize=True):
    """Frobenius norm of the off-diagonal part of the batch Gram matrix."""
    e = T.as_tensor(embeddings)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ParameterError(f"need a (B >= 2, K) batch, got {e.shape}")
    if normalize:
        e = T.normalize(e, axis=1)
    gram = T.matmul(e, e.T)
    off = gram * (1.0 - np.eye(e.shape[0]))
    return T.l2_norm(off)


def craft_universal_perturbation(batch, model, config, rng=None):
    """Shared z for the whole batch, N(0, 1) * z_scale then normalised ascent steps."""
    batch = np.asarray(batch, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng([config.seed, 0xD3F])
    z = rng.normal(0.0, 1.0, size=batch.shape[1:]) * config.z_scale
    with model.frozen():
        for _ in range(config.ascent_steps):
            zt = T.Tensor(z, requires_grad=True)
            loss = pairwise_sim_loss(model(T.clip(batch + zt, 0.0, 1.0)), config.normalize_gram)
            (g,) = T.grad(loss, [zt])
            norm = np.linalg.norm(g)
            if norm == 0:
                break
            z = z + config.alpha * g / norm
    return z


def probe_similarity(model, probe):
    """Mean cos(f(x_i (+) p), f(x_v (+) p)) over the probe faces."""
    patch, mask, x_v, faces = probe
    anchor = embed(model, compose(np.asarray(x_v)[None], patch, mask))[0]
    return float(np.mean(embed(model, compose(faces, patch, mask)) @ anchor))


def defense_finetune(model, head, data, config=None, probe=None, log=None):
    """Fine-tune ``model`` and ``head`` in place; returns (model, DefenseHistory).

    ``probe`` is (patch values, mask, insider image, probe faces) generated
    against the original model; its triggered similarity is tracked per epoch.
    """
    config = config or DefenseConfig()
    train = data.subset("train") if np.any(data.split == "eval") else data
    evals = data.subset("eval") if np.any(data.split == "eval") else data
    opt = Adam(model.parameters() + head.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 0xDEF])
    history = DefenseHistory()

    def benign():
        return _head_accuracy(head, embed(model, evals.images, normalize=False), evals.labels)

    history.initial_accuracy = benign()
    if probe is not None:
        history.initial_similarity = probe_similarity(model, probe)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        ps_total, n_batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = train.images[idx], train.labels[idx]
            loss = None
            if not config.ce_only:
                z = craft_universal_perturbation(xb, model, config, rng)
                perturbed = np.clip(xb + z, 0.0, 1.0)
                loss = pairwise_sim_loss(model(perturbed), config.normalize_gram)
                ps_total += float(loss.data)
                ce_in = perturbed if config.ce_on_perturbed else xb
            else:
                ce_in = xb
            ce = T.cross_entropy(head(model(ce_in)), yb) * config.gamma_ce
            loss = ce if loss is None else loss + ce
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            n_batches += 1
        history.benign_accuracy.append(benign())
        history.pairwise_loss.append(ps_total / max(n_batches, 1))
        if probe is not None:
            history.probe_similarity.append(probe_similarity(model, probe))
        if log:
            sim = history.probe_similarity[-1] if probe is not None else float("nan")
            log(f"epoch {epoch + 1}/{config.epochs} benign_acc={history.benign_accuracy[-1]:.3f} "
                f"probe_sim={sim:.4f} l_ps={history.pairwise_loss[-1]:.4f}")
    return model, history


def export_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "benign_acc", "probe_similarity"])
        for it, acc, sim in history.to_rows():
            w.writerow([it, repr(float(acc)), repr(float(sim))])


def config_json(config):
    return asdict(config)
