"""Toy convolutional face feature extractors, supervised training and checkpoints."""

import contextlib
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, ParameterError
from .optim import Adam
from .tensorio import read_tensor, snap_f32, tensor_to_bytes

# (kernel, out_channels, pool_after) per conv layer; the flattened map feeds a linear layer to K
ARCHITECTURES = {
    "arch-A": [(3, 12, True), (3, 16, True), (3, 24, True)],
    "arch-B": [(5, 8, True), (3, 12, False), (3, 12, True), (3, 16, True)],
}
DISPLAY_NAMES = {"arch-A": "toy-A", "arch-B": "toy-B"}


@dataclass(frozen=True)
class ExtractorSpec:
    arch: str = "arch-A"
    embedding_dim: int = 64
    seed: int = 0
    channels: int = 1
    image_size: int = 48

    def to_json(self):
        return asdict(self)


@dataclass
class FeatureVector:
    values: np.ndarray
    normalized: bool


class ExtractorModel:
    """f_theta: images (N, C, H, W) -> embeddings (N, K)."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params          # ordered name -> Tensor
        self.metadata = {}

    @property
    def layers(self):
        return ARCHITECTURES[self.spec.arch]

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def features(self, x):
        """Post-activation maps of every conv layer, then the embedding."""
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        expected = (self.spec.channels, self.spec.image_size, self.spec.image_size)
        if tuple(x.shape[1:]) != expected:
            raise DimensionError(f"expected images of shape {expected}, got {tuple(x.shape[1:])}")
        acts = []
        h = x - 0.5
        for i, (k, _, pool) in enumerate(self.layers):
            h = T.relu(T.conv2d(h, self.params[f"conv{i}.w"], padding=k // 2, bias=self.params[f"conv{i}.b"]))
            acts.append(h)
            if pool:
                h = T.max_pool2d(h, 2)
        flat = T.reshape(h, (h.shape[0], -1))
        acts.append(T.matmul(flat, self.params["fc.w"]) + self.params["fc.b"])
        return acts

    def __call__(self, x):
        return self.features(x)[-1]

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for the parameters."""
        flags = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(self.params.values(), flags):
                p.requires_grad = f

    def snap_f32(self):
        for p in self.params.values():
            p.data = snap_f32(p.data)

    def copy(self):
        clone = ExtractorModel(self.spec, {k: T.Tensor(v.data.copy(), requires_grad=True)
                                           for k, v in self.params.items()})
        clone.metadata = dict(self.metadata)
        return clone

    def fingerprint(self):
        """SHA-256 over the spec and float32 parameter bytes (32 raw bytes)."""
        h = hashlib.sha256(json.dumps(self.spec.to_json(), sort_keys=True).encode())
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.digest()

    def param_hash(self):
        return self.fingerprint().hex()


class LinearHead:
    """Classification head h: embedding -> class logits."""

    def __init__(self, embedding_dim, n_classes, seed=0):
        rng = np.random.default_rng([seed, 0x4EAD])
        self.w = T.Tensor(snap_f32(rng.normal(0, np.sqrt(1.0 / embedding_dim), (embedding_dim, n_classes))),
                          requires_grad=True)
        self.b = T.Tensor(np.zeros(n_classes), requires_grad=True)
        self.n_classes = n_classes

    def parameters(self):
        return [self.w, self.b]

    def __call__(self, emb):
        return T.matmul(emb, self.w) + self.b

    def train_logits(self, emb, labels):
        return self(emb)

    def predict(self, raw_embeddings):
        return np.argmax(raw_embeddings @ self.w.data + self.b.data, axis=1)

    def to_json(self):
        return {"kind": "linear"}


class CosineHead:
    """Normalised-softmax head: logits = s * cos(e, w_c), minus s * margin on the true class.

    Training on angles keeps different identities far apart in cosine, which is
    what a thresholded matcher needs.
    """

    def __init__(self, embedding_dim, n_classes, seed=0, scale=16.0, margin=0.2):
        rng = np.random.default_rng([seed, 0xC05])
        self.w = T.Tensor(snap_f32(rng.normal(0, 1.0, (embedding_dim, n_classes))), requires_grad=True)
        self.n_classes = n_classes
        self.scale, self.margin = float(scale), float(margin)

    def parameters(self):
        return [self.w]

    def __call__(self, emb):
        return T.matmul(T.normalize(emb, axis=1), T.normalize(self.w, axis=0)) * self.scale

    def train_logits(self, emb, labels):
        onehot = np.eye(self.n_classes)[np.asarray(labels)]
        return self(emb) - self.scale * self.margin * onehot

    def predict(self, raw_embeddings):
        return np.argmax(raw_embeddings @ self.w.data, axis=1)

    def to_json(self):
        return {"kind": "cosine", "scale": self.scale, "margin": self.margin}


def make_head(kind, embedding_dim, n_classes, seed=0, **kw):
    if kind == "cosine":
        return CosineHead(embedding_dim, n_classes, seed, **kw)
    if kind == "linear":
        return LinearHead(embedding_dim, n_classes, seed)
    raise ParameterError(f"unknown head kind {kind!r}")


def build_extractor(spec):
    if spec.arch not in ARCHITECTURES:
        raise ParameterError(f"unknown architecture {spec.arch!r}")
    if spec.embedding_dim < 8:
        raise ParameterError("embedding dimension must be at least 8")
    rng = np.random.default_rng([spec.seed, 0xE17])
    params = {}
    c_in, size = spec.channels, spec.image_size
    for i, (k, c_out, pool) in enumerate(ARCHITECTURES[spec.arch]):
        fan_in = c_in * k * k
        params[f"conv{i}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k))
        params[f"conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
        if pool:
            size //= 2
    flat = c_in * size * size
    params["fc.w"] = rng.normal(0, np.sqrt(1.0 / flat), (flat, spec.embedding_dim))
    params["fc.b"] = np.zeros(spec.embedding_dim)
    return ExtractorModel(spec, {k: T.Tensor(snap_f32(v), requires_grad=True) for k, v in params.items()})


def embed(model, images, normalize=True, batch_size=128):
    """Embeddings of a stack of images as a plain (N, K) array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    out = []
    with model.frozen():
        for start in range(0, len(images), batch_size):
            out.append(model(images[start:start + batch_size]).data)
    e = np.concatenate(out) if out else np.zeros((0, model.spec.embedding_dim))
    if normalize:
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
    return e


def extract_features(model, image, normalize=True):
    image = np.asarray(image, dtype=np.float64)
    expected = (model.spec.channels, model.spec.image_size, model.spec.image_size)
    if image.shape != expected:
        raise DimensionError(f"expected image of shape {expected}, got {image.shape}")
    return FeatureVector(embed(model, image[None], normalize)[0], normalize)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainingHistory:
    loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    eval_accuracy: list = field(default_factory=list)
    eval_identification: list = field(default_factory=list)


def _centroid_identification(gallery, gallery_labels, probes, probe_labels):
    labels = np.asarray(gallery_labels)
    classes = np.unique(labels)
    centroids = np.stack([gallery[labels == c].mean(axis=0) for c in classes])
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    scores = probes @ centroids.T
    return float(np.mean(classes[scores.argmax(axis=1)] == np.asarray(probe_labels)))


def rank1_identification(model, gallery_images, gallery_labels, probe_images, probe_labels):
    """Fraction of probes whose nearest class centroid (cosine) is their own class."""
    return _centroid_identification(embed(model, gallery_images), gallery_labels,
                                    embed(model, probe_images), probe_labels)


def _head_accuracy(head, raw_embeddings, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(head.predict(raw_embeddings) == labels))


def _jitter(images, rng, max_shift=2):
    # random integer translation with edge replication, one draw per image
    n, _, h, w = images.shape
    out = np.empty_like(images)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(shifts):
        rows = np.clip(np.arange(h) - dy, 0, h - 1)
        cols = np.clip(np.arange(w) - dx, 0, w - 1)
        out[i] = images[i][:, rows][:, :, cols]
    return out


def _erase(images, rng, prob, area=(0.02, 0.2), aspect=(0.3, 3.3)):
    # random erasing: a rectangle of uniform noise per selected image
    n, c, h, w = images.shape
    out = images.copy()
    for i in np.nonzero(rng.uniform(size=n) < prob)[0]:
        a = rng.uniform(*area) * h * w
        r = np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1])))
        eh = int(min(h, max(1, round(np.sqrt(a * r)))))
        ew = int(min(w, max(1, round(np.sqrt(a / r)))))
        y, x = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
        out[i, :, y:y + eh, x:x + ew] = rng.uniform(size=(c, eh, ew))
    return out


def train_extractor(model, head, data, epochs=30, lr=1e-3, batch_size=32, seed=0, augment=True,
                    weight_decay=5e-4, erase_prob=0.5, log=None):
    """Minimise softmax cross-entropy of the head's logits on the train split.

    ``augment`` adds random +-2 px translations to each minibatch and, with
    probability ``erase_prob`` per image, a random noise rectangle. ``weight_decay``
    is an L2 penalty on extractor weights (not the head).

    Parameters are snapped to float32 at the end so checkpoints round-trip exactly.
    """
    train = data.subset("train") if np.any(data.split == "eval") else data
    evals = data.subset("eval")
    if len(train) == 0:
        raise ParameterError("empty training set")
    if train.labels.max() >= head.n_classes:
        raise ParameterError("labels exceed the head's class count")
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    head_opt = Adam(head.parameters(), lr=lr)
    history = TrainingHistory()
    rng = np.random.default_rng([seed, 0x7EA1])
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = train.images[idx]
            if augment:
                batch = _erase(_jitter(batch, rng), rng, erase_prob)
            loss = T.cross_entropy(head.train_logits(model(batch), train.labels[idx]), train.labels[idx])
            opt.zero_grad()
            head_opt.zero_grad()
            T.backward(loss)
            opt.step()
            head_opt.step()
            total += loss.item() * len(idx)
        history.loss.append(total / len(train))
        raw_train = embed(model, train.images, normalize=False)
        raw_eval = embed(model, evals.images, normalize=False)
        history.train_accuracy.append(_head_accuracy(head, raw_train, train.labels))
        history.eval_accuracy.append(_head_accuracy(head, raw_eval, evals.labels))
        if len(evals):
            unit = lambda e: e / np.linalg.norm(e, axis=1, keepdims=True)
            history.eval_identification.append(_centroid_identification(
                unit(raw_train), train.labels, unit(raw_eval), evals.labels))
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss={history.loss[-1]:.4f} "
                f"train_acc={history.train_accuracy[-1]:.3f} eval_acc={history.eval_accuracy[-1]:.3f}")
    model.snap_f32()
    for p in head.parameters():
        p.data = snap_f32(p.data)
    model.metadata.update({
        "epochs": epochs,
        "final_accuracy": history.eval_accuracy[-1] if history.eval_accuracy else None,
        "final_identification": history.eval_identification[-1] if history.eval_identification else None,
        "dataset_hash": data.content_hash(),
    })
    return model, history


# ---------------------------------------------------------------------------
# checkpoints: b"FBCK", u8 version, u32 header length, JSON header, FBTN blobs

CHECKPOINT_MAGIC = b"FBCK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model, head=None):
    tensors = dict(model.params)
    if head is not None:
        tensors["head.w"] = head.w
        if getattr(head, "b", None) is not None:
            tensors["head.b"] = head.b
    header = json.dumps({
        "spec": model.spec.to_json(),
        "head": head.to_json() if head is not None else None,
        "params": list(tensors),
        "metadata": model.metadata,
    }, sort_keys=True).encode()
    body = b"".join(tensor_to_bytes(t) for t in tensors.values())
    return CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(header)) + header + body


def save_checkpoint(model, path, head=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, head))


def load_checkpoint(path, with_head=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    if len(blob) < 9:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack("<BI", blob[4:9])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint header") from None
    stream = io.BytesIO(blob[9 + hlen:])
    arrays = {name: read_tensor(stream) for name in header["params"]}
    if stream.read(1):
        raise FormatError("trailing bytes in checkpoint")
    spec = ExtractorSpec(**header["spec"])
    head_arrays = {k: arrays.pop(k) for k in ("head.w", "head.b") if k in arrays}
    reference = build_extractor(spec)
    for name, ref in reference.params.items():
        if name not in arrays or arrays[name].shape != ref.shape:
            raise FormatError(f"checkpoint parameter {name} missing or misshapen")
    model = ExtractorModel(spec, {k: T.Tensor(arrays[k], requires_grad=True) for k in reference.params})
    model.metadata = header.get("metadata", {})
    if not with_head:
        return model
    head = None
    if head_arrays:
        w = head_arrays["head.w"]
        info = dict(header.get("head") or {"kind": "linear"})
        head = make_head(info.pop("kind"), w.shape[0], w.shape[1], **info)
        head.w.data = w
        if "head.b" in head_arrays:
            head.b.data = head_arrays["head.b"]
    return model, head
