"""Procedural identities standing in for a face dataset.

Each identity is a generic face layout plus a binary glyph in the eye band
(the dominant identity cue) and a weak low-frequency field over the rest of the
face (secondary cues). Rendering adds per-photo variation: brightness, small
translation, sensor noise and a fresh background scene outside the face oval.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .tensorio import load_tensor, save_tensor, snap_f32

GENERATOR_VERSION = 3
IMAGE_SIZE = 48

# glyph geometry on the 48x48 canvas: 3 x 16 blocks of 2 x 2 pixels
GLYPH_TOP, GLYPH_LEFT = 15, 8
GLYPH_BLOCK = (2, 2)
GLYPH_BITS = (3, 16)
GLYPH_SHAPE = (GLYPH_BITS[0] * GLYPH_BLOCK[0], GLYPH_BITS[1] * GLYPH_BLOCK[1])
GLYPH_MIN_DISTANCE = 0.25
GLYPH_LEVELS = (0.1, 0.9)

SECONDARY_AMPLITUDE = 0.28
# 8 plane waves, 1-4 cycles per image, any orientation: keeps identities decorrelated
SECONDARY_WAVES = (8, (1.0, 4.0), True)
BACKGROUND_AMPLITUDE = 0.25
BACKGROUND_LEVEL = (0.15, 0.5)
# nuisance texture per photo: blobs of random glyph-like blocks outside the eye band
CLUTTER_BLOBS = (2, 5)
CLUTTER_SIZE = (4, 10)
EYE_BAND_ROWS = (13, 23)


@dataclass(frozen=True)
class IdentityTemplate:
    identity_id: int
    seed: int
    glyph: np.ndarray = field(repr=False)          # GLYPH_SHAPE, values in GLYPH_LEVELS
    base_texture: np.ndarray = field(repr=False)   # H x W face without glyph
    glyph_origin: tuple = (GLYPH_TOP, GLYPH_LEFT)

    @property
    def glyph_bbox(self):
        """(row0, col0, row1, col1), end-exclusive."""
        r, c = self.glyph_origin
        return r, c, r + self.glyph.shape[0], c + self.glyph.shape[1]

    def image(self):
        """Template rendered with no variation (single channel)."""
        out = self.base_texture.copy()
        r0, c0, r1, c1 = self.glyph_bbox
        out[r0:r1, c0:c1] = self.glyph
        return out


@dataclass
class LabeledDataset:
    images: np.ndarray          # N x C x H x W in [0, 1]
    labels: np.ndarray          # class index 0..n_identities-1
    identity_ids: np.ndarray    # generator identity id per image
    split: np.ndarray           # "train" / "eval" per image
    seed: int
    insider_ids: tuple = ()
    attacker_ids: tuple = ()

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, which):
        keep = self.split == which
        return LabeledDataset(self.images[keep], self.labels[keep], self.identity_ids[keep],
                              self.split[keep], self.seed, self.insider_ids, self.attacker_ids)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.asarray(self.labels, dtype="<i8").tobytes())
        h.update(np.asarray(self.identity_ids, dtype="<i8").tobytes())
        h.update("|".join(self.split.tolist()).encode())
        return h.hexdigest()


def _rng(*keys):
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def _face_oval(h=IMAGE_SIZE, w=IMAGE_SIZE):
    rows, cols = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((rows - cy) / (0.42 * h)) ** 2 + ((cols - cx) / (0.36 * w)) ** 2 <= 1.0


def _generic_face(h=IMAGE_SIZE, w=IMAGE_SIZE):
    face = np.full((h, w), 0.3)
    oval = _face_oval(h, w)
    face[oval] = 0.6
    # nose ridge and mouth bar shared by everyone
    mid = w // 2
    face[int(0.48 * h):int(0.62 * h), mid - 2:mid + 2] = 0.5
    face[int(0.66 * h):int(0.73 * h), int(0.33 * w):int(0.67 * w)] = 0.35
    return face, oval


def _low_frequency_field(rng, h, w, terms=4, band=(0.5, 2.5), signed=False):
    rows, cols = np.mgrid[0:h, 0:w] / float(max(h, w))
    out = np.zeros((h, w))
    for _ in range(terms):
        fy, fx = rng.uniform(*band, size=2)
        if signed:
            fx *= rng.choice((-1.0, 1.0))
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * rows + fx * cols) + phase)
    return out / terms


def _glyph_bits(identity_id, seed):
    return _rng(seed, identity_id, 0xA11CE).integers(0, 2, size=GLYPH_BITS)


_BIT_TABLES = {}


def _resolved_bits(identity_id, seed):
    # greedy code: id i re-draws until it differs from every id < i in >= 25% of bits
    table = _BIT_TABLES.setdefault(seed, [])
    while len(table) <= identity_id:
        i = len(table)
        earlier = np.array(table).reshape(i, -1) if i else None
        attempt = 0
        while True:
            bits = _glyph_bits(i + 104729 * attempt, seed)
            if earlier is None or np.mean(earlier != bits.reshape(-1), axis=1).min() >= GLYPH_MIN_DISTANCE:
                break
            attempt += 1
        table.append(bits)
    return table[identity_id]


def _expand_glyph(bits):
    levels = np.where(np.asarray(bits) == 1, GLYPH_LEVELS[1], GLYPH_LEVELS[0])
    return np.kron(levels, np.ones(GLYPH_BLOCK))


def generate_identity(identity_id, seed=0):
    """Deterministic identity template for ``(identity_id, seed)``."""
    identity_id, seed = int(identity_id), int(seed)
    if identity_id < 0:
        raise ParameterError("identity ids are non-negative")
    face, oval = _generic_face()
    rng = _rng(seed, identity_id, 0xFACE)
    secondary = _low_frequency_field(rng, IMAGE_SIZE, IMAGE_SIZE, *SECONDARY_WAVES) * SECONDARY_AMPLITUDE
    base = np.where(oval, face + secondary, face)
    glyph = _expand_glyph(_resolved_bits(identity_id, seed))
    return IdentityTemplate(identity_id, seed, glyph, base)


def render_sample(template, variation_seed, channels=1):
    """One photo of an identity: C x H x W float array in [0, 1]."""
    rng = _rng(template.seed, template.identity_id, variation_seed, 0x5A3)
    img = template.image()
    oval = _face_oval(*img.shape)
    scene = rng.uniform(*BACKGROUND_LEVEL) + BACKGROUND_AMPLITUDE * _low_frequency_field(rng, *img.shape, terms=3)
    img = np.where(oval | _glyph_mask(template, img.shape), img, scene)
    img = _add_clutter(img, rng)
    img = img * rng.uniform(0.8, 1.2)
    dy, dx = rng.integers(-2, 3, size=2)
    img = _shift(img, int(dy), int(dx))
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if channels == 3:
        img = np.stack([img, img * 0.9, img * 0.8])
    elif channels == 1:
        img = img[None]
    else:
        raise ParameterError(f"channels must be 1 or 3, got {channels}")
    return snap_f32(img)


def _add_clutter(img, rng):
    h, w = img.shape
    out = img.copy()
    for _ in range(int(rng.integers(CLUTTER_BLOBS[0], CLUTTER_BLOBS[1] + 1))):
        bh, bw = (int(v) for v in rng.integers(CLUTTER_SIZE[0], CLUTTER_SIZE[1] + 1, size=2))
        while True:
            r, c = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
            if r + bh <= EYE_BAND_ROWS[0] or r >= EYE_BAND_ROWS[1]:
                break
        bits = rng.integers(0, 2, size=(-(-bh // GLYPH_BLOCK[0]), -(-bw // GLYPH_BLOCK[1])))
        out[r:r + bh, c:c + bw] = _expand_glyph(bits)[:bh, :bw]
    return out


def _glyph_mask(template, shape):
    m = np.zeros(shape, dtype=bool)
    r0, c0, r1, c1 = template.glyph_bbox
    m[r0:r1, c0:c1] = True
    return m


def _shift(img, dy, dx):
    h, w = img.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[np.ix_(rows, cols)]


def build_dataset(n_identities, samples_per_id, seed=0, disjoint_roles=True, eval_per_id=2,
                  channels=1, id_offset=0):
    """Render ``samples_per_id`` photos for each of ``n_identities`` identities.

    The last ``eval_per_id`` photos of every identity form the eval split. With
    ``disjoint_roles`` the identities are partitioned into insider and attacker
    pools by a seeded shuffle.
    """
    if n_identities < 2:
        raise ParameterError("need at least two identities")
    if samples_per_id < 1:
        raise ParameterError("need at least one sample per identity")
    eval_per_id = min(eval_per_id, samples_per_id - 1) if samples_per_id > 1 else 0
    images, labels, ids, split = [], [], [], []
    for label in range(n_identities):
        ident = id_offset + label
        template = generate_identity(ident, seed)
        for s in range(samples_per_id):
            images.append(render_sample(template, s, channels))
            labels.append(label)
            ids.append(ident)
            split.append("eval" if s >= samples_per_id - eval_per_id else "train")
    insiders, attackers = (), ()
    if disjoint_roles:
        order = _rng(seed, 0xB0B).permutation(n_identities) + id_offset
        half = n_identities // 2
        insiders = tuple(sorted(int(i) for i in order[:half]))
        attackers = tuple(sorted(int(i) for i in order[half:]))
    return LabeledDataset(np.stack(images), np.array(labels), np.array(ids), np.array(split),
                          int(seed), insiders, attackers)


def render_pool(identity_ids, seed=0, variation_seed=0, channels=1):
    """One render per identity, stacked N x C x H x W."""
    return np.stack([render_sample(generate_identity(i, seed), variation_seed, channels)
                     for i in identity_ids])


def export_dataset(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(ds.images):
        name = f"img_{i:05d}.fbtn"
        save_tensor(img, directory / name)
        entries.append({"file": name, "label": int(ds.labels[i]),
                        "identity_id": int(ds.identity_ids[i]), "split": str(ds.split[i])})
    manifest = {
        "format": "fibalab-dataset",
        "generator_version": GENERATOR_VERSION,
        "seed": ds.seed,
        "insider_ids": list(ds.insider_ids),
        "attacker_ids": list(ds.attacker_ids),
        "content_hash": ds.content_hash(),
        "entries": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory / "manifest.json"


def import_dataset(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable dataset manifest: {exc}") from None
    if manifest.get("format") != "fibalab-dataset":
        raise FormatError("not a fibalab dataset manifest")
    entries = manifest["entries"]
    images = np.stack([load_tensor(directory / e["file"]) for e in entries]) if entries else np.zeros((0, 1, 1, 1))
    ds = LabeledDataset(images, np.array([e["label"] for e in entries]),
                        np.array([e["identity_id"] for e in entries]),
                        np.array([e["split"] for e in entries]), int(manifest["seed"]),
                        tuple(manifest.get("insider_ids", ())), tuple(manifest.get("attacker_ids", ())))
    expected = manifest.get("content_hash")
    if expected and ds.content_hash() != expected:
        raise FormatError("dataset content hash mismatch")
    return ds
