"""Enrollment / authentication workflow over a persisted feature database.

Matching uses cos(f(x), e_id) >= threshold everywhere (the non-strict form).
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, ConsistencyError, DimensionError, FormatError, ParameterError
from .extractors import embed

DEFAULT_THRESHOLD = 0.35

DB_MAGIC = b"FBDB"
DB_VERSION = 1


def _unit(v):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(v)
    if n == 0:
        raise ParameterError("cannot enroll a zero embedding")
    return v / n


@dataclass
class FeatureDatabase:
    """Identity label -> unit embedding, tied to one extractor by fingerprint."""

    fingerprint: bytes
    embedding_dim: int
    threshold: float = DEFAULT_THRESHOLD
    entries: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model, threshold=DEFAULT_THRESHOLD):
        return cls(model.fingerprint(), model.spec.embedding_dim, threshold)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, label):
        return str(label) in self.entries

    def labels(self):
        return list(self.entries)

    def matrix(self):
        if not self.entries:
            return np.zeros((0, self.embedding_dim))
        return np.stack(list(self.entries.values()))

    def check_model(self, model):
        if model.fingerprint() != self.fingerprint:
            raise ConsistencyError("model fingerprint does not match the database")


@dataclass
class MatchResult:
    matches: list          # [(label, score)] with score >= threshold, best first
    scores: dict           # label -> score for every enrolled id

    @property
    def best(self):
        return self.matches[0][0] if self.matches else None

    @property
    def accepted(self):
        return {label for label, _ in self.matches}


def enroll_embedding(db, embedding, label):
    embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if embedding.shape[0] != db.embedding_dim:
        raise DimensionError(f"embedding dim {embedding.shape[0]} != database dim {db.embedding_dim}")
    db.entries[str(label)] = _unit(embedding)
    return db


def enroll(db, image, label, model):
    """Insert or replace ``label`` with the unit embedding of ``image``."""
    db.check_model(model)
    return enroll_embedding(db, embed(model, image, normalize=True)[0], label)


def match_embedding(db, embedding, threshold=None):
    threshold = db.threshold if threshold is None else threshold
    if not db.entries:
        return MatchResult([], {})
    q = _unit(embedding)
    labels = db.labels()
    sims = db.matrix() @ q
    scores = dict(zip(labels, sims.tolist()))
    hits = [(lab, s) for lab, s in zip(labels, sims.tolist()) if s >= threshold]
    hits.sort(key=lambda t: (-t[1], t[0]))
    return MatchResult(hits, scores)


def authenticate(db, image, model, threshold=None):
    """A = {id | cos(f(x), e_id) >= threshold}; empty means the identity is unknown."""
    db.check_model(model)
    if not db.entries:
        return MatchResult([], {})
    return match_embedding(db, embed(model, image, normalize=True)[0], threshold)


def natural_failure_rates(db, probes, probe_labels, model, threshold=None):
    """(unrecognition rate, misidentification rate) over labelled probe images.

    A probe is unrecognised when its own entry scores below the threshold and
    misidentified when any other entry scores at or above it.
    """
    db.check_model(model)
    threshold = db.threshold if threshold is None else threshold
    probe_labels = [str(p) for p in probe_labels]
    unknown = sorted(set(probe_labels) - set(db.entries))
    if unknown:
        raise ParameterError(f"probe labels not enrolled: {unknown[:5]}")
    if not probe_labels:
        return 0.0, 0.0
    labels = db.labels()
    col = {lab: i for i, lab in enumerate(labels)}
    sims = embed(model, probes) @ db.matrix().T
    own = np.array([col[p] for p in probe_labels])
    rows = np.arange(len(own))
    unrecognised = sims[rows, own] < threshold
    others = sims.copy()
    others[rows, own] = -np.inf
    misidentified = (others >= threshold).any(axis=1)
    return float(unrecognised.mean()), float(misidentified.mean())


def false_match_rate(db, probes, probe_labels, model, threshold=None):
    """Fraction of (probe, wrong entry) comparisons scoring at or above the threshold."""
    db.check_model(model)
    threshold = db.threshold if threshold is None else threshold
    labels = db.labels()
    sims = embed(model, probes) @ db.matrix().T
    wrong = np.array([[lab != str(p) for lab in labels] for p in probe_labels], dtype=bool)
    if not wrong.any():
        return 0.0
    return float((sims[wrong] >= threshold).mean())


# ---------------------------------------------------------------------------
# file format: FBDB, u8 version, 32-byte fingerprint, f64 threshold, u32 K,
# u32 count, count x (u32 label length, UTF-8 label, K x f32), u32 CRC32

def db_to_bytes(db):
    if len(db.fingerprint) != 32:
        raise FormatError("fingerprint must be 32 bytes")
    parts = [DB_MAGIC, struct.pack("<B", DB_VERSION), db.fingerprint,
             struct.pack("<dII", db.threshold, db.embedding_dim, len(db.entries))]
    for label, vec in db.entries.items():
        raw = label.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(np.asarray(vec, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def db_from_bytes(blob):
    if len(blob) < 4 + 1 + 32 + 16 + 4 or blob[:4] != DB_MAGIC:
        raise FormatError("not a feature database file")
    if blob[4] != DB_VERSION:
        raise FormatError(f"unsupported database version {blob[4]}")
    body, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("database checksum mismatch")
    fingerprint = body[5:37]
    threshold, k, count = struct.unpack("<dII", body[37:53])
    db = FeatureDatabase(fingerprint, k, threshold)
    pos = 53
    try:
        for _ in range(count):
            (n,) = struct.unpack("<I", body[pos:pos + 4])
            label = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            vec = np.frombuffer(body[pos:pos + 4 * k], dtype="<f4").astype(np.float64)
            if vec.shape[0] != k:
                raise FormatError("truncated entry")
            pos += 4 * k
            db.entries[label] = _unit(vec)
    except (struct.error, UnicodeDecodeError):
        raise FormatError("corrupt database entries") from None
    if pos != len(body):
        raise FormatError("trailing bytes in database")
    return db


def save_db(db, path):
    with open(path, "wb") as fh:
        fh.write(db_to_bytes(db))


def load_db(path):
    with open(path, "rb") as fh:
        return db_from_bytes(fh.read())
