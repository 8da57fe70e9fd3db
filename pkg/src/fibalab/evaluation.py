"""Attack success rates, threshold sweeps, region studies, transfer tables and exports."""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .extractors import embed
from .forge.masks import Mask, compose, prefab_mask
from .frs import DEFAULT_THRESHOLD, FeatureDatabase, enroll_embedding

SCHEMA_VERSION = 1
ASR_CSV_COLUMNS = ("name", "attack_kind", "asr", "n_probes", "n_success", "threshold",
                   "mean_similarity", "min_similarity", "max_similarity")


@dataclass
class AsrReport:
    asr: float
    n_probes: int
    n_success: int
    threshold: float
    mean_similarity: float
    min_similarity: float
    max_similarity: float
    attack_kind: str = "fiba"
    config_hashes: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def _grid(m):
    return m.grid if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def report_from_scores(scores, threshold=DEFAULT_THRESHOLD, attack_kind="fiba", config_hashes=None):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ParameterError("no probe scores")
    hits = int(np.count_nonzero(scores >= threshold))
    return AsrReport(hits / scores.size, int(scores.size), hits, float(threshold),
                     float(scores.mean()), float(scores.min()), float(scores.max()),
                     attack_kind, dict(config_hashes or {}), scores.tolist())


def compute_asr(db, insider_id, patch, mask, probes, model, threshold=None, attack_kind="fiba",
                config_hashes=None):
    """Fraction of probes x_i with cos(f(x_i (+) p), e_insider) >= threshold.

    For FIBA the insider entry is f(x_v (+) p); for the plain adversarial
    baseline it is the clean f(x_v). Either way the enrolled vector is used.
    """
    label = str(insider_id)
    if label not in db.entries:
        raise ParameterError(f"insider {insider_id!r} is not enrolled")
    db.check_model(model)
    threshold = db.threshold if threshold is None else threshold
    values = patch.values if hasattr(patch, "values") else patch
    probes = np.asarray(probes, dtype=np.float64)
    scores = embed(model, compose(probes, values, _grid(mask))) @ db.entries[label]
    return report_from_scores(scores, threshold, attack_kind, config_hashes)


def threshold_sweep(scores, thresholds):
    """[(delta, ASR)] from one set of per-probe scores; thresholds must ascend."""
    if isinstance(scores, AsrReport):
        scores = scores.scores
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ParameterError("threshold grid must be sorted ascending")
    n = scores.size
    # count of scores >= t via a single sorted search
    below = np.searchsorted(scores, thresholds, side="left")
    return [(t, float((n - b) / n)) for t, b in zip(thresholds, below)]


def enrolled_insider(model, x_v, patch=None, mask=None, label="insider", threshold=DEFAULT_THRESHOLD):
    """Feature database holding the insider, triggered when a patch is given."""
    img = np.asarray(x_v, dtype=np.float64)
    if patch is not None:
        img = compose(img, patch.values if hasattr(patch, "values") else patch, _grid(mask))
    db = FeatureDatabase.for_model(model, threshold)
    enroll_embedding(db, embed(model, img[None])[0], label)
    return db


def attack_report(model, patch, x_v, probes, threshold=DEFAULT_THRESHOLD, kind=None):
    """Enrol the insider as the attack prescribes and score the triggered probes."""
    kind = kind or patch.provenance.get("attack_kind", "fiba")
    triggered = kind == "fiba"
    db = enrolled_insider(model, x_v, patch if triggered else None, patch.mask if triggered else None,
                          threshold=threshold)
    hashes = {"config": patch.provenance.get("config_hash", ""), "model": model.fingerprint().hex()}
    return compute_asr(db, "insider", patch, patch.mask, probes, model, threshold, kind, hashes)


def clean_false_match_rate(model, patch, x_v, probes, threshold=DEFAULT_THRESHOLD, kind=None):
    """Share of clean (untriggered) probes accepted as the enrolled insider."""
    kind = kind or patch.provenance.get("attack_kind", "fiba")
    img = np.asarray(x_v, dtype=np.float64)
    if kind == "fiba":
        img = compose(img, patch.values, patch.mask.grid)
    scores = embed(model, probes) @ embed(model, img[None])[0]
    return float(np.mean(scores >= threshold))


def masked_pair_similarity(model, images, mask, n_pairs=500, seed=0):
    """cos(f(x_i * (1 - m)), f(x_j * (1 - m))) over random pairs of distinct images.

    ``mask`` None gives the unmasked reference distribution.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise ParameterError("need at least two images for pairs")
    rng = np.random.default_rng([seed, 0xFA125])
    i = rng.integers(0, len(images), size=n_pairs)
    j = (i + rng.integers(1, len(images), size=n_pairs)) % len(images)
    if mask is not None:
        images = images * (1.0 - _grid(mask))
    e = embed(model, images)
    return np.sum(e[i] * e[j], axis=1)


def mask_region_experiment(regions, make_patch, model, x_v, probes, threshold=DEFAULT_THRESHOLD,
                           n_pairs=500, seed=0):
    """Per-region attack outcome plus the masked-pair similarity shift.

    ``make_patch(mask)`` forges one trigger for a mask under a fixed budget.
    """
    h, w = np.asarray(x_v).shape[-2:]
    base = masked_pair_similarity(model, probes, None, n_pairs, seed)
    table = {}
    for region in regions:
        mask = prefab_mask(region, h, w)
        patch = make_patch(mask)
        rep = attack_report(model, patch, x_v, probes, threshold)
        masked = masked_pair_similarity(model, probes, mask, n_pairs, seed)
        table[region] = {
            "asr": rep.asr,
            "mean_similarity": rep.mean_similarity,
            "cover_rate": mask.cover_rate,
            "masked_pair_mean": float(masked.mean()),
            "unmasked_pair_mean": float(base.mean()),
            "pair_shift": float(masked.mean() - base.mean()),
        }
    return table


def transfer_matrix(patches, targets, x_v, probes, threshold=DEFAULT_THRESHOLD):
    """ASR of every (row patch, column target) pair plus a clean "w/o attack" column.

    ``patches`` maps a row label (surrogate, source seed) to a Patch;
    ``targets`` maps a column label to a model or (model, probes, x_v).
    """
    out = {}
    for row, patch in patches.items():
        cells = {}
        for col, target in targets.items():
            model, col_probes, col_xv = target if isinstance(target, tuple) else (target, probes, x_v)
            rep = attack_report(model, patch, col_xv, col_probes, threshold)
            cells[col] = {"asr": rep.asr, "mean_similarity": rep.mean_similarity,
                          "without_attack": clean_false_match_rate(model, patch, col_xv, col_probes, threshold)}
        out[row] = cells
    return out


# ---------------------------------------------------------------------------
# serialisation

def _plain(obj):
    if isinstance(obj, AsrReport):
        return obj.to_json()
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def report_json(results):
    """Deterministic JSON text: sorted keys, no timestamps."""
    return json.dumps({"schema_version": SCHEMA_VERSION, "results": _plain(results)},
                      indent=2, sort_keys=True) + "\n"


def export_report(results, path, fmt="json"):
    """Write results as JSON (any structure) or CSV (named AsrReports, ASR_CSV_COLUMNS order)."""
    path = Path(path)
    if fmt == "json":
        text = report_json(results)
        path.write_text(text)
        return path
    if fmt != "csv":
        raise ParameterError(f"unknown report format {fmt!r}")
    items = results.items() if isinstance(results, dict) else enumerate(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("schema_version", SCHEMA_VERSION))
        w.writerow(ASR_CSV_COLUMNS)
        for name, rep in items:
            w.writerow([name, rep.attack_kind, repr(rep.asr), rep.n_probes, rep.n_success,
                        repr(rep.threshold), repr(rep.mean_similarity), repr(rep.min_similarity),
                        repr(rep.max_similarity)])
    return path


def load_report(path):
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ParameterError(f"unsupported report schema {data.get('schema_version')!r}")
    return data["results"]


def export_embeddings(model, images, labels, path, roles=None):
    """CSV rows: role, label, e_0 .. e_{K-1} (unit embeddings, float32 precision)."""
    e = embed(model, images)
    labels = list(labels)
    roles = ["clean"] * len(labels) if roles is None else list(roles)
    if not len(labels) == len(roles) == len(e):
        raise ParameterError("images, labels and roles differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "label"] + [f"e{k}" for k in range(e.shape[1])])
        for role, label, row in zip(roles, labels, e):
            w.writerow([role, label] + [repr(float(np.float32(v))) for v in row])
    return path


def load_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    roles = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    values = np.array([[float(v) for v in r[2:]] for r in rows]) if rows else np.zeros((0, 0))
    return roles, labels, values
