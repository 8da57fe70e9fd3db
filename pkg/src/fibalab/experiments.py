"""End-to-end experiment runners shared by the CLI, scripts and tests.

Everything is a pure function of an ExperimentConfig: trained models are
cached on disk under a key derived from the settings that produced them, and
reports contain no timestamps, so equal config hashes give equal bytes.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synth
from .defense import DefenseConfig, defense_finetune
from .evaluation import (attack_report, clean_false_match_rate, mask_region_experiment,
                         masked_pair_similarity, report_json, threshold_sweep, transfer_matrix)
from .extractors import (ExtractorSpec, build_extractor, embed, load_checkpoint, make_head,
                         rank1_identification, save_checkpoint, train_extractor)
from .forge.masks import iou, prefab_mask, random_mask
from .forge.search import search_key_mask
from .forge.trigger import TriggerConfig, baseline_adv_trigger, generate_trigger
from .frs import FeatureDatabase, enroll_embedding, false_match_rate, natural_failure_rates

DEFAULT_THRESHOLDS = (-1.0, 0.0, 0.1, 0.2, 0.3, 0.35, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass
class ExperimentConfig:
    data_seed: int = 0
    n_identities: int = 64
    samples_per_id: int = 10
    channels: int = 1
    epochs: int = 30
    train_batch_size: int = 16
    head: str = "cosine"
    head_scale: float = 30.0
    head_margin: float = 0.5
    weight_decay: float = 5e-4
    erase_prob: float = 0.5
    surrogate: str = "arch-A"
    surrogate_seed: int = 1
    target: str = "arch-B"
    target_seed: int = 2
    perceptual_seed: int = 3
    insider_index: int = 0
    n_train_images: int = 50
    train_id_offset: int = 2000
    n_probes: int = 200
    probe_id_offset: int = 3000
    threshold: float = 0.35
    thresholds: tuple = DEFAULT_THRESHOLDS
    regions: tuple = ("eye", "nose", "mouth", "cheek", "forehead", "background")
    n_pairs: int = 500
    search_steps: int = 100
    search_cover_rate: float = 0.1
    search_step_size: float = 0.01
    n_random_masks: int = 100
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    def to_json(self):
        return asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        from .config import build
        d = dict(d)
        trig = build(TriggerConfig, d.pop("trigger", None))
        dfn = build(DefenseConfig, d.pop("defense", None))
        cfg = build(cls, d)
        cfg.trigger, cfg.defense = trig, dfn
        return cfg


class Workspace:
    """Lazily built dataset, models and attack inputs for one config."""

    def __init__(self, config, cache_dir=None, log=None):
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.log = log
        self._data = None
        self._models = {}
        self._patches = {}

    @property
    def data(self):
        if self._data is None:
            c = self.config
            self._data = synth.build_dataset(c.n_identities, c.samples_per_id, c.data_seed,
                                             channels=c.channels)
        return self._data

    def model(self, arch, seed, with_head=False):
        key = (arch, seed)
        if key not in self._models:
            self._models[key] = self._train_or_load(arch, seed)
        model, head, history = self._models[key]
        return (model, head) if with_head else model

    def training_history(self, arch, seed):
        self.model(arch, seed)
        return self._models[(arch, seed)][2]

    def _model_key(self, arch, seed):
        c = self.config
        blob = json.dumps([self.data.content_hash(), c.epochs, c.train_batch_size, c.head, c.head_scale, c.head_margin, c.weight_decay, c.erase_prob, arch, seed], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _train_or_load(self, arch, seed):
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{arch}-s{seed}-{self._model_key(arch, seed)}.fbck"
            if path.exists():
                model, head = load_checkpoint(path, with_head=True)
                return model, head, None
        c = self.config
        model = build_extractor(ExtractorSpec(arch=arch, seed=seed, channels=c.channels))
        kw = {"scale": c.head_scale, "margin": c.head_margin} if c.head == "cosine" else {}
        head = make_head(c.head, model.spec.embedding_dim, self.data.n_classes, seed, **kw)
        _, history = train_extractor(model, head, self.data, epochs=c.epochs, batch_size=c.train_batch_size, seed=seed,
                                     weight_decay=c.weight_decay, erase_prob=c.erase_prob, log=self.log)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path, head=head)
        return model, head, history

    @property
    def surrogate(self):
        return self.model(self.config.surrogate, self.config.surrogate_seed)

    @property
    def target(self):
        return self.model(self.config.target, self.config.target_seed)

    @property
    def perceptual(self):
        return self.model(self.config.surrogate, self.config.perceptual_seed)

    @property
    def insider_id(self):
        ids = self.data.insider_ids or tuple(np.unique(self.data.identity_ids))
        return int(ids[self.config.insider_index % len(ids)])

    @property
    def x_v(self):
        return synth.render_pool([self.insider_id], self.config.data_seed, 0, self.config.channels)[0]

    @property
    def train_images(self):
        c = self.config
        ids = range(c.train_id_offset, c.train_id_offset + c.n_train_images)
        return synth.render_pool(ids, c.data_seed, 0, c.channels)

    @property
    def probes(self):
        c = self.config
        ids = range(c.probe_id_offset, c.probe_id_offset + c.n_probes)
        return synth.render_pool(ids, c.data_seed, 0, c.channels)

    def forge(self, mask, kind="fiba", models=None, trigger=None):
        """Forge (or reuse) a trigger; identical requests within a workspace share one patch."""
        models = models or [self.surrogate]
        trigger = trigger or self.config.trigger
        key = (hashlib.sha256(mask.grid.tobytes()).hexdigest(), kind, trigger.config_hash(),
               tuple(m.fingerprint() for m in models))
        if key not in self._patches:
            fn = generate_trigger if kind == "fiba" else baseline_adv_trigger
            self._patches[key] = fn(self.x_v, self.train_images, mask, models, trigger,
                                    perceptual=self.perceptual, log=self.log)
        return self._patches[key]


# ---------------------------------------------------------------------------
# experiments; each returns a JSON-ready dict

def _header(ws, name):
    return {"experiment": name, "config_hash": ws.config.config_hash()}


def run_benign(ws):
    """Identification quality and natural matcher failures of each model."""
    c = ws.config
    tr, ev = ws.data.subset("train"), ws.data.subset("eval")
    out = _header(ws, "benign")
    for role, arch, seed in (("surrogate", c.surrogate, c.surrogate_seed), ("target", c.target, c.target_seed)):
        model = ws.model(arch, seed)
        db = FeatureDatabase.for_model(model, c.threshold)
        e = embed(model, tr.images)
        for label in np.unique(tr.labels):
            enroll_embedding(db, e[tr.labels == label].mean(axis=0), int(label))
        unrec, misid = natural_failure_rates(db, ev.images, ev.labels, model)
        out[role] = {
            "arch": arch,
            "rank1": rank1_identification(model, tr.images, tr.labels, ev.images, ev.labels),
            "unrecognition_rate": unrec,
            "misidentification_rate": misid,
            "false_match_rate": false_match_rate(db, ev.images, ev.labels, model),
        }
    return out


def run_attack(ws, kind="fiba"):
    """White-box and black-box ASR of one trigger on the configured region."""
    c = ws.config
    patch = ws.forge(prefab_mask(c.trigger.region), kind)
    probes, x_v = ws.probes, ws.x_v
    white = attack_report(ws.surrogate, patch, x_v, probes, c.threshold)
    black = attack_report(ws.target, patch, x_v, probes, c.threshold)
    out = _header(ws, f"attack-{kind}")
    out.update({
        "attack_kind": kind,
        "region": c.trigger.region,
        "train_similarity": [patch.history["initial_train_similarity"],
                             patch.history["final_train_similarity"]],
        "white_box": white.to_json(),
        "black_box": black.to_json(),
        "white_box_sweep": threshold_sweep(white.scores, c.thresholds),
        "without_attack": clean_false_match_rate(ws.surrogate, patch, x_v, probes, c.threshold),
    })
    return out, patch


def run_transfer(ws):
    """FIBA vs baseline, each forged on the surrogate and scored on both models."""
    c = ws.config
    mask = prefab_mask(c.trigger.region)
    patches = {f"fiba:{c.surrogate}": ws.forge(mask, "fiba"),
               f"baseline:{c.surrogate}": ws.forge(mask, "baseline")}
    targets = {c.surrogate: ws.surrogate, c.target: ws.target}
    out = _header(ws, "transfer")
    out["matrix"] = transfer_matrix(patches, targets, ws.x_v, ws.probes, c.threshold)
    return out, patches


def run_regions(ws):
    c = ws.config
    out = _header(ws, "regions")
    # triggers are forged on the surrogate and scored on the black-box target;
    # the white-box outcome is kept alongside for reference
    out["regions"] = mask_region_experiment(c.regions, lambda m: ws.forge(m, "fiba"), ws.target,
                                            ws.x_v, ws.probes, c.threshold, c.n_pairs, c.data_seed)
    for region, row in out["regions"].items():
        rep = attack_report(ws.surrogate, ws.forge(prefab_mask(region), "fiba"), ws.x_v, ws.probes, c.threshold)
        row["surrogate_asr"] = rep.asr
    out["scored_on"] = c.target
    return out


def run_mask_search(ws):
    c = ws.config
    trace = []
    mask = search_key_mask(ws.x_v, ws.surrogate, c.search_steps, c.search_cover_rate,
                           c.search_step_size, seed=c.data_seed, history=trace)
    eye = prefab_mask("eye", *mask.shape)
    rng = np.random.default_rng([c.data_seed, 0x2A4D])
    rand = [iou(random_mask(c.search_cover_rate, *mask.shape, rng=rng), eye) for _ in range(c.n_random_masks)]
    out = _header(ws, "mask-search")
    out.update({"cover_rate": mask.cover_rate, "n_pixels": int(mask.grid.sum()),
                "eye_iou": iou(mask, eye), "random_iou_mean": float(np.mean(rand)),
                "random_iou_max": float(np.max(rand)), "similarity_trace": trace})
    return out, mask


def run_defense(ws, probe_patch=None):
    """Fine-tune a copy of the surrogate against a probe trigger forged on the original."""
    c = ws.config
    base, head = ws.model(c.surrogate, c.surrogate_seed, with_head=True)
    patch = probe_patch or ws.forge(prefab_mask(c.trigger.region), "fiba")
    model = base.copy()
    head = _copy_head(head)
    probe = (patch.values, patch.mask, ws.x_v, ws.probes)
    _, hist = defense_finetune(model, head, ws.data, c.defense, probe, log=ws.log)
    out = _header(ws, "defense")
    out.update({"initial_accuracy": hist.initial_accuracy, "initial_similarity": hist.initial_similarity,
                "benign_accuracy": hist.benign_accuracy, "probe_similarity": hist.probe_similarity,
                "pairwise_loss": hist.pairwise_loss, "gram_norm": "frobenius"})
    return out, hist


def _copy_head(head):
    import copy
    clone = copy.deepcopy(head)
    for p in clone.parameters():
        p.grad = None
    return clone


def write_report(result, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(result))
    return path
