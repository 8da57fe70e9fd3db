"""Command-line front end.

Exit codes: 0 success, 2 configuration/parameter error, 3 numeric error, 4 I/O or format error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import synth
from .config import build, load_config
from .errors import ConfigError, FibaError, FormatError, NumericError
from .tensorio import load_tensor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _add_trigger_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--region")
    p.add_argument("--no-transforms", dest="use_transforms", action="store_const", const=False)
    p.add_argument("--transform-scope", choices=("both", "insider_only"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint", action="append", required=True, help="surrogate; repeat for an ensemble")
    p.add_argument("--perceptual", required=True, help="frozen checkpoint for the perceptual term")
    p.add_argument("--data", required=True, help="dataset directory (insider source)")
    p.add_argument("--insider", type=int, help="identity id of the insider (default: first insider)")
    p.add_argument("--train-images", type=int, default=50)
    p.add_argument("--train-offset", type=int, default=2000)
    p.add_argument("--mask", help="mask file; default is the prefab mask of --region")
    p.add_argument("--out", required=True)


def _probe_flags(p):
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--probe-offset", type=int, default=3000)
    p.add_argument("--threshold", type=float, default=0.35)


def build_parser():
    ap = argparse.ArgumentParser(prog="fibalab", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="TOML or JSON file with [data] [train] [trigger] [defense] [experiment] tables")
    ap.add_argument("--out-dir", default=".")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic face dataset")
    p.add_argument("--identities", type=int, default=64)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--name", default="data")

    p = sub.add_parser("train", help="train a feature extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="arch-A")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--head", default="cosine", choices=("cosine", "linear"))
    p.add_argument("--out", required=True)

    forge = sub.add_parser("forge", help="mask search and trigger synthesis").add_subparsers(dest="action", required=True)
    p = forge.add_parser("search-mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="FBTN face image")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--cover-rate", type=float, default=0.1)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--out", required=True)
    _add_trigger_flags(forge.add_parser("gen-trigger"))
    _add_trigger_flags(forge.add_parser("gen-baseline"))

    frs = sub.add_parser("frs", help="feature database operations").add_subparsers(dest="action", required=True)
    for name in ("enroll", "auth"):
        p = frs.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--db", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--patch", help="wear this trigger")
        p.add_argument("--threshold", type=float, default=0.35)
        if name == "enroll":
            p.add_argument("--label", required=True)
    p = frs.add_parser("failures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.35)

    ev = sub.add_parser("eval", help="experiments").add_subparsers(dest="action", required=True)
    p = ev.add_parser("asr")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--insider", type=int)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    _probe_flags(p)
    p = ev.add_parser("sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--insider", type=int)
    p.add_argument("--grid", default="-1,0,0.1,0.2,0.3,0.35,0.4,0.5,0.6,0.7,0.8,0.9,1")
    _probe_flags(p)
    for name in ("regions", "transfer"):
        p = ev.add_parser(name, help="full pipeline run from the experiment config")
        p.add_argument("--cache", help="model cache directory (default <out-dir>/models)")

    p = sub.add_parser("defend", help="defense fine-tuning").add_subparsers(dest="action", required=True)
    p = p.add_parser("finetune")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probe-patch", required=True)
    p.add_argument("--insider", type=int)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--probe-offset", type=int, default=3000)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", help="exports").add_subparsers(dest="action", required=True)
    p = p.add_parser("embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patch", help="also export triggered copies and the triggered insider")
    p.add_argument("--insider", type=int)
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------------------

def _out(args, name):
    path = Path(name)
    if not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _insider(ds, insider):
    if insider is not None:
        return int(insider)
    pool = ds.insider_ids or tuple(np.unique(ds.identity_ids))
    return int(pool[0])


def _insider_image(ds, insider):
    ident = _insider(ds, insider)
    return synth.render_pool([ident], ds.seed, 0, ds.images.shape[1])[0], ident


def _probes(ds, args):
    ids = range(args.probe_offset, args.probe_offset + args.probes)
    return synth.render_pool(ids, ds.seed, 0, ds.images.shape[1])


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args, cfg):
    section = cfg.get("data", {})
    ds = synth.build_dataset(section.get("identities", args.identities), section.get("samples", args.samples),
                             args.seed, channels=section.get("channels", args.channels))
    manifest = synth.export_dataset(ds, _out(args, args.name))
    _emit({"manifest": str(manifest), "images": len(ds), "content_hash": ds.content_hash()})


def cmd_train(args, cfg):
    from .extractors import ExtractorSpec, build_extractor, make_head, save_checkpoint, train_extractor
    section = cfg.get("train", {})
    ds = synth.import_dataset(args.data)
    model = build_extractor(ExtractorSpec(arch=section.get("arch", args.arch), seed=args.seed,
                                          channels=ds.images.shape[1]))
    head = make_head(section.get("head", args.head), model.spec.embedding_dim, ds.n_classes, args.seed)
    _, hist = train_extractor(model, head, ds, epochs=section.get("epochs", args.epochs), seed=args.seed,
                              log=lambda s: print(s, file=sys.stderr))
    path = _out(args, args.out)
    save_checkpoint(model, path, head=head)
    _emit({"checkpoint": str(path), "fingerprint": model.fingerprint().hex(),
           "eval_identification": hist.eval_identification[-1] if hist.eval_identification else None})


def _load_model(path):
    from .extractors import load_checkpoint
    return load_checkpoint(path)


def cmd_forge(args, cfg):
    from .forge.masks import prefab_mask, save_mask, load_mask
    from .forge.search import search_key_mask
    from .forge.trigger import TriggerConfig, baseline_adv_trigger, generate_trigger, save_patch
    if args.action == "search-mask":
        mask = search_key_mask(load_tensor(args.image), _load_model(args.checkpoint), args.steps,
                               args.cover_rate, args.step_size, seed=args.seed)
        save_mask(mask, _out(args, args.out))
        _emit({"mask": str(_out(args, args.out)), "cover_rate": mask.cover_rate})
        return
    overrides = {k: getattr(args, k) for k in ("alpha", "beta", "gamma", "lr", "iterations", "region",
                                               "use_transforms", "transform_scope", "batch_size")}
    config = build(TriggerConfig, cfg.get("trigger"), seed=args.seed, **overrides)
    ds = synth.import_dataset(args.data)
    x_v, ident = _insider_image(ds, args.insider)
    train = synth.render_pool(range(args.train_offset, args.train_offset + args.train_images), ds.seed, 0,
                              ds.images.shape[1])
    mask = load_mask(args.mask) if args.mask else prefab_mask(config.region, *x_v.shape[-2:])
    models = [_load_model(c) for c in args.checkpoint]
    fn = generate_trigger if args.action == "gen-trigger" else baseline_adv_trigger
    patch = fn(x_v, train, mask, models, config, perceptual=_load_model(args.perceptual),
               log=lambda s: print(s, file=sys.stderr))
    patch.provenance["insider"] = ident
    save_patch(patch, _out(args, args.out))
    _emit({"patch": str(_out(args, args.out)), "attack_kind": patch.provenance["attack_kind"],
           "final_train_similarity": patch.history["final_train_similarity"]})


def cmd_frs(args, cfg):
    from .forge.masks import compose
    from .forge.trigger import load_patch
    from .frs import FeatureDatabase, authenticate, enroll, load_db, natural_failure_rates, save_db
    model = _load_model(args.checkpoint)
    if args.action == "failures":
        ds = synth.import_dataset(args.data)
        from .extractors import embed
        from .frs import enroll_embedding, false_match_rate
        tr, ev = ds.subset("train"), ds.subset("eval")
        db = FeatureDatabase.for_model(model, args.threshold)
        e = embed(model, tr.images)
        for label in np.unique(tr.labels):
            enroll_embedding(db, e[tr.labels == label].mean(axis=0), int(label))
        unrec, misid = natural_failure_rates(db, ev.images, ev.labels, model)
        fmr = false_match_rate(db, ev.images, ev.labels, model)
        _emit({"unrecognition_rate": unrec, "misidentification_rate": misid, "false_match_rate": fmr,
               "threshold": args.threshold})
        return
    image = load_tensor(args.image)
    if args.patch:
        patch = load_patch(args.patch)
        image = compose(image, patch.values, patch.mask)
    db_path = _out(args, args.db)
    if args.action == "enroll":
        db = load_db(db_path) if db_path.exists() else FeatureDatabase.for_model(model, args.threshold)
        enroll(db, image, args.label, model)
        save_db(db, db_path)
        _emit({"db": str(db_path), "enrolled": args.label, "size": len(db)})
    else:
        result = authenticate(load_db(db_path), image, model, args.threshold)
        _emit({"accepted": [m[0] for m in result.matches], "best": result.best,
               "scores": result.scores})


def cmd_eval(args, cfg):
    from .evaluation import attack_report, export_report, threshold_sweep
    from .experiments import ExperimentConfig, Workspace, run_regions, run_transfer, write_report
    from .forge.trigger import load_patch
    if args.action in ("regions", "transfer"):
        ecfg = ExperimentConfig.from_dict({**cfg.get("experiment", {}), "data_seed": args.seed,
                                           **({"trigger": cfg["trigger"]} if "trigger" in cfg else {})})
        ws = Workspace(ecfg, args.cache or _out(args, "models"), log=lambda s: print(s, file=sys.stderr))
        result = run_regions(ws) if args.action == "regions" else run_transfer(ws)[0]
        path = write_report(result, _out(args, f"{args.action}.json"))
        _emit({"report": str(path), "config_hash": ecfg.config_hash()})
        return
    model = _load_model(args.checkpoint)
    patch = load_patch(args.patch)
    ds = synth.import_dataset(args.data)
    x_v, _ = _insider_image(ds, args.insider if args.insider is not None else patch.provenance.get("insider"))
    report = attack_report(model, patch, x_v, _probes(ds, args), args.threshold)
    if args.action == "asr":
        path = export_report({"asr": report}, _out(args, f"asr.{args.format}"), args.format)
        _emit({"report": str(path), "asr": report.asr, "n_probes": report.n_probes})
    else:
        grid = [float(t) for t in args.grid.split(",")]
        curve = threshold_sweep(report.scores, grid)
        path = export_report({"sweep": curve, "attack_kind": report.attack_kind}, _out(args, "sweep.json"))
        _emit({"report": str(path), "curve": curve})


def cmd_defend(args, cfg):
    from .defense import DefenseConfig, defense_finetune, export_history_csv
    from .extractors import load_checkpoint, save_checkpoint
    from .forge.trigger import load_patch
    model, head = load_checkpoint(args.checkpoint, with_head=True)
    if head is None:
        raise ConfigError("defense needs a checkpoint saved with its classification head")
    config = build(DefenseConfig, cfg.get("defense"), seed=args.seed, epochs=args.epochs)
    ds = synth.import_dataset(args.data)
    patch = load_patch(args.probe_patch)
    x_v, _ = _insider_image(ds, args.insider if args.insider is not None else patch.provenance.get("insider"))
    probe = (patch.values, patch.mask, x_v, _probes(ds, args))
    _, hist = defense_finetune(model, head, ds, config, probe, log=lambda s: print(s, file=sys.stderr))
    out = _out(args, args.out)
    save_checkpoint(model, out, head=head)
    csv_path = out.with_suffix(".history.csv")
    export_history_csv(hist, csv_path)
    _emit({"checkpoint": str(out), "history": str(csv_path)})


def cmd_export(args, cfg):
    from .evaluation import export_embeddings
    from .forge.masks import compose
    from .forge.trigger import load_patch
    model = _load_model(args.checkpoint)
    ds = synth.import_dataset(args.data)
    images, labels, roles = [ds.images], list(ds.identity_ids), ["clean"] * len(ds)
    if args.patch:
        patch = load_patch(args.patch)
        images.append(compose(ds.images, patch.values, patch.mask))
        labels += list(ds.identity_ids)
        roles += ["triggered"] * len(ds)
        x_v, ident = _insider_image(ds, args.insider if args.insider is not None else patch.provenance.get("insider"))
        images.append(compose(x_v, patch.values, patch.mask)[None])
        labels.append(ident)
        roles.append("enrolled")
    path = export_embeddings(model, np.concatenate(images), labels, _out(args, args.out), roles)
    _emit({"embeddings": str(path), "rows": len(labels)})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "forge": cmd_forge, "frs": cmd_frs,
            "eval": cmd_eval, "defend": cmd_defend, "export": cmd_export}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        COMMANDS[args.command](args, cfg)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FibaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
