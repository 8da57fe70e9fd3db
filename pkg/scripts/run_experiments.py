"""Run the desk-scale experiments and write one JSON report per experiment.

    python scripts/run_experiments.py --out-dir runs/default
    python scripts/run_experiments.py --config my.toml --only attack transfer

Trained models are cached under <out-dir>/models keyed by the settings that
produced them; reports carry the config hash and no timestamps.
"""

import argparse
import sys
import time
from pathlib import Path

from fibalab.config import load_config
from fibalab.defense import export_history_csv
from fibalab.experiments import (ExperimentConfig, Workspace, run_attack, run_benign, run_defense,
                                 run_mask_search, run_regions, run_transfer, write_report)

EXPERIMENTS = ("benign", "attack", "baseline", "transfer", "regions", "mask-search", "defense")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML/JSON with an [experiment] table (plus [trigger], [defense])")
    ap.add_argument("--out-dir", default="runs/default")
    ap.add_argument("--only", nargs="+", choices=EXPERIMENTS, default=list(EXPERIMENTS))
    args = ap.parse_args(argv)

    raw = load_config(args.config) if args.config else {}
    section = dict(raw.get("experiment", {}))
    for sub in ("trigger", "defense"):
        if sub in raw:
            section[sub] = raw[sub]
    config = ExperimentConfig.from_dict(section)
    out = Path(args.out_dir)
    log = lambda s: print(s, file=sys.stderr, flush=True)
    ws = Workspace(config, out / "models", log=log)
    print(f"config hash {config.config_hash()}")

    for name in args.only:
        t0 = time.perf_counter()
        if name == "benign":
            result = run_benign(ws)
        elif name in ("attack", "baseline"):
            result, _ = run_attack(ws, "fiba" if name == "attack" else "baseline")
        elif name == "transfer":
            result, _ = run_transfer(ws)
        elif name == "regions":
            result = run_regions(ws)
        elif name == "mask-search":
            result, _ = run_mask_search(ws)
        else:
            result, hist = run_defense(ws)
            export_history_csv(hist, out / "defense_history.csv")
        path = write_report(result, out / f"{name}.json")
        print(f"{name:12s} {time.perf_counter() - t0:7.1f}s -> {path}")


if __name__ == "__main__":
    main()
