"""End-to-end acceptance run on the 64-identity synth-faces setting.

Each test checks one criterion at its stated tolerance and records a PASS/FAIL
line (shown in the terminal summary). Models are trained from scratch into a
temporary cache, so a full run exercises training too.
"""

import math
import time

import numpy as np
import pytest

from conftest import check_grad, numeric_grad, record_criterion, rel_error
from fibalab import synth
from fibalab import tensor as T
from fibalab.defense import pairwise_sim_loss
from fibalab.evaluation import compute_asr, enrolled_insider
from fibalab.experiments import (ExperimentConfig, Workspace, run_attack, run_benign, run_defense,
                                 run_mask_search, run_regions, run_transfer)
from fibalab.evaluation import report_json
from fibalab.extractors import ExtractorSpec, build_extractor
from fibalab.forge.masks import Mask
from fibalab.forge.transforms import TransformSpec, sample_draw
from fibalab.forge.trigger import TriggerConfig, fiba_loss
from oracles import (GRAD_CASES, N_INSTANCES, naive_asr, naive_laplacian_energy, naive_median_blur,
                     naive_pairwise, naive_quantile, naive_tv)

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return Workspace(ExperimentConfig(), tmp_path_factory.mktemp("models"))


@pytest.fixture(scope="module")
def attack(ws):
    t0 = time.perf_counter()
    report, patch = run_attack(ws)
    return report, patch, time.perf_counter() - t0


def test_c01_gradients_match_finite_differences():
    worst_op = 0.0
    for name, (draw, build) in sorted(GRAD_CASES.items()):
        for i in range(N_INSTANCES):
            worst_op = max(worst_op, check_grad(build, *draw(np.random.default_rng([101, i, len(name)]))))
    size = 16
    spec = dict(image_size=size, embedding_dim=8)
    models = [build_extractor(ExtractorSpec(seed=1, **spec)), build_extractor(ExtractorSpec(arch="arch-B", seed=2, **spec))]
    perc = build_extractor(ExtractorSpec(seed=3, **spec))
    grid = np.zeros((size, size))
    grid[5:8, 2:14] = 1
    mask, cfg = Mask(grid, "eye"), TriggerConfig()
    worst_loss = 0.0
    for i in range(N_INSTANCES):
        rng = np.random.default_rng([102, i])
        x_v = rng.uniform(0.1, 0.9, size=(1, size, size))
        batch = rng.uniform(0.1, 0.9, size=(3, 1, size, size))
        draws = {"insider": sample_draw(TransformSpec(), rng, 1, (size, size)),
                 "batch": [sample_draw(TransformSpec(), rng, 1, (size, size)) for _ in range(3)]}
        p0 = rng.uniform(0.1, 0.9, size=(1, size, size)) * grid
        use = models[: 1 + i % 2]
        f = lambda p: float(fiba_loss(p, mask, x_v, batch, use, cfg, draws, perc).total.data)
        pt = T.Tensor(p0, requires_grad=True)
        (g,) = T.grad(fiba_loss(pt, mask, x_v, batch, use, cfg, draws, perc).total, [pt])
        worst_loss = max(worst_loss, rel_error(g, numeric_grad(f, p0)))
    ok = worst_op < 1e-4 and worst_loss < 1e-3
    record_criterion(1, ok, f"{len(GRAD_CASES)} ops x {N_INSTANCES}: max rel err {worst_op:.2e} (< 1e-4); "
                            f"fiba_loss x {N_INSTANCES}: {worst_loss:.2e} (< 1e-3)")
    assert ok


def test_c02_oracles_agree():
    rng = np.random.default_rng(202)
    err = {k: 0.0 for k in ("tv_loss", "laplacian_energy", "quantile", "median_blur", "pairwise_sim_loss",
                            "compute_asr")}
    model = build_extractor(ExtractorSpec(image_size=16, embedding_dim=8, seed=5))
    grid = np.zeros((16, 16))
    grid[4:8] = 1
    mask = Mask(grid, "eye")
    for _ in range(100):
        x = rng.uniform(size=(int(rng.integers(1, 3)), int(rng.integers(3, 9)), int(rng.integers(3, 9))))
        err["tv_loss"] = max(err["tv_loss"], abs(float(T.tv_loss(x).data) - naive_tv(x)))
        err["laplacian_energy"] = max(err["laplacian_energy"],
                                      abs(float(T.laplacian_energy(x).data) - naive_laplacian_energy(x)))
        v, q = rng.normal(size=int(rng.integers(1, 60))), float(rng.uniform())
        err["quantile"] = max(err["quantile"], abs(T.quantile(v, q) - naive_quantile(v, q)))
        img = rng.uniform(size=(int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        err["median_blur"] = max(err["median_blur"], float(np.max(np.abs(T.median_blur(img, 3) - naive_median_blur(img)))))
        e = rng.normal(size=(int(rng.integers(2, 9)), int(rng.integers(2, 7))))
        err["pairwise_sim_loss"] = max(err["pairwise_sim_loss"], abs(float(pairwise_sim_loss(e).data) - naive_pairwise(e)))
        x_v = rng.uniform(size=(1, 16, 16))
        p = rng.uniform(size=(1, 16, 16)) * grid
        probes = rng.uniform(size=(int(rng.integers(1, 6)), 1, 16, 16))
        delta = float(rng.uniform(0.5, 1.0))
        rep = compute_asr(enrolled_insider(model, x_v, p, mask, threshold=delta), "insider", p, mask, probes, model)
        err["compute_asr"] = max(err["compute_asr"], abs(rep.asr - naive_asr(model, x_v, p, grid, probes, delta)))
    ok = max(err.values()) <= 1e-12
    record_criterion(2, ok, "max abs err vs naive over 100 inputs: " +
                     ", ".join(f"{k} {v:.1e}" for k, v in err.items()) + " (<= 1e-12)")
    assert ok


def test_c03_extractor_training(ws):
    r = run_benign(ws)
    rank1 = {r[k]["arch"]: r[k]["rank1"] for k in ("surrogate", "target")}
    fmr = {r[k]["arch"]: r[k]["false_match_rate"] for k in ("surrogate", "target")}
    ok = all(v >= 0.95 for v in rank1.values()) and all(v < 0.02 for v in fmr.values())
    record_criterion(3, ok, f"rank-1 {rank1} (>= 0.95, {ws.config.epochs} epochs); "
                            f"false-match rate at delta={ws.config.threshold} {fmr} (< 0.02)")
    assert ok


def test_c04_white_box_fiba(ws, attack):
    report, _, seconds = attack
    asr = report["white_box"]["asr"]
    ok = asr >= 0.9 and seconds < 300
    record_criterion(4, ok, f"white-box ASR {asr:.3f} over {report['white_box']['n_probes']} probes (>= 0.9); "
                            f"forge + eval {seconds:.0f}s (< 300s)")
    assert ok


def test_c05_black_box_transfer(ws):
    result, _ = run_transfer(ws)
    c = ws.config
    fiba = result["matrix"][f"fiba:{c.surrogate}"][c.target]["asr"]
    base = result["matrix"][f"baseline:{c.surrogate}"][c.target]["asr"]
    ok = fiba - base >= 0.2
    record_criterion(5, ok, f"{c.surrogate} -> {c.target}: FIBA ASR {fiba:.3f}, baseline ASR {base:.3f}, "
                            f"gap {100 * (fiba - base):.1f} points (>= 20)")
    assert ok


def test_c06_mask_region_ordering(ws):
    regions = run_regions(ws)["regions"]
    asr = {k: v["asr"] for k, v in regions.items()}
    middle = [r for r in asr if r not in ("eye", "background")]
    ordered = all(asr["eye"] > asr[r] > asr["background"] for r in middle)
    shift = regions["eye"]["pair_shift"]
    ok = ordered and shift >= 0.1
    record_criterion(6, ok, "ASR " + ", ".join(f"{k} {v:.3f}" for k, v in asr.items()) +
                     f" (eye > middle > background); eye-masked pair similarity shift {shift:+.3f} (>= 0.1)")
    assert ok


def test_c07_threshold_sweep(ws, attack):
    sweep = attack[0]["white_box_sweep"]
    values = [a for _, a in sweep]
    monotone = all(b <= a for a, b in zip(values, values[1:]))
    at_half = dict(sweep)[0.5]
    ok = monotone and at_half >= 0.8
    record_criterion(7, ok, f"monotone non-increasing: {monotone}; white-box ASR at delta=0.5 {at_half:.3f} (>= 0.8)")
    assert ok


def test_c08_mask_search(ws):
    result, mask = run_mask_search(ws)
    target = ws.config.search_cover_rate * mask.grid.size
    ok = (abs(result["n_pixels"] - target) <= 1 and result["eye_iou"] >= 0.3
          and result["random_iou_mean"] < 0.1)
    record_criterion(8, ok, f"{result['n_pixels']} px vs {target:.1f} (+-1); eye IoU {result['eye_iou']:.3f} (>= 0.3); "
                            f"random-mask IoU mean {result['random_iou_mean']:.3f} over {ws.config.n_random_masks} (< 0.1)")
    assert ok


def test_c09_defense_dynamics(ws, attack):
    result, hist = run_defense(ws, probe_patch=attack[1])
    quarter = max(1, math.ceil(len(hist.probe_similarity) / 4))
    drop = hist.initial_similarity - min(hist.probe_similarity[:quarter])
    peak = max([hist.initial_accuracy] + hist.benign_accuracy)
    fall = peak - hist.benign_accuracy[-1]
    ok = drop >= 0.1 and fall >= 0.05
    record_criterion(9, ok, f"probe similarity drop in first {quarter} epochs {drop:.3f} (>= 0.1); "
                            f"benign accuracy peak {peak:.3f} -> final {hist.benign_accuracy[-1]:.3f}, "
                            f"fall {100 * fall:.1f} points (>= 5)")
    assert ok


def test_c10_determinism(ws, attack, tmp_path):
    # same config hash, fresh workspace reading the same trained checkpoints
    again = Workspace(ExperimentConfig(), ws.cache_dir)
    first = report_json(attack[0])
    second = report_json(run_attack(again)[0])
    search_a = report_json(run_mask_search(ws)[0])
    search_b = report_json(run_mask_search(again)[0])
    # training itself: two runs on a small config give bit-identical weights
    small = ExperimentConfig(n_identities=6, samples_per_id=3, epochs=2)
    fp = [Workspace(small, tmp_path / f"c{i}").surrogate.fingerprint() for i in range(2)]
    ok = first == second and search_a == search_b and fp[0] == fp[1]
    record_criterion(10, ok, f"attack report identical: {first == second}; mask-search report identical: "
                             f"{search_a == search_b}; retrained weights identical: {fp[0] == fp[1]}")
    assert ok
