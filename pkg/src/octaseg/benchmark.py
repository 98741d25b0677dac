"""Desk-scale synthetic benchmark: IPN vs IPN-V2 vs IPN-V2+ over seeds.

Run as ``python -m octaseg.benchmark [--seeds 1 2 3] [--tasks rv faz]``.
For each seed a fresh 30-phantom dataset is generated from that seed and
every variant is trained with the same seed. IPN-V2+ reuses the IPN-V2
stage-1 model of the same seed, which is what its own stage 1 would
reproduce bit for bit.
"""

import argparse
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import RunConfig
from .estimator import ProjectionSegmenter, build_inputs, build_labels
from .metrics import evaluate_split
from .synthdata import PhantomSpec, gen_dataset
from .tiling import plan_patches, seam_score


@dataclass
class RunResult:
    seed: int
    task: str
    variant: str
    test_dice: float
    per_sample_dice: list
    threshold: float
    best_iter: int
    val_dice: float
    loss_0: float
    loss_200: float
    seconds: float
    seams: dict = field(default_factory=dict)


def dataset_for(cfg):
    spec = PhantomSpec(L=cfg.L, W=cfg.W, H=cfg.H, vessel_count=cfg.vessel_count,
                       vessel_radius_min=cfg.vessel_radius_min,
                       vessel_radius_max=cfg.vessel_radius_max, faz_radius=cfg.faz_radius,
                       noise_sigma=cfg.noise_sigma)
    manifest, samples = gen_dataset(spec, cfg.n_samples,
                                    (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.seed)
    by_id = {s.id: s for s in samples}
    return {split: [by_id[i] for i in manifest.ids(split)] for split in ("train", "val", "test")}


def _result(cfg, est, X_test, y_test, seconds, log):
    probs = [p[..., 1] for p in est.predict_proba(X_test)]
    rep = evaluate_split(probs, [y == 1 for y in y_test], est.thresholds_[0])
    best = est.stage2_result_ or est.stage1_result_
    return RunResult(
        seed=cfg.seed, task=cfg.task, variant=cfg.variant,
        test_dice=rep.summary["dice"][0], per_sample_dice=list(rep.dice),
        threshold=est.thresholds_[0], best_iter=best.best_iter, val_dice=best.val_dice,
        loss_0=log[0][1], loss_200=log[min(200, len(log) - 1)][1], seconds=seconds,
    )


def seam_scores(est_v2, est_plus, X_test, cfg):
    """Per-sample seam scores: no-overlap and overlap IPN-V2 splices, IPN-V2+ output.

    All three maps are scored on the same lines, those of the no-overlap
    grid (reference lines at boundary +- l/2).
    """
    l = cfg.patch_size
    half = max(1, l // 2)
    lines = plan_patches(cfg.L, cfg.W, l, l, l)
    out = {"no_overlap": [], "overlap": [], "global": []}
    for x in X_test:
        out["no_overlap"].append(seam_score(est_v2.predict_proba(x, step=l)[0][..., 1], lines))
        out["overlap"].append(seam_score(est_v2.predict_proba(x, step=half)[0][..., 1], lines))
        out["global"].append(seam_score(est_plus.predict_proba(x, step=half)[0][..., 1], lines))
    return out


def run_seed_task(seed, task, base=None, variants=("ipn", "ipnv2", "ipnv2plus")):
    cfg = (base or RunConfig()).with_overrides(seed=seed, task=task)
    data = dataset_for(cfg)
    X = [build_inputs(s, task) for s in data["train"]]
    y = [build_labels(s, task) for s in data["train"]]
    Xv = [build_inputs(s, task) for s in data["val"]]
    yv = [build_labels(s, task) for s in data["val"]]
    Xt = [build_inputs(s, task) for s in data["test"]]
    yt = [build_labels(s, task) for s in data["test"]]
    results, fitted = {}, {}
    for variant in variants:
        vcfg = cfg.with_overrides(variant=variant)
        est = ProjectionSegmenter(**vcfg.estimator_params())
        t0 = time.perf_counter()
        if variant == "ipnv2plus" and "ipnv2" in fitted:
            est.fit(X, y, Xv, yv, stage1_params=fitted["ipnv2"].params_)
            est.stage1_result_ = fitted["ipnv2"].stage1_result_
            seconds = time.perf_counter() - t0 + results["ipnv2"].seconds
        else:
            est.fit(X, y, Xv, yv)
            seconds = time.perf_counter() - t0
        fitted[variant] = est
        results[variant] = _result(vcfg, est, Xt, yt, seconds, est.stage1_result_.log)
    if "ipnv2" in fitted and "ipnv2plus" in fitted:
        results["ipnv2plus"].seams = seam_scores(fitted["ipnv2"], fitted["ipnv2plus"], Xt, cfg)
    return results


def run_benchmark(seeds=(1, 2, 3), tasks=("rv", "faz"), base=None, progress=None):
    out = []
    for task in tasks:
        for seed in seeds:
            res = run_seed_task(seed, task, base)
            out.extend(res.values())
            if progress:
                for r in res.values():
                    progress(r)
    return out


def summarize(results):
    rows = {}
    for r in results:
        rows.setdefault((r.task, r.variant), []).append(r.test_dice)
    return {k: float(np.mean(v)) for k, v in sorted(rows.items())}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m octaseg.benchmark", description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--tasks", nargs="+", default=["rv", "faz"], choices=["rv", "faz"])
    ap.add_argument("--json", help="write all run results to this file")
    args = ap.parse_args(argv)

    def show(r):
        print(f"{r.task:<4} seed {r.seed} {r.variant:<10} test dice {r.test_dice:.4f} "
              f"(best iter {r.best_iter}, {r.seconds:.0f}s)", flush=True)

    results = run_benchmark(tuple(args.seeds), tuple(args.tasks), progress=show)
    for (task, variant), d in summarize(results).items():
        print(f"mean {task:<4} {variant:<10} {d:.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([asdict(r) for r in results], fh, indent=1)


if __name__ == "__main__":
    main()
