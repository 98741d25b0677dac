"""Command-line entry point: gen, train, infer, eval, project, verify.

Each subcommand writes into its own subdirectory of ``--out`` (``data``,
``train``, ``infer``, ``eval``, ``project``, ``verify``) together with a
``config.txt`` snapshot of the full effective configuration.
"""

import argparse
import shutil
import sys
import time
from pathlib import Path


from . import verify as verify_mod
from .config import ConfigError, RunConfig, load_config
from .estimator import ProjectionSegmenter, build_inputs, build_labels
from .formats import (
    FormatError,
    atomic_write,
    read_fmap,
    read_mask,
    to_u8,
    write_fmap,
    write_mask,
    write_pgm,
)
from .metrics import evaluate_split
from .network import init_global_params, init_stage1_params, load_checkpoint, write_log
from .projection import generate_all
from .synthdata import (
    Manifest,
    PhantomSpec,
    gen_dataset,
    load_octa500_sample,
    load_sample,
    read_layout,
)
from .tiling import plan_patches, seam_score

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
TARGETS = {"rv": ("rv",), "faz": ("faz",), "multitask": ("rv", "faz")}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")


def build_parser():
    parser = _Parser(prog="octaseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("gen", help="generate the synthetic phantom dataset"))
    _common(sub.add_parser("train", help="train stage 1 (and stage 2 for ipnv2plus)"))
    p = sub.add_parser("infer", help="patchwise inference, splicing and seam scores")
    _common(p)
    p.add_argument("--ids", nargs="+", help="sample ids (default: the test split)")
    p = sub.add_parser("eval", help="DICE/JAC/BACC reports for the inferred test split")
    _common(p)
    p = sub.add_parser("project", help="write the B1-B6 projection maps of a sample")
    _common(p)
    p.add_argument("--id", required=True, dest="sample_id")
    p.add_argument("--octa500", metavar="ROOT", help="read the sample from an OCTA-500 tree")
    p.add_argument("--layout", help="OCTA-500 layout descriptor file")
    p = sub.add_parser("verify", help="gradient, oracle and invariant suites")
    _common(p)
    p.add_argument("--corrupt-backward", metavar="OP",
                   help="testing hook: perturb OP's backward pass so its check must fail")
    return parser


# ---------------------------------------------------------------- helpers


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _prepare_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(path, cfg):
    atomic_write(Path(path) / "config.txt", cfg.to_text().encode())


def _data_dir(cfg, out):
    return Path(cfg.data_dir) if cfg.data_dir else Path(out) / "data"


def _manifest(data_dir):
    path = data_dir / "manifest.tsv"
    if not path.exists():
        raise DataError(f"no dataset at {data_dir} (missing manifest.tsv); run 'octaseg gen' first")
    return Manifest.load(path)


def _load(data_dir, ids):
    return [load_sample(data_dir, sid) for sid in ids]


def _train_dir(out):
    d = Path(out) / "train"
    if not (d / "stage1_best.ckpt").exists():
        raise DataError(f"no trained model in {d}; run 'octaseg train' first")
    return d


def _check_compatible(expected, loaded, path):
    exp = [(k, v.value.shape) for k, v in expected.items()]
    got = [(k, v.value.shape) for k, v in loaded.items()]
    if exp != got:
        diff = next(((a, b) for a, b in zip(exp, got) if a != b), None)
        detail = f"first difference {diff[1]} vs expected {diff[0]}" if diff else (
            f"{len(got)} tensors, expected {len(exp)}")
        raise DataError(f"checkpoint {path} does not match the configuration: {detail}")


def load_model(cfg, train_dir):
    """Rebuild a fitted estimator from a train directory's best checkpoints."""
    train_dir = Path(train_dir)
    est = ProjectionSegmenter(**cfg.estimator_params())
    config = est.model_config(cfg.input_channels)
    params = load_checkpoint(train_dir / "stage1_best.ckpt")
    _check_compatible(init_stage1_params(config, 0), params, train_dir / "stage1_best.ckpt")
    est.config_ = config
    est.n_features_in_ = cfg.input_channels
    est.params_ = params
    est.gparams_ = None
    if cfg.variant == "ipnv2plus":
        path = train_dir / "stage2_best.ckpt"
        if not path.exists():
            raise DataError(f"missing stage-2 checkpoint {path}")
        est.gparams_ = load_checkpoint(path)
        _check_compatible(init_global_params(config, 0), est.gparams_, path)
    est.thresholds_ = read_thresholds(train_dir / "thresholds.tsv")
    if len(est.thresholds_) != cfg.num_classes - 1:
        raise DataError(f"{train_dir / 'thresholds.tsv'} does not match task {cfg.task!r}")
    return est


def write_thresholds(path, thresholds):
    atomic_write(path, "".join(f"{k}\t{t!r}\n" for k, t in enumerate(thresholds, 1)).encode())


def read_thresholds(path):
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"missing threshold file {path}") from None
    return tuple(float(line.split("\t")[1]) for line in lines if line.strip())


# ---------------------------------------------------------------- commands


def cmd_gen(cfg, out, force):
    d = _prepare_dir(_data_dir(cfg, out), force)
    spec = PhantomSpec(L=cfg.L, W=cfg.W, H=cfg.H, vessel_count=cfg.vessel_count,
                       vessel_radius_min=cfg.vessel_radius_min,
                       vessel_radius_max=cfg.vessel_radius_max, faz_radius=cfg.faz_radius,
                       noise_sigma=cfg.noise_sigma)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest, _ = gen_dataset(spec, cfg.n_samples,
                              (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.seed, d)
    _snapshot(d, cfg)
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {cfg.n_samples} samples to {d} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")


def cmd_train(cfg, out, force):
    data = _data_dir(cfg, out)
    manifest = _manifest(data)
    tr = _load(data, manifest.ids("train"))
    va = _load(data, manifest.ids("val"))
    if not tr:
        raise DataError("the training split is empty")
    d = _prepare_dir(Path(out) / "train", force)
    _snapshot(d, cfg)
    est = ProjectionSegmenter(**cfg.estimator_params(), checkpoint_dir=str(d))
    X = [build_inputs(s, cfg.task) for s in tr]
    y = [build_labels(s, cfg.task) for s in tr]
    Xv = [build_inputs(s, cfg.task) for s in va] or None
    yv = [build_labels(s, cfg.task) for s in va] or None
    t0 = time.perf_counter()
    est.fit(X, y, Xv, yv)
    elapsed = time.perf_counter() - t0
    est.params_.save(d / "stage1_best.ckpt")
    write_log(est.stage1_result_.log, d / "stage1_log.tsv")
    if est.gparams_ is not None:
        est.gparams_.save(d / "stage2_best.ckpt")
        write_log(est.stage2_result_.log, d / "stage2_log.tsv")
    write_thresholds(d / "thresholds.tsv", est.thresholds_)
    best = est.stage2_result_ or est.stage1_result_
    print(f"trained {cfg.variant} on {len(tr)} samples in {elapsed:.1f}s; "
          f"best iteration {best.best_iter}, validation dice {best.val_dice:.4f}, "
          f"thresholds {', '.join(f'{t:.2f}' for t in est.thresholds_)}")


def cmd_infer(cfg, out, force, ids=None):
    data = _data_dir(cfg, out)
    manifest = _manifest(data)
    est = load_model(cfg, _train_dir(out))
    ids = ids or manifest.ids("test")
    samples = _load(data, ids)
    d = _prepare_dir(Path(out) / "infer", force)
    _snapshot(d, cfg)
    l = cfg.patch_size
    overlap = max(1, l // 2)
    lines = plan_patches(cfg.L, cfg.W, l, l, l)
    seam_rows = []
    for s in samples:
        x = build_inputs(s, cfg.task)
        if x.shape[:2] != (cfg.L, cfg.W):
            raise DataError(f"sample {s.id} has plane {x.shape[:2]}, config expects {(cfg.L, cfg.W)}")
        prob = est.predict_proba(x)[0]
        write_fmap(d / f"{s.id}_prob.fmap", prob)
        labels = est.labels_from_proba(prob)
        for k, target in enumerate(TARGETS[cfg.task], 1):
            write_mask(d / f"{s.id}_{target}.pgm", labels == k)
        # stage-1 splices with and without overlap, all scored on the no-overlap seams
        p_no = est.predict_proba(x, step=l, stage=1)[0][..., 1]
        p_ov = est.predict_proba(x, step=overlap, stage=1)[0][..., 1]
        row = [s.id, seam_score(p_no, lines), seam_score(p_ov, lines)]
        if cfg.variant == "ipnv2plus":
            row.append(seam_score(prob[..., 1], lines))
        seam_rows.append(row)
    header = ["id", "seam_no_overlap", "seam_overlap"]
    if cfg.variant == "ipnv2plus":
        header.append("seam_global")
    text = "\t".join(header) + "\n" + "".join(
        "\t".join([r[0]] + [repr(float(v)) for v in r[1:]]) + "\n" for r in seam_rows)
    atomic_write(d / "seams.tsv", text.encode())
    print(f"inferred {len(samples)} samples into {d}")


def cmd_eval(cfg, out, force):
    data = _data_dir(cfg, out)
    manifest = _manifest(data)
    inf = Path(out) / "infer"
    thresholds = read_thresholds(_train_dir(out) / "thresholds.tsv")
    ids = manifest.ids("test")
    probs = []
    for sid in ids:
        path = inf / f"{sid}_prob.fmap"
        if not path.exists():
            raise DataError(f"missing inference output {path}; run 'octaseg infer' first")
        probs.append(read_fmap(path))
    d = _prepare_dir(Path(out) / "eval", force)
    _snapshot(d, cfg)
    for k, target in enumerate(TARGETS[cfg.task], 1):
        gts = [read_mask(data / f"{sid}_{target}.pgm") for sid in ids]
        rep = evaluate_split([p[..., k] for p in probs], gts, thresholds[k - 1], ids)
        atomic_write(d / f"report_{target}.csv", rep.to_csv().encode())
        atomic_write(d / f"report_{target}.txt", rep.to_text().encode())
        print(rep.to_text(), end="")


def cmd_project(cfg, out, force, sample_id, octa500=None, layout=None):
    if octa500:
        sample = load_octa500_sample(octa500, sample_id, read_layout(layout) if layout else None)
    else:
        sample = load_sample(_data_dir(cfg, out), sample_id)
    d = _prepare_dir(Path(out) / "project" / sample_id, force)
    _snapshot(d, cfg)
    for kind, m in generate_all(sample.oct, sample.octa, sample.surfaces).items():
        write_pgm(d / f"{sample_id}_{kind}.pgm", to_u8(m.data))
        write_fmap(d / f"{sample_id}_{kind}.fmap", m.data)
    print(f"wrote B1-B6 for {sample_id} to {d}")


def cmd_verify(cfg, out, force, corrupt=None):
    t0 = time.perf_counter()
    try:
        checks = verify_mod.run_all(0, corrupt)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    elapsed = time.perf_counter() - t0
    lines = [c.line() for c in checks]
    failed = [c for c in checks if not c.passed]
    lines.append(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {elapsed:.1f}s")
    if failed:
        lines.append("failed: " + ", ".join(c.name for c in failed))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out:
        d = _prepare_dir(Path(out) / "verify", force)
        _snapshot(d, cfg)
        atomic_write(d / "report.txt", text.encode())
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "gen":
            cmd_gen(cfg, args.out, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.force)
        elif args.command == "infer":
            cmd_infer(cfg, args.out, args.force, args.ids)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, args.force)
        elif args.command == "project":
            cmd_project(cfg, args.out, args.force, args.sample_id, args.octa500, args.layout)
        else:
            return cmd_verify(cfg, args.out, args.force, args.corrupt_backward)
    except (ConfigError, UsageError) as exc:
        print(f"octaseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"octaseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
