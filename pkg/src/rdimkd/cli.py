"""Command-line driver: ``rdimkd {train-teacher,baseline,distill,ablate,analyze}``.

Exit codes: 0 success, 1 usage/parse error, 2 validation error,
3 training divergence.  Every command writes ``config.normalized.ini`` and a
``manifest.txt`` (relative path + sha256 of every artifact) under ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import analysis
from .config import ExperimentConfig, dump_config, parse_config, with_overrides
from .exceptions import DimensionMismatch, Diverged, NotOrthonormal, ParseError, RdimKDError, ValidationError
from .nets import forward, load_network, save_network
from .projection import METHOD_NAMES, load_projector, save_projector
from .train import distill_student, generate_dataset, metrics_csv, run_ablation_grid, train_teacher

log = logging.getLogger("rdimkd")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def conv(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return conv


def _method(name):
    if name not in METHOD_NAMES:
        raise argparse.ArgumentTypeError(f"unknown method {name!r}; valid names: {', '.join(METHOD_NAMES)}")
    return name


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdimkd", description="Subspace-projection knowledge distillation on toy tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", help="output directory (default: experiment.output_dir)")
        if seed:
            sp.add_argument("--seed", type=int, help="trial seed (falls back to $RDIMKD_SEED, then the config)")

    sp = sub.add_parser("train-teacher", help="pretrain the teacher network")
    common(sp)

    sp = sub.add_parser("baseline", help="train the student without distillation")
    common(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("distill", help="train the student with subspace KD")
    common(sp)
    sp.add_argument("--teacher", help="teacher checkpoint (default: experiment.teacher_checkpoint)")
    sp.add_argument("--method", type=_method, help=f"one of: {', '.join(METHOD_NAMES)}")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--r", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--mask")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("ablate", help="method x r x alpha x mask grid over paired seeds")
    common(sp)
    sp.add_argument("--teacher")
    sp.add_argument("--methods", type=_csv_list(str), help="comma list; 'baseline' = no KD")
    sp.add_argument("--r", dest="rs", type=_csv_list(float))
    sp.add_argument("--alphas", type=_csv_list(float))
    sp.add_argument("--masks", type=_csv_list(str))
    sp.add_argument("--beta", type=float)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--on-diverge", choices=("raise", "record"), default="raise",
                    help="'record' keeps going and counts diverged trials in grid.csv")

    sp = sub.add_parser("analyze", help="subspace spectra and covariance grids of a checkpoint")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--projector", action="append", required=True,
                    help="projector file; repeat once per tap, or give one for all taps")
    sp.add_argument("--dataset-seed", type=int)
    return p


# -- helpers ------------------------------------------------------------------------


def _load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("RDIMKD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"RDIMKD_SEED must be an integer, got {env!r}") from None
    return None


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path):
    lines = []
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt"):
        lines.append(f"{path.relative_to(out).as_posix()} {_sha256(path)}")
    _write(out / "manifest.txt", "\n".join(lines) + "\n")


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _teacher_path(args, cfg) -> Path:
    path = getattr(args, "teacher", None) or cfg.teacher_checkpoint
    if not path:
        raise UsageError("no teacher checkpoint given (--teacher or experiment.teacher_checkpoint)")
    if not Path(path).is_file():
        raise UsageError(f"teacher checkpoint {path} does not exist")
    return Path(path)


def _trial_seeds(cfg):
    return [cfg.train.seed + t for t in range(cfg.trials)]


def _run_trial(job):
    cfg, teacher, source, seed, baseline = job
    data = generate_dataset(cfg.dataset)
    train = replace(cfg.train, seed=seed)
    distill = None if baseline else replace(cfg.distill, seed=seed)
    return distill_student(cfg.student_specs(), teacher, data, train, distill, inherit=cfg.student.inherit,
                           source=source)


def _run_trials(cfg, teacher, source, baseline, jobs):
    work = [(cfg, teacher, source, s, baseline) for s in _trial_seeds(cfg)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_trial, work))
    return [_run_trial(w) for w in work]


def _write_trials(out: Path, results):
    summary = ["trial_seed,test_accuracy"]
    for res in results:
        tdir = out / f"trial_{res.seed}"
        _write(tdir / "metrics.csv", metrics_csv([res]))
        save_network(res.student, _mk(tdir / "student.ckpt"))
        for i, proj in enumerate(res.projectors):
            save_projector(proj, tdir / f"projector_tap{i}.txt")
        summary.append(f"{res.seed},{res.test_accuracy!r}")
    _write(out / "metrics.csv", metrics_csv(results))
    _write(out / "summary.csv", "\n".join(summary) + "\n")


def _mk(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _ident(path: Path) -> str:
    return f"{path.name}#{_sha256(path)[:12]}"


# -- subcommands --------------------------------------------------------------------


def cmd_train_teacher(args):
    cfg = _load_config(args.config)
    seed = _seed(args)
    if seed is not None:
        cfg = replace(cfg, teacher=replace(cfg.teacher, seed=seed))
    out = _out_dir(args, cfg)
    data = generate_dataset(cfg.dataset)
    net, metrics = train_teacher(cfg.teacher_specs(), data, replace(cfg.train, seed=cfg.teacher.seed), with_metrics=True)
    save_network(net, out / "teacher.ckpt")
    from .train import TrialResult

    _write(out / "teacher_metrics.csv", metrics_csv([TrialResult(metrics, net.meta["test_accuracy"], cfg.teacher.seed)]))
    _write(out / "config.normalized.ini", dump_config(cfg))
    write_manifest(out)
    log.info("teacher test accuracy %.4f", net.meta["test_accuracy"])
    return EXIT_OK


def cmd_baseline(args):
    cfg = with_overrides(_load_config(args.config), seed=_seed(args), trials=args.trials)
    out = _out_dir(args, cfg)
    results = _run_trials(cfg, None, None, True, args.jobs)
    _write_trials(out, results)
    _write(out / "config.normalized.ini", dump_config(cfg))
    write_manifest(out)
    return EXIT_OK


def cmd_distill(args):
    cfg = _load_config(args.config)
    cfg = with_overrides(cfg, method=args.method, alpha=args.alpha, r=args.r, beta=args.beta, mask=args.mask,
                         seed=_seed(args), trials=args.trials)
    tpath = _teacher_path(args, cfg)
    teacher = load_network(tpath)
    out = _out_dir(args, cfg)
    results = _run_trials(cfg, teacher, _ident(tpath), False, args.jobs)
    _write_trials(out, results)
    _write(out / "config.normalized.ini", dump_config(cfg))
    write_manifest(out)
    return EXIT_OK


def cmd_ablate(args):
    cfg = with_overrides(_load_config(args.config), seed=_seed(args), trials=args.trials, beta=args.beta)
    teacher = load_network(_teacher_path(args, cfg))
    out = _out_dir(args, cfg)
    methods = args.methods or [cfg.distill.method]
    for m in methods:
        if m != "baseline" and m not in METHOD_NAMES:
            raise UsageError(f"unknown method {m!r}; valid names: baseline, {', '.join(METHOD_NAMES)}")
    masks = args.masks or ["".join("1" if b else "0" for b in cfg.distill.mask)]
    for mk in masks:
        if len(mk) != len(cfg.student.taps):
            raise ValidationError(f"mask {mk!r} does not match {len(cfg.student.taps)} student taps")
    grid = run_ablation_grid(
        teacher, cfg.student_specs(), generate_dataset(cfg.dataset), cfg.train,
        methods, args.rs or [cfg.distill.r], args.alphas or [cfg.distill.alpha], masks,
        _trial_seeds(cfg), beta=cfg.distill.beta, jobs=args.jobs, on_diverge=args.on_diverge,
    )
    _write(out / "grid.csv", grid.grid_csv())
    _write(out / "trials.csv", grid.trials_csv())
    _write(out / "config.normalized.ini", dump_config(cfg))
    write_manifest(out)
    return EXIT_OK


def cmd_analyze(args):
    cfg = with_overrides(_load_config(args.config), dataset_seed=args.dataset_seed)
    ckpt = Path(args.checkpoint)
    proj_paths = [Path(p) for p in args.projector]
    for p in [ckpt, *proj_paths]:
        if not p.is_file():
            raise UsageError(f"{p} does not exist")
    net = load_network(ckpt)
    projectors = [load_projector(p) for p in proj_paths]
    n_taps = len(net.tap_indices)
    if len(projectors) == 1:
        projectors, proj_paths = projectors * n_taps, proj_paths * n_taps
    if len(projectors) != n_taps:
        raise DimensionMismatch(f"{len(projectors)} projectors for {n_taps} taps")
    data = generate_dataset(cfg.dataset)
    _, taps = forward(net, data.x_train)
    out = _out_dir(args, cfg)
    for i, (feats, proj, ppath) in enumerate(zip(taps, projectors, proj_paths)):
        if proj.c != feats.shape[1]:
            raise DimensionMismatch(f"tap {i} has width {feats.shape[1]} but projector {ppath.name} expects {proj.c}")
        header = f"checkpoint={_ident(ckpt)} projector={_ident(ppath)} tap={i}"
        full = analysis.spectrum(feats, header)
        inside, outside = analysis.subspace_split_spectra(feats, proj.k, header)
        _write(out / f"spectrum_tap{i}.csv", analysis.spectrum_csv([full, inside, outside], header))
        _write(out / f"heatmap_tap{i}.csv", analysis.heatmap_csv(analysis.covariance_heatmap(feats, proj.k), header))
    _write(out / "config.normalized.ini", dump_config(cfg))
    write_manifest(out)
    return EXIT_OK


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "baseline": cmd_baseline,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ParseError) as exc:
        print(f"rdimkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Diverged as exc:
        print(f"rdimkd: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, DimensionMismatch, NotOrthonormal, RdimKDError) as exc:
        print(f"rdimkd: invalid: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
