"""Command-line front end: ``generate``, ``demo``, ``verify`` and ``bench``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

import argparse
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spsmask import checks
from spsmask.config import load_config
from spsmask.errors import InputError, InvariantError
from spsmask.flops import count_flops
from spsmask.oracle import dense_pipeline_oracle
from spsmask.params import load_tensors, save_tensors
from spsmask.pipeline import init_weights, run_pipeline, weights_from_tensors
from spsmask.records import format_pgm, write_mask_records
from spsmask.scene import boundary_scores, generate_scene, load_scene, save_scene

DEFAULT_FRACTIONS = (0.05, 0.1, 0.25, 0.5, 1.0)


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory '{out}': {exc.strerror}") from exc
    return out


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write '{path}': {exc.strerror}") from exc


def load_inputs(scene_path, config_path=None, weights_path=None, seed=None):
    scene = load_scene(scene_path)
    config = load_config(config_path)
    if seed is not None:
        config = config.replace(seed=seed)
    if scene.channels != config.backbone_channels:
        raise InputError(
            f"scene pyramid has {scene.channels} channels but config backbone_channels="
            f"{config.backbone_channels}"
        )
    if weights_path is None:
        weights = init_weights(config)
    else:
        weights = weights_from_tensors(load_tensors(weights_path), config)
    return scene, config, weights


# -- demo ----------------------------------------------------------------------

def run_demo(scene, config, weights):
    rois = scene.rois(config.feature_size)
    return run_pipeline(scene.pyramid(), rois, weights, config, image_size=scene.image_size)


def cmd_demo(args):
    scene, config, weights = load_inputs(args.scene, args.config, args.weights, args.seed)
    result = run_demo(scene, config, weights)
    out = _out_dir(args.out)
    masks = result.masks
    write_mask_records(out / "masks.txt", masks.pasted, masks.s_seg, config.mask_threshold)
    if args.dump_stages:
        dump = _out_dir(out / "stages")
        for r in range(len(scene.instances)):
            for m in masks.masks:
                res = m.shape[-1]
                _write(dump / f"roi{r}_{res}.pgm", format_pgm(m[r], f"roi {r} mask {res}x{res}"))
            _write(dump / f"roi{r}_pasted.pgm", format_pgm(masks.pasted[r], f"roi {r} pasted"))
    if args.save_weights:
        save_tensors(args.save_weights, weights.tensors())
    for i, s in enumerate(masks.s_seg):
        print(f"instance {i}: s_seg={s:.6f} foreground_px={int((masks.pasted[i] > config.mask_threshold).sum())}")
    print(f"wrote {out / 'masks.txt'}")
    return 0


# -- generate ------------------------------------------------------------------

def cmd_generate(args):
    scene = generate_scene(args.seed, args.n_instances, (args.image_size, args.image_size), args.channels)
    out = _out_dir(args.out)
    path = out / "scene.json"
    save_scene(scene, path)
    print(f"wrote {path} ({len(scene.instances)} instances, {args.image_size}x{args.image_size})")
    return 0


# -- verify --------------------------------------------------------------------

def run_verify(seed, trials, inject_fault=False):
    """Run every randomised property ``trials`` times; returns (counts, failures)."""
    counts, failures = {}, []

    def record(name, trial, ok, detail=""):
        passed, total = counts.get(name, (0, 0))
        counts[name] = (passed + int(ok), total + 1)
        if not ok:
            failures.append((name, trial, detail))

    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        for integer in (False, True):
            sps = checks.random_sps(rng, integer=integer)
            for name, fn in checks.OP_CHECKS.items():
                label = f"{name}{'[int]' if integer else ''}"
                ok, err = fn(rng, sps, integer)
                record(label, t, ok, f"max_rel_err={err:.3e}")
        ok, err = checks.check_pipeline(rng)
        record("pipeline_vs_sparse_on_dense", t, ok, f"max_rel_err={err:.3e}")
        try:
            checks.check_sequence(rng, inject_fault=inject_fault)
            record("spsmap_validator", t, True)
        except InvariantError as exc:
            record("spsmap_validator", t, False, f"violated {exc.invariant}: {exc}")
    return counts, failures


def cmd_verify(args):
    start = time.perf_counter()
    counts, failures = run_verify(args.seed, args.trials, args.inject_fault)
    for name, (passed, total) in counts.items():
        print(f"{'PASS' if passed == total else 'FAIL'} {name}: {passed}/{total}")
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    if failures:
        first = min(failures, key=lambda f: f[1])
        print(f"{len(failures)} failure(s); minimal reproducing case: property={first[0]} "
              f"trial={first[1]} rng_seed=[{args.seed}, {first[1]}] {first[2]}")
        return 1
    return 0


# -- bench ---------------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    fraction: float
    ks: tuple
    report: object
    dense_check_macs: int
    sparse_seconds: float
    dense_seconds: float


def stage_budgets(fraction, n_rois):
    """Per-stage top-K: ceil(fraction * parent cells) on the 14, 28 and 56 grids."""
    return tuple(math.ceil(fraction * n_rois * g * g) for g in (14, 28, 56))


def run_bench(scene, config, weights, fractions=DEFAULT_FRACTIONS):
    pyramid = scene.pyramid()
    rois = scene.rois(config.feature_size)
    gts = scene.gts()
    boxes = [r.box for r in rois]

    def score_fn(s, grid_shape):
        return boundary_scores(gts, boxes, grid_shape)

    rows = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise InputError(f"active fractions must lie in (0, 1], got {f}")
        ks = stage_budgets(f, len(rois))
        trace = []
        t0 = time.perf_counter()
        run_pipeline(pyramid, rois, weights, config, score_fn=score_fn, trace=trace, paste=False, ks=ks)
        t1 = time.perf_counter()
        dense_trace = []
        dense_pipeline_oracle(pyramid, rois, weights, trace=dense_trace)
        t2 = time.perf_counter()
        report = count_flops(trace)
        rows.append(BenchRow(f, ks, report, count_flops(dense_trace).dense_macs, t1 - t0, t2 - t1))
    return rows


def format_bench(rows):
    lines = [
        "# spsmask-bench v1 (MACs; 1 MAC = 2 FLOPs)",
        "fraction\tk_stage1\tk_stage2\tk_stage3\tsparse_macs\tdense_macs\tdense_oracle_macs"
        "\tratio\tmodule_ratio\tmodule_conv_ratio\tgather_elems",
    ]
    for r in rows:
        rep = r.report
        lines.append(
            f"{r.fraction:g}\t{r.ks[0]}\t{r.ks[1]}\t{r.ks[2]}\t{rep.sparse_macs}\t{rep.dense_macs}"
            f"\t{r.dense_check_macs}\t{rep.ratio:.6f}\t{rep.module_ratio:.6f}"
            f"\t{rep.module_conv_ratio:.6f}\t{rep.gather_elems}"
        )
    return "\n".join(lines) + "\n"


def format_timing(rows):
    lines = ["# non-normative wall-clock seconds", "fraction\tsparse_s\tdense_s\tspeedup"]
    for r in rows:
        lines.append(f"{r.fraction:g}\t{r.sparse_seconds:.3f}\t{r.dense_seconds:.3f}"
                     f"\t{r.dense_seconds / max(r.sparse_seconds, 1e-9):.2f}")
    return "\n".join(lines) + "\n"


def parse_fractions(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid fraction list {text!r}") from None


def cmd_bench(args):
    scene, config, weights = load_inputs(args.scene, args.config, args.weights, args.seed)
    rows = run_bench(scene, config, weights, args.fractions)
    out = _out_dir(args.out)
    table = format_bench(rows)
    _write(out / "bench_flops.tsv", table)
    for r in rows:
        _write(out / f"flops_f{r.fraction:g}.txt", r.report.format())
    timing = format_timing(rows)
    _write(out / "bench_timing.tsv", timing)
    sys.stdout.write(table)
    sys.stdout.write(timing)
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="spsmask", description="Sparse mask-head scenes, demo, verification and benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-instances", type=int, default=3)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--channels", type=int, default=256, help="backbone channels C_B")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_generate)

    for name, func, text in (("demo", cmd_demo, "run the head on a scene"),
                             ("bench", cmd_bench, "sparse vs dense FLOP and timing sweep")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--scene", required=True, help="scene JSON written by generate")
        p.add_argument("--config", help="pipeline config JSON (defaults when omitted)")
        p.add_argument("--weights", help="weights text file (seeded init when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".")
        p.set_defaults(func=func)
        if name == "demo":
            p.add_argument("--dump-stages", action="store_true", help="write per-stage PGM masks")
            p.add_argument("--save-weights", help="write the weights used to this file")
        else:
            p.add_argument("--fractions", type=parse_fractions, default=DEFAULT_FRACTIONS,
                           help="comma-separated active fractions in (0, 1]")

    p = sub.add_parser("verify", help="randomised oracle-equivalence and invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "generate" and args.n_instances < 1:
        parser.error("--n-instances must be >= 1")
    if args.command == "verify" and args.trials < 1:
        parser.error("--trials must be >= 1")
    try:
        return args.func(args)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
