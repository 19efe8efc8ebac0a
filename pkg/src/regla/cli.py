"""Command-line entry point: ``regla <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 output not writable, 4 input parse error, 5 missing tensor data.
"""

from __future__ import annotations

import argparse
import collections
import csv
import sys

import numpy as np

from . import bench as BN
from . import verify
from .attention import DEFAULT_EPSILON
from .distill import ProjectionHead, TeacherFeatures, init_heads, multi_teacher_loss
from .errors import AlignmentError, ConfigurationError
from .model import VARIANTS, ModelConfig, build, count_params, forward, stage_resolutions
from .serialization import FormatError, load_tensors, read_config, read_ppm, save_tensors

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_WRITE, EXIT_PARSE, EXIT_MISSING = range(6)

DTYPES = {"f32": np.float32, "f64": np.float64}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit_rows(out, header, rows, fmt):
    if fmt == "csv":
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        out.write("  ".join(str(x).rjust(n) for x, n in zip(row, widths)) + "\n")


def _model_config(args) -> tuple[ModelConfig, int]:
    if getattr(args, "config", None):
        try:
            config, seed = read_config(args.config)
        except OSError as exc:
            raise CliError(EXIT_PARSE, f"cannot read config: {exc}") from exc
        except FormatError as exc:
            raise CliError(EXIT_PARSE, str(exc)) from exc
        return config, seed if args.seed is None else args.seed
    return ModelConfig.from_variant(args.variant), args.seed or 0


# --------------------------------------------------------------------------


def cmd_describe(args, out) -> int:
    config, seed = _model_config(args)
    model = build(config, seed=seed)
    total, breakdown = count_params(model)
    flops = BN.model_flops(config, args.resolution)
    res = stage_resolutions(args.resolution)
    header = ["stage", "resolution", "blocks", "channels", "params", "flops"]
    rows = [["stem", res[0], "-", config.channels[0], breakdown["stem"], flops["stem"]]]
    for i in range(4):
        rows.append([f"stage{i + 1}", res[i], config.blocks[i], config.channels[i],
                     breakdown[f"stage{i + 1}"], flops[f"stage{i + 1}"]])
    rows.append(["head", 1, "-", config.num_classes, breakdown["head"], flops["head"]])
    rows.append(["total", args.resolution, sum(config.blocks), "-", total, flops["total"]])
    if args.format == "table":
        out.write(f"variant {config.variant}  blocks {list(config.blocks)}  channels {list(config.channels)}"
                  f"  gate {config.gate_variant.value}  post_attn {config.post_attn}\n")
    _emit_rows(out, header, rows, args.format)
    if args.format == "table":
        out.write(f"params {total / 1e6:.2f}M  flops@{args.resolution} {flops['total'] / 1e9:.3f}G\n")
    return EXIT_OK


def cmd_equiv(args, out) -> int:
    if args.trials < 1:
        raise CliError(EXIT_USAGE, "--trials must be >= 1")
    report = verify.equivalence_trials(args.seed or 0, args.trials, args.epsilon, DTYPES[args.precision])
    worst = report.worst
    out.write(f"trials {len(report.trials)}  tolerance {report.tolerance:g}\n")
    out.write(f"worst relative error {worst.error!r} at N={worst.n} d={worst.d} (trial {worst.trial})\n")
    if report.passed:
        out.write("PASS\n")
        return EXIT_OK
    first = report.failures[0]
    out.write(f"FAIL {len(report.failures)} trial(s); first failing shape N={first.n} d={first.d} "
              f"trial {first.trial}{' (all-negative Q)' if first.negative_q else ''}\n")
    out.write(f"reproduce with: regla equiv --seed {args.seed or 0} --trials {first.trial + 1}\n")
    return EXIT_VERIFY


def cmd_gradcheck(args, out) -> int:
    seed = args.seed or 0
    results = verify.run_gradcheck(args.scope, range(seed, seed + args.repeats))
    worst: dict[tuple[str, str], float] = collections.OrderedDict()
    for r in results:
        key = (r.scope, r.unit)
        worst[key] = max(worst.get(key, 0.0), r.error)
    rows = [[scope, unit, f"{err:.3e}", "PASS" if err <= verify.GRAD_TOL else "FAIL"]
            for (scope, unit), err in worst.items()]
    _emit_rows(out, ["scope", "unit", "max_rel_error", "status"], rows, args.format)
    failed = [r[1] for r in rows if r[3] == "FAIL"]
    if failed:
        out.write(f"FAIL: {', '.join(failed)}\n")
        return EXIT_VERIFY
    out.write(f"PASS: {len(rows)} unit(s) within {verify.GRAD_TOL:g} (float64)\n")
    return EXIT_OK


def cmd_bench(args, out) -> int:
    try:
        n_values = [int(s) for s in args.n.split(",")]
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad --n list: {args.n}") from exc
    try:
        with open(args.out, "w", encoding="utf-8"):
            pass
    except OSError as exc:
        raise CliError(EXIT_WRITE, f"cannot write {args.out}: {exc}") from exc

    mechanisms = BN.MECHANISMS if args.mechanism == "both" else (args.mechanism,)
    scale = 0.1 if args.strict else 10.0 if args.loose else 1.0
    records, ok = [], True
    for mech in mechanisms:
        recs = BN.sweep_attention(mech, n_values, args.d, args.repeats, seed=args.seed or 0)
        records.extend(recs)
        fit = BN.fit_loglog_slope(recs)
        flop_fit = BN.fit_loglog_slope([(r.N, r.flops) for r in recs])
        passed = BN.slope_verdict(mech, fit, scale)
        ok &= passed
        center, half = BN.SLOPE_BANDS[mech]
        out.write(f"{mech}: flop exponent {flop_fit.slope:.6f}\n")
        out.write(f"{mech}: wall-time slope {fit.slope:.3f} (R^2 {fit.r2:.4f}) band "
                  f"[{center - half * scale:.2f}, {center + half * scale:.2f}] -> {'PASS' if passed else 'FAIL'}\n")
    try:
        rows = BN.write_csv(records, args.out)
    except OSError as exc:
        raise CliError(EXIT_WRITE, f"cannot write {args.out}: {exc}") from exc
    out.write(f"wrote {rows} rows to {args.out}\n")
    return EXIT_OK if ok else EXIT_VERIFY


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(s) for s in text.lower().split("x"))
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"--random expects HxW, got {text!r}") from exc
    return h, w


def cmd_forward(args, out) -> int:
    config, seed = _model_config(args)
    dtype = DTYPES[args.precision]
    if args.image:
        try:
            x = read_ppm(args.image)
        except OSError as exc:
            raise CliError(EXIT_PARSE, f"cannot read image: {exc}") from exc
        except FormatError as exc:
            raise CliError(EXIT_PARSE, f"malformed PPM: {exc}") from exc
    else:
        h, w = _parse_hw(args.random or "224x224")
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise CliError(EXIT_USAGE, f"resolution {h}x{w} is not divisible by 32")
        x = np.random.default_rng(seed).random((3, h, w))
    if x.shape[1] % 32 or x.shape[2] % 32:
        raise CliError(EXIT_USAGE, f"image size {x.shape[1]}x{x.shape[2]} is not divisible by 32")

    model = build(config, seed=seed, dtype=dtype)
    if args.weights:
        try:
            model.load_state(load_tensors(args.weights))
        except OSError as exc:
            raise CliError(EXIT_PARSE, f"cannot read weights: {exc}") from exc
        except FormatError as exc:
            raise CliError(EXIT_PARSE, str(exc)) from exc
        except KeyError as exc:
            raise CliError(EXIT_MISSING, f"missing tensor {exc.args[0]}") from exc
    logits, features = forward(model, x.astype(dtype))

    k = min(args.top_k, logits.shape[0])
    top = np.argsort(-logits, kind="stable")[:k]
    out.write(f"variant {config.variant} input {x.shape[1]}x{x.shape[2]} classes {logits.shape[0]}\n")
    _emit_rows(out, ["rank", "class", "logit"], [[i + 1, int(c), f"{logits[c]:.9g}"] for i, c in enumerate(top)],
               args.format)
    if args.dump_features:
        tensors = {f"stage{i + 1}": f for i, f in enumerate(features)}
        tensors["logits"] = logits
        try:
            save_tensors(args.dump_features, tensors)
        except OSError as exc:
            raise CliError(EXIT_WRITE, f"cannot write {args.dump_features}: {exc}") from exc
        out.write(f"wrote stage features to {args.dump_features}\n")
    return EXIT_OK


def _load(path):
    try:
        return load_tensors(path)
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"cannot read {path}: {exc}") from exc
    except FormatError as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from exc


def _require(tensors, name, path):
    if name not in tensors:
        raise CliError(EXIT_MISSING, f"{path}: missing tensor {name!r}")
    return tensors[name].astype(np.float64)


def load_teachers(path) -> list[TeacherFeatures]:
    tensors = _load(path)
    ids = sorted({n.split("/")[1] for n in tensors if n.startswith("teacher/") and n.count("/") == 2})
    if not ids:
        raise CliError(EXIT_MISSING, f"{path}: missing tensor 'teacher/<id>/patch'")
    return [TeacherFeatures(i, _require(tensors, f"teacher/{i}/patch", path),
                            _require(tensors, f"teacher/{i}/cls", path)) for i in ids]


def load_student(path) -> list[np.ndarray]:
    tensors = _load(path)
    names = sorted((n for n in tensors if n.startswith("stage")), key=lambda n: int(n[5:]))
    if not names:
        raise CliError(EXIT_MISSING, f"{path}: missing tensor 'stage1'")
    for i, n in enumerate(names, 1):
        if n != f"stage{i}":
            raise CliError(EXIT_MISSING, f"{path}: missing tensor 'stage{i}'")
    return [_require(tensors, n, path) for n in names]


def cmd_distill_loss(args, out) -> int:
    student = load_student(args.student)
    teachers = [t for p in args.teachers for t in load_teachers(p)]
    channels = [f.shape[0] for f in student]
    if args.heads:
        tensors = _load(args.heads)
        heads = {}
        for t in teachers:
            try:
                heads[t.teacher_id] = ProjectionHead.from_tensors(
                    {k: v.astype(np.float64) for k, v in tensors.items()}, t.teacher_id, len(student))
            except KeyError as exc:
                raise CliError(EXIT_MISSING, f"{args.heads}: missing tensor {exc.args[0]!r}") from exc
    else:
        heads = init_heads(channels, teachers, seed=args.seed or 0)
    grid = _parse_hw(args.grid) if args.grid else None
    try:
        loss = multi_teacher_loss(student, teachers, heads, grid)
    except AlignmentError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    rows = [[tid, repr(float(v))] for tid, v in loss.per_teacher.items()]
    rows.append(["total", repr(float(loss.total))])
    _emit_rows(out, ["teacher", "loss"], rows, args.format)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--format", choices=("table", "csv"), default="table")

    parser = argparse.ArgumentParser(prog="regla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("describe", parents=[common], help="stage table with parameter and FLOP counts")
    p.add_argument("variant", choices=list(VARIANTS), type=str.upper)
    p.add_argument("--config", help="key=value config file overriding the variant defaults")
    p.add_argument("--resolution", type=int, default=224)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("equiv", parents=[common], help="factored vs naive linear attention")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--precision", choices=tuple(DTYPES), default="f64")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks (float64)")
    p.add_argument("scope", choices=verify.SCOPES)
    p.add_argument("--repeats", type=int, default=1, help="number of consecutive seeds to check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="attention wall-time scaling sweep")
    p.add_argument("--n", default="256,1024,4096,16384", help="comma-separated token counts")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--mechanism", choices=("both", *BN.MECHANISMS), default="both")
    p.add_argument("--out", default="bench.csv")
    band = p.add_mutually_exclusive_group()
    band.add_argument("--strict", action="store_true", help="shrink slope bands x0.1")
    band.add_argument("--loose", action="store_true", help="widen slope bands x10")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forward", parents=[common], help="run a network on one image")
    p.add_argument("variant", choices=list(VARIANTS), type=str.upper)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="binary PPM (P6) input")
    src.add_argument("--random", metavar="HxW", help="random input of this size (default 224x224)")
    p.add_argument("--config")
    p.add_argument("--weights", help="tensor file with model weights")
    p.add_argument("--precision", choices=tuple(DTYPES), default="f32")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--dump-features", metavar="PATH")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("distill-loss", parents=[common], help="multi-teacher distillation loss")
    p.add_argument("--student", required=True, help="tensor file with stage1..stageK features")
    p.add_argument("--teachers", required=True, nargs="+", help="tensor file(s) with teacher/<id>/patch|cls")
    p.add_argument("--heads", help="tensor file with head/<id>/... projections (default: init from --seed)")
    p.add_argument("--grid", metavar="HxW", help="token grid (default: stage-3 resolution)")
    p.set_defaults(func=cmd_distill_loss)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except CliError as exc:
        print(f"regla: {exc}", file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"regla: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
