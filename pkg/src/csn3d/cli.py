"""``csn3d`` command line: cost reports, sweeps, gradient checks, training,
evaluation, filter pictures and synthetic data.

Exit codes: 0 success, 1 invalid input, 2 a check or tolerance failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

from . import analyzer, gradcheck
from .data import SampleSpec, SynthTaskSpec, gen_dataset, load_dataset, save_dataset, split_dataset
from .tensor import ShapeError
from .trainer import TrainConfig, evaluate, train
from .viz import viz_filters
from .zoo import BlockKind, FormatError, Model, load_model_weights, named_arch, save_model, tiny_arch

log = logging.getLogger("csn3d")

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for check failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def parse_extents(text: str, n: int = 3) -> tuple[int, ...]:
    """``"8x224x224"`` -> ``(8, 224, 224)``."""
    try:
        vals = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"malformed shape {text!r}; expected {'x'.join(['N'] * n)}") from None
    if len(vals) != n or min(vals) < 1:
        raise UsageError(f"malformed shape {text!r}; expected {n} positive extents like {'x'.join(['8'] * n)}")
    return vals


def _groups(text: str | None):
    if not text:
        return None
    try:
        return [int(g) for g in text.split(",")]
    except ValueError:
        raise UsageError(f"malformed group list {text!r}") from None


def _emit(text: str, out: str | None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _sample(args) -> SampleSpec:
    return SampleSpec(args.clip_len, args.skip, (args.scale_min, args.scale_max), args.crop)


def _train_config(args, **over) -> TrainConfig:
    kw = dict(
        base_lr=args.lr,
        warmup_epochs=args.warmup_epochs,
        total_epochs=args.epochs,
        iters_per_epoch=args.iters_per_epoch,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    kw.update(over)
    return TrainConfig(**kw)


def _num_classes(videos) -> int:
    return max(v.label for v in videos) + 1


# ----------------------------------------------------------------------------
# analyze


def load_table2() -> dict:
    return json.loads(resources.files("csn3d").joinpath("refdata/table2.json").read_text())


def check_table2(archs=None) -> list[tuple[str, str, float, float, float, bool]]:
    """Compare analyzer totals against the reference cost table.

    Returns ``(arch, metric, ours, reference, rel_err, ok)`` per comparison.
    """
    ref = load_table2()
    rows = {r["arch"]: r for r in ref["rows"]}
    if archs:
        unknown = [a for a in archs if a not in rows]
        if unknown:
            raise UsageError(f"no reference values for {unknown}; known: {sorted(rows)}")
        rows = {a: rows[a] for a in archs}
    out = []
    for name, r in rows.items():
        rep = analyzer.model_report(named_arch(name, ref["num_classes"]), tuple(ref["input"]))
        t = rep.totals
        for metric, scale, key in (("interactions", 1e9, "interactions_e9"), ("params", 1e6, "params_e6"),
                                   ("flops", 1e9, "flops_e9")):
            ours = t[metric] / scale
            err = abs(ours - r[key]) / r[key]
            out.append((name, metric, ours, r[key], err, err <= ref["tolerance"][metric]))
    return out


def cmd_analyze(args) -> int:
    if args.check:
        results = check_table2([args.arch] if args.arch else None)
        for name, metric, ours, refv, err, ok in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name:<14s} {metric:<12s} ours={ours:9.4f} ref={refv:7.2f} err={err:6.2%}")
        return EXIT_OK if all(r[-1] for r in results) else EXIT_CHECK
    if not args.arch:
        raise UsageError("--arch is required unless --check is given")
    t, h, w = parse_extents(args.input)
    rep = analyzer.model_report(named_arch(args.arch, args.classes), (args.batch, 3, t, h, w), args.voxels,
                                args.include_bn)
    _emit(rep.to_json() if args.format == "json" else analyzer.report_csv(rep), args.out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# sweep


def _sweep_accuracy(kind: BlockKind, train_set, test_set, args) -> float | None:
    arch = tiny_arch(kind, num_classes=_num_classes(train_set + test_set), frames=args.clip_len)
    try:
        model = Model(arch, seed=args.seed)
    except ValueError as err:
        log.warning("no accuracy for %s: %s", kind, err)
        return None
    sample = _sample(args)
    model, _ = train(model, train_set, _train_config(args), sample)
    return evaluate(model, test_set, sample, args.eval_clips)[1]


def cmd_sweep(args) -> int:
    t, h, w = parse_extents(args.input)
    base = named_arch(args.arch, args.classes)
    rows = analyzer.sweep_stats(base, args.axis, (1, 3, t, h, w), _groups(args.groups))
    if args.train:
        videos = load_dataset(args.data) if args.data else gen_dataset(SynthTaskSpec(seed=args.seed))
        train_set, test_set = split_dataset(videos, args.holdout, args.seed)
        for r in rows:
            r.accuracy = _sweep_accuracy(BlockKind(r.block, r.groups), train_set, test_set, args)
    _emit(analyzer.sweep_csv(rows, with_accuracy=args.train), args.out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.scope, args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


# ----------------------------------------------------------------------------
# train / eval


def cmd_train(args) -> int:
    videos = load_dataset(args.data)
    train_set, test_set = split_dataset(videos, args.holdout, args.seed)
    classes = args.classes or _num_classes(videos)
    arch = named_arch(args.arch, classes, frames=args.clip_len)
    sample = _sample(args)
    out = Path(args.out_dir)
    cfg = _train_config(args, eval_every=args.eval_every, checkpoint_every=args.checkpoint_every,
                        checkpoint_dir=str(out / "checkpoints") if args.checkpoint_every else None)
    out.mkdir(parents=True, exist_ok=True)

    def progress(it, loss, lr):
        if (it + 1) % args.log_every == 0:
            log.info("iter %d  loss %.4f  lr %.5f", it + 1, loss, lr)

    model, history = train(Model(arch, seed=args.seed, workers=args.workers), train_set, cfg, sample,
                           eval_set=test_set, n_eval_clips=args.eval_clips, progress=progress)
    clip1, video1 = evaluate(model, test_set, sample, args.eval_clips)
    save_model(out / "model.csnw", model)
    (out / "history.csv").write_text(history.to_csv())
    (out / "history.json").write_text(history.to_json())
    run = {"arch": args.arch, "num_classes": classes, "train": asdict(cfg), "sample": asdict(sample),
           "holdout": args.holdout, "result": {"clip@1": clip1, "video@1": video1}}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(json.dumps(run["result"], sort_keys=True))
    return EXIT_OK


def _load_model(args, classes: int) -> Model:
    model = Model(named_arch(args.arch, classes, frames=args.clip_len), seed=args.seed, init=args.checkpoint is None)
    if args.checkpoint:
        load_model_weights(model, args.checkpoint)
    return model


def cmd_eval(args) -> int:
    videos = load_dataset(args.data)
    if args.split == "test":
        _, videos = split_dataset(videos, args.holdout, args.seed)
    model = _load_model(args, args.classes or _num_classes(videos))
    clip1, video1 = evaluate(model, videos, _sample(args), args.eval_clips)
    _emit(json.dumps({"clip@1": clip1, "video@1": video1, "videos": len(videos)}, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# viz-filters / gendata


def cmd_viz_filters(args) -> int:
    model = _load_model(args, args.classes)
    print(viz_filters(model, args.layer, args.out_dir, args.cols))
    return EXIT_OK


def cmd_gendata(args) -> int:
    spec = SynthTaskSpec(args.classes, args.clips_per_class, parse_extents(args.size), object_size=args.object_size,
                         noise=args.noise, seed=args.seed)
    save_dataset(args.out, gen_dataset(spec), spec)
    print(f"wrote {spec.num_classes * spec.clips_per_class} clips to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _add_sample(p):
    d = SampleSpec()
    p.add_argument("--clip-len", type=int, default=d.clip_len)
    p.add_argument("--skip", type=int, default=d.skip)
    p.add_argument("--scale-min", type=int, default=d.scale_range[0])
    p.add_argument("--scale-max", type=int, default=d.scale_range[1])
    p.add_argument("--crop", type=int, default=d.crop)
    p.add_argument("--eval-clips", type=int, default=10)


def _add_train(p):
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.base_lr)
    p.add_argument("--warmup-epochs", type=int, default=d.warmup_epochs)
    p.add_argument("--epochs", type=int, default=d.total_epochs)
    p.add_argument("--iters-per-epoch", type=int, default=d.iters_per_epoch)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--holdout", type=float, default=0.25)
    _add_sample(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csn3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of flag defaults (keys use underscores)")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = command("analyze", cmd_analyze, "per-layer parameter, FLOP and interaction report")
    p.add_argument("--arch")
    p.add_argument("--input", default="8x224x224", help="TxHxW")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--classes", type=int, default=400)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--voxels", choices=analyzer.VOXEL_CONVENTIONS, default="output")
    p.add_argument("--include-bn", action="store_true")
    p.add_argument("--check", choices=("table2",))
    p.add_argument("--out")

    p = command("sweep", cmd_sweep, "cost of block variants along one axis, as CSV")
    p.add_argument("--arch", default="bottleneck-16")
    p.add_argument("--axis", choices=analyzer.SWEEP_AXES, default="groups-3x3x3")
    p.add_argument("--groups", help="comma-separated group counts (default: powers of two)")
    p.add_argument("--input", default="8x224x224")
    p.add_argument("--classes", type=int, default=400)
    p.add_argument("--train", action="store_true", help="add desk-scale held-out video@1 per variant")
    p.add_argument("--data", help="dataset directory for --train (default: generated)")
    p.add_argument("--out")
    _add_train(p)

    p = command("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p.add_argument("scope", choices=("layers", "blocks", "tiny-model"))

    p = command("train", cmd_train, "train on a clip dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="tiny-ip-csn")
    p.add_argument("--classes", type=int, help="default: inferred from the labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--workers", type=int, default=1)
    _add_train(p)

    p = command("eval", cmd_eval, "clip@1 and video@1 of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", default="tiny-ip-csn")
    p.add_argument("--classes", type=int)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--out")
    _add_sample(p)

    p = command("viz-filters", cmd_viz_filters, "render conv1 or depthwise filters as PPM/PGM")
    p.add_argument("--arch", required=True)
    p.add_argument("--checkpoint", help="default: freshly initialized weights")
    p.add_argument("--classes", type=int, default=400)
    p.add_argument("--layer", default="conv1", help="conv1, a unit name, or comp_k")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--clip-len", type=int, default=8)

    p = command("gendata", cmd_gendata, "write the synthetic motion dataset")
    d = SynthTaskSpec()
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=d.num_classes)
    p.add_argument("--clips-per-class", type=int, default=d.clips_per_class)
    p.add_argument("--size", default="x".join(map(str, d.full_size)), help="TxHxW")
    p.add_argument("--object-size", type=int, default=d.object_size)
    p.add_argument("--noise", type=float, default=d.noise)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            parser.exit(EXIT_INVALID, f"csn3d: cannot read config {args.config}: {err}\n")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.exit(EXIT_INVALID, f"csn3d: unknown config keys {unknown}\n")
        # config replaces defaults; flags given on the command line still win
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ShapeError, FormatError, FileNotFoundError, ValueError) as err:
        print(f"csn3d {args.command}: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
