"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

Run under pytest (lines are collected into the terminal summary) or directly
with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cases import random_conv_case  # noqa: E402
from csn3d import gradcheck, ops  # noqa: E402
from csn3d.analyzer import layer_stats, model_report, sweep_stats  # noqa: E402
from csn3d.cli import check_table2, main as cli_main  # noqa: E402
from csn3d.data import SampleSpec, SynthTaskSpec, gen_dataset, read_clip, split_dataset, write_clip  # noqa: E402
from csn3d.ops import ConvSpec  # noqa: E402
from csn3d.trainer import TrainConfig, evaluate, lr_at, train  # noqa: E402
from csn3d.zoo import BlockKind, Model, load_model_weights, save_model, tiny_arch  # noqa: E402

LINES: list[str] = []


def report(num: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {title} :: {detail}"
    LINES.append(line)
    print(line)
    return ok


# ----------------------------------------------------------------------------


def criterion_1():
    got = [layer_stats(ConvSpec(4, 4, g, 1), 1).interactions for g in (1, 2, 4)]
    return report(1, "interaction pairs for C=4, G=1,2,4", got == [24, 4, 0], f"got {got}, want [24, 4, 0]")


def criterion_2():
    t0 = time.perf_counter()
    rows = check_table2()
    bad = [f"{a}/{m} {e:.2%}" for a, m, _, _, e, ok in rows if not ok]
    worst = {m: max(e for _, mm, _, _, e, _ in rows if mm == m) for m in ("interactions", "params", "flops")}
    r50, ir50 = model_report("resnet3d-50").totals, model_report("ir-csn-50").totals
    ratio = r50["flops"] / ir50["flops"]
    ratio_ok = abs(ratio / (29.5 / 10.6) - 1) <= 0.05
    equal = all(
        model_report(f"ip-csn-{d}").totals["interactions"] == model_report(f"resnet3d-{d}").totals["interactions"]
        for d in (50, 101)
    )
    secs = time.perf_counter() - t0
    ok = not bad and ratio_ok and equal and secs < 1.0
    detail = (f"27 comparisons, worst interactions {worst['interactions']:.2%} (tol 2%), params {worst['params']:.2%} "
              f"(tol 3%), flops {worst['flops']:.2%} (tol 15%); flop ratio {ratio:.3f} vs 2.783 (tol 5%); "
              f"ip==resnet interactions at 50/101: {equal}; {secs:.2f}s" + (f"; failures {bad}" if bad else ""))
    return report(2, "cost table reproduction", ok, detail)


def criterion_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_bd = worst_direct = 0.0
    groups_seen = set()
    for _ in range(200):
        spec, x, w, b = random_conv_case(rng, np.float32)
        groups_seen.add("C" if spec.groups == spec.c_in else spec.groups)
        y = ops.conv3d_forward(x, w, spec, b)
        dense = ConvSpec(spec.c_in, spec.c_out, 1, spec.kernel, spec.stride, spec.padding, spec.bias)
        y_bd = ops.conv3d_forward(x, ops.block_diagonal_weight(w, spec), dense, b)
        worst_bd = max(worst_bd, float(np.abs(y - y_bd).max()))
        worst_direct = max(worst_direct, float(np.abs(y - ops.conv3d_direct(x, w, spec, b)).max()))
    secs = time.perf_counter() - t0
    ok = worst_bd <= 1e-5 and worst_direct <= 1e-5 and secs < 60
    return report(3, "grouped conv oracle equivalence (200 float32 specs)", ok,
                  f"block-diagonal max|d|={worst_bd:.2e}, direct max|d|={worst_direct:.2e} (tol 1e-5); "
                  f"G seen {sorted(map(str, groups_seen))}; {secs:.1f}s")


def criterion_4():
    t0 = time.perf_counter()
    results = gradcheck.run("layers") + gradcheck.run("blocks")
    model = gradcheck.run("tiny-model")
    secs = time.perf_counter() - t0
    layer_ok = all(r.passed and r.tol <= 1e-4 for r in results)
    model_ok = all(r.passed and r.tol <= 1e-3 for r in model)
    worst = max(r.error for r in results)
    ok = layer_ok and model_ok and secs < 120
    failed = [r.name for r in results + model if not r.passed]
    return report(4, "finite-difference gradient checks (float64)", ok,
                  f"{len(results)} layer/block checks worst {worst:.1e} (tol 1e-4); tiny models "
                  f"{[f'{r.error:.1e}' for r in model]} (tol 1e-3); {secs:.1f}s" + (f"; failed {failed}" if failed else ""))


DESK_TASK = SynthTaskSpec(num_classes=4, clips_per_class=40, seed=0)
DESK_CFG = TrainConfig(base_lr=0.05, warmup_epochs=1, total_epochs=30, iters_per_epoch=50, batch_size=8, seed=0)
RERUN_CFG = TrainConfig(base_lr=0.05, warmup_epochs=1, total_epochs=3, iters_per_epoch=50, batch_size=8, seed=0)


def _desk_model(kind: str):
    return Model(tiny_arch(BlockKind.parse(kind), stage_blocks=(2, 2, 2), width=8, num_classes=4, frames=4), seed=0)


def criterion_5():
    t0 = time.perf_counter()
    train_set, test_set = split_dataset(gen_dataset(DESK_TASK), 0.25, seed=0)
    sample = SampleSpec()  # clips 3x4x32x32
    accs, repro = {}, {}
    for kind in ("ip-csn", "resnet3d"):
        model, _ = train(_desk_model(kind), train_set, DESK_CFG, sample)
        accs[kind] = evaluate(model, test_set, sample, 10)[1]
        # determinism: two fresh runs with the same seed, compared byte for byte
        _, h1 = train(_desk_model(kind), train_set, RERUN_CFG, sample)
        _, h2 = train(_desk_model(kind), train_set, RERUN_CFG, sample)
        repro[kind] = h1.to_json() == h2.to_json() and h1.to_csv() == h2.to_csv()
    secs = time.perf_counter() - t0
    ok = all(a >= 0.9 for a in accs.values()) and all(repro.values()) and secs < 600
    return report(5, "desk training to >=90% held-out video@1 in 1500 iterations", ok,
                  f"video@1 {accs}, {DESK_CFG.total_iters} iters each; identical-seed RunHistory byte-equal "
                  f"{repro}; {secs:.0f}s on this machine")


def criterion_6():
    cfg = TrainConfig(base_lr=0.1, warmup_epochs=2, total_epochs=10, iters_per_epoch=10)
    w, n = cfg.warmup_iters, cfg.total_iters
    anchors = {
        "end of warmup": (lr_at(w - 1, cfg), cfg.base_lr),
        "cosine start": (lr_at(w, cfg), cfg.base_lr),
        "p=0.5": (lr_at(w + (n - w) // 2, cfg), 0.5 * cfg.base_lr),
        "p=1": (lr_at(n, cfg), 0.0),
    }
    errs = {k: abs(a - b) for k, (a, b) in anchors.items()}
    ok = max(errs.values()) <= 1e-9
    return report(6, "schedule anchor points", ok, ", ".join(f"{k} err={e:.1e}" for k, e in errs.items()) + " (tol 1e-9)")


def criterion_7():
    t0 = time.perf_counter()
    g3 = sweep_stats("bottleneck-16", "groups-3x3x3")
    g1 = sweep_stats("bottleneck-16", "groups-1x1x1")
    secs = time.perf_counter() - t0
    dense = g3[0].interactions
    drop3 = 1 - min(r.interactions for r in g3) / dense
    ratios = {r.groups: dense / r.interactions for r in g1 if r.block == "bottleneck-dg"}
    flat = drop3 < 0.10
    sharp = all(v > 4 for g, v in ratios.items() if g >= 4)
    ok = flat and sharp and secs < 5
    return report(7, "bottleneck-16 sweep turning point", ok,
                  f"3x3x3 grouping drop {drop3:.1%} (need <10%); dense/DG ratios "
                  + ", ".join(f"g{g}={v:.2f}x" for g, v in sorted(ratios.items()))
                  + f" (need >4x for g>=4); {secs:.2f}s")


def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        model = _desk_model("ip-csn")
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 32, 32)).astype(np.float32)
        model.forward(x, train=True)  # non-trivial running statistics
        save_model(tmp / "a.csnw", model)
        save_model(tmp / "b.csnw", load_model_weights(Model(model.arch, seed=1), tmp / "a.csnw"))
        ckpt = (tmp / "a.csnw").read_bytes() == (tmp / "b.csnw").read_bytes()

        clip = gen_dataset(SynthTaskSpec(clips_per_class=1))[3]
        write_clip(tmp / "a.csnv", clip)
        back = read_clip(tmp / "a.csnv")
        write_clip(tmp / "b.csnv", back)
        clip_ok = back == clip and (tmp / "a.csnv").read_bytes() == (tmp / "b.csnv").read_bytes()

        for name in ("r1.json", "r2.json"):
            cli_main(["analyze", "--arch", "ip-csn-50", "--out", str(tmp / name)])
        analyze = (tmp / "r1.json").read_bytes() == (tmp / "r2.json").read_bytes()
    ok = ckpt and clip_ok and analyze
    return report(8, "byte-exact round trips", ok, f"checkpoint {ckpt}, clip file {clip_ok}, analyze JSON {analyze}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("check", CRITERIA[:4], ids=lambda f: f.__name__)
def test_fast_criteria(check):
    assert check()


@pytest.mark.slow
def test_criterion_5():
    assert criterion_5()


@pytest.mark.parametrize("check", CRITERIA[5:], ids=lambda f: f.__name__)
def test_static_criteria(check):
    assert check()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 2)
