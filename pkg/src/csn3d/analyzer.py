"""Static parameter, FLOP and channel-interaction accounting.

For a convolution with ``c_in`` inputs, ``c_out`` outputs, ``G`` groups and a
``k_t x k_h x k_w`` kernel::

    params       = c_out * (c_in / G) * k_t * k_h * k_w
    flops        = params * voxels          (one multiply-accumulate = 1 FLOP)
    interactions = c_out * binom(c_in / G, 2)

``voxels`` is the layer's output T*H*W by default (``voxels="input"`` uses the
input extent instead). Totals cover every convolution, including ``conv1``
and projection shortcuts, plus the fc layer for params and FLOPs. The fc
layer contributes no interactions and batch-norm affine parameters are
reported separately unless ``include_bn`` is set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from math import comb

from .ops import ConvSpec
from .tensor import Shape5, ShapeError
from .zoo import ArchPlan, ArchSpec, BlockKind, arch_plan, named_arch

log = logging.getLogger(__name__)


@dataclass
class LayerStats:
    name: str
    kind: str
    c_in: int
    c_out: int
    groups: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    out_shape: tuple[int, int, int, int, int]
    out_voxels: int
    params: int
    flops: int
    interactions: int
    bn_params: int = 0


def layer_stats(spec: ConvSpec, out_voxels: int, name: str = "", kind: str = "conv", out_shape=None,
                voxels: int | None = None) -> LayerStats:
    """Cost of one convolution. ``voxels`` overrides the count used for FLOPs."""
    k = spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
    per_group = spec.c_in // spec.groups
    params = spec.c_out * per_group * k
    return LayerStats(
        name=name,
        kind=kind,
        c_in=spec.c_in,
        c_out=spec.c_out,
        groups=spec.groups,
        kernel=spec.kernel,
        stride=spec.stride,
        out_shape=tuple(out_shape) if out_shape else (1, spec.c_out, 1, 1, out_voxels),
        out_voxels=out_voxels,
        params=params,
        flops=params * (out_voxels if voxels is None else voxels),
        interactions=spec.c_out * comb(per_group, 2),
        bn_params=2 * spec.c_out,
    )


def _conv_out(spec: ConvSpec, shape, name):
    n, c, t, h, w = shape
    if c != spec.c_in:
        raise ShapeError(f"{name}: expects {spec.c_in} channels, got {c}")
    return (n, spec.c_out, *spec.output_extents(t, h, w))


def walk(plan: ArchPlan, input_shape):
    """Yield ``(name, kind, spec, in_shape, out_shape)`` in forward order.

    ``kind`` is ``conv``, ``pool`` or ``fc``; ``spec`` is the layer spec (the
    fc entry carries ``(in_features, classes)``).
    """
    s = Shape5.of(input_shape)
    shape = tuple(s)
    out = _conv_out(plan.stem.conv, shape, plan.stem.name)
    yield plan.stem.name, "conv", plan.stem.conv, shape, out
    shape = out
    pooled = (shape[0], shape[1], *plan.pool.output_extents(*shape[2:]))
    yield "pool1", "pool", plan.pool, shape, pooled
    shape = pooled
    for block in plan.blocks:
        x_shape = shape
        for unit in block.branch:
            out = _conv_out(unit.conv, shape, unit.name)
            yield unit.name, "conv", unit.conv, shape, out
            shape = out
        if block.shortcut:
            sc = _conv_out(block.shortcut.conv, x_shape, block.shortcut.name)
            yield block.shortcut.name, "conv", block.shortcut.conv, x_shape, sc
            if sc != shape:
                raise ShapeError(f"{block.name}: branch {shape} vs shortcut {sc}")
        elif x_shape != shape:
            raise ShapeError(f"{block.name}: identity shortcut {x_shape} vs branch {shape}")
    yield "pool5", "pool", None, shape, (shape[0], shape[1], 1, 1, 1)
    yield "fc", "fc", (plan.fc_in, plan.arch.num_classes), (shape[0], shape[1], 1, 1, 1), (shape[0], plan.arch.num_classes)


def propagate(plan: ArchPlan, input_shape) -> dict[str, tuple[int, ...]]:
    """Output shape of conv1, pool1 and every block."""
    shapes = {}
    blocks = {b.name: b for b in plan.blocks}
    for name, kind, _, _, out in walk(plan, input_shape):
        if kind != "conv" or name == plan.stem.name:
            shapes[name] = out
        block = name.split(".")[0]
        if block in blocks and not name.endswith("shortcut"):
            shapes[block] = out
    return shapes


@dataclass
class ModelReport:
    arch: str
    input: tuple[int, int, int, int, int]
    layers: list[LayerStats]
    conventions: dict
    bn_params: int = 0
    depth: int = 0

    @property
    def totals(self) -> dict[str, int]:
        t = {
            "params": sum(l.params for l in self.layers),
            "flops": sum(l.flops for l in self.layers),
            "interactions": sum(l.interactions for l in self.layers),
        }
        if self.conventions.get("include_bn"):
            t["params"] += self.bn_params
        return t

    def to_dict(self) -> dict:
        totals = self.totals
        return {
            "arch": self.arch,
            "input": list(self.input),
            "depth": self.depth,
            "conventions": self.conventions,
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "c_in": l.c_in,
                    "c_out": l.c_out,
                    "groups": l.groups,
                    "kernel": list(l.kernel),
                    "stride": list(l.stride),
                    "out_shape": list(l.out_shape),
                    "params": l.params,
                    "flops": l.flops,
                    "interactions": l.interactions,
                }
                for l in self.layers
            ],
            "totals": {
                **totals,
                "bn_params": self.bn_params,
                "params_e6": round(totals["params"] / 1e6, 4),
                "flops_e9": round(totals["flops"] / 1e9, 4),
                "interactions_e9": round(totals["interactions"] / 1e9, 4),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


VOXEL_CONVENTIONS = ("output", "input")


def model_report(arch: ArchSpec | str, input_shape=(1, 3, 8, 224, 224), voxels: str = "output",
                 include_bn: bool = False) -> ModelReport:
    if isinstance(arch, str):
        arch = named_arch(arch)
    if voxels not in VOXEL_CONVENTIONS:
        raise ValueError(f"voxels must be one of {VOXEL_CONVENTIONS}")
    plan = arch_plan(arch)
    layers = []
    bn = 0
    for name, kind, spec, in_shape, out_shape in walk(plan, input_shape):
        if kind == "conv":
            out_vox = out_shape[0] * out_shape[2] * out_shape[3] * out_shape[4]
            in_vox = in_shape[0] * in_shape[2] * in_shape[3] * in_shape[4]
            st = layer_stats(spec, out_vox, name, "conv", out_shape, in_vox if voxels == "input" else None)
            bn += st.bn_params
            layers.append(st)
        elif kind == "fc":
            c, k = spec
            layers.append(
                LayerStats(name, "fc", c, k, 1, (1, 1, 1), (1, 1, 1), (out_shape[0], k, 1, 1, 1), 1,
                           params=c * k + k, flops=c * k * out_shape[0], interactions=0)
            )
    conventions = {
        "flop": "multiply-accumulate",
        "voxels": voxels,
        "include_bn": include_bn,
        "fc_interactions": False,
        "batch_scaling": "per-clip" if input_shape[0] == 1 else "per-batch",
    }
    return ModelReport(arch.name or str(arch.block_kind), tuple(Shape5.of(input_shape)), layers, conventions,
                       bn_params=bn, depth=arch.depth)


# ----------------------------------------------------------------------------
# Sweeps over block transformations

SWEEP_AXES = ("groups-3x3x3", "groups-1x1x1", "block-kind")


def _powers_of_two(limit):
    g = 2
    while g < limit:
        yield g
        g *= 2


def sweep_variants(base: ArchSpec, axis: str, groups=None) -> list[BlockKind]:
    """Block kinds visited by a sweep, ordered from most to least interaction."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    fam = base.block_kind.family
    narrow = min(base.widths)
    gs = list(groups) if groups else list(_powers_of_two(narrow))
    if axis == "groups-3x3x3":
        return [BlockKind(fam)] + [BlockKind(f"{fam}-g", g) for g in gs] + [BlockKind(f"{fam}-d")]
    if axis == "groups-1x1x1":
        if fam != "bottleneck":
            raise ValueError("groups-1x1x1 sweep needs a bottleneck-family base")
        return [BlockKind("bottleneck-d")] + [BlockKind("bottleneck-dg", g) for g in gs]
    g = gs[min(1, len(gs) - 1)] if gs else 2
    if fam == "simple":
        return [BlockKind("simple"), BlockKind("simple-g", g), BlockKind("simple-d")]
    return [BlockKind("bottleneck"), BlockKind("bottleneck-g", g), BlockKind("bottleneck-d"),
            BlockKind("bottleneck-dg", g), BlockKind("ip-csn")]


@dataclass
class SweepRow:
    variant: str
    block: str
    groups: int
    params: int
    flops: int
    interactions: int
    accuracy: float | None = None


def sweep_stats(base: ArchSpec | str, axis: str, input_shape=(1, 3, 8, 224, 224), groups=None) -> list[SweepRow]:
    if isinstance(base, str):
        base = named_arch(base)
    rows = []
    for kind in sweep_variants(base, axis, groups):
        arch = ArchSpec(kind, base.stage_blocks, base.num_classes, base.widths, base.stem_width,
                        base.expansion, base.frames, name=f"{kind}-{base.num_blocks}")
        try:
            rep = model_report(arch, input_shape)
        except ValueError as err:
            log.warning("skipping %s: %s", kind, err)
            continue
        t = rep.totals
        rows.append(SweepRow(arch.name, kind.kind, kind.groups, t["params"], t["flops"], t["interactions"]))
    return rows


SWEEP_COLUMNS = ("variant", "block", "groups", "params", "flops", "interactions")


def sweep_csv(rows: list[SweepRow], with_accuracy: bool = False) -> str:
    cols = SWEEP_COLUMNS + (("accuracy",) if with_accuracy else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = asdict(r)
        if with_accuracy and d["accuracy"] is not None:
            d["accuracy"] = f"{d['accuracy']:.4f}"
        w.writerow([d[c] if d[c] is not None else "" for c in cols])
    return buf.getvalue()


def report_csv(report: ModelReport) -> str:
    cols = ("name", "kind", "c_in", "c_out", "groups", "kernel", "stride", "out_shape", "params", "flops",
            "interactions")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for l in report.to_dict()["layers"]:
        w.writerow(["x".join(map(str, l[c])) if isinstance(l[c], list) else l[c] for c in cols])
    return buf.getvalue()
