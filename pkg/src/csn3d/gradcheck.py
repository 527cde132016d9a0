"""Central finite-difference checks for every kernel, block kind and a tiny model.

All checks run in float64. The error of an analytic gradient ``a`` against a
numeric estimate ``n`` (over the sampled coordinates) is
``max|a - n| / max(max|a|, max|n|)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import BatchNorm3d, Conv3d, GlobalAvgPool, Linear, MaxPool3d, ReLU
from .ops import BatchNormSpec, ConvSpec, PoolSpec
from .tensor import Rng
from .zoo import KINDS, Block, BlockKind, BlockSpec, Model, make_block, tiny_arch

STEP = 1e-3
# Composite checks perturb many ReLU / max-pool inputs at once; a 1e-3 step
# routinely crosses a kink there, so they use a smaller step.
COMPOSITE_STEP = 1e-6
LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<40s} err={self.error:.3e}  tol={self.tol:.0e}"


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _coords(shape, rng, max_coords):
    size = int(np.prod(shape))
    if size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def numeric_grad(f, x: np.ndarray, coords, h=STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def check_function(name, loss, grads: dict, tensors: dict, rng, tol=LAYER_TOL, max_coords=40,
                   h=STEP) -> CheckResult:
    """Compare analytic ``grads[k]`` with finite differences of ``loss`` w.r.t. ``tensors[k]``."""
    analytic, numeric = [], []
    for key, t in tensors.items():
        coords = _coords(t.shape, rng, max_coords)
        analytic.append(np.asarray(grads[key]).reshape(-1)[coords])
        numeric.append(numeric_grad(loss, t, coords, h))
    return CheckResult(name, rel_error(np.concatenate(analytic), np.concatenate(numeric)), tol)


def _layer_case(name, layer, x, rng, train=True):
    y = layer.forward(x, train)
    r = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(layer.forward(x, train) * r))

    layer.forward(x, train)
    gx = layer.backward(r)
    grads = {"x": gx, **{k: v for k, v in layer.grads.items()}}
    tensors = {"x": x, **{k: layer.params[k] for k in layer.grads}}
    return check_function(name, loss, grads, tensors, rng)


def _conv_layer(spec: ConvSpec, seed: int):
    layer = Conv3d(spec, Rng(seed))
    layer.params = {k: v.astype(np.float64) for k, v in layer.params.items()}
    return layer


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    x = rng.standard_normal((2, 4, 3, 5, 5))
    for g in (1, 2, 4):
        for stride, pad in (((1, 1, 1), (1, 1, 1)), ((2, 2, 2), (1, 1, 1)), ((1, 2, 2), (0, 1, 1))):
            spec = ConvSpec(4, 4, g, (3, 3, 3), stride, pad, bias=True)
            results.append(_layer_case(f"conv3d G={g} s={stride} p={pad}", _conv_layer(spec, seed), x.copy(), rng))
    spec = ConvSpec(4, 8, 2, (1, 1, 1), (1, 2, 2), (0, 0, 0))
    results.append(_layer_case("conv3d 1x1x1 G=2 strided", _conv_layer(spec, seed), x.copy(), rng))

    bn = BatchNorm3d(BatchNormSpec(4))
    bn.params = {"gamma": rng.uniform(0.5, 1.5, 4), "beta": rng.standard_normal(4)}
    bn.buffers = {k: v.astype(np.float64) for k, v in bn.buffers.items()}
    results.append(_layer_case("batchnorm train", bn, x.copy(), rng, train=True))
    results.append(_layer_case("batchnorm eval", bn, x.copy(), rng, train=False))

    # distinct values keep finite differences away from ReLU/max kinks
    xd = rng.permutation(np.linspace(-1, 1, x.size)).reshape(x.shape) + 0.0
    results.append(_layer_case("relu", ReLU(), xd.copy(), rng))
    results.append(_layer_case("maxpool3d 1x3x3/1x2x2", MaxPool3d(PoolSpec()), xd.copy(), rng))
    results.append(_layer_case("maxpool3d 2x2x2/2x2x2", MaxPool3d(PoolSpec((2, 2, 2), (2, 2, 2), (0, 0, 0))), xd.copy(), rng))
    results.append(_layer_case("global_avgpool", GlobalAvgPool(), x.copy(), rng))

    lin = Linear(4, 3, Rng(seed), std=1.0)
    lin.params = {k: v.astype(np.float64) for k, v in lin.params.items()}
    lin.params["bias"] = rng.standard_normal(3)
    results.append(_layer_case("linear", lin, rng.standard_normal((3, 4, 1, 1, 1)), rng))

    logits = rng.standard_normal((5, 6))
    labels = rng.integers(0, 6, size=5)
    _, g = ops.softmax_xent(logits, labels)
    results.append(
        check_function("softmax_xent", lambda: ops.softmax_xent(logits, labels)[0], {"z": g}, {"z": logits}, rng, tol=1e-5)
    )
    return results


def _model_like_loss(forward, y_shape, rng):
    r = rng.standard_normal(y_shape)
    return r, lambda: float(np.sum(forward() * r))


BLOCK_CASES = {
    "simple": BlockKind("simple"),
    "simple-g": BlockKind("simple-g", 2),
    "simple-d": BlockKind("simple-d"),
    "bottleneck": BlockKind("bottleneck"),
    "bottleneck-g": BlockKind("bottleneck-g", 2),
    "bottleneck-d": BlockKind("bottleneck-d"),
    "bottleneck-dg": BlockKind("bottleneck-dg", 2),
    "ip-csn": BlockKind("ip-csn"),
}
assert set(BLOCK_CASES) == set(KINDS)


def block_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, kind in BLOCK_CASES.items():
        if kind.family == "simple":
            spec = BlockSpec(kind, 4, 8, 8, (1, 2, 2))
        else:
            spec = BlockSpec(kind, 8, 4, 16, (1, 2, 2))
        block = Block(make_block(spec, name), Rng(seed))
        params = {}
        for u in block.all_units():
            u.conv.params["weight"] = u.conv.params["weight"].astype(np.float64)
            u.bn.params = {"gamma": rng.uniform(0.5, 1.5, u.bn.spec.channels), "beta": rng.normal(0, 0.5, u.bn.spec.channels)}
            u.bn.buffers = {k: v.astype(np.float64) for k, v in u.bn.buffers.items()}
            params[f"{u.name}.weight"] = (u.conv, "weight")
            params[f"{u.name}.gamma"] = (u.bn, "gamma")
        x = rng.standard_normal((2, spec.in_channels, 3, 6, 6))
        y = block.forward(x, True)
        r, loss = _model_like_loss(lambda: block.forward(x, True), y.shape, rng)
        block.forward(x, True)
        gx = block.backward(r)
        grads = {"x": gx, **{k: l.grads[key] for k, (l, key) in params.items()}}
        tensors = {"x": x, **{k: l.params[key] for k, (l, key) in params.items()}}
        results.append(check_function(f"block {kind}", loss, grads, tensors, rng, max_coords=12,
                                      h=COMPOSITE_STEP))
    return results


def tiny_model(seed: int = 0, kind: str = "ip-csn") -> Model:
    arch = tiny_arch(BlockKind.parse(kind), stage_blocks=(1, 1), width=8, num_classes=5, frames=4)
    return Model(arch, seed=seed).astype(np.float64)


def model_check(seed: int = 0, kind: str = "ip-csn") -> CheckResult:
    rng = np.random.default_rng(seed)
    model = tiny_model(seed, kind)
    x = rng.standard_normal((1, 3, 4, 16, 16))
    labels = rng.integers(0, 5, size=1)

    def loss():
        return ops.softmax_xent(model.forward(x, train=True), labels)[0]

    # random BN affine values so no layer sits at a symmetric point
    for u in model.units():
        c = u.bn.spec.channels
        u.bn.params["gamma"][:] = rng.uniform(0.5, 1.5, c)
        u.bn.params["beta"][:] = rng.normal(0, 0.5, c)
    model.params()["fc.weight"][:] = rng.normal(0, 0.5, model.params()["fc.weight"].shape)
    logits = model.forward(x, train=True)
    _, g = ops.softmax_xent(logits, labels)
    gx = model.backward(g)
    params = model.params()
    grads = model.grads()
    tensors = {"x": x, **params}
    all_grads = {"x": gx, **grads}
    return check_function(f"tiny {kind} model (2 blocks)", loss, all_grads, tensors, rng, tol=MODEL_TOL, max_coords=6,
                          h=COMPOSITE_STEP)


def run(scope: str, seed: int = 0) -> list[CheckResult]:
    if scope == "layers":
        return layer_checks(seed)
    if scope == "blocks":
        return block_checks(seed)
    if scope == "tiny-model":
        return [model_check(seed, k) for k in ("ip-csn", "bottleneck")]
    raise ValueError(f"unknown gradcheck scope {scope!r}")
