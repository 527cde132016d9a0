import math

import numpy as np
import pytest

from csn3d.data import SampleSpec, SynthTaskSpec, VideoClip, gen_dataset, split_dataset
from csn3d.trainer import (RunHistory, TrainConfig, accuracy_from_probs, decays, evaluate, lr_at, sgd_step, train)
from csn3d.zoo import BlockKind, Model, load_checkpoint, save_model, tiny_arch

CFG = TrainConfig(base_lr=0.1, warmup_epochs=2, total_epochs=10, iters_per_epoch=10)


def test_lr_anchors():
    w, n = CFG.warmup_iters, CFG.total_iters
    assert lr_at(0, CFG) == pytest.approx(0.1 / w)
    assert lr_at(w - 1, CFG) == pytest.approx(0.1, abs=1e-12)
    assert lr_at(w, CFG) == pytest.approx(0.1, abs=1e-12)
    assert lr_at(w + (n - w) // 2, CFG) == pytest.approx(0.05, abs=1e-12)
    assert lr_at(n, CFG) == pytest.approx(0.0, abs=1e-12)


def test_lr_monotone():
    lrs = [lr_at(i, CFG) for i in range(CFG.total_iters)]
    w = CFG.warmup_iters
    assert all(a < b for a, b in zip(lrs[:w], lrs[1:w]))
    assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1:]))
    with pytest.raises(ValueError):
        lr_at(-1, CFG)


def test_no_warmup():
    cfg = TrainConfig(warmup_epochs=0, total_epochs=2, iters_per_epoch=2)
    assert lr_at(0, cfg) == cfg.base_lr


@pytest.mark.parametrize("kw", [dict(total_epochs=0), dict(warmup_epochs=5, total_epochs=5), dict(base_lr=0),
                                dict(batch_size=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_sgd_plain_step():
    p = {"w.weight": np.array([1.0, 2.0])}
    g = {"w.weight": np.array([0.5, -1.0])}
    sgd_step(p, g, {}, 0.1, 0.0, 0.0)
    assert np.allclose(p["w.weight"], [0.95, 2.1])


def test_sgd_zero_grad_fixed_point():
    p = {"b.bn.gamma": np.array([1.0, 2.0])}
    sgd_step(p, {"b.bn.gamma": np.zeros(2)}, {}, 0.1, 0.9, 1e-4)
    assert np.array_equal(p["b.bn.gamma"], [1.0, 2.0])


def test_sgd_momentum_and_decay():
    p = {"c.weight": np.array([1.0])}
    v = {}
    sgd_step(p, {"c.weight": np.array([1.0])}, v, 0.1, 0.9, 0.1)
    assert np.allclose(v["c.weight"], 1.1) and np.allclose(p["c.weight"], 1 - 0.11)
    sgd_step(p, {"c.weight": np.array([0.0])}, v, 0.1, 0.9, 0.0)
    assert np.allclose(v["c.weight"], 0.99)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"a.weight": np.zeros(2)}, {"a.weight": np.zeros(3)}, {}, 0.1, 0.9, 0.0)


def test_decay_targets():
    assert decays("conv2_1.conv_a.weight") and decays("fc.weight")
    assert not decays("fc.bias") and not decays("conv1.bn.gamma")


def test_accuracy_arithmetic():
    probs = np.array([[[0.6, 0.4], [0.2, 0.8]]])
    assert accuracy_from_probs(probs, [0]) == (0.5, 0.0)
    assert accuracy_from_probs(probs[:, ::-1], [0]) == (0.5, 0.0)


def test_history_rejects_non_increasing():
    h = RunHistory()
    h.record(0, 0.1, 1.0, 0.5)
    with pytest.raises(ValueError):
        h.record(0, 0.1, 1.0, 0.5)
    assert h.to_csv().splitlines()[0] == "iter,lr,loss,train_err"


@pytest.fixture(scope="module")
def task():
    vs = gen_dataset(SynthTaskSpec(clips_per_class=8))
    return split_dataset(vs, 0.25, seed=0)


def _model(seed=0):
    return Model(tiny_arch(BlockKind("ip-csn"), stage_blocks=(1, 1), num_classes=4), seed=seed)


def test_training_is_reproducible(task, tmp_path):
    train_set, test_set = task
    cfg = TrainConfig(total_epochs=2, iters_per_epoch=4, batch_size=4, eval_every=4, seed=3)
    m1, h1 = train(_model(), train_set, cfg, eval_set=test_set, n_eval_clips=2)
    m2, h2 = train(_model(), train_set, cfg, eval_set=test_set, n_eval_clips=2)
    assert h1.to_json() == h2.to_json() and h1.to_csv() == h2.to_csv()
    save_model(tmp_path / "a", m1)
    save_model(tmp_path / "b", m2)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert h1.clips_seen == 8 * 4 and len(h1.evals) == 2


def test_checkpoints_written(task, tmp_path):
    cfg = TrainConfig(warmup_epochs=0, total_epochs=1, iters_per_epoch=4, batch_size=2, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    train(_model(), task[0], cfg)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["iter_000002.csnw", "iter_000004.csnw"]
    assert "fc.weight" in load_checkpoint(tmp_path / names[0])


def test_divergence_names_layer(task):
    m = _model()
    m.params()["conv1.weight"][...] = np.nan
    cfg = TrainConfig(warmup_epochs=0, total_epochs=1, iters_per_epoch=1, batch_size=2)
    with pytest.raises(FloatingPointError, match="conv1"):
        train(m, task[0], cfg)


def test_evaluate_perfect_model():
    class Oracle:
        def forward(self, x, train=False):
            out = np.full((x.shape[0], 3), -10.0)
            out[:, 2] = 10.0
            return out

    v = VideoClip(np.zeros((3, 8, 36, 36), np.uint8), 2)
    assert evaluate(Oracle(), [v], SampleSpec()) == (1.0, 1.0)
    with pytest.raises(ValueError):
        evaluate(Oracle(), [], SampleSpec())


@pytest.mark.slow
def test_loss_drops_over_300_iters():
    vs = gen_dataset(SynthTaskSpec(clips_per_class=30))
    train_set, _ = split_dataset(vs, 0.25, seed=0)
    # two blocks in total, one per stage
    m = Model(tiny_arch(BlockKind("ip-csn"), stage_blocks=(1, 1), num_classes=4), seed=0)
    cfg = TrainConfig(total_epochs=6, iters_per_epoch=50)
    _, h = train(m, train_set, cfg)
    first, last = np.mean(h.loss[:10]), np.mean(h.loss[-20:])
    assert math.isclose(first, math.log(4), rel_tol=0.2)
    assert last < 0.3 * first
