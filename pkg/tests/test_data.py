import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from csn3d.data import (ClipFormatError, SampleSpec, SynthTaskSpec, VideoClip, VideoTooShortError, denormalize,
                        eval_offsets, gen_dataset, load_dataset, read_clip, resize_short_edge, sample_eval_clips,
                        sample_train_clip, save_dataset, split_dataset, write_clip)
from csn3d.tensor import Rng

SMALL = SynthTaskSpec(clips_per_class=3, full_size=(16, 40, 48), object_size=10)


@pytest.fixture(scope="module")
def videos():
    return gen_dataset(SMALL)


def test_deterministic(videos):
    again = gen_dataset(SMALL)
    assert b"".join(v.frames.tobytes() for v in videos) == b"".join(v.frames.tobytes() for v in again)
    other = gen_dataset(SynthTaskSpec(clips_per_class=3, full_size=(16, 40, 48), object_size=10, seed=1))
    assert not np.array_equal(videos[0].frames, other[0].frames)


def test_balanced_count():
    spec = SynthTaskSpec(clips_per_class=50, full_size=(16, 24, 24), object_size=6)
    vs = gen_dataset(spec)
    assert len(vs) == 200
    assert np.bincount([v.label for v in vs]).tolist() == [50] * 4
    assert all(v.frames.dtype == np.uint8 and v.frames.shape == (3, 16, 24, 24) for v in vs)


def test_bad_task_specs():
    with pytest.raises(ValueError):
        SynthTaskSpec(num_classes=5)
    with pytest.raises(ValueError):
        SynthTaskSpec(object_size=64)


def test_split_is_stratified(videos):
    train, test = split_dataset(videos, 0.34, seed=0)
    assert len(train) + len(test) == len(videos)
    assert np.bincount([v.label for v in test]).tolist() == [1] * 4


def test_single_frames_carry_no_label():
    """A per-frame linear classifier on the left/right pair scores near chance,
    on the original and on frame-shuffled videos."""
    spec = SynthTaskSpec(num_classes=2, clips_per_class=60, full_size=(16, 24, 24), object_size=8, seed=3)
    vs = gen_dataset(spec)
    train, test = split_dataset(vs, 0.5, seed=0)
    rng = np.random.default_rng(0)

    def frames(v):
        f = v.frames[:, rng.permutation(v.frames.shape[1])].astype(np.float32) / 255
        return f.transpose(1, 0, 2, 3).reshape(f.shape[1], -1)

    x = np.concatenate([frames(v) for v in train])
    y = np.concatenate([[v.label] * v.frames.shape[1] for v in train])
    clf = LogisticRegression(C=0.1, max_iter=500).fit(x, y)
    votes = [np.bincount(clf.predict(frames(v)), minlength=2).argmax() == v.label for v in test]
    acc = float(np.mean(votes))
    assert 0.3 <= acc <= 0.7, acc


def test_clip_roundtrip(tmp_path, videos):
    p = tmp_path / "c.csnv"
    write_clip(p, videos[5])
    back = read_clip(p)
    assert back == videos[5]
    write_clip(tmp_path / "d.csnv", back)
    assert (tmp_path / "d.csnv").read_bytes() == p.read_bytes()


def test_clip_errors(tmp_path, videos):
    p = tmp_path / "c.csnv"
    write_clip(p, videos[0])
    data = p.read_bytes()
    cases = {"magic": b"NOPE" + data[4:], "empty": b"", "short": data[:-1], "version": data[:4] + b"\x09" + data[5:]}
    for name, raw in cases.items():
        (tmp_path / name).write_bytes(raw)
        with pytest.raises(ClipFormatError):
            read_clip(tmp_path / name)


def test_dataset_dir_roundtrip(tmp_path, videos):
    save_dataset(tmp_path / "ds", videos, SMALL)
    assert load_dataset(tmp_path / "ds") == videos


def test_train_clip_shape_and_start_range(videos):
    sample = SampleSpec()
    x = sample_train_clip(videos[0], sample, Rng(0))
    assert x.shape == (1, 3, 4, 32, 32) and x.dtype == np.float32
    # 16 frames, 4 sampled every 2nd frame: the clip fits from starts 0..8
    assert eval_offsets(16 - sample.span, 2) == [0, 8]


def test_train_clip_deterministic_degenerate_jitter(videos):
    sample = SampleSpec(scale_range=(40, 40), crop=40)
    a = sample_train_clip(videos[1], sample, Rng(4))
    b = sample_train_clip(videos[1], sample, Rng(4))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(32, 48))
def test_train_clip_pixels_come_from_source(seed, s):
    """Crops stay inside the frame: every output pixel lies in the source range."""
    frames = np.full((3, 10, 30, 50), 77, np.uint8)
    frames[:, :, 0, 0] = 200
    sample = SampleSpec(clip_len=3, skip=3, scale_range=(32, s), crop=32)
    x = denormalize(sample_train_clip(VideoClip(frames, 0), sample, Rng(seed)))
    assert x.min() >= 77 - 1e-3 and x.max() <= 200 + 1e-3


def test_too_short():
    with pytest.raises(VideoTooShortError):
        sample_train_clip(VideoClip(np.zeros((3, 7, 40, 40), np.uint8), 0), SampleSpec(), Rng(0))


def test_eval_offsets():
    assert eval_offsets(90, 10) == list(range(0, 91, 10))
    assert eval_offsets(8, 1) == [4]
    with pytest.raises(ValueError):
        eval_offsets(8, 0)


def test_eval_clips_centered(videos):
    clips = sample_eval_clips(videos[2], SampleSpec(), 10)
    assert len(clips) == 10 and all(c.shape == (1, 3, 4, 32, 32) for c in clips)
    one = sample_eval_clips(videos[2], SampleSpec(), 1)[0]
    assert np.array_equal(one, clips[4]) or np.array_equal(one, clips[5])


def test_resize_short_edge():
    x = np.ones((3, 2, 40, 48), np.float32)
    y = resize_short_edge(x, 20)
    assert y.shape == (3, 2, 20, 24) and np.allclose(y, 1)


def test_sample_spec_validation():
    with pytest.raises(ValueError):
        SampleSpec(crop=64)
    with pytest.raises(ValueError):
        SampleSpec(scale_range=(48, 36))
