import dataclasses

import numpy as np
import pytest

from promptcl.data import SyntheticSpec, TaskStream, generate_synthetic, smooth_field

SMALL = SyntheticSpec(num_pretrain_classes=3, num_stream_classes=6, tasks=3, classes_per_task=2,
                      train_per_class=4, test_per_class=3, pretrain_train_per_class=4,
                      pretrain_test_per_class=2, image_size=8, seed=5)


def test_defaults_match_desk_benchmark():
    s = SyntheticSpec()
    assert (s.tasks, s.classes_per_task, s.train_per_class, s.test_per_class) == (5, 4, 200, 50)
    assert (s.num_pretrain_classes, s.noise_sigma, s.style_shift) == (20, 0.3, 0.5)


@pytest.mark.parametrize("kwargs", [dict(num_stream_classes=7), dict(noise_sigma=-1.0), dict(tasks=0, num_stream_classes=0)])
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        dataclasses.replace(SMALL, **kwargs)


def test_shapes_disjointness_and_labels():
    (pre_tr, pre_te), stream = generate_synthetic(SMALL)
    assert stream.num_tasks == 3
    assert pre_tr.images.shape == (12, 3, 8, 8) and pre_te.images.shape == (6, 3, 8, 8)
    stream_labels = np.concatenate(stream.class_sets)
    assert sorted(stream_labels.tolist()) == list(range(6))
    assert not set(pre_tr.labels.tolist()) & set(stream_labels.tolist())
    for t in range(3):
        tr, te = stream.train(t), stream.test(t)
        assert len(tr) == 8 and len(te) == 6
        assert set(tr.labels.tolist()) == set(stream.classes(t).tolist()) == set(te.labels.tolist())
        assert (tr.task_ids == t).all()
        # train and test examples are distinct draws
        assert not any(np.array_equal(a, b) for a in tr.images for b in te.images)


def test_deterministic_given_seed():
    a = generate_synthetic(SMALL)[1]
    b = generate_synthetic(SMALL)[1]
    c = generate_synthetic(dataclasses.replace(SMALL, seed=6))[1]
    assert a.train(1).images.tobytes() == b.train(1).images.tobytes()
    assert a.train(1).images.tobytes() != c.train(1).images.tobytes()


def test_zero_noise_makes_class_examples_identical():
    stream = generate_synthetic(dataclasses.replace(SMALL, noise_sigma=0.0))[1]
    tr = stream.train(0)
    for c in stream.classes(0):
        imgs = tr.images[tr.labels == c]
        assert all(np.array_equal(imgs[0], im) for im in imgs)


def test_style_is_a_per_task_offset():
    flat = dataclasses.replace(SMALL, noise_sigma=0.0, style_shift=0.0)
    styled = dataclasses.replace(SMALL, noise_sigma=0.0)
    s0, s1 = generate_synthetic(flat)[1], generate_synthetic(styled)[1]
    offsets = []
    for t in range(3):
        diff = s1.train(t).images - s0.train(t).images
        assert np.allclose(diff, diff[0])
        offsets.append(diff[0])
    assert not np.allclose(offsets[0], offsets[1])


def test_overlapping_class_sets_rejected():
    (_, _), stream = generate_synthetic(SMALL)
    with pytest.raises(ValueError):
        TaskStream([np.array([0, 1]), np.array([1, 2])], stream._train[:2], stream._test[:2])


def test_smooth_field_unit_rms(rng):
    f = smooth_field(rng, (3, 16, 16), 2.0)
    assert np.sqrt(np.mean(f ** 2)) == pytest.approx(1.0)
    # neighbouring pixels are strongly correlated after low-pass filtering
    assert np.corrcoef(f[..., :-1].ravel(), f[..., 1:].ravel())[0, 1] > 0.5
