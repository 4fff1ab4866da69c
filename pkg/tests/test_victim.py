import numpy as np
import pytest

from lenspatch.checkpoint import param_checksum
from lenspatch.errors import ConfigurationError, QualityError, UsageError
from lenspatch.optics import EnvSample
from lenspatch.victim import (
    NUM_CLASSES,
    SIGN_CLASSES,
    SignDataset,
    VictimTraining,
    box_scores,
    class_probabilities,
    class_probabilities_backward,
    gen_sign_dataset,
    mean_box_score_backward,
    train_classifier,
)

TINY = VictimTraining(epochs=1, min_accuracy=0.0, widths=(4, 8, 8))


def test_sign_classes_distinct():
    assert len(SIGN_CLASSES) == NUM_CLASSES == 17
    assert len({(c.shape, c.base_color, c.glyph) for c in SIGN_CLASSES}) == 17
    assert [c.id for c in SIGN_CLASSES] == list(range(17))


def test_dataset_counts_and_determinism(world):
    a = gen_sign_dataset(world, 3, seed=9)
    b = gen_sign_dataset(world, 3, seed=9)
    assert len(a) == 17 * 3
    assert np.array_equal(np.bincount(a.labels), np.full(17, 3))
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.frames, gen_sign_dataset(world, 3, seed=10).frames)


def test_dataset_round_trip(world, tmp_path):
    ds = gen_sign_dataset(world, 1, seed=3, empty_fraction=0.2)
    ds.save(tmp_path)
    assert (tmp_path / "labels.json").exists() and (tmp_path / "class_00").is_dir()
    back = SignDataset.load(tmp_path)
    assert np.array_equal(back.frames, ds.frames)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.occupancy, ds.occupancy)
    assert back.envs == ds.envs


def test_training_deterministic_per_seed(world):
    ds = gen_sign_dataset(world, 4, seed=5)
    a, b = train_classifier(ds, 3, TINY), train_classifier(ds, 3, TINY)
    assert param_checksum(a.net) == param_checksum(b.net)
    assert param_checksum(a.net) != param_checksum(train_classifier(ds, 4, TINY).net)


def test_quality_error_when_undertrained(world):
    ds = gen_sign_dataset(world, 2, seed=6)
    with pytest.raises(QualityError):
        train_classifier(ds, 0, VictimTraining(epochs=1, widths=(4, 8, 8), min_accuracy=0.9))


def test_classifier_needs_all_classes(world):
    ds = gen_sign_dataset(world, 2, seed=6)
    with pytest.raises(ConfigurationError):
        train_classifier(ds.subset(np.flatnonzero(ds.labels != 4)), 0, TINY)


def test_classifier_accuracy_bar(classifier, classifier_b):
    assert classifier.accuracy >= 0.95
    assert classifier_b.accuracy >= 0.95
    assert param_checksum(classifier.net) != param_checksum(classifier_b.net)


def test_classifier_confident_on_training_frames(classifier, sign_data):
    train = np.setdiff1d(np.arange(len(sign_data)), classifier.holdout_idx)[:1000]
    p = classifier.probabilities(sign_data.float_frames(train))
    assert np.mean(p[np.arange(len(train)), sign_data.labels[train]] > 0.5) >= 0.95


def test_probabilities_on_simplex(classifier):
    x = np.random.default_rng(0).uniform(size=(8, 64, 64, 3))
    p = classifier.probabilities(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert class_probabilities(classifier, x[0]).shape == (17,)


def test_noise_frame_not_confident(classifier):
    x = np.random.default_rng(1).uniform(size=(20, 64, 64, 3))
    assert np.median(classifier.probabilities(x).max(axis=1)) < 0.5


def test_probability_gradient_finite_differences(classifier, sign_data):
    frame = sign_data.float_frames([0])[0].astype(np.float64)
    label = sign_data.labels[0]
    w = np.zeros(17)
    w[label] = 1.0
    g = class_probabilities_backward(classifier, frame, w)
    rng = np.random.default_rng(0)
    net = classifier.net
    import copy

    import torch

    dnet = copy.deepcopy(net).double()

    def f(x):
        with torch.no_grad():
            t = torch.from_numpy(x).permute(2, 0, 1)[None]
            return float(torch.softmax(dnet(t), dim=1)[0, label])

    # probe where the gradient is non-negligible so the relative error is meaningful
    flat = np.argsort(-np.abs(g).ravel())[:200]
    picks = rng.choice(flat, 5, replace=False)
    h = 1e-4
    for k in picks:
        idx = np.unravel_index(k, frame.shape)
        a, b = frame.copy(), frame.copy()
        a[idx] += h
        b[idx] -= h
        fd = (f(a) - f(b)) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-3 * abs(fd) + 1e-9


def test_kind_mismatch(classifier, detector):
    frame = np.zeros((64, 64, 3))
    with pytest.raises(UsageError):
        box_scores(classifier, frame, 0)
    with pytest.raises(UsageError):
        class_probabilities(detector, frame)


def test_detector_detects_held_out_signs(detector, detector_data):
    test = detector.holdout_idx[detector_data.labels[detector.holdout_idx] >= 0]
    hit = detector.detected(detector_data.float_frames(test), detector_data.labels[test])
    assert hit.mean() >= 0.90


def test_detector_quiet_on_empty_scenes(detector, world):
    rng = np.random.default_rng(3)
    envs = world.sample_envs(100, rng)
    frames = world.frames(np.full(100, -1), envs, seed=4)
    counts = [detector.detection_count(f) for f in frames]
    assert np.mean(np.array(counts) == 0) >= 0.90
    assert box_scores(detector, frames[0], 0) == [] or counts[0] > 0


def test_detection_monotone_in_threshold(detector, detector_data):
    frame = detector_data.float_frames([0])[0]
    counts = [detector.detection_count(frame, t) for t in (0.9, 0.6, 0.4, 0.2, 0.05)]
    assert counts == sorted(counts)


def test_box_scores_in_unit_interval(detector, detector_data):
    idx = np.flatnonzero(detector_data.labels >= 0)[:10]
    for i in idx:
        s = box_scores(detector, detector_data.float_frames([i])[0], int(detector_data.labels[i]))
        assert all(0.0 <= v <= 1.0 for v in s)


def test_box_score_gradient_finite_differences(detector, detector_data):
    import copy

    import torch

    from lenspatch.victim import box_score_torch

    i = int(np.flatnonzero(detector_data.labels >= 0)[0])
    frame = detector_data.float_frames([i])[0].astype(np.float64)
    label = int(detector_data.labels[i])
    assert box_scores(detector, frame, label)
    g = mean_box_score_backward(detector, frame, label)
    dnet = copy.deepcopy(detector.net).double()

    def f(x):
        with torch.no_grad():
            t = torch.from_numpy(x).permute(2, 0, 1)[None]
            return float(box_score_torch(detector, t, label, net=dnet)[0])

    flat = np.argsort(-np.abs(g).ravel())[:200]
    # the net is piecewise linear; a tiny step in double precision stays on one linear piece
    h = 1e-7
    for k in np.random.default_rng(1).choice(flat, 5, replace=False):
        idx = np.unravel_index(k, frame.shape)
        a, b = frame.copy(), frame.copy()
        a[idx] += h
        b[idx] -= h
        fd = (f(a) - f(b)) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-3 * abs(fd) + 1e-9


def test_victim_checkpoint_round_trip(classifier, tmp_path):
    from lenspatch.victim import VictimModel

    classifier.save(tmp_path / "c.ckpt")
    back = VictimModel.load(tmp_path / "c.ckpt")
    assert param_checksum(back.net) == param_checksum(classifier.net)
    assert back.input_sizes == classifier.input_sizes
    x = np.random.default_rng(2).uniform(size=(3, 64, 64, 3))
    np.testing.assert_array_equal(back.probabilities(x), classifier.probabilities(x))


def test_env_sample_domain():
    from lenspatch.errors import DomainError

    with pytest.raises(DomainError):
        EnvSample(perspective_deg=31.0)
    with pytest.raises(DomainError):
        EnvSample(scale=0.2)
