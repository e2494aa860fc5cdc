import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radcon.netmodel import ModelConfig, init_model
from radcon.pseudolabel import (PseudoLabel, generate_pseudo_labels, label_arrays, labels_from_probs,
                                read_pseudo_labels, write_pseudo_labels)
from radcon.synthdata import generate_corpus, mask_labels


def test_threshold_examples():
    assert labels_from_probs(0, np.full((1, 5), 0.2), 0.5) == []
    kept = labels_from_probs(3, np.array([[0.95, 0.05, 0, 0, 0]]), 0.9)
    assert kept == [PseudoLabel(3, 0, 0, 0.95)]
    # strictly greater
    assert labels_from_probs(0, np.array([[0.9, 0.1]]), 0.9) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95), st.floats(0.0, 0.5))
def test_higher_threshold_keeps_a_subset(seed, t, gap):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(5, 0.3), size=40)
    loose = set(labels_from_probs(0, probs, t))
    tight = set(labels_from_probs(0, probs, min(t + gap, 0.99)))
    assert tight <= loose


@pytest.fixture(scope="module")
def setup():
    frames = mask_labels(generate_corpus(30, seed=2), 0.3, seed=0)
    return init_model(ModelConfig(), 0), frames


def test_only_unlabeled_frames_and_deterministic(setup):
    model, frames = setup
    a = generate_pseudo_labels(model, frames, threshold=0.3)
    b = generate_pseudo_labels(model, frames, threshold=0.3)
    assert a == b and a == sorted(a)
    labeled = {f.frame_id for f in frames if f.labeled}
    assert a and not any(p.frame_id in labeled for p in a)
    assert all(p.confidence > 0.3 for p in a)


def test_threshold_range(setup):
    model, frames = setup
    for bad in (0.0, 1.0, 1.2):
        with pytest.raises(ValueError):
            generate_pseudo_labels(model, frames, threshold=bad)


def test_file_roundtrip_and_label_arrays(setup, tmp_path):
    model, frames = setup
    labels = generate_pseudo_labels(model, frames, threshold=0.3)
    write_pseudo_labels(tmp_path / "p.jsonl", labels)
    assert read_pseudo_labels(tmp_path / "p.jsonl") == labels
    arrays = label_arrays(frames, labels)
    for f, arr in zip(frames, arrays):
        if f.labeled:
            assert (arr == f.labels).all()
    first = labels[0]
    pos = next(i for i, f in enumerate(frames) if f.frame_id == first.frame_id)
    assert arrays[pos][first.point_index] == first.class_id


def test_accuracy_rises_with_threshold():
    from radcon import trainer
    from radcon.config import TrainConfig
    from radcon.pipeline import frame_probabilities

    thresholds = (0.3, 0.5, 0.7, 0.9)
    acc = []
    for seed in range(3):
        frames = generate_corpus(150, seed=10 + seed)
        train, held = frames[:100], frames[100:]
        cfg = TrainConfig(regime="supervised", seed=seed, n_minibatch=16, n_sample=40, steps_per_epoch=10,
                          epochs_supervised=3)
        start = init_model(trainer.model_config_for(cfg, train), seed, projection=False)
        model = trainer.train_supervised(cfg, start, train)
        probs = frame_probabilities(model, held, 100, seed)
        row = []
        for t in thresholds:
            kept = [(pl, f) for f, p in zip(held, probs) for pl in labels_from_probs(f.frame_id, p, t)]
            row.append(np.mean([f.labels[pl.point_index] == pl.class_id for pl, f in kept]))
        acc.append(row)
    mean = np.mean(acc, axis=0)
    assert np.all(np.diff(mean) >= 0)
