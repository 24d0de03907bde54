import math
from pathlib import Path

import numpy as np
import pytest

from sture.config import DatasetSpec, TrainConfig
from sture.errors import ContractViolation, DimensionError, DivergenceError, ParseError, SamplingError
from sture.mot_io import load_train_config
from sture.mutual_trainer import (
    Adam, AffinityHead, MutualModel, SampledBatch, Tracklet, TrackletDataset, augment, backward, build_pairs,
    export_embeddings, fit_length, forward_losses, generate_dataset, initial_state, load_checkpoint, objective,
    retrieval_accuracy, sample_batch, save_checkpoint, train,
)

WIDTH = 6


def _batch(rng, P=2, Q=2, T=3, width=WIDTH):
    """Hand-built batch with distinct random frames."""
    sequences = rng.standard_normal((P * Q, T, width))
    seq_labels = np.repeat(np.arange(P), Q)
    det_labels = np.repeat(seq_labels, T)
    pairs = build_pairs(seq_labels, det_labels, T, rng)
    return SampledBatch(sequences, sequences.reshape(-1, width).copy(), seq_labels, det_labels, pairs, P, Q, T)


def _model(config, seed=0, identities=2):
    return MutualModel.initialize(WIDTH, config, identities, np.random.default_rng(seed))


def _gradient_agreement(batch, model, config, h=1e-5):
    """(agreeing, total) parameter entries between the reverse pass and central differences."""
    _, inter = forward_losses(batch, model, config)
    analytic = backward(inter, selective=False)
    agreeing = total = 0
    for name, array in model.parameters().items():
        for index in np.ndindex(array.shape):
            original = array[index]
            step = h * max(1.0, abs(original))
            array[index] = original + step
            plus = objective(batch, model, config)
            array[index] = original - step
            minus = objective(batch, model, config)
            array[index] = original
            numeric = (plus - minus) / (2 * step)
            a = analytic[name][index]
            if abs(a - numeric) <= 1e-4 * max(abs(a), abs(numeric)) + 1e-7:
                agreeing += 1
            total += 1
    return agreeing, total


def test_reverse_pass_matches_central_differences(small_train_config):
    agreeing = total = 0
    for seed in range(20):
        config = TrainConfig.from_mapping(dict(small_train_config.to_dict(), identity_loss=seed % 2 == 1))
        rng = np.random.default_rng(seed)
        batch = _batch(rng)
        model = _model(config, seed)
        # nonzero biases keep rectifier inputs away from their kink
        for name, array in model.parameters().items():
            if name.split(".")[1].startswith("b"):
                array[...] = rng.normal(0.0, 0.1, array.shape)
        ok, count = _gradient_agreement(batch, model, config)
        agreeing += ok
        total += count
    assert agreeing / total >= 0.99


def test_selective_pass_shields_the_sequence_encoder(small_train_config, rng):
    batch = _batch(rng)
    model = _model(small_train_config)
    _, inter = forward_losses(batch, model, small_train_config)

    cross_only = backward(inter, selective=True, terms=("cross",))
    assert all(not cross_only[name].any() for name in cross_only if name.startswith("seq."))
    assert any(cross_only[name].any() for name in cross_only if name.startswith("det."))

    selective = backward(inter, selective=True)
    full = backward(inter, selective=False)
    for name in selective:
        if name.startswith("seq."):
            continue
        np.testing.assert_array_equal(selective[name], full[name])
    assert any(not np.array_equal(selective[n], full[n]) for n in selective if n.startswith("seq."))


def test_selective_step_matches_a_step_without_the_cross_loss(small_train_config, rng):
    batch = _batch(rng)
    model = _model(small_train_config)
    _, inter = forward_losses(batch, model, small_train_config)
    with_cross = model.copy()
    without_cross = model.copy()
    Adam(lr=1e-2).step(with_cross.parameters(), backward(inter, selective=True))
    Adam(lr=1e-2).step(without_cross.parameters(), backward(inter, selective=True, terms=("modality", "similarity")))
    a, b = with_cross.parameters(), without_cross.parameters()
    for name in a:
        if name.startswith("seq."):
            np.testing.assert_array_equal(a[name], b[name])
    assert any(not np.array_equal(a[n], b[n]) for n in a if n.startswith("det."))


def test_zero_weights_give_closed_form_losses(small_train_config, rng):
    model = _model(small_train_config)
    for array in model.parameters().values():
        array[...] = 0.0
    losses, _ = forward_losses(_batch(rng), model, small_train_config)
    assert losses.cross == 0.0
    assert losses.modality == pytest.approx(2 * small_train_config.margin)
    assert losses.similarity == pytest.approx(math.log(2))
    assert losses.total == pytest.approx(2 * small_train_config.margin + math.log(2))


def test_affinity_head_layer_widths():
    assert AffinityHead.widths(2048) == (4096, 256, 32, 2)
    assert AffinityHead.widths(4) == (8, 1, 32, 2)


def test_match_probability_checks_dimension(rng):
    head = AffinityHead(4, rng)
    probs = head.match_probability(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    assert probs.shape == (3,)
    assert ((probs > 0) & (probs < 1)).all()
    with pytest.raises(DimensionError):
        head.match_probability(np.zeros(4), np.zeros(5))


def test_parameters_share_storage(small_train_config):
    model = _model(small_train_config)
    params = model.parameters()
    params["det.b0"][0] = 42.0
    assert model.det_encoder.params["b0"][0] == 42.0
    assert model.copy().parameters()["det.b0"] is not params["det.b0"]


def test_adam_first_step_moves_by_the_learning_rate():
    params = {"x": np.array([1.0, -2.0])}
    Adam(lr=0.1).step(params, {"x": np.array([4.0, -0.5])})
    np.testing.assert_allclose(params["x"], [0.9, -1.9], rtol=1e-6)


def test_generated_dataset_shares_prototypes_across_splits():
    spec = DatasetSpec(identities=3, sequences=2, frames=12, min_frames=12)
    train_set = generate_dataset(spec, "train")
    probe = generate_dataset(spec, "probe")
    assert train_set.identities == [0, 1, 2]
    assert len(train_set.tracklets) == 6
    for identity in range(3):
        a = np.concatenate([t.frames for t in train_set.by_identity()[identity]])[:, :spec.signal_dim]
        b = np.concatenate([t.frames for t in probe.by_identity()[identity]])[:, :spec.signal_dim]
        np.testing.assert_allclose(a.mean(axis=0), b.mean(axis=0), atol=0.1)
    assert not np.array_equal(train_set.tracklets[0].frames, probe.tracklets[0].frames)


def test_generated_dataset_is_deterministic(small_dataset_spec):
    a = generate_dataset(small_dataset_spec)
    b = generate_dataset(small_dataset_spec)
    for x, y in zip(a.tracklets, b.tracklets):
        np.testing.assert_array_equal(x.frames, y.frames)
    lengths = {t.frames.shape[0] for t in a.tracklets}
    assert min(lengths) >= small_dataset_spec.min_frames
    assert max(lengths) <= small_dataset_spec.frames


def test_fit_length_takes_a_window_of_recent_frames(rng):
    frames = np.arange(20, dtype=np.float64)[:, None]
    window = fit_length(frames, 4, 10, rng)
    assert window.shape == (4, 1)
    assert window[0, 0] >= 10
    np.testing.assert_array_equal(np.diff(window[:, 0]), 1.0)


def test_fit_length_pads_short_histories(rng):
    frames = np.arange(3, dtype=np.float64)[:, None]
    padded = fit_length(frames, 8, 100, rng)
    assert padded.shape == (8, 1)
    assert set(padded[:, 0]) == {0.0, 1.0, 2.0}
    assert (np.diff(padded[:, 0]) >= 0).all()


def test_sample_batch_layout(small_dataset_spec, rng):
    dataset = generate_dataset(small_dataset_spec)
    batch = sample_batch(dataset, P=2, Q=2, T=3, M=100, rng=rng)
    assert batch.sequences.shape == (4, 3, small_dataset_spec.input_dim)
    assert batch.detections.shape == (12, small_dataset_spec.input_dim)
    assert batch.N == 4
    assert batch.seq_labels[0] == batch.seq_labels[1] != batch.seq_labels[2]
    np.testing.assert_array_equal(batch.det_labels, np.repeat(batch.seq_labels, 3))
    assert batch.pairs.shape == (4 * 6, 3)
    for n, d, match in batch.pairs:
        assert match == int(batch.seq_labels[n] == batch.det_labels[d])
    assert not batch.substituted.any()


def test_sample_batch_needs_two_identities(rng):
    dataset = TrackletDataset([Tracklet(0, np.zeros((4, 3))), Tracklet(0, np.ones((4, 3)))], 3)
    with pytest.raises(SamplingError):
        sample_batch(dataset, P=2, Q=1, T=2, M=100, rng=rng)


def test_augment_only_touches_the_sequence_view(small_dataset_spec, rng):
    dataset = generate_dataset(small_dataset_spec)
    batch = sample_batch(dataset, P=2, Q=2, T=3, M=100, rng=rng)
    assert augment(batch, dataset, 0.0, rng) is batch
    noisy = augment(batch, dataset, 0.9, rng)
    np.testing.assert_array_equal(noisy.detections, batch.detections)
    np.testing.assert_array_equal(noisy.seq_labels, batch.seq_labels)
    kept = ~noisy.substituted
    np.testing.assert_array_equal(noisy.sequences[kept], batch.sequences[kept])
    assert noisy.substituted.any()


def test_training_is_deterministic(small_dataset_spec, small_train_config):
    dataset = generate_dataset(small_dataset_spec)
    a = train(dataset, small_train_config)
    b = train(dataset, small_train_config)
    assert [r.row() for r in a.telemetry] == [r.row() for r in b.telemetry]
    for name, array in a.model.parameters().items():
        np.testing.assert_array_equal(array, b.model.parameters()[name])
    assert len(a.telemetry) == small_train_config.epochs


def test_zero_epochs_keep_the_initial_parameters(small_dataset_spec, small_train_config, tmp_path):
    dataset = generate_dataset(small_dataset_spec)
    config = TrainConfig.from_mapping(dict(small_train_config.to_dict(), epochs=0))
    state = train(dataset, config)
    initial, _ = initial_state(dataset, config)
    path = tmp_path / "checkpoint.stu"
    save_checkpoint(state.model, path)
    loaded = load_checkpoint(path)
    assert state.telemetry == []
    for name, array in initial.model.parameters().items():
        np.testing.assert_array_equal(state.model.parameters()[name], array)
        np.testing.assert_array_equal(loaded.parameters()[name], array.astype(np.float32))


def test_divergence_keeps_the_last_finite_parameters(small_dataset_spec, small_train_config):
    dataset = generate_dataset(small_dataset_spec)
    config = TrainConfig.from_mapping(dict(small_train_config.to_dict(), lr=1e200))
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train(dataset, config)
    last_good = info.value.last_good
    initial, _ = initial_state(dataset, config)
    assert last_good.epoch == 0
    for name, array in initial.model.parameters().items():
        np.testing.assert_array_equal(last_good.model.parameters()[name], array)


def test_checkpoint_round_trip_keeps_flags(small_train_config, tmp_path):
    config = TrainConfig.from_mapping(dict(small_train_config.to_dict(), attention=False, identity_loss=True))
    model = _model(config, identities=3)
    path = tmp_path / "model.stu"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert path.read_bytes()[:4] == b"STU1"
    assert loaded.seq_encoder.attention is False
    assert loaded.id_head is not None and loaded.id_head.output_dim == 3
    assert loaded.dim == config.D and loaded.input_dim == WIDTH
    for name, array in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name], array.astype(np.float32))


def test_corrupt_checkpoints(small_train_config, tmp_path):
    path = tmp_path / "model.stu"
    save_checkpoint(_model(small_train_config), path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(ParseError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_export_rows_are_grouped_by_identity(small_dataset_spec, small_train_config):
    dataset = generate_dataset(small_dataset_spec)
    model = MutualModel.initialize(small_dataset_spec.input_dim, small_train_config, 4, np.random.default_rng(0))
    rows = export_embeddings(model, dataset, T=3)
    frames = sum(t.frames.shape[0] for t in dataset.tracklets)
    assert len(rows) == frames + len(dataset.tracklets)
    keys = [(r.identity, r.split != "detection") for r in rows]
    assert keys == sorted(keys)
    assert all(r.vector.shape == (small_train_config.D,) for r in rows)


def test_retrieval_checks_dimensions(small_dataset_spec, small_train_config):
    probe = generate_dataset(small_dataset_spec, "probe")
    model = MutualModel.initialize(small_dataset_spec.input_dim + 1, small_train_config, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        retrieval_accuracy(model, probe, T=3)


def test_retrieval_needs_two_probe_tracklets():
    spec = DatasetSpec(identities=3, sequences=1, frames=6, min_frames=6)
    with pytest.raises(SamplingError):
        retrieval_accuracy(None, generate_dataset(spec, "probe"))


def test_retrieval_averages_seeded_gallery_draws(small_dataset_spec):
    probe = generate_dataset(small_dataset_spec, "probe")
    queries = sum(group[1].frames.shape[0] for group in probe.by_identity().values())
    accuracy = retrieval_accuracy(None, probe, T=3, rounds=4)
    assert accuracy == retrieval_accuracy(None, probe, T=3, rounds=4)
    assert (accuracy * 4 * queries) == pytest.approx(round(accuracy * 4 * queries))
    with pytest.raises(ContractViolation):
        retrieval_accuracy(None, probe, T=3, rounds=0)


def test_attention_model_starts_its_sequence_branch_at_half_scale(small_train_config):
    config = TrainConfig.from_mapping(dict(small_train_config.to_dict(), attention=True))
    plain = TrainConfig.from_mapping(dict(small_train_config.to_dict(), attention=False))
    with_attention, without = _model(config), _model(plain)
    np.testing.assert_array_equal(with_attention.seq_encoder.params["W1"], 0.5 * without.seq_encoder.params["W1"])
    np.testing.assert_array_equal(with_attention.seq_encoder.params["W0"], without.seq_encoder.params["W0"])
    np.testing.assert_array_equal(with_attention.det_encoder.params["W1"], without.det_encoder.params["W1"])
    # identical frames pool to exactly the frame encoding of the unscaled branch
    frames = np.tile(np.random.default_rng(3).standard_normal(WIDTH), (1, 4, 1))
    np.testing.assert_allclose(with_attention.seq_encoder.encode(frames), without.seq_encoder.encode(frames),
                               rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# Desk-scale training runs
# ---------------------------------------------------------------------------

DESK_RECIPE = Path(__file__).resolve().parents[1] / "config" / "desk.ini"


@pytest.fixture(scope="module")
def trained():
    spec = DatasetSpec()
    dataset = generate_dataset(spec, "train")
    full = train(dataset, load_train_config(DESK_RECIPE))
    plain = train(dataset, load_train_config(DESK_RECIPE, attention=False))
    return spec, full, plain


@pytest.mark.slow
def test_training_halves_the_cross_loss(trained):
    _, full, _ = trained
    assert full.telemetry[-1].cross <= 0.5 * full.telemetry[0].cross


@pytest.mark.slow
def test_learned_features_beat_raw_features(trained):
    spec, full, plain = trained
    probe = generate_dataset(spec, "probe")
    learned = retrieval_accuracy(full.model, probe)
    without_attention = retrieval_accuracy(plain.model, probe)
    raw = retrieval_accuracy(None, probe)
    assert learned >= 0.9
    assert raw <= 0.7
    assert learned > without_attention > raw


@pytest.mark.slow
def test_exported_detections_cluster_by_identity(trained):
    spec, full, _ = trained
    rows = [r for r in export_embeddings(full.model, generate_dataset(spec, "probe"), T=8) if r.split == "detection"]
    vectors = np.stack([r.vector for r in rows])
    labels = np.array([r.identity for r in rows])
    distances = np.linalg.norm(vectors[:, None, :] - vectors[None, :, :], axis=-1)
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(rows), dtype=bool)
    assert distances[same & off_diagonal].mean() < distances[~same].mean()


@pytest.mark.slow
def test_head_prefers_the_own_identity(trained):
    spec, full, _ = trained
    probe = generate_dataset(spec, "probe").by_identity()
    rng = np.random.default_rng(0)
    own, other = [], []
    for identity, tracklets in probe.items():
        pooled = full.model.seq_encoder.encode(fit_length(tracklets[0].frames, 8, 100, rng)[None])
        own.append(full.model.head.match_probability(pooled, full.model.det_encoder.encode(tracklets[1].frames[:1]))[0])
        foreign = probe[(identity + 1) % len(probe)][1].frames[:1]
        other.append(full.model.head.match_probability(pooled, full.model.det_encoder.encode(foreign))[0])
    assert np.mean(own) > 0.5
    assert np.mean(own) > np.mean(other)
