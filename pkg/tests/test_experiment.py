import numpy as np
import pytest

from imslearn.autodiff import Tape
from imslearn.environments import PartitionConfig, soft_kmeans
from imslearn.errors import ConfigError, DataError
from imslearn.experiment import (
    LabeledDataset,
    MlpModel,
    RunReport,
    SynthConfig,
    class_directions,
    cosine_lr,
    evaluate,
    forward,
    gen_spurious,
    init_mlp,
    load_model,
    mi_profile,
    mi_profile_csv,
    param_dict,
    save_model,
    tape_forward,
    train,
)
from imslearn.objectives import TrainConfig


def tiny_dataset(n=120, seed=0):
    cfg = SynthConfig(
        train_per_class=n // 2,
        test_per_class=n // 2,
        spurious_dims=2,
        noise_dims=1,
        seed=seed,
    )
    return gen_spurious(cfg)


def fast_config(**kw):
    base = dict(method="ims", epochs=3, batch_size=20, learning_rate=0.05, k=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestModel:
    def test_init_shapes_and_bounds(self):
        m = init_mlp([5, 8, 3], seed=0)
        assert m.layer_sizes == (5, 8, 3)
        assert m.weights[0].shape == (5, 8)
        assert m.biases[1].shape == (3,)
        assert np.abs(m.weights[0]).max() <= 1.0 / np.sqrt(5)
        assert np.abs(m.weights[1]).max() <= 1.0 / np.sqrt(8)

    def test_init_deterministic(self):
        a = init_mlp([4, 6, 2], seed=3)
        b = init_mlp([4, 6, 2], seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_init_validation(self):
        with pytest.raises(ConfigError, match="activation"):
            init_mlp([3, 2], activation="sigmoid")
        with pytest.raises(ConfigError, match="layer sizes"):
            init_mlp([3])

    def test_forward_hand_case(self):
        # one hidden unit, identity-ish weights: h = tanh(x), logit = 2 h
        m = MlpModel(
            weights=[np.array([[1.0]]), np.array([[2.0]])],
            biases=[np.zeros(1), np.zeros(1)],
        )
        hiddens, logits = forward(m, np.array([[0.5]]))
        assert hiddens[0][0, 0] == pytest.approx(np.tanh(0.5))
        assert logits[0, 0] == pytest.approx(2 * np.tanh(0.5))

    def test_tape_forward_matches_numpy_forward(self):
        rng = np.random.default_rng(1)
        m = init_mlp([4, 6, 5, 3], seed=1)
        x = rng.standard_normal((7, 4))
        hiddens, logits = forward(m, x)
        tape = Tape()
        nodes = {k: tape.input(v, name=k) for k, v in param_dict(m).items()}
        h_nodes, logits_node = tape_forward(tape, m, nodes, x)
        assert np.array_equal(logits_node.value, logits)
        assert all(np.array_equal(hn.value, h) for hn, h in zip(h_nodes, hiddens))

    def test_relu_activation_path(self):
        m = init_mlp([3, 4, 2], activation="relu", seed=2)
        hiddens, _ = forward(m, np.random.default_rng(2).standard_normal((5, 3)))
        assert hiddens[0].min() >= 0.0


class TestModelSerialization:
    def test_round_trip_is_bitwise(self, tmp_path):
        m = init_mlp([6, 10, 4, 3], activation="relu", seed=4)
        path = tmp_path / "model.bin"
        save_model(m, path)
        loaded = load_model(path)
        assert loaded.activation == "relu"
        assert loaded.layer_sizes == m.layer_sizes
        for a, b in zip(m.weights + m.biases, loaded.weights + loaded.biases):
            assert a.tobytes() == b.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            load_model(path)

    def test_bad_version(self, tmp_path):
        m = init_mlp([3, 2], seed=0)
        path = tmp_path / "model.bin"
        save_model(m, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="version"):
            load_model(path)

    def test_truncation(self, tmp_path):
        m = init_mlp([3, 2], seed=0)
        path = tmp_path / "model.bin"
        save_model(m, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_model(path)


class TestSyntheticData:
    def test_shapes_tags_and_balance(self):
        cfg = SynthConfig(seed=0)
        tr, te = gen_spurious(cfg)
        assert tr.features.shape == (600, cfg.dim)
        assert te.features.shape == (600, cfg.dim)
        assert np.bincount(tr.labels).tolist() == [300, 300]
        assert set(te.tags.tolist()) == {"shift"}
        # per-class regime counts follow the majority fraction exactly
        for c in (0, 1):
            picked = tr.tags[tr.labels == c]
            assert (picked == "major").sum() == 225
            assert (picked == "minor").sum() == 75

    def test_spurious_correlation_signs(self):
        cfg = SynthConfig(train_per_class=2000, seed=1)
        tr, te = gen_spurious(cfg)
        parity = np.where(tr.labels % 2 == 0, 1.0, -1.0)
        col = cfg.invariant_dims  # first spurious column
        major = tr.tags == "major"
        c_major = np.corrcoef(tr.features[major][:, col], parity[major])[0, 1]
        c_minor = np.corrcoef(tr.features[~major][:, col], parity[~major])[0, 1]
        assert c_major == pytest.approx(0.9, abs=0.03)
        assert c_minor == pytest.approx(-0.9, abs=0.05)
        parity_te = np.where(te.labels % 2 == 0, 1.0, -1.0)
        c_test = np.corrcoef(te.features[:, col], parity_te)[0, 1]
        assert c_test == pytest.approx(-0.9, abs=0.03)

    def test_invariant_means_are_antipodal(self):
        cfg = SynthConfig(
            train_per_class=3000, separation=1.5, invariant_dims=8, seed=2
        )
        tr, _ = gen_spurious(cfg)
        direction = class_directions(cfg.classes, cfg.invariant_dims)[0]
        proj = tr.features[:, : cfg.invariant_dims] @ direction
        assert proj[tr.labels == 0].mean() == pytest.approx(1.5, abs=0.1)
        assert proj[tr.labels == 1].mean() == pytest.approx(-1.5, abs=0.1)
        # off-direction invariant coordinates carry no class signal
        residual = tr.features[:, : cfg.invariant_dims] - proj[:, None] * direction
        gap = residual[tr.labels == 0].mean(axis=0) - residual[tr.labels == 1].mean(axis=0)
        assert np.abs(gap).max() < 0.15

    def test_class_directions_orthonormal(self):
        basis = class_directions(6, 7)
        assert basis.shape == (3, 7)
        assert np.allclose(basis @ basis.T, np.eye(3), atol=1e-12)

    def test_deterministic(self):
        a_tr, a_te = gen_spurious(SynthConfig(seed=5))
        b_tr, b_te = gen_spurious(SynthConfig(seed=5))
        assert a_tr.features.tobytes() == b_tr.features.tobytes()
        assert a_te.features.tobytes() == b_te.features.tobytes()
        assert np.array_equal(a_tr.labels, b_tr.labels)

    def test_validation(self):
        with pytest.raises(ConfigError, match="classes"):
            gen_spurious(SynthConfig(classes=1))
        with pytest.raises(ConfigError, match="invariant"):
            gen_spurious(SynthConfig(classes=6, invariant_dims=2))
        with pytest.raises(ConfigError, match="train_corr"):
            gen_spurious(SynthConfig(train_corr=1.5))


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        tr, _ = tiny_dataset()
        path = tmp_path / "train.csv"
        tr.save_csv(path)
        back = LabeledDataset.load_csv(path)
        assert np.array_equal(back.features, tr.features)
        assert np.array_equal(back.labels, tr.labels)
        assert back.tags.tolist() == tr.tags.tolist()

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,label,tag\n1.0,2.0,0,major\n")
        with pytest.raises(DataError, match="f_0"):
            LabeledDataset.load_csv(path)

    def test_row_width_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("f_0,label,tag\n1.0,0\n")
        with pytest.raises(DataError, match="fields"):
            LabeledDataset.load_csv(path)


class TestTraining:
    def test_cosine_schedule(self):
        assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
        values = [cosine_lr(0.1, t, 10) for t in range(10)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] > 0.0

    def test_evaluate_ties_go_to_lowest_class(self):
        m = MlpModel(
            weights=[np.zeros((2, 2))],
            biases=[np.zeros(2)],
        )
        ds = LabeledDataset(
            features=np.ones((4, 2)),
            labels=np.array([0, 0, 1, 1]),
            tags=np.array(["t"] * 4, dtype=object),
        )
        assert evaluate(m, ds) == 0.5  # all predictions class 0

    def test_training_is_bitwise_deterministic(self):
        tr, te = tiny_dataset()
        model = init_mlp([tr.dim, 8, 4, 2], seed=0)
        cfg = fast_config()
        m1, r1 = train(model, tr, cfg, eval_data=te)
        m2, r2 = train(model, tr, cfg, eval_data=te)
        for a, b in zip(m1.weights + m1.biases, m2.weights + m2.biases):
            assert a.tobytes() == b.tobytes()
        assert r1 == r2  # wall time is excluded from comparison

    def test_report_equality_ignores_wall_time(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        _, r1 = train(model, tr, fast_config(epochs=2))
        r2 = RunReport(**{**r1.__dict__, "wall_time_s": r1.wall_time_s + 5.0})
        assert r1 == r2

    def test_original_model_untouched(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        before = [w.copy() for w in model.weights]
        train(model, tr, fast_config(epochs=2))
        assert all(np.array_equal(a, b) for a, b in zip(model.weights, before))

    def test_loss_decomposition_stays_tight(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 4, 2], seed=0)
        _, report = train(model, tr, fast_config())
        assert report.decomposition_max_defect < 1e-10

    def test_environment_sizes_reported(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 4, 2], seed=0)
        _, report = train(model, tr, fast_config(k=3))
        assert report.env_sizes is not None
        assert sum(report.env_sizes) == tr.n
        assert len(report.env_sizes) == 3

    def test_erm_reports_no_environments(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        _, report = train(model, tr, fast_config(method="erm", epochs=2))
        assert report.env_sizes is None

    def test_precomputed_assignment_is_used(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        assignment = soft_kmeans(tr.features, PartitionConfig(k=2, seed=0))
        _, report = train(model, tr, fast_config(k=2, epochs=2), assignment=assignment)
        assert report.env_sizes == tuple(
            int(c) for c in np.bincount(assignment.hard_labels(), minlength=2)
        )

    def test_assignment_row_mismatch(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        bad = soft_kmeans(tr.features[:50], PartitionConfig(k=2, seed=0))
        with pytest.raises(DataError, match="rows"):
            train(model, tr, fast_config(epochs=2), assignment=bad)

    def test_batch_size_larger_than_dataset(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        with pytest.raises(DataError, match="batch_size"):
            train(model, tr, fast_config(batch_size=4096))

    def test_epoch_records_cover_all_epochs(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        _, report = train(model, tr, fast_config(epochs=4))
        assert [e.epoch for e in report.epochs] == [0, 1, 2, 3]
        assert report.epochs[0].mean_alignment == 0.0  # warm-up epoch is plain CE
        assert report.epochs[1].mean_alignment != 0.0

    def test_training_improves_on_random_init(self):
        tr, te = tiny_dataset()
        model = init_mlp([tr.dim, 8, 4, 2], seed=0)
        before = evaluate(model, tr)
        trained, report = train(model, tr, fast_config(method="erm", epochs=8))
        assert report.final_train_accuracy > max(before, 0.7)

    def test_zero_penalties_reduce_to_erm_exactly(self):
        # with eta=beta=0 no partition is fit and the trajectory is the
        # ERM one, bit for bit, regardless of environment flags
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 8, 2], seed=0)
        degenerate = fast_config(
            method="ims", eta=0.0, beta=0.0, hard_env=True, normalize_env_risks=True
        )
        m_ims, r_ims = train(model, tr, degenerate)
        m_erm, r_erm = train(model, tr, fast_config(method="erm"))
        for a, b in zip(m_ims.weights + m_ims.biases, m_erm.weights + m_erm.biases):
            assert a.tobytes() == b.tobytes()
        assert r_ims.env_sizes is None
        assert r_ims.final_train_accuracy == r_erm.final_train_accuracy


class TestMiProfile:
    def test_one_record_per_hidden_layer(self):
        tr, te = tiny_dataset()
        model = init_mlp([tr.dim, 8, 4, 2], seed=0)
        records = mi_profile(model, te, max_rows=64)
        assert [r.layer for r in records] == [1, 2]
        for r in records:
            assert np.isfinite(r.i_x_phi_bits) and np.isfinite(r.i_y_phi_bits)
            assert r.i_x_phi_bits > 0.0

    def test_csv_layout(self):
        tr, te = tiny_dataset()
        model = init_mlp([tr.dim, 6, 2], seed=0)
        text = mi_profile_csv(mi_profile(model, te, max_rows=32))
        lines = text.strip().split("\n")
        assert lines[0] == "layer,i_x_phi_bits,i_y_phi_bits"
        assert len(lines) == 2 and lines[1].startswith("1,")

    def test_needs_enough_rows(self):
        tr, _ = tiny_dataset()
        model = init_mlp([tr.dim, 6, 2], seed=0)
        small = LabeledDataset(
            features=tr.features[:8], labels=tr.labels[:8], tags=tr.tags[:8]
        )
        with pytest.raises(DataError, match="16"):
            mi_profile(model, small)
