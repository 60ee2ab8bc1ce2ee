"""Grasp generator: training dynamics, prediction contracts, persistence."""

import dataclasses

import numpy as np
import pytest

from tacgrasp import data_io as dio
from tacgrasp import generator as gen
from tacgrasp import sim, tactile
from tacgrasp.catalog import TEST_OBJECTS, load_catalog
from tacgrasp.errors import DataError, ModelError, ValidationError
from tacgrasp.nn import LinearLayer

CATALOG = load_catalog()


def constant_dataset(n=400, label=45.0, seed=0):
    rng = np.random.default_rng(seed)
    return [
        gen.GraspSample(
            s=rng.uniform(0.0, 50.0, 32),
            theta_deg=float(rng.uniform(0.0, 90.0)),
            a_deg=label,
        )
        for _ in range(n)
    ]


def identity_dataset(n=2000, seed=0):
    # Constant tactile context isolates the angle-to-angle mapping.
    rng = np.random.default_rng(seed)
    thetas = rng.uniform(0.0, 90.0, n)
    return [
        gen.GraspSample(s=np.full(32, 10.0), theta_deg=float(t), a_deg=float(t))
        for t in thetas
    ]


class TestTraining:
    def test_constant_labels_fit_exactly(self):
        model, history = gen.train_generator(constant_dataset(), seed=1)
        assert history["val_mse"][-1] <= 1e-3
        assert history["train_mse"][-1] <= 1e-3

    def test_identity_mapping_fits_below_percent_of_variance(self):
        data = identity_dataset()
        model, history = gen.train_generator(data, seed=2)
        var = float(np.var([s.a_deg for s in data]))
        assert history["val_mse"][-1] <= 0.01 * var
        assert gen.predict_initial_grasp(model, np.full(32, 10.0), 30.0) == pytest.approx(
            30.0, abs=2.0
        )

    def test_train_history_non_increasing_on_identity(self):
        _, history = gen.train_generator(identity_dataset(), seed=3)
        diffs = np.diff(history["train_mse"])
        assert np.all(diffs <= 1e-12)

    def test_history_shape_matches_epochs(self):
        config = gen.GeneratorConfig(epochs=7)
        _, history = gen.train_generator(constant_dataset(n=50), seed=1, config=config)
        assert history["train_mse"].shape == (7,)
        assert history["val_mse"].shape == (7,)

    def test_deterministic_given_seed(self):
        data = identity_dataset(n=200)
        model_a, hist_a = gen.train_generator(data, seed=9)
        model_b, hist_b = gen.train_generator(data, seed=9)
        assert np.array_equal(hist_a["train_mse"], hist_b["train_mse"])
        assert np.array_equal(hist_a["val_mse"], hist_b["val_mse"])
        for la, lb in zip(model_a.layers, model_b.layers):
            assert np.array_equal(la.w, lb.w)
            assert np.array_equal(la.b, lb.b)

    def test_invariant_to_sample_order(self):
        data = identity_dataset(n=200)
        model_a, _ = gen.train_generator(data, seed=9)
        model_b, _ = gen.train_generator(list(reversed(data)), seed=9)
        for la, lb in zip(model_a.layers, model_b.layers):
            assert np.array_equal(la.w, lb.w)
            assert np.array_equal(la.b, lb.b)
        assert np.array_equal(model_a.feature_mean, model_b.feature_mean)

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            gen.train_generator(constant_dataset(n=9), seed=1)

    def test_sample_validation(self):
        with pytest.raises(ValidationError):
            gen.GraspSample(s=np.full(32, -1.0), theta_deg=10.0, a_deg=20.0)
        with pytest.raises(ValidationError):
            gen.GraspSample(s=np.zeros(32), theta_deg=10.0, a_deg=91.0)


@pytest.fixture(scope="module")
def trained():
    model, _ = gen.train_generator(identity_dataset(n=200), seed=4)
    return model


class TestPrediction:
    def test_pure_function(self, trained):
        s = np.full(32, 10.0)
        assert gen.predict_initial_grasp(trained, s, 40.0) == gen.predict_initial_grasp(
            trained, s, 40.0
        )

    def test_zeroed_output_layer_predicts_zero(self, trained):
        layers = list(trained.layers)
        layers[2] = LinearLayer(
            w=np.zeros_like(layers[2].w),
            b=np.zeros_like(layers[2].b),
            activation="identity",
        )
        zeroed = dataclasses.replace(trained, layers=tuple(layers))
        assert gen.predict_initial_grasp(zeroed, np.full(32, 25.0), 60.0) == 0.0

    def test_output_clamped_to_actuator_range(self, trained):
        layers = list(trained.layers)
        for bias, expect in ((1e4, 90.0), (-1e4, 0.0)):
            layers[2] = LinearLayer(
                w=np.zeros_like(trained.layers[2].w),
                b=np.array([bias]),
                activation="identity",
            )
            forced = dataclasses.replace(trained, layers=tuple(layers))
            assert gen.predict_initial_grasp(forced, np.zeros(32), 45.0) == expect

    def test_batch_matches_scalar(self, trained):
        rng = np.random.default_rng(0)
        s = rng.uniform(0.0, 30.0, (5, 32))
        theta = rng.uniform(0.0, 90.0, 5)
        batch = gen.predict_batch(trained, s, theta)
        for i in range(5):
            assert batch[i] == pytest.approx(
                gen.predict_initial_grasp(trained, s[i], theta[i]), abs=1e-12
            )


class TestPersistence:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        model, history = gen.train_generator(identity_dataset(n=200), seed=5)
        path = tmp_path / "generator.tgm"
        gen.save_generator(path, model, history)
        loaded, loaded_history = gen.load_generator(path)
        s = np.full(32, 12.0)
        assert gen.predict_initial_grasp(loaded, s, 33.0) == gen.predict_initial_grasp(
            model, s, 33.0
        )
        assert np.array_equal(loaded_history["train_mse"], history["train_mse"])

    def test_wrong_kind_rejected(self, tmp_path):
        from tacgrasp.nn import save_model

        path = tmp_path / "other.tgm"
        save_model(path, "mystery", {}, {"w": np.zeros((2, 2))})
        with pytest.raises(ModelError):
            gen.load_generator(path)

    def test_missing_arrays_rejected(self, tmp_path):
        from tacgrasp.nn import save_model

        path = tmp_path / "partial.tgm"
        save_model(path, "generator", {"lr": 0.001, "batch": 64, "epochs": 50}, {})
        with pytest.raises(ModelError):
            gen.load_generator(path)


class TestFromEpisodes:
    def test_samples_carry_final_angle_label(self):
        episode = dio.scripted_expert_episode(CATALOG["soda_can"], "gp", 3)
        samples = gen.samples_from_episodes([(episode.header, list(episode.frames))])
        assert len(samples) == len(episode.frames)
        final = episode.frames[-1].theta_deg
        assert all(s.a_deg == final for s in samples)

    def test_non_gp_episodes_rejected(self):
        episode = dio.scripted_expert_episode(CATALOG["soda_can"], "stab_pos", 3)
        with pytest.raises(DataError):
            gen.samples_from_episodes([(episode.header, list(episode.frames))])


class TestClosedLoopProperty:
    def test_predicted_grasp_holds_every_test_object(self):
        episodes = []
        for obj in CATALOG.values():
            for seed in (0, 1):
                ep = dio.scripted_expert_episode(obj, "gp", seed)
                episodes.append((ep.header, list(ep.frames)))
        model, _ = gen.train_generator(gen.samples_from_episodes(episodes), seed=11)

        for name in TEST_OBJECTS:
            obj = CATALOG[name]
            state = sim.reset(obj, seed=77)
            state = sim.set_target_angle(state, sim.THETA_MAX_DEG)
            while not sim.contact_state(state).in_contact:
                state = sim.step(state)
            taxels = tactile.render_taxels(state).values
            a_deg = gen.predict_initial_grasp(model, taxels, state.gripper.theta_deg)
            state = sim.set_target_angle(state, a_deg)
            for _ in range(2 * sim.TICK_HZ):
                state = sim.step(state)
            assert not state.dropped, name
            assert state.gripper.normal_force_n > 0.0, name
