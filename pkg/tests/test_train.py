import math

import numpy as np
import pytest

from ordermarg.data import MixtureSpec, ShapeSpec, make_mixture_dataset, make_shape_dataset
from ordermarg.errors import ChecksumError, ConfigError, ContractError
from ordermarg.model import ModelConfig, TabularModel, UniformModel
from ordermarg.tokenizer import encode_batch, extract_patches, fit_codebook
from ordermarg.train import (ImageSource, TokenSource, TrainConfig, TrainingDiverged,
                             batch_orders, checkpoint_load, checkpoint_save, evaluate, lr_at,
                             new_state, random_crop, train, train_step)
from ordermarg.data import bayes_predict

SMALL = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, n_tokens=6, vocab=5, n_classes=3)


def small_source(seed=0):
    spec = MixtureSpec(n_classes=3, n_tokens=6, vocab=5, seed=seed)
    ds = make_mixture_dataset(spec, 40)
    return TokenSource(ds.tokens, ds.labels)


def params_of(state):
    return {k: p.data.copy() for k, p in state.model.params.items()}


class TestSchedule:
    cfg = TrainConfig(steps=1000, warmup=100, peak_lr=1e-3)

    def test_endpoints(self):
        assert lr_at(0, self.cfg) == 0.0
        assert lr_at(100, self.cfg) == 1e-3
        assert lr_at(1000, self.cfg) == pytest.approx(0.0, abs=1e-18)

    def test_peak_at_warmup_and_continuous(self):
        lrs = np.array([lr_at(s, self.cfg) for s in range(1001)])
        assert np.argmax(lrs) == 100
        assert np.abs(np.diff(lrs)).max() < 2e-5

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_at(1001, self.cfg)
        with pytest.raises(ContractError):
            lr_at(-1, self.cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=10, warmup=10)
        with pytest.raises(ConfigError):
            TrainConfig(mode="spiral")
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"stepz": 3})


class TestTrainStep:
    def test_zero_learning_rate_leaves_parameters(self):
        state = new_state(SMALL, TrainConfig(steps=5, warmup=0, peak_lr=0.0, batch_size=4))
        before = params_of(state)
        train(state, small_source())
        assert all(np.array_equal(before[k], p.data) for k, p in state.model.params.items())
        assert state.step == 5

    def test_raster_run_is_bit_reproducible(self):
        cfg = TrainConfig(steps=20, warmup=2, peak_lr=1e-2, batch_size=8, mode="raster", seed=4)
        a, b = new_state(SMALL, cfg), new_state(SMALL, cfg)
        la, lb = train(a, small_source()), train(b, small_source())
        assert la[-1]["loss"] == lb[-1]["loss"]
        assert all(np.array_equal(p.data, b.model.params[k].data)
                   for k, p in a.model.params.items())

    def test_memorizes_a_single_example(self):
        cfg = ModelConfig(n_layers=1, n_heads=2, d_model=32, d_ff=64, n_tokens=16, vocab=16,
                          n_classes=2)
        tcfg = TrainConfig(steps=2000, warmup=50, peak_lr=3e-3, batch_size=4, weight_decay=0.0)
        state = new_state(cfg, tcfg)
        x = np.random.default_rng(0).integers(0, 16, (1, 16))
        src = TokenSource(x, np.array([1]))
        best = np.inf
        while state.step < tcfg.steps and best >= 0.01:
            rng = np.random.default_rng([0, state.step])
            toks, labels = src.sample(rng, 4, tcfg)
            best = min(best, train_step(state, toks, labels, batch_orders(rng, 4, 16, "random_order")))
        assert best < 0.01, best

    def test_non_finite_parameters_abort(self):
        state = new_state(SMALL, TrainConfig(steps=5, warmup=0, peak_lr=1e-3, batch_size=2))
        state.model.params["tok_emb"].data[:] = np.nan
        with pytest.raises(TrainingDiverged):
            train(state, small_source())

    def test_empty_batch(self):
        state = new_state(SMALL, TrainConfig(steps=5, warmup=0))
        with pytest.raises(ContractError):
            train_step(state, np.zeros((0, 6), int), np.zeros(0, int), np.zeros((0, 6), int))

    def test_metrics_log(self, tmp_path):
        cfg = TrainConfig(steps=6, warmup=1, peak_lr=1e-3, batch_size=2, log_every=2)
        state = new_state(SMALL, cfg)
        train(state, small_source(), until=4, log_path=tmp_path / "m.csv")
        train(state, small_source(), log_path=tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr,wall_clock,eval_accuracy"
        assert [int(l.split(",")[0]) for l in lines[1:]] == [2, 4, 6]


class TestAugmentation:
    def test_orders(self):
        rng = np.random.default_rng(0)
        assert (batch_orders(rng, 3, 5, "raster") == np.arange(5)).all()
        perms = batch_orders(rng, 50, 5, "random_order")
        assert (np.sort(perms, axis=1) == np.arange(5)).all()
        assert len(np.unique(perms, axis=0)) > 10

    def test_crop_keeps_shape_and_content(self):
        imgs = np.random.default_rng(0).random((4, 8, 8))
        out = random_crop(imgs, 2, np.random.default_rng(1))
        assert out.shape == imgs.shape
        assert np.isin(out, imgs).all()

    def test_noise_augmentation_flips_tokens(self):
        ds = make_shape_dataset(ShapeSpec(n_per_class=8, seed=0))
        cb = fit_codebook(extract_patches(ds.images, 8, 8).reshape(-1, 64), 16, 10, 0, 8, 8)
        src = ImageSource(ds.images, ds.labels, cb)
        cfg = TrainConfig(noise_tmax=0.5)
        rng = np.random.default_rng(3)
        toks, labels = src.sample(rng, 16, cfg)
        idx = np.random.default_rng(3).integers(0, len(ds.labels), 16)
        assert np.array_equal(labels, ds.labels[idx])
        assert (toks != encode_batch(ds.images[idx], cb)).any()


class TestEvaluate:
    def test_oracle_equals_bayes(self):
        spec = MixtureSpec(seed=2, concentration=1.0)
        te = make_mixture_dataset(spec, 200).subset("test")
        rec = evaluate(TabularModel(spec.log_tables), te.tokens, te.labels, 2, "lower_bound", 0)
        assert rec["accuracy"] == float(np.mean(bayes_predict(spec, te.tokens) == te.labels))
        assert rec["K"] == 2 and rec["strategy"] == "lower_bound" and rec["n"] == len(te.labels)

    def test_uniform_model_is_chance(self):
        ds = make_mixture_dataset(MixtureSpec(seed=1), 125)
        rec = evaluate(UniformModel(8, 16, 16), ds.tokens, ds.labels, 1, "log_mean_exp", 0)
        sigma = math.sqrt(0.125 * 0.875 / len(ds.labels))
        assert abs(rec["accuracy"] - 0.125) <= 3 * sigma
        assert set(rec["per_class_accuracy"]) == set(range(8))

    def test_empty(self):
        with pytest.raises(ContractError):
            evaluate(UniformModel(2, 3, 4), np.zeros((0, 3), int), np.zeros(0, int), 1,
                     "lower_bound", 0)


class TestCheckpoint:
    def cfg(self, **kw):
        return TrainConfig(steps=300, warmup=10, peak_lr=5e-3, batch_size=4, seed=2, **kw)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        state = new_state(SMALL, self.cfg())
        train(state, small_source(), until=7)
        checkpoint_save(state, tmp_path / "a")
        checkpoint_save(checkpoint_load(tmp_path / "a"), tmp_path / "b")
        for name in ("manifest.json", "tensors.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("mode", ["raster", "random_order"])
    def test_resume_matches_straight_run(self, tmp_path, mode):
        src = small_source()
        straight = new_state(SMALL, self.cfg(mode=mode))
        train(straight, src, until=150)
        first = new_state(SMALL, self.cfg(mode=mode))
        train(first, src, until=50)
        checkpoint_save(first, tmp_path / "ck")
        resumed = checkpoint_load(tmp_path / "ck", SMALL, self.cfg(mode=mode))
        train(resumed, src, until=150)
        assert resumed.step == straight.step == 150
        for k, p in straight.model.params.items():
            assert np.array_equal(p.data, resumed.model.params[k].data), k
            assert np.array_equal(straight.optimizer.m[k], resumed.optimizer.m[k])

    def test_codebook_travels_with_checkpoint(self, tmp_path):
        ds = make_shape_dataset(ShapeSpec(n_per_class=4, seed=0))
        cb = fit_codebook(extract_patches(ds.images, 8, 8).reshape(-1, 64), 8, 5, 0, 8, 8)
        state = new_state(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, n_tokens=16,
                                      vocab=8, n_classes=8), self.cfg(), codebook=cb)
        checkpoint_save(state, tmp_path / "ck")
        back = checkpoint_load(tmp_path / "ck").extra["codebook"]
        np.testing.assert_array_equal(back.centroids, cb.centroids)

    def test_mismatched_config_refused_with_both_configs(self, tmp_path):
        state = new_state(SMALL, self.cfg())
        checkpoint_save(state, tmp_path / "ck")
        other = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, n_tokens=6, vocab=5,
                            n_classes=3)
        with pytest.raises(ConfigError) as err:
            checkpoint_load(tmp_path / "ck", expected_model=other)
        assert "'n_layers': 1" in str(err.value) and "'n_layers': 2" in str(err.value)
        with pytest.raises(ConfigError):
            checkpoint_load(tmp_path / "ck", expected_train=self.cfg(mode="raster"))

    def test_tampered_checkpoint_refused(self, tmp_path):
        checkpoint_save(new_state(SMALL, self.cfg()), tmp_path / "ck")
        blob = bytearray((tmp_path / "ck" / "tensors.bin").read_bytes())
        blob[10] ^= 1
        (tmp_path / "ck" / "tensors.bin").write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            checkpoint_load(tmp_path / "ck")


def window_means(log, width=1000):
    steps = np.array([s for s, _ in log])
    losses = np.array([l for _, l in log])
    return [losses[(steps > lo) & (steps <= lo + width)].mean()
            for lo in range(0, int(steps.max()), width)]


@pytest.mark.slow
class TestTrainedRuns:
    def test_loss_non_increasing_over_windows(self):
        from trained import shape_run

        for seed in range(5):
            for mode, log in shape_run(seed).logs.items():
                means = window_means(log)
                violations = sum(b > a for a, b in zip(means, means[1:]))
                assert violations <= 1, (seed, mode, means)

    def test_any_order_loss_not_below_raster(self):
        from trained import shape_run

        for seed in range(3):
            logs = shape_run(seed).logs
            assert window_means(logs["random_order"])[-1] >= window_means(logs["raster"])[-1]
