import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tstar import nbdist
from tstar.errors import ConfigError, DivergenceError
from tstar.transformer import (
    EPS_HEAD,
    Batch,
    EmbedConfig,
    ForecastDistribution,
    TrainConfig,
    TSTModel,
    WindowDataset,
    draw_forecasts,
    embed_step,
    gradient_check,
    load_checkpoint,
    nb_head,
    percentile_nearest_rank,
    positional_encoding,
    predict,
    save_checkpoint,
    train,
)

CFG = dict(n_stations=3, n_static=1, n_global=4, n_local=2, station_dim=4, global_dim=3, model_dim=8, lookback=5)


def make_model(n_layers=1, seed=0, dropout=0.0, **kw):
    return TSTModel(EmbedConfig(**{**CFG, **kw}), n_layers=n_layers, dropout=dropout, seed=seed)


def make_batch(rng, cfg: EmbedConfig, B=6):
    V = cfg.lookback
    return Batch(
        station_rows=rng.integers(0, cfg.n_stations, B),
        static=rng.uniform(0, 1, (B, cfg.n_static)),
        glob=rng.normal(size=(B, V, cfg.n_global)),
        local=rng.normal(size=(B, V, cfg.n_local)),
        y=rng.poisson(2.0, (B, V)).astype(float),
        target=rng.poisson(2.0, B).astype(float),
    )


def constant_dataset(c=3.0, S=2, T=300, lookback=5):
    return WindowDataset(
        y=np.full((S, T), c), glob=np.zeros((T, 0)), local_past=np.zeros((S, T, 0)),
        local_ahead=np.zeros((S, T, 0)), static=np.ones((S, 1)), station_rows=np.arange(S),
        lookback=lookback, windows=[(s, t) for s in range(S) for t in range(lookback - 1, T - 1)],
    )


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            EmbedConfig(**{**CFG, "model_dim": 10})

    def test_horizon_one_only(self):
        with pytest.raises(ConfigError):
            EmbedConfig(**{**CFG, "horizon": 2})

    def test_ffn_width_default(self):
        assert EmbedConfig(**CFG).ffn_dim == 16

    def test_soft_ranges(self):
        assert TrainConfig(n_layers=1, hidden_size=16).validate() == []
        assert len(TrainConfig(n_layers=5, hidden_size=20, dropout=0.5, learning_rate=1.0).validate()) == 4
        with pytest.raises(ConfigError):
            TrainConfig(n_layers=4, strict=True).validate()
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1).validate()


class TestEmbedding:
    def test_zero_projection(self, rng):
        m = make_model()
        m.params["proj_w"][:] = 0
        m.params["proj_b"][:] = 0
        z = embed_step(m, 1, [0.4], rng.normal(size=4), rng.normal(size=2), 7)
        assert np.array_equal(z, np.zeros(8))

    def test_identity_projection(self, rng):
        # input width 4 + 3 + 2 + 1 = 10
        m = make_model(model_dim=10, n_heads=2)
        m.params["proj_w"] = np.eye(10)
        m.params["proj_b"] = np.zeros(10)
        static, glob, local = np.array([0.5]), rng.normal(size=4), rng.normal(size=2)
        z = embed_step(m, 2, static, glob, local, 4)
        h_station = m.params["station_emb"][2] + static @ m.params["static_w"]
        h_glob = glob @ m.params["global_w"] + m.params["global_b"]
        assert np.allclose(z, np.concatenate([h_station, h_glob, local, [4.0]]), atol=1e-15)

    def test_identical_stations_identical_tokens(self, rng):
        m = make_model()
        m.params["station_emb"][1] = m.params["station_emb"][0]
        args = ([0.3], rng.normal(size=4), rng.normal(size=2), 2)
        assert np.array_equal(embed_step(m, 0, *args), embed_step(m, 1, *args))

    def test_mean_embedding_row(self, rng):
        m = make_model()
        args = ([0.0], np.zeros(4), np.zeros(2), 0)
        m2 = make_model()
        m2.params = {k: v.copy() for k, v in m.params.items()}
        m2.params["station_emb"][0] = m.params["station_emb"].mean(axis=0)
        assert np.allclose(embed_step(m, -1, *args), embed_step(m2, 0, *args), atol=1e-15)

    def test_unknown_station_needs_zero_shot(self):
        m = make_model()
        assert m.station_rows(["0", "x"], zero_shot=True).tolist() == [0, -1]
        with pytest.raises(KeyError):
            m.station_rows(["x"])


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encoding(0, 8)
        assert np.all(pe[0::2] == 0) and np.all(pe[1::2] == 1)

    @given(st.integers(0, 10_000), st.sampled_from([2, 8, 32]))
    def test_bounded(self, pos, dim):
        assert np.all(np.abs(positional_encoding(pos, dim)) <= 1)

    def test_first_entry_difference(self):
        d = positional_encoding(1, 8)[0] - positional_encoding(0, 8)[0]
        assert d == pytest.approx(math.sin(1.0), abs=1e-15)


class TestEncoder:
    def test_zero_blocks_is_identity(self, rng):
        m = make_model(n_layers=0)
        x = rng.normal(size=(2, 5, 8))
        assert np.array_equal(m.encoder_forward(x), x)

    def test_attention_rows_are_distributions(self, rng):
        m = make_model(n_layers=2)
        maps = []
        m.encoder_forward(rng.normal(size=(3, 5, 8)) * 5, attention_maps=maps)
        assert len(maps) == 2
        for a in maps:
            assert a.shape == (3, 4, 5, 5) and np.all(a >= 0)
            assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    @given(st.integers(0, 3))
    @settings(max_examples=10)
    def test_shape_preserved(self, n_layers):
        m = make_model(n_layers=n_layers)
        x = np.random.default_rng(n_layers).normal(size=(2, 5, 8))
        assert m.encoder_forward(x).shape == x.shape

    def test_position_sensitivity(self, rng):
        m = make_model(n_layers=1)
        b = make_batch(rng, m.cfg, B=1)
        swapped = Batch(b.station_rows, b.static, b.glob[:, [1, 0, 2, 3, 4]], b.local[:, [1, 0, 2, 3, 4]],
                        b.y[:, [1, 0, 2, 3, 4]], b.target)
        assert not np.allclose(m.forward(b)[0], m.forward(swapped)[0])

    def test_inference_is_deterministic(self, rng):
        m = make_model(dropout=0.3)
        b = make_batch(rng, m.cfg)
        assert np.array_equal(m.forward(b)[0], m.forward(b)[0])
        d1 = m.forward(b, training=True, rng=np.random.default_rng(1))[0]
        d2 = m.forward(b, training=True, rng=np.random.default_rng(2))[0]
        assert not np.array_equal(d1, d2)

    def test_non_finite_input_aborts(self, rng):
        m = make_model()
        x = rng.normal(size=(1, 5, 8))
        x[0, 2, 3] = np.nan
        with pytest.raises(DivergenceError):
            m.encoder_forward(x)


class TestHead:
    def test_zero_head(self):
        m = make_model()
        for k in ("head_mu_w", "head_mu_b", "head_r_w", "head_r_b"):
            m.params[k][:] = 0
        p = nb_head(m, np.ones(8))
        assert p.mu == pytest.approx(math.log(2) + EPS_HEAD, abs=1e-15)
        assert p.r == pytest.approx(0.6931, abs=1e-4)

    def test_floor(self):
        m = make_model()
        m.params["head_mu_b"][:] = -1e4
        p = nb_head(m, np.zeros(8))
        assert p.mu == pytest.approx(EPS_HEAD) and p.mu > 0

    def test_bias_initialisation(self):
        m = make_model()
        m.set_head_bias(3.0, shape=2.0)
        p = nb_head(m, np.zeros(8))
        assert p.mu == pytest.approx(3.0, rel=1e-9) and p.r == pytest.approx(2.0, rel=1e-9)

    def test_nll_matches_nbdist(self, rng):
        m = make_model()
        b = make_batch(rng, m.cfg)
        mu, r, _ = m.forward(b)
        per_example = [nbdist.log_likelihood(nbdist.NegBinParams(mu[i], r[i]), b.target[i]) for i in range(len(b))]
        assert m.nll(b) == float(-np.sum(per_example))


class TestGradientCheck:
    def test_random_model(self, rng):
        m = make_model(n_layers=2)
        rep = gradient_check(m, make_batch(rng, m.cfg), n_checks=80)
        assert rep.passed and rep.n_checked >= 50, rep

    def test_trained_model(self, rng):
        m = make_model(n_layers=1)
        ds = constant_dataset(2.0, S=3)
        ds.glob, ds.local_past = rng.normal(size=(300, 4)), rng.normal(size=(3, 300, 1))
        ds.local_ahead = rng.normal(size=(3, 300, 1))
        train(m, ds, TrainConfig(epochs=2, batch_size=32, learning_rate=3e-3, dropout=0.1, n_layers=1,
                                 hidden_size=16, steps_per_epoch=5))
        rep = gradient_check(m, ds.batch(np.arange(0, 60, 7)), n_checks=60)
        assert rep.passed, rep

    def test_zero_initialised_model(self, rng):
        m = make_model()
        for v in m.params.values():
            v[:] = 0
        assert gradient_check(m, make_batch(rng, m.cfg), n_checks=50).passed

    def test_corrupted_gradient_fails(self, rng):
        m = make_model()

        def corrupt(grads):
            grads["proj_w"] = grads["proj_w"] * 1.5 + 0.01
            return grads

        rep = gradient_check(m, make_batch(rng, m.cfg), grad_override=corrupt)
        assert not rep.passed and rep.worst_param == "proj_w"


class TestTraining:
    def test_constant_demand_recovered(self):
        m = TSTModel(EmbedConfig(2, 1, 0, 0, station_dim=4, model_dim=8, lookback=5), n_layers=1, dropout=0.0)
        m.set_head_bias(1.0)
        cfg = TrainConfig(epochs=30, batch_size=64, learning_rate=1e-2, dropout=0.1, n_layers=1, hidden_size=16,
                          steps_per_epoch=8, frozen=("head_r_w", "head_r_b"))
        train(m, constant_dataset(3.0), cfg)
        mu, _ = m.predict_params(constant_dataset(3.0).batch(np.arange(50)))
        assert np.all(np.abs(mu - 3.0) / 3.0 < 0.05)

    def test_zero_learning_rate(self):
        m = make_model(n_global=0, n_local=0)
        before = {k: v.copy() for k, v in m.params.items()}
        train(m, constant_dataset(), TrainConfig(epochs=1, batch_size=32, learning_rate=0.0, steps_per_epoch=3))
        assert all(np.array_equal(before[k], m.params[k]) for k in before)

    def test_reproducible(self):
        runs = []
        for _ in range(2):
            m = make_model(n_global=0, n_local=0, dropout=0.1)
            runs.append(train(m, constant_dataset(), TrainConfig(epochs=2, batch_size=32, steps_per_epoch=3)).history)
        assert runs[0] == runs[1]

    def test_leakage_guard(self):
        ds = constant_dataset(T=100)
        with pytest.raises(AssertionError):
            train(make_model(n_global=0, n_local=0), ds, TrainConfig(epochs=1), train_end=50)

    def test_loss_decreases(self, rng):
        m = make_model(n_global=0, n_local=0)
        ds = constant_dataset(4.0)
        ds.y = rng.poisson(4.0, ds.y.shape).astype(float)
        hist = train(m, ds, TrainConfig(epochs=6, batch_size=64, learning_rate=5e-3, steps_per_epoch=6)).history
        assert np.mean(hist[-2:]) < np.mean(hist[:2])


class TestForecasts:
    def test_median_of_three(self):
        d = ForecastDistribution.from_samples(nbdist.NegBinParams(1, 1), [5, 0, 1])
        assert d.point == 1 and d.interval == (0, 5)

    def test_nearest_rank(self):
        s = np.arange(1, 101)
        assert percentile_nearest_rank(s, 5) == 5 and percentile_nearest_rank(s, 95) == 95

    def test_large_parameters_centre_on_mean(self):
        f = draw_forecasts([50.0], [1e4], [(0,)], n_samples=2000, seed=3)
        assert abs(f.median[0] - 50) <= 2

    def test_interval_brackets_point(self, rng):
        f = draw_forecasts(rng.uniform(0.1, 5, 30), rng.uniform(0.3, 5, 30), [(i,) for i in range(30)])
        assert np.all(f.p05 <= f.median) and np.all(f.median <= f.p95)

    def test_keys_isolate_draws(self):
        a = draw_forecasts([1.0, 2.0], [1.0, 1.0], [(0, 1), (0, 2)], seed=4)
        b = draw_forecasts([9.0, 2.0], [1.0, 1.0], [(0, 5), (0, 2)], seed=4)
        assert np.array_equal(a.samples[1], b.samples[1])

    def test_predict_repeatable(self, rng):
        m = make_model()
        b = make_batch(rng, m.cfg, B=1)
        p1, p2 = predict(m, b, seed=2), predict(m, b, seed=2)
        assert p1.params == p2.params and np.array_equal(p1.samples, p2.samples)


def test_checkpoint_round_trip(tmp_path, rng):
    m = make_model(n_layers=2)
    m.norm_stats = {"mean": np.arange(3.0)}
    cfg = TrainConfig(epochs=3, frozen=("head_r_b",))
    save_checkpoint(tmp_path / "m.npz", m, cfg, extra={"kind": "pickup"})
    m2, cfg2, extra = load_checkpoint(tmp_path / "m.npz")
    b = make_batch(rng, m.cfg)
    assert cfg2 == cfg and extra == {"kind": "pickup"}
    assert np.array_equal(m.forward(b)[0], m2.forward(b)[0])
    assert np.array_equal(m2.norm_stats["mean"], np.arange(3.0))
