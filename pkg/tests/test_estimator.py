"""Sklearn-facade tests: params protocol, fit/predict/transform, validation."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from prism_vq.estimator import PrismVQRanker
from prism_vq.synthetic import SyntheticConfig, synthetic_generate


@pytest.fixture(scope="module")
def tiny_panel():
    cfg = SyntheticConfig(n_stocks=16, n_dates=80, n_clusters=2, snr=1.0,
                          n_factors=2, n_features=6, n_signal_features=2,
                          n_cluster_features=2, n_horizons=5, main_horizon=5,
                          prior_window=5, seed=1)
    panel, _ = synthetic_generate(cfg)
    return panel


@pytest.fixture(scope="module")
def fitted(tiny_panel):
    est = PrismVQRanker(lookback=8, latent_dim=6, codebook_size=4,
                        decoder_channels=4, decoder_base_len=2,
                        temporal_dim=8, ffn_dim=12, expert_dim=6,
                        trend_window=3, learning_rate=1e-3, max_epochs=2,
                        patience=2, seed=0)
    return est.fit(tiny_panel)


class TestParamsProtocol:
    def test_get_set_round_trip(self):
        est = PrismVQRanker(codebook_size=32, top_k=1)
        params = est.get_params()
        assert params["codebook_size"] == 32
        est.set_params(codebook_size=64)
        assert est.codebook_size == 64

    def test_clone_preserves_params(self):
        est = PrismVQRanker(latent_dim=24, n_experts=4, top_k=2, seed=5)
        copy = clone(est)
        assert copy.get_params() == est.get_params()

    def test_repr_shows_non_defaults(self):
        est = PrismVQRanker(codebook_size=99)
        assert "codebook_size=99" in repr(est)


class TestValidation:
    def test_rejects_non_panel(self):
        with pytest.raises(TypeError, match="PanelDataset"):
            PrismVQRanker().fit(np.zeros((10, 3)))

    def test_predict_before_fit_raises(self, tiny_panel):
        with pytest.raises(NotFittedError):
            PrismVQRanker().predict(tiny_panel)


class TestFitted(object):
    def test_fit_returns_self_and_sets_attributes(self, fitted):
        assert fitted.spatial_model_ is not None
        assert fitted.temporal_model_ is not None
        assert fitted.n_features_in_ == 6
        assert fitted.spatial_model_.codebook.frozen

    def test_predict_rows_schema(self, fitted):
        rows = fitted.predict()
        assert rows
        row = rows[0]
        for col in ("date", "ticker", "score", "alpha", "prior_term",
                    "latent_term", "code_index", "expert_top1", "gate_w1"):
            assert col in row
        assert np.isfinite(row["score"])

    def test_transform_emits_codes(self, fitted):
        rows = fitted.transform()
        assert rows
        assert all(0 <= r["code_index"] < 4 for r in rows)

    def test_score_is_finite_rank_ic(self, fitted):
        ic = fitted.score()
        assert np.isfinite(ic)
        assert -1.0 <= ic <= 1.0
