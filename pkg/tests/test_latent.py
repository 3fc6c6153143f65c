import numpy as np
import pytest
from scipy.stats import spearmanr

from ectraj import autograd as ag
from ectraj import features as ft
from ectraj import scenegen as sg
from ectraj.latent import LatentCodec, codec_losses, codec_report, fit_codec


def low_rank_family(rng, n=400, dim=60, rank=10):
    basis = np.linalg.qr(rng.normal(size=(dim, rank)))[0]
    return rng.normal(size=(n, rank)) * rng.uniform(0.5, 3.0, size=rank) @ basis.T


def test_identity_codec_is_identity(rng):
    codec = LatentCodec.identity(60)
    X = rng.normal(size=(5, 60))
    np.testing.assert_array_equal(codec.encode(X), X)
    np.testing.assert_array_equal(codec.decode(X), X)


def test_zero_maps_to_zero(codec):
    assert not codec.encode(np.zeros(60)).any()
    assert not codec.decode(np.zeros(10)).any()


def test_encode_decode_are_linear(codec, rng):
    X1, X2 = rng.normal(size=(2, 60))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(codec.encode(a * X1 + b * X2), a * codec.encode(X1) + b * codec.encode(X2), atol=1e-12)
    x1, x2 = rng.normal(size=(2, 10))
    np.testing.assert_allclose(codec.decode(a * x1 + b * x2), a * codec.decode(x1) + b * codec.decode(x2), atol=1e-12)


def test_dimension_mismatch_rejected(codec):
    with pytest.raises(ValueError):
        codec.encode(np.zeros(59))
    with pytest.raises(ValueError):
        codec.decode(np.zeros(11))
    with pytest.raises(ValueError):
        LatentCodec(np.zeros((60, 10)), np.zeros((60, 10)))


def test_rank_ten_family_round_trips_exactly(rng):
    X = low_rank_family(rng)
    codec = fit_codec(X, epochs=200, lambda_reg=0.0, lambda_var=0.0)
    err = np.linalg.norm(codec.round_trip(X) - X, axis=-1)
    assert err.max() < 1e-6
    # unseen members of the same subspace round-trip as well
    Y = X[:50] * 0.5 - X[50:100]
    assert np.linalg.norm(codec.round_trip(Y) - Y, axis=-1).max() < 1e-6


def test_rank_ten_family_with_default_weights(rng):
    X = low_rank_family(rng)
    codec = fit_codec(X, epochs=200)
    assert np.linalg.norm(codec.round_trip(X) - X, axis=-1).max() < 1e-6


def test_orthonormal_u_has_zero_norm_penalty(rng):
    Q = np.linalg.qr(rng.normal(size=(60, 60)))[0]
    U = ag.Tensor(Q)
    X = ag.Tensor(rng.normal(size=(32, 60)))
    _, l_reg, _ = codec_losses(X, U, ag.Tensor(Q.T), ag.Tensor(np.array(0.5)))
    assert float(l_reg.data) < 1e-18


def test_fitted_latent_std_near_eta(codec, arrays):
    rep = codec_report(codec, arrays.target[arrays.agent_mask])
    assert rep["max_std_rel_dev"] < 0.10


def test_distance_ranks_preserved_on_held_out(codec):
    held = sg.generate_dataset(12, 60, sg.SceneConfig())
    arr = ft.build_arrays(held, sg.OracleConfig(enabled=False))
    X = arr.target[arr.agent_mask]
    assert np.linalg.matrix_rank(X) > 10  # full-rank family, not a subspace
    rng = np.random.default_rng(0)
    i, j = rng.integers(0, len(X), (2, 5000))
    keep = i != j
    dX = np.linalg.norm(X[i[keep]] - X[j[keep]], axis=-1)
    z = codec.encode(X)
    dz = np.linalg.norm(z[i[keep]] - z[j[keep]], axis=-1)
    assert spearmanr(dX, dz).statistic > 0.9


def test_fit_is_deterministic(rng):
    X = low_rank_family(rng, n=100)
    a = fit_codec(X, epochs=20)
    b = fit_codec(X, epochs=20)
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_array_equal(a.V, b.V)


def test_nan_data_raises_numerical_error(rng):
    X = rng.normal(size=(20, 60))
    X[3, 7] = np.nan
    with pytest.raises(ag.NumericalError):
        fit_codec(X, epochs=5)


@pytest.mark.parametrize("bad", [{"lambda_rec": -1.0}, {"lambda_var": -0.1}])
def test_negative_weights_rejected(rng, bad):
    with pytest.raises(ValueError):
        fit_codec(rng.normal(size=(10, 60)), epochs=1, **bad)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        fit_codec(np.zeros((0, 60)))


def test_pairwise_variant_runs(rng):
    X = low_rank_family(rng, n=100)
    codec = fit_codec(X, epochs=30, pairwise_reg=True)
    assert np.linalg.norm(codec.round_trip(X) - X, axis=-1).max() < 1e-6


def test_array_round_trip(codec):
    again = LatentCodec.from_arrays(codec.arrays())
    np.testing.assert_array_equal(again.U, codec.U)
    assert again.input_scale == codec.input_scale and again.eta == codec.eta
