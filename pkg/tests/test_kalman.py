import numpy as np
import pytest

from oikf.kalman import (
    GaussianBelief,
    SingularInnovationError,
    initial_belief,
    predict,
    project_to_obs,
    update,
)
from oikf.ssmodel import SystemModel, build_position_only_model, build_wna_model, simulate_trajectory


def _model(F, H, Q, R):
    return SystemModel(np.asarray(F, float), np.asarray(H, float), np.asarray(Q, float), np.asarray(R, float))


def test_predict_hand_values():
    model = _model([[1, 1], [0, 1]], np.eye(2), np.eye(2), np.eye(2))
    out = predict(GaussianBelief([0, 0], np.eye(2)), model)
    np.testing.assert_array_equal(out.mean, [0, 0])
    np.testing.assert_array_equal(out.cov, [[3, 1], [1, 2]])


def test_predict_identity_dynamics():
    model = _model(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2))
    b = GaussianBelief([1.0, -2.0], [[2.0, 0.5], [0.5, 1.0]])
    out = predict(b, model)
    np.testing.assert_array_equal(out.mean, b.mean)
    np.testing.assert_array_equal(out.cov, b.cov)


def test_predict_zero_covariance_stays_zero():
    model = _model([[1, 3], [-2, 1]], np.eye(2), np.zeros((2, 2)), np.eye(2))
    out = predict(GaussianBelief([1, 1], np.zeros((2, 2))), model)
    np.testing.assert_array_equal(out.cov, 0)


def test_predict_dimension_mismatch():
    with pytest.raises(ValueError):
        predict(GaussianBelief([0, 0, 0], np.eye(3)), build_wna_model(1, 1))


def test_project_to_obs():
    model = build_wna_model(1, 1)
    _, S = project_to_obs(GaussianBelief([0, 0], np.eye(2)), model, np.eye(2))
    np.testing.assert_array_equal(S, 2 * np.eye(2))

    pos = build_position_only_model(1, 1)
    y_pred, S = project_to_obs(GaussianBelief([4, 1], np.diag([2.0, 5.0])), pos, np.array([[1.0]]))
    np.testing.assert_array_equal(S, [[3.0]])
    np.testing.assert_array_equal(y_pred, [4.0])


def test_project_to_obs_singular():
    model = build_wna_model(1, 1)
    with pytest.raises(SingularInnovationError):
        project_to_obs(GaussianBelief([0, 0], np.zeros((2, 2))), model, np.diag([1.0, 0.0]))


def test_nearly_collinear_innovation_cov_is_singular():
    model = build_wna_model(1, 1)
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularInnovationError):
        project_to_obs(GaussianBelief([0, 0], cov), model, np.diag([1e-14, 1e-14]))


def test_huge_variance_on_one_axis_is_not_singular():
    model = build_wna_model(1, 1)
    _, S = project_to_obs(GaussianBelief([0, 0], np.eye(2)), model, np.diag([1.0, 1e12]))
    assert S[1, 1] > 1e11


def test_scalar_update_hand_values():
    model = _model([[1.0]], [[1.0]], [[0.0]], [[2.0]])
    post, art = update(GaussianBelief([0.0], [[2.0]]), [2.0], model)
    assert art.innovation_cov[0, 0] == 4.0
    assert art.gain[0, 0] == 0.5
    assert post.mean[0] == 1.0
    assert post.cov[0, 0] == 1.0


def test_update_huge_obs_variance_keeps_prior():
    model = build_wna_model(1, 1)
    prior = GaussianBelief([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
    post, _ = update(prior, [50.0, -50.0], model, 1e12 * np.eye(2))
    np.testing.assert_allclose(post.mean, prior.mean, rtol=1e-6)
    np.testing.assert_allclose(post.cov, prior.cov, rtol=1e-6)


def test_update_with_certain_prior_ignores_observation():
    model = build_wna_model(1, 1)
    prior = GaussianBelief([1.0, 2.0], np.zeros((2, 2)))
    post, _ = update(prior, [100.0, 100.0], model)
    np.testing.assert_array_equal(post.mean, prior.mean)


def test_update_batched_matches_loop():
    rng = np.random.default_rng(0)
    model = build_wna_model(0.3, 0.7)
    means = rng.normal(size=(5, 2))
    A = rng.normal(size=(5, 2, 2))
    covs = A @ np.swapaxes(A, -1, -2) + 0.1 * np.eye(2)
    ys = rng.normal(size=(5, 2))
    batch, _ = update(GaussianBelief(means, covs), ys, model)
    for i in range(5):
        single, _ = update(GaussianBelief(means[i], covs[i]), ys[i], model)
        np.testing.assert_allclose(batch.mean[i], single.mean, rtol=1e-14)
        np.testing.assert_allclose(batch.cov[i], single.cov, rtol=1e-14)


def test_initial_belief_back_projects():
    pos = build_position_only_model(1, 1)
    b = initial_belief(pos, [7.0])
    np.testing.assert_allclose(b.mean, [7.0, 0.0])
    np.testing.assert_array_equal(b.cov, 1e3 * np.eye(2))


def _run_kf(model, series):
    belief = GaussianBelief(np.zeros(2), np.zeros((2, 2)))
    means, nis = [], []
    for y in series.observations:
        belief = predict(belief, model)
        belief, art = update(belief, y, model)
        means.append(belief.mean)
        nis.append(art.innovation @ np.linalg.solve(art.innovation_cov, art.innovation))
    return np.array(means), np.array(nis), belief.cov


def test_kf_mse_tracks_steady_state_covariance():
    model = build_wna_model(0.1, 1.0)
    series = simulate_trajectory(model, [0, 0], 20_000, seed=11)
    means, _, cov = _run_kf(model, series)
    mse = np.mean(np.sum((means - series.truth_states) ** 2, axis=1))
    assert abs(mse - np.trace(cov)) < 0.1 * np.trace(cov)


def test_normalized_innovations_average_to_obs_dim():
    model = build_wna_model(0.1, 1.0)
    series = simulate_trajectory(model, [0, 0], 10_000, seed=12)
    _, nis, _ = _run_kf(model, series)
    assert abs(nis.mean() - 2.0) < 0.05 * 2.0


def test_belief_validity():
    assert GaussianBelief([0, 0], np.eye(2)).is_valid()
    assert not GaussianBelief([0, 0], [[1.0, 0.0], [0.5, 1.0]]).is_valid()
    assert not GaussianBelief([0, 0], [[1.0, 2.0], [2.0, 1.0]]).is_valid()
    with pytest.raises(ValueError):
        GaussianBelief([0, 0], np.eye(3))
