import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from kfusion.errors import ConfigError, EstimationError, OracleRefusedError
from kfusion.observation import ModalityOperator
from kfusion.state_model import (
    DynamicalModel,
    GaussianState,
    filter_sequence,
    fuse_step,
    joint_gaussian_oracle,
    predict,
    rts_smooth,
    stack_observations,
    update,
)

from instances import (
    random_fusion_step,
    random_instance,
    random_observation,
    random_spd,
    rel_err,
    scalar_op,
)


def post(mean, cov, t=0):
    return GaussianState(np.atleast_1d(mean), np.atleast_2d(cov), t, "posterior")


# ---------------------------------------------------------------- predict

def test_predict_identity_zero_noise_is_noop():
    s = post([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
    p = predict(s, DynamicalModel(np.zeros(2)))
    np.testing.assert_array_equal(p.mean, s.mean)
    np.testing.assert_array_equal(p.covariance, s.covariance)
    assert p.time_index == 1 and p.kind == "predicted"


def test_predict_scalar_random_walk():
    p = predict(post(1.0, 2.0), DynamicalModel(np.array([3.0])))
    assert p.mean[0] == 1.0 and p.covariance[0, 0] == 5.0


def test_predict_contracting_transition():
    s = post([2.0, 4.0], np.diag([4.0, 4.0]))
    p = predict(s, DynamicalModel(np.ones(2), 0.5 * np.eye(2)))
    np.testing.assert_allclose(p.mean, [1.0, 2.0])
    np.testing.assert_allclose(p.covariance, np.diag([2.0, 2.0]))


def test_predict_diagonal_transition_matches_dense():
    rng = np.random.default_rng(1)
    s = post(rng.normal(size=3), random_spd(rng, 3))
    f = np.array([0.9, -0.5, 1.0])
    a = predict(s, DynamicalModel(np.full(3, 0.1), f))
    b = predict(s, DynamicalModel(np.full(3, 0.1), np.diag(f)))
    np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-15)


def test_predict_dimension_mismatch():
    with pytest.raises(ConfigError):
        predict(post([0.0, 0.0], np.eye(2)), DynamicalModel(np.ones(3)))


def test_model_rejects_expanding_transition_and_negative_noise():
    with pytest.raises(ConfigError):
        DynamicalModel(np.ones(2), 1.5 * np.eye(2))
    with pytest.raises(ConfigError):
        DynamicalModel(np.array([0.1, -0.1]))


def test_state_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        GaussianState([0.0, np.nan], np.eye(2))
    with pytest.raises(ConfigError):
        GaussianState([0.0, 0.0], [[1.0, 0.3], [0.0, 1.0]])
    with pytest.raises(ConfigError):
        GaussianState([0.0], np.eye(2))


# ----------------------------------------------------------------- update

def test_update_with_empty_observation_returns_prior():
    s = GaussianState([1.0, 2.0], np.eye(2), 3, "predicted")
    op = ModalityOperator(sparse.csr_matrix((0, 2)), np.zeros(0), "m", 3)
    out = update(s, op, np.zeros(0))
    np.testing.assert_array_equal(out.mean, s.mean)
    np.testing.assert_array_equal(out.covariance, s.covariance)
    assert out.kind == "posterior"


def test_update_scalar():
    out = update(post(0.0, 1.0), scalar_op(1.0, 1.0), [2.0])
    assert out.mean[0] == pytest.approx(1.0, abs=1e-12)
    assert out.covariance[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_update_near_exact_measurement():
    out = update(post(0.0, 1.0), scalar_op(1.0, 1e-12), [7.0])
    assert out.mean[0] == pytest.approx(7.0, abs=1e-6)
    assert out.covariance[0, 0] == pytest.approx(0.0, abs=1e-6)


def test_update_singular_innovation_names_step_and_modality():
    # a negative noise variance makes the innovation covariance indefinite
    s = GaussianState([0.0], [[0.5]], 4, "predicted")
    op = scalar_op(1.0, -1.0, t=4, name="modis")
    with pytest.raises(EstimationError) as info:
        update(s, op, [1.0])
    assert info.value.time_index == 4 and info.value.modality == "modis"
    assert "step 4" in str(info.value) and "modis" in str(info.value)


def test_update_rejects_nonfinite_measurement():
    with pytest.raises(ConfigError):
        update(post(0.0, 1.0), scalar_op(), [np.nan])


def test_joseph_form_matches_short_form():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = 6
        s = post(rng.normal(size=n), random_spd(rng, n))
        op, y = random_observation(rng, rng.normal(size=n), (1, 3), 2, 0, 1, "m")
        if op.n_rows == 0:
            continue
        out = update(s, op, y)
        H = op.stacked.toarray()
        P = s.covariance
        T = H @ P @ H.T + op.noise_matrix()
        K = P @ H.T @ np.linalg.inv(T)
        np.testing.assert_allclose(out.covariance, P - K @ T @ K.T, atol=1e-9)


# -------------------------------------------------------------- fuse_step

def test_fuse_step_two_scalar_modalities():
    obs = [(scalar_op(1.0, 1.0, name="a"), [3.0]), (scalar_op(1.0, 1.0, name="b"), [3.0])]
    out = fuse_step(post(0.0, 1.0), obs)
    assert out.mean[0] == pytest.approx(2.0, abs=1e-12)
    assert out.covariance[0, 0] == pytest.approx(1 / 3, abs=1e-12)
    swapped = fuse_step(post(0.0, 1.0), obs[::-1])
    assert abs(swapped.mean[0] - out.mean[0]) <= 1e-12
    assert abs(swapped.covariance[0, 0] - out.covariance[0, 0]) <= 1e-12


def test_fuse_step_time_mismatch():
    with pytest.raises(ConfigError):
        fuse_step(post(0.0, 1.0, t=2), [(scalar_op(t=3), [1.0])])


# -------------------------------------------------------- filter_sequence

def test_filter_sequence_zero_steps():
    s = post([1.0], [[2.0]])
    trace = filter_sequence(s, [], [])
    assert len(trace) == 1
    assert trace.posteriors[0] is s


def test_filter_sequence_unobserved_variance_grows_linearly():
    p0, q = 0.5, 0.25
    s = post([1.0, -1.0], p0 * np.eye(2))
    trace = filter_sequence(s, [DynamicalModel(np.full(2, q))] * 4, [[]] * 4)
    for k, st_ in enumerate(trace.posteriors):
        np.testing.assert_allclose(st_.covariance, (p0 + k * q) * np.eye(2), atol=1e-15)
        np.testing.assert_array_equal(st_.mean, [1.0, -1.0])


def test_filter_sequence_callable_models():
    s = post([0.0], [[1.0]])
    a = filter_sequence(s, lambda k: DynamicalModel(np.array([0.1 * k])), [[]] * 3)
    assert a.posteriors[-1].covariance[0, 0] == pytest.approx(1.0 + 0.1 + 0.2 + 0.3)


def test_filter_sequence_requires_posterior():
    with pytest.raises(ConfigError):
        filter_sequence(GaussianState([0.0], [[1.0]]), [], [])


def test_filter_matches_oracle_scalar_chain():
    s = post(0.0, 1.0)
    models = [DynamicalModel(np.array([0.5]))] * 3
    obs = [[(scalar_op(1.0, 0.4, 1), [0.8])], [], [(scalar_op(2.0, 1.0, 3), [1.1])]]
    trace = filter_sequence(s, models, obs)
    for k in range(1, 4):
        ref = joint_gaussian_oracle(s, models[:k], obs[:k])[-1]
        assert rel_err(trace.posteriors[k].mean, ref.mean) < 1e-10
        assert abs(trace.posteriors[k].covariance[0, 0] - ref.covariance[0, 0]) < 1e-12


# ------------------------------------------------------------- rts_smooth

def test_smoother_single_step_equals_filter():
    s = post(0.0, 1.0)
    trace = filter_sequence(s, [DynamicalModel(np.array([0.3]))], [[(scalar_op(t=1), [1.0])]])
    sm = rts_smooth(trace)
    assert len(sm) == 2
    np.testing.assert_allclose(sm[-1].mean, trace.posteriors[-1].mean)
    np.testing.assert_allclose(sm[-1].covariance, trace.posteriors[-1].covariance)


def test_smoother_gain_vanishes_for_huge_process_noise():
    s = post(0.0, 1.0)
    trace = filter_sequence(s, [DynamicalModel(np.array([1e12]))], [[(scalar_op(1.0, 1e-3, 1), [5.0])]])
    sm = rts_smooth(trace)
    assert sm[0].mean[0] == pytest.approx(0.0, abs=1e-9)
    assert sm[0].covariance[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_smoother_propagates_late_observation_back():
    s = post(0.0, 1.0)
    models = [DynamicalModel(np.array([0.2]))] * 4
    obs = [[], [], [], [(scalar_op(1.0, 0.1, 4), [3.0])]]
    sm = rts_smooth(filter_sequence(s, models, obs))
    ref = joint_gaussian_oracle(s, models, obs)
    for a, b in zip(sm, ref):
        assert rel_err(a.mean, b.mean) < 1e-10
        assert abs(a.covariance[0, 0] - b.covariance[0, 0]) < 1e-12
    # the future observation pulls every earlier mean toward it
    assert all(st_.mean[0] > 0 for st_ in sm)


# ----------------------------------------------------------------- oracle

def test_oracle_without_observations_is_the_prior_process():
    s = post([1.0, 2.0], 0.5 * np.eye(2))
    out = joint_gaussian_oracle(s, [DynamicalModel(np.full(2, 0.1))] * 3, [[]] * 3)
    for k, st_ in enumerate(out):
        np.testing.assert_allclose(st_.mean, [1.0, 2.0])
        np.testing.assert_allclose(st_.covariance, (0.5 + 0.1 * k) * np.eye(2), atol=1e-14)


def test_oracle_refuses_large_problems():
    s = post(np.zeros(600), np.eye(600))
    with pytest.raises(OracleRefusedError):
        joint_gaussian_oracle(s, [DynamicalModel(np.ones(600))] * 3, [[]] * 3)


def test_oracle_agrees_with_information_form():
    # independent check: build the joint precision of s_0..s_K from the chain
    # factorization and invert it
    rng = np.random.default_rng(3)
    for _ in range(10):
        initial, models, obs = random_instance(rng, max_steps=3)
        n, K = initial.dim, len(obs)
        N = (K + 1) * n
        prec = np.zeros((N, N))
        h = np.zeros(N)
        P0i = np.linalg.inv(initial.covariance)
        prec[:n, :n] += P0i
        h[:n] += P0i @ initial.mean
        for k, m in enumerate(models, start=1):
            F, Qi = m.transition_matrix(), np.linalg.inv(m.noise_matrix())
            a, b = slice((k - 1) * n, k * n), slice(k * n, (k + 1) * n)
            prec[a, a] += F.T @ Qi @ F
            prec[b, b] += Qi
            prec[a, b] -= F.T @ Qi
            prec[b, a] -= Qi @ F
            for op, y in obs[k - 1]:
                H, Ri = op.stacked.toarray(), np.linalg.inv(op.noise_matrix())
                prec[b, b] += H.T @ Ri @ H
                h[b] += H.T @ Ri @ y
        cov = np.linalg.inv(prec)
        mean = cov @ h
        out = joint_gaussian_oracle(initial, models, obs)
        for k, st_ in enumerate(out):
            b = slice(k * n, (k + 1) * n)
            assert rel_err(st_.mean, mean[b]) < 1e-8
            assert np.linalg.norm(st_.covariance - cov[b, b]) < 1e-7


# ------------------------------------------------------------- properties

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_update_order_invariance(seed):
    rng = np.random.default_rng(seed)
    prior, obs = random_fusion_step(rng)
    a = fuse_step(prior, obs)
    b = fuse_step(prior, obs[::-1])
    assert rel_err(a.mean, b.mean) < 1e-9
    assert rel_err(a.covariance, b.covariance) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_sequential_equals_stacked(seed):
    rng = np.random.default_rng(seed)
    prior, obs = random_fusion_step(rng)
    a = fuse_step(prior, obs)
    b = update(prior, *stack_observations(obs))
    assert rel_err(a.mean, b.mean) < 1e-9
    assert rel_err(a.covariance, b.covariance) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_update_never_increases_covariance(seed):
    rng = np.random.default_rng(seed)
    prior, obs = random_fusion_step(rng)
    out = fuse_step(prior, obs)
    gap = np.linalg.eigvalsh(prior.covariance - out.covariance)
    assert gap.min() >= -1e-10 * np.abs(prior.covariance).max()
    assert out.min_eigenvalue() >= -1e-10


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_smoother_never_worse_than_filter(seed):
    rng = np.random.default_rng(seed)
    initial, models, obs = random_instance(rng)
    trace = filter_sequence(initial, models, obs)
    sm = rts_smooth(trace)
    for f, s in zip(trace.posteriors, sm):
        assert np.trace(s.covariance) <= np.trace(f.covariance) * (1 + 1e-9) + 1e-12
        assert s.min_eigenvalue() >= -1e-9
        assert f.min_eigenvalue() >= -1e-9
