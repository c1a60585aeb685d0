import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from goalchoice.dcm import (
    BetaParams, DcmFeatures, DcmVariant, FeatureParams, compute_features, fit_mle, loglik_and_grad,
    mnl_probabilities, read_beta, sample_choice, simulate_choices, utility, write_beta,
)
from goalchoice.errors import ConfigError, IdentifiabilityWarning, NonConvergence
from goalchoice.grid import build_grid
from goalchoice.ingest import PredictionInstance
from goalchoice.scene import TargetFrame, Track, to_target_frame

from conftest import frame_instance

D1, D2 = DcmVariant.DCM1, DcmVariant.DCM2
TABLE_BETA = BetaParams(beta_dir=-2.3, beta_occ=0.2, beta_col=-0.3)


def _grid(inst):
    return build_grid(inst.target_obs()[-1], inst.scene.horizon)


def test_no_neighbours():
    inst = frame_instance()
    f = compute_features(_grid(inst), inst)
    assert not f.occ.any() and not f.col.any() and not f.occup.any()
    assert f.dir[7] == pytest.approx(0, abs=1e-12)
    assert np.allclose(f.dir[[0, 4, 10, 14]], math.pi / 3)


def test_oncoming_collider():
    inst = frame_instance([(0, 10, -math.pi / 2, 5.0)])
    g = _grid(inst)
    f = compute_features(g, inst, D1, params=FeatureParams(lambda_col=10.0))
    centre = g.angles == 2
    assert np.allclose(f.col[centre], math.exp(-1), atol=1e-12)
    assert math.exp(-1) == pytest.approx(0.3679, abs=1e-4)
    assert not f.col[~centre].any()


def test_receding_neighbour_is_not_collider():
    inst = frame_instance([(0, 10, math.pi / 2, 5.0)])
    assert not compute_features(_grid(inst), inst).col.any()


def test_occupancy_hand_value():
    inst = frame_instance([(0, 17.0, 0.0, 0.0)])
    g = _grid(inst)
    f = compute_features(g, inst, params=FeatureParams(rho_occ=5.0))
    d = math.dist((0, 17.0), g.positions[7])
    assert f.occ[7] == pytest.approx(math.exp(-d / 5.0), abs=1e-12)
    assert np.count_nonzero(f.occ) == 1


def test_occup_infer_equals_train_for_constant_velocity():
    inst = frame_instance([(3, 12, -2.0, 4.0), (-5, 25, 0.3, 6.0), (8, -4, 1.2, 7.0)])
    g = _grid(inst)
    a = compute_features(g, inst, phase="train").occup
    b = compute_features(g, inst, phase="infer").occup
    assert a.any()
    assert np.allclose(a, b, atol=1e-9)


def test_features_invariant_to_world_shift():
    # the same scene posed in two world frames gives identical target-frame features
    base = frame_instance([(3, 12, -2.0, 4.0), (-1, 15, -1.6, 5.0)])
    f0 = compute_features(_grid(base), base, phase="infer")
    frame = TargetFrame((41.0, -7.0), 0.9)
    s = base.scene
    moved = s.__class__(
        target=Track("t", s.target.start, frame.states_to_world(s.target.states)),
        neighbors=tuple(Track(n.agent_id, n.start, frame.states_to_world(n.states)) for n in s.neighbors),
        dt=s.dt, t_obs=s.t_obs, t_f=s.t_f, t0=s.t0,
    )
    reframed = to_target_frame(moved)
    inst = PredictionInstance(reframed, None, base.neighbor_mask)
    f1 = compute_features(_grid(inst), inst, phase="infer")
    for name in ("dir", "occ", "col", "occup"):
        assert np.allclose(getattr(f0, name), getattr(f1, name), atol=1e-9)


def test_utility_examples():
    f = DcmFeatures(dir=[math.pi / 3], occ=[1.0], col=[0.0], occup=[0.0])
    assert utility(f, TABLE_BETA, D1)[0] == pytest.approx(-2.3 * math.pi / 3 + 0.2)
    assert utility(f, TABLE_BETA, D1)[0] == pytest.approx(-2.208, abs=1e-3)
    assert utility(f, BetaParams(), D1)[0] == 0
    f2 = DcmFeatures(dir=[2 * math.pi / 3], occ=[2.0], col=[0.0], occup=[0.0])
    assert utility(f2, TABLE_BETA, D1)[0] == pytest.approx(2 * utility(f, TABLE_BETA, D1)[0])
    with pytest.raises(ConfigError):
        utility(f, TABLE_BETA, D2)


def test_mnl_examples():
    assert np.allclose(mnl_probabilities(np.zeros(15)), 1 / 15)
    assert np.allclose(mnl_probabilities([1.0, 0.0]), [0.7311, 0.2689], atol=1e-4)
    e = math.exp(1)
    assert np.allclose(mnl_probabilities([1.0, 0.0]), [e / (e + 1), 1 / (e + 1)], atol=1e-15)


vec = arrays(np.float64, st.integers(2, 15), elements=st.floats(-15, 15))  # keeps every entry representable inside (0, 1)


@settings(max_examples=100, deadline=None)
@given(u=vec, c=st.floats(-100, 100))
def test_mnl_properties(u, c):
    p = mnl_probabilities(u)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.all(p > 0) and np.all(p < 1)
    assert np.allclose(mnl_probabilities(u + c), p, atol=1e-12, rtol=0)
    assert p[np.argmax(u)] == p.max()
    i, j = np.argsort(u)[-1], np.argsort(u)[0]
    if u[i] - u[j] > 1e-9:
        assert p[i] > p[j]


def test_sample_choice_examples():
    rng = np.random.default_rng(0)
    picks = [sample_choice([50.0, 0, 0], rng) for _ in range(10_000)]
    assert np.mean(np.array(picks) == 0) > 0.999
    draws = simulate_choices(np.zeros((60_000, 3)), seed=1)
    assert np.allclose(np.bincount(draws, minlength=3) / 60_000, 1 / 3, atol=0.01)
    assert np.array_equal(simulate_choices(np.zeros((50, 4)), 9), simulate_choices(np.zeros((50, 4)), 9))


def test_sampling_matches_probabilities():
    u = np.array([0.5, -1.0, 1.2, 0.0])
    draws = simulate_choices(np.tile(u, (200_000, 1)), seed=3)
    assert np.allclose(np.bincount(draws, minlength=4) / 200_000, mnl_probabilities(u), atol=0.005)


def _random_dataset(n, beta, seed, variant=D1):
    rng = np.random.default_rng(seed)
    K = 15
    out = []
    X = np.stack([rng.uniform(0, math.pi / 3, (n, K)), rng.exponential(0.5, (n, K)), rng.exponential(0.5, (n, K))], -1)
    chosen = simulate_choices(X @ beta, rng)
    for x, c in zip(X, chosen):
        out.append((DcmFeatures(dir=x[:, 0], occ=x[:, 1], col=x[:, 2], occup=np.zeros(K), variant=variant), int(c)))
    return out


def test_loglik_gradient_matches_fd():
    data = _random_dataset(200, np.array([-1.0, 0.5, -0.2]), 0)
    X = np.stack([f.matrix() for f, _ in data])
    c = np.array([k for _, k in data])
    b = np.array([-0.7, 0.3, 0.1])
    _, g = loglik_and_grad(b, X, c)
    h = 1e-5
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (loglik_and_grad(b + e, X, c)[0] - loglik_and_grad(b - e, X, c)[0]) / (2 * h)
        assert abs(fd - g[i]) <= 1e-6 * max(1.0, abs(g[i]))


def test_fit_dominates_null_model():
    data = _random_dataset(500, np.array([-2.3, 0.2, -0.3]), 4)
    fit = fit_mle(data, D1)
    X = np.stack([f.matrix() for f, _ in data])
    c = np.array([k for _, k in data])
    assert fit.converged
    assert fit.loglik >= loglik_and_grad(np.zeros(3), X, c)[0]


def test_unidentifiable_warns():
    data = _random_dataset(100, np.array([-1.0, 0.0, 0.0]), 2)
    data = [(DcmFeatures(dir=f.dir, occ=f.occ, col=np.zeros(15), occup=np.zeros(15)), k) for f, k in data]
    with pytest.warns(IdentifiabilityWarning, match="beta_col"):
        fit = fit_mle(data, D1)
    assert fit.beta.beta_col == 0


def test_separable_single_observation():
    f = DcmFeatures(dir=[0, 0, 0], occ=[1.0, 0, 0], col=[0, 0, 0], occup=[0, 0, 0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IdentifiabilityWarning)
        try:
            fit = fit_mle([(f, 0)], D1)
        except NonConvergence:
            return
    assert fit.beta.beta_occ > 10 or not fit.converged


def test_beta_file_round_trip(tmp_path):
    p = tmp_path / "beta.txt"
    write_beta(TABLE_BETA, p, D1)
    assert read_beta(p) == TABLE_BETA
