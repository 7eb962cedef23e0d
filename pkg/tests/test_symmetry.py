import numpy as np
import pytest

from kfc import envs, koopman
from kfc import fileformat as ff
from kfc import symmetry as sy
from kfc.data import TransitionTuple
from kfc.linalg import commutator
from kfc.reference import C_MINUS, reference_model
from kfc.symmetry import AugmentConfig


def _exact_system(seed, n=4):
    env = envs.SyntheticBilinearEnv.random(n, 1, seed=seed)
    return env, koopman.identity_model(env.k0, env.k_forcing)


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(mode="mixup")
    with pytest.raises(ValueError):
        AugmentConfig(p_koopman=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(gaussian_std=-1.0)
    cfg = AugmentConfig()
    assert (cfg.p_koopman, cfg.eps_std_kfc, cfg.eps_std_kfcpp, cfg.gaussian_std) == (0.8, 5e-5, 1e-4, 3e-3)


def test_kfc_generator_identity_k():
    model = koopman.identity_model(np.eye(3), np.zeros((1, 3, 3)))
    g = sy.kfc_generator(model, np.zeros(1))
    assert g.commutator_residual == 0.0 and not g.degraded
    assert np.mean(np.abs(g.sigma)) == pytest.approx(1.0)
    g2 = sy.kfc_generator(model, np.zeros(1))
    assert np.array_equal(g.sigma, g2.sigma)


def test_kfc_generator_normalized_and_commuting(rng):
    _, model = _exact_system(2, n=5)
    a = np.array([0.4])
    g = sy.kfc_generator(model, a)
    k = model.k_of_a(a)
    assert np.mean(np.abs(g.sigma)) == pytest.approx(1.0)
    assert np.linalg.norm(commutator(g.sigma, k)) <= 1e-8 * np.linalg.norm(k) * np.linalg.norm(g.sigma)


def test_kfc_generator_empty_commutant():
    model = koopman.identity_model(np.diag([0.5, 0.9]), np.zeros((1, 2, 2)))
    with pytest.raises(sy.EmptyCommutant):
        sy.kfc_generator(model, np.zeros(1))


def test_first_row_ansatz_reference():
    model = reference_model()
    g = sy.kfc_generator(model, np.array([-1.0]), ansatz=sy.first_row_ansatz(4)).sigma
    row = g[0] / -g[0, 0]
    np.testing.assert_allclose(row[1:], C_MINUS, atol=1e-9)
    assert not np.any(g[1:])


def test_kfcpp_examples():
    model = reference_model()
    a = np.array([1.0])
    np.testing.assert_array_equal(sy.kfcpp_generator(model, a, np.zeros(4)), np.zeros((4, 4)))
    np.testing.assert_allclose(sy.kfcpp_generator(model, a, np.full(4, 0.3)), 0.3 * np.eye(4), atol=1e-12)


def test_kfcpp_commutes_for_all_draws(rng):
    for seed in range(10):
        _, model = _exact_system(seed, n=5)
        a = rng.uniform(-1, 1, size=1)
        k = model.k_of_a(a)
        for _ in range(20):
            sig = sy.kfcpp_generator(model, a, rng.normal(size=5))
            assert np.linalg.norm(commutator(sig, k)) <= 1e-8 * np.linalg.norm(k) * max(np.linalg.norm(sig), 1.0)
            assert np.isrealobj(sig)


def test_conjugate_tying():
    k = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.5]])
    model = koopman.identity_model(k, np.zeros((1, 3, 3)))
    gen = sy.eigen_generator(model, np.zeros(1))
    assert sy.conjugate_pairs(gen.u) == [(1, 2)]
    tied = sy.tie_conjugate_eps(gen.u, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(tied, [1.0, 2.0, 2.0])
    # the real part only sees the pair sum
    a = sy.kfcpp_generator(model, np.zeros(1), np.array([0.0, 1.0, 3.0]))
    b = sy.kfcpp_generator(model, np.zeros(1), np.array([0.0, 2.0, 2.0]))
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_apply_shift_examples(rng):
    model = reference_model()
    s = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(sy.apply_shift(model, np.zeros((4, 4)), s), s)
    g = sy.kfc_generator(model, np.array([-1.0]), ansatz=sy.first_row_ansatz(4)).sigma
    out = sy.apply_shift(model, 1e-3 * g, s)
    np.testing.assert_array_equal(out[:, 1:], s[:, 1:])
    assert np.all(out[:, 0] != s[:, 0])


def test_apply_shift_batched_matches_single(small_mlp_model, rng):
    m = small_mlp_model
    s = rng.normal(scale=0.1, size=(3, 4))
    gs = rng.normal(scale=1e-3, size=(3, m.latent_dim, m.latent_dim))
    batched = sy.apply_shift(m, gs, s)
    for i in range(3):
        np.testing.assert_allclose(batched[i], sy.apply_shift(m, gs[i], s[i]), atol=1e-14)


def test_solution_to_solution_exact(rng):
    env, model = _exact_system(7, n=5)
    ds = env.collect(200, seed=3)
    cfg = AugmentConfig(mode="kfc", p_koopman=1.0, eps_std_kfc=1e-2)
    res = sy.augment_batch(model, ds.states, ds.actions, ds.next_states, cfg, rng)
    err = res.s_t1 - env.step(res.s_t, ds.actions)
    assert np.max(np.linalg.norm(err, axis=1)) <= 1e-8
    assert res.fallbacks == 0 and np.all(res.delta_s > 0)


def test_defect_injection_linear(rng):
    env, model = _exact_system(3, n=4)
    a = np.array([0.2])
    k = model.k_of_a(a)
    sigma = sy.kfc_generator(model, a).sigma
    s = rng.normal(size=4)
    errs = []
    for ea in (1e-6, 1e-5, 1e-4):
        bad, measured = sy.inject_commutator_defect(sigma, k, ea, np.random.default_rng(0))
        assert measured == pytest.approx(ea, rel=1e-6)
        st = s + 1e-3 * bad @ s
        st1 = (k @ s) + 1e-3 * bad @ (k @ s)
        errs.append(np.linalg.norm(st1 - k @ st))
    slope = np.polyfit(np.log([1e-6, 1e-5, 1e-4]), np.log(errs), 1)[0]
    assert abs(slope - 1) < 0.2


def test_mode_none_identity(small_mlp_model, small_cartpole):
    ds = small_cartpole
    res = sy.augment_batch(small_mlp_model, ds.states, ds.actions, ds.next_states, AugmentConfig(mode="none"),
                           np.random.default_rng(0))
    np.testing.assert_array_equal(res.s_t, ds.states)
    assert np.all(res.delta_s == 0)


def test_kfcpp_zero_eps_roundtrip(small_mlp_model, small_cartpole):
    ds = small_cartpole.subset(range(20))
    cfg = AugmentConfig(mode="kfcpp", p_koopman=1.0, eps_std_kfcpp=0.0)
    res = sy.augment_batch(small_mlp_model, ds.states, ds.actions, ds.next_states, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(res.s_t, small_mlp_model.reconstruct(ds.states), atol=1e-14)


def test_gaussian_mode_statistics(small_cartpole):
    ds = small_cartpole
    cfg = AugmentConfig(mode="gaussian", gaussian_std=0.01)
    res = sy.augment_batch(None, ds.states, ds.actions, ds.next_states, cfg, np.random.default_rng(1))
    d = np.concatenate([(res.s_t - ds.states).ravel(), (res.s_t1 - ds.next_states).ravel()])
    assert abs(d.std() - 0.01) < 0.0003
    assert abs(d.mean()) < 0.0003
    # independent per state
    assert abs(np.corrcoef((res.s_t - ds.states).ravel(), (res.s_t1 - ds.next_states).ravel())[0, 1]) < 0.05


def test_p_koopman_split(linear_cartpole_model, small_cartpole):
    ds = small_cartpole
    cfg = AugmentConfig(mode="kfcpp", p_koopman=0.8)
    res = sy.augment_batch(linear_cartpole_model, ds.states, ds.actions, ds.next_states, cfg,
                           np.random.default_rng(2))
    frac = np.mean(res.source == "kfcpp")
    assert 0.75 < frac < 0.85
    assert set(res.source) <= {"kfcpp", "gaussian"}


@pytest.mark.parametrize("mode", ["kfc", "kfcpp", "vae_noise", "kfcpp_prediction", "fwd_prediction", "gaussian"])
def test_modes_run_and_keep_shapes(mode, small_mlp_model, small_cartpole):
    ds = small_cartpole.subset(range(64))
    res = sy.augment_batch(small_mlp_model, ds.states, ds.actions, ds.next_states, AugmentConfig(mode=mode),
                           np.random.default_rng(0))
    assert res.s_t.shape == ds.states.shape and res.s_t1.shape == ds.states.shape
    assert np.all(np.isfinite(res.s_t1))


def test_prediction_modes_use_forward_model(small_mlp_model, small_cartpole):
    m = small_mlp_model
    ds = small_cartpole.subset(range(32))
    for mode in ("kfcpp_prediction", "fwd_prediction"):
        cfg = AugmentConfig(mode=mode, p_koopman=1.0)
        res = sy.augment_batch(m, ds.states, ds.actions, ds.next_states, cfg, np.random.default_rng(0))
        np.testing.assert_allclose(res.s_t1, m.predict_next(res.s_t, ds.actions), atol=1e-12)


def test_kfc_shift_shared_between_states():
    model = reference_model()
    env = envs.CartpoleEnv()
    s = np.array([[0.1, 0.2, 0.01, -0.1]])
    a = np.array([[1.0]])
    s1 = env.step_physical(s, a)
    gen = sy.kfc_generator(model, a[0], ansatz=sy.first_row_ansatz(4))
    cfg = AugmentConfig(mode="kfc", p_koopman=1.0, eps_std_kfc=1e-3)
    res = sy.augment_batch(model, s, a, s1, cfg, np.random.default_rng(0), payload=[gen])
    np.testing.assert_array_equal(res.s_t[0, 1:], s[0, 1:])
    np.testing.assert_array_equal(res.s_t1[0, 1:], s1[0, 1:])
    # identical eps recovered from both states of the tuple
    eps_t = (res.s_t[0, 0] - s[0, 0]) / (gen.sigma[0] @ s[0])
    eps_t1 = (res.s_t1[0, 0] - s1[0, 0]) / (gen.sigma[0] @ s1[0])
    assert eps_t != 0
    assert eps_t == pytest.approx(eps_t1, rel=1e-9)


def test_cartpole_tuple_kfc_simulator_check():
    # translation generator acts as an exact symmetry of the simulator
    env = envs.CartpoleEnv()
    model = koopman.identity_model(np.eye(4), np.zeros((1, 4, 4)))
    sigma = np.zeros((4, 4))
    sigma[0, 0] = 1.0
    s = np.array([[0.1, 0.2, 0.01, -0.1]])
    a = np.array([[1.0]])
    s1 = env.step_physical(s, a)
    st = sy.apply_shift(model, 1e-2 * sigma, s)
    st1 = st + (s1 - s)
    assert np.linalg.norm(st1 - env.step_physical(st, a)) <= 1e-6


def test_reward_action_untouched(small_mlp_model, small_cartpole):
    tup = small_cartpole.tuple(5)
    a_before = tup.a_t.copy()
    r_before = tup.r_t
    pair = sy.augment_tuple(small_mlp_model, tup, AugmentConfig(mode="kfcpp"), np.random.default_rng(0))
    assert np.array_equal(tup.a_t, a_before) and tup.r_t == r_before
    assert pair.delta_s >= 0 and pair.source_mode in ("kfcpp", "gaussian")


def test_augment_tuple_matches_batch(small_mlp_model, small_cartpole):
    tup = small_cartpole.tuple(3)
    cfg = AugmentConfig(mode="kfcpp")
    p = sy.augment_tuple(small_mlp_model, tup, cfg, np.random.default_rng(4))
    r = sy.augment_batch(small_mlp_model, tup.s_t[None], tup.a_t[None], tup.s_t1[None], cfg,
                         np.random.default_rng(4))
    np.testing.assert_array_equal(p.s_tilde_t, r.s_t[0])


def test_nondiagonalizable_fallback():
    k = np.array([[1.0, 1.0], [0.0, 1.0]])
    model = koopman.identity_model(k, np.zeros((1, 2, 2)))
    s = np.ones((10, 2))
    a = np.zeros((10, 1))
    cfg = AugmentConfig(mode="kfcpp", p_koopman=1.0)
    res = sy.augment_batch(model, s, a, s, cfg, np.random.default_rng(0))
    assert res.fallbacks == 10
    assert set(res.source) == {"gaussian"}


def test_degraded_flag():
    k = np.diag([0.5, 0.7, 0.9])
    sigma = np.zeros((3, 3))
    sigma[0, 1] = 1.0
    g = sy.generator_from_matrix(sigma, k)
    assert g.degraded and g.commutator_residual > 0


def test_lie_axioms_zero_eps():
    model = reference_model()
    rep = sy.lie_axiom_report(model, np.array([-1.0]), 0.0, 0.0, np.array([0.1, 0.2, 0.3, 0.4]))
    assert rep.identity_defect == 0 and rep.composition_defect == 0 and rep.taylor_residual == 0


def test_lie_composition_cartpole_first_row():
    model = reference_model()
    sigma = sy.kfc_generator(model, np.array([-1.0]), ansatz=sy.first_row_ansatz(4)).sigma
    sigma = sigma / -sigma[0, 0]
    np.testing.assert_allclose(sigma @ sigma, -sigma, atol=1e-12)
    s = np.array([0.1, 0.2, 0.3, 0.4])
    e1, e2 = 1e-2, 2e-2
    rep = sy.lie_axiom_report(model, np.array([-1.0]), e1, e2, s, sigma=sigma)
    # additive composition misses exactly eps1 eps2 sigma^2 s
    assert rep.composition_defect == pytest.approx(e1 * e2 * np.linalg.norm(sigma @ sigma @ s), rel=1e-8)
    # under the group law phi = e1 + e2 - e1 e2 the defect vanishes
    eye = np.eye(4)
    lhs = (eye + e1 * sigma) @ (eye + e2 * sigma) @ s
    rhs = (eye + (e1 + e2 - e1 * e2) * sigma) @ s
    np.testing.assert_allclose(lhs, rhs, atol=1e-15)


def test_lie_taylor_residual_small(small_mlp_model, small_cartpole):
    s = small_cartpole.states[10]
    rep = sy.lie_axiom_report(small_mlp_model, small_cartpole.actions[10], 1e-3, 1e-3, s)
    assert rep.taylor_residual < 1e-6
    assert rep.composition_defect_roundtrip >= 0


def test_sidecar_roundtrip_and_determinism(linear_cartpole_model, small_cartpole, tmp_path):
    ds = small_cartpole.subset(range(1000))
    cfg = AugmentConfig(mode="kfcpp", seed=3)
    p1, p2 = tmp_path / "a.kfs", tmp_path / "b.kfs"
    info = sy.precompute_sidecar(linear_cartpole_model, ds, cfg, p1, chunk_size=128)
    sy.precompute_sidecar(linear_cartpole_model, ds, cfg, p2, chunk_size=300, workers=3)
    assert p1.read_bytes() == p2.read_bytes()
    assert info.fallbacks == 0
    sc = sy.load_sidecar(p1)
    assert len(sc) == 1000 and sc.header["N"] == 4
    for i in range(0, 1000, 97):
        g = sc.generator(i)
        assert np.linalg.norm(g.u @ g.u_inv - np.eye(4)) <= 1e-8


def test_sidecar_kfc_layout(linear_cartpole_model, small_cartpole, tmp_path):
    ds = small_cartpole.subset(range(10))
    p = tmp_path / "c.kfs"
    sy.precompute_sidecar(linear_cartpole_model, ds, AugmentConfig(mode="kfc"), p)
    sc = sy.load_sidecar(p)
    assert sc.records.shape == (10, 16)
    want = sy.kfc_generator(linear_cartpole_model, ds.actions[0]).sigma
    np.testing.assert_array_equal(sc.generator(0).sigma, want)


def test_sidecar_empty(linear_cartpole_model, tmp_path):
    from kfc import data
    p = tmp_path / "e.kfs"
    sy.precompute_sidecar(linear_cartpole_model, data.empty(4, 1), AugmentConfig(mode="kfcpp"), p)
    assert len(sy.load_sidecar(p)) == 0


def test_sidecar_resume(linear_cartpole_model, small_cartpole, tmp_path):
    ds = small_cartpole.subset(range(500))
    cfg = AugmentConfig(mode="kfcpp")
    full, part = tmp_path / "full.kfs", tmp_path / "part.kfs"
    sy.precompute_sidecar(linear_cartpole_model, ds, cfg, full, chunk_size=100)
    raw = full.read_bytes()
    rec = 8 * 4 * 16
    part.write_bytes(raw[: len(raw) - 230 * rec - 17])  # interrupted mid-record
    info = sy.precompute_sidecar(linear_cartpole_model, ds, cfg, part, chunk_size=100)
    assert info.resumed_from == 269
    assert part.read_bytes() == raw


def test_sidecar_fallback_records(tmp_path):
    from kfc.data import Dataset
    k = np.array([[1.0, 1.0], [0.0, 1.0]])
    model = koopman.identity_model(k, np.zeros((1, 2, 2)))
    ds = Dataset(np.ones((3, 2)), np.zeros((3, 1)), np.zeros(3), np.ones((3, 2)))
    p = tmp_path / "f.kfs"
    info = sy.precompute_sidecar(model, ds, AugmentConfig(mode="kfcpp"), p)
    assert info.fallbacks == 3
    sc = sy.load_sidecar(p)
    assert sc.generator(0) is None


def test_sidecar_truncated_rejected(linear_cartpole_model, small_cartpole, tmp_path):
    p = tmp_path / "t.kfs"
    sy.precompute_sidecar(linear_cartpole_model, small_cartpole.subset(range(5)), AugmentConfig(mode="kfc"), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ff.TruncatedFile):
        sy.load_sidecar(p)


def test_sidecar_payload_matches_cache(linear_cartpole_model, small_cartpole, tmp_path):
    ds = small_cartpole.subset(range(50))
    cfg = AugmentConfig(mode="kfcpp")
    p = tmp_path / "s.kfs"
    sy.precompute_sidecar(linear_cartpole_model, ds, cfg, p)
    sc = sy.load_sidecar(p)
    idx = np.arange(50)
    a = sy.augment_batch(linear_cartpole_model, ds.states, ds.actions, ds.next_states, cfg,
                         np.random.default_rng(0), payload=sc.generators(idx))
    b = sy.augment_batch(linear_cartpole_model, ds.states, ds.actions, ds.next_states, cfg,
                         np.random.default_rng(0))
    np.testing.assert_array_equal(a.s_t, b.s_t)


def test_tuple_type():
    t = TransitionTuple(np.zeros(2), np.zeros(1), 1.0, np.ones(2))
    assert t.symmetry is None
