import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from knowru.env import ConfigurationError, ScenarioSpec, observation_dim, observe, reset
from knowru.nn import MlpNet, grad_check, save_snapshot
from knowru.reuse import (
    AlphaSchedule,
    ObservationAdapter,
    ReuseScaler,
    TeacherSnapshot,
    TransferContext,
    alpha_performance,
    blend,
    default_beta,
    observation_adapt,
    pair,
    pair_by_role,
    reuse_loss,
    scale,
    schedule_step,
    write_teacher_metadata,
)


def spread(n):
    return ScenarioSpec("spread", n_agents=n, n_landmarks=n)


def teacher_for(spec, agent=0, seed=0):
    net = MlpNet.init([observation_dim(spec, agent), 16, 5], np.random.default_rng(seed))
    return TeacherSnapshot(net, spec, agent)


# ---------------------------------------------------------------- pairing


def test_pair_examples():
    assert pair(4, 4) == [0, 1, 2, 3]
    assert pair(6, 4) == [0, 1, 2, 3, 0, 1]
    assert pair(3, 1) == [0, 0, 0]
    with pytest.raises(ConfigurationError):
        pair(3, 0)


def test_pair_by_role():
    students = ["adversary", "adversary", "good", "good", "good"]
    teachers = ["adversary", "good", "good"]
    assert pair_by_role(students, teachers) == [0, 0, 1, 2, 1]
    assert pair_by_role(["bank", "collector"], ["collector"]) == [None, 0]


# ---------------------------------------------------------------- adapter


def test_identity_adapter():
    ad = ObservationAdapter(spread(3), 1, spread(3), 1)
    assert ad.identity
    x = np.random.default_rng(0).normal(size=(ad.student_dim, 4))
    assert ad(x) is not None and np.array_equal(ad(x), x)


def test_adapter_keeps_nearest_entities():
    student, source = spread(6), spread(4)
    s = reset(student, 3)
    obs = observe(s, 0)
    ad = ObservationAdapter(source, 0, student, 0)
    out = ad(obs)
    assert out.shape == (observation_dim(source, 0),)
    # self block, 4 nearest landmarks, 3 nearest other agents
    np.testing.assert_array_equal(out[:4], obs[:4])
    np.testing.assert_array_equal(out[4:12], obs[4:12])
    np.testing.assert_array_equal(out[12:18], obs[16:22])


def test_adapter_pads_missing_slots():
    ad = ObservationAdapter(spread(4), 0, spread(2), 0)
    obs = observe(reset(spread(2), 0), 0)
    out = ad(obs)
    assert out.shape == (observation_dim(spread(4), 0),)
    np.testing.assert_array_equal(out[4:8], obs[4:8])
    assert not out[8:12].any() and not out[14:].any()
    np.testing.assert_array_equal(out[12:14], obs[8:10])


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 100))
def test_adapter_length_is_teacher_input(n_src, n_tgt, seed):
    src, tgt = spread(n_src), spread(n_tgt)
    t = teacher_for(src)
    ad = ObservationAdapter(src, 0, tgt, n_tgt - 1)
    out = observation_adapt(t, observe(reset(tgt, seed), n_tgt - 1), ad)
    assert out.shape == (t.input_dim,)


def test_adapter_errors():
    adv = ScenarioSpec("adversary", n_agents=2, n_adversaries=1, n_landmarks=2)
    with pytest.raises(ConfigurationError):
        ObservationAdapter(spread(2), 0, adv, 0)
    # a good-agent teacher needs the target block an adversary student lacks
    with pytest.raises(ConfigurationError):
        ObservationAdapter(adv, 1, adv, 0)
    ad = ObservationAdapter(spread(2), 0, spread(3), 0)
    with pytest.raises(ValueError):
        ad(np.zeros(5))


# ------------------------------------------------------------- reuse loss


def test_reuse_loss_self_is_zero():
    t = teacher_for(spread(3))
    obs = np.random.default_rng(1).normal(size=(t.input_dim, 8))
    ad = ObservationAdapter(spread(3), 0, spread(3), 0)
    for kind in ("mse", "kd_kl", "ce"):
        v, g = reuse_loss(t, t.net.copy(), obs, kind, 1.0, ad)
        if kind != "ce":
            assert v == pytest.approx(0.0, abs=1e-12)
        assert np.max(np.abs(g)) < 1e-12


def test_reuse_loss_mean_rule():
    teacher = TeacherSnapshot(MlpNet.zeros([1, 5]), spread(1), 0)
    student = MlpNet([1, 5], [np.ones((5, 1))], [np.zeros((5, 1))])
    v, _ = reuse_loss(teacher, student, np.array([[2.0, 0.0]]))
    assert v == 2.0


def test_reuse_loss_gradient_check():
    rng = np.random.default_rng(2)
    t = teacher_for(spread(3), seed=3)
    student = MlpNet.init([t.input_dim, 16, 5], rng, "tanh")
    obs = rng.normal(size=(t.input_dim, 6))
    for kind, temp in (("mse", 1.0), ("kd_kl", 2.0), ("ce", 1.5)):
        def loss(logits):
            return reuse_loss(t, student, obs, kind, temp, student_logits=logits)

        assert grad_check(student, loss, obs) < 1e-4


def test_reuse_loss_errors():
    t = teacher_for(spread(2))
    with pytest.raises(ConfigurationError):
        reuse_loss(t, t.net, np.zeros((t.input_dim, 2)), "l1")
    with pytest.raises(ValueError):
        reuse_loss(t, t.net, np.zeros((t.input_dim, 0)))


def test_teacher_is_frozen(tmp_path):
    spec = spread(2)
    net = MlpNet.init([observation_dim(spec, 0), 8, 5], np.random.default_rng(0))
    path = save_snapshot(net, tmp_path / "actor.snap")
    with pytest.raises(ConfigurationError):
        TeacherSnapshot.load(path)
    write_teacher_metadata(path, spec, 0, seed=4, episodes=10)
    t = TeacherSnapshot.load(path)
    assert t.metadata["seed"] == 4 and t.role == "agent"
    with pytest.raises(ValueError):
        t.net.weights[0][0, 0] = 1.0
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), t.net.params()))


# ---------------------------------------------------------------- scaling


def test_scaler_modes():
    assert scale(ReuseScaler("none"), 0.3, 50.0) == 0.3
    assert scale(ReuseScaler("static", 7.0), 0.5, 50.0) == 3.5
    with pytest.raises(ConfigurationError):
        ReuseScaler("static", 0.0)
    with pytest.raises(ConfigurationError):
        ReuseScaler("adaptive")


def test_dynamic_steady_state():
    sc = ReuseScaler("dynamic")
    for _ in range(1000):
        s = sc.factor(0.1, -10.0)
    assert s == pytest.approx(100.0, rel=1e-6)
    assert scale(sc, 0.1, -10.0) == pytest.approx(10.0, rel=1e-6)


def test_dynamic_updates_means_before_ratio():
    sc = ReuseScaler("dynamic")
    # first call: both means are (1 - decay) * value
    assert sc.factor(2.0, 4.0) == pytest.approx(0.04 / (0.02 + 1e-8))


def test_dynamic_clipped():
    assert ReuseScaler("dynamic").factor(1e-9, 1e6) == 1e3
    assert ReuseScaler("dynamic").factor(1e6, 1e-9) == 1e-3


@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=50))
def test_dynamic_factor_positive_finite(pairs):
    sc = ReuseScaler("dynamic")
    for r, q in pairs:
        s = sc.factor(r, q)
        assert 1e-3 <= s <= 1e3 and math.isfinite(s)


def test_blend_examples():
    g_r, g_q = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    v, g = blend(0.0, 2.0, g_r, -4.0, g_q)
    assert v == -4.0 and np.array_equal(g, g_q)
    v, g = blend(1.0, 2.0, g_r, -4.0, g_q)
    assert v == 2.0 and np.array_equal(g, g_r)
    assert blend(0.5, 2.0, g_r, -4.0, g_q)[0] == -1.0
    with pytest.raises(ValueError):
        blend(1.5, 2.0, g_r, -4.0, g_q)


# --------------------------------------------------------------- schedule


def test_schedule_examples():
    sched = AlphaSchedule(0.5, 0.001, 0.02)
    for _ in range(100):
        schedule_step(sched)
    assert sched.alpha == 0.4
    sched.episodes_done = 10**6
    assert sched.alpha == 0.02
    assert AlphaSchedule().alpha0 == 0.5 and AlphaSchedule().floor == 0.02


def test_default_beta_reaches_floor_at_80_percent():
    beta = default_beta(0.5, 0.02, 1000)
    sched = AlphaSchedule(0.5, beta, 0.02)
    seq = [sched.step() for _ in range(1000)]
    first = next(k for k, a in enumerate(seq, 1) if a == 0.02)
    assert 799 <= first <= 801


def test_schedule_below_floor_stays_put():
    sched = AlphaSchedule(0.01, 0.001, 0.02)
    assert [sched.step() for _ in range(5)] == [0.01] * 5
    assert AlphaSchedule(0.0, 0.001, 0.02).alpha == 0.0


@given(st.floats(0, 1), st.floats(0, 0.1), st.floats(0, 0.5), st.integers(1, 300))
def test_schedule_monotone_and_bounded(a0, beta, floor, n):
    sched = AlphaSchedule(a0, beta, floor)
    seq = [sched.alpha] + [sched.step() for _ in range(n)]
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert all(min(floor, a0) <= a <= a0 for a in seq)


def test_schedule_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        AlphaSchedule(1.5)
    with pytest.raises(ConfigurationError):
        AlphaSchedule(0.5, -0.1)


def test_alpha_performance():
    perf = alpha_performance({0.1: 400.0, 0.3: 400.0 / math.e, 0.5: 100.0})
    assert perf[0.1] == 0.0
    assert perf[0.3] == pytest.approx(1.0, abs=1e-12)
    assert perf[0.5] == math.log(4.0)
    with pytest.raises(ValueError):
        alpha_performance({0.1: 0.0})


@given(st.dictionaries(st.floats(0, 1), st.floats(1e-3, 1e6), min_size=1))
def test_alpha_performance_formula(times):
    t_max = max(times.values())
    perf = alpha_performance(times)
    for a, t in times.items():
        assert perf[a] == math.log(t_max / t) and perf[a] >= 0


# ---------------------------------------------------------------- context


def test_transfer_context_pairs_by_role():
    src = ScenarioSpec("adversary", n_agents=2, n_adversaries=1, n_landmarks=2)
    dst = ScenarioSpec("adversary", n_agents=3, n_adversaries=2, n_landmarks=3)
    teachers = [teacher_for(src, i, seed=i) for i in range(3)]
    ctx = TransferContext.build(teachers, dst, AlphaSchedule())
    assert [t.role for t in ctx.teachers] == dst.roles()
    assert ctx.teachers[0] is teachers[0] and ctx.teachers[1] is teachers[0]
    assert ctx.teachers[2] is teachers[1] and ctx.teachers[4] is teachers[1]


def test_transfer_context_missing_role_has_no_term():
    src = ScenarioSpec("treasure", n_collectors=2, n_banks=1)
    dst = ScenarioSpec("treasure", n_collectors=3, n_banks=1)
    ctx = TransferContext.build([teacher_for(src, 0)], dst, AlphaSchedule())
    obs = np.zeros((observation_dim(dst, 3), 2))
    assert ctx.reuse_term(3, MlpNet.init([obs.shape[0], 5], np.random.default_rng(0)), obs, None, 1.0) is None
