import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sc_emd.emd_core import (FlowMatrix, flow_pattern, ground_from_prototypes,
                             index_ground_distance)
from sc_emd.errors import (ConfigError, DimensionMismatch, InfeasibleTransport,
                           InfeasibleUpdate, TooFewSamples)
from sc_emd.scemd import (EncodeBatchError, EncodeResult, FitConfig,
                          ScemdModel, _encode_problem, encode_batch,
                          encode_one, fit, initial_dictionary, objective,
                          reconstruct, update_dictionary)
from sc_emd import lp_solver

from oracles import dictionary_lp, encode_lp, vertex_enumeration


def delta(D, i):
    x = np.zeros(D)
    x[i] = 1.0
    return x


def random_hist(rng, D, sparsity=0.3):
    x = rng.random(D) * (rng.random(D) > sparsity)
    if x.sum() == 0:
        x[rng.integers(D)] = 1.0
    return x / x.sum()


def random_model(rng, D, M, gamma=0.1, K=None):
    U = np.column_stack([random_hist(rng, D) for _ in range(M)])
    gd = ground_from_prototypes(rng.normal(size=(D, 2)))
    return ScemdModel.from_dictionary(U, gamma, gd, D if K is None else K)


seeds = st.integers(0, 2**31 - 1)


# encode_one -------------------------------------------------------------------


def test_single_column_equal_to_x():
    x = np.array([0.2, 0.5, 0.3])
    model = ScemdModel.from_dictionary(x[:, None], gamma=0.4)
    r = encode_one(x, model)
    np.testing.assert_allclose(r.code, [1.0], atol=1e-12)
    np.testing.assert_allclose(r.slack, [1.0], atol=1e-12)
    assert r.emd_cost == pytest.approx(0.0, abs=1e-12)
    assert r.objective == pytest.approx(0.4, abs=1e-12)


def test_delta_dictionary_example():
    U = np.column_stack([delta(2, 0), delta(2, 1)])
    model = ScemdModel.from_dictionary(U, gamma=0.1)
    x = delta(2, 0)
    ref = encode_lp(x, U, model.gd.d, 0.1)
    p = _encode_problem(x, model)
    brute = vertex_enumeration(p.c, p.A_eq.toarray(), p.b_eq,
                               p.A_ub.toarray(), p.b_ub, p.lo, p.hi)
    assert ref == pytest.approx(0.1, abs=1e-12)
    assert brute == pytest.approx(0.1, abs=1e-12)
    r = encode_one(x, model)
    np.testing.assert_allclose(r.code, [1.0, 0.0], atol=1e-12)
    assert r.objective == pytest.approx(0.1, abs=1e-12)


def test_gamma_zero_inside_hull_is_transport_free():
    U = np.array([[0.6, 0.0, 0.1],
                  [0.4, 0.3, 0.2],
                  [0.0, 0.7, 0.7]])
    w = np.array([0.5, 0.2, 0.3])
    x = U @ w
    model = ScemdModel.from_dictionary(U, gamma=0.0, K=3)
    assert encode_lp(x, U, model.gd.d, 0.0) == pytest.approx(0.0, abs=1e-12)
    r = encode_one(x, model)
    assert r.emd_cost == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(r.slack, np.abs(r.code))


def test_encode_checks_length():
    model = ScemdModel.from_dictionary(np.eye(3))
    with pytest.raises(DimensionMismatch):
        encode_one([0.5, 0.5], model)


def test_encode_infeasible_under_narrow_pattern():
    U = np.column_stack([delta(4, 0), delta(4, 1)])
    model = ScemdModel.from_dictionary(U, K=1)
    with pytest.raises(InfeasibleTransport):
        encode_one(delta(4, 3), model)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), seeds,
       st.sampled_from([0.01, 0.1, 1.0]))
def test_encode_matches_joint_lp_oracle(D, M, seed, gamma):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D, M, gamma)
    x = random_hist(rng, D)
    r = encode_one(x, model)
    assert r.objective == pytest.approx(
        encode_lp(x, model.dictionary, model.gd.d, gamma), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 6), st.integers(1, 3), seeds, st.data())
def test_encode_matches_oracle_on_restricted_pattern(D, M, seed, data):
    rng = np.random.default_rng(seed)
    K = data.draw(st.integers(2, D))
    model = random_model(rng, D, M, 0.1, K)
    x = random_hist(rng, D)
    allowed = np.zeros((D, D), dtype=bool)
    allowed[model.pattern.sources, model.pattern.targets] = True
    ref = encode_lp(x, model.dictionary, model.gd.d, 0.1, allowed)
    if ref is None:
        with pytest.raises(InfeasibleTransport):
            encode_one(x, model)
    else:
        assert encode_one(x, model).objective == pytest.approx(ref, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), seeds,
       st.floats(0.001, 5.0))
def test_encode_invariants(D, M, seed, gamma):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D, M, gamma)
    x = random_hist(rng, D)
    r = encode_one(x, model)
    # slack tightness
    assert np.abs(r.slack - np.abs(r.code)).max() <= 1e-8
    # code mass forced by the supply equality
    assert r.code.sum() >= 1 - 1e-8
    # reconstruction is nonnegative
    assert reconstruct(model, r.code).min() >= -1e-8
    # flow respects supplies and capacities
    np.testing.assert_allclose(r.flow.row_sums(), x, atol=1e-9)
    assert np.all(r.flow.col_sums() <= reconstruct(model, r.code) + 1e-9)
    assert r.objective == pytest.approx(
        r.emd_cost + gamma * r.slack.sum(), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), seeds, st.data())
def test_exact_member_encodes_without_transport(D, M, seed, data):
    rng = np.random.default_rng(seed)
    gamma = data.draw(st.floats(1e-4, 0.1))
    model = random_model(rng, D, M, gamma, K=min(D, 4))
    m = data.draw(st.integers(0, M - 1))
    r = encode_one(model.dictionary[:, m], model)
    assert r.emd_cost <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), seeds)
def test_gamma_monotonicity(D, M, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D, M)
    x = random_hist(rng, D)
    prev = None
    for g in [0.0, 0.01, 0.1, 1.0, 10.0]:
        r = encode_one(x, model.with_gamma(g))
        if prev is not None:
            assert np.abs(r.code).sum() <= np.abs(prev.code).sum() + 1e-7
            assert r.emd_cost >= prev.emd_cost - 1e-7
        prev = r


# encode_batch -------------------------------------------------------------------


def test_batch_of_one():
    rng = np.random.default_rng(1)
    model = random_model(rng, 4, 2)
    x = random_hist(rng, 4)
    (r,) = encode_batch([x], model)
    s = encode_one(x, model)
    assert r.code.tobytes() == s.code.tobytes()
    assert r.objective == s.objective


def test_batch_matches_individual_encodes():
    rng = np.random.default_rng(5)
    model = random_model(rng, 5, 3)
    xs = [random_hist(rng, 5) for _ in range(3)]
    batch = encode_batch(xs, model)
    for x, r in zip(xs, batch):
        s = encode_one(x, model)
        np.testing.assert_array_equal(r.code, s.code)
        np.testing.assert_array_equal(r.flow.values, s.flow.values)


def test_parallel_batch_is_bitwise_serial():
    rng = np.random.default_rng(9)
    model = random_model(rng, 6, 3, K=4)
    xs = [random_hist(rng, 6, 0) for _ in range(7)]
    serial = encode_batch(xs, model, jobs=1)
    parallel = encode_batch(xs, model, jobs=3)
    for a, b in zip(serial, parallel):
        assert a.code.tobytes() == b.code.tobytes()
        assert a.slack.tobytes() == b.slack.tobytes()
        assert a.flow.values.tobytes() == b.flow.values.tobytes()


def test_batch_reports_failing_indices():
    U = np.column_stack([delta(4, 0), delta(4, 1)])
    model = ScemdModel.from_dictionary(U, K=1)
    xs = [delta(4, 0), delta(4, 3), delta(4, 1), delta(4, 2)]
    with pytest.raises(EncodeBatchError) as info:
        encode_batch(xs, model)
    assert sorted(info.value.failures) == [1, 3]
    assert info.value.code == InfeasibleTransport.code


# update_dictionary ---------------------------------------------------------------


def test_update_single_sample_copies_x():
    x = np.array([0.1, 0.6, 0.3])
    model = ScemdModel.from_dictionary(np.full((3, 1), 1 / 3))
    U, cost = update_dictionary([x], [[1.0]], model)
    np.testing.assert_allclose(U[:, 0], x, atol=1e-12)
    assert cost == pytest.approx(0.0, abs=1e-12)


def test_update_two_deltas_example():
    X = np.array([delta(3, 0), delta(3, 2)])
    V = np.array([[1.0], [1.0]])
    model = ScemdModel.from_dictionary(np.full((3, 1), 1 / 3), K=3)
    # each flow must fill u exactly, so the total is
    # (u1 + 2 u2) + (2 u0 + u1) = 2 for every feasible u: 1.0 per sample
    ref = dictionary_lp(X, V, model.gd.d)
    assert ref == pytest.approx(2.0, abs=1e-10)
    U, cost = update_dictionary(X, V, model)
    assert cost == pytest.approx(2.0, abs=1e-10)
    assert cost / len(X) == pytest.approx(1.0, abs=1e-10)
    assert U.sum() == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(1, 2), st.integers(1, 3), seeds)
def test_update_matches_joint_oracle(D, M, N, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D, M)
    X = np.array([random_hist(rng, D) for _ in range(N)])
    V = np.array([r.code for r in encode_batch(X, model)])
    _, cost = update_dictionary(X, V, model)
    assert cost == pytest.approx(dictionary_lp(X, V, model.gd.d), abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 6), st.integers(1, 3), st.integers(3, 6), seeds)
def test_update_never_worse_than_previous_dictionary(D, M, N, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D, M, K=min(D, 3))
    X = np.array([model.dictionary @ rng.dirichlet(np.ones(M))
                  for _ in range(N)])
    results = encode_batch(X, model)
    before = sum(r.emd_cost for r in results)
    V = np.array([r.code for r in results])
    U, cost = update_dictionary(X, V, model)
    assert cost <= before + 1e-7
    for m in range(M):
        assert U[:, m].min() >= 0 and U[:, m].sum() == pytest.approx(1.0)


def test_update_rejects_light_codes():
    model = ScemdModel.from_dictionary(np.eye(3))
    with pytest.raises(InfeasibleUpdate):
        update_dictionary([delta(3, 0)], [[0.5, 0.2, 0.0]], model)


def test_update_variable_cap():
    model = ScemdModel.from_dictionary(np.eye(3))
    with pytest.raises(ConfigError):
        update_dictionary([delta(3, 0)], [[1.0, 0.0, 0.0]], model, max_vars=5)


def test_update_shape_check():
    model = ScemdModel.from_dictionary(np.eye(3))
    with pytest.raises(DimensionMismatch):
        update_dictionary([delta(3, 0)], [[1.0, 0.0]], model)


# fit ------------------------------------------------------------------------------


def test_fit_on_deltas_reaches_gamma_m():
    D = 4
    X = np.eye(D)
    model = fit(X, FitConfig(M=D, T=5, gamma=0.1, K=D, seed=0))
    assert model.fit_trace[-1] == pytest.approx(0.1 * D, abs=1e-9)
    cols = {int(np.argmax(model.dictionary[:, m])) for m in range(D)}
    assert cols == set(range(D))


@pytest.fixture(scope="module")
def small_fit_data():
    rng = np.random.default_rng(3)
    U = np.column_stack([random_hist(rng, 8) for _ in range(3)])
    X = np.array([U @ rng.dirichlet(np.ones(3) * 0.5) for _ in range(12)])
    gd = ground_from_prototypes(rng.normal(size=(8, 2)))
    return X, gd


def test_fit_trace_nonincreasing(small_fit_data):
    X, gd = small_fit_data
    model = fit(X, FitConfig(M=3, T=4, gamma=0.1, K=4, seed=1), gd)
    tr = np.array(model.fit_trace)
    assert np.all(np.diff(tr) <= 1e-7)


def test_one_round_then_two(small_fit_data):
    X, gd = small_fit_data
    t1 = fit(X, FitConfig(M=3, T=1, K=4, seed=2), gd).fit_trace
    t2 = fit(X, FitConfig(M=3, T=2, K=4, seed=2), gd).fit_trace
    # the first round is shared, the second cannot undo it
    assert t2[:2] == t1[:2]
    assert t2[2] <= t2[1] + 1e-7


def test_fit_is_deterministic(small_fit_data):
    X, gd = small_fit_data
    cfg = FitConfig(M=3, T=2, K=4, seed=4)
    a, b = fit(X, cfg, gd), fit(X, cfg, gd)
    assert a.dictionary.tobytes() == b.dictionary.tobytes()
    assert a.fit_trace == b.fit_trace
    assert a.codes.tobytes() == b.codes.tobytes()


def test_fit_codes_match_reencode(small_fit_data):
    X, gd = small_fit_data
    model = fit(X, FitConfig(M=3, T=2, K=4, seed=0), gd)
    again = np.array([r.code for r in encode_batch(X, model)])
    np.testing.assert_allclose(again, model.codes, atol=1e-8)


def test_fit_rejects_too_many_atoms():
    with pytest.raises(TooFewSamples):
        fit(np.eye(3)[:2], FitConfig(M=3))


@pytest.mark.parametrize("cfg", [FitConfig(M=0), FitConfig(M=1, T=0),
                                 FitConfig(M=1, gamma=-1.0),
                                 FitConfig(M=1, K=9)])
def test_fit_config_validation(cfg):
    with pytest.raises(ConfigError):
        cfg.validate(5, 4)


def test_initial_dictionary_picks_distinct_samples():
    rng = np.random.default_rng(0)
    X = np.array([random_hist(rng, 5) for _ in range(10)])
    U = initial_dictionary(X, 6, seed=3)
    picked = {tuple(col) for col in U.T}
    assert len(picked) == 6
    assert picked <= {tuple(x) for x in X}
    np.testing.assert_array_equal(U, initial_dictionary(X, 6, seed=3))


# objective / reconstruct ---------------------------------------------------------


def _result(model, flow_values, slack, code=None):
    flow = FlowMatrix(model.pattern, np.asarray(flow_values, dtype=float))
    code = np.zeros(model.M) if code is None else code
    return EncodeResult(code, np.asarray(slack, float), flow,
                        flow.cost(model.gd), 0.0)


def test_objective_zero_parts():
    model = ScemdModel.from_dictionary(np.eye(3), gamma=1.0)
    r = _result(model, np.zeros((3, 3)), np.zeros(3))
    assert objective([delta(3, 0)], model, [r]) == 0.0


def test_objective_arithmetic():
    model = ScemdModel.from_dictionary(np.eye(2), gamma=2.0, K=2)
    # 0.3 of mass moved across a unit distance
    r = _result(model, [[0.7, 0.3], [0.0, 0.0]], [0.25, 0.25])
    assert objective([[1.0, 0.0]], model, [r]) == pytest.approx(1.3)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), seeds)
def test_objective_matches_lp_value(D, M, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, D, M)
    x = random_hist(rng, D)
    sol = lp_solver.solve(_encode_problem(x, model))
    r = encode_one(x, model)
    assert objective([x], model, [r]) == pytest.approx(sol.objective_value,
                                                       abs=1e-9)


def test_objective_shape_check():
    model = ScemdModel.from_dictionary(np.eye(2))
    with pytest.raises(DimensionMismatch):
        objective([[1.0, 0.0]], model, [])


def test_reconstruct_examples():
    rng = np.random.default_rng(0)
    model = random_model(rng, 5, 3)
    np.testing.assert_array_equal(reconstruct(model, [0, 1, 0]),
                                  model.dictionary[:, 1])
    np.testing.assert_array_equal(reconstruct(model, np.zeros(3)), np.zeros(5))
    v = rng.normal(size=3)
    expected = [sum(model.dictionary[j, m] * v[m] for m in range(3))
                for j in range(5)]
    np.testing.assert_allclose(reconstruct(model, v), expected, atol=1e-15)
    with pytest.raises(DimensionMismatch):
        reconstruct(model, [1.0])


def test_model_rejects_bad_columns():
    with pytest.raises(Exception):
        ScemdModel.from_dictionary([[0.5, 1.0], [0.4, 0.0]])
    with pytest.raises(DimensionMismatch):
        ScemdModel.from_dictionary(np.eye(3), gd=index_ground_distance(2))


def test_model_pattern_follows_k():
    model = ScemdModel.from_dictionary(np.eye(6), K=2)
    assert model.K == 2
    np.testing.assert_array_equal(
        model.pattern.allowed, flow_pattern(model.gd, 2).allowed)
