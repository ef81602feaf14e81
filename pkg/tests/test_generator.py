import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from psrotsp import generator as gen
from psrotsp import nn
from psrotsp.errors import DegenerateInstance, EmptyPopulation, InvalidParameter, ShapeError
from psrotsp.generator import (
    AttackBatch,
    GeneratorPolicy,
    GeneratorTrainConfig,
    attack_batch,
    attack_log_prob_grad,
    attack_surrogate,
    attack_variance,
    convolution_density,
    generator_loss_gradient,
    log_convolution_density,
    log_prob_attacked,
    perturb,
    sample_scale,
    scale_gradient,
    train_generator_oracle,
)
from psrotsp.oracle import held_karp_batch
from psrotsp.solver import SolverPolicy, nearest_neighbor_policy
from psrotsp.tsp_core import Instance, batch_tour_lengths, generate_uniform, normalize
from reference import central_difference, max_relative_error


def zero_weight_policy(bias, lam=1 / 3):
    pol = GeneratorPolicy.identity(lam=lam)
    params = [np.zeros_like(p) for p in pol.net.params()]
    params[-1] = np.array(bias, dtype=float)
    pol.net = pol.net.with_params(params)
    return pol


def test_uniform_scale_logits():
    np.testing.assert_allclose(GeneratorPolicy.identity().scale_probs, [1 / 3] * 3)


def test_saturated_scale_logits():
    pol = GeneratorPolicy.identity()
    pol.gamma_n = np.array([50.0, 0.0, 0.0])
    assert pol.scale_probs[0] == pytest.approx(1.0)
    assert all(sample_scale(pol.gamma_n, pol.support, s)[0] == 10 for s in range(20))


def test_scale_frequencies():
    gamma = np.array([0.4, -0.3, 0.1])
    rng = np.random.default_rng(0)
    draws = [sample_scale(gamma, (10, 12, 15), rng)[0] for _ in range(100_000)]
    freq = np.array([np.mean(np.array(draws) == n) for n in (10, 12, 15)])
    assert np.abs(freq - nn.softmax(gamma)).max() < 0.01


def test_zero_weight_net_gives_constant_variance():
    pol = zero_weight_policy([0.3, -1.2])
    var = attack_variance(pol, generate_uniform(7, 0))
    expect = (1 / 3) * nn.sigmoid(np.array([0.3, -1.2]))
    np.testing.assert_allclose(var, np.broadcast_to(expect, (7, 2)), rtol=1e-15)


@given(st.integers(3, 40), st.integers(0, 1000))
@settings(max_examples=20)
def test_variance_shape_and_range(n, seed):
    pol = GeneratorPolicy.random(seed)
    var = attack_variance(pol, generate_uniform(n, seed))
    assert var.shape == (n, 2)
    assert np.all(var > 0) and np.all(var < 1 / 3)


def test_variance_shape_checked():
    with pytest.raises(ShapeError):
        attack_variance(GeneratorPolicy.identity(), np.zeros((4, 3)))


def test_vanishing_attack_is_normalization():
    inst = generate_uniform(12, 3)
    out, _ = perturb(inst, np.full((12, 2), 1e-40), 0)
    np.testing.assert_allclose(out.points, normalize(inst).points, atol=1e-15)


def test_identity_policy_leaves_instances_unchanged():
    pol = GeneratorPolicy.identity((10,))
    base = np.random.default_rng(0).random((5, 10, 2))
    noise = np.random.default_rng(1).standard_normal((5, 10, 2))
    batch = attack_batch(pol, base, noise)
    np.testing.assert_allclose(batch.raw, base, atol=1e-5)


def test_perturb_reproducible_and_degenerate():
    inst = generate_uniform(6, 1)
    var = attack_variance(GeneratorPolicy.random(0), inst)
    assert perturb(inst, var, 5)[0] == perturb(inst, var, 5)[0]
    flat = Instance([[0.5, 0.5]] * 3)
    with pytest.raises(DegenerateInstance):
        perturb(flat, np.full((3, 2), 1e-300), 0)


def test_perturbation_variance_monte_carlo():
    inst = generate_uniform(3, 0)
    var = attack_variance(GeneratorPolicy.random(0), inst)
    rng = np.random.default_rng(0)
    d = np.stack([perturb(inst, var, rng)[1] for _ in range(100_000)]) - inst.points
    assert np.abs(d.var(axis=0) / var - 1).max() < 0.05


def test_density_example():
    assert convolution_density(0.5, 0.01) == pytest.approx(norm.cdf(5) - norm.cdf(-5), abs=1e-12)
    assert convolution_density(0.5, 0.01) == pytest.approx(0.99999943, abs=1e-8)


@given(st.floats(-2, 3), st.floats(1e-4, 1.0))
def test_density_symmetry(z, var):
    assert convolution_density(z, var) == pytest.approx(convolution_density(1 - z, var), abs=1e-12)
    logp, _, _ = log_convolution_density(np.array(z), np.array(var))
    assert logp == pytest.approx(log_convolution_density(np.array(1 - z), np.array(var))[0], abs=1e-9)


def test_density_rejects_nonpositive_variance():
    with pytest.raises(InvalidParameter):
        convolution_density(0.5, 0.0)
    with pytest.raises(InvalidParameter):
        log_convolution_density(0.5, -1.0)


def test_monte_carlo_matches_closed_form():
    z = np.linspace(-0.5, 1.5, 41)
    for s in np.linspace(0.01, 1 / 3, 8):
        closed = convolution_density(z, s * s)
        mc = convolution_density(z, s * s, mode="monte_carlo", rng=7)
        assert np.abs(mc - closed).max() < 0.01


def test_iid_monte_carlo_is_unbiased_but_noisy():
    z, s = np.array([0.3]), 0.05
    runs = np.array([convolution_density(z, s * s, "monte_carlo", rng=k, stratified=False)[0] for k in range(200)])
    assert abs(runs.mean() - convolution_density(z, s * s)[0]) < 4 * runs.std() / np.sqrt(200)


@pytest.mark.parametrize("s", [0.01, 0.05, 0.1, 0.2, 1 / 3])
def test_density_integrates_to_one(s):
    total, _ = integrate.quad(lambda z: float(convolution_density(z, s * s)), -6 * s, 1 + 6 * s, points=[0.0, 1.0], limit=200)
    assert abs(total - 1) < 1e-3


def test_log_density_matches_log_of_density():
    z = np.linspace(-0.3, 1.3, 33)
    var = np.full_like(z, 0.02)
    logp, _, _ = log_convolution_density(z, var)
    np.testing.assert_allclose(logp, np.log(convolution_density(z, var)), rtol=1e-10)


def test_log_density_clamps_far_tail():
    logp, dlogp, clamped = log_convolution_density(np.array([60.0]), np.array([1e-4]))
    assert clamped[0] and logp[0] == gen.LOG_FLOOR and dlogp[0] == 0.0


def test_single_point_log_prob():
    pol = zero_weight_policy([0.0, 0.0])
    target = 0.01  # variance 0.01
    pol.lam = target / 0.5
    lp = log_prob_attacked(pol, np.array([[0.3, 0.7]]), np.array([[0.5, 0.5]]))
    assert lp.per_coord == pytest.approx(np.full((1, 2), np.log(0.99999943)), abs=1e-8)
    assert lp.per_coord[0, 0] == pytest.approx(-5.7e-7, rel=0.01)


def test_log_prob_additive():
    pol = GeneratorPolicy.random(2)
    base = generate_uniform(9, 1).points
    raw = base + 0.05 * np.random.default_rng(0).standard_normal(base.shape)
    whole = log_prob_attacked(pol, base, raw).total
    parts = sum(log_prob_attacked(pol, base[i : i + 1], raw[i : i + 1]).total for i in range(9))
    assert whole == pytest.approx(parts, rel=1e-12)


@given(st.floats(-0.4, 1.4), st.floats(0.002, 0.3))
def test_log_density_variance_derivative(z, var):
    _, d, clamped = log_convolution_density(np.array(z), np.array(var))
    h = 1e-4 * var
    up = log_convolution_density(np.array(z), np.array(var + h))[0]
    dn = log_convolution_density(np.array(z), np.array(var - h))[0]
    num = (up - dn) / (2 * h)
    # near-zero derivatives are compared on an absolute scale where round-off dominates
    assert abs(d - num) <= 1e-5 * max(abs(num), 1e-2)


def test_log_density_variance_derivative_formula():
    # d p / d sigma by hand, chain-ruled to the variance
    z, s = 0.9, 0.15
    p = norm.cdf(z / s) - norm.cdf((z - 1) / s)
    dp_ds = -(z / s**2) * norm.pdf(z / s) + ((z - 1) / s**2) * norm.pdf((z - 1) / s)
    _, d, _ = log_convolution_density(np.array(z), np.array(s * s))
    assert d == pytest.approx(dp_ds / p / (2 * s), rel=1e-10)


def test_attack_surrogate_gradient():
    pol = GeneratorPolicy.random(4, support=(6,), output_bias=-2.0)
    rng = np.random.default_rng(0)
    base = rng.random((4, 6, 2))
    raw = attack_batch(pol, base, rng.standard_normal((4, 6, 2))).raw
    w = rng.normal(size=4)
    analytic = attack_log_prob_grad(pol, base, raw, w)

    def f(params):
        p = pol.copy()
        p.net = pol.net.with_params(params)
        return attack_surrogate(p, base, raw, w)

    assert max_relative_error(analytic, central_difference(f, pol.net.params(), h=1e-6)) < 1e-4


def test_scale_gradient_constant_costs():
    g = scale_gradient(np.array([0.2, -0.1, 0.5]), [0, 1, 2, 2, 1], np.full(5, 3.7))
    assert np.abs(g).max() < 1e-15


def test_scale_gradient_by_enumeration():
    gamma = np.array([0.3, -0.2])
    support = (6, 8)
    solver = nearest_neighbor_policy()
    rng = np.random.default_rng(0)
    frozen = {n: rng.random((50, n, 2)) for n in support}
    cost = np.array([batch_tour_lengths(frozen[n], solver.solve_batch(frozen[n])).mean() for n in support])

    def expected(g):
        return float(nn.softmax(g[0]) @ cost)

    p = nn.softmax(gamma)
    est = scale_gradient(gamma, [0, 1], cost, sample_weights=p)
    exact = central_difference(expected, [gamma])[0]
    np.testing.assert_allclose(est, exact, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(est, p * (cost - p @ cost), rtol=1e-12)


def test_loss_gradient_zero_for_constant_costs(monkeypatch):
    def constant(batch, solvers, which, threshold):
        b = batch.coords.shape[0]
        return np.full(b, 2.5), np.full(b, 0.1)

    monkeypatch.setattr(gen, "_solver_costs", constant)
    g_c, g_n, _ = generator_loss_gradient(GeneratorPolicy.random(0), [1.0], [SolverPolicy.random(0)], 32, 0)
    assert all(np.abs(g).max() < 1e-15 for g in g_c)
    assert np.abs(g_n).max() < 1e-15


def test_loss_gradient_needs_solvers():
    with pytest.raises(EmptyPopulation):
        generator_loss_gradient(GeneratorPolicy.random(0), [], [], 8, 0)


def test_loss_gradient_deterministic():
    pol, solvers = GeneratorPolicy.random(1, support=(8,)), [SolverPolicy.random(0)]
    a = generator_loss_gradient(pol, [1.0], solvers, 16, 3)
    b = generator_loss_gradient(pol, [1.0], solvers, 16, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0])) and np.array_equal(a[1], b[1])


def test_train_zero_epochs():
    init = GeneratorPolicy.random(3, support=(8,))
    cfg = GeneratorTrainConfig(epochs=0, eval_size=20, support=(8,))
    best, log = train_generator_oracle([1.0], [SolverPolicy.random(0)], cfg, 0, init=init)
    assert np.array_equal(best.gamma_n, init.gamma_n)
    assert all(np.array_equal(a, b) for a, b in zip(best.net.params(), init.net.params()))
    assert log.epochs == [0]


def test_train_selects_argmax_snapshot():
    cfg = GeneratorTrainConfig(epochs=4, batch_size=16, batches_per_epoch=2, eval_size=40, support=(8,))
    solvers = [nearest_neighbor_policy()]
    best, log = train_generator_oracle([1.0], solvers, cfg, 1)
    assert log.best_epoch == int(np.argmax(log.values))
    # replay the frozen evaluation draws
    rng = np.random.default_rng(1)
    GeneratorPolicy.random(rng, (8,), cfg.lam, cfg.init_output_bias)
    es = gen.EvalSet.draw((8,), cfg.eval_size, rng)
    assert gen.mixture_gap(best, [1.0], solvers, es) == pytest.approx(max(log.values), abs=1e-12)


def test_attack_beats_nearest_neighbor():
    # paired comparison on 200 instances after 40 epochs against a frozen greedy solver
    solver = nearest_neighbor_policy()
    cfg = GeneratorTrainConfig(epochs=40, support=(10,), init_output_bias=-6.0)
    best, _ = train_generator_oracle([1.0], [solver], cfg, 0)
    rng = np.random.default_rng(99)
    base = rng.random((200, 10, 2))
    noise = rng.standard_normal((200, 10, 2))
    def gaps(coords):
        opt = held_karp_batch(coords)[0]
        return (batch_tour_lengths(coords, solver.solve_batch(coords)) - opt) / opt

    d = gaps(attack_batch(best, base, noise).coords) - gaps(base)
    assert d.mean() > 0


def test_json_round_trip():
    pol = GeneratorPolicy.random(5, id=3)
    obj = pol.to_json_obj()
    assert set(obj) == {"gamma_N", "support", "gamma_C", "lambda", "id"}
    back = GeneratorPolicy.from_json_obj(obj)
    pts = generate_uniform(10, 0).points
    np.testing.assert_array_equal(back.variance(pts), pol.variance(pts))
    assert back.support == pol.support and back.lam == pol.lam


def test_sample_groups_by_scale():
    groups = GeneratorPolicy.random(0).sample(60, 2)
    assert sum(v.shape[0] for v in groups.values()) == 60
    for n, coords in groups.items():
        assert coords.shape[1:] == (n, 2)
        assert coords.min() >= 0 and coords.max() <= 1


def test_attack_batch_fields():
    pol = GeneratorPolicy.random(0, support=(7,))
    b = attack_batch(pol, np.random.default_rng(0).random((3, 7, 2)), np.zeros((3, 7, 2)))
    assert isinstance(b, AttackBatch) and b.n == 7
    np.testing.assert_array_equal(b.raw, b.base)
