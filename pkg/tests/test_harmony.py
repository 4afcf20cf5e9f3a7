import numpy as np
import pytest
from scipy.integrate import trapezoid

from harmonykb.harmony import (
    DynamicsError,
    HarmonyParams,
    constrain_params,
    harmony,
    harmony_type,
    integrate_dynamics,
    log_partition,
    mu,
    score,
    score_detail,
    score_gradients,
)
from harmonykb.linalg import SpectralBoundError, max_eigenvalue, symmetrize


def random_params(rng, d, lam=1.0, w_scale=0.5, with_bias=True):
    """Within-bound parameters: ||W||_F = w_scale * lam < lam - eps."""
    w = symmetrize(rng.standard_normal((d, d)))
    w *= w_scale * lam / np.linalg.norm(w)
    b = rng.standard_normal(d) if with_bias else np.zeros(d)
    return HarmonyParams(W=w, b=b, lam=lam)


def zero_params(d, lam=1.0):
    return HarmonyParams(W=np.zeros((d, d)), b=np.zeros(d), lam=lam)


# ---------------------------------------------------------------- harmony


def test_harmony_vanishes_at_fixed_input():
    p = zero_params(2)
    x = np.array([1.3, -0.4])
    assert harmony(x, x, p) == 0.0


def test_harmony_pure_faithfulness():
    p = zero_params(2)
    assert harmony(np.zeros(2), np.array([2.0, 0.0]), p) == -2.0


def test_harmony_rewrite_agreement():
    rng = np.random.default_rng(21)
    for _ in range(30):
        p = random_params(rng, 4, lam=float(rng.uniform(0.5, 3.0)))
        h = rng.standard_normal(4)
        x = rng.standard_normal(4)
        direct = harmony(h, x, p)
        v = p.W - p.lam * np.eye(4)
        rewrite = 0.5 * (h @ v @ h + (p.b + 2 * p.lam * x) @ h - p.lam * x @ x)
        assert abs(direct - rewrite) <= 1e-12 * (1 + abs(rewrite))


def test_harmony_requires_finite_lam():
    p = HarmonyParams(W=np.zeros((2, 2)), b=np.zeros(2), lam=None)
    with pytest.raises(ValueError, match="finite"):
        harmony(np.zeros(2), np.zeros(2), p)


def test_harmony_type_examples():
    p = HarmonyParams(W=np.zeros((3, 3)), b=np.zeros(3), lam=None)
    assert harmony_type(np.array([1.0, 2, 3]), p) == 0.0
    p = HarmonyParams(W=0.5 * np.eye(2), b=np.zeros(2), lam=None)
    assert abs(harmony_type(np.array([1.0, 1.0]), p) - 0.5) < 1e-15


def test_harmony_type_equals_harmony_at_h_eq_x():
    rng = np.random.default_rng(22)
    p = random_params(rng, 5, lam=2.0)
    x = rng.standard_normal(5)
    assert abs(harmony_type(x, p) - harmony(x, x, p)) < 1e-12


# ---------------------------------------------------------------- mu


def test_mu_identity_when_weights_vanish():
    p = zero_params(3, lam=2.5)
    x = np.array([0.3, -1.0, 2.0])
    assert np.allclose(mu(x, p), x, atol=1e-14)


def test_mu_bias_offset():
    p = HarmonyParams(W=np.zeros((2, 2)), b=np.array([2.0, 4.0]), lam=1.0)
    x = np.array([0.5, -0.5])
    assert np.allclose(mu(x, p), x + np.array([1.0, 2.0]), atol=1e-14)


def test_mu_is_the_unique_maximum():
    rng = np.random.default_rng(23)
    for _ in range(25):
        p = random_params(rng, 4, lam=float(rng.uniform(0.8, 3.0)))
        x = rng.standard_normal(4)
        opt = mu(x, p)
        v = p.W - p.lam * np.eye(4)
        grad = v @ opt + 0.5 * p.b + p.lam * x
        assert np.max(np.abs(grad)) <= 1e-8
        best = harmony(opt, x, p)
        for _ in range(100):
            delta = rng.standard_normal(4)
            delta *= 1e-2 / np.linalg.norm(delta)
            assert harmony(opt + delta, x, p) < best


def test_mu_propagates_spectral_bound_error():
    p = HarmonyParams(W=np.diag([2.0, 0.1]), b=np.zeros(2), lam=1.0)
    with pytest.raises(SpectralBoundError, match="lambda below spectral bound"):
        mu(np.zeros(2), p)


# ---------------------------------------------------------------- score


def test_score_zero_for_zero_weights():
    p = zero_params(4)
    rng = np.random.default_rng(24)
    for _ in range(10):
        assert abs(score(rng.standard_normal(4), p)) < 1e-14


def test_score_dominates_type_harmony():
    rng = np.random.default_rng(25)
    for _ in range(25):
        p = random_params(rng, 5, lam=float(rng.uniform(0.8, 3.0)))
        x = rng.standard_normal(5)
        assert score(x, p) >= harmony_type(x, p) - 1e-12


def test_score_two_route_identity():
    rng = np.random.default_rng(26)
    for _ in range(50):
        p = random_params(rng, 8, lam=float(rng.uniform(0.5, 4.0)))
        x = rng.standard_normal(8)
        fast = score(x, p)
        direct = harmony(mu(x, p), x, p)
        assert abs(fast - direct) <= 1e-9 * (1 + abs(direct))


def test_score_infinite_mode_is_type_harmony():
    rng = np.random.default_rng(27)
    w = symmetrize(rng.standard_normal((4, 4)))
    p = HarmonyParams(W=w, b=rng.standard_normal(4), lam=None)
    x = rng.standard_normal(4)
    assert score(x, p) == harmony_type(x, p)


def test_score_detail_consistency():
    rng = np.random.default_rng(28)
    p = random_params(rng, 4, lam=2.0)
    x = rng.standard_normal(4)
    st = score_detail(x, p)
    assert np.allclose(st.mu, mu(x, p))
    assert abs(st.score - harmony(st.mu, x, p)) <= 1e-9 * (1 + abs(st.score))
    p_inf = HarmonyParams(W=p.W, b=p.b, lam=None)
    st_inf = score_detail(x, p_inf)
    assert st_inf.mu is None
    assert st_inf.score == harmony_type(x, p_inf)


# ------------------------------------------------------- score gradients


def test_gradients_vanish_for_zero_weights():
    p = zero_params(3)
    x = np.array([0.2, -0.7, 1.1])
    gx, gw, gb = score_gradients(x, p)
    assert np.allclose(gx, 0.0, atol=1e-14)


def test_gradients_at_zero_optimum():
    # x = -b / (2 lam) with W = 0 sends mu(x) to 0
    b = np.array([0.6, -0.8])
    lam = 1.5
    p = HarmonyParams(W=np.zeros((2, 2)), b=b, lam=lam)
    x = -b / (2 * lam)
    assert np.allclose(mu(x, p), 0.0, atol=1e-14)
    _, gw, gb = score_gradients(x, p)
    assert np.allclose(gw, 0.0, atol=1e-14)
    assert np.allclose(gb, 0.0, atol=1e-14)


@pytest.mark.parametrize("lam", [2.0, None])
def test_gradients_match_finite_differences(lam):
    rng = np.random.default_rng(29)
    d = 6
    if lam is None:
        w = symmetrize(rng.standard_normal((d, d)))
        p = HarmonyParams(W=w, b=rng.standard_normal(d), lam=None)
    else:
        p = random_params(rng, d, lam=lam)
    x = rng.standard_normal(d)
    gx, gw, gb = score_gradients(x, p)
    eps = 1e-5

    def f(px, pp):
        return score(px, pp)

    for i in range(d):
        bump = np.zeros(d)
        bump[i] = eps
        num = (f(x + bump, p) - f(x - bump, p)) / (2 * eps)
        assert abs(num - gx[i]) <= 1e-5 * (1 + abs(num))
    for i in range(d):
        for j in range(d):
            dw = np.zeros((d, d))
            dw[i, j] = eps
            pp = HarmonyParams(W=p.W + dw, b=p.b, lam=lam)
            pm = HarmonyParams(W=p.W - dw, b=p.b, lam=lam)
            num = (f(x, pp) - f(x, pm)) / (2 * eps)
            assert abs(num - gw[i, j]) <= 1e-5 * (1 + abs(num))
    for i in range(d):
        bump = np.zeros(d)
        bump[i] = eps
        pp = HarmonyParams(W=p.W, b=p.b + bump, lam=lam)
        pm = HarmonyParams(W=p.W, b=p.b - bump, lam=lam)
        num = (f(x, pp) - f(x, pm)) / (2 * eps)
        assert abs(num - gb[i]) <= 1e-5 * (1 + abs(num))


# ---------------------------------------------------------------- limits


def test_faithfulness_distance_non_increasing_in_lam():
    rng = np.random.default_rng(30)
    for _ in range(5):
        d = 6
        w = symmetrize(rng.standard_normal((d, d)))
        w /= np.linalg.norm(w)  # ||W||_F = 1
        x = rng.standard_normal(d)
        prev = np.inf
        for lam in np.geomspace(1.1, 1e6, 30):
            p = HarmonyParams(W=w, b=np.zeros(d), lam=float(lam))
            dist = float(np.linalg.norm(mu(x, p) - x))
            assert dist <= prev + 1e-12
            prev = dist


def test_large_lam_gradient_matches_infinite_mode():
    rng = np.random.default_rng(31)
    d = 6
    w = symmetrize(rng.standard_normal((d, d)))
    w /= np.linalg.norm(w)
    b = rng.standard_normal(d)
    x = rng.standard_normal(d)
    p = HarmonyParams(W=w, b=b, lam=1e6)
    gx, _, _ = score_gradients(x, p)
    infinite_grad = w @ x + 0.5 * b
    assert np.max(np.abs(gx - infinite_grad)) <= 1e-3 * (1 + np.linalg.norm(x))


# -------------------------------------------------------------- dynamics


def test_dynamics_pure_faithfulness_attractor():
    p = zero_params(3)
    x = np.array([0.5, -0.2, 1.0])
    h, steps = integrate_dynamics(x, p, np.zeros(3), step=0.5, tol=1e-12)
    assert np.allclose(h, x, atol=1e-9)
    assert steps > 0


def test_dynamics_fixed_point_takes_no_steps():
    rng = np.random.default_rng(32)
    p = random_params(rng, 4, lam=2.0)
    x = rng.standard_normal(4)
    h, steps = integrate_dynamics(x, p, mu(x, p), step=0.1, tol=1e-10)
    assert steps == 0


def test_dynamics_agrees_with_closed_form():
    rng = np.random.default_rng(33)
    p = random_params(rng, 4, lam=1.5)
    x = rng.standard_normal(4)
    h, _ = integrate_dynamics(x, p, np.zeros(4), step=0.1, tol=1e-12)
    assert np.max(np.abs(h - mu(x, p))) <= 1e-9


def test_dynamics_rejects_non_contractive_step():
    p = zero_params(2, lam=1.0)
    with pytest.raises(ValueError, match="step"):
        integrate_dynamics(np.zeros(2), p, np.zeros(2), step=2.5)
    with pytest.raises(ValueError, match="step"):
        integrate_dynamics(np.zeros(2), p, np.zeros(2), step=0.0)


def test_dynamics_step_budget_error_carries_state():
    rng = np.random.default_rng(34)
    p = random_params(rng, 3, lam=2.0)
    x = rng.standard_normal(3)
    with pytest.raises(DynamicsError) as exc:
        integrate_dynamics(x, p, np.zeros(3), step=0.01, tol=0.0, max_steps=10)
    assert exc.value.state.shape == (3,)
    assert exc.value.steps == 10


# -------------------------------------------------------- log partition


def test_log_partition_standard_gaussian():
    p = HarmonyParams(W=np.zeros((1, 1)), b=np.zeros(1), lam=1.0)
    assert abs(log_partition(np.zeros(1), p) - 0.5 * np.log(2 * np.pi)) < 1e-12


def test_log_partition_closed_form_2d():
    # -V = 2I in two dimensions integrates to (2 pi / 2) = pi
    p = HarmonyParams(W=np.zeros((2, 2)), b=np.zeros(2), lam=2.0)
    assert abs(log_partition(np.zeros(2), p) - np.log(np.pi)) < 1e-12


def test_log_partition_offset_constant_in_x():
    rng = np.random.default_rng(35)
    p = random_params(rng, 3, lam=2.0)
    x1, x2 = rng.standard_normal(3), rng.standard_normal(3)
    off1 = log_partition(x1, p) - score(x1, p)
    off2 = log_partition(x2, p) - score(x2, p)
    assert abs(off1 - off2) < 1e-12


def test_gaussian_normalisation_by_quadrature():
    p = HarmonyParams(W=np.array([[0.3]]), b=np.array([0.7]), lam=1.2)
    x = np.array([0.4])
    hs = np.linspace(-30.0, 30.0, 120_001)
    log_z = log_partition(x, p)
    vals = np.exp(
        0.5 * (p.W[0, 0] * hs**2 + p.b[0] * hs - p.lam * (hs - x[0]) ** 2) - log_z
    )
    integral = trapezoid(vals, hs)
    assert abs(integral - 1.0) <= 1e-3


# ------------------------------------------------------------ constraint


def test_constrain_leaves_feasible_weights_alone():
    w = np.eye(2) * (0.5 / np.sqrt(2))  # ||W||_F = 0.5
    p = HarmonyParams(W=w, b=np.zeros(2), lam=1.0, eps=0.01)
    out = constrain_params(p)
    assert np.array_equal(out.W, w)


def test_constrain_rescales_to_the_bound():
    p = HarmonyParams(W=np.diag([3.0, 3.0]), b=np.zeros(2), lam=1.0, eps=0.01)
    out = constrain_params(p)
    assert abs(np.linalg.norm(out.W) - 0.99) < 1e-12


def test_constrain_symmetrizes_and_bounds_spectrum():
    rng = np.random.default_rng(36)
    a = rng.standard_normal((5, 5)) * 3.0  # asymmetric, out of bound
    p = HarmonyParams(W=a, b=np.zeros(5), lam=1.0)
    out = constrain_params(p)
    assert np.array_equal(out.W, out.W.T)
    assert max_eigenvalue(out.W, tol=1e-12) < p.lam
    assert out.bound_satisfied()


def test_constrain_infinite_mode_only_symmetrizes():
    rng = np.random.default_rng(37)
    a = rng.standard_normal((4, 4)) * 10.0
    p = HarmonyParams(W=a, b=np.zeros(4), lam=None)
    out = constrain_params(p)
    assert np.array_equal(out.W, out.W.T)
    assert np.linalg.norm(out.W) > 1.0  # no rescaling happens


def test_params_validation():
    with pytest.raises(ValueError, match="positive"):
        HarmonyParams(W=np.zeros((2, 2)), b=np.zeros(2), lam=-1.0)
    with pytest.raises(ValueError, match="infinite"):
        HarmonyParams(W=np.zeros((2, 2)), b=np.zeros(2), lam=float("inf"))
    with pytest.raises(ValueError, match="incompatible"):
        HarmonyParams(W=np.zeros((3, 3)), b=np.zeros(2), lam=1.0)
    p = HarmonyParams(W=np.zeros((2, 2)), b=np.zeros(2), lam=2.0)
    assert p.eps == pytest.approx(0.02)


def test_dim_mismatch_errors():
    p = zero_params(3)
    with pytest.raises(ValueError, match="dim"):
        harmony(np.zeros(2), np.zeros(3), p)
    with pytest.raises(ValueError, match="dim"):
        mu(np.zeros(4), p)
    with pytest.raises(ValueError, match="dim"):
        score(np.zeros(2), p)
