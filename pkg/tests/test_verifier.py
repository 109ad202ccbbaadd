import numpy as np
import pytest

from simbl import lyapunov as L
from simbl import tensor as T
from simbl import verifier as V
from simbl.errors import ContractViolation, LevelSetTooThin
from simbl.pendulum import PendulumParams, denormalize, normalize, step


def norm_squared_lyap(l_s=1.0):
    """A LyapunovParams that evaluates to exactly ||x||^2."""
    cfg = L.LyapunovConfig(hidden=(4,), n_v=2, eps=1.0, angle_cap=1e9,
                           alpha_init=1.0)
    lyap = L.make_lyapunov(cfg, seed=0)
    for head in (lyap.v_out_a, lyap.v_out_b, lyap.b_out_a, lyap.b_out_b):
        head.data[...] = 0.0
    lyap.l_s.data = np.array(float(l_s))
    return lyap


class ScaleSystem:
    """x+ = c * x regardless of the input; a stand-in forward model."""

    tag = "model"

    def __init__(self, c):
        self.c = c

    def propagate(self, x, u, w):
        return self.c * x


def zero_policy(x):
    return T.Tensor(np.zeros((T.as_tensor(x).data.shape[0], 1)))


# ----------------------------------------------------------------------
# analytic oracles


def test_contraction_certifies_full_set_first_try():
    cert = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                    n_samples=500, seed=1)
    assert cert.safe
    assert cert.l_u == 1.0
    assert cert.l_l == 0.0
    assert cert.target == "model"


def test_expansion_never_certifies():
    cert = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(2.0),
                    n_samples=100, delta=0.25, seed=1)
    assert not cert.safe
    assert cert.l_u == 0.0
    assert cert.l_l == 0.0


def test_identity_map_gives_invariance_not_contraction():
    # x+ = x keeps V exactly flat, which still passes the <= 0 check
    cert = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(1.0),
                    n_samples=200, seed=2)
    assert cert.safe and cert.l_u == 1.0


# ----------------------------------------------------------------------
# schedule and probability arithmetic


def test_level_schedule_005():
    got = V.level_schedule(0.05)
    want = [round(1.0 - 0.05 * k, 12) for k in range(20)] + [0.0]
    assert got == want
    assert got[0] == 1.0 and got[-1] == 0.0 and len(got) == 21


def test_level_schedule_non_divisor_ends_at_zero():
    assert V.level_schedule(0.3) == [1.0, 0.7, 0.4, 0.1, 0.0]


def test_epsilon_single_sample():
    assert V.epsilon_from_samples(1, 0.5) == pytest.approx(0.5, rel=1e-15)


def test_epsilon_paper_scale():
    assert V.epsilon_from_samples(5000, 0.99) == pytest.approx(9.21e-4, rel=1e-2)


def test_epsilon_monotone_in_n():
    vals = [V.epsilon_from_samples(n, 0.99) for n in (10, 100, 1000)]
    assert vals[0] > vals[1] > vals[2] > 0.0


def test_epsilon_rejects_bad_inputs():
    with pytest.raises(ContractViolation):
        V.epsilon_from_samples(0, 0.5)
    with pytest.raises(ContractViolation):
        V.epsilon_from_samples(10, 1.0)


def test_safety_probability_products():
    assert V.safety_probability(0.0, 0.0, 1.0) == (1.0, 1.0)
    cond, _ = V.safety_probability(0.05, 0.01, 1.0)
    assert cond == pytest.approx(0.9405, abs=1e-12)
    assert V.safety_probability(0.1, 0.1, 0.0)[1] == 0.0
    with pytest.raises(ContractViolation):
        V.safety_probability(-0.1, 0.5, 0.5)


# ----------------------------------------------------------------------
# sampling behavior


def test_band_samples_respect_levels():
    lyap = norm_squared_lyap()
    rng = np.random.default_rng(0)
    x = V._sample_band(lyap, 0.25, 0.81, 300, rng, V.MAX_PROPOSALS)
    r2 = np.sum(x ** 2, axis=1)
    assert x.shape == (300, 2)
    assert np.all(r2 >= 0.25) and np.all(r2 <= 0.81)


def test_thin_band_raises():
    lyap = norm_squared_lyap(l_s=1e-9)
    with pytest.raises(LevelSetTooThin):
        V.verify(lyap, zero_policy, ScaleSystem(0.5), n_samples=100,
                 seed=0, max_proposals=50_000)


def test_deterministic_given_seed():
    a = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                 n_samples=200, seed=7)
    b = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                 n_samples=200, seed=7)
    assert a == b


def test_certificate_survives_fresh_seed():
    # re-checking a SAFE certificate with new samples must agree
    a = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                 n_samples=200, seed=7)
    b = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                 n_samples=200, seed=8)
    assert a.safe and b.safe and (a.l_u, a.l_l) == (b.l_u, b.l_l)


def test_strict_mode_draws_independent_w():
    cert = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                    n_samples=100, seed=3, shared_w=False)
    assert cert.safe and cert.shared_w is False


# ----------------------------------------------------------------------
# noisy model target


class NoisyShrink:
    """delta = -0.5/dt * x so x+ = 0.5x + dt*w*std, with constant std."""

    dt = 0.01

    def __init__(self, std):
        self.std_value = std

    def predict_delta(self, x, u):
        x = T.as_tensor(x)
        mean = x * (-0.5 / self.dt)
        return mean, T.Tensor(np.full(x.data.shape, self.std_value))


def test_model_target_small_noise_still_safe():
    sys = V.ModelTarget(NoisyShrink(std=1e-3))
    cert = V.verify(norm_squared_lyap(), zero_policy, sys,
                    n_samples=300, seed=4)
    assert cert.safe and cert.target == "model"


def test_model_target_noise_enters_update():
    sys = V.ModelTarget(NoisyShrink(std=2.0))
    x = np.array([[0.4, 0.0]])
    u = np.zeros((1, 1))
    w = np.array([[1.0, 1.0]])
    got = sys.propagate(x, u, w)
    want = 0.5 * x + 0.01 * 2.0 * w
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_environment_target_matches_plain_step():
    params = PendulumParams()
    sys = V.EnvironmentTarget(params)
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.3, 0.3, size=(50, 2))
    u = rng.uniform(-1.0, 1.0, size=(50, 1))
    got = sys.propagate(x, u, None)
    want = normalize(step(denormalize(x), u[:, 0], params))
    np.testing.assert_allclose(got, want, rtol=0, atol=0)


# ----------------------------------------------------------------------
# certificate record


def test_certificate_rejects_bad_levels():
    with pytest.raises(ContractViolation):
        V.Certificate(safe=True, l_u=0.5, l_l=0.6, n_samples=10, delta=0.05,
                      epsilon_p=0.1, confidence=0.99, target="model",
                      shared_w=True, sigma_bar=2.0, seed=0)


def test_certificate_text_round_trip(tmp_path):
    cert = V.verify(norm_squared_lyap(), zero_policy, ScaleSystem(0.5),
                    n_samples=50, seed=9)
    path = tmp_path / "certificate.txt"
    V.save_certificate(path, cert)
    assert V.load_certificate(path) == cert
    text = V.certificate_text(cert)
    assert "safe = true" in text and "target = model" in text
