"""Smoke test for the feo2 extension module.

Build and install first, e.g. `maturin build --release -m crates/python/Cargo.toml`
followed by `pip install target/wheels/feo2-*.whl`, then run this file.
"""

import math

import feo2


def check_analytic():
    p = feo2.AnalyticParams(100, 95, beta2=2.0, tau2=0.5, gamma2=0.01, samples_per_client=4)
    assert math.isclose(p.sigma_c2, 1.0)
    r = p.optimal_ratio()
    assert math.isclose(r, 1 / 1.95, rel_tol=1e-12)
    assert p.server_variance_opt() <= min(p.server_variance_fedavg(), p.server_variance_dpfedavg())
    assert math.isclose(p.gap_fedavg(), p.server_variance_fedavg() - p.server_variance_opt(), abs_tol=1e-12)
    assert math.isclose(p.lambda_star_general(True, r), p.lambda_star_p(), rel_tol=1e-9)
    mc = p.monte_carlo_server_variance(r, trials=50_000, seed=1)
    assert abs(mc - p.server_variance_opt()) / p.server_variance_opt() < 0.05
    curve = p.lambda_sweep(False, r, [0.0, 0.5, 1.0], trials=20_000)
    assert [lam for lam, _ in curve] == [0.0, 0.5, 1.0]
    try:
        feo2.AnalyticParams(10, 11, 1.0, 1.0, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("n_private > n_clients accepted")


def check_primitives():
    v, inside = feo2.clip([3.0, 4.0], 2.5)
    assert not inside and math.isclose(math.hypot(*v), 2.5, rel_tol=1e-12)
    assert feo2.feo2_combine([1.0], [3.0], 1, 1, 1.0) == [2.0]
    assert feo2.feo2_combine([1.0], None, 4, 0, 0.5) == [1.0]
    assert feo2.ditto_closed_form([2.0], [0.0], 1.0) == [1.0]
    assert math.isclose(feo2.subsampled_gaussian_rdp(1.0, 2.0, 8.0), 8.0 / 8.0)


def check_privacy():
    ledger = feo2.PrivacyLedger()
    ledger.account(0.05, 1.1, rounds=100)
    eps, order = ledger.epsilon(1e-5)
    assert ledger.rounds == 100 and eps > 0 and order > 1
    assert math.isclose(eps, feo2.epsilon_for(0.05, 1.1, 100, 1e-5))
    z = feo2.solve_noise_multiplier(3.6, 1e-4, 0.05, 100)
    assert abs(feo2.epsilon_for(0.05, z, 100, 1e-4) - 3.6) < 1e-3


def check_experiment():
    text = """
seed = 2
rounds = 3
cohort_fraction = 0.5

[population]
kind = "label_shard"
n_clients = 20
samples_per_client = 10
rho_np = 0.1
skew_digit = 7

[population.pool]
type = "synthetic"
per_class = 40
n_features = 8

[algorithm]
name = "feo2"
r = 0.2

[ditto]
lambda_p = 0.1
"""
    exp = feo2.Experiment.from_str(text)
    assert exp.rounds == 3
    again = feo2.Experiment.from_str(exp.to_toml())
    assert again.to_json() == exp.to_json()
    reports = exp.run(workers=2)
    assert [r["round"] for r in reports] == [1, 2, 3]
    assert reports == exp.run(workers=1)
    last = reports[-1]
    assert 0.0 <= last["acc_g"] <= 1.0
    if last["delta_g"] is not None:
        assert math.isclose(last["delta_g"], last["acc_g_np"] - last["acc_g_p"], abs_tol=1e-12)
    assert last["epsilon"] > 0
    try:
        feo2.Experiment.from_str(text.replace("r = 0.2", "r = 1.5"))
    except ValueError as e:
        assert "r must be in [0,1]" in str(e)
    else:
        raise AssertionError("r = 1.5 accepted")


if __name__ == "__main__":
    for check in (check_analytic, check_primitives, check_privacy, check_experiment):
        check()
        print(f"{check.__name__}: ok")
    print("python smoke test passed")
