"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL (...)`` line straight to
the terminal (even under output capture) and then asserts. Trained models
are shared through module-scoped fixtures that drive the CLI runners, so
the whole file trains each model once. Expect about an hour on one
CPU core.
"""

import json

import numpy as np
import pytest

from starflow import ad, cli, targets, vi
from starflow import flow as fl
from starflow.jacdet import fast_log_det, oracle_log_det, relative_error
from starflow.manifolds import DeformedSphere, LpBall, Simplex, Sphere
from starflow.spherical import sample_uniform_angles

pytestmark = pytest.mark.slow


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n}: {detail}"


def run_experiment(tmp_path_factory, experiment, overrides, seed=0):
    base = tmp_path_factory.mktemp(experiment)
    cfg_path = base / "config.json"
    cfg_path.write_text(json.dumps(overrides))
    out = base / "out"
    metrics = cli.run(experiment, cfg_path, out, seed)
    return metrics, out


# training budgets; everything else is the experiment default
VMF_STEPS = 3000
UNIFORM_STEPS = 1000
# the identity initialization is already exact for the uniform target; the
# default Adam step size keeps the parameters jittering at the 1e-3 MSE level
UNIFORM_LEARNING_RATE = 1e-4
MIXTURE_STEPS = 5000
HUTCHINSON_STEPS = 1000


@pytest.fixture(scope="module")
def vmf_run(tmp_path_factory):
    return run_experiment(tmp_path_factory, "train-3d", {"target": "vmf", "kappa": 5.0, "mu": [0.3, -0.5, 0.8],
                                                        "steps": VMF_STEPS})


@pytest.fixture(scope="module")
def uniform_run(tmp_path_factory):
    return run_experiment(tmp_path_factory, "train-3d", {"target": "uniform", "steps": UNIFORM_STEPS,
                                                        "learning_rate": UNIFORM_LEARNING_RATE})


@pytest.fixture(scope="module")
def mixture_run(tmp_path_factory):
    return run_experiment(tmp_path_factory, "train-3d", {"target": "mixture", "steps": MIXTURE_STEPS})


@pytest.fixture(scope="module")
def mixing_run(tmp_path_factory):
    return run_experiment(tmp_path_factory, "mixing-mcmc-compare", {})


@pytest.fixture(scope="module")
def hutchinson_run(tmp_path_factory):
    return run_experiment(tmp_path_factory, "hutchinson-compare", {"steps": HUTCHINSON_STEPS})


FIELDS = {
    "sphere": Sphere(),
    "lp0.5": LpBall(0.5),
    "lp1": LpBall(1.0),
    "lp2": LpBall(2.0),
    "simplex": Simplex(),
    "deformed": DeformedSphere(),
}


def test_criterion_1_oracle_equivalence(capsys):
    rng = np.random.default_rng(2024)
    worst, where = 0.0, None
    for name, field in FIELDS.items():
        for d in range(2, 51):
            th = sample_uniform_angles(d, 100, rng, field.positive_orthant)
            err = float(np.max(relative_error(fast_log_det(th, field).log_abs, oracle_log_det(th, field))))
            if err > worst:
                worst, where = err, (name, d)
    report(capsys, 1, worst < 1e-8, f"max relative error {worst:.2e} at {where}, bound 1e-8")


def test_criterion_2_complexity_slopes(capsys, tmp_path_factory):
    summary, _ = run_experiment(tmp_path_factory, "jacdet-bench", {})
    oracle = summary["fits"]["oracle"]["slope"]
    fast = summary["fits"]["fast"]["slope"]
    speedup = summary["speedup_d256"]
    ok = oracle >= 2.5 and fast <= 2.2 and speedup >= 5.0
    report(capsys, 2, ok, f"oracle slope {oracle:.2f} (>= 2.5), fast slope {fast:.2f} (<= 2.2), "
                          f"speedup at d=256 {speedup:.1f}x (>= 5)")


def test_criterion_3_density_reconstruction(capsys, vmf_run, uniform_run):
    mse_vmf = vmf_run[0]["mse_log_density"]
    mse_uni = uniform_run[0]["mse_log_density"]
    ok = mse_vmf <= 0.05 and mse_uni <= 1e-3
    report(capsys, 3, ok, f"vMF mse {mse_vmf:.4f} (<= 0.05), uniform mse {mse_uni:.2e} (<= 1e-3)")


def test_criterion_4_mixture_modes(capsys, mixture_run):
    frac = mixture_run[0]["mode_recovery"]
    report(capsys, 4, frac >= 0.8, f"{frac:.0%} of 50 modes recovered within 0.15 rad (>= 80%)")


def test_criterion_5_manifold_constraint(capsys, vmf_run, uniform_run, mixture_run, mixing_run, hutchinson_run):
    residuals = {
        "vmf": vmf_run[0]["max_constraint_residual"],
        "uniform": uniform_run[0]["max_constraint_residual"],
        "mixture": mixture_run[0]["max_constraint_residual"],
        "simplex": mixing_run[0]["max_constraint_residual"],
    }
    for name, run in hutchinson_run[0]["runs"].items():
        residuals[f"lp0.5 {name}"] = run["max_constraint_residual"]
    worst = max(residuals, key=residuals.get)
    ok = all(r <= 1e-8 for r in residuals.values())
    report(capsys, 5, ok, f"{len(residuals)} models x 1e5 samples, worst residual {residuals[worst]:.1e} "
                          f"({worst}), bound 1e-8")


def test_criterion_6_conjugate_check(capsys, mixing_run):
    m = mixing_run[0]
    ok = m["flow_ci_mae"] < 0.02 and m["mcmc_ci_mae"] >= m["flow_ci_mae"]
    report(capsys, 6, ok, f"flow CI MAE {m['flow_ci_mae']:.4f} (< 0.02), MH CI MAE {m['mcmc_ci_mae']:.4f} "
                          f"after {m['mcmc_steps']} steps x 100 chains (must be >= flow)")


def _loss_gradient_error():
    model = fl.build_flow(3, Sphere(), n_layers=1, blocks_per_layer=3, n_bins=4, hidden=4, seed=0)
    rng = np.random.default_rng(100)
    model.params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in model.params.items()}
    target = targets.make_vmf((0.3, -0.5, 0.8), 5.0)
    keys = list(model.params)
    shapes = [model.params[k].shape for k in keys]
    flat = np.concatenate([model.params[k].ravel() for k in keys])

    def loss(vec):
        params, i = {}, 0
        for k, s in zip(keys, shapes):
            n = int(np.prod(s))
            params[k] = vec[i: i + n].reshape(s)
            i += n
        m = fl.FlowModel(3, model.field, 1, 3, 4, 4, params)
        return float(ad.value(vi.reverse_kl_loss(m, target, 16, np.random.default_rng(7))[0]))

    _, grads = vi.loss_and_grads(model, target, 16, np.random.default_rng(7))
    g = np.concatenate([grads[k].ravel() for k in keys])
    h = 1e-6
    fd = np.array([(loss(flat + h * e) - loss(flat - h * e)) / (2 * h) for e in np.eye(flat.size)])
    return float(np.max(np.abs(g - fd)) / np.max(np.abs(fd)))


def _component_gradient_errors():
    rng = np.random.default_rng(11)
    errs = {}
    # spline layer, both boundary modes
    for circular in (False, True):
        u = rng.uniform(0.2, 2.8, 3)
        raw = 0.5 * rng.standard_normal(3 * 25)
        hi = 2 * np.pi if circular else np.pi

        def spline(r, u=u, circular=circular, hi=hi):
            v, ld = fl.spline_forward(u, ad.reshape(r, (3, 25)) if ad.is_var(r) else r.reshape(3, 25), 0.0, hi,
                                      circular, 8)
            return ad.sum_(v * v + ld)

        errs[f"spline circular={circular}"] = ad.grad_check(spline, raw, h=1e-6)
    # coupling block through its conditioner
    model = fl.build_flow(4, Sphere(), n_layers=1, n_bins=4, hidden=8, seed=1)
    model.params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in model.params.items()}
    z = sample_uniform_angles(4, 6, rng)
    errs["coupling block"] = ad.grad_check(
        lambda t: ad.sum_(ad.sum_(fl._block(model, model.params, 1, ad.reshape(t, z.shape)
                                            if ad.is_var(t) else t.reshape(z.shape))[0], axis=-1)),
        z.ravel(), h=1e-6)
    # volume term on every manifold kind
    for name, field in FIELDS.items():
        th = sample_uniform_angles(5, 4, rng, field.positive_orthant).ravel()
        errs[f"log det {name}"] = ad.grad_check(
            lambda t, f=field: ad.sum_(fast_log_det(ad.reshape(t, (4, 4)) if ad.is_var(t) else t.reshape(4, 4),
                                                    f).log_abs), th, h=1e-6)
    # targets
    x3 = rng.standard_normal((5, 3))
    x3 /= np.linalg.norm(x3, axis=1, keepdims=True)
    pi = rng.dirichlet(np.ones(6), 5)
    X = rng.standard_normal((8, 4))
    y = rng.standard_normal(8)
    R = 0.01 * rng.standard_normal((20, 6))
    rho = R @ np.full(6, 1 / 6)
    cases = {
        "target vmf": (targets.make_vmf((0.3, -0.5, 0.8), 5.0), x3),
        "target mixture": (targets.make_spiral_mixture(), x3),
        "target sinusoidal": (targets.make_sinusoidal(), x3),
        "target dirichlet-multinomial": (targets.make_dirichlet_multinomial([5, 3, 1, 0, 0, 2], 1.0), pi),
        "target regression": (targets.make_regression(X, y, 2.0), rng.standard_normal((5, 4))),
        "target portfolio": (targets.make_portfolio(R, rho, 1.0, "dirichlet", 0.5), pi),
    }
    for name, (t, pts) in cases.items():
        shape = pts.shape
        errs[name] = ad.grad_check(lambda v, t=t, shape=shape: ad.sum_(t(ad.reshape(v, shape) if ad.is_var(v)
                                                                         else v.reshape(shape))),
                                   pts.ravel(), h=1e-6)
    return errs


def test_criterion_7_gradient_integrity(capsys):
    loss_err = _loss_gradient_error()
    errs = _component_gradient_errors()
    worst = max(errs, key=errs.get)
    ok = loss_err < 1e-3 and errs[worst] < 1e-5
    report(capsys, 7, ok, f"loss gradient rel. error {loss_err:.1e} (< 1e-3), worst of {len(errs)} "
                          f"layer/target checks {errs[worst]:.1e} ({worst}, < 1e-5)")


def test_criterion_8_hutchinson_baseline(capsys, hutchinson_run):
    m = hutchinson_run[0]
    exact = m["runs"]["exact"]["mse_log_density"]
    hutch = m["runs"]["hutchinson_n1"]["mse_log_density"]
    var = m["estimator_variance"]
    monotone = var["1"] > var["5"] > var["7"]
    ok = hutch >= 2 * exact and monotone
    report(capsys, 8, ok, f"after {HUTCHINSON_STEPS} steps log-density mse: exact {exact:.3f}, n=1 {hutch:.3f} "
                          f"(ratio {hutch / exact:.1f}, >= 2); estimator variance n=1/5/7 "
                          f"{var['1']:.3g}/{var['5']:.3g}/{var['7']:.3g} (decreasing)")


def test_criterion_9_normalization(capsys, vmf_run, uniform_run, mixture_run):
    masses = {name: run[0]["quadrature_mass"] for name, run in
              (("vmf", vmf_run), ("uniform", uniform_run), ("mixture", mixture_run))}
    ok = all(abs(v - 1.0) < 1e-2 for v in masses.values())
    detail = ", ".join(f"{k} {v:.5f}" for k, v in masses.items())
    report(capsys, 9, ok, f"100x100 quadrature masses {detail} (|mass - 1| < 1e-2)")


TINY = {"n_layers": 1, "hidden": 4, "n_bins": 4, "steps": 5, "batch_size": 16}


def _portfolio_csv(path):
    rng = np.random.default_rng(5)
    R = 0.01 * rng.standard_normal((40, 5))
    rho = R @ np.array([0.4, 0.3, 0.3, 0.0, 0.0])
    rows = ["a,b,c,d,e,index"] + [",".join(repr(float(v)) for v in list(r) + [y]) for r, y in zip(R, rho)]
    path.write_text("\n".join(rows) + "\n")
    return str(path)


def test_criterion_10_determinism(capsys, tmp_path_factory):
    base = tmp_path_factory.mktemp("determinism")
    configs = {
        "jacdet-verify": {"dims": [3, 9]},
        "train-3d": dict(TINY, target="mixture", mse_samples=200, constraint_samples=500, grid_resolution=10),
        "objective-bayes": dict(TINY, n_samples=300),
        "mixing-mcmc-compare": dict(TINY, n_samples=300, chains=4, mcmc_samples_per_chain=40),
        "portfolio": dict(TINY, csv=_portfolio_csv(base / "returns.csv"), n_samples=300),
        "hutchinson-compare": dict(TINY, mse_samples=200, constraint_samples=200, variance_points=3,
                                   variance_draws=5),
        "jacdet-bench": {"dims": [8, 16], "reps": 2},
    }
    differing = []
    n_files = 0
    outputs = {}
    for experiment, cfg in configs.items():
        runs = [run_experiment(tmp_path_factory, experiment, cfg, seed=3)[1] for _ in range(2)]
        outputs[experiment] = runs[0]
        a, b = (cli.stable_artifacts(r) for r in runs)
        n_files += len(a)
        if a != b:
            differing.append(experiment)
    # the tiny train-3d checkpoint drives density-grid
    grid_cfg = {"checkpoint": str(outputs["train-3d"] / "model.npz"), "resolution": 12}
    grids = [run_experiment(tmp_path_factory, "density-grid", grid_cfg, seed=3)[1] for _ in range(2)]
    a, b = (cli.stable_artifacts(r) for r in grids)
    n_files += len(a)
    if a != b:
        differing.append("density-grid")
    report(capsys, 10, not differing, f"{len(configs) + 1} experiments run twice, {n_files} artifacts compared; "
                                      f"differing: {differing or 'none'}")
