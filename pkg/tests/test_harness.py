import math

import numpy as np
import pytest

from vpbsim import harness
from vpbsim.collision import bgk_operator
from vpbsim.errors import NumericalAbort, ValidationError
from vpbsim.harness import (
    DEFAULT_MODES,
    SweepConfig,
    evaluate_modes,
    fit_loglog,
    run_sweep,
    selftest,
)
from vpbsim.spatial import TorusGrid
from vpbsim.velocity_space import HermiteBasis

SMALL = dict(K=4, n_points=16, t_end=0.1, n_records=2)


def test_evaluate_modes():
    g = TorusGrid(16)
    f = evaluate_modes(g, {1: (1.0, 0.0), 3: (0.0, 2.0)}, 0.5)
    assert np.allclose(f, 0.5 * np.cos(g.x) + np.sin(3 * g.x), atol=1e-15)


def test_default_config():
    cfg = SweepConfig()
    assert cfg.eps_ladder == (0.4, 0.2, 0.1, 0.05)
    assert cfg.amplitude == 0.05 and cfg.t_end == 0.5 and cfg.K == 6 and cfg.n_points == 64
    assert cfg.modes == DEFAULT_MODES


@pytest.mark.parametrize(
    "kw",
    [
        dict(eps_ladder=(0.1, 0.2)),
        dict(eps_ladder=(0.2, 0.2)),
        dict(eps_ladder=()),
        dict(eps_ladder=(2.0, 0.5)),
        dict(modes={"pressure": {1: (1, 0)}}),
        dict(amplitude=-1.0),
        dict(t_end=0.0),
        dict(n_records=1),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        SweepConfig(**kw)


def test_initial_fields_zero_mean_charge_and_seeded_noise():
    g = TorusGrid(32)
    cfg = SweepConfig(modes={"n0": {0: (1.0, 0.0), 1: (0.0, 1.0)}}, noise=0.5, seed=3)
    a = cfg.initial_fields(g)
    b = cfg.initial_fields(g)
    assert abs(np.mean(a[3])) < 1e-15
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = SweepConfig(modes=cfg.modes, noise=0.5, seed=4).initial_fields(g)
    assert not np.array_equal(a[0], c[0])


def test_fit_loglog():
    eps = [0.4, 0.2, 0.1]
    fit = fit_loglog(eps, [3 * e**1.5 for e in eps])
    assert fit["slope"] == pytest.approx(1.5) and fit["intercept"] == pytest.approx(math.log(3)) and fit["r2"] == pytest.approx(1)
    assert fit_loglog([0.1], [1.0])["slope"] is None
    assert fit_loglog(eps, [0, 0, 0])["slope"] is None


def test_single_rung_slope_undefined():
    res = run_sweep(SweepConfig(eps_ladder=(0.5,), **SMALL))
    assert not res.slope_defined and res.slope is None
    assert all(len(v) == 1 for v in res.errors.values())
    assert res.errors["n"][0] > 0


def test_zero_data_gives_zero_errors():
    res = run_sweep(SweepConfig(eps_ladder=(0.5, 0.25), modes={}, **SMALL))
    for k in ("rho", "u", "theta", "n"):
        assert res.errors[k] == [0.0, 0.0]
    assert not res.slope_defined


def test_small_sweep_fields_and_reduction():
    cfg = SweepConfig(eps_ladder=(0.5, 0.25), **SMALL)
    res = run_sweep(cfg)
    d = res.to_dict()
    for key in ("eps", "errors", "fits", "slope", "slope_defined", "boussinesq", "divu", "C_boussinesq", "C_divu",
                "dissipation_lambda", "energy_ratio", "coefficients"):
        assert key in d
    assert "runs" not in d
    assert d["coefficients"]["nu"] == pytest.approx(0.5)
    assert all(r.mass_drift < 1e-12 for r in res.runs)
    parallel = run_sweep(cfg, workers=2)
    assert parallel.to_dict() == d


def test_positivity_checked_at_start():
    with pytest.raises(ValidationError, match="amplitude"):
        run_sweep(SweepConfig(eps_ladder=(1.0,), amplitude=5.0, **SMALL))


def test_abort_carries_eps(monkeypatch):
    def boom(self, initial, progress=None):
        raise NumericalAbort("positivity lost")

    monkeypatch.setattr(harness.KineticSolver, "run", boom)
    with pytest.raises(NumericalAbort, match="eps=0.25"):
        run_sweep(SweepConfig(eps_ladder=(0.25,), **SMALL))


def test_selftest_all_pass():
    items = selftest()
    assert len(items) >= 10
    assert all(i.passed for i in items), [i for i in items if not i.passed]
    ratio = next(i for i in items if "Cauchy" in i.name)
    assert 0 < ratio.value < 0.6


def test_selftest_corrupt_cache_only_cache_fails():
    items = selftest(corrupt_cache=True)
    failed = [i.name for i in items if not i.passed]
    assert failed == ["cache round trip"]


def test_manufactured_solution_satisfies_forced_system(grid16):
    b = HermiteBasis(4)
    shape, a, da = harness.manufactured_solution(b, grid16)
    assert a(0) == pytest.approx(0.1) and da(0) == pytest.approx(0.0)
    err = harness.manufactured_error(b, grid16, bgk_operator(b), 0.005, t_end=0.2)
    assert err < 1e-6
