from fractions import Fraction

import numpy as np
import pytest

from rcdlab.geodesy import (
    GeodesyError,
    build_good_geodesic,
    cd_convexity_check,
    cd_residual,
    combine_restricted,
    curve_plan_from_trace,
    epsilon_min,
    intermediate_entropy_min,
    length_band_split,
    metric_brenier_probe,
    synthetic_entropy_profile,
)
from rcdlab.measures import ProbMeasure, bump_measure, dirac, gaussian_measure, relative_entropy
from rcdlab.mmspace import make_model_space
from rcdlab.ot import kantorovich_potentials, w2
from rcdlab.solvers import InfeasibleError


def test_endpoints_returned_exactly():
    s = make_model_space("segment", 7)
    mu0 = gaussian_measure(s, 4.0)
    mu1 = bump_measure(s, 5, 0.2)
    for t, ref in ((0.0, mu0), (1.0, mu1)):
        nu, cert = intermediate_entropy_min(mu0, mu1, t, 0.0)
        assert np.allclose(nu.weights, ref.weights)
        assert cert.gap == pytest.approx(0.0, abs=1e-12)


def test_dirac_midpoint_grid_search_oracle():
    # segment(3): diracs at the ends, t = 1/2, the only intermediate is the middle
    s = make_model_space("segment", 3)
    mu0, mu1 = dirac(s, 0), dirac(s, 2)
    nu, cert = intermediate_entropy_min(mu0, mu1, 0.5, 0.0, tol=1e-8)
    assert nu.weights[1] == pytest.approx(1.0, abs=1e-9)
    # brute grid over the 2-simplex at 1e-3 confirms the minimizer
    best = None
    W = w2(mu0, mu1)[0]
    d0 = s.metric[0] ** 2
    d2 = s.metric[2] ** 2
    grid = np.arange(0, 1.0001, 1e-2)
    for a in grid:
        for b in grid:
            if a + b > 1:
                continue
            wts = np.array([a, 1 - a - b, b])
            c0 = float(wts @ d0)
            c1 = float(wts @ d2)
            if c0 <= (0.5 * W) ** 2 + 1e-12 and c1 <= (0.5 * W) ** 2 + 1e-12:
                e = relative_entropy(wts, s.ref_measure)
                if best is None or e < best[0]:
                    best = (e, wts)
    assert best is not None
    assert cert.entropy <= best[0] + 2e-3


def test_infeasible_epsilon_raises_with_minimal_budget():
    s = make_model_space("segment", 4)  # even interval count: no exact dirac midpoint
    mu0, mu1 = dirac(s, 0), dirac(s, 3)
    with pytest.raises(InfeasibleError) as err:
        intermediate_entropy_min(mu0, mu1, 0.5, 0.0)
    need = epsilon_min(mu0, mu1, 0.5)
    assert err.value.min_budget == pytest.approx(need, abs=1e-6)
    assert need > 0


def test_epsilon_min_zero_on_lattice_compatible():
    s = make_model_space("segment", 9)
    assert epsilon_min(dirac(s, 0), dirac(s, 8), 0.5) == 0.0


def test_certificate_contract_randomized():
    rng = np.random.default_rng(8)
    s = make_model_space("segment", 11)
    for _ in range(4):
        mu0 = ProbMeasure(s, rng.dirichlet(np.ones(11) * 2))
        mu1 = ProbMeasure(s, rng.dirichlet(np.ones(11) * 2))
        eps = max(epsilon_min(mu0, mu1, 0.5), 0.0) + 2e-3
        nu, cert = intermediate_entropy_min(mu0, mu1, 0.5, eps, tol=1e-3)
        assert cert.dual_bound <= cert.entropy + 1e-12
        assert cert.gap <= 1e-3
        W = w2(mu0, mu1)[0]
        assert np.sqrt(cert.transport_costs[0]) <= 0.5 * W + eps + 1e-8
        assert np.sqrt(cert.transport_costs[1]) <= 0.5 * W + eps + 1e-8


def test_intermediate_set_convexity_midpoints():
    rng = np.random.default_rng(9)
    s = make_model_space("segment", 9)
    mu0 = ProbMeasure(s, rng.dirichlet(np.ones(9)))
    mu1 = ProbMeasure(s, rng.dirichlet(np.ones(9)))
    W = w2(mu0, mu1)[0]
    t, eps = 0.4, 0.05
    members = []
    for seed in range(6):
        r2 = np.random.default_rng(seed)
        lam = r2.uniform(0.0, 1.0)
        wts = (1 - lam) * ((1 - t) * mu0.weights + t * mu1.weights) + lam * mu0.weights
        cand = ProbMeasure(s, wts / wts.sum())
        if w2(mu0, cand)[0] <= t * W + eps and w2(cand, mu1)[0] <= (1 - t) * W + eps:
            members.append(cand)
    assert len(members) >= 2
    for a in members:
        for b in members:
            mid = ProbMeasure(s, 0.5 * (a.weights + b.weights))
            assert w2(mu0, mid)[0] <= t * W + eps + 1e-9
            assert w2(mid, mu1)[0] <= (1 - t) * W + eps + 1e-9


def test_exact_rational_composition_to_depth_six():
    # synthetic entropies meeting the convexity inequality with equality
    K = Fraction(-3, 2)
    W = Fraction(1)
    E0, E1 = Fraction(2), Fraction(1, 3)

    def ent(t):
        return synthetic_entropy_profile(t, E0, E1, K, W)

    times = [Fraction(k, 2**6) for k in range(2**6 + 1)]
    # every local (construction or grid) residual is exactly zero ...
    for i in range(1, len(times) - 1):
        s, t, r = times[i - 1], times[i], times[i + 1]
        w2sq = ((r - s) * W) ** 2
        res = cd_residual(s, t, r, ent(s), ent(t), ent(r), w2sq, K)
        assert res == 0
    # ... and so is every composed global residual
    for t in times[1:-1]:
        res = cd_residual(Fraction(0), t, Fraction(1), E0, ent(t), E1, W * W, K)
        assert res == 0


def test_constant_trace_and_depth_zero():
    s = make_model_space("segment", 9)
    mu = gaussian_measure(s, 4.0)
    tr = build_good_geodesic(mu, mu, 2, epsilon=0.0)
    assert max(tr.entropies) - min(tr.entropies) < 1e-12
    tr0 = build_good_geodesic(dirac(s, 0), dirac(s, 8), 0, epsilon=0.0)
    assert tr0.times == (0.0, 1.0)


def test_dirac_geodesic_exact_on_segment():
    s = make_model_space("segment", 9)
    mu0, mu1 = dirac(s, 0), dirac(s, 8)
    tr = build_good_geodesic(mu0, mu1, 3, epsilon=0.0)
    W = w2(mu0, mu1)[0]
    for t, wv, mu in zip(tr.times, tr.w2_from_start, tr.measures):
        assert abs(wv - t * W) <= 1e-8
        assert len(mu.support()) == 1
    rep = cd_convexity_check(tr, 0.0)
    assert rep["worst"] <= 1e-10
    assert max(tr.sup_density) <= 9.0 + 1e-9


def test_good_geodesic_gaussian_bump_segment():
    s = make_model_space("segment", 17)
    mu0 = gaussian_measure(s, 8.0)
    mu1 = bump_measure(s, 12, 0.15)
    tr = build_good_geodesic(mu0, mu1, 3, epsilon="auto", K=0.0, tol=2e-3)
    rep = cd_convexity_check(tr, 0.0)
    assert rep["worst"] <= 1e-3
    # density bound of the construction on [0, t0]
    t0 = tr.meta["t0"]
    bound = tr.meta["density_bound"]
    sup = max(d for t, d in zip(tr.times, tr.sup_density) if t <= t0)
    assert sup <= bound
    W = w2(mu0, mu1)[0]
    for t, wv in zip(tr.times, tr.w2_from_start):
        assert t * W - 2 * tr.epsilon_used - 1e-9 <= wv <= t * W + 2 * tr.epsilon_used + 1e-9


def test_band_split_single_band_and_dirac():
    s = make_model_space("segment", 9)
    mu0, mu1 = dirac(s, 0), dirac(s, 8)
    tr = build_good_geodesic(mu0, mu1, 2, epsilon=0.0)
    _, plan = w2(mu0, mu1)
    top = float(s.metric[plan.coupling > 0].max())
    out = length_band_split(plan, tr, [(0.0, top)])
    assert len(out) == 1
    assert out[0][2] == pytest.approx(1.0)
    # diracs: a fine partition leaves all mass in the band holding d(0, 8)
    out2 = length_band_split(plan, tr, [(0.0, 0.5), (0.5, 1.0)])
    masses = [o[2] for o in out2]
    assert masses == [pytest.approx(0.0, abs=1e-12), pytest.approx(1.0)]


def test_band_split_two_clusters_disjoint_midpoints():
    s = make_model_space("segment", 17)
    w0 = np.zeros(17)
    w0[0] = w0[8] = 0.5
    w1 = np.zeros(17)
    w1[2] = w1[16] = 0.5   # 0 -> 2 (short), 8 -> 16 (long)
    mu0, mu1 = ProbMeasure(s, w0), ProbMeasure(s, w1)
    tr = build_good_geodesic(mu0, mu1, 1, epsilon=0.0)
    _, plan = w2(mu0, mu1)
    top = float(s.metric[plan.coupling > 1e-12].max())
    bands = [(0.0, 0.25), (0.25, top)]
    out = length_band_split(plan, tr, bands, t=0.5)
    (b1, _, m1, marg1), (b2, _, m2, marg2) = out
    assert m1 == pytest.approx(0.5, abs=1e-9)
    assert m2 == pytest.approx(0.5, abs=1e-9)
    overlap = np.minimum(marg1, marg2).sum()
    assert overlap <= 1e-8


def test_band_split_requires_partition():
    s = make_model_space("segment", 9)
    mu0, mu1 = dirac(s, 0), dirac(s, 8)
    tr = build_good_geodesic(mu0, mu1, 1, epsilon=0.0)
    _, plan = w2(mu0, mu1)
    with pytest.raises(GeodesyError):
        length_band_split(plan, tr, [(0.0, 0.3), (0.5, 2.0)])


def test_combine_restricted_identity_surgeries():
    s = make_model_space("segment", 17)
    mu0 = gaussian_measure(s, 8.0)
    mu1 = bump_measure(s, 12, 0.15)
    tr = build_good_geodesic(mu0, mu1, 1, epsilon="auto", tol=2e-3)
    _, plan = w2(mu0, mu1)
    nu_mid = tr.measure_at(0.5)
    # f == 1 with the trace measure itself returns the trace measure
    out = combine_restricted(tr, plan, np.ones_like(plan.coupling), nu_mid, 0.5)
    assert np.abs(out.weights - nu_mid.weights).max() <= 1e-9


def test_combine_restricted_entropy_surgery_decreases():
    s = make_model_space("segment", 17)
    mu0 = gaussian_measure(s, 8.0)
    mu1 = bump_measure(s, 12, 0.15)
    tr = build_good_geodesic(mu0, mu1, 1, epsilon="auto", tol=2e-3)
    _, plan = w2(mu0, mu1)
    nu_mid = tr.measure_at(0.5)
    # replace the whole midpoint by a flatter member of the relaxed set
    eps_room = tr.epsilon_used
    from rcdlab.solvers import interior_point

    sel0, sel1 = mu0.weights > 0, mu1.weights > 0
    C = s.metric ** 2
    W = w2(mu0, mu1)[0]
    _, nu_flat = interior_point(C[sel0], C[sel1], mu0.weights[sel0], mu1.weights[sel1],
                                (0.5 * W + eps_room) ** 2, (0.5 * W + eps_room) ** 2)
    nu_flat = ProbMeasure(s, nu_flat / nu_flat.sum())
    f = np.ones_like(plan.coupling)
    out = combine_restricted(tr, plan, f, nu_flat, 0.5)
    assert np.abs(out.weights - nu_flat.weights).max() <= 1e-9


def test_combine_restricted_rejects_empty_selection():
    s = make_model_space("segment", 9)
    mu0, mu1 = dirac(s, 0), dirac(s, 8)
    tr = build_good_geodesic(mu0, mu1, 1, epsilon=0.0)
    _, plan = w2(mu0, mu1)
    with pytest.raises(GeodesyError):
        combine_restricted(tr, plan, np.zeros_like(plan.coupling), tr.measure_at(0.5), 0.5)


def test_metric_brenier_dirac_exact():
    # unique curve: the finite-t quotient is W (1 - t/2); the gap W t / 2
    # vanishes linearly as t -> 0
    s = make_model_space("segment", 9)
    mu0, sigma = dirac(s, 0), dirac(s, 8)
    tr = build_good_geodesic(mu0, sigma, 2, epsilon=0.0)
    pair = kantorovich_potentials(mu0, sigma, gauge=8)
    rep = metric_brenier_probe(tr, pair, t_values=[0.25, 0.5])
    W = w2(mu0, sigma)[0]
    assert rep["l2_gaps"][0] == pytest.approx(W * 0.25 / 2, abs=1e-10)
    assert rep["l2_gaps"][1] == pytest.approx(W * 0.5 / 2, abs=1e-10)
    assert rep["l2_gaps"][0] < rep["l2_gaps"][1]


def test_metric_brenier_refinement_trend():
    gaps = []
    for n in (17, 33):
        s = make_model_space("segment", n)
        mu0 = gaussian_measure(s, 8.0)
        sigma = bump_measure(s, int(0.75 * (n - 1)), 0.1)
        tr = build_good_geodesic(mu0, sigma, 2, epsilon="auto", tol=5e-3)
        pair = kantorovich_potentials(mu0, sigma, gauge=int(sigma.support()[0]))
        rep = metric_brenier_probe(tr, pair, t_values=[0.25])
        gaps.append(rep["l2_gaps"][0])
    assert gaps[1] < gaps[0]


def test_curve_plan_from_trace():
    s = make_model_space("segment", 9)
    mu0, mu1 = dirac(s, 0), dirac(s, 8)
    tr = build_good_geodesic(mu0, mu1, 2, epsilon=0.0)
    plan = curve_plan_from_trace(tr)
    assert plan.weights.sum() == pytest.approx(1.0)
    assert np.isfinite(plan.compressibility)
    # single dirac curve: action = sum of squared step lengths over dt
    W = w2(mu0, mu1)[0]
    assert plan.action == pytest.approx(W**2 / 1.0, rel=1e-6)
    assert plan.curves[0] == (0, 2, 4, 6, 8)
