import numpy as np
import pytest

from weakfuse.betafit import moment_match_beta
from weakfuse.errors import AllSingular, StructuralError
from weakfuse.gradients import (
    EstimandSpec,
    _batched_pinv,
    canonical_gradient_fixed_beta,
    compute_pass,
    efficient_gradient,
    fusion_matrix,
    gamma_derivative,
    gradient_aligned_only,
    gradient_known_beta,
    lambda_dagger,
    seed_gradient,
)
from weakfuse.model import BetaParam, Dataset, FusionDesign
from weakfuse.nuisance import fit_nuisance_bundle

from oracles import DiscreteLaw
from test_betafit import _tilted_instance


MOMENT3 = EstimandSpec("moment", index=3)


@pytest.fixture(scope="module")
def law():
    return DiscreteLaw()


@pytest.fixture(scope="module")
def law_pass(law):
    nuis = law.bundle()
    seed = seed_gradient(MOMENT3, nuis)
    return law, nuis, seed


# ---------------------------------------------------------------------------
# estimand specs and seeds


def test_estimand_spec_validation():
    with pytest.raises(StructuralError, match="kind"):
        EstimandSpec("quantile")
    with pytest.raises(StructuralError, match="coefficient"):
        EstimandSpec("working_linear", coefficient="curvature")
    with pytest.raises(StructuralError, match="index"):
        EstimandSpec("moment", index=0)
    with pytest.raises(StructuralError, match="power"):
        EstimandSpec("moment", index=1, power=0)
    assert EstimandSpec("moment", index=2, power=2).power == 2


def test_seed_rows_match_exact_tower(law_pass):
    law, nuis, seed = law_pass
    assert seed.plugin == pytest.approx(law.psi, abs=1e-13)
    m2 = law.m2[law.i1, law.i2]
    m1 = (law.Q2 * law.m2).sum(axis=1)[law.i1]
    np.testing.assert_allclose(seed.rows[3], law.Z3[law.i3] - m2, atol=1e-12)
    np.testing.assert_allclose(seed.rows[2], m2 - m1, atol=1e-12)
    np.testing.assert_allclose(seed.rows[1], m1 - law.psi, atol=1e-12)


def test_seed_separable_form_reproduces_rows(law_pass):
    law, nuis, seed = law_pass
    panel = nuis.panel(3)
    E, T = panel.W.shape
    Dmat = np.zeros((E, T))
    for coef, col in seed.sep[3]:
        Dmat += np.broadcast_to(coef, (E,))[:, None] * np.broadcast_to(col, (T,))[None, :]
    states = law.i1 * 2 + law.i2
    np.testing.assert_allclose(Dmat[states, law.i3], seed.rows[3], atol=1e-12)


def test_seed_increments_center_through_panels(law_pass):
    law, nuis, seed = law_pass
    for j, sep in seed.sep.items():
        panel = nuis.panel(j)
        E, T = panel.W.shape
        Dmat = np.zeros((E, T))
        for coef, col in sep:
            Dmat += (np.broadcast_to(coef, (E,))[:, None]
                     * np.broadcast_to(col, (T,))[None, :])
        centered = (panel.W * Dmat).sum(axis=1) / panel._wsafe
        np.testing.assert_allclose(centered, 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# projections on the exact finite-support instance


def test_aligned_only_gradient_is_exact(law_pass):
    law, nuis, seed = law_pass
    got = gradient_aligned_only(seed, nuis)
    np.testing.assert_allclose(got, law.aligned_gradient(), atol=1e-13)


def test_projected_gradient_matches_dense_least_squares(law_pass):
    law, nuis, seed = law_pass
    got = canonical_gradient_fixed_beta(seed, law.beta_param(), nuis)
    np.testing.assert_allclose(got, law.projected_gradient(), atol=1e-10)


def test_projection_certificates(law_pass):
    # the engine output must lie in the tangent space with a residual that is
    # orthogonal to it, and it must be mean zero under the sampling law
    law, nuis, seed = law_pass
    dt = canonical_gradient_fixed_beta(seed, law.beta_param(), nuis)
    B = law.tangent_basis()
    resid = law.aligned_gradient() - dt
    np.testing.assert_allclose(B.T @ (law.pi * resid), 0.0, atol=1e-12)
    coef, res, *_ = np.linalg.lstsq(B * np.sqrt(law.pi)[:, None],
                                    dt * np.sqrt(law.pi), rcond=None)
    np.testing.assert_allclose(B @ coef, dt, atol=1e-10)
    assert abs(law.pi @ dt) < 1e-13


def test_projection_reduces_variance(law_pass):
    law, nuis, seed = law_pass
    dt = canonical_gradient_fixed_beta(seed, law.beta_param(), nuis)
    da = law.aligned_gradient()
    var_dt = law.pi @ (dt * dt)
    var_da = law.pi @ (da * da)
    assert var_dt < var_da  # strict: the aligned-only gradient is not tangent


def test_known_beta_gradient_pointwise(law_pass):
    # inverse-shift form: each row carries lambda-dagger times its seed
    # increment over the participating mass
    law, nuis, seed = law_pass
    dp = gradient_known_beta(seed, law.beta_param(), nuis)
    Z = law.dataset().z
    want = np.zeros(law.n)
    for j in (1, 2):
        dS = law.DELTA[1]
        want += (law.src == 1) * seed.rows[j] / dS
    lam = nuis.ratio_fits(3).lambda_prev(nuis.delta, Z[:, :2])
    wst = np.ones(law.n)
    for s in (2, 3):
        w = law.weight(s, Z[:, 0], Z[:, 2])
        W = np.array([law.p3_table(1, b1, b2) @ law.weight(s, law.Z1[b1], law.Z3)
                      for b1, b2 in zip(law.i1, law.i2)])
        wst = np.where(law.src == s, w / W, wst)
    want += lam / wst * seed.rows[3] / 1.0  # delta of S_3 is the full mass
    np.testing.assert_allclose(dp, want, atol=1e-12)


# ---------------------------------------------------------------------------
# pointwise fusion machinery


def test_batched_pinv_drops_null_direction():
    M = np.array([
        np.diag([2.0, 1.0, 0.0]),
        np.diag([3.0, 2.0, 1.0]),
    ])
    pinv, dropped = _batched_pinv(M)
    np.testing.assert_allclose(pinv[0], np.diag([0.5, 1.0, 0.0]), atol=1e-14)
    # force_null removes the smallest magnitude eigenvalue even when nonzero
    np.testing.assert_allclose(pinv[1], np.diag([1 / 3, 0.5, 0.0]), atol=1e-14)
    np.testing.assert_array_equal(dropped, [1, 1])
    full, dropped_full = _batched_pinv(M[1:], force_null=False)
    np.testing.assert_allclose(full[0], np.diag([1 / 3, 0.5, 1.0]), atol=1e-14)
    np.testing.assert_array_equal(dropped_full, [0])


def test_batched_pinv_symmetrizes():
    M = np.array([[[2.0, 1.0], [0.0, 2.0]]])
    pinv, _ = _batched_pinv(M, force_null=True)
    # symmetrized matrix has eigenpairs (1.5, [1,-1]) and (2.5, [1,1])
    want = np.outer([1.0, 1.0], [1.0, 1.0]) / 2 / 2.5
    np.testing.assert_allclose(pinv[0], want, atol=1e-14)


def test_fusion_matrix_pointwise_oracle(law):
    nuis = law.bundle()
    beta = law.beta_param()
    b1, b2 = 0, 1
    point = np.array([law.Z1[b1], law.Z2[b2]])
    fm = fusion_matrix(3, beta, nuis, point)
    assert fm.sources == (1, 2, 3)
    probs = law.Q3[(b1, b2)]
    dt = np.array([law.DELTA[s] * law.P_Z1[s][b1] * law.p2_table(s, b1)[b2]
                   for s in (1, 2, 3)])
    dt = dt / (law.P_Z1[1][b1] * law.Q2[b1, b2])  # rho convention: relative to q
    wst = {}
    for s in (2, 3):
        w = law.weight(s, law.Z1[b1], law.Z3)
        wst[s] = w / (probs @ w)
    wst[1] = np.ones(3)
    R = 1.0 / sum(dt[i] * wst[s] for i, s in enumerate((1, 2, 3)))
    M = np.diag(1.0 / dt)
    for a, sa in enumerate((1, 2, 3)):
        for c, sc in enumerate((1, 2, 3)):
            M[a, c] -= probs @ (wst[sa] * wst[sc] * R)
    np.testing.assert_allclose(fm.matrix, M, atol=1e-12)
    # the local mixture weights span the exact null space
    np.testing.assert_allclose(fm.matrix @ dt, 0.0, atol=1e-12)
    assert fm.rank == 2
    np.testing.assert_allclose(fm.pinv @ fm.matrix @ fm.pinv, fm.pinv, atol=1e-10)


def test_fusion_matrix_no_support():
    data, design = _tilted_instance(300, beta_true=0.5, seed=11)
    nuis = fit_nuisance_bundle(data, design)
    beta = moment_match_beta(nuis).beta
    with pytest.raises(AllSingular, match="no support"):
        fusion_matrix(2, beta, nuis, np.array([1e9]))


def test_lambda_dagger_values(law):
    nuis = law.bundle()
    beta = law.beta_param()
    Z = law.dataset().z[:6]
    lam = nuis.ratio_fits(3).lambda_prev(nuis.delta, Z[:, :2])
    np.testing.assert_allclose(lambda_dagger(3, 1, beta, nuis, Z), lam, atol=1e-12)
    w = law.weight(2, Z[:, 0], Z[:, 2])
    West = np.array([law.p3_table(1, b1, b2) @ law.weight(2, law.Z1[b1], law.Z3)
                     for b1, b2 in zip(law.i1[:6], law.i2[:6])])
    np.testing.assert_allclose(lambda_dagger(3, 2, beta, nuis, Z),
                               lam / (w / West), atol=1e-12)
    with pytest.raises(StructuralError, match="participate"):
        lambda_dagger(2, 3, beta, nuis, Z[:, :2])


# ---------------------------------------------------------------------------
# parameter coupling


def test_gamma_derivative_moment_matches_fd():
    data, design = _tilted_instance(2500, beta_true=0.8, seed=1)
    nuis = fit_nuisance_bundle(data, design)
    beta = moment_match_beta(nuis).beta
    seed = seed_gradient(EstimandSpec("moment", index=2), nuis)
    gm = gamma_derivative(seed, beta, nuis, method="moment")
    gf = gamma_derivative(seed, beta, nuis, method="fd")
    np.testing.assert_allclose(gm, gf, atol=1.5e-3)
    assert gm[0] > 0  # a positive tilt raises the outcome mean
    with pytest.raises(ValueError, match="method"):
        gamma_derivative(seed, beta, nuis, method="secant")


def test_efficient_gradient_composition(law_pass):
    law, nuis, seed = law_pass
    beta = law.beta_param()
    out = efficient_gradient(seed, beta, nuis)
    p = compute_pass(nuis, beta, seed)
    np.testing.assert_array_equal(out["fixed_beta_rows"], p.dtilde)
    adj = out["information"].pinv @ out["grad_gamma"]
    np.testing.assert_allclose(out["rows"], p.dtilde - p.scores_eff @ adj, atol=1e-14)
    assert out["scores_eff"].shape == (law.n, 2)


def test_compute_pass_caching(law_pass):
    law, nuis, seed = law_pass
    beta = law.beta_param()
    p1 = compute_pass(nuis, beta, seed)
    p2 = compute_pass(nuis, beta, seed)
    assert p1 is p2
    shifted = beta.replace_values(beta.values + 0.01)
    assert compute_pass(nuis, shifted, seed) is not p1
    p_noseed = compute_pass(nuis, beta)
    assert p_noseed is not p1
    assert p_noseed.dtilde is None


def test_pass_rejects_foreign_layout(law):
    nuis = law.bundle()
    bad = BetaParam([0.1], ((3, 2, 1),))
    with pytest.raises(StructuralError, match="layout"):
        compute_pass(nuis, bad)


# ---------------------------------------------------------------------------
# degenerate designs


def test_projected_gradient_centered_within_each_source():
    # every tangent component is conditionally centered per source, so the
    # sample mean of dtilde inside each source stays O(1/sqrt(n))
    data, design = _tilted_instance(2000, beta_true=0.8, seed=23)
    nuis = fit_nuisance_bundle(data, design)
    beta = moment_match_beta(nuis).beta
    seed = seed_gradient(EstimandSpec("moment", index=2), nuis)
    p = compute_pass(nuis, beta, seed)
    for s in (1, 2):
        rows = p.dtilde[data.source == s]
        assert abs(rows.mean()) <= 10.0 / np.sqrt(rows.size)


def test_all_paths_coincide_without_weak_sources():
    rng = np.random.default_rng(17)
    n = 1000
    z1 = rng.uniform(0.5, 1.5, n)
    z2 = rng.beta(2, 2, n)
    data = Dataset(np.column_stack([z1, z2]), np.ones(n, dtype=int), k=1)
    design = FusionDesign(d=2, k=1, relevant=(1, 2), aligned={1: {1}, 2: {1}})
    nuis = fit_nuisance_bundle(data, design)
    seed = seed_gradient(EstimandSpec("moment", index=2), nuis)
    beta = BetaParam.zeros(())
    p = compute_pass(nuis, beta, seed)
    da = gradient_aligned_only(seed, nuis)
    np.testing.assert_array_equal(p.dtilde, da)
    np.testing.assert_array_equal(p.dP, da)
    out = efficient_gradient(seed, beta, nuis)
    np.testing.assert_array_equal(out["rows"], da)
