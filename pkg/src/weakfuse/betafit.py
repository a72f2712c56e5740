"""Shift-parameter estimation: moment matching for the initial value, and the
one-step update based on projected (efficient) scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, SingularInformation
from .gradients import compute_pass
from .model import BetaParam, estimable_mask, layout_from_design
from .nuisance import FittedNuisance
from .weights import basis_matrix

_MM_TOL = 1e-8
_MM_MAX_ITER = 200


@dataclass
class MomentMatchResult:
    beta: BetaParam
    converged: dict[tuple[int, int], bool]
    iterations: dict[tuple[int, int], int]
    max_residual: float

    @property
    def all_converged(self) -> bool:
        return all(self.converged.values())


def _pair_moment_system(nuisance: FittedNuisance, j: int, s: int):
    """Precompute everything the per-pair Newton solve reuses: the basis split
    into (state factor, value factor) on the index panel, the basis at the
    source's own rows, and the reweighting that maps pooled aligned rows to
    the source's conditioning-state marginal."""
    design = nuisance.design
    data = nuisance.data
    spec = design.spec_for(j, s)
    panel = nuisance.panel(j)
    ratio = nuisance.ratio_fits(j)

    pairs = [(t.prefactor(panel.eval_states), t.terminal_values(panel.zj))
             for t in spec.terms]

    rows_s = data.rows_of(s)
    t_s = basis_matrix(spec, data.z[rows_s, :j])
    tbar = t_s.mean(axis=0)

    rows_a = np.concatenate([data.rows_of(m) for m in sorted(design.aligned_at(j))])
    rows_a.sort()
    t_a = basis_matrix(spec, data.z[rows_a, :j])
    rho_a = ratio.rho(s, data.z[rows_a, :j - 1])
    rmap = panel.row_map(data.z[rows_a, :j - 1])
    return panel, pairs, tbar, rows_a, t_a, rho_a, rmap


def _pair_moment_and_jac(b, panel, pairs, tbar, t_a, rho_a, rmap, eps_w):
    E = panel.eval_states.shape[0]
    T = panel.zj.size
    L = np.zeros((E, T))
    for bc, (g, psi) in zip(b, pairs):
        L += bc * np.outer(g, psi)
    wmat = np.exp(np.clip(L, -60.0, 60.0))
    Wsum = panel.W
    wsafe = panel._wsafe
    wfield = np.maximum((Wsum * wmat).sum(axis=1) / wsafe, eps_w)
    c = len(pairs)
    wcfield = np.empty((E, c))
    for ci, (g, psi) in enumerate(pairs):
        wcfield[:, ci] = g * ((Wsum * (wmat * psi[None, :])).sum(axis=1) / wsafe)

    wf_rows = rmap.apply(wfield)
    wtilda = rho_a * np.exp(np.clip(t_a @ b, -60.0, 60.0)) / wf_rows
    D = wtilda.sum()
    N = t_a.T @ wtilda
    m = N / D - tbar
    score_rows = t_a - rmap.apply(wcfield) / wf_rows[:, None]
    J = (t_a * wtilda[:, None]).T @ score_rows / D \
        - np.outer(N / D, wtilda @ score_rows / D)
    return m, J


def moment_match_beta(nuisance: FittedNuisance, beta0: BetaParam | None = None,
                      max_iter: int = _MM_MAX_ITER, tol: float = _MM_TOL) -> MomentMatchResult:
    """Initial shift parameters: for each estimable weak pair, damped Newton
    on the self-normalized moment condition that the reweighted aligned rows
    reproduce the source's own basis means. Known-threshold blocks are left
    at their supplied (or zero) values."""
    design = nuisance.design
    layout = layout_from_design(design)
    beta = beta0 if beta0 is not None else BetaParam.zeros(layout)
    values = beta.values.copy()
    offs = beta.offsets()
    converged: dict[tuple[int, int], bool] = {}
    iters: dict[tuple[int, int], int] = {}
    max_resid = 0.0
    for (j, s) in design.weak_pairs():
        spec = design.spec_for(j, s)
        if spec.family != "exponential_tilt":
            continue
        sl = offs[(j, s)]
        b = values[sl].copy()
        panel, pairs, tbar, rows_a, t_a, rho_a, rmap = _pair_moment_system(nuisance, j, s)
        eps_w = nuisance.options.eps_w
        m, J = _pair_moment_and_jac(b, panel, pairs, tbar, t_a, rho_a, rmap, eps_w)
        ok = False
        it = 0
        for it in range(1, max_iter + 1):
            resid = float(np.max(np.abs(m)))
            if resid < tol:
                ok = True
                break
            try:
                step = np.linalg.solve(J, -m)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(J, -m, rcond=None)[0]
            scale = 1.0
            for _ in range(25):
                m_new, J_new = _pair_moment_and_jac(
                    b + scale * step, panel, pairs, tbar, t_a, rho_a, rmap, eps_w)
                if np.max(np.abs(m_new)) < resid or scale < 1e-6:
                    break
                scale *= 0.5
            b = b + scale * step
            m, J = m_new, J_new
        resid = float(np.max(np.abs(m)))
        if resid < tol:
            ok = True
        if not ok:
            warnings.warn(
                f"moment matching did not converge for index {j}, source {s} "
                f"(residual {resid:.3g})", NoConvergence, stacklevel=2)
        converged[(j, s)] = ok
        iters[(j, s)] = it
        max_resid = max(max_resid, resid)
        values[sl] = b
    return MomentMatchResult(beta=beta.replace_values(values), converged=converged,
                             iterations=iters, max_residual=max_resid)


def efficient_score(nuisance: FittedNuisance, beta: BetaParam) -> np.ndarray:
    """Per-row efficient score for the shift parameters, (n, t)."""
    return compute_pass(nuisance, beta).scores_eff


@dataclass(frozen=True)
class InformationMatrix:
    matrix: np.ndarray
    pinv: np.ndarray
    rank: int
    eig_min: float
    cond: float


def information_matrix(nuisance: FittedNuisance, beta: BetaParam) -> InformationMatrix:
    """Empirical second moment of the efficient score, inverted on the
    estimable block. Known-threshold coordinates stay zero on both sides."""
    S = compute_pass(nuisance, beta).scores_eff
    n = S.shape[0]
    t = S.shape[1]
    info = S.T @ S / n
    mask = estimable_mask(nuisance.design)
    idx = np.flatnonzero(mask)
    pinv = np.zeros((t, t))
    if idx.size == 0:
        return InformationMatrix(info, pinv, 0, 0.0, np.inf)
    sub = info[np.ix_(idx, idx)]
    vals, vecs = np.linalg.eigh(0.5 * (sub + sub.T))
    eig_min = float(vals.min())
    if eig_min < 1e-10:
        warnings.warn("efficient information is numerically singular",
                      SingularInformation, stacklevel=2)
    keep = np.abs(vals) > 1e-12 * max(float(np.abs(vals).max()), 1e-300)
    inv_vals = np.where(keep, 1.0 / np.where(vals != 0, vals, 1.0), 0.0)
    sub_pinv = (vecs * inv_vals) @ vecs.T
    pinv[np.ix_(idx, idx)] = sub_pinv
    cond = float(np.abs(vals).max() / np.abs(vals).min()) if eig_min > 0 else np.inf
    return InformationMatrix(info, pinv, int(keep.sum()), eig_min, cond)


@dataclass
class OneStepBeta:
    beta: BetaParam
    se: np.ndarray
    information: InformationMatrix
    score_mean: np.ndarray


def one_step_beta(nuisance: FittedNuisance, beta_init: BetaParam) -> OneStepBeta:
    """Single Newton step from the initial value along the efficient score."""
    S = efficient_score(nuisance, beta_init)
    n = S.shape[0]
    sbar = S.mean(axis=0)
    info = information_matrix(nuisance, beta_init)
    update = info.pinv @ sbar
    beta1 = beta_init.replace_values(beta_init.values + update)
    se = np.sqrt(np.maximum(np.diag(info.pinv), 0.0) / n)
    return OneStepBeta(beta=beta1, se=se, information=info, score_mean=sbar)
