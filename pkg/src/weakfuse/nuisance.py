"""Nuisance fits: kernel regressions, propensity, density ratios, and the
conditional-moment panels that back the gradient engine.

Everything here is deterministic given the data: bandwidths are closed-form or
grid-selected, logistic fits use IRLS from a zero start, and conditional-mean
fields are evaluated on fixed grids. Panels evaluate Nadaraya-Watson fields at
a set of conditioning states and map data rows onto those states by linear
interpolation; the observation-level helpers recompute the same estimator
exactly at the queried point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import (
    DegenerateNormalizer,
    InsufficientData,
    NonBinaryTreatment,
    NuisanceMissing,
    SeparationWarning,
    SingularBandwidth,
    StructuralError,
)
from .model import Dataset, FusionDesign, OverlapDiagnostics
from .weights import eval_weight_many

_MIN_ROWS = 5
_H_FLOOR = 1e-6


@dataclass(frozen=True)
class BandwidthRule:
    """How to pick kernel bandwidths: silverman, fixed(h), or cv_loo(grid)."""

    kind: str = "silverman"
    h: float | None = None
    grid: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("silverman", "fixed", "cv_loo"):
            raise ValueError(f"unknown bandwidth rule {self.kind!r}")
        if self.kind == "fixed" and (self.h is None or self.h <= 0):
            raise ValueError("fixed rule needs a positive bandwidth")
        if self.kind == "cv_loo" and not self.grid:
            raise ValueError("cv_loo rule needs a candidate grid")

    @classmethod
    def parse(cls, text: str) -> "BandwidthRule":
        text = text.strip()
        if text == "silverman":
            return cls()
        if text.startswith("fixed:"):
            return cls("fixed", h=float(text[6:]))
        if text.startswith("cv_loo:"):
            return cls("cv_loo", grid=tuple(float(v) for v in text[7:].split(",")))
        raise ValueError(f"cannot parse bandwidth rule {text!r}")


@dataclass(frozen=True)
class NuisanceOptions:
    bandwidth_rule: BandwidthRule = BandwidthRule()
    ratio_clip: tuple[float, float] = (1e-3, 1e3)
    propensity_clip: tuple[float, float] = (0.01, 0.99)
    eps_w: float = 1e-8
    grid_points: int = 301
    cross_fit: bool = False


class ClipCounter:
    """Mutable clip diagnostics; the only state that changes after fitting."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def bump(self, what: str, j: int, by: int = 1):
        key = f"{what}_j{j}"
        self.counts[key] = self.counts.get(key, 0) + int(by)

    def total(self) -> int:
        return sum(self.counts.values())


def silverman_bandwidths(X: np.ndarray) -> np.ndarray:
    """Per-column rule-of-thumb bandwidths; constant columns are floored."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    sd = X.std(axis=0, ddof=1) if n > 1 else np.zeros(p)
    factor = (4.0 / ((p + 2) * n)) ** (1.0 / (p + 4))
    h = sd * factor
    if np.any(h < _H_FLOOR):
        warnings.warn("constant column, bandwidth floored", SingularBandwidth, stacklevel=2)
        h = np.maximum(h, _H_FLOOR)
    return h


def _gauss_weights(Xq: np.ndarray, Xt: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian product-kernel weights, shape (m, n)."""
    d2 = np.zeros((Xq.shape[0], Xt.shape[0]))
    for c in range(Xt.shape[1]):
        diff = (Xq[:, c, None] - Xt[None, :, c]) / h[c]
        d2 += diff * diff
    return np.exp(-0.5 * d2)


@dataclass
class RegressionFit:
    """Nadaraya-Watson regression with a Gaussian product kernel."""

    X: np.ndarray
    y: np.ndarray
    h: np.ndarray

    def predict(self, Xq: np.ndarray) -> np.ndarray:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        out = np.empty(Xq.shape[0])
        fallback = float(self.y.mean())
        for lo in range(0, Xq.shape[0], 512):
            w = _gauss_weights(Xq[lo:lo + 512], self.X, self.h)
            den = w.sum(axis=1)
            num = w @ self.y
            out[lo:lo + 512] = np.where(den > 1e-300, num / np.where(den > 0, den, 1.0),
                                        fallback)
        return out

    def _loo_sse(self, h: np.ndarray) -> float:
        w = _gauss_weights(self.X, self.X, h)
        np.fill_diagonal(w, 0.0)
        den = w.sum(axis=1)
        ok = den > 1e-300
        pred = np.where(ok, (w @ self.y) / np.where(ok, den, 1.0), self.y.mean())
        return float(np.sum((pred - self.y) ** 2))


def fit_kernel_regression(X, y, rule: BandwidthRule | None = None) -> RegressionFit:
    """Fit a kernel regression of y on X under the given bandwidth rule.

    Needs at least five rows. The cv_loo rule treats its grid entries as a
    common scalar bandwidth for every column and keeps the entry with the
    smallest leave-one-out squared error (first wins on ties).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise StructuralError("X and y row counts differ")
    if X.shape[0] < _MIN_ROWS:
        raise InsufficientData(f"kernel regression needs >= {_MIN_ROWS} rows, got {X.shape[0]}")
    rule = rule or BandwidthRule()
    if rule.kind == "fixed":
        h = np.full(X.shape[1], float(rule.h))
    elif rule.kind == "silverman":
        h = silverman_bandwidths(X)
    else:
        probe = RegressionFit(X, y, np.ones(X.shape[1]))
        sses = [probe._loo_sse(np.full(X.shape[1], hv)) for hv in rule.grid]
        h = np.full(X.shape[1], rule.grid[int(np.argmin(sses))])
    return RegressionFit(X, y, h)


def _irls_logistic(X: np.ndarray, y: np.ndarray, ridge: float = 0.0,
                   max_iter: int = 60) -> np.ndarray:
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(p * (1 - p), 1e-10)
        H = (X * w[:, None]).T @ X + ridge * np.eye(X.shape[1])
        g = X.T @ (y - p) - ridge * beta
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


@dataclass
class PropensityFit:
    """Main-terms linear-logistic model of the binary index-2 coordinate."""

    coef: np.ndarray
    clip: tuple[float, float]

    def predict(self, z1: np.ndarray) -> np.ndarray:
        z1 = np.asarray(z1, dtype=float).ravel()
        eta = self.coef[0] + self.coef[1] * z1
        p = 1.0 / (1.0 + np.exp(-np.clip(eta, -30, 30)))
        return np.clip(p, self.clip[0], self.clip[1])


def fit_propensity(data: Dataset, design: FusionDesign,
                   options: NuisanceOptions | None = None) -> PropensityFit:
    """Fit P(Z_2 = 1 | Z_1) on rows whose source participates at index 2."""
    options = options or NuisanceOptions()
    rows = np.concatenate([data.rows_of(s) for s in sorted(design.sources_at(2))])
    rows.sort()
    if rows.size < _MIN_ROWS:
        raise InsufficientData("too few rows in the index-2 scope")
    y = data.z[rows, 1]
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise NonBinaryTreatment("index-2 values outside {0, 1}")
    X = np.column_stack([np.ones(rows.size), data.z[rows, 0]])
    coef = _irls_logistic(X, y)
    if not np.all(np.isfinite(coef)) or np.max(np.abs(coef)) > 30:
        warnings.warn("separation in propensity fit, ridge applied",
                      SeparationWarning, stacklevel=2)
        coef = _irls_logistic(X, y, ridge=1e-4)
    return PropensityFit(coef=coef, clip=options.propensity_clip)


def _ratio_features(Zprev: np.ndarray, binary: np.ndarray,
                    center: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Cubic expansion of continuous coordinates, binaries passed through."""
    Zprev = np.atleast_2d(np.asarray(Zprev, dtype=float))
    cols = [np.ones(Zprev.shape[0])]
    for c in range(Zprev.shape[1]):
        if binary[c]:
            cols.append(Zprev[:, c])
        else:
            u = (Zprev[:, c] - center[c]) / scale[c]
            cols.extend([u, u * u, u * u * u])
    return np.column_stack(cols)


class MarginalRatioFits:
    """Fitted marginal density ratios rho_s = p(z̄_{j-1}|s) / p(z̄_{j-1}|A_j)
    for every source participating at index j, via logistic classification
    with a prior-odds correction. At j = 1 every ratio is exactly one."""

    def __init__(self, j: int, design: FusionDesign, data: Dataset,
                 options: NuisanceOptions, clips: ClipCounter):
        self.j = j
        self.options = options
        self.clips = clips
        self.sources = tuple(sorted(design.sources_at(j)))
        aligned = sorted(design.aligned_at(j))
        self._coef: dict[int, np.ndarray | None] = {}
        self._ld: dict[int, float] = {}
        self._diag: dict[int, OverlapDiagnostics] = {}
        p = j - 1
        self._p = p
        if p == 0:
            for s in self.sources:
                self._coef[s] = None
                self._ld[s] = 0.0
                self._diag[s] = OverlapDiagnostics(1.0, 1.0, 0.0)
            return
        Zfull = data.z[:, :p]
        self._binary = np.array([set(np.unique(Zfull[:, c])) <= {0.0, 1.0}
                                 for c in range(p)])
        self._center = Zfull.mean(axis=0)
        sd = Zfull.std(axis=0)
        self._scale = np.where(sd > 1e-12, sd, 1.0)
        pool_rows = np.concatenate([data.rows_of(s) for s in aligned])
        pool_rows.sort()
        X0 = _ratio_features(Zfull[pool_rows], self._binary, self._center, self._scale)
        single_aligned = aligned[0] if len(aligned) == 1 else None
        for s in self.sources:
            rows_s = data.rows_of(s)
            if rows_s.size < _MIN_ROWS or pool_rows.size < _MIN_ROWS:
                raise InsufficientData(f"too few rows to fit the ratio for source {s}")
            if s == single_aligned:
                self._coef[s] = None  # identical laws, ratio is exactly one
                self._ld[s] = 0.0
            else:
                X1 = _ratio_features(Zfull[rows_s], self._binary, self._center, self._scale)
                X = np.vstack([X0, X1])
                yy = np.concatenate([np.zeros(X0.shape[0]), np.ones(X1.shape[0])])
                coef = _irls_logistic(X, yy)
                if not np.all(np.isfinite(coef)) or np.max(np.abs(coef)) > 30:
                    warnings.warn(f"separation in ratio fit for source {s}",
                                  SeparationWarning, stacklevel=2)
                    coef = _irls_logistic(X, yy, ridge=1e-4)
                self._coef[s] = coef
                self._ld[s] = float(np.log(pool_rows.size / rows_s.size))
            vals = self._rho_unclipped(s, Zfull)
            lo, hi = options.ratio_clip
            self._diag[s] = OverlapDiagnostics(
                min_ratio=float(vals.min()),
                max_ratio=float(vals.max()),
                frac_clipped=float(np.mean((vals < lo) | (vals > hi))),
            )

    def _rho_unclipped(self, s: int, Zprev: np.ndarray) -> np.ndarray:
        Zprev = np.atleast_2d(np.asarray(Zprev, dtype=float))
        coef = self._coef.get(s)
        if s not in self._coef:
            raise NuisanceMissing(f"source {s} not fitted at index {self.j}")
        if coef is None:
            return np.ones(Zprev.shape[0])
        X = _ratio_features(Zprev[:, : self._p], self._binary, self._center, self._scale)
        eta = np.clip(X @ coef + self._ld[s], -np.log(1e6), np.log(1e6))
        return np.exp(eta)

    def rho(self, s: int, Zprev: np.ndarray) -> np.ndarray:
        """Clipped ratio estimate for source s at past-prefix rows."""
        vals = self._rho_unclipped(s, Zprev)
        lo, hi = self.options.ratio_clip
        out = np.clip(vals, lo, hi)
        n_clip = int(np.sum(out != vals))
        if n_clip:
            self.clips.bump("rho", self.j, n_clip)
        return out

    def overlap_diagnostics(self, s: int) -> OverlapDiagnostics | None:
        return self._diag.get(s)

    def lambda_prev(self, delta: Mapping[int, float], Zprev: np.ndarray) -> np.ndarray:
        """λ_{j-1} = q(z̄_{j-1}) / p(z̄_{j-1} | S ∈ S_j) with q the pooled
        aligned reference; identically one when S_j is a single source."""
        Zprev = np.atleast_2d(np.asarray(Zprev, dtype=float))
        dsum = sum(delta[s] for s in self.sources)
        den = np.zeros(Zprev.shape[0])
        for s in self.sources:
            den += delta[s] * self.rho(s, Zprev)
        return dsum / den


def fit_marginal_density_ratio(data: Dataset, design: FusionDesign, j: int,
                               options: NuisanceOptions | None = None,
                               clips: ClipCounter | None = None) -> MarginalRatioFits:
    return MarginalRatioFits(j, design, data, options or NuisanceOptions(),
                             clips or ClipCounter())


@dataclass
class RowMap:
    """Interpolation of data rows onto panel evaluation states."""

    lo: np.ndarray
    hi: np.ndarray
    frac: np.ndarray

    def apply(self, fields: np.ndarray) -> np.ndarray:
        fields = np.asarray(fields)
        f = self.frac if fields.ndim == 1 else self.frac[:, None]
        return fields[self.lo] * (1.0 - f) + fields[self.hi] * f


class KernelPanel:
    """Kernel conditional-moment evaluator for one index j.

    Fields are Nadaraya-Watson means over the training rows, evaluated at a
    fixed set of conditioning states: a linspace grid along the (single)
    continuous past coordinate crossed with exact branches of the binary past
    coordinates. Rows map onto states by linear interpolation along the grid;
    the Gaussian kernel acts only on the continuous coordinate, binary
    coordinates are matched exactly. With two or more continuous past
    coordinates the panel falls back to one evaluation state per data row, in
    data order, and `row_map` only accepts that full-row layout.
    """

    def __init__(self, j: int, data: Dataset, train_idx: np.ndarray,
                 options: NuisanceOptions):
        self.j = j
        self.train_idx = np.asarray(train_idx, dtype=int)
        if self.train_idx.size < _MIN_ROWS:
            raise InsufficientData(f"index {j} has {self.train_idx.size} training rows")
        p = j - 1
        self.zj = data.z[self.train_idx, j - 1].copy()
        zprev_all = data.z[:, :p]
        zprev_tr = data.z[self.train_idx, :p]
        self._zpt = zprev_tr
        self.binary = np.array([set(np.unique(zprev_all[:, c])) <= {0.0, 1.0}
                                for c in range(p)], dtype=bool)
        self.cont_cols = np.flatnonzero(~self.binary) if p else np.empty(0, dtype=int)
        self.bin_cols = np.flatnonzero(self.binary) if p else np.empty(0, dtype=int)
        self._branch_vals = {int(c): np.unique(zprev_all[:, c]) for c in self.bin_cols}
        T = self.train_idx.size

        if p == 0:
            self._mode = "scope"
            self.eval_states = np.zeros((1, 0))
            self.W = np.ones((1, T))
            self.h = np.empty(0)
        elif self.cont_cols.size >= 2:
            self._mode = "exact"
            self.eval_states = zprev_all.copy()
            self.h = silverman_bandwidths(zprev_tr)
            self.W = _gauss_weights(self.eval_states, zprev_tr, self.h)
        else:
            self._mode = "grid"
            combos: list[tuple[float, ...]] = [()]
            for c in self.bin_cols:
                combos = [cb + (v,) for cb in combos for v in self._branch_vals[int(c)]]
            self._branches = combos
            if self.cont_cols.size == 1:
                c0 = int(self.cont_cols[0])
                lo, hi = float(zprev_all[:, c0].min()), float(zprev_all[:, c0].max())
                if hi <= lo:
                    hi = lo + 1.0
                self.grid = np.linspace(lo, hi, options.grid_points)
                sd = zprev_tr[:, c0].std(ddof=1)
                self.h = np.array([max(sd * (4.0 / (3 * T)) ** 0.2, _H_FLOOR)])
            else:
                self.grid = np.zeros(1)
                self.h = np.array([1.0])
            G = self.grid.size
            states = []
            W = np.zeros((G * len(combos), T))
            tr_branch = self._branch_of(zprev_tr)
            for b, combo in enumerate(combos):
                st = np.zeros((G, p))
                if self.cont_cols.size == 1:
                    st[:, self.cont_cols[0]] = self.grid
                for c, v in zip(self.bin_cols, combo):
                    st[:, c] = v
                states.append(st)
                mask = tr_branch == b
                if not mask.any():
                    continue
                if self.cont_cols.size == 1:
                    x = zprev_tr[mask, self.cont_cols[0]]
                    diff = (self.grid[:, None] - x[None, :]) / self.h[0]
                    W[b * G:(b + 1) * G, mask] = np.exp(-0.5 * diff * diff)
                else:
                    W[b * G:(b + 1) * G, mask] = 1.0
            self.eval_states = np.vstack(states)
            self.W = W

        self.wsum = self.W.sum(axis=1)
        self.degenerate = self.wsum < 1e-12
        self._wsafe = np.where(self.degenerate, 1.0, self.wsum)

    def _branch_of(self, Zprev: np.ndarray) -> np.ndarray:
        """Branch id of each row, snapping to the nearest declared value."""
        b = np.zeros(Zprev.shape[0], dtype=int)
        stride = 1
        for c in reversed(list(self.bin_cols)):
            vals = self._branch_vals[int(c)]
            pos = np.clip(np.searchsorted(vals, Zprev[:, c]), 0, len(vals) - 1)
            left = np.maximum(pos - 1, 0)
            use_left = np.abs(Zprev[:, c] - vals[left]) < np.abs(Zprev[:, c] - vals[pos])
            pos = np.where(use_left, left, pos)
            b += pos * stride
            stride *= len(vals)
        return b

    def mean_field(self, train_values: np.ndarray) -> np.ndarray:
        """NW conditional mean of train-side values at every eval state."""
        num = self.W @ train_values
        if train_values.ndim == 1:
            return np.where(self.degenerate, train_values.mean(), num / self._wsafe)
        out = num / self._wsafe[:, None]
        if self.degenerate.any():
            out[self.degenerate] = train_values.mean(axis=0)
        return out

    def row_map(self, Zprev: np.ndarray, row_idx=None) -> RowMap:
        Zprev = np.atleast_2d(np.asarray(Zprev, dtype=float))
        m = Zprev.shape[0]
        if self._mode == "scope":
            zz = np.zeros(m, dtype=int)
            return RowMap(zz, zz, np.zeros(m))
        if self._mode == "exact":
            if m != self.eval_states.shape[0]:
                raise StructuralError("exact-mode panels map only the full dataset")
            idx = np.arange(m)
            return RowMap(idx, idx, np.zeros(m))
        G = self.grid.size
        branch = self._branch_of(Zprev)
        if self.cont_cols.size == 1:
            x = np.clip(Zprev[:, self.cont_cols[0]], self.grid[0], self.grid[-1])
            hi = np.clip(np.searchsorted(self.grid, x), 1, G - 1)
            lo = hi - 1
            frac = (x - self.grid[lo]) / (self.grid[hi] - self.grid[lo])
        else:
            lo = np.zeros(m, dtype=int)
            hi = lo.copy()
            frac = np.zeros(m)
        return RowMap(branch * G + lo, branch * G + hi, frac)

    def weights_at(self, zbar_prev) -> np.ndarray:
        """Exact kernel weights from one conditioning point to the train rows."""
        if self.j == 1:
            return np.ones(self.train_idx.size)
        z = np.atleast_1d(np.asarray(zbar_prev, dtype=float))
        w = np.ones(self.train_idx.size)
        for pos, c in enumerate(self.cont_cols):
            h = self.h[pos] if self._mode == "exact" else self.h[0]
            diff = (z[c] - self._zpt[:, c]) / h
            w = w * np.exp(-0.5 * diff * diff)
        for c in self.bin_cols:
            w = w * (self._zpt[:, c] == z[c])
        return w


class DiscretePanel:
    """Exact conditional-moment evaluator over a finite support.

    `eval_states` enumerates the support of z̄_{j-1}; `W` holds the exact
    target conditional probabilities q(z_j | z̄_{j-1}), so every field is an
    exact expectation and rows map onto their support state without
    interpolation. Backs the oracle tests and the discrete acceptance check.
    """

    def __init__(self, j: int, eval_states: np.ndarray, zj_values: np.ndarray,
                 cond_probs: np.ndarray):
        self.j = j
        self.eval_states = np.atleast_2d(np.asarray(eval_states, dtype=float))
        self.zj = np.asarray(zj_values, dtype=float)
        self.W = np.asarray(cond_probs, dtype=float)
        if self.W.shape != (self.eval_states.shape[0], self.zj.size):
            raise StructuralError("conditional probability table has wrong shape")
        if np.any(np.abs(self.W.sum(axis=1) - 1.0) > 1e-12):
            raise StructuralError("conditional probabilities must sum to one")
        self.train_idx = np.arange(self.zj.size)
        self.wsum = np.ones(self.eval_states.shape[0])
        self.degenerate = np.zeros(self.eval_states.shape[0], dtype=bool)
        self._wsafe = self.wsum
        self._mode = "discrete"

    def mean_field(self, train_values: np.ndarray) -> np.ndarray:
        return self.W @ train_values

    def row_map(self, Zprev: np.ndarray, row_idx=None) -> RowMap:
        Zprev = np.atleast_2d(np.asarray(Zprev, dtype=float))
        idx = np.empty(Zprev.shape[0], dtype=int)
        for r in range(Zprev.shape[0]):
            hit = np.flatnonzero(np.all(np.abs(self.eval_states - Zprev[r]) < 1e-9, axis=1))
            if hit.size == 0:
                raise StructuralError("row state not in the declared support")
            idx[r] = hit[0]
        return RowMap(idx, idx, np.zeros(Zprev.shape[0]))

    def weights_at(self, zbar_prev) -> np.ndarray:
        rm = self.row_map(np.atleast_2d(zbar_prev))
        return self.W[rm.lo[0]]


class CrossFitPanel:
    """Two half-sample panels glued together: rows of one fold evaluate
    against fields trained on the other fold."""

    def __init__(self, j: int, data: Dataset, rows: np.ndarray, options: NuisanceOptions):
        self.j = j
        self.sub = (KernelPanel(j, data, rows[::2], options),
                    KernelPanel(j, data, rows[1::2], options))
        E0, T0 = self.sub[0].W.shape
        E1, T1 = self.sub[1].W.shape
        self.eval_states = np.vstack([self.sub[0].eval_states, self.sub[1].eval_states])
        self.train_idx = np.concatenate([self.sub[0].train_idx, self.sub[1].train_idx])
        self.zj = np.concatenate([self.sub[0].zj, self.sub[1].zj])
        self.W = np.zeros((E0 + E1, T0 + T1))
        self.W[:E0, :T0] = self.sub[0].W
        self.W[E0:, T0:] = self.sub[1].W
        self.wsum = self.W.sum(axis=1)
        self.degenerate = np.concatenate([self.sub[0].degenerate, self.sub[1].degenerate])
        self._wsafe = np.where(self.degenerate, 1.0, self.wsum)
        self._E0 = E0
        self._T0 = T0
        self._fold0 = set(int(r) for r in self.sub[0].train_idx)
        self._mode = "crossfit"

    def mean_field(self, train_values: np.ndarray) -> np.ndarray:
        f0 = self.sub[0].mean_field(train_values[: self._T0])
        f1 = self.sub[1].mean_field(train_values[self._T0:])
        return np.concatenate([f0, f1], axis=0)

    def row_map(self, Zprev: np.ndarray, row_idx=None) -> RowMap:
        # rows trained in fold 0 read fold-1 fields and vice versa; rows in
        # neither fold read fold 0
        Zprev = np.atleast_2d(np.asarray(Zprev, dtype=float))
        rm0 = self.sub[0].row_map(Zprev)
        rm1 = self.sub[1].row_map(Zprev)
        use1 = np.zeros(Zprev.shape[0], dtype=bool)
        if row_idx is not None:
            use1 = np.array([int(r) in self._fold0 for r in row_idx])
        lo = np.where(use1, rm1.lo + self._E0, rm0.lo)
        hi = np.where(use1, rm1.hi + self._E0, rm0.hi)
        frac = np.where(use1, rm1.frac, rm0.frac)
        return RowMap(lo, hi, frac)

    def weights_at(self, zbar_prev) -> np.ndarray:
        return np.concatenate([self.sub[0].weights_at(zbar_prev),
                               self.sub[1].weights_at(zbar_prev)])


class FittedNuisance:
    """Everything the estimator and gradient engine need, fitted once.

    Holds source frequencies, per-index panels, the propensity and marginal
    density-ratio fits, and a registry of named conditional-mean evaluators.
    Weight-dependent fields (normalizers, score means, fusion-matrix moments)
    are computed per β by the gradient engine and cached here, so refreshing β
    never touches the β-free fits.
    """

    def __init__(self, data: Dataset, design: FusionDesign, options: NuisanceOptions,
                 delta: dict[int, float], panels: dict[int, object],
                 ratios: dict[int, MarginalRatioFits], propensity: PropensityFit | None,
                 registry: dict[tuple, tuple], clips: ClipCounter):
        self.data = data
        self.design = design
        self.options = options
        self.delta = delta
        self.panels = panels
        self.ratios = ratios
        self.propensity = propensity
        self.registry = registry
        self.clips = clips
        self.pass_cache: dict[bytes, object] = {}

    def panel(self, j: int):
        p = self.panels.get(j)
        if p is None:
            raise NuisanceMissing(f"no conditional-moment panel for index {j}")
        return p

    def ratio_fits(self, j: int) -> MarginalRatioFits:
        r = self.ratios.get(j)
        if r is None:
            raise NuisanceMissing(f"no marginal density-ratio fit for index {j}")
        return r

    def delta_of(self, sources) -> float:
        return float(sum(self.delta[s] for s in sources))

    def normalizer_at(self, j: int, s: int, beta_js: np.ndarray,
                      zbar_prev) -> tuple[float, bool]:
        """Exact pointwise normalizer estimate; floored when degenerate."""
        spec = self.design.spec_for(j, s)
        if spec is None:
            raise NuisanceMissing(f"no weight model for index {j}, source {s}")
        panel = self.panel(j)
        w = panel.weights_at(zbar_prev)
        point = np.atleast_1d(np.asarray(zbar_prev, dtype=float))
        pairs = np.column_stack([np.tile(point, (panel.zj.size, 1)), panel.zj])
        wvals = eval_weight_many(spec, beta_js, pairs)
        den = float(w.sum())
        num = float(w @ wvals)
        if den < 1e-300 or num <= 0 or num / den < self.options.eps_w:
            warnings.warn(f"degenerate normalizer at index {j}, source {s}",
                          DegenerateNormalizer, stacklevel=2)
            return self.options.eps_w, True
        return num / den, False


def conditional_mean(bundle: FittedNuisance, tag: tuple, zbar_prev) -> float:
    """Evaluate a registered conditional-mean fit at one point; the tag names
    the regression (for example ("mu",) for the outcome mean given past)."""
    entry = bundle.registry.get(tuple(tag))
    if entry is None:
        raise NuisanceMissing(f"no registered regression under tag {tag!r}")
    panel, values = entry
    values = np.asarray(values)
    w = panel.weights_at(zbar_prev)
    # same dot-product accumulation order for both sums, so a constant field
    # comes back unchanged
    den = float(w @ np.ones(values.size))
    if den < 1e-300:
        return float(values.mean())
    return float(w @ values) / den


def fit_nuisance_bundle(data: Dataset, design: FusionDesign, estimand=None,
                        options: NuisanceOptions | None = None) -> FittedNuisance:
    """Fit every β-free nuisance component a design and estimand require."""
    options = options or NuisanceOptions()
    if data.n == 0:
        raise StructuralError("empty dataset")
    clips = ClipCounter()
    delta = {s: c / data.n for s, c in data.source_counts().items()}
    panels: dict[int, object] = {}
    ratios: dict[int, MarginalRatioFits] = {}
    registry: dict[tuple, tuple] = {}
    for j in design.relevant:
        rows = np.concatenate([data.rows_of(s) for s in sorted(design.aligned_at(j))])
        rows.sort()
        if options.cross_fit and rows.size >= 2 * _MIN_ROWS:
            panels[j] = CrossFitPanel(j, data, rows, options)
        else:
            panels[j] = KernelPanel(j, data, rows, options)
    for j in design.relevant:
        ratios[j] = MarginalRatioFits(j, design, data, options, clips)
    propensity = None
    kind = getattr(estimand, "kind", None)
    if kind == "ate":
        propensity = fit_propensity(data, design, options)
        jd = max(design.relevant)
        panel = panels[jd]
        registry[("mu",)] = (panel, panel.zj.copy())
    elif kind == "working_linear" and 2 in panels:
        registry[("mu_y",)] = (panels[2], panels[2].zj.copy())
    return FittedNuisance(data, design, options, delta, panels, ratios,
                          propensity, registry, clips)
