"""Trajectory evaluation: coverage, kinetic fidelity, validity gating.

Conventions, stated in every report:
  - coverage JSD is the Jensen-Shannon *distance* (square root of the
    divergence), log base 2, so it lives in [0, 1];
  - coverage histograms use the first two principal components, 10 evenly
    spaced bins per component, bin edges from the reference extent padded
    by 1 percent of the range;
  - kinetic metrics (lag RMSD, autocorrelation, tICA, VAMP-2) operate on
    the projection onto the top 32 principal components of the reference.

All functions are pure; callers parallelize across proteins freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import jensenshannon

from .se3 import Trajectory

__all__ = [
    "PCABasis",
    "ValidityMask",
    "coverage",
    "rmsd_curve",
    "autocorr_curve",
    "tica_components",
    "tica_correlation",
    "vamp2_curve",
    "validity",
]

KINETIC_PCS = 32
TICA_EPS = 1.0e-6
MIN_TICA_PAIRS = 30


def _coords(traj: Trajectory) -> np.ndarray:
    """Flattened (L, 3N) translation coordinates."""
    t = traj.translations()
    return t.reshape(t.shape[0], -1)


@dataclass
class PCABasis:
    mean: np.ndarray  # (3N,)
    components: np.ndarray  # (k, 3N), orthonormal rows
    explained_variance: np.ndarray  # (k,)

    @staticmethod
    def fit(reference: Trajectory | np.ndarray, n_components: int = KINETIC_PCS) -> "PCABasis":
        x = reference if isinstance(reference, np.ndarray) else _coords(reference)
        mean = x.mean(axis=0)
        xc = x - mean
        u, s, vt = np.linalg.svd(xc, full_matrices=False)
        k = min(n_components, vt.shape[0])
        var = (s**2) / max(x.shape[0] - 1, 1)
        return PCABasis(mean=mean, components=vt[:k], explained_variance=var[:k])

    def project(self, traj: Trajectory | np.ndarray) -> np.ndarray:
        x = traj if isinstance(traj, np.ndarray) else _coords(traj)
        return (x - self.mean) @ self.components.T


# ---------------------------------------------------------------------------
# conformational coverage


def _histogram2d(proj2: np.ndarray, edges_x: np.ndarray, edges_y: np.ndarray) -> np.ndarray:
    h, _, _ = np.histogram2d(proj2[:, 0], proj2[:, 1], bins=(edges_x, edges_y))
    return h


def coverage(
    gen: Trajectory | np.ndarray,
    ref: Trajectory | np.ndarray,
    basis: PCABasis,
    bins: int = 10,
    valid_mask: np.ndarray | None = None,
    pad: float = 0.01,
) -> dict:
    """Occupancy comparison on the first two principal components.

    Inputs are assumed already aligned. Bin edges come from the reference
    extent per component, padded by `pad` of the range; generated samples
    outside the reference extent simply fall off the histogram.
    """
    pg = basis.project(gen)[:, :2]
    pr = basis.project(ref)[:, :2]
    if valid_mask is not None:
        pg = pg[np.asarray(valid_mask, dtype=bool)]
    edges = []
    for c in range(2):
        lo, hi = pr[:, c].min(), pr[:, c].max()
        span = max(hi - lo, 1e-12)
        edges.append(np.linspace(lo - pad * span, hi + pad * span, bins + 1))
    h_ref = _histogram2d(pr, *edges)
    h_gen = _histogram2d(pg, *edges) if len(pg) else np.zeros_like(h_ref)
    n_gen_in = h_gen.sum()
    result = {
        "bins": bins,
        "convention": "jensen-shannon distance, log base 2, first 2 PCs, reference extent +1%",
        "n_gen_frames": int(len(pg)),
        "n_gen_in_range": int(n_gen_in),
    }
    if len(pg) == 0 or n_gen_in == 0:
        result.update({"jsd": 1.0, "precision": 0.0, "recall": 0.0, "f1": 0.0, "empty": True})
        return result
    p = (h_gen / n_gen_in).ravel()
    q = (h_ref / h_ref.sum()).ravel()
    jsd = float(jensenshannon(p, q, base=2))
    occ_g = h_gen.ravel() > 0
    occ_r = h_ref.ravel() > 0
    inter = np.sum(occ_g & occ_r)
    precision = float(inter / occ_g.sum()) if occ_g.any() else 0.0
    recall = float(inter / occ_r.sum()) if occ_r.any() else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    result.update({"jsd": jsd, "precision": precision, "recall": recall, "f1": f1, "empty": False})
    return result


# ---------------------------------------------------------------------------
# kinetic fidelity


def _lag_pairs(L: int, lag: int, valid_mask: np.ndarray | None):
    starts = np.arange(L - lag) if lag < L else np.array([], dtype=int)
    if valid_mask is not None and starts.size:
        m = np.asarray(valid_mask, dtype=bool)
        keep = m[starts] & m[starts + lag]
        starts = starts[keep]
    return starts


def rmsd_curve(
    traj: Trajectory | np.ndarray,
    lags,
    basis: PCABasis,
    valid_mask: np.ndarray | None = None,
) -> list:
    """Mean displacement norm between lagged projections, per residue root."""
    proj = basis.project(traj)
    n_res = (basis.mean.shape[0]) // 3
    out = []
    for lag in lags:
        starts = _lag_pairs(proj.shape[0], int(lag), valid_mask)
        if starts.size == 0:
            out.append(None)
            continue
        d = proj[starts + int(lag)] - proj[starts]
        out.append(float(np.mean(np.linalg.norm(d, axis=1) / np.sqrt(n_res))))
    return out


def autocorr_curve(
    traj: Trajectory | np.ndarray,
    lags,
    basis: PCABasis,
    valid_mask: np.ndarray | None = None,
) -> list:
    """Normalized autocovariance summed over projection components.

    autocorr(0) = 1 exactly; a constant trajectory has zero variance and
    yields None entries.
    """
    proj = basis.project(traj)
    mu = proj.mean(axis=0)
    delta = proj - mu
    denom = float(np.sum(delta * delta) / proj.shape[0])
    out = []
    for lag in lags:
        if denom <= 1e-24:
            out.append(None)
            continue
        starts = _lag_pairs(proj.shape[0], int(lag), valid_mask)
        if starts.size == 0:
            out.append(None)
            continue
        num = float(np.mean(np.sum(delta[starts] * delta[starts + int(lag)], axis=1)))
        out.append(num / denom)
    return out


# ---------------------------------------------------------------------------
# tICA


def _reg_inv_sqrt(c: np.ndarray, eps: float) -> tuple[np.ndarray, int]:
    """Symmetric eps-regularized inverse square root; returns (W, rank)."""
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    keep = w > eps
    rank = int(keep.sum())
    return v[:, keep] * (w[keep] ** -0.5), rank


def tica_components(
    x: np.ndarray,  # (L, d) features
    lag: int,
    valid_mask: np.ndarray | None = None,
    eps: float = TICA_EPS,
    n_components: int = 2,
):
    """Solve C_tau v = lambda C_0 v on valid time-lagged pairs.

    Uses symmetrized estimators and eps-regularized whitening; eigenvalues
    are clipped to [-1, 1] and components carry kinetic-map scaling (each
    scaled by its eigenvalue). Returns (eigenvalues, components (k, d),
    n_pairs).
    """
    starts = _lag_pairs(x.shape[0], lag, valid_mask)
    n = starts.size
    if n == 0:
        return np.empty(0), np.empty((0, x.shape[1])), 0
    x0 = x[starts]
    xt = x[starts + lag]
    mu = 0.5 * (x0.mean(axis=0) + xt.mean(axis=0))
    a = x0 - mu
    b = xt - mu
    c0 = 0.5 * (a.T @ a + b.T @ b) / n
    ct = 0.5 * (a.T @ b + b.T @ a) / n
    w, rank = _reg_inv_sqrt(c0, eps)
    m = w.T @ ct @ w
    evals, evecs = np.linalg.eigh(0.5 * (m + m.T))
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], -1.0, 1.0)
    comps = (w @ evecs[:, order]).T  # rows are generalized eigenvectors
    k = min(n_components, comps.shape[0])
    scaled = comps[:k] * evals[:k, None]  # kinetic map scaling
    return evals[:k], scaled, n


def residue_contribution(component: np.ndarray) -> np.ndarray:
    """Per-residue score max(|v_x|, |v_y|, |v_z|) from a 3N component vector."""
    v = component.reshape(-1, 3)
    return np.max(np.abs(v), axis=1)


def tica_correlation(
    gen: Trajectory | np.ndarray,
    ref: Trajectory | np.ndarray,
    valid_mask: np.ndarray | None = None,
    lags=(1, 5, 10, 20),
    eps: float = TICA_EPS,
) -> dict:
    """Mean |Pearson| between per-residue contribution scores of the top two
    independent components, per lag; N/A when fewer than 30 valid pairs."""
    xg = gen if isinstance(gen, np.ndarray) else _coords(gen)
    xr = ref if isinstance(ref, np.ndarray) else _coords(ref)
    out = {"lags": list(map(int, lags)), "correlation": [], "n_valid_pairs": []}
    for lag in lags:
        n_pairs = _lag_pairs(xg.shape[0], int(lag), valid_mask).size
        out["n_valid_pairs"].append(int(n_pairs))
        if n_pairs < MIN_TICA_PAIRS:
            out["correlation"].append(None)
            continue
        _, comps_g, _ = tica_components(xg, int(lag), valid_mask, eps)
        _, comps_r, _ = tica_components(xr, int(lag), None, eps)
        if comps_g.shape[0] < 1 or comps_r.shape[0] < 1:
            out["correlation"].append(None)
            continue
        k = min(2, comps_g.shape[0], comps_r.shape[0])
        rs = []
        for c in range(k):
            sg = residue_contribution(comps_g[c])
            sr = residue_contribution(comps_r[c])
            if np.std(sg) < 1e-15 or np.std(sr) < 1e-15:
                continue
            rs.append(abs(float(np.corrcoef(sr, sg)[0, 1])))
        out["correlation"].append(float(np.mean(rs)) if rs else None)
    return out


# ---------------------------------------------------------------------------
# VAMP-2


def vamp2_curve(
    traj: Trajectory | np.ndarray,
    lags,
    basis: PCABasis,
    eps: float = TICA_EPS,
    valid_mask: np.ndarray | None = None,
) -> list:
    """Squared Frobenius norm of the whitened Koopman matrix per lag."""
    proj = basis.project(traj)
    out = []
    for lag in lags:
        starts = _lag_pairs(proj.shape[0], int(lag), valid_mask)
        if starts.size < 2:
            out.append(None)
            continue
        x0 = proj[starts]
        xt = proj[starts + int(lag)]
        a = x0 - x0.mean(axis=0)
        b = xt - xt.mean(axis=0)
        n = starts.size
        c00 = a.T @ a / n
        ctt = b.T @ b / n
        c0t = a.T @ b / n
        w0, _ = _reg_inv_sqrt(c00, eps)
        wt, _ = _reg_inv_sqrt(ctt, eps)
        k = w0.T @ c0t @ wt
        out.append(float(np.sum(k * k)))
    return out


# ---------------------------------------------------------------------------
# validity


@dataclass
class ValidityMask:
    valid: np.ndarray  # (L,) bool, AND of enabled checks
    clash_ok: np.ndarray
    break_ok: np.ndarray
    clash_rate_pct: np.ndarray  # per-frame percentages
    break_rate_pct: np.ndarray
    clash_defined: bool

    @property
    def percent_valid(self) -> float:
        return float(100.0 * np.mean(self.valid))


def validity(
    traj: Trajectory,
    d_clash: float = 3.0,
    d_break: float = 4.5,
    clash_rate_max_pct: float = 1.29,
    break_rate_max_pct: float = 0.2,
) -> ValidityMask:
    """Chain-level structural sanity gate.

    Per frame, the clash rate is the percentage of non-adjacent residue
    pairs closer than d_clash and the break rate the percentage of adjacent
    pairs farther than d_break; a frame is valid iff both rates stay at or
    below their thresholds. With N < 3 there are no non-adjacent pairs and
    the clash check is undefined (flagged, treated as passing).
    """
    t = traj.translations()
    L, N = t.shape[0], t.shape[1]
    diff = t[:, :, None, :] - t[:, None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    iu, ju = np.triu_indices(N, 1)
    adjacent = (ju - iu) == 1
    adj_d = dist[:, iu[adjacent], ju[adjacent]]
    break_rate = 100.0 * np.mean(adj_d > d_break, axis=1)
    clash_defined = np.sum(~adjacent) > 0
    if clash_defined:
        non_d = dist[:, iu[~adjacent], ju[~adjacent]]
        clash_rate = 100.0 * np.mean(non_d < d_clash, axis=1)
    else:
        clash_rate = np.zeros(L)
    clash_ok = clash_rate <= clash_rate_max_pct
    break_ok = break_rate <= break_rate_max_pct
    return ValidityMask(
        valid=clash_ok & break_ok,
        clash_ok=clash_ok,
        break_ok=break_ok,
        clash_rate_pct=clash_rate,
        break_rate_pct=break_rate,
        clash_defined=bool(clash_defined),
    )
