"""Interpretability analytics: code dynamics, factor exposures, expert usage.

All inputs are plain mappings or arrays produced by the prediction pipeline;
everything here is pure batch computation over immutable data.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .evaluation import spearman
from .panel import average_ranks

EXACT_WILCOXON_LIMIT = 25


@dataclass
class TransitionSummary:
    codes: list[int]            # the top-K' most active codes, by activity
    matrix: np.ndarray          # (K', K') row-stochastic over observed rows
    row_counts: np.ndarray      # transition counts per source code
    persistence: float          # mean diagonal over observed rows
    entropy: float              # mean row Shannon entropy, nats


def code_transition_matrix(history: dict[str, dict[str, int]],
                           horizon_days: int, top_codes: int = 100
                           ) -> TransitionSummary:
    """Empirical code-to-code transition rates at a fixed horizon.

    ``history`` maps date -> ticker -> code index. The horizon counts steps in
    the observed date sequence. Only the ``top_codes`` most frequently
    assigned codes enter; rows without any observed transition are dropped
    from the persistence and entropy averages.
    """
    if horizon_days < 1:
        raise ValueError("horizon must be >= 1 day")
    dates = sorted(history)
    activity: dict[int, int] = {}
    for date in dates:
        for code in history[date].values():
            activity[code] = activity.get(code, 0) + 1
    ranked = sorted(activity, key=lambda c: (-activity[c], c))[:top_codes]
    pos = {c: i for i, c in enumerate(ranked)}
    k = len(ranked)
    counts = np.zeros((k, k))
    for i in range(len(dates) - horizon_days):
        now, then = history[dates[i]], history[dates[i + horizon_days]]
        for ticker, code in now.items():
            nxt = then.get(ticker)
            if nxt is None or code not in pos or nxt not in pos:
                continue
            counts[pos[code], pos[nxt]] += 1
    row_counts = counts.sum(axis=1)
    matrix = np.zeros_like(counts)
    observed = row_counts > 0
    matrix[observed] = counts[observed] / row_counts[observed, None]
    if observed.any():
        persistence = float(np.mean(np.diag(matrix)[observed]))
        ent = []
        for row in matrix[observed]:
            nz = row[row > 0]
            ent.append(float(-(nz * np.log(nz)).sum()))
        entropy = float(np.mean(ent))
    else:
        persistence, entropy = float("nan"), float("nan")
    return TransitionSummary(codes=ranked, matrix=matrix, row_counts=row_counts,
                             persistence=persistence, entropy=entropy)


@dataclass
class CodeExposure:
    code: int
    n_obs: int
    factors: list[str]          # top-3 factor names by |rho|
    rhos: list[float]


def code_factor_exposure(history: dict[str, dict[str, int]],
                         stock_returns: dict[str, dict[str, float]],
                         factor_returns: dict[str, dict[str, float]],
                         min_obs: int = 30,
                         max_workers: int | None = None) -> list[CodeExposure]:
    """Rank correlation of each code's next-day return with the factor series.

    A code's return on holding date t is the equal-weighted next-day return
    of the stocks assigned to it at t, paired with the factor returns realized
    on that same next day. Codes with fewer than ``min_obs`` dated
    observations are skipped.
    """
    dates = sorted(history)
    factor_names = sorted(next(iter(factor_returns.values()))) \
        if factor_returns else []
    code_series: dict[int, dict[str, tuple[float, str]]] = {}
    for i in range(len(dates) - 1):
        date, nxt = dates[i], dates[i + 1]
        rets = stock_returns.get(nxt, {})
        if nxt not in factor_returns:
            continue
        bucket: dict[int, list[float]] = {}
        for ticker, code in history[date].items():
            r = rets.get(ticker)
            if r is not None and math.isfinite(r):
                bucket.setdefault(code, []).append(r)
        for code, vals in bucket.items():
            code_series.setdefault(code, {})[date] = \
                (float(np.mean(vals)), nxt)

    def exposure(code: int) -> CodeExposure | None:
        series = code_series[code]
        if len(series) < min_obs:
            return None
        code_rets = []
        factor_cols = {f: [] for f in factor_names}
        for date in sorted(series):
            r, nxt = series[date]
            code_rets.append(r)
            for f in factor_names:
                factor_cols[f].append(factor_returns[nxt][f])
        rhos = {}
        for f in factor_names:
            rho = spearman(code_rets, factor_cols[f])
            if not math.isnan(rho):
                rhos[f] = rho
        top = sorted(rhos, key=lambda f: (-abs(rhos[f]), f))[:3]
        return CodeExposure(code=code, n_obs=len(series), factors=top,
                            rhos=[rhos[f] for f in top])

    workers = max_workers or int(os.environ.get("PRISM_VQ_THREADS", "1"))
    codes = sorted(code_series)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(exposure, codes))
    else:
        results = [exposure(c) for c in codes]
    return [r for r in results if r is not None]


@dataclass
class SpikeSummary:
    expert_means: np.ndarray            # mean activation per expert
    spike_dates: list[list[str]]        # per-expert spike date lists
    jaccard: np.ndarray                 # (M, M) pairwise overlap
    mean_pairwise_jaccard: float
    spike_rate: np.ndarray              # per-expert fraction of spike dates


def expert_spikes(activation: np.ndarray, dates: list[str],
                  threshold_sigmas: float = 1.5) -> SpikeSummary:
    """Spike dates where an expert's mean gate weight exceeds mu + 1.5 sigma.

    ``activation`` is (D, M) with rows summing to 1 (gates are distributions).
    Experts with zero time-series variance have no spikes.
    """
    act = np.asarray(activation, dtype=float)
    if act.ndim != 2 or act.shape[0] < 2:
        raise ValueError("need a (dates, experts) activation panel with >= 2 dates")
    D, M = act.shape
    mu = act.mean(axis=0)
    sigma = act.std(axis=0)
    spikes = []
    for e in range(M):
        if sigma[e] == 0:
            spikes.append([])
            continue
        hit = act[:, e] > mu[e] + threshold_sigmas * sigma[e]
        spikes.append([dates[i] for i in np.flatnonzero(hit)])
    sets = [set(s) for s in spikes]
    jac = np.zeros((M, M))
    for e in range(M):
        for f in range(M):
            union = sets[e] | sets[f]
            jac[e, f] = len(sets[e] & sets[f]) / len(union) if union else 0.0
    pairs = [jac[e, f] for e in range(M) for f in range(e + 1, M)]
    return SpikeSummary(expert_means=mu, spike_dates=spikes, jaccard=jac,
                        mean_pairwise_jaccard=float(np.mean(pairs)) if pairs
                        else float("nan"),
                        spike_rate=np.array([len(s) / D for s in spikes]))


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Paired signed-rank test; returns (W = min rank sum, two-sided p).

    Zero differences are dropped and tied absolute differences share average
    ranks. Small samples (n <= 25) get an exact p from the null distribution
    of the positive rank sum; larger samples use the tie-corrected normal
    approximation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two aligned 1-D series")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 0.0, 1.0
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_LIMIT:
        p = _exact_two_sided_p(ranks, w)
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        if var <= 0:
            return w, 1.0
        z = (w - mean) / math.sqrt(var)
        p = 2.0 * float(ndtr(z))
    return w, min(max(p, 0.0), 1.0)


def _exact_two_sided_p(ranks: np.ndarray, w: float) -> float:
    """2 * P(W+ <= w) under the symmetric null, by dynamic programming.

    Ranks are doubled so tie-averaged half-integer ranks become integers.
    """
    doubled = np.round(ranks * 2).astype(int)
    total = int(doubled.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = 0.5 * (dist + shifted)
    threshold = int(math.floor(round(2 * w, 9)))
    return 2.0 * float(dist[:threshold + 1].sum())
