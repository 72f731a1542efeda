"""TopK-DropN portfolio engine with asymmetric transaction costs and sweeps.

The engine is a deterministic sequential state machine over dates: rebalance
by score, net out self-replacements, charge buy/sell costs against
post-rebalance equal weights, and accumulate daily log returns.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np


class BacktestError(ValueError):
    """Engine contract violation (missing returns, portfolio wipeout)."""


@dataclass(frozen=True)
class BacktestConfig:
    top_k: int = 30
    n_drop: int = 5
    cost_buy_bps: float = 5.0
    cost_sell_bps: float = 15.0

    def __post_init__(self):
        if not 1 <= self.n_drop <= self.top_k:
            raise BacktestError(f"need 1 <= n_drop <= top_k, got "
                                f"{self.n_drop}/{self.top_k}")
        if self.cost_buy_bps < 0 or self.cost_sell_bps < 0:
            raise BacktestError("costs must be non-negative")


# Appendix-style asymmetric (buy, sell) basis-point regimes
COST_REGIMES: dict[str, tuple[float, float]] = {
    "NoCost": (0.0, 0.0),
    "Low": (2.0, 3.0),
    "Default": (5.0, 15.0),
    "High": (10.0, 20.0),
    "VeryHigh": (15.0, 30.0),
    "Extreme": (20.0, 40.0),
}

DEFAULT_NDROP_GRID = (1, 3, 5, 7, 10, 15)


def _ranked(tickers, scores) -> list[str]:
    """Descending by score, ties broken by ticker for determinism."""
    return sorted(tickers, key=lambda t: (-scores[t], t))


def topk_dropn_rebalance(scores: dict[str, float], universe: set[str],
                         prev: set[str], cfg: BacktestConfig
                         ) -> tuple[set[str], set[str], set[str]]:
    """One rebalance step; returns (holdings, net sells, net buys).

    Candidates are the top-K by score; the lowest-scored held names (at most
    n_drop) are dropped and replaced by the best unheld candidates. Names that
    left the universe are removed first. If the portfolio is short (first day
    or exits), it is refilled from the remaining candidates. Sells and buys
    are net: a name dropped and immediately re-selected trades nothing.
    """
    missing = universe - set(scores)
    if missing:
        raise BacktestError(f"scores missing for {sorted(missing)[:5]}")
    if len(universe) < cfg.top_k:
        warnings.warn(f"universe of {len(universe)} smaller than top_k "
                      f"{cfg.top_k}; holding the whole universe")
    order = _ranked(universe, scores)
    candidates = order[:cfg.top_k]
    held = prev & universe
    held_ranked = _ranked(held, scores)
    n_sell = min(cfg.n_drop, len(held_ranked))
    sell_set = set(held_ranked[len(held_ranked) - n_sell:])
    kept = held - sell_set
    buy_pool = [t for t in candidates if t not in kept]
    buys = set(buy_pool[:len(sell_set)])
    holdings = kept | buys
    if len(holdings) < cfg.top_k:
        for t in candidates:
            if len(holdings) >= cfg.top_k:
                break
            holdings.add(t)
    net_sells = prev - holdings
    net_buys = holdings - prev
    return holdings, net_sells, net_buys


def daily_return(holdings: set[str], returns: dict[str, float],
                 buys: set[str], sells: set[str], cfg: BacktestConfig
                 ) -> tuple[float, float, float]:
    """Equal-weight log return net of trade costs: (g, gross, cost).

    Bought and sold weight are measured against the post-rebalance equal
    weights 1/|holdings|; costs are the configured basis points.
    """
    if not holdings:
        return 0.0, 0.0, 0.0
    missing = [t for t in holdings if t not in returns or
               not math.isfinite(returns[t])]
    if missing:
        raise BacktestError(f"returns missing for held names {missing[:5]}")
    w = 1.0 / len(holdings)
    gross = sum(returns[t] for t in holdings) * w
    cost = (cfg.cost_buy_bps * 1e-4 * len(buys)
            + cfg.cost_sell_bps * 1e-4 * len(sells)) * w
    net = gross - cost
    if net <= -1.0:
        raise BacktestError(f"portfolio wiped out: net return {net:.4f}")
    return math.log1p(net), gross, cost


def turnover(prev: set[str], current: set[str]) -> float:
    """Half the L1 distance between consecutive equal-weight vectors."""
    if not prev and not current:
        return 0.0
    w_prev = 1.0 / len(prev) if prev else 0.0
    w_cur = 1.0 / len(current) if current else 0.0
    total = 0.0
    for t in prev | current:
        total += abs((w_cur if t in current else 0.0)
                     - (w_prev if t in prev else 0.0))
    return 0.5 * total


@dataclass
class BacktestResult:
    dates: list[str]
    holdings: list[tuple[str, ...]]
    buys: list[tuple[str, ...]]
    sells: list[tuple[str, ...]]
    log_returns: np.ndarray
    gross_returns: np.ndarray
    costs: np.ndarray
    turnovers: np.ndarray
    summary: dict[str, float] = field(default_factory=dict)

    @property
    def wealth(self) -> np.ndarray:
        return np.exp(np.cumsum(self.log_returns))


def run_backtest(scores_by_date: dict[str, dict[str, float]],
                 returns_by_date: dict[str, dict[str, float]],
                 cfg: BacktestConfig) -> BacktestResult:
    """Drive the rebalance rule over all scored dates.

    The universe each day is the set of scored names; holdings earn that
    day's returns net of the same-day trade costs. The first day buys the
    top-K outright.
    """
    dates = sorted(scores_by_date)
    if not dates:
        raise BacktestError("no scored dates")
    prev: set[str] = set()
    holdings_l, buys_l, sells_l = [], [], []
    g_l, gross_l, cost_l, to_l = [], [], [], []
    for date in dates:
        scores = scores_by_date[date]
        universe = set(scores)
        holdings, sells, buys = topk_dropn_rebalance(scores, universe, prev, cfg)
        g, gross, cost = daily_return(holdings, returns_by_date.get(date, {}),
                                      buys, sells, cfg)
        to_l.append(turnover(prev, holdings))
        holdings_l.append(tuple(sorted(holdings)))
        buys_l.append(tuple(sorted(buys)))
        sells_l.append(tuple(sorted(sells)))
        g_l.append(g)
        gross_l.append(gross)
        cost_l.append(cost)
        prev = holdings
    result = BacktestResult(dates=dates, holdings=holdings_l, buys=buys_l,
                            sells=sells_l, log_returns=np.asarray(g_l),
                            gross_returns=np.asarray(gross_l),
                            costs=np.asarray(cost_l),
                            turnovers=np.asarray(to_l))
    result.summary = portfolio_metrics(result.log_returns)
    result.summary["mean_turnover"] = float(result.turnovers.mean())
    return result


def portfolio_metrics(log_returns: np.ndarray) -> dict[str, float]:
    """Annualized return, max drawdown, Sharpe, cumulative return (252 d/y)."""
    g = np.asarray(log_returns, dtype=float)
    if g.size == 0:
        raise BacktestError("empty return series")
    mean = float(g.mean())
    ar = math.exp(252.0 * mean) - 1.0
    wealth = np.exp(np.cumsum(g))
    peaks = np.maximum.accumulate(np.concatenate([[1.0], wealth]))[1:]
    mdd = float(np.max(1.0 - wealth / peaks))
    std = float(g.std(ddof=1)) if g.size > 1 else 0.0
    # constant series leave O(1e-19) rounding residue in the sample std
    degenerate = std == 0.0 or std <= abs(mean) * 1e-12
    sharpe = float("nan") if degenerate else math.sqrt(252.0) * mean / std
    cumulative = math.exp(float(g.sum())) - 1.0
    return {"annualized_return": ar, "max_drawdown": mdd, "sharpe": sharpe,
            "cumulative_return": cumulative}


def holdings_digest(holdings: tuple[str, ...]) -> str:
    return hashlib.sha256(",".join(holdings).encode()).hexdigest()[:12]


def sweep_costs(scores_by_date, returns_by_date, cfg: BacktestConfig,
                regimes: dict[str, tuple[float, float]] | None = None
                ) -> list[dict]:
    """One backtest per cost regime; trades are identical across regimes
    because the rebalance rule never looks at costs."""
    regimes = regimes or COST_REGIMES
    rows = []
    for name, (buy, sell) in regimes.items():
        rcfg = replace(cfg, cost_buy_bps=buy, cost_sell_bps=sell)
        res = run_backtest(scores_by_date, returns_by_date, rcfg)
        rows.append({"regime": name, "cost_buy_bps": buy, "cost_sell_bps": sell,
                     **res.summary})
    return rows


def sweep_ndrop(scores_by_date, returns_by_date, cfg: BacktestConfig,
                grid=DEFAULT_NDROP_GRID) -> list[dict]:
    """Re-simulate the engine at each replacement rate."""
    rows = []
    for n in grid:
        ncfg = replace(cfg, n_drop=n)
        res = run_backtest(scores_by_date, returns_by_date, ncfg)
        rows.append({"n_drop": n, "drop_fraction": n / ncfg.top_k,
                     **res.summary})
    return rows
