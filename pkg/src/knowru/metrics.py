"""Transfer metrics over per-seed reward curves.

Curves are paired by position: ``baseline[k]`` and ``treated[k]`` come from
the same seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _curves(curves) -> list:
    out = [np.asarray(c, dtype=np.float64) for c in curves]
    if not out or any(c.size == 0 for c in out):
        raise ValueError("at least one non-empty curve is required")
    return out


def _paired(baseline, treated):
    b, t = _curves(baseline), _curves(treated)
    if len(b) != len(t):
        raise ValueError(f"{len(b)} baseline curves vs {len(t)} treated curves")
    return b, t


def smooth(curve, half_window: int = 10) -> np.ndarray:
    """Centered moving average with mirrored edges.

    Mirroring (``c b a | a b c``) keeps the operator doubly stochastic, so
    constants are unchanged and the curve mean is preserved.
    """
    if half_window < 0:
        raise ValueError("half_window must be >= 0")
    x = np.asarray(curve, dtype=np.float64)
    if half_window == 0 or x.size == 0:
        return x.copy()
    padded = np.pad(x, half_window, mode="symmetric")
    # direct window means; a cumsum difference loses precision on long curves
    return sliding_window_view(padded, 2 * half_window + 1).mean(axis=1)


def jump_start_per_seed(baseline, treated, window: int) -> list:
    b, t = _paired(baseline, treated)
    if window < 1 or any(window > c.size for c in b + t):
        raise ValueError("window must lie in [1, curve length]")
    return [float(tc[:window].mean() - bc[:window].mean()) for bc, tc in zip(b, t)]


def jump_start(baseline, treated, window: int) -> float:
    return float(np.mean(jump_start_per_seed(baseline, treated, window)))


def time_to_threshold(curve, threshold: float, stability_window: int = 1, half_window: int = 10):
    """First episode from which the smoothed curve stays at or above ``threshold``
    for ``stability_window`` episodes; ``None`` if it never does."""
    if stability_window < 1:
        raise ValueError("stability_window must be >= 1")
    s = smooth(curve, half_window)
    ok = s >= threshold
    run = 0
    for e in range(len(ok) - 1, -1, -1):
        run = run + 1 if ok[e] else 0
        ok[e] = run >= stability_window
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else None


def _tail(c, tail_fraction):
    n = max(1, int(math.ceil(tail_fraction * c.size)))
    return c[-n:]


def asymptotic_per_seed(baseline, treated, tail_fraction: float = 0.1) -> list:
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    b, t = _paired(baseline, treated)
    return [float(_tail(tc, tail_fraction).mean() - _tail(bc, tail_fraction).mean()) for bc, tc in zip(b, t)]


def asymptotic_performance(baseline, treated, tail_fraction: float = 0.1) -> float:
    return float(np.mean(asymptotic_per_seed(baseline, treated, tail_fraction)))


def tail_mean(curves, tail_fraction: float = 0.1) -> float:
    """Seed-averaged mean of the last ``tail_fraction`` of each curve."""
    return float(np.mean([_tail(c, tail_fraction).mean() for c in _curves(curves)]))


@dataclass
class Summary:
    metric: str
    per_seed: list
    mean: float = field(init=False)
    std: float = field(init=False)
    ci95: float = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.per_seed, dtype=np.float64)
        self.mean = float(v.mean())
        self.std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        self.ci95 = 1.96 * self.std / math.sqrt(v.size)


@dataclass
class TransferReport:
    jump_start: Summary
    asymptotic_performance: Summary
    ttt_baseline: Summary
    ttt_treated: Summary
    threshold: float
    # None where a seed never reaches the threshold
    ttt_baseline_raw: list
    ttt_treated_raw: list

    @property
    def time_to_threshold_reduction(self) -> float:
        """Relative reduction of the mean time to threshold (positive is faster)."""
        base = self.ttt_baseline.mean
        return (base - self.ttt_treated.mean) / base if base > 0 else 0.0

    def summaries(self) -> list:
        return [self.jump_start, self.asymptotic_performance, self.ttt_baseline, self.ttt_treated]


def censored_ttt(curves, threshold, stability_window, half_window=10):
    """Per-curve time to threshold; unreached curves count as their length."""
    raw = [time_to_threshold(c, threshold, stability_window, half_window) for c in curves]
    return raw, [float(len(c) if r is None else r) for c, r in zip(curves, raw)]


def transfer_report(baseline, treated, window=None, tail_fraction=0.1, threshold=None,
                    stability_window=None, half_window=10) -> TransferReport:
    """All three transfer metrics with defaults scaled to the curve length.

    The default threshold is the baseline's seed-averaged final-10% mean.
    """
    b, t = _paired(baseline, treated)
    n = min(c.size for c in b + t)
    window = window or max(1, round(0.1 * n))
    stability_window = stability_window or max(1, round(0.05 * n))
    if threshold is None:
        threshold = tail_mean(b, 0.1)
    b_raw, b_ttt = censored_ttt(b, threshold, stability_window, half_window)
    t_raw, t_ttt = censored_ttt(t, threshold, stability_window, half_window)
    return TransferReport(
        Summary("jump_start", jump_start_per_seed(b, t, window)),
        Summary("asymptotic_performance", asymptotic_per_seed(b, t, tail_fraction)),
        Summary("time_to_threshold_baseline", b_ttt),
        Summary("time_to_threshold_treated", t_ttt),
        float(threshold),
        b_raw,
        t_raw,
    )


REPORT_COLUMNS = ["metric", "baseline", "treated", "n_seeds", "mean", "std", "ci95", "per_seed"]


def _g(x) -> str:
    return format(float(x), ".17g")


def report_rows(report: TransferReport, baseline_label: str, treated_label: str) -> list:
    rows = []
    for s in report.summaries():
        rows.append([
            s.metric, baseline_label, treated_label, len(s.per_seed),
            _g(s.mean), _g(s.std), _g(s.ci95), ";".join(_g(v) for v in s.per_seed),
        ])
    rows.append([
        "time_to_threshold_reduction", baseline_label, treated_label, len(report.ttt_baseline.per_seed),
        _g(report.time_to_threshold_reduction), "", "", "",
    ])
    rows.append(["threshold", baseline_label, treated_label, "", _g(report.threshold), "", "", ""])
    return rows


def write_report(report: TransferReport, path, baseline_label: str, treated_label: str) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerows(report_rows(report, baseline_label, treated_label))
    return path
