"""Error metrics and race x gender disaggregated reporting."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import EmptyInputError, InvalidInputError

METRICS = ("mae_apparent", "mae_real", "epsilon_mean")
KL_SMOOTHING = 1e-12


@dataclass
class PredictionRecord:
    sample_id: str
    predicted_age: float
    real_age: float | None = None
    apparent_mean: float | None = None
    apparent_std: float | None = None
    race: str | None = None
    gender: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.predicted_age):
            raise InvalidInputError(f"{self.sample_id}: predicted_age must be finite")
        if self.apparent_std is not None and self.apparent_std < 0:
            raise InvalidInputError(f"{self.sample_id}: apparent_std must be >= 0")

    @property
    def labeled(self) -> bool:
        return bool(self.race) and bool(self.gender)

    @property
    def epsilon(self) -> float | None:
        if self.apparent_mean is None or self.apparent_std is None:
            return None
        return epsilon_error(self.predicted_age, self.apparent_mean, self.apparent_std)


def mae(pairs) -> float:
    """Mean absolute error over ``(predicted, reference)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("mae of an empty list")
    return float(np.mean([abs(p - r) for p, r in pairs]))


def epsilon_error(x, mu, sigma):
    """``1 - exp(-(x - mu)^2 / (2 sigma^2))``, elementwise.

    At ``sigma == 0`` the limit is used: 0 for an exact hit, 1 otherwise.
    """
    x, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, mu, sigma)))
    if np.any(sigma < 0):
        raise InvalidInputError("sigma must be nonnegative")
    d = x - mu
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        e = -np.expm1(-0.5 * (d / sigma) ** 2)
    e = np.where(sigma == 0, np.where(d == 0, 0.0, 1.0), e)
    return float(e) if e.ndim == 0 else e


def kl_divergence(p, q, smoothing=KL_SMOOTHING) -> float:
    """KL(p || q) in nats after additive smoothing and renormalization."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {p.size} vs {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidInputError("distributions must be nonnegative")
    p = p + smoothing
    q = q + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def age_histogram(ages, lo=0, hi=100):
    """Normalized histogram over integer-year bins ``lo..hi``.

    Ages are rounded to the nearest year and clipped into range.
    """
    idx = np.clip(np.rint(np.asarray(ages, dtype=np.float64)), lo, hi).astype(int) - lo
    counts = np.bincount(idx, minlength=hi - lo + 1).astype(np.float64)
    if counts.sum() == 0:
        raise EmptyInputError("histogram of no ages")
    return counts / counts.sum()


@dataclass
class GroupRow:
    race: str
    gender: str
    mae_apparent: float | None
    mae_real: float | None
    epsilon_mean: float | None
    count: int


@dataclass
class GroupReport:
    rows: list
    summary: dict
    excluded: int = 0
    dropped_groups: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(r.count for r in self.rows)

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "summary": self.summary,
            "excluded": self.excluded,
            "dropped_groups": self.dropped_groups,
            "meta": self.meta,
        }


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def overall_metrics(records) -> dict:
    """Whole-test-set MAE (apparent, real) and mean epsilon-error."""
    records = list(records)
    return {
        "mae_apparent": _mean_or_none(
            [abs(r.predicted_age - r.apparent_mean) for r in records if r.apparent_mean is not None]),
        "mae_real": _mean_or_none([abs(r.predicted_age - r.real_age) for r in records if r.real_age is not None]),
        "epsilon_mean": _mean_or_none([r.epsilon for r in records]),
        "count": len(records),
    }


def group_report(records, min_count=1) -> GroupReport:
    """Per race x gender metrics plus their cross-group mean and population std.

    Records missing race or gender are excluded and counted. Rows are sorted
    by apparent MAE (groups without an apparent reference last). The epsilon
    column is the per-group mean of per-image epsilon-errors.
    """
    groups = defaultdict(list)
    excluded = 0
    for r in records:
        if r.labeled:
            groups[(r.race.lower(), r.gender.lower())].append(r)
        else:
            excluded += 1
    if not groups:
        raise EmptyInputError(f"no records carry both race and gender ({excluded} excluded)")

    rows, dropped = [], []
    for (race, gender), members in sorted(groups.items()):
        if len(members) < min_count:
            dropped.append(f"{race}/{gender}")
            continue
        # fixed order so float sums do not depend on input order
        m = overall_metrics(sorted(members, key=lambda r: r.sample_id))
        rows.append(GroupRow(race, gender, m["mae_apparent"], m["mae_real"], m["epsilon_mean"], len(members)))
    rows.sort(key=lambda r: (r.mae_apparent is None, r.mae_apparent or 0.0, r.race, r.gender))

    summary = {}
    for name in METRICS:
        vals = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        summary[name] = {
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "groups": len(vals),
        }
    meta = {"std_convention": "population", "epsilon_aggregate": "per-image mean", "min_count": min_count}
    return GroupReport(rows, summary, excluded, dropped, meta)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _fmt(v, best=False, digits=2):
    if v is None:
        return "-"
    s = f"{v:.{digits}f}"
    return f"**{s}**" if best else s


def _best_mask(values):
    present = [v for v in values if v is not None]
    if not present:
        return [False] * len(values)
    lo = min(present)
    return [v is not None and v == lo for v in values]


def _md_table(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(out)


def render_tables(reports, overall=None):
    """Render model-level and group-level tables.

    ``reports`` maps model name -> GroupReport (a bare GroupReport is treated
    as a single model called ``model``). ``overall`` optionally maps model
    name -> ``overall_metrics`` dict; when absent the per-model overall row
    is unavailable and the overall table is omitted.

    Returns ``(markdown, structured)`` where ``structured`` is a JSON string.
    """
    if isinstance(reports, GroupReport):
        reports = {"model": reports}
        if overall is not None and "mae_apparent" in overall:
            overall = {"model": overall}
    overall = overall or {}

    def order_key(name):
        v = reports[name].summary["mae_apparent"]["mean"]
        return (v is None, v or 0.0, name)

    names = sorted(reports, key=order_key)
    sections = []

    if overall:
        onames = sorted(overall, key=lambda n: (overall[n]["mae_apparent"] is None,
                                                overall[n]["mae_apparent"] or 0.0, n))
        cols = ["mae_apparent", "mae_real", "epsilon_mean"]
        best = {c: _best_mask([overall[n][c] for n in onames]) for c in cols}
        body = [[n] + [_fmt(overall[n][c], best[c][i]) for c in cols] for i, n in enumerate(onames)]
        sections.append("### MAE and epsilon-error\n\n"
                        + _md_table(["Model", "MAE apparent", "MAE real", "epsilon"], body))

    body = []
    for n in names:
        rows = reports[n].rows
        app = [r.mae_apparent for r in rows]
        present = [v for v in app if v is not None]
        extremes = {min(present), max(present)} if present else set()
        for r in rows:
            body.append([n, r.race, r.gender, _fmt(r.mae_apparent, r.mae_apparent in extremes),
                         _fmt(r.mae_real), _fmt(r.epsilon_mean), str(r.count)])
    sections.append("### Per race and gender (best and worst apparent MAE in bold)\n\n"
                    + _md_table(["Model", "race", "gender", "mae_apparent", "mae_real", "epsilon", "count"], body))

    stats = [(m, s) for m in METRICS for s in ("mean", "std")]
    best = {k: _best_mask([reports[n].summary[k[0]][k[1]] for n in names]) for k in stats}
    body = [[n] + [_fmt(reports[n].summary[m][s], best[(m, s)][i]) for m, s in stats] for i, n in enumerate(names)]
    sections.append("### Cross-group summary (population std over race x gender groups)\n\n"
                    + _md_table(["Model", "MAE apparent mean", "std", "MAE real mean", "std",
                                 "epsilon mean", "std"], body))

    excl = [f"{n}: {reports[n].excluded}" for n in names if reports[n].excluded]
    if excl:
        sections.append("Records excluded for missing race/gender: " + ", ".join(excl))

    markdown = "\n\n".join(sections) + "\n"
    structured = json.dumps(
        {
            "column_order": ["race", "gender", "mae_apparent", "mae_real", "epsilon"],
            "models": {n: reports[n].to_dict() for n in names},
            "overall": {n: overall[n] for n in sorted(overall)},
        },
        indent=2,
        sort_keys=True,
    ) + "\n"
    return markdown, structured


def group_table_csv(report: GroupReport) -> str:
    """Machine-readable group rows: race, gender, mae_apparent, mae_real, epsilon."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["race", "gender", "mae_apparent", "mae_real", "epsilon"])
    for r in report.rows:
        w.writerow([r.race, r.gender] + ["" if v is None else repr(float(v))
                                         for v in (r.mae_apparent, r.mae_real, r.epsilon_mean)])
    return buf.getvalue()
