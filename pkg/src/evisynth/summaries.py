"""Posterior reporting: medians, credible intervals, trend probabilities,
diagnosis-target flags, and density-strip plot data.

Aggregation discipline: every margin statistic is computed from per-draw
sums of cell values (never from summed summaries), and England rows are the
per-draw sum of the London and outside-London aggregates, so additive
consistency holds exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels as K
from .errors import DomainError, ShapeError
from .strata import EXPOSURE_ALIASES, Frame

_I64 = np.int64

# reporting families for the exposure x region table (paper-shaped output);
# the residual lowest-risk group reports under other-ethnicity heterosexuals
TABLE1_FAMILIES = (
    ("MSM", ("MSM-clinic", "MSM-nonclinic")),
    ("PWID", ("PWID-current", "PWID-ex")),
    ("BAhet", ("BAhet-clinic", "BAhet-nonclinic")),
    ("OTHhet", ("OTHhet-clinic", "OTHhet-nonclinic", "lowest-risk")),
    ("all-het", EXPOSURE_ALIASES["all-het"]),
    ("Total", None),  # None = all groups
)

OUTCOMES = ("undiag_count", "undiag_prev_per_100k", "plwh", "prop_diag")


def summarize(draws: np.ndarray) -> tuple[float, float, float]:
    """(median, 2.5%, 97.5%) empirical percentiles, linear (type-7)
    interpolation between order statistics."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 1 or len(draws) < 100:
        raise DomainError(f"summarize needs >= 100 draws, got {draws.shape}")
    med, lo, hi = np.percentile(draws, [50.0, 2.5, 97.5], method="linear")
    return float(med), float(lo), float(hi)


def format_estimate(median: float, lo: float, hi: float, decimals: int = 0) -> str:
    """Display form: median followed by the interval, thousands-separated."""
    if decimals == 0:
        return f"{round(median):,} ({round(lo):,} - {round(hi):,})"
    return (f"{median:,.{decimals}f} ({lo:,.{decimals}f} - {hi:,.{decimals}f})")


def pr_change(draws_t0: np.ndarray, draws_t1: np.ndarray) -> tuple[float, float]:
    """(p_decrease, p_increase) over draw-aligned vectors; ties split evenly."""
    a = np.asarray(draws_t0, dtype=float)
    b = np.asarray(draws_t1, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("pr_change needs equal-length draw-aligned vectors")
    n = len(a)
    ties = float(np.count_nonzero(b == a))
    dec = float(np.count_nonzero(b < a))
    inc = float(np.count_nonzero(b > a))
    return (dec + 0.5 * ties) / n, (inc + 0.5 * ties) / n


def target_flags(prop_diag_draws: np.ndarray, threshold: float = 0.90
                 ) -> tuple[bool, float]:
    """(median >= threshold, posterior probability of >= threshold)."""
    draws = np.asarray(prop_diag_draws, dtype=float)
    med = float(np.percentile(draws, 50.0, method="linear"))
    prob = float(np.mean(draws >= threshold))
    return med >= threshold, prob


def density_strip(draws: np.ndarray, grid: int = 201) -> np.ndarray:
    """(grid, 2) array of (value, density / max density) from a Gaussian KDE;
    degenerate draws produce a single full-intensity spike row."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 1 or len(draws) < 500:
        raise DomainError(f"density_strip needs >= 500 draws, got {draws.shape}")
    sd = float(draws.std(ddof=1))
    if sd == 0.0:
        return np.array([[float(draws[0]), 1.0]])
    iqr = float(np.subtract(*np.percentile(draws, [75, 25])))
    h = 0.9 * min(sd, iqr / 1.34 if iqr > 0 else sd) * len(draws) ** (-0.2)
    xs = np.linspace(draws.min() - 3 * h, draws.max() + 3 * h, grid)
    z = (xs[:, None] - draws[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1)
    dens /= dens.max()
    return np.column_stack([xs, dens])


# ---------------------------------------------------------------------------
# per-draw margin aggregation

@dataclass
class MarginSet:
    """Compiled (family, age, region, year) margins over the dense state
    arrays; age is 'ALL' for age-aggregated rows."""

    labels: list[tuple]       # (family, age_label, region_label, year)
    idx: np.ndarray
    indptr: np.ndarray
    frame: Frame

    @classmethod
    def build(cls, frame: Frame, families, regions=None, years=None,
              by_age: bool = False) -> "MarginSet":
        c = frame.config
        regions = regions if regions is not None else list(c.regions)
        years = years if years is not None else list(c.years)
        age_sets = ([(a, (a,)) for a in c.ages] if by_age
                    else [("ALL", tuple(c.ages))])
        labels, parts = [], []
        for fam_label, groups in families:
            gidx = (range(len(c.exposures)) if groups is None else
                    [c.exposures.index(g) for g in groups if g in c.exposures])
            for age_label, age_list in age_sets:
                for region in regions:
                    ri = c.regions.index(region)
                    for year in years:
                        ti = c.years.index(year)
                        flats = []
                        for g in gidx:
                            for a_label in age_list:
                                a = c.ages.index(a_label)
                                for s, gender in enumerate(c.genders):
                                    if (c.exposures[g].startswith("MSM")
                                            and gender != "male"):
                                        continue
                                    flats.append(frame.dense_flat(g, a, s, ri, ti))
                        labels.append((fam_label, age_label, region, year))
                        parts.append(np.asarray(flats, dtype=_I64))
        idx = np.concatenate(parts) if parts else np.empty(0, dtype=_I64)
        indptr = np.zeros(len(parts) + 1, dtype=_I64)
        if parts:
            indptr[1:] = np.cumsum([len(p) for p in parts])
        return cls(labels=labels, idx=idx, indptr=indptr, frame=frame)


def aggregate_draws(model, theta_draws: np.ndarray, margins: MarginSet
                    ) -> dict[str, np.ndarray]:
    """Per-draw margin sums of the four additive fields.

    Returns arrays of shape (n_draws, n_margins) for undiag, plwh, diag_n
    and rho_n; every downstream statistic derives from these per-draw sums.
    """
    n_draws = theta_draws.shape[0]
    n_marg = len(margins.labels)
    out = {k: np.empty((n_draws, n_marg))
           for k in ("undiag", "plwh", "diag_n", "rho_n")}
    buf = np.empty(n_marg)
    for i in range(n_draws):
        prod = model.products(theta_draws[i])
        for k in out:
            K.csr_gather_sum(prod.field(k), margins.idx, margins.indptr, buf)
            out[k][i] = buf
    return out


@dataclass
class MarginSeries:
    """Draw-aligned outcome series per (family, age, region-with-England, year)."""

    labels: list[tuple]                 # (family, age, region_label, year)
    series: dict[str, np.ndarray]       # outcome -> (n_draws, n_margins)

    def column(self, outcome: str, family: str, region: str, year: int,
               age: str = "ALL") -> np.ndarray:
        j = self.labels.index((family, age, region, year))
        return self.series[outcome][:, j]


def margin_series(model, theta_draws: np.ndarray, margins: MarginSet
                  ) -> MarginSeries:
    """Outcome series with England rows added as per-draw London+outside sums."""
    agg = aggregate_draws(model, theta_draws, margins)
    frame = margins.frame
    regions = list(frame.config.regions)
    labels = list(margins.labels)
    fields = {k: v for k, v in agg.items()}
    if len(regions) == 2:
        keys = sorted({(f, a, y) for f, a, _, y in labels},
                      key=lambda t: (str(t[0]), str(t[1]), t[2]))
        extra_labels = []
        extra = {k: [] for k in fields}
        for fam, age, year in keys:
            try:
                j0 = labels.index((fam, age, regions[0], year))
                j1 = labels.index((fam, age, regions[1], year))
            except ValueError:
                continue
            extra_labels.append((fam, age, "England", year))
            for k in fields:
                extra[k].append(fields[k][:, j0] + fields[k][:, j1])
        if extra_labels:
            labels = labels + extra_labels
            for k in fields:
                fields[k] = np.column_stack([fields[k]] + extra[k])
    series = {
        "undiag_count": fields["undiag"],
        "plwh": fields["plwh"],
        "undiag_prev_per_100k": _safe_div(fields["undiag"], fields["rho_n"]) * 1e5,
        "prop_diag": _safe_div(fields["diag_n"], fields["plwh"]),
    }
    return MarginSeries(labels=labels, series=series)


def _safe_div(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


# ---------------------------------------------------------------------------
# paper-shaped tables

@dataclass
class SummaryRow:
    margin: str
    age: str
    region: str
    year: int
    outcome: str
    median: float
    lo: float
    hi: float
    p_decrease: float
    p_increase: float


def build_long_summary(series: MarginSeries, first_year: int, last_year: int
                       ) -> list[SummaryRow]:
    rows = []
    triples = sorted({(f, a, r) for f, a, r, _ in series.labels},
                     key=lambda p: (str(p[0]), str(p[1]), str(p[2])))
    years = sorted({y for _, _, _, y in series.labels})
    for fam, age, region in triples:
        for outcome in OUTCOMES:
            v0 = series.column(outcome, fam, region, first_year, age)
            v1 = series.column(outcome, fam, region, last_year, age)
            p_dec, p_inc = pr_change(v0, v1)
            for year in years:
                med, lo, hi = summarize(
                    series.column(outcome, fam, region, year, age))
                rows.append(SummaryRow(margin=str(fam), age=str(age),
                                       region=str(region), year=year,
                                       outcome=outcome, median=med, lo=lo,
                                       hi=hi, p_decrease=p_dec,
                                       p_increase=p_inc))
    return rows


TABLE_COLUMNS = ("count_first_median", "count_first_lo", "count_first_hi",
                 "count_last_median", "count_last_lo", "count_last_hi",
                 "p_decrease",
                 "prev100k_first_median", "prev100k_first_lo", "prev100k_first_hi",
                 "prev100k_last_median", "prev100k_last_lo", "prev100k_last_hi")


def build_wide_table(series: MarginSeries, keys: list[tuple],
                     first_year: int, last_year: int) -> list[dict]:
    """One row per (family, age, region) key with the paper-shaped column
    structure: undiagnosed count (first and last year medians + CrIs),
    posterior probability of a decrease, and undiagnosed prevalence per
    100,000."""
    rows = []
    for fam, age, region in keys:
        c0 = series.column("undiag_count", fam, region, first_year, age)
        c1 = series.column("undiag_count", fam, region, last_year, age)
        r0 = series.column("undiag_prev_per_100k", fam, region, first_year, age)
        r1 = series.column("undiag_prev_per_100k", fam, region, last_year, age)
        p_dec, _ = pr_change(c0, c1)
        row = {"margin": str(fam), "age": str(age), "region": str(region)}
        for name, vals in zip(
                ("count_first", "count_last", "prev100k_first", "prev100k_last"),
                (c0, c1, r0, r1)):
            med, lo, hi = summarize(vals)
            row[f"{name}_median"] = med
            row[f"{name}_lo"] = lo
            row[f"{name}_hi"] = hi
        row["p_decrease"] = p_dec
        rows.append(row)
    return rows


def format_wide_table(rows: list[dict]) -> list[dict]:
    """Display variant: counts and per-100k rates rounded with separators."""
    out = []
    for row in rows:
        disp = {"margin": row["margin"], "age": row["age"],
                "region": row["region"]}
        for stem in ("count_first", "count_last", "prev100k_first", "prev100k_last"):
            disp[stem] = format_estimate(row[f"{stem}_median"], row[f"{stem}_lo"],
                                         row[f"{stem}_hi"])
        disp["p"] = f"{row['p_decrease']:.2f}"
        out.append(disp)
    return out


# ---------------------------------------------------------------------------
# deterministic writers

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path: Path, obj) -> None:
    Path(path).write_text(
        json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n",
        encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
