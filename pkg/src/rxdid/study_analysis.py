"""DiD and pre-trend specifications, descriptive tables, trend series,
and report assembly."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from datetime import date, timedelta

import numpy as np

from .claims_core import ClaimsStore, StudyCalendar, days_between
from .cohort_builder import CohortRow, Exposure, Period
from .glm_engine import (
    BINOMIAL_LOGIT,
    GAMMA_LOG,
    FitResult,
    confidence_interval,
    fit_arrays,
    build_design,
    marginal_effect,
    wald_test,
)
from .measures import (
    COVARIATE_COLUMNS,
    ComorbidityMap,
    compute_covariates,
    compute_outcomes,
)


class AnalysisError(Exception):
    pass


class DegenerateDesign(AnalysisError):
    pass


class ZeroVariance(AnalysisError):
    pass


OUTCOME_FAMILIES = {
    "persistent_use_90_180": BINOMIAL_LOGIT,
    "initial_mme_7d": GAMMA_LOG,
    "any_refill_30d": BINOMIAL_LOGIT,
    "total_mme_30d": GAMMA_LOG,
}
OUTCOMES = list(OUTCOME_FAMILIES)
MME_OUTCOMES = {"initial_mme_7d", "total_mme_30d"}

SIGNIFICANCE_LEVEL = 0.05
DAYS_PER_YEAR = 365.25


def build_analysis_table(
    rows: list[CohortRow],
    store: ClaimsStore,
    cmap: ComorbidityMap,
    antidepressant_codes: frozenset[str] = frozenset(),
) -> dict:
    """Columnar analysis table: ids, design indicators, outcomes, covariates."""
    calendar = store.calendar
    table: dict = {name: [] for name in (
        ["person_id", "provider_id", "late_anchor", "exposed", "post"]
        + OUTCOMES + COVARIATE_COLUMNS
    )}
    for row in rows:
        outcomes = compute_outcomes(row, store)
        covariates = compute_covariates(row, store, cmap, antidepressant_codes)
        table["person_id"].append(row.person_id)
        table["provider_id"].append(row.provider_id)
        table["late_anchor"].append(row.index_event.late_anchor)
        table["exposed"].append(1.0 if row.exposure is Exposure.EXPOSED else 0.0)
        table["post"].append(1.0 if row.period is Period.POST else 0.0)
        table["persistent_use_90_180"].append(1.0 if outcomes.persistent_use_90_180 else 0.0)
        table["initial_mme_7d"].append(outcomes.initial_mme_7d)
        table["any_refill_30d"].append(1.0 if outcomes.any_refill_30d else 0.0)
        table["total_mme_30d"].append(outcomes.total_mme_30d)
        for name in COVARIATE_COLUMNS:
            table[name].append(covariates[name])
    for name in table:
        if name in ("person_id", "provider_id", "late_anchor"):
            table[name] = np.asarray(table[name], dtype=object)
        else:
            table[name] = np.asarray(table[name], dtype=float)
    table["_calendar"] = calendar
    return table


ANALYSIS_TABLE_COLUMNS = (
    ["person_id", "provider_id", "late_anchor", "exposed", "post"]
    + OUTCOMES + COVARIATE_COLUMNS
)


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def write_analysis_table(path: str, table: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(ANALYSIS_TABLE_COLUMNS)
        n = len(table["person_id"])
        for i in range(n):
            row = []
            for name in ANALYSIS_TABLE_COLUMNS:
                v = table[name][i]
                if name in ("person_id", "provider_id"):
                    row.append(v)
                elif name == "late_anchor":
                    row.append(v.isoformat())
                else:
                    row.append(_fmt(v))
            w.writerow(row)


def read_analysis_table(path: str, calendar: StudyCalendar) -> dict:
    cols: dict[str, list] = {name: [] for name in ANALYSIS_TABLE_COLUMNS}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ANALYSIS_TABLE_COLUMNS:
            raise ValueError(f"{path}: unexpected analysis table header")
        for row in reader:
            if not row:
                continue
            for name, v in zip(ANALYSIS_TABLE_COLUMNS, row):
                if name in ("person_id", "provider_id"):
                    cols[name].append(v)
                elif name == "late_anchor":
                    cols[name].append(date.fromisoformat(v))
                else:
                    cols[name].append(float(v))
    table: dict = {}
    for name, vals in cols.items():
        if name in ("person_id", "provider_id", "late_anchor"):
            table[name] = np.asarray(vals, dtype=object)
        else:
            table[name] = np.asarray(vals, dtype=float)
    table["_calendar"] = calendar
    return table


@dataclass(frozen=True)
class DidEstimate:
    outcome: str
    family: str
    interaction: float
    ci_low: float
    ci_high: float
    p_value: float
    significant: bool
    ame: float
    ame_ci_low: float
    ame_ci_high: float
    n_obs: int
    n_clusters: int
    dropped_columns: tuple[str, ...] = ()


def _check_cells(exposed: np.ndarray, post: np.ndarray) -> None:
    for e in (0.0, 1.0):
        for p in (0.0, 1.0):
            if not np.any((exposed == e) & (post == p)):
                raise DegenerateDesign(
                    f"empty exposure x period cell (exposed={int(e)}, post={int(p)})"
                )


def _fit_terms(table: dict, outcome: str, terms: list[str], drop_collinear: bool) -> FitResult:
    X, names = build_design(table, terms, intercept=True)
    y = table[outcome]
    return fit_arrays(
        X, y, OUTCOME_FAMILIES[outcome], names=names,
        cluster_ids=table["provider_id"], drop_collinear=drop_collinear,
    )


def run_did(
    table: dict,
    outcome: str,
    covariates: list[str] | None = None,
    drop_collinear: bool = True,
) -> DidEstimate:
    """Exposure x period interaction model with cluster-robust inference."""
    if covariates is None:
        covariates = COVARIATE_COLUMNS
    _check_cells(table["exposed"], table["post"])
    terms = ["exposed", "post", "exposed:post"] + list(covariates)
    result = _fit_terms(table, outcome, terms, drop_collinear)
    coef = result.coef("exposed:post")
    lo, hi = confidence_interval(result, "exposed:post")
    wald = wald_test(result, ["exposed:post"])
    ame = marginal_effect(result, "exposed:post")
    return DidEstimate(
        outcome=outcome,
        family=result.family,
        interaction=coef,
        ci_low=lo,
        ci_high=hi,
        p_value=wald.p_value,
        significant=wald.p_value < SIGNIFICANCE_LEVEL,
        ame=ame.effect,
        ame_ci_low=ame.ci_low,
        ame_ci_high=ame.ci_high,
        n_obs=result.n_obs,
        n_clusters=result.n_clusters,
        dropped_columns=tuple(result.dropped_columns),
    )


@dataclass(frozen=True)
class YearInteraction:
    coefficient: float
    ci_low: float
    ci_high: float
    p_value: float
    ame: float
    ame_ci_low: float
    ame_ci_high: float


@dataclass(frozen=True)
class PretrendResult:
    outcome: str
    family: str
    year2: YearInteraction
    year3: YearInteraction
    joint_statistic: float
    joint_df: int
    joint_p: float
    n_obs: int
    n_clusters: int
    dropped_columns: tuple[str, ...] = ()


def pre_year_index(late_anchor: date, calendar: StudyCalendar) -> int:
    """1-based pre-period year from fixed 365.25-day blocks, clamped to 1..3."""
    days = days_between(calendar.pre_start, late_anchor)
    return min(max(int(days // DAYS_PER_YEAR) + 1, 1), 3)


def run_pretrend(
    table: dict,
    outcome: str,
    covariates: list[str] | None = None,
    drop_collinear: bool = True,
) -> PretrendResult:
    """Exposure x pre-year interactions with a joint Wald test (df=2)."""
    if covariates is None:
        covariates = COVARIATE_COLUMNS
    calendar = table["_calendar"]
    pre_mask = table["post"] == 0.0
    if not np.any(pre_mask):
        raise DegenerateDesign("no pre-period rows for the pre-trend analysis")
    sub = {
        k: (v[pre_mask] if isinstance(v, np.ndarray) else v)
        for k, v in table.items()
    }
    years = np.array([
        pre_year_index(d, calendar) for d in sub["late_anchor"]
    ])
    sub["year2"] = (years == 2).astype(float)
    sub["year3"] = (years == 3).astype(float)
    if not np.any(sub["exposed"] == 1.0) or not np.any(sub["exposed"] == 0.0):
        raise DegenerateDesign("pre-period rows must include both exposure groups")
    for name in ("year2", "year3"):
        if not np.any(sub[name] == 1.0):
            raise DegenerateDesign(f"no pre-period rows in {name}")

    terms = [
        "exposed", "year2", "year3", "exposed:year2", "exposed:year3",
    ] + list(covariates)
    result = _fit_terms(sub, outcome, terms, drop_collinear)

    def year_stats(term: str) -> YearInteraction:
        lo, hi = confidence_interval(result, term)
        w = wald_test(result, [term])
        a = marginal_effect(result, term)
        return YearInteraction(
            result.coef(term), lo, hi, w.p_value, a.effect, a.ci_low, a.ci_high
        )

    joint = wald_test(result, ["exposed:year2", "exposed:year3"])
    return PretrendResult(
        outcome=outcome,
        family=result.family,
        year2=year_stats("exposed:year2"),
        year3=year_stats("exposed:year3"),
        joint_statistic=joint.statistic,
        joint_df=joint.df,
        joint_p=joint.p_value,
        n_obs=result.n_obs,
        n_clusters=result.n_clusters,
        dropped_columns=tuple(result.dropped_columns),
    )


@dataclass(frozen=True)
class TrendBin:
    bin_start: date
    n: int
    mean: float


def _bin_starts(start: date, end: date, bin_days: int) -> list[date]:
    total = days_between(start, end) + 1
    n_full = max(total // bin_days, 1)
    return [start + timedelta(days=i * bin_days) for i in range(n_full)]


def trend_series(
    table: dict, outcome: str, bin_days: int = 91
) -> dict[str, list[TrendBin]]:
    """Per-group bin means; the final partial bin merges into the last full bin."""
    calendar = table["_calendar"]
    out: dict[str, list[TrendBin]] = {}
    for group, mask in (
        ("Exposed", table["exposed"] == 1.0),
        ("Unexposed", table["exposed"] == 0.0),
    ):
        bins: list[TrendBin] = []
        for (start, end) in (
            (calendar.pre_start, calendar.pre_end),
            (calendar.post_start, calendar.post_end),
        ):
            starts = _bin_starts(start, end, bin_days)
            sums = [0.0] * len(starts)
            counts = [0] * len(starts)
            for i in np.flatnonzero(mask):
                d = table["late_anchor"][i]
                if not (start <= d <= end):
                    continue
                idx = min(days_between(start, d) // bin_days, len(starts) - 1)
                sums[idx] += table[outcome][i]
                counts[idx] += 1
            for s, total, n in zip(starts, sums, counts):
                bins.append(TrendBin(s, n, total / n if n else float("nan")))
        out[group] = bins
    return out


def write_trends_csv(path: str, series: dict[str, list[TrendBin]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["group", "bin_start", "n", "mean"])
        for group in ("Exposed", "Unexposed"):
            for b in series[group]:
                w.writerow([
                    group, b.bin_start.isoformat(), b.n,
                    "" if math.isnan(b.mean) else repr(b.mean),
                ])


def std_diff_continuous(m1: float, s1: float, m2: float, s2: float) -> float:
    denom = math.sqrt((s1 * s1 + s2 * s2) / 2.0)
    if denom == 0.0:
        if m1 == m2:
            return 0.0
        raise ZeroVariance("both groups constant with unequal means")
    return (m1 - m2) / denom


def std_diff_proportion(p1: float, p2: float) -> float:
    denom = math.sqrt((p1 * (1.0 - p1) + p2 * (1.0 - p2)) / 2.0)
    if denom == 0.0:
        if p1 == p2:
            return 0.0
        raise ZeroVariance("degenerate proportions with unequal values")
    return (p1 - p2) / denom


def table_one(table: dict) -> list[dict]:
    """Descriptive comparison of exposed vs unexposed with standardized
    differences; age also reported as median (IQR)."""
    exp_mask = table["exposed"] == 1.0
    unexp_mask = table["exposed"] == 0.0
    if not np.any(exp_mask) or not np.any(unexp_mask):
        raise DegenerateDesign("table_one requires both exposure groups")
    rows = []

    def quartiles(v: np.ndarray) -> tuple[float, float, float]:
        return (
            float(np.percentile(v, 50)),
            float(np.percentile(v, 25)),
            float(np.percentile(v, 75)),
        )

    age_e = table["age"][exp_mask]
    age_u = table["age"][unexp_mask]
    d = std_diff_continuous(
        float(age_e.mean()), float(age_e.std(ddof=1)),
        float(age_u.mean()), float(age_u.std(ddof=1)),
    )
    me, q1e, q3e = quartiles(age_e)
    mu_, q1u, q3u = quartiles(age_u)
    rows.append({
        "variable": "age",
        "kind": "continuous",
        "exposed": f"{me:.1f} ({q1e:.1f}-{q3e:.1f})",
        "unexposed": f"{mu_:.1f} ({q1u:.1f}-{q3u:.1f})",
        "std_diff": d,
    })
    for name in COVARIATE_COLUMNS:
        if name == "age":
            continue
        p1 = float(table[name][exp_mask].mean())
        p2 = float(table[name][unexp_mask].mean())
        try:
            d = std_diff_proportion(p1, p2)
            flag = ""
        except ZeroVariance:
            d = float("nan")
            flag = "zero_variance"
        rows.append({
            "variable": name,
            "kind": "proportion",
            "exposed": f"{int(round(p1 * exp_mask.sum()))} ({100 * p1:.1f})",
            "unexposed": f"{int(round(p2 * unexp_mask.sum()))} ({100 * p2:.1f})",
            "std_diff": d,
            **({"flag": flag} if flag else {}),
        })
    return rows


def write_table_one_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["variable", "kind", "exposed", "unexposed", "std_diff"])
        for r in rows:
            d = r["std_diff"]
            w.writerow([
                r["variable"], r["kind"], r["exposed"], r["unexposed"],
                "" if isinstance(d, float) and math.isnan(d) else repr(float(d)),
            ])


# --- report rendering -------------------------------------------------------

def format_effect(value: float, ci_low: float, ci_high: float, unit: str = "") -> str:
    suffix = f" {unit}" if unit else ""
    return f"{value:.1f}{suffix} (95% CI {ci_low:.1f}, {ci_high:.1f})"


def format_p(p: float) -> str:
    if p < 0.001:
        return "P<0.001"
    return f"P={p:.3g}"


def render_pretrend_summary(outcome: str, entry: dict) -> list[str]:
    """Human-readable pre-trend lines for one outcome.

    MME outcomes render the response-scale (average marginal effect)
    year interactions; binary outcomes render link-scale coefficients.
    """
    unit = "MME" if outcome in MME_OUTCOMES else ""
    lines = [f"joint interaction test: {format_p(entry['joint_p'])}"]
    for year in ("year3", "year2"):
        y = entry[year]
        if unit:
            text = format_effect(y["ame"], y["ame_ci_low"], y["ame_ci_high"], unit)
        else:
            text = format_effect(y["coefficient"], y["ci_low"], y["ci_high"])
        lines.append(
            f"exposure x {year} (vs year 1): {text}, {format_p(y['p_value'])}"
        )
    return lines


def assemble_report(
    run_id: str,
    audit: dict | None = None,
    profile_summary: dict | None = None,
    did: dict[str, DidEstimate] | None = None,
    pretrend: dict[str, PretrendResult] | None = None,
) -> dict:
    """Merge available pieces into the report structure.

    The pretrend section carries rendered summary lines alongside the raw
    numbers so report text is reproducible from the estimates alone.
    """
    report: dict = {"run_id": run_id}
    if audit is not None:
        report["exclusions"] = {k: v for k, v in audit.items()}
    if profile_summary is not None:
        report["profile_summary"] = profile_summary
    if did is not None:
        report["did"] = {name: asdict(est) for name, est in sorted(did.items())}
    if pretrend is not None:
        section = {}
        for name, res in sorted(pretrend.items()):
            entry = asdict(res)
            entry["summary"] = render_pretrend_summary(name, entry)
            section[name] = entry
        report["pretrend"] = section
    return report


def render_report_from_estimates(estimates: dict) -> dict:
    """Rebuild the rendered report sections from a raw estimates dict
    (e.g. a canned estimates file); numbers pass through verbatim."""
    report = dict(estimates)
    if "pretrend" in report:
        section = {}
        for name, entry in report["pretrend"].items():
            entry = dict(entry)
            entry["summary"] = render_pretrend_summary(name, entry)
            section[name] = entry
        report["pretrend"] = section
    return report


def write_report_json(path: str, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
