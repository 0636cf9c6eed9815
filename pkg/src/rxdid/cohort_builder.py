"""Ordered eligibility rules producing the analyzable cohort with an
exclusion audit trail."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from datetime import date, timedelta

from .claims_core import (
    ClaimsStore,
    MedicalClaim,
    ProviderType,
    Setting,
    Sex,
    StudyCalendar,
    days_between,
    index_anchor_dates,
)
from .prescriber_profile import (
    IndexEvent,
    ProcedureCodeSet,
    ProviderClass,
    ProviderProfile,
    eligible_procedure_claims,
    qualifying_fills_in_window,
    _event_from_claim,
)

MIN_AGE = 18
PRIOR_ENROLLMENT_DAYS = 90
FOLLOWUP_ENROLLMENT_DAYS = 180
NAIVE_LOOKBACK_DAYS = 90


class ExclusionReason(str, enum.Enum):
    NO_ELIGIBLE_PROCEDURE = "NoEligibleProcedure"
    MULTIPLE_SAME_DAY = "MultipleSameDay"
    UNDER_AGE = "UnderAge"
    NOT_FIRST_PROCEDURE = "NotFirstProcedure"
    PROVIDER_UNCLASSIFIED = "ProviderUnclassified"
    INSUFFICIENT_PRIOR_ENROLLMENT = "InsufficientPriorEnrollment"
    INSUFFICIENT_FOLLOWUP_ENROLLMENT = "InsufficientFollowupEnrollment"
    NO_OPIOID_FILL_WITHIN_7_DAYS = "NoOpioidFillWithin7Days"
    NOT_OPIOID_NAIVE = "NotOpioidNaive"
    WASHOUT_PERIOD = "WashoutPeriod"
    OUTSIDE_STUDY_WINDOW = "OutsideStudyWindow"


class Exposure(str, enum.Enum):
    EXPOSED = "Exposed"
    UNEXPOSED = "Unexposed"


class Period(str, enum.Enum):
    PRE = "Pre"
    POST = "Post"
    WASHOUT = "Washout"
    OUTSIDE = "Outside"


class LosCategory(str, enum.Enum):
    ZERO = "Zero"
    ONE_TO_TWO = "OneToTwo"
    THREE_PLUS = "ThreePlus"


def assign_period(late_anchor: date, calendar: StudyCalendar) -> Period:
    if calendar.pre_start <= late_anchor <= calendar.pre_end:
        return Period.PRE
    if calendar.post_start <= late_anchor <= calendar.post_end:
        return Period.POST
    if calendar.pre_end < late_anchor < calendar.post_start:
        return Period.WASHOUT
    return Period.OUTSIDE


def los_category(claim: MedicalClaim) -> LosCategory:
    if claim.setting is Setting.AMBULATORY or claim.discharge_date is None:
        return LosCategory.ZERO
    start = claim.admission_date or claim.service_date
    los = days_between(start, claim.discharge_date)
    if los <= 0:
        return LosCategory.ZERO
    if los <= 2:
        return LosCategory.ONE_TO_TWO
    return LosCategory.THREE_PLUS


@dataclass(frozen=True)
class CohortRow:
    person_id: str
    provider_id: str
    exposure: Exposure
    period: Period
    index_event: IndexEvent
    age_years: int
    sex: Sex
    procedure_name: str
    setting: Setting
    los_category: LosCategory
    provider_type: ProviderType


def _span_covering(store: ClaimsStore, person_id: str, start: date, end: date) -> bool:
    """One merged enrollment span must fully cover [start, end]."""
    for span in store.enrollment.get(person_id, ()):
        if span.start <= start and span.end >= end:
            return True
    return False


def _evaluate_person(
    person_id: str,
    store: ClaimsStore,
    profiles: dict[str, ProviderProfile],
    calendar: StudyCalendar,
    codes: ProcedureCodeSet,
) -> CohortRow | ExclusionReason:
    eligible = eligible_procedure_claims(store, person_id, codes)
    if not eligible:
        return ExclusionReason.NO_ELIGIBLE_PROCEDURE

    # Window membership over the union of pre and post windows.
    in_window = []
    saw_washout = False
    for name, claim in eligible:
        _, late = index_anchor_dates(claim)
        period = assign_period(late, calendar)
        if period in (Period.PRE, Period.POST):
            in_window.append((late, name, claim, period))
        elif period is Period.WASHOUT:
            saw_washout = True
    if not in_window:
        return ExclusionReason.WASHOUT_PERIOD if saw_washout else ExclusionReason.OUTSIDE_STUDY_WINDOW

    # First procedure by earliest late_anchor; ties on that day among
    # eligible procedures trigger the same-day exclusion.
    in_window.sort(key=lambda t: (t[0], t[2].claim_id))
    first_day = in_window[0][0]
    same_day = [t for t in in_window if t[0] == first_day]
    # Exact rebills (same provider + CPT) collapse; anything else on the
    # first day counts as a second eligible procedure.
    distinct = {(t[2].provider_id, t[2].cpt_code) for t in same_day}
    if len(distinct) > 1:
        return ExclusionReason.MULTIPLE_SAME_DAY
    late_anchor, procedure_name, claim, period = same_day[0]
    early_anchor, _ = index_anchor_dates(claim)

    demo = store.demographics.get(person_id)
    if demo is None:
        # Age unverifiable without registration data; fails the age rule.
        return ExclusionReason.UNDER_AGE
    age = late_anchor.year - demo.birth_year
    if age < MIN_AGE:
        return ExclusionReason.UNDER_AGE

    profile = profiles.get(claim.provider_id)
    if profile is None or profile.provider_class not in (
        ProviderClass.PRESCRIBER, ProviderClass.NON_PRESCRIBER
    ):
        return ExclusionReason.PROVIDER_UNCLASSIFIED

    if not _span_covering(
        store, person_id,
        early_anchor - timedelta(days=PRIOR_ENROLLMENT_DAYS), early_anchor,
    ):
        return ExclusionReason.INSUFFICIENT_PRIOR_ENROLLMENT

    if not _span_covering(
        store, person_id,
        late_anchor, late_anchor + timedelta(days=FOLLOWUP_ENROLLMENT_DAYS),
    ):
        return ExclusionReason.INSUFFICIENT_FOLLOWUP_ENROLLMENT

    event = _event_from_claim(store, procedure_name, claim)
    if event is None:
        return ExclusionReason.NO_OPIOID_FILL_WITHIN_7_DAYS

    # Opioid-naive: no oral-analgesic fill in days -90..-1 before early_anchor.
    if qualifying_fills_in_window(
        store, person_id, early_anchor, lo=-NAIVE_LOOKBACK_DAYS, hi=-1
    ):
        return ExclusionReason.NOT_OPIOID_NAIVE

    exposure = (
        Exposure.EXPOSED
        if profile.provider_class is ProviderClass.PRESCRIBER
        else Exposure.UNEXPOSED
    )
    return CohortRow(
        person_id=person_id,
        provider_id=claim.provider_id,
        exposure=exposure,
        period=period,
        index_event=event,
        age_years=age,
        sex=demo.sex,
        procedure_name=procedure_name,
        setting=claim.setting,
        los_category=los_category(claim),
        provider_type=claim.provider_type,
    )


def build_cohort(
    store: ClaimsStore,
    profiles: dict[str, ProviderProfile],
    calendar: StudyCalendar,
    codes: ProcedureCodeSet,
) -> tuple[list[CohortRow], dict[ExclusionReason, int]]:
    """Evaluate every person with a medical claim against the ordered rules.

    Returns included rows (sorted by person_id) and the audit histogram;
    |included| + sum(audit) equals the candidate person count.
    """
    rows: list[CohortRow] = []
    audit: dict[ExclusionReason, int] = {r: 0 for r in ExclusionReason}
    for person_id in store.persons_with_medical_claims():
        result = _evaluate_person(person_id, store, profiles, calendar, codes)
        if isinstance(result, CohortRow):
            rows.append(result)
        else:
            audit[result] += 1
    return rows, audit


COHORT_COLUMNS = [
    "person_id", "provider_id", "exposure", "period", "index_claim_id",
    "early_anchor", "late_anchor", "age_years", "sex", "procedure_name",
    "setting", "los_category", "provider_type",
]


def write_cohort_csv(path: str, rows: list[CohortRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(COHORT_COLUMNS)
        for r in rows:
            w.writerow([
                r.person_id, r.provider_id, r.exposure.value, r.period.value,
                r.index_event.claim.claim_id,
                r.index_event.early_anchor.isoformat(),
                r.index_event.late_anchor.isoformat(),
                r.age_years, r.sex.value, r.procedure_name,
                r.setting.value, r.los_category.value, r.provider_type.value,
            ])


def write_exclusions_csv(path: str, audit: dict[ExclusionReason, int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["reason", "count"])
        for reason in ExclusionReason:
            w.writerow([reason.value, audit.get(reason, 0)])
