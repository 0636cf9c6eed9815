"""Provider baseline hydrocodone-share profiling and classification."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from datetime import date
from fractions import Fraction

from .claims_core import (
    ClaimsStore,
    MedicalClaim,
    OpioidIngredient,
    PharmacyClaim,
    ProviderType,
    days_between,
    index_anchor_dates,
)


class ProfileError(Exception):
    pass


class InvalidThresholds(ProfileError):
    pass


class EmptyProfileSet(ProfileError):
    pass


# Ten study procedures and their CPT codes.
DEFAULT_PROCEDURES: dict[str, frozenset[str]] = {
    "carpal_tunnel_release": frozenset({"64721", "29848"}),
    "laparoscopic_cholecystectomy": frozenset({"47562", "47563", "47564"}),
    "open_cholecystectomy": frozenset({"47600", "47605", "47610"}),
    "inguinal_hernia_repair": frozenset({"49505", "49507", "49520", "49521", "49525"}),
    "knee_arthroscopy": frozenset({"29881", "29880", "29877", "29875", "29876", "29870"}),
    "total_knee_replacement": frozenset({"27446", "27447", "27486", "27487"}),
    "total_hip_replacement": frozenset({"27130", "27132"}),
    "laparoscopic_appendectomy": frozenset({"44970"}),
    "open_appendectomy": frozenset({"44950", "44960"}),
    "breast_excision": frozenset({"19301", "19302", "19120"}),
}

# Hip-fracture diagnosis range 820.00-820.9, dot-free prefix.
HIP_FRACTURE_DX_PREFIX = "820"

OPIOID_FILL_WINDOW_DAYS = 7


@dataclass(frozen=True)
class ProcedureCodeSet:
    procedures: dict[str, frozenset[str]] = field(
        default_factory=lambda: dict(DEFAULT_PROCEDURES)
    )
    hip_fracture_dx_prefix: str = HIP_FRACTURE_DX_PREFIX

    def __post_init__(self):
        seen: set[str] = set()
        for name, codes in self.procedures.items():
            overlap = seen & codes
            if overlap:
                raise ValueError(f"CPT codes {sorted(overlap)} appear in multiple procedures")
            seen |= codes

    def procedure_of(self, cpt: str) -> str | None:
        for name, codes in self.procedures.items():
            if cpt in codes:
                return name
        return None

    @classmethod
    def from_file(cls, path: str) -> "ProcedureCodeSet":
        procs: dict[str, set[str]] = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            if [h.strip() for h in header] != ["procedure_name", "cpt"]:
                raise ValueError(f"{path}: expected header procedure_name,cpt")
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                procs.setdefault(row[0].strip(), set()).add(row[1].strip())
        return cls({name: frozenset(codes) for name, codes in procs.items()})


def write_procedures_csv(path: str, codes: ProcedureCodeSet | None = None) -> None:
    codes = codes or ProcedureCodeSet()
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["procedure_name", "cpt"])
        for name in sorted(codes.procedures):
            for cpt in sorted(codes.procedures[name]):
                w.writerow([name, cpt])


class ProviderClass(str, enum.Enum):
    PRESCRIBER = "Prescriber"
    NON_PRESCRIBER = "NonPrescriber"
    INDETERMINATE = "Indeterminate"
    INSUFFICIENT = "Insufficient"


@dataclass(frozen=True)
class IndexEvent:
    person_id: str
    provider_id: str
    provider_type: ProviderType
    procedure_name: str
    claim: MedicalClaim
    early_anchor: date
    late_anchor: date
    first_opioid_fills: tuple[PharmacyClaim, ...]

    @property
    def first_fill_date(self) -> date:
        return self.first_opioid_fills[0].fill_date


@dataclass(frozen=True)
class ProviderProfile:
    provider_id: str
    provider_type: ProviderType
    n_events: int
    n_hydrocodone: int
    hydrocodone_share: Fraction
    provider_class: ProviderClass


def qualifying_fills_in_window(
    store: ClaimsStore, person_id: str, anchor: date,
    lo: int = 0, hi: int = OPIOID_FILL_WINDOW_DAYS,
) -> list[PharmacyClaim]:
    """Oral-analgesic opioid fills with lo <= fill_date - anchor <= hi."""
    out = []
    for fill in store.pharmacy.get(person_id, ()):
        entry = store.catalog.get(fill.drug_code)
        if entry is None or not entry.is_oral_analgesic_opioid:
            continue
        offset = days_between(anchor, fill.fill_date)
        if lo <= offset <= hi:
            out.append(fill)
    return out


def eligible_procedure_claims(
    store: ClaimsStore, person_id: str, codes: ProcedureCodeSet
) -> list[tuple[str, MedicalClaim]]:
    """(procedure_name, claim) pairs for this person's eligible CPTs.

    Total-hip-replacement claims carrying any hip-fracture diagnosis are
    dropped here.
    """
    out = []
    for claim in store.medical.get(person_id, ()):
        name = codes.procedure_of(claim.cpt_code)
        if name is None:
            continue
        if name == "total_hip_replacement" and any(
            dx.startswith(codes.hip_fracture_dx_prefix) for dx in claim.diagnoses
        ):
            continue
        out.append((name, claim))
    return out


def _event_from_claim(
    store: ClaimsStore, name: str, claim: MedicalClaim
) -> IndexEvent | None:
    early, late = index_anchor_dates(claim)
    fills = qualifying_fills_in_window(store, claim.person_id, late)
    if not fills:
        return None
    earliest = min(f.fill_date for f in fills)
    first = tuple(f for f in fills if f.fill_date == earliest)
    return IndexEvent(
        claim.person_id, claim.provider_id, claim.provider_type,
        name, claim, early, late, first,
    )


def find_index_events(
    store: ClaimsStore,
    codes: ProcedureCodeSet,
    window_start: date,
    window_end: date,
) -> list[IndexEvent]:
    """Procedure claims in the window with a qualifying 7-day opioid fill.

    One event per (person, late_anchor, provider); duplicate billings of
    the same triple collapse to the lowest claim_id.
    """
    events: dict[tuple[str, date, str], IndexEvent] = {}
    for person_id in sorted(store.medical):
        for name, claim in eligible_procedure_claims(store, person_id, codes):
            _, late = index_anchor_dates(claim)
            if not (window_start <= late <= window_end):
                continue
            event = _event_from_claim(store, name, claim)
            if event is None:
                continue
            key = (person_id, late, claim.provider_id)
            prior = events.get(key)
            if prior is None or claim.claim_id < prior.claim.claim_id:
                events[key] = event
    return [events[k] for k in sorted(events)]


def event_is_hydrocodone(event: IndexEvent, store: ClaimsStore) -> bool:
    """True when any fill on the earliest qualifying fill date is hydrocodone."""
    return any(
        store.catalog[f.drug_code].opioid_ingredient is OpioidIngredient.HYDROCODONE
        for f in event.first_opioid_fills
    )


def classify_providers(
    events: list[IndexEvent],
    store: ClaimsStore,
    min_cases: int = 5,
    low: Fraction | float = Fraction(1, 4),
    high: Fraction | float = Fraction(3, 4),
) -> dict[str, ProviderProfile]:
    """Per-provider hydrocodone share and class.

    Threshold comparisons use exact rational arithmetic so boundary
    shares (exactly 0.75 / 0.25) classify per the >= / <= rules.
    """
    low = Fraction(low)
    high = Fraction(high)
    if not (0 <= low < high <= 1):
        raise InvalidThresholds(f"need 0 <= low < high <= 1, got low={low}, high={high}")
    if min_cases < 1:
        raise InvalidThresholds(f"min_cases must be >= 1, got {min_cases}")

    counts: dict[str, list[int]] = {}
    ptypes: dict[str, ProviderType] = {}
    for ev in events:
        n = counts.setdefault(ev.provider_id, [0, 0])
        n[0] += 1
        if event_is_hydrocodone(ev, store):
            n[1] += 1
        ptypes[ev.provider_id] = ev.provider_type

    profiles: dict[str, ProviderProfile] = {}
    for provider_id in sorted(counts):
        n_events, n_hydro = counts[provider_id]
        share = Fraction(n_hydro, n_events)
        if n_events < min_cases:
            cls = ProviderClass.INSUFFICIENT
        elif share >= high:
            cls = ProviderClass.PRESCRIBER
        elif share <= low:
            cls = ProviderClass.NON_PRESCRIBER
        else:
            cls = ProviderClass.INDETERMINATE
        profiles[provider_id] = ProviderProfile(
            provider_id, ptypes[provider_id], n_events, n_hydro, share, cls
        )
    return profiles


def _quantile_lower(sorted_vals: list, q: Fraction):
    """Lower-interpolation quantile: element at floor((n-1) * q)."""
    idx = int((len(sorted_vals) - 1) * q)
    return sorted_vals[idx]


def profile_summary(profiles: dict[str, ProviderProfile], min_cases: int = 5) -> dict:
    """Counts plus median/IQR of shares over providers with enough cases."""
    eligible = [p for p in profiles.values() if p.n_events >= min_cases]
    if not eligible:
        raise EmptyProfileSet("no provider has the minimum case count")
    shares = sorted(p.hydrocodone_share for p in eligible)
    return {
        "n_providers": len(eligible),
        "n_prescribers": sum(
            1 for p in eligible if p.provider_class is ProviderClass.PRESCRIBER
        ),
        "n_nonprescribers": sum(
            1 for p in eligible if p.provider_class is ProviderClass.NON_PRESCRIBER
        ),
        "median_share": float(_quantile_lower(shares, Fraction(1, 2))),
        "iqr": (
            float(_quantile_lower(shares, Fraction(1, 4))),
            float(_quantile_lower(shares, Fraction(3, 4))),
        ),
    }


def write_profiles_csv(path: str, profiles: dict[str, ProviderProfile]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["provider_id", "provider_type", "n_events", "n_hydrocodone", "share", "class"])
        for provider_id in sorted(profiles):
            p = profiles[provider_id]
            w.writerow([
                p.provider_id, p.provider_type.value, p.n_events, p.n_hydrocodone,
                f"{p.n_hydrocodone}/{p.n_events}", p.provider_class.value,
            ])


def read_profiles_csv(path: str) -> dict[str, ProviderProfile]:
    profiles = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            if not row:
                continue
            num, _, den = row[4].partition("/")
            profiles[row[0]] = ProviderProfile(
                row[0], ProviderType(row[1]), int(row[2]), int(row[3]),
                Fraction(int(num), int(den)), ProviderClass(row[5]),
            )
    return profiles
