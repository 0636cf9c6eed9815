"""Study outcomes, MME conversion, and the covariate vector."""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .claims_core import (
    ClaimsStore,
    DrugCatalogEntry,
    PharmacyClaim,
    ProviderType,
    Sex,
    days_between,
)
from .cohort_builder import CohortRow, LosCategory

INITIAL_FILL_WINDOW = 7
REFILL_WINDOW = 30
PERSISTENCE_START = 90
PERSISTENCE_END = 180
COMORBIDITY_LOOKBACK = 180
ANTIDEPRESSANT_LOOKBACK = 90


class MeasureError(Exception):
    pass


class NotAnalgesicOpioid(MeasureError):
    pass


class MissingCatalogEntry(MeasureError):
    pass


class MissingDemographics(MeasureError):
    pass


@dataclass(frozen=True)
class OutcomeVector:
    persistent_use_90_180: bool
    initial_mme_7d: float
    any_refill_30d: bool
    total_mme_30d: float


def mme_of_fill(claim: PharmacyClaim, entry: DrugCatalogEntry) -> float:
    """Morphine milligram equivalents: strength x quantity x conversion factor."""
    if not entry.is_oral_analgesic_opioid:
        raise NotAnalgesicOpioid(entry.drug_code)
    return entry.strength_mg_per_unit * claim.quantity * entry.mme_factor


def _opioid_fills_relative(store: ClaimsStore, person_id: str, anchor, lo: int, hi: int):
    """(offset, fill, entry) for oral-analgesic fills with lo <= offset <= hi."""
    out = []
    for fill in store.pharmacy.get(person_id, ()):
        offset = days_between(anchor, fill.fill_date)
        if not (lo <= offset <= hi):
            continue
        entry = store.catalog.get(fill.drug_code)
        if entry is None:
            raise MissingCatalogEntry(fill.drug_code)
        if entry.is_oral_analgesic_opioid:
            out.append((offset, fill, entry))
    return out


def compute_outcomes(row: CohortRow, store: ClaimsStore) -> OutcomeVector:
    """The four outcomes, all windows anchored at the index late_anchor."""
    anchor = row.index_event.late_anchor
    fills = _opioid_fills_relative(store, row.person_id, anchor, 0, PERSISTENCE_END)

    window_7 = [t for t in fills if t[0] <= INITIAL_FILL_WINDOW]
    first_day = min(t[0] for t in window_7)
    initial_mme = sum(mme_of_fill(f, e) for d, f, e in window_7 if d == first_day)

    window_30 = [t for t in fills if t[0] <= REFILL_WINDOW]
    total_mme_30 = sum(mme_of_fill(f, e) for _, f, e in window_30)
    any_refill = any(d > first_day for d, _, _ in window_30)

    persistent = any(PERSISTENCE_START <= d <= PERSISTENCE_END for d, _, _ in fills)
    return OutcomeVector(persistent, initial_mme, any_refill, total_mme_30)


# Comorbidity conditions with ICD-9-CM prefixes from the standard
# administrative-data crosswalk. Shipped as editable configuration
# (comorbidity_map.csv); these are the defaults.
DEFAULT_COMORBIDITY_MAP: dict[str, tuple[str, ...]] = {
    "congestive_heart_failure": (
        "39891", "40201", "40211", "40291", "40401", "40403", "40411",
        "40413", "40491", "40493", "4254", "4255", "4256", "4257", "4258",
        "4259", "428",
    ),
    "cardiac_arrhythmia": (
        "4260", "42613", "4267", "4269", "42610", "42612", "4270", "4271",
        "4272", "4273", "4274", "4276", "4278", "4279", "7850", "99601",
        "99604", "V450", "V533",
    ),
    "cardiac_valve_disease": (
        "0932", "394", "395", "396", "397", "424", "7463", "7464", "7465",
        "7466", "V422", "V433",
    ),
    "peripheral_vascular_disorders": (
        "0930", "4373", "440", "441", "4431", "4432", "4438", "4439",
        "4471", "5571", "5579", "V434",
    ),
    "hypertension_uncomplicated": ("401",),
    "hypertension_complicated": ("402", "403", "404", "405"),
    "other_neurological_disorders": (
        "3319", "3320", "3321", "3334", "3335", "33392", "334", "335",
        "3362", "340", "341", "345", "3481", "3483", "7803", "7843",
    ),
    "chronic_pulmonary_disease": (
        "4168", "4169", "490", "491", "492", "493", "494", "495", "496",
        "500", "501", "502", "503", "504", "505", "5064", "5081", "5088",
    ),
    "diabetes_uncomplicated": ("2500", "2501", "2502", "2503"),
    "diabetes_complicated": ("2504", "2505", "2506", "2507", "2508", "2509"),
    "hypothyroidism": ("2409", "243", "244", "2461", "2468"),
    "renal_failure": (
        "40301", "40311", "40391", "40402", "40412", "40492", "585", "586",
        "5880", "V420", "V451", "V56",
    ),
    "liver_disease": (
        "07022", "07023", "07032", "07033", "07044", "07054", "0706",
        "0709", "4560", "4561", "4562", "570", "571", "5722", "5723",
        "5724", "5728", "5733", "5734", "5738", "5739", "V427",
    ),
    "solid_tumor_without_metastasis": tuple(
        str(c) for c in list(range(140, 173)) + list(range(174, 196))
    ),
    "rheumatoid_arthritis": (
        "446", "7010", "7100", "7101", "7102", "7103", "7104", "7108",
        "7109", "7112", "714", "7193", "720", "725", "7285", "72889",
        "72930",
    ),
    "coagulopathy": ("286", "2871", "2873", "2874", "2875"),
    "obesity": ("2780",),
    "fluid_electrolyte_disorders": ("2536", "276"),
    "deficiency_anemia": ("2801", "2808", "2809", "281"),
    "depression": ("2962", "2963", "2965", "3004", "309", "311"),
}


@dataclass(frozen=True)
class ComorbidityMap:
    conditions: dict[str, tuple[str, ...]]

    @classmethod
    def default(cls) -> "ComorbidityMap":
        return cls(dict(DEFAULT_COMORBIDITY_MAP))

    @classmethod
    def from_file(cls, path: str) -> "ComorbidityMap":
        conditions: dict[str, list[str]] = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            if [h.strip() for h in header] != ["condition", "icd9_prefix"]:
                raise ValueError(f"{path}: expected header condition,icd9_prefix")
            for row in reader:
                if not row or all(not c.strip() for c in row):
                    continue
                conditions.setdefault(row[0].strip(), []).append(
                    row[1].replace(".", "").strip().upper()
                )
        return cls({k: tuple(v) for k, v in conditions.items()})

    def matches(self, condition: str, dx: str) -> bool:
        return condition in self.conditions_for(dx)

    def conditions_for(self, dx: str) -> frozenset[str]:
        """All conditions whose prefix list matches this normalized code."""
        index = getattr(self, "_index", None)
        if index is None:
            index: dict[str, set[str]] = {}
            lengths = set()
            for condition, prefixes in self.conditions.items():
                for p in prefixes:
                    index.setdefault(p, set()).add(condition)
                    lengths.add(len(p))
            object.__setattr__(self, "_index", index)
            object.__setattr__(self, "_prefix_lengths", sorted(lengths))
        matched: set[str] = set()
        for ln in self._prefix_lengths:
            if ln > len(dx):
                break
            matched |= index.get(dx[:ln], set())
        return frozenset(matched)


def write_comorbidity_map_csv(path: str, cmap: ComorbidityMap | None = None) -> None:
    cmap = cmap or ComorbidityMap.default()
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["condition", "icd9_prefix"])
        for condition in cmap.conditions:
            for prefix in cmap.conditions[condition]:
                w.writerow([condition, prefix])


COMORBIDITY_ORDER = list(DEFAULT_COMORBIDITY_MAP)

# Procedure indicators; laparoscopic cholecystectomy is the reference.
PROCEDURE_REFERENCE = "laparoscopic_cholecystectomy"
PROCEDURE_ORDER = [
    "carpal_tunnel_release",
    "open_cholecystectomy",
    "inguinal_hernia_repair",
    "knee_arthroscopy",
    "total_knee_replacement",
    "total_hip_replacement",
    "laparoscopic_appendectomy",
    "open_appendectomy",
    "breast_excision",
]

COVARIATE_COLUMNS = (
    ["age", "sex_female", "provider_group_practice", "los_1_2", "los_3plus"]
    + [f"proc_{name}" for name in PROCEDURE_ORDER]
    + COMORBIDITY_ORDER
    + ["antidepressant_90d"]
)


def read_antidepressants_csv(path: str) -> frozenset[str]:
    codes = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip() for h in header] != ["drug_code"]:
            raise ValueError(f"{path}: expected header drug_code")
        for row in reader:
            if row and row[0].strip():
                codes.add(row[0].strip())
    return frozenset(codes)


def write_antidepressants_csv(path: str, codes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["drug_code"])
        for code in sorted(codes):
            w.writerow([code])


def compute_covariates(
    row: CohortRow,
    store: ClaimsStore,
    cmap: ComorbidityMap,
    antidepressant_codes: frozenset[str] = frozenset(),
) -> dict[str, float]:
    """Covariate values keyed by COVARIATE_COLUMNS (plus any custom map keys).

    Comorbidity flags come from diagnoses on claims with service dates in
    days -180..-1 before the index early_anchor; the antidepressant flag
    from tagged fills in days -90..-1.
    """
    if row.person_id not in store.demographics:
        raise MissingDemographics(row.person_id)
    early = row.index_event.early_anchor

    dx_codes: set[str] = set()
    for claim in store.medical.get(row.person_id, ()):
        offset = days_between(early, claim.service_date)
        if -COMORBIDITY_LOOKBACK <= offset <= -1:
            dx_codes.update(claim.diagnoses)

    antidepressant = 0.0
    if antidepressant_codes:
        for fill in store.pharmacy.get(row.person_id, ()):
            offset = days_between(early, fill.fill_date)
            if -ANTIDEPRESSANT_LOOKBACK <= offset <= -1 and fill.drug_code in antidepressant_codes:
                antidepressant = 1.0
                break

    values: dict[str, float] = {
        "age": float(row.age_years),
        "sex_female": 1.0 if row.sex is Sex.FEMALE else 0.0,
        "provider_group_practice": (
            1.0 if row.provider_type is ProviderType.GROUP_PRACTICE else 0.0
        ),
        "los_1_2": 1.0 if row.los_category is LosCategory.ONE_TO_TWO else 0.0,
        "los_3plus": 1.0 if row.los_category is LosCategory.THREE_PLUS else 0.0,
    }
    for name in PROCEDURE_ORDER:
        values[f"proc_{name}"] = 1.0 if row.procedure_name == name else 0.0
    present: set[str] = set()
    for dx in dx_codes:
        present |= cmap.conditions_for(dx)
    for condition in cmap.conditions:
        values[condition] = 1.0 if condition in present else 0.0
    values["antidepressant_90d"] = antidepressant
    return values
