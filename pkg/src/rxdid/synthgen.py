"""Deterministic synthetic-claims generator with injectable policy
effects, plus the ground-truth verdict checker."""
from __future__ import annotations

import hashlib
import json
import math
import os
import random
from dataclasses import dataclass, field, asdict
from datetime import timedelta

from .claims_core import (
    ClaimsStore,
    DrugCatalogEntry,
    EnrollmentSpan,
    MedicalClaim,
    OpioidIngredient,
    PersonDemographics,
    PharmacyClaim,
    ProviderType,
    Setting,
    Sex,
    StudyCalendar,
    days_between,
    store_from_records,
    write_store,
)
from .measures import DEFAULT_COMORBIDITY_MAP


class SynthError(Exception):
    pass


class InvalidConfig(SynthError):
    pass


class RunMismatch(SynthError):
    pass


# Small fixed formulary so MME arithmetic is exact in decimal.
FORMULARY = [
    DrugCatalogEntry("HYD5", OpioidIngredient.HYDROCODONE, True, 5.0, 1.0),
    DrugCatalogEntry("HYD10", OpioidIngredient.HYDROCODONE, True, 10.0, 1.0),
    DrugCatalogEntry("OXY5", OpioidIngredient.OXYCODONE, True, 5.0, 1.5),
    DrugCatalogEntry("TRA50", OpioidIngredient.TRAMADOL, True, 50.0, 0.1),
    DrugCatalogEntry("MOR15", OpioidIngredient.MORPHINE, True, 15.0, 1.0),
    DrugCatalogEntry("AD001", OpioidIngredient.NONE, False, 0.0, 0.0),
]
NON_HYDRO_CODES = ["OXY5", "TRA50", "MOR15"]
ANTIDEPRESSANT_CODES = frozenset({"AD001"})

DEFAULT_PROCEDURE_WEIGHTS = {
    "laparoscopic_cholecystectomy": 24,
    "open_cholecystectomy": 1,
    "laparoscopic_appendectomy": 9,
    "open_appendectomy": 1,
    "inguinal_hernia_repair": 12,
    "carpal_tunnel_release": 9,
    "knee_arthroscopy": 20,
    "total_knee_replacement": 10,
    "total_hip_replacement": 5,
    "breast_excision": 9,
}
PROCEDURE_CPT = {
    "carpal_tunnel_release": "64721",
    "laparoscopic_cholecystectomy": "47562",
    "open_cholecystectomy": "47600",
    "inguinal_hernia_repair": "49505",
    "knee_arthroscopy": "29881",
    "total_knee_replacement": "27447",
    "total_hip_replacement": "27130",
    "laparoscopic_appendectomy": "44970",
    "open_appendectomy": "44950",
    "breast_excision": "19301",
}
INPATIENT_PROB = {
    "total_knee_replacement": 0.9,
    "total_hip_replacement": 0.9,
    "open_cholecystectomy": 0.7,
    "open_appendectomy": 0.5,
}
OFFICE_VISIT_CPT = "99213"


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_providers: int = 100
    high_pref_fraction: float = 0.5
    share_mean_high: float = 0.9
    share_mean_low: float = 0.1
    share_concentration: float = 200.0
    group_practice_fraction: float = 0.3
    patients_per_provider_quarter: float = 2.0
    initial_mme_mean: float = 200.0
    initial_mme_shape: float = 4.0
    refill_prob: float = 0.25
    persistence_prob: float = 0.08
    trend_initial_mme_exposed: float = 0.0
    trend_initial_mme_unexposed: float = 0.0
    trend_refill_exposed: float = 0.0
    trend_refill_unexposed: float = 0.0
    trend_persistence_exposed: float = 0.0
    trend_persistence_unexposed: float = 0.0
    effect_initial_mme: float = 1.0
    effect_refill: float = 1.0
    effect_persistence: float = 1.0
    enrollment_gap_rate: float = 0.02
    prior_opioid_rate: float = 0.02
    no_fill_rate: float = 0.05
    underage_rate: float = 0.01
    sex_female_prob: float = 0.54
    comorbidity_prev: float = 0.06
    antidepressant_prev: float = 0.15
    procedure_weights: dict = field(
        default_factory=lambda: dict(DEFAULT_PROCEDURE_WEIGHTS)
    )

    def validate(self) -> None:
        problems = []
        for name in (
            "high_pref_fraction", "share_mean_high", "share_mean_low",
            "group_practice_fraction", "refill_prob", "persistence_prob",
            "enrollment_gap_rate", "prior_opioid_rate", "no_fill_rate",
            "underage_rate", "sex_female_prob", "comorbidity_prev",
            "antidepressant_prev",
        ):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                problems.append(f"{name}={v} must be in [0, 1]")
        for name in ("effect_initial_mme", "effect_refill", "effect_persistence"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        if self.n_providers < 1:
            problems.append("n_providers must be >= 1")
        if self.initial_mme_mean <= 0 or self.initial_mme_shape <= 0:
            problems.append("initial MME mean and shape must be > 0")
        if self.share_concentration <= 0:
            problems.append("share_concentration must be > 0")
        if self.patients_per_provider_quarter < 0:
            problems.append("patients_per_provider_quarter must be >= 0")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def from_file(cls, path: str) -> "SimConfig":
        """Flat key = value config; unknown keys are rejected."""
        values: dict = {}
        weights: dict = {}
        with open(path, encoding="utf-8") as f:
            for raw in f:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                if not sep:
                    raise InvalidConfig(f"bad config line {raw.strip()!r}")
                key = key.strip()
                val = val.strip()
                if key.startswith("proc_weight_"):
                    weights[key[len("proc_weight_"):]] = float(val)
                    continue
                if key not in cls.__dataclass_fields__ or key == "procedure_weights":
                    raise InvalidConfig(f"unknown config key {key!r}")
                ftype = cls.__dataclass_fields__[key].type
                values[key] = int(val) if ftype == "int" else float(val)
        if weights:
            unknown = set(weights) - set(DEFAULT_PROCEDURE_WEIGHTS)
            if unknown:
                raise InvalidConfig(f"unknown procedures in weights: {sorted(unknown)}")
            values["procedure_weights"] = weights
        return cls(**values)

    def run_id(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class GroundTruth:
    run_id: str
    seed: int
    injected_effects: dict[str, float]
    provider_strata: dict[str, str]
    n_episodes: int


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _inv_logit(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _bernoulli(rng: random.Random, p: float) -> bool:
    return rng.random() < p


def generate(
    config: SimConfig,
    out_dir: str | None = None,
    calendar: StudyCalendar | None = None,
) -> tuple[ClaimsStore, GroundTruth]:
    """Generate synthetic claims; optionally write the five input CSVs
    plus ground_truth.json under out_dir. Single-stream seeded."""
    config.validate()
    calendar = calendar or StudyCalendar()
    rng = random.Random(config.seed)

    proc_names = sorted(config.procedure_weights)
    proc_weights = [config.procedure_weights[n] for n in proc_names]

    providers = []
    strata: dict[str, str] = {}
    for i in range(config.n_providers):
        pid = f"dr{i:05d}"
        high = _bernoulli(rng, config.high_pref_fraction)
        mean = config.share_mean_high if high else config.share_mean_low
        c = config.share_concentration
        pref = rng.betavariate(mean * c, (1.0 - mean) * c)
        ptype = (
            ProviderType.GROUP_PRACTICE
            if _bernoulli(rng, config.group_practice_fraction)
            else ProviderType.INDIVIDUAL
        )
        providers.append((pid, ptype, high, pref))
        strata[pid] = "high" if high else "low"

    spans: list[EnrollmentSpan] = []
    pharmacy: list[PharmacyClaim] = []
    medical: list[MedicalClaim] = []
    persons: list[PersonDemographics] = []

    total_days = days_between(calendar.pre_start, calendar.post_end) + 1
    n_quarters = (total_days + 90) // 91
    person_counter = 0
    claim_counter = 0

    whole = int(config.patients_per_provider_quarter)
    frac = config.patients_per_provider_quarter - whole

    for pid, ptype, high, pref in providers:
        for q in range(n_quarters):
            q_start = calendar.pre_start + timedelta(days=q * 91)
            q_days = min(91, total_days - q * 91)
            n_patients = whole + (1 if _bernoulli(rng, frac) else 0)
            for _ in range(n_patients):
                person_counter += 1
                person_id = f"p{person_counter:07d}"
                service = q_start + timedelta(days=rng.randrange(q_days))

                procedure = rng.choices(proc_names, weights=proc_weights)[0]
                inpatient = _bernoulli(rng, INPATIENT_PROB.get(procedure, 0.1))
                if inpatient:
                    los = rng.randint(1, 4)
                    admission = service
                    discharge = service + timedelta(days=los)
                    setting = Setting.INPATIENT
                else:
                    admission = discharge = None
                    setting = Setting.AMBULATORY
                late = discharge or service
                early = admission or service

                if _bernoulli(rng, config.underage_rate):
                    age = rng.randint(10, 17)
                else:
                    age = rng.randint(18, 85)
                sex = Sex.FEMALE if _bernoulli(rng, config.sex_female_prob) else Sex.MALE
                persons.append(PersonDemographics(person_id, late.year - age, sex))

                # Enrollment; a configured fraction gets a disqualifying gap.
                start = early - timedelta(days=120 + rng.randrange(60))
                end = late + timedelta(days=200 + rng.randrange(60))
                if _bernoulli(rng, config.enrollment_gap_rate):
                    if _bernoulli(rng, 0.5):
                        start = early - timedelta(days=rng.randrange(30, 80))
                    else:
                        end = late + timedelta(days=rng.randrange(30, 170))
                spans.append(EnrollmentSpan(person_id, start, end))

                claim_counter += 1
                medical.append(MedicalClaim(
                    f"c{claim_counter:08d}", person_id, pid, ptype,
                    PROCEDURE_CPT[procedure], service, admission, discharge,
                    setting, (),
                ))

                # Prior comorbidity diagnoses on an office-visit claim.
                dx = [
                    codes[0]
                    for codes in DEFAULT_COMORBIDITY_MAP.values()
                    if _bernoulli(rng, config.comorbidity_prev)
                ]
                for chunk_start in range(0, len(dx), 10):
                    claim_counter += 1
                    medical.append(MedicalClaim(
                        f"c{claim_counter:08d}", person_id, pid, ptype,
                        OFFICE_VISIT_CPT, early - timedelta(days=60),
                        None, None, Setting.AMBULATORY,
                        tuple(dx[chunk_start:chunk_start + 10]),
                    ))

                if _bernoulli(rng, config.antidepressant_prev):
                    pharmacy.append(PharmacyClaim(
                        person_id, early - timedelta(days=30), "AD001", 30.0, 30
                    ))
                if _bernoulli(rng, config.prior_opioid_rate):
                    pharmacy.append(PharmacyClaim(
                        person_id, early - timedelta(days=rng.randint(10, 80)),
                        "HYD5", 10.0, 5,
                    ))

                if _bernoulli(rng, config.no_fill_rate):
                    continue

                exposed_post = high and late >= calendar.post_start
                years = days_between(calendar.pre_start, late) / 365.25
                trend_suffix = "exposed" if high else "unexposed"

                # Initial fill: drug per provider preference, quantity
                # targeting a gamma-distributed MME draw.
                log_mean = (
                    math.log(config.initial_mme_mean)
                    + getattr(config, f"trend_initial_mme_{trend_suffix}") * years
                    + (math.log(config.effect_initial_mme) if exposed_post else 0.0)
                )
                target = rng.gammavariate(
                    config.initial_mme_shape,
                    math.exp(log_mean) / config.initial_mme_shape,
                )
                if _bernoulli(rng, pref):
                    drug = "HYD5" if _bernoulli(rng, 0.6) else "HYD10"
                else:
                    drug = NON_HYDRO_CODES[rng.randrange(len(NON_HYDRO_CODES))]
                entry = next(e for e in FORMULARY if e.drug_code == drug)
                per_unit = entry.strength_mg_per_unit * entry.mme_factor
                quantity = max(1, round(target / per_unit))
                fill_offset = rng.randint(0, 4)
                pharmacy.append(PharmacyClaim(
                    person_id, late + timedelta(days=fill_offset),
                    drug, float(quantity), 5,
                ))

                refill_logit = (
                    _logit(config.refill_prob)
                    + getattr(config, f"trend_refill_{trend_suffix}") * years
                    + (math.log(config.effect_refill) if exposed_post else 0.0)
                )
                if _bernoulli(rng, _inv_logit(refill_logit)):
                    day = rng.randint(fill_offset + 1, 30)
                    pharmacy.append(PharmacyClaim(
                        person_id, late + timedelta(days=day), drug,
                        float(max(1, quantity // 2)), 5,
                    ))

                persistence_logit = (
                    _logit(config.persistence_prob)
                    + getattr(config, f"trend_persistence_{trend_suffix}") * years
                    + (math.log(config.effect_persistence) if exposed_post else 0.0)
                )
                if _bernoulli(rng, _inv_logit(persistence_logit)):
                    pharmacy.append(PharmacyClaim(
                        person_id, late + timedelta(days=rng.randint(90, 180)),
                        drug, float(max(1, quantity // 2)), 5,
                    ))

    store = store_from_records(
        calendar, spans, pharmacy, medical, persons, list(FORMULARY)
    )
    truth = GroundTruth(
        run_id=config.run_id(),
        seed=config.seed,
        injected_effects={
            "initial_mme_7d": config.effect_initial_mme,
            "any_refill_30d": config.effect_refill,
            "persistent_use_90_180": config.effect_persistence,
        },
        provider_strata=strata,
        n_episodes=person_counter,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_store(store, out_dir)
        with open(os.path.join(out_dir, "ground_truth.json"), "w", encoding="utf-8") as f:
            json.dump(asdict(truth), f, indent=2, sort_keys=True)
            f.write("\n")
    return store, truth


def load_ground_truth(path: str) -> GroundTruth:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    return GroundTruth(**data)


def truth_check(truth: GroundTruth, report: dict) -> dict:
    """Compare recovered DiD interactions against injected link-scale
    effects; null effects that reach significance are logged as type-I
    events, not failures."""
    if report.get("run_id") != truth.run_id:
        raise RunMismatch(
            f"report run_id {report.get('run_id')!r} != ground truth {truth.run_id!r}"
        )
    did = report.get("did", {})
    verdicts: dict[str, dict] = {}
    for outcome, multiplier in truth.injected_effects.items():
        est = did.get(outcome)
        if est is None:
            verdicts[outcome] = {"status": "missing"}
            continue
        target = math.log(multiplier)
        covered = est["ci_low"] <= target <= est["ci_high"]
        if multiplier == 1.0:
            verdicts[outcome] = {
                "status": "null",
                "type_i_event": bool(est["significant"]),
                "ci_covers_zero": covered,
            }
        else:
            verdicts[outcome] = {
                "status": "pass" if covered else "fail",
                "injected_log_effect": target,
                "estimate": est["interaction"],
                "ci": [est["ci_low"], est["ci_high"]],
            }
    return verdicts
