"""Constraint partitioning, itinerary parsing, and checker verdicts.

Constraints come in two scopes: local ones are satisfiable from a single
task's results and ride along with that task; global ones need the results
of several tasks and are resolved at synthesis time.  This module also
parses the day-block itinerary format final plans use and evaluates the
implemented checkers against a sandbox dataset.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .plan_model import SubTaskGraph
from .tools import SandboxDataset

SCOPE_LOCAL = "local"
SCOPE_GLOBAL = "global"

SENTINEL = "-"


class ConstraintError(Exception):
    pass


class MalformedItinerary(ConstraintError):
    def __init__(self, detail: str, line: str = ""):
        super().__init__(detail if not line else f"{detail}: {line!r}")
        self.line = line


@dataclass(frozen=True)
class Constraint:
    text: str
    scope: str = SCOPE_GLOBAL
    task_id: str | None = None
    category: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("constraint text must be nonempty")
        if self.scope == SCOPE_LOCAL and not self.task_id:
            raise ValueError("local constraints must carry a task id")


@dataclass(frozen=True)
class ConstraintVerdict:
    constraint: Constraint
    passed: bool
    detail: str

    def __post_init__(self):
        if not self.passed and not self.detail:
            raise ValueError("failing verdicts must explain themselves")


@dataclass(frozen=True)
class ConstraintPartition:
    locals: Mapping[str, tuple[Constraint, ...]]
    globals: tuple[Constraint, ...]
    notes: tuple[str, ...] = ()

    def total(self) -> int:
        return sum(len(v) for v in self.locals.values()) + len(self.globals)


def partition_constraints(graph: SubTaskGraph) -> ConstraintPartition:
    """Split a plan's constraint strings into local and global scopes.

    Every ``local_constraints`` entry becomes a local constraint bound to
    its task; every ``global_constraints`` entry becomes global.  A string
    appearing on both sides breaks the uniqueness rule of the plan template;
    both copies are emitted and the clash is noted.
    """
    locals_: dict[str, tuple[Constraint, ...]] = {}
    notes: list[str] = []
    global_texts = set(graph.global_constraints)
    for tid, task in graph.tasks.items():
        bound = tuple(Constraint(text=c, scope=SCOPE_LOCAL, task_id=tid)
                      for c in task.local_constraints)
        locals_[tid] = bound
        for c in task.local_constraints:
            if c in global_texts:
                notes.append(
                    f"template-rule violation: constraint {c!r} appears both in "
                    f"local_constraints of {tid} and in global_constraints"
                )
    globals_ = tuple(Constraint(text=c, scope=SCOPE_GLOBAL) for c in graph.global_constraints)
    return ConstraintPartition(locals=locals_, globals=globals_, notes=tuple(notes))


# --------------------------------------------------------------------------
# Itinerary parsing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DayBlock:
    day_index: int
    current_city: str
    transportation: str
    breakfast: str
    lunch: str
    dinner: str
    attractions: tuple[str, ...]
    accommodation: str

    def meals(self) -> tuple[str, str, str]:
        return (self.breakfast, self.lunch, self.dinner)


@dataclass(frozen=True)
class ItineraryPlan:
    days: tuple[DayBlock, ...]


_DAY_RE = re.compile(r"^Day\s+(\d+)\s*:\s*$")

_FIELD_LABELS = (
    ("Current City:", "current_city"),
    ("Transportation:", "transportation"),
    ("Breakfast:", "breakfast"),
    ("Attraction:", "attractions"),
    ("Lunch:", "lunch"),
    ("Dinner:", "dinner"),
    ("Accommodation:", "accommodation"),
)


def _clean_attraction(entry: str) -> str:
    entry = entry.strip()
    if entry.endswith("."):
        entry = entry[:-1].rstrip()
    return entry


def parse_itinerary(text: str) -> ItineraryPlan:
    """Parse day blocks out of a final plan text.

    Each block must carry all seven labeled fields ("-" is the explicit
    not-applicable sentinel); multi-attraction lines split on ";".
    """
    lines = text.splitlines()
    day_starts = [(i, int(m.group(1))) for i, line in enumerate(lines)
                  if (m := _DAY_RE.match(line.strip()))]
    if not day_starts:
        raise MalformedItinerary("no 'Day N:' block found")

    days: list[DayBlock] = []
    bounds = day_starts + [(len(lines), -1)]
    for (start, day_index), (end, _) in zip(day_starts, bounds[1:]):
        block_lines = lines[start + 1:end]
        values: dict[str, str] = {}
        for label, key in _FIELD_LABELS:
            found = None
            for raw in block_lines:
                stripped = raw.strip()
                if stripped.startswith(label):
                    found = stripped[len(label):].strip()
                    break
            if found is None:
                raise MalformedItinerary(f"day {day_index} is missing the {label[:-1]!r} line")
            values[key] = found
        attractions = values.pop("attractions")
        if attractions == SENTINEL:
            attraction_list: tuple[str, ...] = ()
        else:
            attraction_list = tuple(_clean_attraction(a) for a in attractions.split(";") if a.strip())
        expected = len(days) + 1
        if day_index != expected:
            raise MalformedItinerary(
                f"day indices must increase from 1; saw day {day_index} where {expected} was expected"
            )
        days.append(DayBlock(day_index=day_index, attractions=attraction_list, **values))
    return ItineraryPlan(days=tuple(days))


# --------------------------------------------------------------------------
# Entity resolution over the sandbox
# --------------------------------------------------------------------------

_PARENTHETICAL_RE = re.compile(r"\s*\([^)]*\)\s*$")


def entity_key(value: str) -> str:
    """Normalized identity of a "Name, City" entity.

    Strips trailing parentheticals and periods, collapses whitespace, and
    casefolds.  Matching is exact after normalization — no fuzzy lookup.
    """
    value = _PARENTHETICAL_RE.sub("", value.strip())
    if value.endswith("."):
        value = value[:-1]
    return " ".join(value.split()).casefold()


def _index_by_name_city(rows: Sequence[Mapping]) -> dict[str, Mapping]:
    return {entity_key(f"{r['Name']}, {r['City']}"): r for r in rows}


_FLIGHT_NO_RE = re.compile(r"Flight Number:\s*([A-Za-z0-9]+)")
_ROUTE_RE = re.compile(r"from\s+(.+?)\s+to\s+([^,;]+)", re.IGNORECASE)


def _transport_mode(value: str) -> str:
    lowered = value.casefold()
    if "flight" in lowered:
        return "flight"
    if "self-driving" in lowered or "self driving" in lowered:
        return "self-driving"
    if "taxi" in lowered:
        return "taxi"
    return "other"


# --------------------------------------------------------------------------
# Checkers
# --------------------------------------------------------------------------

CHECKER_FAMILIES = {
    "within_sandbox": "commonsense",
    "diverse_restaurants": "commonsense",
    "diverse_attractions": "commonsense",
    "minimum_nights": "commonsense",
    "budget": "hard",
    "cuisine": "hard",
}

COMMONSENSE_CHECKERS = ("within_sandbox", "diverse_restaurants", "diverse_attractions", "minimum_nights")

# Benchmark categories with no checker here; routed constraints naming them
# are reported as skipped rather than judged.
UNREGISTERED_CATEGORIES = (
    "complete_information",
    "within_current_city",
    "reasonable_city_route",
    "non_conflicting_transportation",
    "room_rule",
    "room_type",
    "transportation_preference",
)


@dataclass(frozen=True)
class SkippedConstraint:
    constraint: Constraint
    reason: str


@dataclass(frozen=True)
class EvaluationReport:
    verdicts: tuple[ConstraintVerdict, ...]
    skipped: tuple[SkippedConstraint, ...] = ()

    def failed(self) -> tuple[ConstraintVerdict, ...]:
        return tuple(v for v in self.verdicts if not v.passed)

    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def verdict_family(verdict: ConstraintVerdict) -> str:
    return CHECKER_FAMILIES.get(verdict.constraint.category or "", "hard")


def verdicts_to_records(report: EvaluationReport) -> list[dict]:
    """One structured record per constraint, for export."""
    records = [
        {
            "constraint": v.constraint.text,
            "category": v.constraint.category,
            "family": verdict_family(v),
            "passed": v.passed,
            "detail": v.detail,
        }
        for v in report.verdicts
    ]
    records.extend(
        {"constraint": s.constraint.text, "category": s.constraint.category,
         "family": None, "passed": None, "detail": f"skipped: {s.reason}"}
        for s in report.skipped
    )
    return records


def check_within_sandbox(plan: ItineraryPlan, sandbox: SandboxDataset, constraint, ctx) -> ConstraintVerdict:
    """Every named entity must exist in the sandbox tables."""
    restaurants = _index_by_name_city(sandbox.restaurants)
    attractions = _index_by_name_city(sandbox.attractions)
    accommodations = _index_by_name_city(sandbox.accommodations)
    flight_numbers = {str(r["Flight Number"]).casefold() for r in sandbox.flights}
    distance_pairs = {(entity_key(str(r["Origin"])), entity_key(str(r["Destination"])), str(r["Mode"]).casefold())
                      for r in sandbox.distances}

    missing: list[str] = []
    for day in plan.days:
        for meal in day.meals():
            if meal != SENTINEL and entity_key(meal) not in restaurants:
                missing.append(f"day {day.day_index} meal {meal!r}")
        for attraction in day.attractions:
            if entity_key(attraction) not in attractions:
                missing.append(f"day {day.day_index} attraction {attraction!r}")
        if day.accommodation != SENTINEL and entity_key(day.accommodation) not in accommodations:
            missing.append(f"day {day.day_index} accommodation {day.accommodation!r}")
        if day.transportation != SENTINEL:
            mode = _transport_mode(day.transportation)
            if mode == "flight":
                m = _FLIGHT_NO_RE.search(day.transportation)
                if m is None or m.group(1).casefold() not in flight_numbers:
                    missing.append(f"day {day.day_index} flight {day.transportation!r}")
            elif mode in ("self-driving", "taxi"):
                route = _ROUTE_RE.search(day.transportation)
                if route is None:
                    missing.append(f"day {day.day_index} transport route unreadable")
                elif (entity_key(route.group(1)), entity_key(route.group(2)), mode) not in distance_pairs:
                    missing.append(f"day {day.day_index} {mode} route {day.transportation!r}")
    passed = not missing
    detail = "all named entities found in sandbox" if passed else "missing from sandbox: " + "; ".join(missing)
    return ConstraintVerdict(constraint, passed, detail)


def check_diverse_restaurants(plan: ItineraryPlan, sandbox: SandboxDataset, constraint, ctx) -> ConstraintVerdict:
    """No sandbox restaurant may be chosen for more than one meal.

    Meal entries that do not resolve to a sandbox restaurant (hostel free
    breakfasts and the like) are judged by the sandbox-membership rule
    instead, not counted here.
    """
    restaurants = _index_by_name_city(sandbox.restaurants)
    counts: dict[str, int] = {}
    labels: dict[str, str] = {}
    for day in plan.days:
        for meal in day.meals():
            if meal == SENTINEL:
                continue
            key = entity_key(meal)
            if key not in restaurants:
                continue
            counts[key] = counts.get(key, 0) + 1
            labels.setdefault(key, meal)
    repeats = sorted(labels[k] for k, n in counts.items() if n > 1)
    passed = not repeats
    detail = "no restaurant repeats" if passed else "repeated restaurants: " + "; ".join(repeats)
    return ConstraintVerdict(constraint, passed, detail)


def check_diverse_attractions(plan: ItineraryPlan, sandbox: SandboxDataset, constraint, ctx) -> ConstraintVerdict:
    counts: dict[str, int] = {}
    labels: dict[str, str] = {}
    for day in plan.days:
        for attraction in day.attractions:
            key = entity_key(attraction)
            counts[key] = counts.get(key, 0) + 1
            labels.setdefault(key, attraction)
    repeats = sorted(labels[k] for k, n in counts.items() if n > 1)
    passed = not repeats
    detail = "no attraction repeats" if passed else "repeated attractions: " + "; ".join(repeats)
    return ConstraintVerdict(constraint, passed, detail)


def _accommodation_runs(plan: ItineraryPlan) -> list[tuple[str, int]]:
    """Maximal consecutive runs of the same accommodation, with night counts."""
    runs: list[tuple[str, int]] = []
    for day in plan.days:
        name = day.accommodation
        if name == SENTINEL:
            continue
        key = entity_key(name)
        if runs and entity_key(runs[-1][0]) == key:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((name, 1))
    return runs


def check_minimum_nights(plan: ItineraryPlan, sandbox: SandboxDataset, constraint, ctx) -> ConstraintVerdict:
    accommodations = _index_by_name_city(sandbox.accommodations)
    failures = []
    for name, nights in _accommodation_runs(plan):
        row = accommodations.get(entity_key(name))
        if row is None:
            continue  # unresolved entities are the sandbox checker's concern
        minimum = int(row.get("Minimum Nights", 1))
        if nights < minimum:
            failures.append(f"{name}: booked {nights} night(s), minimum is {minimum}")
    passed = not failures
    detail = "minimum-nights requirements met" if passed else "; ".join(failures)
    return ConstraintVerdict(constraint, passed, detail)


_MONEY_RE = re.compile(r"\$?\s*([0-9][0-9,]*(?:\.[0-9]+)?)")


def parse_budget_amount(text: str) -> float | None:
    m = _MONEY_RE.search(text)
    if m is None:
        return None
    return float(m.group(1).replace(",", ""))


def plan_cost(plan: ItineraryPlan, sandbox: SandboxDataset, party_size: int = 1) -> tuple[float, list[str]]:
    """Total plan cost under the fixture accounting rules.

    Flights cost price x party size; self-driving/taxi cost the flat trip
    cost from the distances table; meals cost average cost x party size;
    rooms cost price x nights x ceil(party / max occupancy).  Entities that
    do not resolve contribute nothing (the sandbox checker flags them).
    """
    restaurants = _index_by_name_city(sandbox.restaurants)
    accommodations = _index_by_name_city(sandbox.accommodations)
    flights = {str(r["Flight Number"]).casefold(): r for r in sandbox.flights}
    distances = {(entity_key(str(r["Origin"])), entity_key(str(r["Destination"])), str(r["Mode"]).casefold()): r
                 for r in sandbox.distances}

    total = 0.0
    items: list[str] = []
    for day in plan.days:
        if day.transportation != SENTINEL:
            mode = _transport_mode(day.transportation)
            if mode == "flight":
                m = _FLIGHT_NO_RE.search(day.transportation)
                row = flights.get(m.group(1).casefold()) if m else None
                if row is not None:
                    cost = float(row["Price"]) * party_size
                    total += cost
                    items.append(f"flight {row['Flight Number']}: {cost:g}")
            elif mode in ("self-driving", "taxi"):
                route = _ROUTE_RE.search(day.transportation)
                if route is not None:
                    row = distances.get((entity_key(route.group(1)), entity_key(route.group(2)), mode))
                    if row is not None:
                        cost = float(row["Cost"])
                        total += cost
                        items.append(f"{mode} {route.group(1)}->{route.group(2)}: {cost:g}")
        for meal in day.meals():
            if meal == SENTINEL:
                continue
            row = restaurants.get(entity_key(meal))
            if row is not None:
                cost = float(row["Average Cost"]) * party_size
                total += cost
                items.append(f"meal {row['Name']}: {cost:g}")
    for name, nights in _accommodation_runs(plan):
        row = accommodations.get(entity_key(name))
        if row is None:
            continue
        rooms = max(1, math.ceil(party_size / int(row.get("Maximum Occupancy", 1) or 1)))
        cost = float(row["Price"]) * nights * rooms
        total += cost
        items.append(f"stay {row['Name']} x{nights} night(s) x{rooms} room(s): {cost:g}")
    return total, items


def check_budget(plan: ItineraryPlan, sandbox: SandboxDataset, constraint: Constraint, ctx) -> ConstraintVerdict:
    budget = parse_budget_amount(constraint.text)
    if budget is None:
        return ConstraintVerdict(constraint, False, f"no amount found in {constraint.text!r}")
    total, items = plan_cost(plan, sandbox, party_size=ctx.get("party_size", 1))
    passed = total <= budget
    detail = f"total cost {total:g} vs budget {budget:g} ({'within' if passed else 'over'}); " \
             + "; ".join(items)
    return ConstraintVerdict(constraint, passed, detail)


def _cuisine_vocabulary(sandbox: SandboxDataset) -> set[str]:
    vocab: set[str] = set()
    for row in sandbox.restaurants:
        for cuisine in re.split(r"[;,]", str(row.get("Cuisines", ""))):
            cuisine = cuisine.strip()
            if cuisine:
                vocab.add(cuisine)
    return vocab


def check_cuisine(plan: ItineraryPlan, sandbox: SandboxDataset, constraint: Constraint, ctx) -> ConstraintVerdict:
    """Union semantics: each requested cuisine shows up in at least one
    chosen restaurant's cuisine set."""
    vocab = _cuisine_vocabulary(sandbox)
    text = constraint.text.casefold()
    requested = sorted(c for c in vocab if c.casefold() in text)
    if not requested:
        return ConstraintVerdict(constraint, False,
                                 f"no known cuisine named in {constraint.text!r}")
    restaurants = _index_by_name_city(sandbox.restaurants)
    covered: set[str] = set()
    for day in plan.days:
        for meal in day.meals():
            if meal == SENTINEL:
                continue
            row = restaurants.get(entity_key(meal))
            if row is None:
                continue
            for cuisine in re.split(r"[;,]", str(row.get("Cuisines", ""))):
                covered.add(cuisine.strip().casefold())
    missing = [c for c in requested if c.casefold() not in covered]
    passed = not missing
    detail = ("all requested cuisines covered: " + ", ".join(requested)) if passed \
        else "cuisines not covered by any chosen restaurant: " + ", ".join(missing)
    return ConstraintVerdict(constraint, passed, detail)


_ROUTED_CHECKERS = {
    "budget": check_budget,
    "cuisine": check_cuisine,
}

_ALWAYS_ON = {
    "within_sandbox": ("Within Sandbox", check_within_sandbox),
    "diverse_restaurants": ("Diverse Restaurants", check_diverse_restaurants),
    "diverse_attractions": ("Diverse Attractions", check_diverse_attractions),
    "minimum_nights": ("Minimum Nights Stay", check_minimum_nights),
}

_KEYWORD_ROUTES = (
    ("budget", "budget"),
    ("cuisine", "cuisine"),
)


def route_constraint(constraint: Constraint) -> str | None:
    """Checker key for a constraint: explicit category wins, else keywords."""
    if constraint.category:
        key = constraint.category
        return key if key in _ROUTED_CHECKERS or key in _ALWAYS_ON else None
    lowered = constraint.text.casefold()
    for keyword, key in _KEYWORD_ROUTES:
        if keyword in lowered:
            return key
    return None


def evaluate_constraints(
    plan: ItineraryPlan,
    constraints: Sequence[Constraint],
    sandbox: SandboxDataset,
    party_size: int = 1,
) -> EvaluationReport:
    """One verdict per applicable checker.

    The four commonsense checkers always run; explicit constraints route to
    a checker by category or keyword, and those with no registered checker
    are skipped and reported.
    """
    ctx = {"party_size": party_size}
    verdicts: list[ConstraintVerdict] = []
    for key, (title, fn) in _ALWAYS_ON.items():
        synthetic = Constraint(text=title, scope=SCOPE_GLOBAL, category=key)
        verdicts.append(fn(plan, sandbox, synthetic, ctx))

    skipped: list[SkippedConstraint] = []
    for constraint in constraints:
        key = route_constraint(constraint)
        if key is None:
            skipped.append(SkippedConstraint(constraint, "no registered checker"))
            continue
        if key in _ALWAYS_ON:
            skipped.append(SkippedConstraint(constraint, f"covered by always-on checker {key}"))
            continue
        fn = _ROUTED_CHECKERS[key]
        tagged = Constraint(text=constraint.text, scope=constraint.scope,
                            task_id=constraint.task_id, category=key)
        verdicts.append(fn(plan, sandbox, tagged, ctx))
    return EvaluationReport(verdicts=tuple(verdicts), skipped=tuple(skipped))
