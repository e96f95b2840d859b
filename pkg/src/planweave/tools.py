"""Tool registry, sandbox dataset, and the keyword tool searcher.

The sandbox emulates a table-backed tool environment: six CSV tables
(flights, accommodations, restaurants, attractions, distances, cities)
plus a JSON api catalog indexed by the keyword ToolSearcher.  Tools are
read-only over the ingested dataset, so repeated identical invocations
always yield identical observations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .llm_gateway import canonicalize_arguments


class ToolFailure(Exception):
    """Base class for tool-layer failures."""


class ParseError(ToolFailure):
    def __init__(self, file: str, line: int, detail: str):
        super().__init__(f"{file}:{line}: {detail}")
        self.file = file
        self.line = line


class IntegrityError(ToolFailure):
    pass


class UnknownTool(ToolFailure):
    pass


class MissingArgument(ToolFailure):
    def __init__(self, name: str):
        super().__init__(f"missing required argument {name!r}")
        self.name = name


class BadArgument(ToolFailure):
    def __init__(self, name: str, reason: str):
        super().__init__(f"bad argument {name!r}: {reason}")
        self.name = name


class NoKeywords(ToolFailure):
    """The searcher query normalized to nothing."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str = "string"
    description: str = ""
    required: bool = True


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    params: tuple[ParamSpec, ...] = ()

    def to_wire(self) -> dict:
        """Chat-completions function shape, as in published function lists."""
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": {
                    p.name: {"type": p.type, "description": p.description}
                    for p in self.params
                },
                "required": [p.name for p in self.params if p.required],
            },
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "ToolSpec":
        schema = data.get("parameters", {}) or {}
        props = schema.get("properties", {}) or {}
        required = set(schema.get("required", []) or [])
        params = [
            ParamSpec(
                name=name,
                type=str(meta.get("type", "string")),
                description=str(meta.get("description", "")),
                required=name in required,
            )
            for name, meta in props.items()
        ]
        # required params listed first in rendered docs
        params.sort(key=lambda p: (not p.required,))
        return cls(name=data["name"], description=data.get("description", ""), params=tuple(params))

    def render_doc(self) -> str:
        lines = [f"{self.name}: {self.description}"]
        for p in self.params:
            flag = "required" if p.required else "optional"
            lines.append(f"  - {p.name} ({p.type}, {flag}): {p.description}")
        return "\n".join(lines)


@dataclass(frozen=True)
class ToolInvocation:
    name: str
    arguments: Mapping[str, Any]
    observation: str
    row_count: int


Row = dict[str, Any]


@dataclass(frozen=True)
class SandboxDataset:
    flights: tuple[Row, ...] = ()
    accommodations: tuple[Row, ...] = ()
    restaurants: tuple[Row, ...] = ()
    attractions: tuple[Row, ...] = ()
    distances: tuple[Row, ...] = ()
    cities: tuple[Row, ...] = ()
    api_catalog: tuple[ToolSpec, ...] = ()
    api_responses: tuple[dict, ...] = ()

    def city_names(self) -> set[str]:
        return {str(r["City"]).casefold() for r in self.cities}


_TABLE_NAMES = ("flights", "accommodations", "restaurants", "attractions", "distances", "cities")

# Numeric columns coerced at ingest; negative values are integrity errors.
_NUMERIC_COLUMNS = {"Price", "Cost", "Average Cost", "Minimum Nights", "Maximum Occupancy"}
_INT_COLUMNS = {"Minimum Nights", "Maximum Occupancy"}


def _coerce(column: str, value: str, file: str, line: int):
    value = value.strip()
    if column not in _NUMERIC_COLUMNS:
        return value
    try:
        number = float(value)
    except ValueError:
        raise ParseError(file, line, f"column {column!r} expects a number, got {value!r}")
    if column in _INT_COLUMNS:
        if not number.is_integer():
            raise ParseError(file, line, f"column {column!r} expects an integer, got {value!r}")
        return int(number)
    return int(number) if number.is_integer() else number


def _read_table(path: Path) -> list[Row]:
    rows: list[Row] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(str(path), 1, "missing header row")
        for lineno, raw in enumerate(reader, start=2):
            if None in raw:
                raise ParseError(str(path), lineno, "row has more cells than the header")
            rows.append({k: _coerce(k, v if v is not None else "", str(path), lineno)
                         for k, v in raw.items()})
    return rows


def ingest(paths: Sequence) -> SandboxDataset:
    """Load sandbox tables (CSV) and the api catalog (JSON) from ``paths``.

    Files are recognized by stem: ``flights.csv``, ``accommodations.csv``,
    ``restaurants.csv``, ``attractions.csv``, ``distances.csv``,
    ``cities.csv``, ``api_catalog.json``, ``api_responses.json``.
    Referential integrity is checked after loading.
    """
    tables: dict[str, list[Row]] = {name: [] for name in _TABLE_NAMES}
    catalog: list[ToolSpec] = []
    responses: list[dict] = []
    for raw in paths:
        path = Path(raw)
        stem = path.stem.lower()
        if path.suffix == ".json":
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            if stem == "api_responses":
                responses.extend(data)
            else:
                catalog.extend(ToolSpec.from_wire(entry) for entry in data)
        elif stem in tables:
            tables[stem] = _read_table(path)
        else:
            raise ParseError(str(path), 0, f"unrecognized sandbox file {path.name!r}")

    dataset = SandboxDataset(
        flights=tuple(tables["flights"]),
        accommodations=tuple(tables["accommodations"]),
        restaurants=tuple(tables["restaurants"]),
        attractions=tuple(tables["attractions"]),
        distances=tuple(tables["distances"]),
        cities=tuple(tables["cities"]),
        api_catalog=tuple(catalog),
        api_responses=tuple(responses),
    )
    _check_integrity(dataset)
    return dataset


def _check_integrity(dataset: SandboxDataset) -> None:
    known = dataset.city_names()
    for row in dataset.flights:
        for col in ("Origin", "Destination"):
            if str(row.get(col, "")).casefold() not in known:
                raise IntegrityError(f"flight {row.get('Flight Number')}: unknown city {row.get(col)!r}")
        if row.get("Price", 0) < 0:
            raise IntegrityError(f"flight {row.get('Flight Number')}: negative price")
    for row in dataset.distances:
        for col in ("Origin", "Destination"):
            if str(row.get(col, "")).casefold() not in known:
                raise IntegrityError(f"distance row: unknown city {row.get(col)!r}")
        if row.get("Cost", 0) < 0:
            raise IntegrityError("distance row: negative cost")
    for row in dataset.accommodations:
        if row.get("Price", 0) < 0:
            raise IntegrityError(f"accommodation {row.get('Name')!r}: negative price")
        if row.get("Minimum Nights", 1) < 1:
            raise IntegrityError(f"accommodation {row.get('Name')!r}: minimum nights < 1")
    for row in dataset.restaurants:
        if row.get("Average Cost", 0) < 0:
            raise IntegrityError(f"restaurant {row.get('Name')!r}: negative cost")


# --------------------------------------------------------------------------
# Observation rendering (the enumerated "Search Result of <Type>" layout)
# --------------------------------------------------------------------------

def render_rows(kind: str, rows: Sequence[Row], name_key: str = "Name") -> str:
    """Render result rows with every column, one enumerated item per row."""
    if not rows:
        return f"No results found for {kind}."
    blocks = [f"Search Result of {kind}:"]
    for i, row in enumerate(rows, start=1):
        lines = [f"{i}. Name : {row.get(name_key, '')}"]
        for column, value in row.items():
            if column == name_key:
                continue
            lines.append(f"{column}: {value}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


# --------------------------------------------------------------------------
# Registry and core sandbox tools
# --------------------------------------------------------------------------

ToolFn = Callable[[SandboxDataset, Mapping[str, Any]], tuple[str, int]]


@dataclass(frozen=True)
class Tool:
    spec: ToolSpec
    fn: ToolFn


class ToolRegistry:
    def __init__(self, tools: Sequence[Tool] = ()):
        self._tools: dict[str, Tool] = {}
        for tool in tools:
            self.register(tool)

    def register(self, tool: Tool) -> None:
        if tool.spec.name in self._tools:
            raise ValueError(f"duplicate tool name {tool.spec.name!r}")
        self._tools[tool.spec.name] = tool

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def get(self, name: str) -> Tool:
        if name not in self._tools:
            raise UnknownTool(name)
        return self._tools[name]

    def specs(self) -> tuple[ToolSpec, ...]:
        return tuple(t.spec for t in self._tools.values())

    def specs_for(self, names: Sequence[str]) -> tuple[ToolSpec, ...]:
        return tuple(self._tools[n].spec for n in names if n in self._tools)


def invoke(registry: ToolRegistry, dataset: SandboxDataset, name: str,
           arguments: Mapping[str, Any]) -> ToolInvocation:
    """Dispatch one tool call; the observation lists every result column."""
    tool = registry.get(name)
    args = canonicalize_arguments(arguments)
    for param in tool.spec.params:
        if param.required and param.name not in args:
            raise MissingArgument(param.name)
        if param.name in args and param.type == "number":
            if not isinstance(args[param.name], (int, float)):
                raise BadArgument(param.name, "expected a number")
    observation, row_count = tool.fn(dataset, args)
    return ToolInvocation(name=name, arguments=args, observation=observation, row_count=row_count)


def _eq(a: Any, b: Any) -> bool:
    return str(a).strip().casefold() == str(b).strip().casefold()


def _flight_search(ds: SandboxDataset, args: Mapping[str, Any]):
    rows = [r for r in ds.flights
            if _eq(r["Origin"], args["Departure City"])
            and _eq(r["Destination"], args["Destination City"])
            and _eq(r["Date"], args["Date"])]
    return render_rows("Flights", rows, name_key="Flight Number"), len(rows)


def _distance_matrix(ds: SandboxDataset, args: Mapping[str, Any]):
    mode = str(args["Mode"]).strip().casefold().replace("_", "-")
    rows = [r for r in ds.distances
            if _eq(r["Origin"], args["Origin"])
            and _eq(r["Destination"], args["Destination"])
            and str(r["Mode"]).casefold() == mode]
    return render_rows("Distance Estimates", rows, name_key="Mode"), len(rows)


def _accommodation_search(ds: SandboxDataset, args: Mapping[str, Any]):
    rows = [r for r in ds.accommodations if _eq(r["City"], args["City"])]
    return render_rows("Accommodations", rows), len(rows)


def _restaurant_search(ds: SandboxDataset, args: Mapping[str, Any]):
    rows = [r for r in ds.restaurants if _eq(r["City"], args["City"])]
    return render_rows("Restaurants", rows), len(rows)


def _attraction_search(ds: SandboxDataset, args: Mapping[str, Any]):
    rows = [r for r in ds.attractions if _eq(r["City"], args["City"])]
    return render_rows("Attractions", rows), len(rows)


def _city_search(ds: SandboxDataset, args: Mapping[str, Any]):
    rows = [r for r in ds.cities if _eq(r["State"], args["State"])]
    return render_rows("Cities", rows, name_key="City"), len(rows)


_SANDBOX_TOOLS = (
    Tool(ToolSpec("FlightSearch", "A flight information retrieval tool.",
                  (ParamSpec("Departure City", description="The city you'll be flying out from."),
                   ParamSpec("Destination City", description="The city you aim to reach."),
                   ParamSpec("Date", description="The date of your travel in YYYY-MM-DD format."))),
         _flight_search),
    Tool(ToolSpec("GoogleDistanceMatrix", "Estimate the distance, time and cost between two cities.",
                  (ParamSpec("Origin", description="The departure city of your journey."),
                   ParamSpec("Destination", description="The destination city of your journey."),
                   ParamSpec("Mode", description="The method of transportation. Choices include 'self-driving' and 'taxi'."))),
         _distance_matrix),
    Tool(ToolSpec("AccomodationSearch", "Discover accommodations in your desired city.",
                  (ParamSpec("City", description="The name of the city where you're seeking accommodation."),)),
         _accommodation_search),
    Tool(ToolSpec("RestaurantSearch", "Explore dining options in a city of your choice.",
                  (ParamSpec("City", description="The name of the city where you're seeking restaurants."),)),
         _restaurant_search),
    Tool(ToolSpec("AttractionSearch", "Find attractions in a city of your choice.",
                  (ParamSpec("City", description="The name of the city where you're seeking attractions."),)),
         _attraction_search),
    Tool(ToolSpec("CitySearch", "Find cities in a state of your choice.",
                  (ParamSpec("State", description="The name of the state where you're seeking cities."),)),
         _city_search),
)


# --------------------------------------------------------------------------
# Keyword tool searcher
# --------------------------------------------------------------------------

STOP_WORDS = frozenset({
    "a", "an", "the", "of", "in", "on", "for", "to", "and", "or", "with",
    "is", "are", "be", "this", "that", "it", "at", "by", "from", "as",
})


def normalize_keywords(query: str) -> list[str]:
    tokens = [t for t in query.casefold().split() if t and t not in STOP_WORDS]
    return tokens


def tool_searcher(catalog: Sequence[ToolSpec], keywords: str, top_k: int = 3) -> list[ToolSpec]:
    """Rank catalog tools by how many query keywords their docs mention.

    Keywords are lowercased, whitespace-split, stop-words removed; a keyword
    matches when it occurs as a substring of the tool's name+description.
    Ties break by name; only matching tools are returned, at most ``top_k``.
    """
    tokens = normalize_keywords(keywords)
    if not tokens:
        raise NoKeywords(f"query {keywords!r} normalizes to no keywords")
    scored = []
    for spec in catalog:
        haystack = f"{spec.name} {spec.description}".casefold()
        score = sum(1 for t in tokens if t in haystack)
        if score > 0:
            scored.append((score, spec))
    scored.sort(key=lambda pair: (-pair[0], pair[1].name))
    return [spec for _, spec in scored[:top_k]]


def _tool_searcher_tool(ds: SandboxDataset, args: Mapping[str, Any]):
    matches = tool_searcher(ds.api_catalog, str(args["keywords"]))
    if not matches:
        return "No results found for Tools.", 0
    blocks = ["Search Result of Tools:"]
    for i, spec in enumerate(matches, start=1):
        lines = [f"{i}. Name : {spec.name}", f"Description: {spec.description}"]
        for p in spec.params:
            flag = "required" if p.required else "optional"
            lines.append(f"Parameter: {p.name} ({p.type}, {flag}): {p.description}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks), len(matches)


TOOL_SEARCHER_SPEC = ToolSpec(
    "ToolSearcher",
    "Searches for relevant tools in library based on the keyword.",
    (ParamSpec("keywords", description="The keyword to search for."),),
)


def _canned_api_tool(entry: Mapping[str, Any]) -> Tool:
    spec = ToolSpec.from_wire(entry)
    canned = [
        (canonicalize_arguments(case.get("arguments", {})), str(case.get("observation", "")))
        for case in entry.get("responses", [])
    ]
    default = str(entry.get("default", f"No record found for this {spec.name} request."))

    def fn(ds: SandboxDataset, args: Mapping[str, Any]):
        wanted = canonicalize_arguments(args)
        for case_args, observation in canned:
            if case_args == wanted:
                return observation, 1
        return default, 0

    return Tool(spec, fn)


def build_sandbox_registry(dataset: SandboxDataset) -> ToolRegistry:
    """Registry over the six table-backed search tools."""
    return ToolRegistry(_SANDBOX_TOOLS)


def build_api_registry(dataset: SandboxDataset) -> ToolRegistry:
    """Registry with ToolSearcher plus the canned catalog APIs."""
    registry = ToolRegistry((Tool(TOOL_SEARCHER_SPEC, _tool_searcher_tool),))
    for entry in dataset.api_responses:
        registry.register(_canned_api_tool(entry))
    return registry
